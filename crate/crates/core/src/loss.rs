//! Three-part supervision: BCE on the spatial and temporal side outputs (from each stream's
//! level-5 feature) and on the final map, combined as `w1·loss1 + w2·loss2 + loss3`.

use stdmmf_tensor::{Builder, Conv2d, ConvSpec, Graph, Var};

use crate::error::{Error, Result, Stage};

pub use stdmmf_tensor::BCE_EPS;

/// Side-output head: `σ(Up(Conv1×1_{C→1}(l5)))`.
#[derive(Clone, Debug)]
pub struct SideOutput {
    conv: Conv2d,
}

impl SideOutput {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize) -> Result<Self> {
        Ok(SideOutput { conv: Conv2d::new(b, &format!("{name}.conv"), in_channels, 1, ConvSpec::square(1).with_bias()).stage(name)? })
    }

    pub fn forward(&self, g: &mut Graph, l5: Var, out_size: (usize, usize)) -> Result<Var> {
        let y = self.conv.forward(g, l5).stage("side output")?;
        let y = g.resize(y, out_size).stage("side output")?;
        Ok(g.sigmoid(y))
    }
}

/// Pixel-mean clamped BCE as a graph node.
pub fn bce(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    g.bce(pred, gt.to_vec()).stage("bce")
}

/// Pixel-mean clamped BCE on plain buffers.
pub fn bce_value(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("bce", format!("{} predictions vs {} labels", pred.len(), gt.len())));
    }
    Ok(stdmmf_tensor::bce_value(pred, gt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { spatial: 0.6, temporal: 0.4 }
    }
}

impl LossWeights {
    pub fn new(spatial: f64, temporal: f64) -> Result<Self> {
        let w = LossWeights { spatial, temporal };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spatial >= 0.0) || !self.spatial.is_finite() {
            return Err(Error::config("loss_w1", format!("{} must be a nonnegative number", self.spatial)));
        }
        if !(self.temporal >= 0.0) || !self.temporal.is_finite() {
            return Err(Error::config("loss_w2", format!("{} must be a nonnegative number", self.temporal)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
}

pub fn total_loss(loss1: f64, loss2: f64, loss3: f64, weights: LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, v) in [("loss1", loss1), ("loss2", loss2), ("loss3", loss3)] {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{name} = {v} is not a nonnegative loss")));
        }
    }
    Ok(LossReport { loss1, loss2, loss3, total: weights.spatial * loss1 + weights.temporal * loss2 + loss3 })
}

/// Graph version of [`total_loss`]; `loss2 = None` drops the temporal term.
pub fn combine(g: &mut Graph, loss1: Var, loss2: Option<Var>, loss3: Var, weights: LossWeights) -> Result<Var> {
    let a = g.scale(loss1, weights.spatial);
    let mut t = g.add(a, loss3).stage("loss")?;
    if let Some(l2) = loss2 {
        let b = g.scale(l2, weights.temporal);
        t = g.add(t, b).stage("loss")?;
    }
    Ok(t)
}
