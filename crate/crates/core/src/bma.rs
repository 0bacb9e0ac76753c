//! Bi-modal attention: high-level evidence of both streams fused into one map at the
//! finest decoder resolution.
//!
//! Per stream: `a = CBR(L4)`, `b = Up(CBR(L5))` to `a`'s size, `c = CBR(cat(a, b))` with one
//! output channel, `S-cat = Up(c)` to level-1 size and `S-att = S-cat · ΣW` (the stream's column
//! sum of the inter-layer weights). Finally `Bi-att = σ((S-att + T-att) / ΣW_all)`.

use stdmmf_tensor::{Builder, Cbr, ConvSpec, Graph, Var};

use crate::error::{Error, Result, Stage};

const WIDTH: usize = 64;

#[derive(Clone, Debug)]
pub struct StreamAttention {
    l4: Cbr,
    l5: Cbr,
    fuse: Cbr,
}

impl StreamAttention {
    pub fn new(b: &mut Builder, name: &str, l4_channels: usize, l5_channels: usize) -> Result<Self> {
        Ok(StreamAttention {
            l4: Cbr::new(b, &format!("{name}.l4"), l4_channels, WIDTH, ConvSpec::square(3)).stage(name)?,
            l5: Cbr::new(b, &format!("{name}.l5"), l5_channels, WIDTH, ConvSpec::square(3)).stage(name)?,
            fuse: Cbr::new(b, &format!("{name}.fuse"), 2 * WIDTH, 1, ConvSpec::square(3)).stage(name)?,
        })
    }

    /// `S-cat` before weighting: `[N,1,h,w]` at `target`.
    pub fn fused_map(&self, g: &mut Graph, l4: Var, l5: Var, target: (usize, usize)) -> Result<Var> {
        let st = "bma stream";
        let [_, _, h4, w4] = g.shape(l4);
        if target.0 < h4 || target.1 < w4 {
            return Err(Error::shape(st, format!("target {}x{} is smaller than level 4 ({h4}x{w4})", target.0, target.1)));
        }
        let a = self.l4.forward(g, l4).stage(st)?;
        let b = self.l5.forward(g, l5).stage(st)?;
        let b = g.resize(b, (h4, w4)).stage(st)?;
        let cat = g.concat(&[a, b]).stage(st)?;
        let c = self.fuse.forward(g, cat).stage(st)?;
        g.resize(c, target).stage(st)
    }

    /// `S-cat · weight_sum` where `weight_sum` is `[N,1,1,1]`.
    pub fn forward(&self, g: &mut Graph, l4: Var, l5: Var, weight_sum: Var, target: (usize, usize)) -> Result<Var> {
        let s_cat = self.fused_map(g, l4, l5, target)?;
        g.mul(s_cat, weight_sum).stage("bma stream")
    }
}

/// `σ((s_att + t_att) / weight_total)`; `weight_total` is `[N,1,1,1]` and must be positive.
pub fn bimodal_attention(g: &mut Graph, s_att: Var, t_att: Var, weight_total: Var) -> Result<Var> {
    if let Some(bad) = g.value(weight_total).iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("bi-modal attention normaliser must be positive, got {bad}")));
    }
    if g.shape(s_att) != g.shape(t_att) {
        return Err(Error::shape("bma", format!("{:?} vs {:?}", g.shape(s_att), g.shape(t_att))));
    }
    let sum = g.add(s_att, t_att).stage("bma")?;
    let inv = g.recip(weight_total);
    let scaled = g.mul(sum, inv).stage("bma")?;
    Ok(g.sigmoid(scaled))
}
