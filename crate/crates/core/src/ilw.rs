//! Inter-layer weights: how much salient content each pyramid level of each stream carries.
//!
//! Per stream, every level goes through a 3×3 CBR to 64 channels and is resized to level 1's
//! size; the five maps are concatenated (320 channels), reduced by a 1×1 CBR to 5 channels and
//! globally average pooled, giving one nonnegative scalar per level. The two streams' scalars
//! are then normalised per level with a two-way softmax over (spatial, temporal).

use stdmmf_tensor::{sigmoid, Builder, Cbr, ConvSpec, Graph, Var};

use crate::encoders::LEVELS;
use crate::error::{Error, Result, Stage};

const WIDTH: usize = 64;

#[derive(Clone, Debug)]
pub struct StreamDescriptor {
    reduce: Vec<Cbr>,
    fuse: Cbr,
}

impl StreamDescriptor {
    pub fn new(b: &mut Builder, name: &str, level_channels: &[usize; LEVELS]) -> Result<Self> {
        let reduce = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Cbr::new(b, &format!("{name}.reduce{i}"), c, WIDTH, ConvSpec::square(3)).stage(name))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Cbr::new(b, &format!("{name}.fuse"), LEVELS * WIDTH, LEVELS, ConvSpec::square(1)).stage(name)?;
        Ok(StreamDescriptor { reduce, fuse })
    }

    /// Per-level pre-pooling map `[N,5,h1,w1]` (after the fusing CBR).
    pub fn interlayer_map(&self, g: &mut Graph, levels: &[Var]) -> Result<Var> {
        let st = "ilw descriptor";
        if levels.len() != LEVELS {
            return Err(Error::config("levels", format!("stream descriptor needs {LEVELS} levels, got {}", levels.len())));
        }
        let [_, _, h, w] = g.shape(levels[0]);
        let mut parts = Vec::with_capacity(LEVELS);
        for (cbr, &lv) in self.reduce.iter().zip(levels) {
            let r = cbr.forward(g, lv).stage(st)?;
            parts.push(g.resize(r, (h, w)).stage(st)?);
        }
        let cat = g.concat(&parts).stage(st)?;
        self.fuse.forward(g, cat).stage(st)
    }

    /// `[N,5,1,1]` nonnegative descriptor, one scalar per level.
    pub fn forward(&self, g: &mut Graph, levels: &[Var]) -> Result<Var> {
        let m = self.interlayer_map(g, levels)?;
        Ok(g.global_avg_pool(m))
    }
}

/// Per-level softmax over the (spatial, temporal) pair, as graph nodes `[N,5,1,1]` each.
/// A two-way softmax equals `(σ(s−t), σ(t−s))`, which is also its overflow-free form.
pub fn interlayer_weight(g: &mut Graph, ws: Var, wt: Var) -> Result<(Var, Var)> {
    let d = g.sub(ws, wt).stage("ilw softmax")?;
    let nd = g.scale(d, -1.0);
    Ok((g.sigmoid(d), g.sigmoid(nd)))
}

/// 5×2 table for one sample: column 0 spatial, column 1 temporal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterlayerWeight {
    pub rows: [[f64; 2]; LEVELS],
}

impl InterlayerWeight {
    pub fn from_descriptors(ws: &[f64], wt: &[f64]) -> Self {
        let mut rows = [[0.0; 2]; LEVELS];
        for i in 0..LEVELS {
            rows[i] = softmax_pair(ws[i], wt[i]);
        }
        InterlayerWeight { rows }
    }

    pub fn from_columns(s: &[f64], t: &[f64]) -> Self {
        let mut rows = [[0.0; 2]; LEVELS];
        for i in 0..LEVELS {
            rows[i] = [s[i], t[i]];
        }
        InterlayerWeight { rows }
    }

    pub fn uniform(s: f64, t: f64) -> Self {
        InterlayerWeight { rows: [[s, t]; LEVELS] }
    }

    pub fn column_sum(&self, col: usize) -> f64 {
        self.rows.iter().map(|r| r[col]).sum()
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r[0] + r[1]).sum()
    }
}

pub fn softmax_pair(a: f64, b: f64) -> [f64; 2] {
    [sigmoid(a - b), sigmoid(b - a)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_descriptors_give_half_half() {
        let w = InterlayerWeight::from_descriptors(&[0.0, 1.0, 2.5, 7.0, 0.3], &[0.0, 1.0, 2.5, 7.0, 0.3]);
        assert!(w.rows.iter().all(|r| *r == [0.5, 0.5]));
    }

    #[test]
    fn ln3_gap_gives_three_quarters() {
        let [s, t] = softmax_pair(3f64.ln() + 0.2, 0.2);
        // e^{ln 3} / (e^{ln 3} + 1) = 3/4
        assert!((s - 0.75).abs() < 1e-12 && (t - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_total_is_five() {
        let w = InterlayerWeight::from_descriptors(&[0.1, 3.0, 0.0, 12.0, 5.5], &[2.0, 0.0, 0.7, 0.0, 5.4]);
        for r in w.rows {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
        assert!((w.total() - 5.0).abs() < 1e-12);
    }
}
