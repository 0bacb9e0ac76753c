//! Threshold gating of the inter-layer weights, per-level stream mixing and the
//! coarse-to-fine decoder.
//!
//! ```text
//! Mix_i = CBR(L_i^S · s_i + L_i^T · t_i)                 (gated weights s_i, t_i)
//! Fup5  = Up(CBR(Mix5))              → size of Mix4
//! Fup_k = Up(CBR(Fup_{k+1} + Mix_k)) → size of Mix_{k-1},  k = 4, 3, 2
//! Fup1  = CBR(Mix1 + Fup2)
//! Fa    = Bi-att ⊙ Fup1
//! OUT   = σ(Up(Conv1×1_{64→1}(CBR(Fa + Fup1))))           → input resolution
//! ```
//!
//! The gate is piecewise constant in the weights: a zeroed entry receives no gradient and
//! the surviving entries are differentiated as if the gate were fixed.

use stdmmf_tensor::{Builder, Cbr, Conv2d, ConvSpec, Graph, Var};

use crate::encoders::LEVELS;
use crate::error::{Error, Result, Stage};
use crate::ilw::InterlayerWeight;

pub const DECODER_WIDTH: usize = 64;
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;

/// Inter-layer weights after gating; same layout as [`InterlayerWeight`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedWeights {
    pub rows: [[f64; 2]; LEVELS],
}

impl GatedWeights {
    /// Multiplicative 0/1 masks (spatial, temporal) reproducing the gate on the ungated weights.
    pub fn masks(&self) -> ([f64; LEVELS], [f64; LEVELS]) {
        let mut s = [1.0; LEVELS];
        let mut t = [1.0; LEVELS];
        for (i, r) in self.rows.iter().enumerate() {
            if r[0] == 0.0 {
                s[i] = 0.0;
            }
            if r[1] == 0.0 {
                t[i] = 0.0;
            }
        }
        (s, t)
    }
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("gate_threshold", format!("{threshold} is outside [0, 1]")));
    }
    Ok(())
}

/// Zeroes the smaller weight of a level when the spatial/temporal gap reaches the threshold
/// (inclusive on both sides). Surviving entries are copied unchanged; rows are not renormalised.
pub fn gate_weights(iw: &InterlayerWeight, threshold: f64) -> Result<GatedWeights> {
    validate_threshold(threshold)?;
    let mut rows = iw.rows;
    for r in rows.iter_mut() {
        let d = r[0] - r[1];
        if d >= threshold {
            r[1] = 0.0;
        } else if d <= -threshold {
            r[0] = 0.0;
        }
    }
    Ok(GatedWeights { rows })
}

/// Decoder intermediates, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Fup1..Fup5.
    pub fup: [Var; LEVELS],
    pub fa: Option<Var>,
    pub logits: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    mix: Vec<Cbr>,
    /// Stage CBRs producing Fup5, Fup4, Fup3, Fup2 (index 0 = Fup5).
    up: Vec<Cbr>,
    fup1: Cbr,
    head: Cbr,
    head_conv: Conv2d,
}

impl Decoder {
    pub fn new(b: &mut Builder, name: &str, level_channels: &[usize; LEVELS]) -> Result<Self> {
        let w = DECODER_WIDTH;
        let mix = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Cbr::new(b, &format!("{name}.mix{}", i + 1), c, w, ConvSpec::square(3)).stage(name))
            .collect::<Result<Vec<_>>>()?;
        let up = [5, 4, 3, 2]
            .iter()
            .map(|k| Cbr::new(b, &format!("{name}.fup{k}"), w, w, ConvSpec::square(3)).stage(name))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            mix,
            up,
            fup1: Cbr::new(b, &format!("{name}.fup1"), w, w, ConvSpec::square(3)).stage(name)?,
            head: Cbr::new(b, &format!("{name}.head"), w, w, ConvSpec::square(3)).stage(name)?,
            head_conv: Conv2d::new(b, &format!("{name}.head_conv"), w, 1, ConvSpec::square(1).with_bias()).stage(name)?,
        })
    }

    /// `Mix_i = CBR(ls_i · s_i + lt_i · t_i)`. `s`/`t` are `[N,5,1,1]` gated weight nodes.
    pub fn mix_levels(&self, g: &mut Graph, ls: &[Var; LEVELS], lt: &[Var; LEVELS], s: Var, t: Var) -> Result<[Var; LEVELS]> {
        let st = "fusion mix";
        let mut out = [ls[0]; LEVELS];
        for i in 0..LEVELS {
            if g.shape(ls[i]) != g.shape(lt[i]) {
                return Err(Error::shape(st, format!("level {}: spatial {:?} vs temporal {:?}", i + 1, g.shape(ls[i]), g.shape(lt[i]))));
            }
            let si = g.narrow(s, i, 1).stage(st)?;
            let ti = g.narrow(t, i, 1).stage(st)?;
            let a = g.mul(ls[i], si).stage(st)?;
            let b = g.mul(lt[i], ti).stage(st)?;
            let sum = g.add(a, b).stage(st)?;
            out[i] = self.mix[i].forward(g, sum).stage(st)?;
        }
        Ok(out)
    }

    /// Decodes Mix1..Mix5 to a probability map of `out_size`. With `bi_att = None` the
    /// attention branch is bypassed and the head sees `Fup1` alone.
    pub fn decode(&self, g: &mut Graph, mix: &[Var; LEVELS], bi_att: Option<Var>, out_size: (usize, usize)) -> Result<DecoderOutput> {
        let st = "fusion decode";
        let size = |g: &Graph, v: Var| {
            let s = g.shape(v);
            (s[2], s[3])
        };
        let (h1, w1) = size(g, mix[0]);
        if out_size.0 < h1 || out_size.1 < w1 {
            return Err(Error::config("out_size", format!("{}x{} is smaller than Mix1 ({h1}x{w1})", out_size.0, out_size.1)));
        }
        if let Some(a) = bi_att {
            let [_, c, h, w] = g.shape(a);
            if c != 1 || (h, w) != (h1, w1) {
                return Err(Error::shape(st, format!("Bi-att {:?} does not match Mix1 {:?}", g.shape(a), g.shape(mix[0]))));
            }
        }
        let mut fup = [mix[0]; LEVELS];
        // Fup5
        let y = self.up[0].forward(g, mix[4]).stage(st)?;
        fup[4] = g.resize(y, size(g, mix[3])).stage(st)?;
        // Fup4, Fup3, Fup2
        for (j, k) in [4usize, 3, 2].into_iter().enumerate() {
            let sum = g.add(fup[k], mix[k - 1]).stage(st)?;
            let y = self.up[j + 1].forward(g, sum).stage(st)?;
            fup[k - 1] = g.resize(y, size(g, mix[k - 2])).stage(st)?;
        }
        let sum = g.add(mix[0], fup[1]).stage(st)?;
        fup[0] = self.fup1.forward(g, sum).stage(st)?;
        let (head_in, fa) = match bi_att {
            Some(a) => {
                let fa = g.mul(fup[0], a).stage(st)?;
                (g.add(fa, fup[0]).stage(st)?, Some(fa))
            }
            None => (fup[0], None),
        };
        let y = self.head.forward(g, head_in).stage(st)?;
        let y = self.head_conv.forward(g, y).stage(st)?;
        let logits = g.resize(y, out_size).stage(st)?;
        let out = g.sigmoid(logits);
        Ok(DecoderOutput { fup, fa, logits, out })
    }
}
