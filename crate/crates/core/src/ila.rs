//! Inter-layer attention between adjacent pyramid levels.
//!
//! Each level is first refined by four parallel kernel stacks (all 64 channels wide,
//! every convolution followed by BN + ReLU, same padding, no dilation):
//!
//! ```text
//! X0 = 1×1
//! X1 = 1×1 → 1×3 → 3×1 → 3×3
//! X2 = 1×1 → 1×5 → 5×1 → 3×3
//! X3 = 1×1 → 1×7 → 7×1 → 3×3
//! F  = ReLU(BN(Conv1×1_{256→64}(cat(X0..X3))) + X0)
//! ```
//!
//! The coarser refined map is resized to the finer one, `Xa = Conv1×1(Up(F_high))`, and
//! `A = σ(Conv1×1_{128→1}(cat(Xa ⊙ F_low, Conv1×1(Xa))))`.

use stdmmf_tensor::{Builder, Cbr, Conv2d, ConvSpec, Graph, Var};

use crate::error::{Error, Result, Stage};

/// Width of every refined feature.
pub const REFINED_CHANNELS: usize = 64;

#[derive(Clone, Debug)]
pub struct MultiKernelRefine {
    branch0: Cbr,
    stacks: Vec<Vec<Cbr>>,
    fuse: Cbr,
}

impl MultiKernelRefine {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize) -> Result<Self> {
        let c = REFINED_CHANNELS;
        let branch0 = Cbr::new(b, &format!("{name}.branch0"), in_channels, c, ConvSpec::square(1)).stage(name)?;
        let mut stacks = Vec::with_capacity(3);
        for (i, k) in [3usize, 5, 7].into_iter().enumerate() {
            let p = format!("{name}.branch{}", i + 1);
            stacks.push(vec![
                Cbr::new(b, &format!("{p}.0"), in_channels, c, ConvSpec::square(1)).stage(name)?,
                Cbr::new(b, &format!("{p}.1"), c, c, ConvSpec::rect(1, k)).stage(name)?,
                Cbr::new(b, &format!("{p}.2"), c, c, ConvSpec::rect(k, 1)).stage(name)?,
                Cbr::new(b, &format!("{p}.3"), c, c, ConvSpec::square(3)).stage(name)?,
            ]);
        }
        let fuse = Cbr::new(b, &format!("{name}.fuse"), 4 * c, c, ConvSpec::square(1)).stage(name)?.without_relu();
        Ok(MultiKernelRefine { branch0, stacks, fuse })
    }

    /// `(C,h,w) → (64,h,w)`, nonnegative.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let st = "ila refine";
        let x0 = self.branch0.forward(g, f).stage(st)?;
        let mut parts = vec![x0];
        for stack in &self.stacks {
            let mut x = f;
            for cbr in stack {
                x = cbr.forward(g, x).stage(st)?;
            }
            parts.push(x);
        }
        let cat = g.concat(&parts).stage(st)?;
        let fused = self.fuse.forward(g, cat).stage(st)?;
        let sum = g.add(fused, x0).stage(st)?;
        Ok(g.relu(sum))
    }
}

/// Attention between level `i` (fine) and level `i+1` (coarse).
#[derive(Clone, Debug)]
pub struct InterLayerAttention {
    pub refine_low: MultiKernelRefine,
    pub refine_high: MultiKernelRefine,
    xa: Conv2d,
    xa_proj: Conv2d,
    head: Conv2d,
}

impl InterLayerAttention {
    pub fn new(b: &mut Builder, name: &str, low_channels: usize, high_channels: usize) -> Result<Self> {
        let c = REFINED_CHANNELS;
        Ok(InterLayerAttention {
            refine_low: MultiKernelRefine::new(b, &format!("{name}.low"), low_channels)?,
            refine_high: MultiKernelRefine::new(b, &format!("{name}.high"), high_channels)?,
            xa: Conv2d::new(b, &format!("{name}.xa"), c, c, ConvSpec::square(1).with_bias()).stage(name)?,
            xa_proj: Conv2d::new(b, &format!("{name}.xa_proj"), c, c, ConvSpec::square(1).with_bias()).stage(name)?,
            head: Conv2d::new(b, &format!("{name}.head"), 2 * c, 1, ConvSpec::square(1).with_bias()).stage(name)?,
        })
    }

    /// Single-channel map in (0,1) at `f_low`'s spatial size.
    pub fn attention(&self, g: &mut Graph, f_low: Var, f_high: Var) -> Result<Var> {
        let st = "ila attention";
        let [_, _, hl, wl] = g.shape(f_low);
        let [_, _, hh, wh] = g.shape(f_high);
        if hh > hl || wh > wl {
            return Err(Error::shape(st, format!("higher level {hh}x{wh} is larger than lower level {hl}x{wl}")));
        }
        let low = self.refine_low.forward(g, f_low)?;
        let high = self.refine_high.forward(g, f_high)?;
        let up = g.resize(high, (hl, wl)).stage(st)?;
        let xa = self.xa.forward(g, up).stage(st)?;
        let xap = g.mul(xa, low).stage(st)?;
        let proj = self.xa_proj.forward(g, xa).stage(st)?;
        let cat = g.concat(&[xap, proj]).stage(st)?;
        let logits = self.head.forward(g, cat).stage(st)?;
        Ok(g.sigmoid(logits))
    }
}

/// Builds the four attention modules for a backbone with the given level channels.
pub fn build_ila(b: &mut Builder, prefix: &str, level_channels: &[usize; 5]) -> Result<Vec<InterLayerAttention>> {
    (0..4).map(|i| InterLayerAttention::new(b, &format!("{prefix}.{i}"), level_channels[i], level_channels[i + 1])).collect()
}

/// `x ⊙ a + x` with the single-channel `a` broadcast over `x`'s channels.
pub fn apply_attention(g: &mut Graph, x: Var, a: Var) -> Result<Var> {
    let [n, _, h, w] = g.shape(x);
    let [an, ac, ah, aw] = g.shape(a);
    if ac != 1 || (an, ah, aw) != (n, h, w) {
        return Err(Error::shape("apply_attention", format!("attention {:?} does not match feature {:?}", g.shape(a), g.shape(x))));
    }
    let xa = g.mul(x, a).stage("apply_attention")?;
    g.add(xa, x).stage("apply_attention")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use stdmmf_tensor::{Mode, ParamStore};

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn apply_attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, h, w) = (3, 4, 5);
        let x = random(&mut rng, 2 * c * h * w);
        let a: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, Mode::EVAL);
        let xv = g.input([2, c, h, w], x.clone()).unwrap();
        let av = g.input([2, 1, h, w], a.clone()).unwrap();
        let y = apply_attention(&mut g, xv, av).unwrap();
        let out = g.value(y);
        for n in 0..2 {
            for ch in 0..c {
                for p in 0..h * w {
                    let xi = x[(n * c + ch) * h * w + p];
                    let expect = xi * (1.0 + a[n * h * w + p]);
                    let got = out[(n * c + ch) * h * w + p];
                    assert!((got - expect).abs() <= 4.0 * f64::EPSILON * expect.abs().max(1.0));
                    // the increment over x is exactly x·a
                    assert!(((got - xi) - xi * a[n * h * w + p]).abs() <= 4.0 * f64::EPSILON * xi.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn apply_attention_identity_and_doubling() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, Mode::EVAL);
        let x = g.input([1, 2, 2, 2], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let zero = g.constant([1, 1, 2, 2], 0.0);
        let one = g.constant([1, 1, 2, 2], 1.0);
        let y0 = apply_attention(&mut g, x, zero).unwrap();
        let y1 = apply_attention(&mut g, x, one).unwrap();
        assert_eq!(g.value(y0), g.value(x));
        let doubled: Vec<f64> = g.value(x).iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(y1), doubled.as_slice());
    }

    #[test]
    fn apply_attention_rejects_spatial_mismatch() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store, Mode::EVAL);
        let x = g.zeros([1, 2, 4, 4]);
        let a = g.zeros([1, 1, 2, 2]);
        assert!(matches!(apply_attention(&mut g, x, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn refine_output_is_64_channels_nonnegative() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MultiKernelRefine::new(&mut Builder::new(&mut store, &mut rng), "r", 5).unwrap();
        for trial in 0..100 {
            let data = random(&mut rng, 2 * 5 * 3 * 3).iter().map(|v| v * (1 + trial % 7) as f64).collect();
            let mut g = Graph::new(&mut store, Mode::TRAIN);
            let x = g.input([2, 5, 3, 3], data).unwrap();
            let y = m.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), [2, 64, 3, 3]);
            assert!(g.value(y).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn larger_high_level_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = InterLayerAttention::new(&mut Builder::new(&mut store, &mut rng), "a", 2, 2).unwrap();
        let mut g = Graph::new(&mut store, Mode::EVAL);
        let low = g.zeros([1, 2, 2, 2]);
        let high = g.zeros([1, 2, 4, 4]);
        assert!(matches!(m.attention(&mut g, low, high), Err(Error::Shape { .. })));
    }
}
