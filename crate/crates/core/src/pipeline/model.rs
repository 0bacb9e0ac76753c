//! Full two-stream network: spatial and temporal encoders, attention, inter-layer weights,
//! gated fusion, decoder and side outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stdmmf_tensor::{Builder, Graph, ParamStore, Var};

use crate::bma::{bimodal_attention, StreamAttention};
use crate::encoders::{build_backbone, spatial_forward, temporal_forward, Backbone, BackboneConfig, LEVELS};
use crate::error::{Error, Result, Stage};
use crate::fusion::{gate_weights, validate_threshold, Decoder, DecoderOutput, GatedWeights};
use crate::ila::{build_ila, InterLayerAttention};
use crate::ilw::{interlayer_weight, InterlayerWeight, StreamDescriptor};
use crate::loss::{self, LossWeights, SideOutput};

use super::config::{Ablation, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gate_threshold: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        ModelConfig { backbone: cfg.backbone_config(), gate_threshold: cfg.gate_threshold, ablation: cfg.ablation }
    }

    pub fn tiny() -> Self {
        Self::from_train(&TrainConfig::tiny())
    }
}

/// Module descriptors. Every module is built regardless of the ablation flags, so that all
/// configurations share one parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub spatial: Backbone,
    pub temporal: Backbone,
    pub ila: Vec<InterLayerAttention>,
    pub descriptor_s: StreamDescriptor,
    pub descriptor_t: StreamDescriptor,
    pub attention_s: StreamAttention,
    pub attention_t: StreamAttention,
    pub decoder: Decoder,
    pub side_s: SideOutput,
    pub side_t: SideOutput,
}

/// Parameters plus the network that reads them.
#[derive(Clone, Debug)]
pub struct Stdmmf {
    pub store: ParamStore,
    pub net: Network,
}

impl Stdmmf {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        validate_threshold(config.gate_threshold)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let bc = &config.backbone;
        let ch = bc.level_channels();
        let net = Network {
            spatial: build_backbone(&mut b, "spatial", bc)?,
            temporal: build_backbone(&mut b, "temporal", bc)?,
            ila: build_ila(&mut b, "ila", &ch)?,
            descriptor_s: StreamDescriptor::new(&mut b, "ilw.spatial", &ch)?,
            descriptor_t: StreamDescriptor::new(&mut b, "ilw.temporal", &ch)?,
            attention_s: StreamAttention::new(&mut b, "bma.spatial", ch[3], ch[4])?,
            attention_t: StreamAttention::new(&mut b, "bma.temporal", ch[3], ch[4])?,
            decoder: Decoder::new(&mut b, "decoder", &ch)?,
            side_s: SideOutput::new(&mut b, "side.spatial", ch[4])?,
            side_t: SideOutput::new(&mut b, "side.temporal", ch[4])?,
            config,
        };
        Ok(Stdmmf { store, net })
    }
}

/// Intermediate values of one forward pass. Graph nodes are only valid for the graph that
/// produced them.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// L1..L5 of the spatial stream (after attention injection).
    pub spatial_levels: [Var; LEVELS],
    /// L1..L5 of the temporal stream; constant zeros when the temporal stream is disabled.
    pub temporal_levels: [Var; LEVELS],
    /// f1..f5 of the plain spatial pass.
    pub plain_levels: [Var; LEVELS],
    /// A1..A4, absent with `disable_ila`.
    pub attentions: Option<[Var; 4]>,
    /// `[N,5,1,1]` spatial / temporal weight columns before gating.
    pub weight_s: Var,
    pub weight_t: Var,
    /// Per-sample weight tables.
    pub interlayer: Vec<InterlayerWeight>,
    pub gated: Vec<GatedWeights>,
    pub s_att: Option<Var>,
    pub t_att: Option<Var>,
    /// Absent with `disable_bma`: the decoder head then sees Fup1 alone.
    pub bi_att: Option<Var>,
    pub mix: [Var; LEVELS],
    pub decoder: DecoderOutput,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final saliency map `[N,1,H,W]`.
    pub out: Var,
    /// Spatial side output.
    pub i_sal: Var,
    /// Temporal side output; absent with `disable_temporal`.
    pub f_sal: Option<Var>,
    pub diagnostics: Diagnostics,
}

impl Network {
    /// Runs the whole network on `frames` and `flows`, both `[N,3,H,W]`.
    pub fn forward(&self, g: &mut Graph, frames: Var, flows: Var) -> Result<ForwardOutput> {
        let flags = self.config.ablation;
        let [n, _, h, w] = g.shape(frames);
        if g.shape(flows) != g.shape(frames) {
            return Err(Error::shape("forward", format!("frames {:?} vs flows {:?}", g.shape(frames), g.shape(flows))));
        }

        let ila = if flags.disable_ila { None } else { Some(self.ila.as_slice()) };
        let sp = spatial_forward(&self.spatial, ila, g, frames)?;
        let ls = sp.levels;
        let lt = if flags.disable_temporal {
            let mut z = ls;
            for (zi, &l) in z.iter_mut().zip(&ls) {
                *zi = g.zeros(g.shape(l));
            }
            z
        } else {
            temporal_forward(&self.temporal, g, flows)?.levels
        };

        let (s, t) = if flags.disable_temporal {
            (g.constant([n, LEVELS, 1, 1], 1.0), g.constant([n, LEVELS, 1, 1], 0.0))
        } else if flags.disable_ilw {
            (g.constant([n, LEVELS, 1, 1], 0.5), g.constant([n, LEVELS, 1, 1], 0.5))
        } else {
            let ws = self.descriptor_s.forward(g, &ls)?;
            let wt = self.descriptor_t.forward(g, &lt)?;
            interlayer_weight(g, ws, wt)?
        };
        let (sv, tv) = (g.to_vec(s), g.to_vec(t));
        let interlayer: Vec<InterlayerWeight> =
            (0..n).map(|i| InterlayerWeight::from_columns(&sv[i * LEVELS..(i + 1) * LEVELS], &tv[i * LEVELS..(i + 1) * LEVELS])).collect();

        let [_, _, h1, w1] = g.shape(ls[0]);
        let (s_att, t_att, bi_att) = if flags.disable_bma {
            (None, None, None)
        } else {
            let sum_s = g.sum_channels(s);
            let s_att = self.attention_s.forward(g, ls[3], ls[4], sum_s, (h1, w1))?;
            let t_att = if flags.disable_temporal {
                g.zeros([n, 1, h1, w1])
            } else {
                let sum_t = g.sum_channels(t);
                self.attention_t.forward(g, lt[3], lt[4], sum_t, (h1, w1))?
            };
            let total = {
                let st = g.add(s, t).stage("bma")?;
                g.sum_channels(st)
            };
            let bi = bimodal_attention(g, s_att, t_att, total)?;
            (Some(s_att), Some(t_att), Some(bi))
        };

        let gated = interlayer.iter().map(|iw| gate_weights(iw, self.config.gate_threshold)).collect::<Result<Vec<_>>>()?;
        let (mut ms, mut mt) = (Vec::with_capacity(n * LEVELS), Vec::with_capacity(n * LEVELS));
        for gw in &gated {
            let (a, b) = gw.masks();
            ms.extend_from_slice(&a);
            mt.extend_from_slice(&b);
        }
        let sg = g.mul_const(s, ms).stage("gate")?;
        let tg = g.mul_const(t, mt).stage("gate")?;
        let mix = self.decoder.mix_levels(g, &ls, &lt, sg, tg)?;
        let decoder = self.decoder.decode(g, &mix, bi_att, (h, w))?;

        let i_sal = self.side_s.forward(g, ls[4], (h, w))?;
        let f_sal = if flags.disable_temporal { None } else { Some(self.side_t.forward(g, lt[4], (h, w))?) };

        Ok(ForwardOutput {
            out: decoder.out,
            i_sal,
            f_sal,
            diagnostics: Diagnostics {
                spatial_levels: ls,
                temporal_levels: lt,
                plain_levels: sp.plain.levels,
                attentions: sp.attentions,
                weight_s: s,
                weight_t: t,
                interlayer,
                gated,
                s_att,
                t_att,
                bi_att,
                mix,
                decoder,
            },
        })
    }
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss1: Var,
    pub loss2: Option<Var>,
    pub loss3: Var,
    pub total: Var,
}

/// `w1·BCE(I_sal) + w2·BCE(F_sal) + BCE(OUT)`, each averaged over all pixels of the batch.
pub fn loss_nodes(g: &mut Graph, fwd: &ForwardOutput, gt: &[f64], weights: LossWeights) -> Result<LossNodes> {
    weights.validate()?;
    let loss1 = loss::bce(g, fwd.i_sal, gt)?;
    let loss2 = fwd.f_sal.map(|f| loss::bce(g, f, gt)).transpose()?;
    let loss3 = loss::bce(g, fwd.out, gt)?;
    let total = loss::combine(g, loss1, loss2, loss3, weights)?;
    Ok(LossNodes { loss1, loss2, loss3, total })
}

/// `(min, max, mean)` of a node, for diagnostic dumps.
pub fn stats(g: &Graph, v: Var) -> (f64, f64, f64) {
    let x = g.value(v);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max, x.iter().sum::<f64>() / x.len().max(1) as f64)
}
