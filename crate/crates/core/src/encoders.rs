//! Residual five-level backbone with an atrous spatial pyramid pooling head, and the two
//! stream encoders built on it.
//!
//! Level outputs of one backbone (stride relative to the input):
//!
//! | level | source                                   | stride |
//! |-------|------------------------------------------|--------|
//! | 1     | 7×7/2 conv, 3×3/2 max pool, residual stage 1 | 4  |
//! | 2     | residual stage 2                         | 8      |
//! | 3     | residual stage 3                         | 16     |
//! | 4     | residual stage 4                         | 32     |
//! | 5     | ASPP over level 4                        | 32     |
//!
//! The spatial stream re-runs stages 2–4 on attention-modulated inputs (see
//! [`spatial_forward`]); the temporal stream is the plain pyramid over a colour-coded flow image.

use stdmmf_tensor::{BatchNorm2d, Builder, Cbr, Conv2d, ConvSpec, Graph, Var, Window};

use crate::error::{Error, Result, Stage};
use crate::ila::{apply_attention, InterLayerAttention};

pub const LEVELS: usize = 5;
pub const LEVEL_STRIDES: [usize; LEVELS] = [4, 8, 16, 32, 32];
pub const ASPP_RATES: [usize; 4] = [1, 6, 12, 18];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channels of residual stages 1–4.
    pub width_schedule: [usize; 4],
    /// Basic blocks per residual stage.
    pub block_counts: [usize; 4],
    pub aspp_out_channels: usize,
    /// Square side of the network input.
    pub input_size: usize,
}

impl BackboneConfig {
    /// ResNet34 topology at 352×352.
    pub fn resnet34() -> Self {
        BackboneConfig { in_channels: 3, width_schedule: [64, 128, 256, 512], block_counts: [3, 4, 6, 3], aspp_out_channels: 64, input_size: 352 }
    }

    /// Reduced topology for tests and smoke runs (32×32 input).
    pub fn tiny() -> Self {
        BackboneConfig { in_channels: 3, width_schedule: [8, 16, 32, 64], block_counts: [1, 1, 1, 1], aspp_out_channels: 64, input_size: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if let Some(i) = self.width_schedule.iter().position(|&w| w == 0) {
            return Err(Error::config("width_schedule", format!("entry {i} is 0; widths must be at least 1")));
        }
        if self.width_schedule.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::config("width_schedule", format!("{:?} is not nondecreasing", self.width_schedule)));
        }
        if let Some(i) = self.block_counts.iter().position(|&b| b == 0) {
            return Err(Error::config("block_counts", format!("entry {i} is 0; every stage needs a block")));
        }
        if self.aspp_out_channels == 0 {
            return Err(Error::config("aspp_out_channels", "must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("input_size", format!("{} is not a positive multiple of 32", self.input_size)));
        }
        Ok(())
    }

    /// Channels of levels 1–5.
    pub fn level_channels(&self) -> [usize; LEVELS] {
        let w = self.width_schedule;
        [w[0], w[1], w[2], w[3], self.aspp_out_channels]
    }

    /// Spatial side of levels 1–5 for a square input of side `size`.
    pub fn level_sizes(size: usize) -> [usize; LEVELS] {
        let l1 = size.div_ceil(2).div_ceil(2);
        let l2 = l1.div_ceil(2);
        let l3 = l2.div_ceil(2);
        let l4 = l3.div_ceil(2);
        [l1, l2, l3, l4, l4]
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(b, &format!("{name}.conv1"), cin, cout, ConvSpec::square(3).stride(stride).padding(1, 1)).stage(name)?;
        let bn1 = BatchNorm2d::new(b, &format!("{name}.bn1"), cout).stage(name)?;
        let conv2 = Conv2d::new(b, &format!("{name}.conv2"), cout, cout, ConvSpec::square(3)).stage(name)?;
        let bn2 = BatchNorm2d::new(b, &format!("{name}.bn2"), cout).stage(name)?;
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(b, &format!("{name}.downsample.0"), cin, cout, ConvSpec::square(1).stride(stride).padding(0, 0)).stage(name)?,
                BatchNorm2d::new(b, &format!("{name}.downsample.1"), cout).stage(name)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock { conv1, bn1, conv2, bn2, downsample })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let st = "backbone block";
        let y = self.conv1.forward(g, x).stage(st)?;
        let y = self.bn1.forward(g, y).stage(st)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y).stage(st)?;
        let y = self.bn2.forward(g, y).stage(st)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, x).stage(st)?;
                bn.forward(g, s).stage(st)?
            }
            None => x,
        };
        let sum = g.add(y, skip).stage(st)?;
        Ok(g.relu(sum))
    }
}

/// Atrous spatial pyramid pooling: four dilated 3×3 branches, an image-pooling branch,
/// channel concatenation and a 1×1 CBR projection. Output size equals input size.
#[derive(Clone, Debug)]
pub struct Aspp {
    branches: Vec<Cbr>,
    pool: Cbr,
    project: Cbr,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Aspp {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        if out_channels == 0 {
            return Err(Error::config("aspp_out_channels", "must be at least 1"));
        }
        let branches = ASPP_RATES
            .iter()
            .enumerate()
            .map(|(i, &r)| Cbr::new(b, &format!("{name}.branch{i}"), in_channels, out_channels, ConvSpec::square(3).dilation(r)).stage(name))
            .collect::<Result<Vec<_>>>()?;
        let pool = Cbr::new(b, &format!("{name}.pool"), in_channels, out_channels, ConvSpec::square(1)).stage(name)?;
        let project = Cbr::new(b, &format!("{name}.project"), out_channels * (ASPP_RATES.len() + 1), out_channels, ConvSpec::square(1)).stage(name)?;
        Ok(Aspp { branches, pool, project, in_channels, out_channels })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let mut outs = Vec::with_capacity(ASPP_RATES.len() + 1);
        for br in &self.branches {
            outs.push(br.forward(g, x).stage("aspp")?);
        }
        let pooled = g.global_avg_pool(x);
        let pooled = self.pool.forward(g, pooled).stage("aspp")?;
        outs.push(g.resize(pooled, (h, w)).stage("aspp")?);
        let cat = g.concat(&outs).stage("aspp")?;
        self.project.forward(g, cat).stage("aspp")
    }

    /// Raw (pre-normalisation) output of dilated branch `i`.
    pub fn branch_conv(&self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        self.branches[i].conv.forward(g, x).stage("aspp")
    }

    pub fn branch_weight(&self, i: usize) -> stdmmf_tensor::ParamId {
        self.branches[i].conv.weight
    }
}

/// Residual encoder: stem + four stages + ASPP.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub prefix: String,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    pub aspp: Aspp,
}

/// Five feature levels of one stream, finest first.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub levels: [Var; LEVELS],
}

pub fn build_backbone(b: &mut Builder, prefix: &str, config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let w = config.width_schedule;
    let stem = Conv2d::new(b, &format!("{prefix}.conv1"), config.in_channels, w[0], ConvSpec::square(7).stride(2).padding(3, 3)).stage(prefix)?;
    let stem_bn = BatchNorm2d::new(b, &format!("{prefix}.bn1"), w[0]).stage(prefix)?;
    let mut stages = Vec::with_capacity(4);
    let mut cin = w[0];
    for (s, (&cout, &blocks)) in w.iter().zip(&config.block_counts).enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let mut stage = Vec::with_capacity(blocks);
        for k in 0..blocks {
            let name = format!("{prefix}.layer{}.{k}", s + 1);
            stage.push(BasicBlock::new(b, &name, if k == 0 { cin } else { cout }, cout, if k == 0 { stride } else { 1 })?);
        }
        stages.push(stage);
        cin = cout;
    }
    let aspp = Aspp::new(b, &format!("{prefix}.aspp"), w[3], config.aspp_out_channels)?;
    Ok(Backbone { config: config.clone(), prefix: prefix.to_string(), stem, stem_bn, stages, aspp })
}

const MAX_POOL: Window = Window { kernel: (3, 3), stride: (2, 2), padding: (1, 1), dilation: (1, 1) };

impl Backbone {
    /// Runs level `index` (0-based: 0 = stem + stage 1, …, 3 = stage 4).
    pub fn level(&self, g: &mut Graph, index: usize, x: Var) -> Result<Var> {
        let mut x = x;
        if index == 0 {
            x = self.stem.forward(g, x).stage("backbone stem")?;
            x = self.stem_bn.forward(g, x).stage("backbone stem")?;
            x = g.relu(x);
            x = g.max_pool(x, MAX_POOL).stage("backbone stem")?;
        }
        for block in &self.stages[index] {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph, image: Var) -> Result<()> {
        let [_, c, h, w] = g.shape(image);
        if c != self.config.in_channels {
            return Err(Error::shape(&self.prefix, format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(&self.prefix, format!("input {h}x{w}: height and width must be positive multiples of 32")));
        }
        Ok(())
    }

    /// Plain forward pass: f1..f4 are the stage outputs, f5 = ASPP(f4).
    pub fn extract_pyramid(&self, g: &mut Graph, image: Var) -> Result<Pyramid> {
        self.check_input(g, image)?;
        let f1 = self.level(g, 0, image)?;
        let f2 = self.level(g, 1, f1)?;
        let f3 = self.level(g, 2, f2)?;
        let f4 = self.level(g, 3, f3)?;
        let f5 = self.aspp.forward(g, f4)?;
        Ok(Pyramid { levels: [f1, f2, f3, f4, f5] })
    }
}

/// Output of the attention-injected spatial stream.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOutput {
    pub levels: [Var; LEVELS],
    /// A1..A4; `None` when attention is disabled.
    pub attentions: Option<[Var; 4]>,
    /// The plain pass, whose features feed the attention modules.
    pub plain: Pyramid,
}

/// Spatial stream. Pass 1 is the plain pyramid; `A_i = ila_i(f_i, f_{i+1})`. Pass 2 shares
/// the backbone: `L1 = x0 ⊙ A1 + x0` with `x0 = f1`, `L_{i+1} = s(L_i) ⊙ A_{i+1} + s(L_i)` for
/// the next residual stage `s`, and `L5 = ASPP(L4)`.
///
/// Stage 1 sees the same input in both passes, so its pass-1 output is reused as `x0`.
/// With `ila = None` the plain pyramid is returned unchanged.
pub fn spatial_forward(backbone: &Backbone, ila: Option<&[InterLayerAttention]>, g: &mut Graph, frame: Var) -> Result<SpatialOutput> {
    let plain = backbone.extract_pyramid(g, frame)?;
    let Some(ila) = ila else {
        return Ok(SpatialOutput { levels: plain.levels, attentions: None, plain });
    };
    if ila.len() != 4 {
        return Err(Error::config("ila", format!("expected 4 attention modules, got {}", ila.len())));
    }
    let f = plain.levels;
    let mut att = [f[0]; 4];
    for i in 0..4 {
        att[i] = ila[i].attention(g, f[i], f[i + 1])?;
    }
    let mut levels = [f[0]; LEVELS];
    let mut x = f[0];
    for i in 0..4 {
        if i > 0 {
            x = backbone.level(g, i, levels[i - 1])?;
        }
        levels[i] = apply_attention(g, x, att[i]).map_err(|e| match e {
            Error::Shape { message, .. } => Error::shape(format!("spatial level {}", i + 1), message),
            other => other,
        })?;
    }
    levels[4] = backbone.aspp.forward(g, levels[3])?;
    Ok(SpatialOutput { levels, attentions: Some(att), plain })
}

/// Temporal stream over a 3-channel colour-coded flow image: the plain pyramid of its own backbone.
pub fn temporal_forward(backbone_t: &Backbone, g: &mut Graph, flow_image: Var) -> Result<Pyramid> {
    backbone_t.extract_pyramid(g, flow_image)
}
