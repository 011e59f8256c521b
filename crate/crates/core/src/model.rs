//! The separation network: a shared convolutional encoder with five
//! strided downsampling stages and four source-specific decoders that
//! upsample back to the input resolution with skip concatenations.
//!
//! Every convolution is followed by batch normalization and a LeakyReLU
//! (slope 0.1); each decoder ends in a feature-map-averaging 1x1 head and a
//! ReLU so estimates stay non-negative. Width profiles scale the feature
//! map counts without touching the five-stage topology.

use crate::error::{Error, Result};
use crate::source::{PerSource, SourceId};
use crate::tensor::{
    batch_norm, concat_channels, conv2d, kaiming_uniform, leaky_relu, nn_upsample2x, relu,
    BatchNormParams, Conv2dParams, Mode, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

/// Negative slope used by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Number of downsampling stages; fixed for all profiles.
pub const STAGES: usize = 5;

/// How the final feature-map averaging head is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Fixed (non-trainable) 1x1 convolution averaging equal groups of
    /// feature maps into the output channels.
    FixedAverage,
    /// Trainable 1x1 convolution of the same shape.
    Learned,
}

/// Feature-map widths for the encoder (input conv + five stages) and the
/// decoder (five upsampling convs + the final conv).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthProfile {
    pub name: String,
    pub encoder_channels: [usize; 6],
    pub decoder_channels: [usize; 6],
}

impl WidthProfile {
    /// Full-scale widths: 16 doubling to 256 on the encoder side.
    pub fn base() -> WidthProfile {
        WidthProfile {
            name: "base".into(),
            encoder_channels: [16, 16, 32, 64, 128, 256],
            decoder_channels: [128, 64, 32, 16, 16, 16],
        }
    }

    /// Like `base` but the three highest-resolution encoder convs compute
    /// 32 feature maps instead of 16; decoder widths are unchanged.
    pub fn encoder_plus() -> WidthProfile {
        WidthProfile {
            name: "encoder+".into(),
            encoder_channels: [32, 32, 32, 64, 128, 256],
            decoder_channels: [128, 64, 32, 16, 16, 16],
        }
    }

    /// Small widths for fast CPU runs.
    pub fn desk() -> WidthProfile {
        WidthProfile {
            name: "desk".into(),
            encoder_channels: [4, 4, 8, 16, 32, 64],
            decoder_channels: [32, 16, 8, 4, 4, 4],
        }
    }

    pub fn by_name(name: &str) -> Option<WidthProfile> {
        match name {
            "base" => Some(WidthProfile::base()),
            "encoder+" | "encoder_plus" => Some(WidthProfile::encoder_plus()),
            "desk" => Some(WidthProfile::desk()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self
            .encoder_channels
            .iter()
            .chain(self.decoder_channels.iter())
            .any(|&c| c == 0)
        {
            return Err(Error::InvalidInput(format!(
                "profile '{}' has a zero-width layer",
                self.name
            )));
        }
        Ok(())
    }
}

/// Conv + batch norm + LeakyReLU.
pub struct ConvBlock {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
}

impl ConvBlock {
    fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> ConvBlock {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = kaiming_uniform(rng, &[out_ch, in_ch, kernel.0, kernel.1], fan_in, LEAKY_SLOPE)
            .with_grad();
        let bias = Tensor::zeros(&[out_ch]).with_grad();
        ConvBlock {
            conv: Conv2dParams {
                weight,
                bias,
                stride,
                padding,
            },
            bn: BatchNormParams::new(out_ch),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.apply(x)?;
        let y = batch_norm(&y, &self.bn, mode)?;
        Ok(leaky_relu(&y, LEAKY_SLOPE))
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv.weight.clone(),
            self.conv.bias.clone(),
            self.bn.gamma.clone(),
            self.bn.beta.clone(),
        ]
    }

    fn state_refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((format!("{prefix}.conv.weight"), StateRef::Param(&self.conv.weight)));
        out.push((format!("{prefix}.conv.bias"), StateRef::Param(&self.conv.bias)));
        out.push((format!("{prefix}.bn.gamma"), StateRef::Param(&self.bn.gamma)));
        out.push((format!("{prefix}.bn.beta"), StateRef::Param(&self.bn.beta)));
        out.push((
            format!("{prefix}.bn.running_mean"),
            StateRef::Buffer(&self.bn.running_mean),
        ));
        out.push((
            format!("{prefix}.bn.running_var"),
            StateRef::Buffer(&self.bn.running_var),
        ));
    }
}

/// Named handle onto one piece of model state, used by checkpointing and
/// best-epoch snapshots.
pub enum StateRef<'a> {
    /// Trainable tensor.
    Param(&'a Tensor),
    /// Non-trainable running statistic.
    Buffer(&'a RefCell<Vec<f64>>),
}

pub struct EncoderStage {
    pub down: ConvBlock,
    pub conv: ConvBlock,
}

/// The shared feature extractor.
pub struct Encoder {
    pub input_conv: ConvBlock,
    pub stages: Vec<EncoderStage>,
}

/// Per-resolution encoder activations consumed by the decoders.
///
/// `skips[0]` is the full-resolution input-conv output, `skips[i]` the
/// output of stage `i` for `i` in 1..=4, and `bottleneck` the stage-5
/// output.
pub struct EncoderFeatures {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl Encoder {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, channels: &[usize; 6]) -> Encoder {
        let input_conv = ConvBlock::new(rng, in_ch, channels[0], (5, 6), (1, 1), (2, 2));
        let mut stages = Vec::with_capacity(STAGES);
        let mut prev = channels[0];
        for s in 1..=STAGES {
            let ch = channels[s];
            stages.push(EncoderStage {
                down: ConvBlock::new(rng, prev, ch, (4, 4), (2, 2), (1, 1)),
                conv: ConvBlock::new(rng, ch, ch, (3, 3), (1, 1), (1, 1)),
            });
            prev = ch;
        }
        Encoder { input_conv, stages }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        let mut cur = self.input_conv.forward(x, mode)?;
        let mut skips = vec![cur.clone()];
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.down.forward(&cur, mode)?;
            cur = stage.conv.forward(&cur, mode)?;
            if i + 1 < STAGES {
                skips.push(cur.clone());
            }
        }
        Ok(EncoderFeatures {
            skips,
            bottleneck: cur,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.input_conv.params();
        for stage in &self.stages {
            p.extend(stage.down.params());
            p.extend(stage.conv.params());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn state_refs<'a>(&'a self, out: &mut Vec<(String, StateRef<'a>)>) {
        self.input_conv.state_refs("model.encoder.in", out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.down.state_refs(&format!("model.encoder.s{}.down", i + 1), out);
            stage.conv.state_refs(&format!("model.encoder.s{}.conv", i + 1), out);
        }
    }
}

/// Final 1x1 head mapping decoder feature maps to output channels,
/// followed by a ReLU.
pub enum FmAvgHead {
    Fixed { weight: Tensor, bias: Tensor },
    Learned { weight: Tensor, bias: Tensor },
}

impl FmAvgHead {
    fn new(rng: &mut ChaCha8Rng, kind: HeadKind, in_ch: usize, out_ch: usize) -> Result<FmAvgHead> {
        if in_ch % out_ch != 0 {
            return Err(Error::InvalidInput(format!(
                "head: {in_ch} feature maps not divisible into {out_ch} output channels"
            )));
        }
        match kind {
            HeadKind::FixedAverage => {
                let group = in_ch / out_ch;
                let mut w = vec![0.0; out_ch * in_ch];
                for o in 0..out_ch {
                    for i in o * group..(o + 1) * group {
                        w[o * in_ch + i] = 1.0 / group as f64;
                    }
                }
                Ok(FmAvgHead::Fixed {
                    weight: Tensor::from_vec(&[out_ch, in_ch, 1, 1], w)?,
                    bias: Tensor::zeros(&[out_ch]),
                })
            }
            HeadKind::Learned => Ok(FmAvgHead::Learned {
                weight: kaiming_uniform(rng, &[out_ch, in_ch, 1, 1], in_ch, 0.0).with_grad(),
                bias: Tensor::zeros(&[out_ch]).with_grad(),
            }),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (w, b) = match self {
            FmAvgHead::Fixed { weight, bias } | FmAvgHead::Learned { weight, bias } => {
                (weight, bias)
            }
        };
        Ok(relu(&conv2d(x, w, b, (1, 1), (0, 0))?))
    }

    fn params(&self) -> Vec<Tensor> {
        match self {
            FmAvgHead::Fixed { .. } => vec![],
            FmAvgHead::Learned { weight, bias } => vec![weight.clone(), bias.clone()],
        }
    }

    fn state_refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        if let FmAvgHead::Learned { weight, bias } = self {
            out.push((format!("{prefix}.head.weight"), StateRef::Param(weight)));
            out.push((format!("{prefix}.head.bias"), StateRef::Param(bias)));
        }
    }
}

/// One source-specific decoder.
pub struct Decoder {
    pub source: SourceId,
    pub blocks: Vec<ConvBlock>,
    pub final_block: ConvBlock,
    pub head: FmAvgHead,
}

impl Decoder {
    fn new(
        rng: &mut ChaCha8Rng,
        source: SourceId,
        enc: &[usize; 6],
        dec: &[usize; 6],
        out_ch: usize,
        head_kind: HeadKind,
    ) -> Result<Decoder> {
        let mut blocks = Vec::with_capacity(STAGES);
        let mut prev = enc[5];
        for i in 0..STAGES {
            blocks.push(ConvBlock::new(rng, prev, dec[i], (3, 3), (1, 1), (1, 1)));
            // After the conv, the skip from the matching encoder resolution
            // is concatenated; the next conv consumes both.
            prev = dec[i] + enc[4 - i];
        }
        let final_block = ConvBlock::new(rng, prev, dec[5], (3, 2), (1, 1), (1, 1));
        let head = FmAvgHead::new(rng, head_kind, dec[5], out_ch)?;
        Ok(Decoder {
            source,
            blocks,
            final_block,
            head,
        })
    }

    pub fn forward(&self, features: &EncoderFeatures, mode: Mode) -> Result<Tensor> {
        let mut cur = features.bottleneck.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            cur = nn_upsample2x(&cur)?;
            cur = block.forward(&cur, mode)?;
            cur = concat_channels(&cur, &features.skips[STAGES - 1 - i])?;
        }
        cur = self.final_block.forward(&cur, mode)?;
        self.head.apply(&cur)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.final_block.params());
        p.extend(self.head.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn state_refs<'a>(&'a self, out: &mut Vec<(String, StateRef<'a>)>) {
        let prefix = format!("model.decoder.{}", self.source);
        for (i, b) in self.blocks.iter().enumerate() {
            b.state_refs(&format!("{prefix}.b{}", i + 1), out);
        }
        self.final_block.state_refs(&format!("{prefix}.final"), out);
        self.head.state_refs(&prefix, out);
    }
}

fn validate_io(profile: &WidthProfile, io_shape: (usize, usize, usize)) -> Result<()> {
    profile.validate()?;
    let (c, frames, bins) = io_shape;
    let div = 1usize << STAGES;
    if c == 0 {
        return Err(Error::InvalidInput("io channels must be >= 1".into()));
    }
    if frames == 0 || frames % div != 0 {
        return Err(Error::InvalidInput(format!(
            "frames axis: {frames} is not divisible by 2^{STAGES}"
        )));
    }
    if bins < div + 1 || (bins - 1) % div != 0 {
        return Err(Error::InvalidInput(format!(
            "bins axis: {bins} - 1 is not divisible by 2^{STAGES}"
        )));
    }
    if profile.decoder_channels[5] % c != 0 {
        return Err(Error::InvalidInput(format!(
            "head: {} feature maps not divisible into {c} output channels",
            profile.decoder_channels[5]
        )));
    }
    Ok(())
}

/// The shared encoder plus all four decoders.
pub struct SharedModel {
    pub encoder: Encoder,
    pub decoders: PerSource<Decoder>,
    pub profile: WidthProfile,
    pub io_shape: (usize, usize, usize),
    pub head_kind: HeadKind,
}

/// Build a shared model for patches of `io_shape = (channels, frames, bins)`.
///
/// `frames` must be divisible by 2^5 and `bins - 1` by 2^5 so the five
/// stages halve cleanly.
pub fn build_shared_model(
    profile: &WidthProfile,
    io_shape: (usize, usize, usize),
    head_kind: HeadKind,
    seed: u64,
) -> Result<SharedModel> {
    validate_io(profile, io_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut rng, io_shape.0, &profile.encoder_channels);
    let decoders = PerSource::try_from_fn(|s| {
        Decoder::new(
            &mut rng,
            s,
            &profile.encoder_channels,
            &profile.decoder_channels,
            io_shape.0,
            head_kind,
        )
    })?;
    Ok(SharedModel {
        encoder,
        decoders,
        profile: profile.clone(),
        io_shape,
        head_kind,
    })
}

/// One full network (own encoder + one decoder) for the independent
/// training baseline.
pub struct SingleTaskModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub source: SourceId,
    pub profile: WidthProfile,
    pub io_shape: (usize, usize, usize),
    pub head_kind: HeadKind,
}

pub fn build_single_model(
    profile: &WidthProfile,
    io_shape: (usize, usize, usize),
    head_kind: HeadKind,
    source: SourceId,
    seed: u64,
) -> Result<SingleTaskModel> {
    validate_io(profile, io_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut rng, io_shape.0, &profile.encoder_channels);
    let decoder = Decoder::new(
        &mut rng,
        source,
        &profile.encoder_channels,
        &profile.decoder_channels,
        io_shape.0,
        head_kind,
    )?;
    Ok(SingleTaskModel {
        encoder,
        decoder,
        source,
        profile: profile.clone(),
        io_shape,
        head_kind,
    })
}

fn check_input(io_shape: (usize, usize, usize), x: &Tensor) -> Result<()> {
    let s = x.shape();
    let ok = s.len() == 4 && s[1] == io_shape.0 && s[2] == io_shape.1 && s[3] == io_shape.2;
    if !ok {
        return Err(Error::ShapeMismatch(format!(
            "model input {:?} does not match io shape (N, {}, {}, {})",
            s, io_shape.0, io_shape.1, io_shape.2
        )));
    }
    Ok(())
}

impl SharedModel {
    /// One encoder pass shared by every decoder.
    pub fn encode(&self, mixture: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        check_input(self.io_shape, mixture)?;
        self.encoder.forward(mixture, mode)
    }

    /// Estimates for all four sources from a single encoder pass.
    pub fn forward(&self, mixture: &Tensor, mode: Mode) -> Result<PerSource<Tensor>> {
        let features = self.encode(mixture, mode)?;
        PerSource::try_from_fn(|s| self.decoders[s].forward(&features, mode))
    }

    /// Estimate for one source only; in eval mode this equals the matching
    /// entry of [`SharedModel::forward`] bit for bit.
    pub fn forward_single(&self, mixture: &Tensor, source: SourceId, mode: Mode) -> Result<Tensor> {
        let features = self.encode(mixture, mode)?;
        self.decoders[source].forward(&features, mode)
    }

    pub fn encoder_params(&self) -> Vec<Tensor> {
        self.encoder.params()
    }

    pub fn decoder_params(&self, source: SourceId) -> Vec<Tensor> {
        self.decoders[source].params()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        for (_, d) in self.decoders.iter() {
            p.extend(d.params());
        }
        p
    }

    /// Trainable scalar count (conv weights and biases, batch-norm gamma and
    /// beta; running statistics and fixed heads excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn state_refs(&self) -> Vec<(String, StateRef<'_>)> {
        let mut out = Vec::new();
        self.encoder.state_refs(&mut out);
        for (_, d) in self.decoders.iter() {
            d.state_refs(&mut out);
        }
        out
    }
}

impl SingleTaskModel {
    pub fn forward(&self, mixture: &Tensor, mode: Mode) -> Result<Tensor> {
        check_input(self.io_shape, mixture)?;
        let features = self.encoder.forward(mixture, mode)?;
        self.decoder.forward(&features, mode)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn state_refs(&self) -> Vec<(String, StateRef<'_>)> {
        let mut out = Vec::new();
        self.encoder.state_refs(&mut out);
        self.decoder.state_refs(&mut out);
        out
    }
}

/// Snapshot every parameter and running statistic as (name, shape, values).
pub fn export_state(refs: &[(String, StateRef<'_>)]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    refs.iter()
        .map(|(name, r)| match r {
            StateRef::Param(t) => (name.clone(), t.shape(), t.to_vec()),
            StateRef::Buffer(b) => {
                let v = b.borrow().clone();
                (name.clone(), vec![v.len()], v)
            }
        })
        .collect()
}

/// Restore a state snapshot; every expected entry must be present with the
/// exact shape, and the error names the first offending tensor.
pub fn import_state(
    refs: &[(String, StateRef<'_>)],
    entries: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
) -> Result<()> {
    for (name, r) in refs {
        let (shape, data) = entries
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        let expected = match r {
            StateRef::Param(t) => t.shape(),
            StateRef::Buffer(b) => vec![b.borrow().len()],
        };
        if *shape != expected {
            return Err(Error::CheckpointShape(format!(
                "{name}: checkpoint {shape:?} vs model {expected:?}"
            )));
        }
        match r {
            StateRef::Param(t) => t.set_data(data),
            StateRef::Buffer(b) => b.borrow_mut().copy_from_slice(data),
        }
    }
    Ok(())
}

/// One printable row of the layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    /// "encoder" or "decoder".
    pub section: &'static str,
    /// Layer kind: Input, Conv, Downsample, Interpolation, Concatenate,
    /// or "FM Avg.".
    pub layer: String,
    /// Kernel/stride/padding in `k(HxW), sS, pP` form, `NN` for
    /// interpolation, `-` otherwise.
    pub detail: String,
    /// Activation shape (channels, frames, bins) after this layer.
    pub shape: (usize, usize, usize),
}

/// Analytically computed activation shapes for every layer, in forward
/// order (decoder rows listed once; all four decoders are identical).
pub fn layer_shape_table(
    profile: &WidthProfile,
    io_shape: (usize, usize, usize),
) -> Result<Vec<LayerRow>> {
    validate_io(profile, io_shape)?;
    let (c, l0, k0) = io_shape;
    let enc = &profile.encoder_channels;
    let dec = &profile.decoder_channels;
    let mut rows = Vec::new();
    rows.push(LayerRow {
        section: "encoder",
        layer: "Input".into(),
        detail: "-".into(),
        shape: (c, l0, k0),
    });
    // Input conv: k(5x6), s1, p2 trims the odd bin axis to a power-of-two
    // multiple while preserving frames.
    let (mut l, mut k) = (l0, k0 - 1);
    rows.push(LayerRow {
        section: "encoder",
        layer: "Conv".into(),
        detail: "k(5x6), s1, p2".into(),
        shape: (enc[0], l, k),
    });
    for s in 1..=STAGES {
        l /= 2;
        k /= 2;
        rows.push(LayerRow {
            section: "encoder",
            layer: "Downsample".into(),
            detail: "k(4x4), s2, p1".into(),
            shape: (enc[s], l, k),
        });
        rows.push(LayerRow {
            section: "encoder",
            layer: "Conv".into(),
            detail: "k(3x3), s1, p1".into(),
            shape: (enc[s], l, k),
        });
    }
    let mut ch = enc[5];
    for i in 0..STAGES {
        l *= 2;
        k *= 2;
        rows.push(LayerRow {
            section: "decoder",
            layer: "Interpolation".into(),
            detail: "NN".into(),
            shape: (ch, l, k),
        });
        rows.push(LayerRow {
            section: "decoder",
            layer: "Conv".into(),
            detail: "k(3x3), s1, p1".into(),
            shape: (dec[i], l, k),
        });
        ch = dec[i] + enc[4 - i];
        rows.push(LayerRow {
            section: "decoder",
            layer: "Concatenate".into(),
            detail: "-".into(),
            shape: (ch, l, k),
        });
    }
    rows.push(LayerRow {
        section: "decoder",
        layer: "Conv".into(),
        detail: "k(3x2), s1, p1".into(),
        shape: (dec[5], l, k + 1),
    });
    rows.push(LayerRow {
        section: "decoder",
        layer: "FM Avg.".into(),
        detail: "k(1x1), s1, p0".into(),
        shape: (c, l, k + 1),
    });
    Ok(rows)
}
