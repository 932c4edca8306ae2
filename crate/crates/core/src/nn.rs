//! Network building blocks on top of the tape engine: convolution, linear,
//! group normalization, FiLM-conditioned residual blocks (with optional
//! up/down resampling inside the block), spatial self-attention, and the
//! glyph-conditional U-Net topology.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Weight initialization: unit-variance fan-in scaling, or the same scaled
/// close to zero for output-side convolutions so residual branches start
/// near-identity while remaining non-degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Standard,
    NearZero,
}

const NEAR_ZERO_SCALE: f64 = 1e-3;
const GROUP_NORM_EPS: f64 = 1e-5;

fn sample_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        T::from_f64(v * std)
    })
}

/// Largest group count ≤ 8 that divides the channel count.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        init: Init,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let mut std = (1.0 / fan_in).sqrt();
        if init == Init::NearZero {
            std *= NEAR_ZERO_SCALE;
        }
        let w = store.add(format!("{name}.w"), sample_normal(rng, &[c_out, c_in, k, k], std));
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Self { w, b, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        let mut std = (1.0 / d_in as f64).sqrt();
        if init == Init::NearZero {
            std *= NEAR_ZERO_SCALE;
        }
        let w = store.add(format!("{name}.w"), sample_normal(rng, &[d_in, d_out], std));
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), ArrayD::from_elem(IxDyn(&[channels]), T::one()));
        let beta = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups, GROUP_NORM_EPS)
    }
}

/// Spatial resampling applied inside a residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resample {
    None,
    Down,
    Up,
}

/// Residual block with FiLM conditioning from an embedding vector, optionally
/// resampling both branches (the downsampling/upsampling role in this
/// architecture is carried by residual blocks, not separate pooling layers).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub resample: Resample,
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_scale: Linear,
    emb_shift: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        resample: Resample,
    ) -> Self {
        let norm1 = GroupNorm::build(store, &format!("{name}.norm1"), c_in);
        let conv1 = Conv2d::build(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, Init::Standard);
        let emb_scale = Linear::build(store, rng, &format!("{name}.emb_scale"), emb_dim, c_out, Init::Standard);
        let emb_shift = Linear::build(store, rng, &format!("{name}.emb_shift"), emb_dim, c_out, Init::Standard);
        let norm2 = GroupNorm::build(store, &format!("{name}.norm2"), c_out);
        let conv2 = Conv2d::build(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, Init::NearZero);
        let skip = if c_in != c_out {
            Some(Conv2d::build(store, rng, &format!("{name}.skip"), c_in, c_out, 1, Init::Standard))
        } else {
            None
        };
        Self { c_in, c_out, resample, norm1, conv1, emb_scale, emb_shift, norm2, conv2, skip }
    }

    fn resample_var<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        match self.resample {
            Resample::None => x,
            Resample::Down => tape.avg_pool2(x),
            Resample::Up => tape.upsample_nearest2(x),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        emb: Var,
    ) -> Var {
        debug_assert_eq!(tape.shape(x)[1], self.c_in, "resblock input channels");
        let mut h = self.norm1.forward(tape, store, x);
        h = tape.silu(h);
        h = self.resample_var(tape, h);
        h = self.conv1.forward(tape, store, h);

        let emb_act = tape.silu(emb);
        let scale = self.emb_scale.forward(tape, store, emb_act);
        let shift = self.emb_shift.forward(tape, store, emb_act);
        h = self.norm2.forward(tape, store, h);
        h = tape.film(h, scale, shift);
        h = tape.silu(h);
        h = self.conv2.forward(tape, store, h);

        let mut sk = self.resample_var(tape, x);
        if let Some(conv) = &self.skip {
            sk = conv.forward(tape, store, sk);
        }
        tape.add(sk, h)
    }
}

/// Pre-norm multi-head self-attention over spatial positions with a residual
/// connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub channels: usize,
    pub heads: usize,
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl AttentionBlock {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Self {
        assert!(channels % heads == 0, "attention channels not divisible by heads");
        let norm = GroupNorm::build(store, &format!("{name}.norm"), channels);
        let qkv = Conv2d::build(store, rng, &format!("{name}.qkv"), channels, channels * 3, 1, Init::Standard);
        let proj = Conv2d::build(store, rng, &format!("{name}.proj"), channels, channels, 1, Init::NearZero);
        Self { channels, heads, norm, qkv, proj }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.norm.forward(tape, store, x);
        let qkv = self.qkv.forward(tape, store, h);
        let attn = tape.attention(qkv, self.heads);
        let proj = self.proj.forward(tape, store, attn);
        tape.add(x, proj)
    }
}

/// Sinusoidal features for integer timesteps: `[sin(t·ω_k) ‖ cos(t·ω_k)]`
/// with frequencies in geometric progression from 1 down to 1/10000.
/// Computed in f64 so distinctness over the full step range is exact.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let omega = if half == 1 {
                1.0
            } else {
                10000f64.powf(-(k as f64) / (half as f64 - 1.0))
            };
            let arg = t as f64 * omega;
            out[[row, k]] = arg.sin();
            out[[row, half + k]] = arg.cos();
        }
    }
    out
}

/// Structural settings for [`UNet::build`].
#[derive(Debug, Clone)]
pub struct UNetShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_resolutions: Vec<usize>,
    pub num_heads: usize,
    pub emb_dim: usize,
}

enum EncoderItem {
    Block { res: ResBlock, attn: Option<AttentionBlock> },
    Down(ResBlock),
}

struct DecoderStage {
    entry: ResBlock,
    entry_attn: Option<AttentionBlock>,
    up: ResBlock,
    blocks: Vec<(ResBlock, Option<AttentionBlock>)>,
}

/// Glyph-conditional U-Net: encoder stages that each end in a downsampling
/// residual block, an attention-capable middle, and a mirrored decoder that
/// consumes one skip connection per encoder output.
pub struct UNet {
    conv_in: Conv2d,
    encoder: Vec<EncoderItem>,
    middle_a: ResBlock,
    middle_attn: Option<AttentionBlock>,
    middle_b: ResBlock,
    decoder: Vec<DecoderStage>,
    final_block: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        shape: &UNetShape,
    ) -> Self {
        let stages = shape.channel_multipliers.len();
        let chans: Vec<usize> = shape
            .channel_multipliers
            .iter()
            .map(|m| m * shape.base_channels)
            .collect();
        let attn_at = |size: usize| shape.attention_resolutions.contains(&size);
        let heads = shape.num_heads;
        let emb = shape.emb_dim;

        let conv_in = Conv2d::build(store, rng, "unet.conv_in", shape.in_channels, shape.base_channels, 3, Init::Standard);

        let mut encoder = Vec::new();
        let mut size = shape.image_size;
        let mut ch = shape.base_channels;
        for (k, &ck) in chans.iter().enumerate() {
            for bidx in 0..shape.blocks_per_stage {
                let name = format!("unet.enc.{k}.block.{bidx}");
                let res = ResBlock::build(store, rng, &name, ch, ck, emb, Resample::None);
                let attn = attn_at(size).then(|| {
                    AttentionBlock::build(store, rng, &format!("{name}.attn"), ck, heads)
                });
                encoder.push(EncoderItem::Block { res, attn });
                ch = ck;
            }
            let down = ResBlock::build(store, rng, &format!("unet.enc.{k}.down"), ch, ch, emb, Resample::Down);
            encoder.push(EncoderItem::Down(down));
            size /= 2;
        }

        let middle_a = ResBlock::build(store, rng, "unet.mid.a", ch, ch, emb, Resample::None);
        let middle_attn = attn_at(size)
            .then(|| AttentionBlock::build(store, rng, "unet.mid.attn", ch, heads));
        let middle_b = ResBlock::build(store, rng, "unet.mid.b", ch, ch, emb, Resample::None);

        let mut decoder = Vec::new();
        for k in (0..stages).rev() {
            let ck = chans[k];
            // Entry block at the post-downsample size, consuming the
            // downsampler's skip.
            let entry = ResBlock::build(
                store,
                rng,
                &format!("unet.dec.{k}.entry"),
                ch + ck,
                ck,
                emb,
                Resample::None,
            );
            let entry_attn = attn_at(size).then(|| {
                AttentionBlock::build(store, rng, &format!("unet.dec.{k}.entry.attn"), ck, heads)
            });
            let up = ResBlock::build(store, rng, &format!("unet.dec.{k}.up"), ck, ck, emb, Resample::Up);
            size *= 2;
            let mut blocks = Vec::new();
            for bidx in 0..shape.blocks_per_stage {
                let name = format!("unet.dec.{k}.block.{bidx}");
                let res = ResBlock::build(store, rng, &name, ck + ck, ck, emb, Resample::None);
                let attn = attn_at(size).then(|| {
                    AttentionBlock::build(store, rng, &format!("{name}.attn"), ck, heads)
                });
                blocks.push((res, attn));
            }
            decoder.push(DecoderStage { entry, entry_attn, up, blocks });
            ch = ck;
        }

        // Final block consumes the conv_in skip.
        let final_block = ResBlock::build(
            store,
            rng,
            "unet.final",
            ch + shape.base_channels,
            shape.base_channels,
            emb,
            Resample::None,
        );
        let out_norm = GroupNorm::build(store, "unet.out.norm", shape.base_channels);
        let out_conv = Conv2d::build(store, rng, "unet.out.conv", shape.base_channels, shape.out_channels, 3, Init::NearZero);

        Self {
            conv_in,
            encoder,
            middle_a,
            middle_attn,
            middle_b,
            decoder,
            final_block,
            out_norm,
            out_conv,
        }
    }

    /// Forward pass: `x` is (N, in_channels, H, W), `emb` is (N, emb_dim).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        emb: Var,
    ) -> Var {
        let mut skips: Vec<Var> = Vec::new();
        let mut h = self.conv_in.forward(tape, store, x);
        skips.push(h);
        for item in &self.encoder {
            match item {
                EncoderItem::Block { res, attn } => {
                    h = res.forward(tape, store, h, emb);
                    if let Some(a) = attn {
                        h = a.forward(tape, store, h);
                    }
                    skips.push(h);
                }
                EncoderItem::Down(res) => {
                    h = res.forward(tape, store, h, emb);
                    skips.push(h);
                }
            }
        }

        h = self.middle_a.forward(tape, store, h, emb);
        if let Some(a) = &self.middle_attn {
            h = a.forward(tape, store, h);
        }
        h = self.middle_b.forward(tape, store, h, emb);

        for stage in &self.decoder {
            let skip = skips.pop().expect("decoder entry skip");
            let cat = tape.concat_channels(h, skip);
            h = stage.entry.forward(tape, store, cat, emb);
            if let Some(a) = &stage.entry_attn {
                h = a.forward(tape, store, h);
            }
            h = stage.up.forward(tape, store, h, emb);
            for (res, attn) in &stage.blocks {
                let skip = skips.pop().expect("decoder block skip");
                let cat = tape.concat_channels(h, skip);
                h = res.forward(tape, store, cat, emb);
                if let Some(a) = attn {
                    h = a.forward(tape, store, h);
                }
            }
        }

        let skip = skips.pop().expect("final skip");
        debug_assert!(skips.is_empty(), "unconsumed skip connections");
        let cat = tape.concat_channels(h, skip);
        h = self.final_block.forward(tape, store, cat, emb);
        h = self.out_norm.forward(tape, store, h);
        h = tape.silu(h);
        self.out_conv.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;

    fn toy_shape() -> UNetShape {
        UNetShape {
            in_channels: 2,
            out_channels: 2,
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            attention_resolutions: vec![4, 2],
            num_heads: 2,
            emb_dim: 16,
        }
    }

    #[test]
    fn unet_forward_shape_contract() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut r = rng::stream(1, "unet-init", &[]);
        let net = UNet::build(&mut store, &mut r, &toy_shape());
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, 2, 8, 8])));
        let emb = tape.constant(ArrayD::zeros(IxDyn(&[3, 16])));
        let out = net.forward(&mut tape, &store, x, emb);
        assert_eq!(tape.shape(out), &[3, 2, 8, 8]);
    }

    #[test]
    fn timestep_embedding_matches_convention() {
        // dim=4, t=1: [sin 1, sin ω₁, cos 1, cos ω₁] with ω₁ = 1e-4.
        let e = timestep_embedding(&[1], 4);
        assert!((e[[0, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((e[[0, 1]] - 1e-4f64.sin()).abs() < 1e-15);
        assert!((e[[0, 2]] - 1f64.cos()).abs() < 1e-15);
        assert!((e[[0, 3]] - 1e-4f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn timestep_embedding_zero_step() {
        let e = timestep_embedding(&[0], 8);
        for k in 0..4 {
            assert_eq!(e[[0, k]], 0.0);
            assert_eq!(e[[0, 4 + k]], 1.0);
        }
    }

    #[test]
    fn timestep_embedding_injective_over_range() {
        let ts: Vec<usize> = (0..=1000).collect();
        let e = timestep_embedding(&ts, 32);
        for t in 1..ts.len() {
            let prev = e.row(t - 1);
            let cur = e.row(t);
            assert!(
                prev.iter().zip(cur.iter()).any(|(a, b)| a != b),
                "embeddings for t={} and t={} collide",
                t - 1,
                t
            );
        }
    }

    #[test]
    fn norm_groups_divides() {
        for c in [1, 2, 3, 4, 6, 8, 12, 16, 32, 48, 128] {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 8);
        }
    }
}
