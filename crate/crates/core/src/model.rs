//! Toy latent video diffusion model.
//!
//! A small residual conv network per frame with spatial self-attention,
//! cross-attention over prompt tokens, and one frame-axis attention for
//! temporal mixing. Also holds the pixel encoder/decoder and the learned
//! text projection. All parameters live in a flat name -> tensor map so
//! checkpoints, checksums, and optimizers stay trivial.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::rng;
use crate::schedule::{add_noise, NoiseSchedule};
use crate::text;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
    pub frames: usize,
    pub width: usize,
    pub text_width: usize,
    pub pixel_h: usize,
    pub pixel_w: usize,
    pub blocks: usize,
    /// Decoder bypass: sigmoid of the latent itself (needs latent_c = 3).
    pub identity_decoder: bool,
}

impl ModelConfig {
    pub fn toy_default() -> Self {
        ModelConfig {
            latent_h: 8,
            latent_w: 8,
            latent_c: 4,
            frames: 16,
            width: 16,
            text_width: text::DEFAULT_TEXT_WIDTH,
            pixel_h: 32,
            pixel_w: 32,
            blocks: 2,
            identity_decoder: false,
        }
    }

    pub fn upscale(&self) -> usize {
        self.pixel_h / self.latent_h
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.latent_h >= 2
            && self.latent_w >= 2
            && self.latent_c >= 1
            && self.frames >= 1
            && self.width >= 2
            && self.width % 2 == 0
            && self.text_width >= 2
            && self.blocks >= 1;
        if !dims_ok {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        if self.pixel_h % self.latent_h != 0
            || self.pixel_w % self.latent_w != 0
            || self.pixel_h / self.latent_h != self.pixel_w / self.latent_w
            || !self.upscale().is_power_of_two()
        {
            return Err(Error::Config(format!(
                "pixel {}x{} must be a power-of-two multiple of latent {}x{}",
                self.pixel_h, self.pixel_w, self.latent_h, self.latent_w
            )));
        }
        if self.identity_decoder && self.latent_c != 3 {
            return Err(Error::Config("identity decoder requires exactly 3 latent channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnKind::SelfAttn => write!(f, "self"),
            AttnKind::Cross => write!(f, "cross"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proj::Q => write!(f, "q"),
            Proj::K => write!(f, "k"),
            Proj::V => write!(f, "v"),
        }
    }
}

/// Address of one attention projection eligible for adapter deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: AttnKind,
    pub proj: Proj,
}

impl LayerId {
    /// Stable string id, e.g. "attn0.self.q".
    pub fn key(&self) -> String {
        format!("attn{}.{}.{}", self.block, self.kind, self.proj)
    }

    /// Name of the projection weight inside the parameter map.
    pub fn weight_param(&self) -> String {
        format!("attn{}.{}.w{}", self.block, self.kind, self.proj)
    }

    pub fn parse(key: &str) -> Result<LayerId> {
        let parts: Vec<&str> = key.split('.').collect();
        let bad = || Error::Lookup(format!("unparseable layer id '{key}'"));
        if parts.len() != 3 || !parts[0].starts_with("attn") {
            return Err(bad());
        }
        let block = parts[0][4..].parse::<usize>().map_err(|_| bad())?;
        let kind = match parts[1] {
            "self" => AttnKind::SelfAttn,
            "cross" => AttnKind::Cross,
            _ => return Err(bad()),
        };
        let proj = match parts[2] {
            "q" => Proj::Q,
            "k" => Proj::K,
            "v" => Proj::V,
            _ => return Err(bad()),
        };
        Ok(LayerId { block, kind, proj })
    }
}

pub fn attention_layer_ids(cfg: &ModelConfig) -> Vec<LayerId> {
    let mut ids = Vec::new();
    for block in 0..cfg.blocks {
        for kind in [AttnKind::SelfAttn, AttnKind::Cross] {
            for proj in [Proj::Q, Proj::K, Proj::V] {
                ids.push(LayerId { block, kind, proj });
            }
        }
    }
    ids
}

/// (input dim, output dim) of a projection weight.
pub fn layer_dims(cfg: &ModelConfig, id: &LayerId) -> (usize, usize) {
    match (id.kind, id.proj) {
        (AttnKind::Cross, Proj::K) | (AttnKind::Cross, Proj::V) => (cfg.text_width, cfg.width),
        _ => (cfg.width, cfg.width),
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, RawTensor>,
}

/// Per-layer (down, up) factors the sampler passes in during gated steps.
pub type AdapterOverlay<'a> = Option<&'a BTreeMap<String, (Tensor, Tensor)>>;

fn randn(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> RawTensor {
    let mut r = rng::stream(seed, name, 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.sample::<f64, _>(StandardNormal) * std).collect();
    RawTensor::new(shape, data)
}

impl DenoiserState {
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<DenoiserState> {
        config.validate()?;
        let w = config.width;
        let c = config.latent_c;
        let e = config.text_width;
        let mut p: BTreeMap<String, RawTensor> = BTreeMap::new();

        let conv_std = |ci: usize| (1.0 / (ci as f64 * 9.0)).sqrt();
        let lin_std = |d: usize| (1.0 / d as f64).sqrt();
        let conv = |p: &mut BTreeMap<String, RawTensor>, name: &str, co: usize, ci: usize| {
            p.insert(format!("{name}.w"), randn(seed, &format!("{name}.w"), vec![co, ci, 3, 3], conv_std(ci)));
            p.insert(format!("{name}.b"), RawTensor::zeros(vec![co]));
        };

        p.insert("temb.w1".into(), randn(seed, "temb.w1", vec![w, w], lin_std(w)));
        p.insert("temb.b1".into(), RawTensor::zeros(vec![w]));
        p.insert("temb.w2".into(), randn(seed, "temb.w2", vec![w, w], lin_std(w)));
        p.insert("temb.b2".into(), RawTensor::zeros(vec![w]));

        conv(&mut p, "conv_in", w, c);
        for b in 0..config.blocks {
            p.insert(format!("res{b}.g1"), RawTensor::full(vec![w], 1.0));
            conv(&mut p, &format!("res{b}.c1"), w, w);
            p.insert(format!("res{b}.g2"), RawTensor::full(vec![w], 1.0));
            conv(&mut p, &format!("res{b}.c2"), w, w);

            for kind in [AttnKind::SelfAttn, AttnKind::Cross] {
                p.insert(format!("attn{b}.{kind}.norm.g"), RawTensor::full(vec![w], 1.0));
                for proj in [Proj::Q, Proj::K, Proj::V] {
                    let id = LayerId { block: b, kind, proj };
                    let (d, k) = layer_dims(&config, &id);
                    p.insert(id.weight_param(), randn(seed, &id.weight_param(), vec![d, k], lin_std(d)));
                }
                p.insert(
                    format!("attn{b}.{kind}.wo"),
                    randn(seed, &format!("attn{b}.{kind}.wo"), vec![w, w], 0.25 * lin_std(w)),
                );
                p.insert(format!("attn{b}.{kind}.bo"), RawTensor::zeros(vec![w]));
            }
        }
        p.insert("temporal.norm.g".into(), RawTensor::full(vec![w], 1.0));
        for name in ["temporal.wq", "temporal.wk", "temporal.wv"] {
            p.insert(name.into(), randn(seed, name, vec![w, w], lin_std(w)));
        }
        p.insert("temporal.wo".into(), randn(seed, "temporal.wo", vec![w, w], 0.25 * lin_std(w)));
        p.insert("temporal.bo".into(), RawTensor::zeros(vec![w]));

        p.insert("norm_out.g".into(), RawTensor::full(vec![w], 1.0));
        conv(&mut p, "conv_out", c, w);

        p.insert("text.proj".into(), randn(seed, "text.proj", vec![e, e], lin_std(e)));

        conv(&mut p, "enc.c1", w, 3);
        conv(&mut p, "enc.c2", c, w);
        conv(&mut p, "dec.c1", w, c);
        conv(&mut p, "dec.c2", 3, w);

        Ok(DenoiserState { config, params: p })
    }

    /// Frozen view: constants in the autodiff graph.
    pub fn leaves(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, v)| (k.clone(), Tensor::leaf(v.clone()))).collect()
    }

    /// Trainable view: every parameter tracked for gradients.
    pub fn vars(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, v)| (k.clone(), Tensor::var(v.clone()))).collect()
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params)
    }
}

/// Order-sensitive FNV-1a over names and raw f64 bits.
pub fn params_checksum(params: &BTreeMap<String, RawTensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (name, tensor) in params {
        for b in name.as_bytes() {
            eat(*b);
        }
        for v in tensor.data().iter() {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

pub fn tensors_bitwise_eq(a: &RawTensor, b: &RawTensor) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn tanh(x: &Tensor) -> Tensor {
    x.affine(2.0, 0.0).sigmoid().affine(2.0, -1.0)
}

fn time_embedding(t: usize, width: usize) -> RawTensor {
    let half = width / 2;
    let mut v = Vec::with_capacity(width);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / half as f64).exp();
        v.push((t as f64 * freq).sin());
        v.push((t as f64 * freq).cos());
    }
    RawTensor::new(vec![width], v)
}

struct Ctx<'a> {
    params: &'a BTreeMap<String, Tensor>,
    overlay: AdapterOverlay<'a>,
}

impl<'a> Ctx<'a> {
    fn p(&self, name: &str) -> Result<&'a Tensor> {
        self.params.get(name).ok_or_else(|| Error::Lookup(format!("missing parameter '{name}'")))
    }

    /// x [m,d] times the named projection, plus the low-rank residual when an
    /// overlay entry targets this layer.
    fn project(&self, x: &Tensor, id: &LayerId) -> Result<Tensor> {
        let base = x.matmul(self.p(&id.weight_param())?);
        if let Some(overlay) = self.overlay {
            if let Some((down, up)) = overlay.get(&id.key()) {
                return Ok(base.add(&x.matmul(down).matmul(up)));
            }
        }
        Ok(base)
    }
}

fn res_block(ctx: &Ctx, h: &Tensor, name: &str, temb: &Tensor) -> Result<Tensor> {
    let u = h.rms_norm_channels(ctx.p(&format!("{name}.g1"))?, NORM_EPS).silu();
    let u = u.conv2d(ctx.p(&format!("{name}.c1.w"))?, 1).add_channel(ctx.p(&format!("{name}.c1.b"))?);
    let u = u.add_channel(temb);
    let u = u.rms_norm_channels(ctx.p(&format!("{name}.g2"))?, NORM_EPS).silu();
    let u = u.conv2d(ctx.p(&format!("{name}.c2.w"))?, 1).add_channel(ctx.p(&format!("{name}.c2.b"))?);
    Ok(h.add(&u))
}

/// Spatial self-attention over the H*W grid of every frame.
fn self_attention(ctx: &Ctx, h: &Tensor, block: usize) -> Result<Tensor> {
    let (n, w, hh, ww) = {
        let s = h.shape();
        (s[0], s[1], s[2], s[3])
    };
    let hw = hh * ww;
    let x = h.rms_norm_channels(ctx.p(&format!("attn{block}.self.norm.g"))?, NORM_EPS);
    let flat = x.reshape(vec![n, w, hw]).permute(&[0, 2, 1]).reshape(vec![n * hw, w]);
    let id = |proj| LayerId { block, kind: AttnKind::SelfAttn, proj };
    let q = ctx.project(&flat, &id(Proj::Q))?.reshape(vec![n, hw, w]);
    let k = ctx.project(&flat, &id(Proj::K))?.reshape(vec![n, hw, w]);
    let v = ctx.project(&flat, &id(Proj::V))?.reshape(vec![n, hw, w]);
    let att = q.bmm(&k.permute(&[0, 2, 1])).affine(1.0 / (w as f64).sqrt(), 0.0).softmax_last();
    let out = att.bmm(&v).reshape(vec![n * hw, w]);
    let out = out
        .matmul(ctx.p(&format!("attn{block}.self.wo"))?)
        .add_row(ctx.p(&format!("attn{block}.self.bo"))?);
    let out = out.reshape(vec![n, hw, w]).permute(&[0, 2, 1]).reshape(vec![n, w, hh, ww]);
    Ok(h.add(&out))
}

/// Cross-attention from every spatial position to the prompt tokens.
fn cross_attention(ctx: &Ctx, h: &Tensor, cond: &Tensor, block: usize) -> Result<Tensor> {
    let (n, w, hh, ww) = {
        let s = h.shape();
        (s[0], s[1], s[2], s[3])
    };
    let hw = hh * ww;
    let x = h.rms_norm_channels(ctx.p(&format!("attn{block}.cross.norm.g"))?, NORM_EPS);
    let flat = x.reshape(vec![n, w, hw]).permute(&[0, 2, 1]).reshape(vec![n * hw, w]);
    let id = |proj| LayerId { block, kind: AttnKind::Cross, proj };
    let q = ctx.project(&flat, &id(Proj::Q))?;
    let k = ctx.project(cond, &id(Proj::K))?;
    let v = ctx.project(cond, &id(Proj::V))?;
    let att = q.matmul(&k.permute(&[1, 0])).affine(1.0 / (w as f64).sqrt(), 0.0).softmax_last();
    let out = att
        .matmul(&v)
        .matmul(ctx.p(&format!("attn{block}.cross.wo"))?)
        .add_row(ctx.p(&format!("attn{block}.cross.bo"))?);
    let out = out.reshape(vec![n, hw, w]).permute(&[0, 2, 1]).reshape(vec![n, w, hh, ww]);
    Ok(h.add(&out))
}

/// Frame-axis attention at every spatial location.
fn temporal_attention(ctx: &Ctx, h: &Tensor, batch: usize, frames: usize) -> Result<Tensor> {
    let (n, w, hh, ww) = {
        let s = h.shape();
        (s[0], s[1], s[2], s[3])
    };
    let hw = hh * ww;
    let x = h.rms_norm_channels(ctx.p("temporal.norm.g")?, NORM_EPS);
    let seq = x
        .reshape(vec![batch, frames, w, hw])
        .permute(&[0, 3, 1, 2])
        .reshape(vec![batch * hw, frames, w]);
    let flat = seq.reshape(vec![batch * hw * frames, w]);
    let q = flat.matmul(ctx.p("temporal.wq")?).reshape(vec![batch * hw, frames, w]);
    let k = flat.matmul(ctx.p("temporal.wk")?).reshape(vec![batch * hw, frames, w]);
    let v = flat.matmul(ctx.p("temporal.wv")?).reshape(vec![batch * hw, frames, w]);
    let att = q.bmm(&k.permute(&[0, 2, 1])).affine(1.0 / (w as f64).sqrt(), 0.0).softmax_last();
    let out = att
        .bmm(&v)
        .reshape(vec![batch * hw * frames, w])
        .matmul(ctx.p("temporal.wo")?)
        .add_row(ctx.p("temporal.bo")?);
    let out = out
        .reshape(vec![batch, hw, frames, w])
        .permute(&[0, 2, 3, 1])
        .reshape(vec![n, w, hh, ww]);
    Ok(h.add(&out))
}

fn check_latent(cfg: &ModelConfig, z: &Tensor) -> Result<(usize, usize)> {
    let s = z.shape();
    if s.len() != 5 || s[2] != cfg.latent_h || s[3] != cfg.latent_w || s[4] != cfg.latent_c {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?}, model expects [B,F,{},{},{}]",
            s, cfg.latent_h, cfg.latent_w, cfg.latent_c
        )));
    }
    if !z.value().is_finite() {
        return Err(Error::NonFinite("latent contains non-finite entries".into()));
    }
    Ok((s[0], s[1]))
}

/// Predict the noise in `z_t` given prompt tokens `cond [L, text_width]`
/// at schedule level `t`. Adapter deltas in `overlay` are applied inside
/// the targeted attention projections.
pub fn denoiser_forward(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    z_t: &Tensor,
    cond: &Tensor,
    t: usize,
    overlay: AdapterOverlay,
) -> Result<Tensor> {
    let (batch, frames) = check_latent(cfg, z_t)?;
    if cond.shape().len() != 2 || cond.shape()[1] != cfg.text_width {
        return Err(Error::ShapeMismatch(format!(
            "condition {:?}, expected [L,{}]",
            cond.shape(),
            cfg.text_width
        )));
    }
    let ctx = Ctx { params, overlay };
    let n = batch * frames;
    let (c, w) = (cfg.latent_c, cfg.width);
    let (lh, lw) = (cfg.latent_h, cfg.latent_w);

    let temb = Tensor::leaf(time_embedding(t, w))
        .reshape(vec![1, w])
        .matmul(ctx.p("temb.w1")?)
        .add_row(ctx.p("temb.b1")?)
        .silu()
        .matmul(ctx.p("temb.w2")?)
        .add_row(ctx.p("temb.b2")?)
        .reshape(vec![w]);

    let mut h = z_t
        .permute(&[0, 1, 4, 2, 3])
        .reshape(vec![n, c, lh, lw])
        .conv2d(ctx.p("conv_in.w")?, 1)
        .add_channel(ctx.p("conv_in.b")?);

    for b in 0..cfg.blocks {
        h = res_block(&ctx, &h, &format!("res{b}"), &temb)?;
        h = self_attention(&ctx, &h, b)?;
        h = cross_attention(&ctx, &h, cond, b)?;
        if b == 0 && frames > 1 {
            h = temporal_attention(&ctx, &h, batch, frames)?;
        }
    }

    let eps = h
        .rms_norm_channels(ctx.p("norm_out.g")?, NORM_EPS)
        .silu()
        .conv2d(ctx.p("conv_out.w")?, 1)
        .add_channel(ctx.p("conv_out.b")?);
    Ok(eps.reshape(vec![batch, frames, c, lh, lw]).permute(&[0, 1, 3, 4, 2]))
}

/// Learned token projection for one prompt: `[L, text_width]`.
pub fn render_condition(
    prompt: &PromptSpec,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    let base = Tensor::leaf(text::encode_tokens(&prompt.text, cfg.text_width));
    let proj = params
        .get("text.proj")
        .ok_or_else(|| Error::Lookup("missing parameter 'text.proj'".into()))?;
    Ok(base.matmul(proj))
}

/// Empty-text condition used for classifier-free guidance.
pub fn uncond_condition(cfg: &ModelConfig, params: &BTreeMap<String, Tensor>) -> Result<Tensor> {
    let base = Tensor::leaf(text::encode_tokens(text::UNCOND_TOKEN, cfg.text_width));
    let proj = params
        .get("text.proj")
        .ok_or_else(|| Error::Lookup("missing parameter 'text.proj'".into()))?;
    Ok(base.matmul(proj))
}

/// Pixels `[F, H', W', 3]` -> latent `[1, F, h, w, c]`, bounded by tanh.
pub fn encode_video(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    pixels: &Tensor,
) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 4 || s[1] != cfg.pixel_h || s[2] != cfg.pixel_w || s[3] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "pixels {:?}, expected [F,{},{},3]",
            s, cfg.pixel_h, cfg.pixel_w
        )));
    }
    let f = s[0];
    let ctx = Ctx { params, overlay: None };
    let mut h = pixels
        .permute(&[0, 3, 1, 2])
        .conv2d(ctx.p("enc.c1.w")?, 1)
        .add_channel(ctx.p("enc.c1.b")?)
        .silu();
    let mut scale = cfg.upscale();
    while scale > 1 {
        h = h.avg_pool2d(2);
        scale /= 2;
    }
    let z = h.conv2d(ctx.p("enc.c2.w")?, 1).add_channel(ctx.p("enc.c2.b")?);
    let z = tanh(&z);
    Ok(z.reshape(vec![1, f, cfg.latent_c, cfg.latent_h, cfg.latent_w]).permute(&[0, 1, 3, 4, 2]))
}

/// Latent `[1, F, h, w, c]` -> pixels `[F, H', W', 3]` in [0,1].
pub fn decode(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    z: &Tensor,
) -> Result<Tensor> {
    let (batch, f) = check_latent(cfg, z)?;
    if batch != 1 {
        return Err(Error::invalid(format!("decode expects batch 1, got {batch}")));
    }
    let chw = z
        .reshape(vec![f, cfg.latent_h, cfg.latent_w, cfg.latent_c])
        .permute(&[0, 3, 1, 2]);
    if cfg.identity_decoder {
        let up = if cfg.upscale() > 1 { chw.upsample_nearest(cfg.upscale()) } else { chw };
        return Ok(up.sigmoid().permute(&[0, 2, 3, 1]));
    }
    let ctx = Ctx { params, overlay: None };
    let h = chw.conv2d(ctx.p("dec.c1.w")?, 1).add_channel(ctx.p("dec.c1.b")?).silu();
    let h = if cfg.upscale() > 1 { h.upsample_nearest(cfg.upscale()) } else { h };
    let px = h.conv2d(ctx.p("dec.c2.w")?, 1).add_channel(ctx.p("dec.c2.b")?).sigmoid();
    Ok(px.permute(&[0, 2, 3, 1]))
}

/// Squared error between true and predicted noise.
pub fn noise_prediction_mse(eps: &Tensor, eps_hat: &Tensor) -> Tensor {
    let d = eps.sub(eps_hat);
    d.mul(&d).mean()
}

/// Noise-prediction loss at a uniformly drawn level with Gaussian noise.
/// The adapter overlay, when given, is applied unconditionally.
pub fn diffusion_loss(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    overlay: AdapterOverlay,
    z0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    check_latent(cfg, z0)?;
    let t = rng.random_range(1..=sched.steps);
    let eps = Tensor::leaf(rng::standard_normal(rng, z0.shape().to_vec()));
    let z_t = add_noise(z0, &eps, t, sched)?;
    let eps_hat = denoiser_forward(cfg, params, &z_t, cond, t, overlay)?;
    Ok(noise_prediction_mse(&eps, &eps_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptSpec;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::world::{BackgroundId, MotionId};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            frames: 3,
            width: 8,
            text_width: 16,
            pixel_h: 8,
            pixel_w: 8,
            blocks: 1,
            identity_decoder: false,
        }
    }

    fn prompt() -> PromptSpec {
        PromptSpec::new("V", "", MotionId::Bounce, BackgroundId::Meadow)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let state = DenoiserState::init_random(cfg.clone(), 1).unwrap();
        let params = state.leaves();
        let z = Tensor::leaf(rng::standard_normal(&mut rng::stream(2, "z", 0), vec![1, 3, 4, 4, 2]));
        let cond = render_condition(&prompt(), &cfg, &params).unwrap();
        let a = denoiser_forward(&cfg, &params, &z, &cond, 3, None).unwrap();
        let b = denoiser_forward(&cfg, &params, &z, &cond, 3, None).unwrap();
        assert_eq!(a.shape(), [1, 3, 4, 4, 2]);
        assert!(a.value().is_finite());
        assert!(tensors_bitwise_eq(a.value(), b.value()));

        let c = denoiser_forward(&cfg, &params, &z, &cond, 2, None).unwrap();
        assert!(!tensors_bitwise_eq(a.value(), c.value()), "time level must matter");
    }

    #[test]
    fn state_checksum_and_layer_addressing() {
        let cfg = tiny_cfg();
        let s1 = DenoiserState::init_random(cfg.clone(), 7).unwrap();
        let s2 = DenoiserState::init_random(cfg.clone(), 7).unwrap();
        let s3 = DenoiserState::init_random(cfg.clone(), 8).unwrap();
        assert_eq!(s1.checksum(), s2.checksum());
        assert_ne!(s1.checksum(), s3.checksum());

        let ids = attention_layer_ids(&cfg);
        assert_eq!(ids.len(), cfg.blocks * 2 * 3);
        for id in &ids {
            assert!(s1.params.contains_key(&id.weight_param()), "{}", id.weight_param());
            assert_eq!(LayerId::parse(&id.key()).unwrap(), *id);
        }
        assert!(LayerId::parse("attnx.self.q").is_err());
        assert!(LayerId::parse("attn0.branch.q").is_err());
    }

    #[test]
    fn condition_rendering_is_deterministic_and_prompt_sensitive() {
        let cfg = tiny_cfg();
        let params = DenoiserState::init_random(cfg.clone(), 3).unwrap().leaves();
        let a = render_condition(&prompt(), &cfg, &params).unwrap();
        let b = render_condition(&prompt(), &cfg, &params).unwrap();
        assert!(tensors_bitwise_eq(a.value(), b.value()));
        assert_eq!(a.shape()[1], cfg.text_width);

        let other = PromptSpec::new("V", "", MotionId::Static, BackgroundId::Meadow);
        let c = render_condition(&other, &cfg, &params).unwrap();
        assert_ne!(a.value().to_vec(), c.value().to_vec());

        let u = uncond_condition(&cfg, &params).unwrap();
        assert_eq!(u.shape(), [1, cfg.text_width]);
    }

    #[test]
    fn codec_shapes_and_range() {
        let cfg = ModelConfig { frames: 2, ..ModelConfig::toy_default() };
        let state = DenoiserState::init_random(cfg.clone(), 5).unwrap();
        let params = state.leaves();
        let px =
            rng::standard_normal(&mut rng::stream(1, "px", 0), vec![2, 32, 32, 3]).map(|v| v.abs().min(1.0));
        let z = encode_video(&cfg, &params, &Tensor::leaf(px)).unwrap();
        assert_eq!(z.shape(), [1, 2, 8, 8, 4]);
        assert!(z.value().data().iter().all(|v| v.abs() <= 1.0));

        let out = decode(&cfg, &params, &z).unwrap();
        assert_eq!(out.shape(), [2, 32, 32, 3]);
        assert!(out.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_decoder_is_squashed_channel_map() {
        let cfg = ModelConfig {
            latent_h: 4,
            latent_w: 4,
            latent_c: 3,
            frames: 2,
            width: 8,
            text_width: 16,
            pixel_h: 4,
            pixel_w: 4,
            blocks: 1,
            identity_decoder: true,
        };
        let state = DenoiserState::init_random(cfg.clone(), 2).unwrap();
        let z = rng::standard_normal(&mut rng::stream(3, "z", 0), vec![1, 2, 4, 4, 3]);
        let out = decode(&cfg, &state.leaves(), &Tensor::leaf(z.clone())).unwrap();
        for (o, zi) in out.value().data().iter().zip(z.data()) {
            let want = 1.0 / (1.0 + (-zi).exp());
            assert!((o - want).abs() < 1e-12);
        }

        let bad = ModelConfig { latent_c: 4, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diffusion_loss_nonnegative_and_oracle_zero() {
        let cfg = tiny_cfg();
        let params = DenoiserState::init_random(cfg.clone(), 1).unwrap().leaves();
        let sched = make_schedule(4, ScheduleKind::Cosine).unwrap();
        let z0 = Tensor::leaf(rng::standard_normal(&mut rng::stream(9, "z0", 0), vec![1, 3, 4, 4, 2]));
        let cond = render_condition(&prompt(), &cfg, &params).unwrap();
        let mut r = rng::stream(4, "loss", 0);
        let loss = diffusion_loss(&cfg, &params, None, &z0, &cond, &sched, &mut r).unwrap();
        assert!(loss.value().as_scalar() >= 0.0);

        let e = Tensor::leaf(rng::standard_normal(&mut rng::stream(5, "e", 0), vec![4]));
        assert_eq!(noise_prediction_mse(&e, &e).value().as_scalar(), 0.0);
    }

    #[test]
    fn overlay_with_zero_up_factor_matches_no_overlay_bitwise() {
        let cfg = tiny_cfg();
        let params = DenoiserState::init_random(cfg.clone(), 11).unwrap().leaves();
        let z = Tensor::leaf(rng::standard_normal(&mut rng::stream(12, "z", 0), vec![1, 3, 4, 4, 2]));
        let cond = render_condition(&prompt(), &cfg, &params).unwrap();

        let mut overlay = BTreeMap::new();
        for id in attention_layer_ids(&cfg) {
            let (d, k) = layer_dims(&cfg, &id);
            overlay.insert(
                id.key(),
                (
                    Tensor::leaf(rng::standard_normal(&mut rng::stream(13, &id.key(), 0), vec![d, 2])),
                    Tensor::leaf(RawTensor::zeros(vec![2, k])),
                ),
            );
        }
        let plain = denoiser_forward(&cfg, &params, &z, &cond, 2, None).unwrap();
        let with = denoiser_forward(&cfg, &params, &z, &cond, 2, Some(&overlay)).unwrap();
        assert!(tensors_bitwise_eq(plain.value(), with.value()));
    }
}
