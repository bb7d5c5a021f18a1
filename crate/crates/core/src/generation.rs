//! Latent diffusion: a fixed orthonormal patch codec, the DDPM noise process,
//! a token-attention denoiser with decoupled text/image cross-attention, and
//! an ancestral sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Builder, Forward, LayerNorm, Linear, Mlp, ParamStore};
use crate::raster::RasterImage;
use crate::tensor::{matmul, matmul_nt, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Pixels per latent cell along each side.
    pub factor: usize,
    /// Retained coefficients per cell; `3·factor²` is lossless.
    pub d_z: usize,
    pub scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            factor: 4,
            d_z: 48,
            scale: 0.5,
        }
    }
}

/// Per-channel 2D DCT-II of each `factor×factor` cell, lowest frequencies
/// first, truncated to `d_z` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    pub config: CodecConfig,
    /// `[d_z × 3·factor²]`, orthonormal rows.
    basis: Tensor,
}

impl LatentCodec {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        let n = config.factor;
        let full = 3 * n * n;
        if n == 0 || config.d_z == 0 || config.d_z > full {
            return Err(Error::Config(format!(
                "codec d_z {} must lie in 1..={full} for factor {n}",
                config.d_z
            )));
        }
        let dct = |k: usize, i: usize| {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
        };
        let mut freqs: Vec<(usize, usize, usize)> = Vec::with_capacity(full);
        for u in 0..n {
            for v in 0..n {
                for c in 0..3 {
                    freqs.push((u, v, c));
                }
            }
        }
        freqs.sort_by_key(|&(u, v, c)| (u + v, u, c));
        let mut data = Vec::with_capacity(config.d_z * full);
        for &(u, v, c) in freqs.iter().take(config.d_z) {
            for y in 0..n {
                for x in 0..n {
                    for ch in 0..3 {
                        data.push(if ch == c { dct(u, y) * dct(v, x) } else { 0.0 });
                    }
                }
            }
        }
        Ok(LatentCodec {
            config: config.clone(),
            basis: Tensor::new(&[config.d_z, full], data)?,
        })
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    pub fn latent_side(&self, image_side: usize) -> usize {
        image_side / self.config.factor
    }

    /// Latent tokens `[s² × d_z]` in raster order.
    pub fn encode(&self, img: &RasterImage) -> Result<Tensor> {
        let n = self.config.factor;
        if img.width() % n != 0 || img.height() % n != 0 {
            return Err(Error::InvalidShape {
                shape: vec![img.height(), img.width()],
                reason: format!("image sides must be divisible by {n}"),
            });
        }
        let (sx, sy) = (img.width() / n, img.height() / n);
        let mut cells = Vec::with_capacity(sx * sy * 3 * n * n);
        for cy in 0..sy {
            for cx in 0..sx {
                for y in 0..n {
                    for x in 0..n {
                        for c in 0..3 {
                            cells.push(img.unit(cx * n + x, cy * n + y, c));
                        }
                    }
                }
            }
        }
        let cells = Tensor::new(&[sx * sy, 3 * n * n], cells)?;
        Ok(matmul_nt(&cells, &self.basis)?.map(|v| v * self.config.scale))
    }

    /// Inverse projection of square latent tokens; pixels are clamped.
    pub fn decode(&self, z: &Tensor) -> Result<RasterImage> {
        let n = self.config.factor;
        let tokens = z.rows();
        let side = (tokens as f64).sqrt().round() as usize;
        if side * side != tokens || z.cols() != self.d_z() {
            return Err(Error::InvalidShape {
                shape: z.shape().to_vec(),
                reason: format!("expected square token grid of width {}", self.d_z()),
            });
        }
        let cells = matmul(&z.map(|v| v / self.config.scale), &self.basis)?;
        let w = side * n;
        let mut px = vec![0.0; w * w * 3];
        for cy in 0..side {
            for cx in 0..side {
                let row = cells.row(cy * side + cx);
                for y in 0..n {
                    for x in 0..n {
                        for c in 0..3 {
                            px[((cy * n + y) * w + cx * n + x) * 3 + c] = row[(y * n + x) * 3 + c];
                        }
                    }
                }
            }
        }
        RasterImage::from_unit(w, w, &px)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta DDPM schedule. Index `t` runs over `1..=T`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let t = config.steps;
        if t == 0 || !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule {config:?}")));
        }
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            let b = config.beta_start + frac * (config.beta_end - config.beta_start);
            betas.push(b);
            alpha_bars.push(alpha_bars[i] * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t > self.steps() {
            return Err(Error::IndexOutOfRange {
                what: "diffusion timestep",
                index: t,
                size: self.steps() + 1,
            });
        }
        if z0.shape() != eps.shape() {
            return Err(Error::shape("add_noise", z0.shape(), eps.shape()));
        }
        let (a, b) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
        Tensor::new(z0.shape(), data)
    }

    /// `steps` descending timesteps, evenly spread over `1..=T`.
    pub fn respaced(&self, steps: usize) -> Vec<usize> {
        let t = self.steps();
        let steps = steps.clamp(1, t);
        let mut ts: Vec<usize> = (1..=steps).map(|i| ((i * t) as f64 / steps as f64).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub lambda_default: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            lambda_default: 1.0,
        }
    }
}

/// Shared query, separate text and image key/value projections.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Linear,
    txt_k: Linear,
    txt_v: Linear,
    pub img_k: Linear,
    pub img_v: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new<R: Rng>(b: &mut Builder<'_, R>, d_model: usize, d_cond: usize, heads: usize) -> Self {
        b.scope("cross_attn", |b| {
            let q = Linear::new(b, "q", d_model, d_model, false, false);
            let (txt_k, txt_v) = b.scope("txt", |b| {
                (
                    Linear::new(b, "k", d_cond, d_model, false, false),
                    Linear::new(b, "v", d_cond, d_model, false, false),
                )
            });
            let (img_k, img_v) = b.scope("img", |b| {
                (
                    Linear::zeroed(b, "k", d_cond, d_model, false),
                    Linear::zeroed(b, "v", d_cond, d_model, false),
                )
            });
            CrossAttention { q, txt_k, txt_v, img_k, img_v, heads }
        })
    }
}

/// `Z = Attn(Q, K_txt, V_txt) + λ·Attn(Q, K_img, V_img)`. The image branch
/// is not evaluated at all when `λ = 0`.
pub fn decoupled_cross_attention(
    f: &mut Forward<'_>,
    site: &CrossAttention,
    x: Var,
    f_txt: Var,
    f_img: Var,
    lambda: f64,
) -> Result<Var> {
    let q = site.q.forward(f, x)?;
    let kt = site.txt_k.forward(f, f_txt)?;
    let vt = site.txt_v.forward(f, f_txt)?;
    let z_txt = multi_head_attention(f, q, kt, vt, site.heads, false)?;
    if lambda == 0.0 {
        return Ok(z_txt);
    }
    let ki = site.img_k.forward(f, f_img)?;
    let vi = site.img_v.forward(f, f_img)?;
    let z_img = multi_head_attention(f, q, ki, vi, site.heads, false)?;
    let z_img = f.scale(z_img, lambda);
    f.add(z_txt, z_img)
}

#[derive(Debug, Clone)]
pub struct DenoiserBlock {
    time: Linear,
    ln1: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    ln2: LayerNorm,
    pub cross: CrossAttention,
    cross_o: Linear,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub d_z: usize,
    pub side: usize,
    in_proj: Linear,
    pos: crate::nn::ParamId,
    pub blocks: Vec<DenoiserBlock>,
    ln_out: LayerNorm,
    out_proj: Linear,
    skip_z: crate::nn::ParamId,
    skip_src: crate::nn::ParamId,
    /// `alpha_bar(t)` for `t` in `0..=T`.
    alpha_bars: Vec<f64>,
}

/// Sinusoidal timestep features `[1 × d]`.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, d], v).expect("length matches")
}

impl Denoiser {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        config: &DenoiserConfig,
        schedule: &NoiseSchedule,
        d_z: usize,
        side: usize,
        d_cond: usize,
    ) -> Self {
        let c = config;
        let alpha_bars = (0..=schedule.steps()).map(|t| schedule.alpha_bar(t)).collect();
        let d = c.d_model;
        b.scope("generation", |b| {
            b.scope("denoiser", |b| {
                let in_proj = Linear::new(b, "in_proj", 2 * d_z, d, true, false);
                let pos = b.randn("pos", &[side * side, d], 0.02, false);
                let blocks = (0..c.n_blocks)
                    .map(|i| {
                        b.scope(&format!("blocks.{i}"), |b| DenoiserBlock {
                            time: Linear::new(b, "time", d, d, true, false),
                            ln1: LayerNorm::new(b, "ln1", d, false),
                            self_q: Linear::new(b, "self_attn.q", d, d, false, false),
                            self_k: Linear::new(b, "self_attn.k", d, d, false, false),
                            self_v: Linear::new(b, "self_attn.v", d, d, false, false),
                            self_o: Linear::new(b, "self_attn.o", d, d, true, false),
                            ln2: LayerNorm::new(b, "ln2", d, false),
                            cross: CrossAttention::new(b, d, d_cond, c.n_heads),
                            cross_o: Linear::new(b, "cross_out", d, d, true, false),
                            ln3: LayerNorm::new(b, "ln3", d, false),
                            mlp: Mlp::new(b, "mlp", d, 2 * d, d, false),
                        })
                    })
                    .collect();
                Denoiser {
                    config: c.clone(),
                    d_z,
                    side,
                    in_proj,
                    pos,
                    blocks,
                    ln_out: LayerNorm::new(b, "ln_out", d, false),
                    out_proj: Linear::new(b, "out_proj", d, d_z, true, false),
                    skip_z: b.zeros("skip.z", &[1, d_z], false),
                    skip_src: b.zeros("skip.src", &[1, d_z], false),
                    alpha_bars,
                }
            })
        })
    }

    /// Noise estimate for `z_t` given the source latent (channel-concatenated
    /// after `z_t`), the vision residual and both cross-attention conditions.
    /// A learned per-channel skip adds `g_z * z_t / sqrt(1 - ab)` and
    /// `g_src * src * sqrt(ab / (1 - ab))`; both gains start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_noise(
        &self,
        f: &mut Forward<'_>,
        z_t: Var,
        src: Var,
        v_txt: Var,
        f_txt: Var,
        f_img: Var,
        t: usize,
        lambda: f64,
    ) -> Result<Var> {
        let tokens = self.side * self.side;
        for (what, v) in [("z_t", z_t), ("source latent", src)] {
            if f.shape(v) != [tokens, self.d_z] {
                return Err(Error::shape(what, f.shape(v), &[tokens, self.d_z]));
            }
        }
        if t == 0 || t >= self.alpha_bars.len() {
            return Err(Error::IndexOutOfRange {
                what: "timestep",
                index: t,
                size: self.alpha_bars.len(),
            });
        }
        let d = self.config.d_model;
        let x = f.concat_cols(&[z_t, src])?;
        let x = self.in_proj.forward(f, x)?;
        let x = f.add(x, v_txt)?;
        let pos = f.param(self.pos);
        let mut x = f.add(x, pos)?;
        let temb = f.constant(timestep_embedding(t, d));
        for blk in &self.blocks {
            let te = blk.time.forward(f, temb)?;
            let te = f.reshape(te, &[d])?;
            x = f.add_row(x, te)?;
            let a = blk.ln1.forward(f, x)?;
            let q = blk.self_q.forward(f, a)?;
            let k = blk.self_k.forward(f, a)?;
            let v = blk.self_v.forward(f, a)?;
            let s = multi_head_attention(f, q, k, v, self.config.n_heads, false)?;
            let s = blk.self_o.forward(f, s)?;
            x = f.add(x, s)?;
            let c = blk.ln2.forward(f, x)?;
            let z = decoupled_cross_attention(f, &blk.cross, c, f_txt, f_img, lambda)?;
            let z = blk.cross_o.forward(f, z)?;
            x = f.add(x, z)?;
            let m = blk.ln3.forward(f, x)?;
            let m = blk.mlp.forward(f, m)?;
            x = f.add(x, m)?;
        }
        let x = self.ln_out.forward(f, x)?;
        let out = self.out_proj.forward(f, x)?;
        let ab = self.alpha_bars[t];
        let rows = vec![0; tokens];
        let gz = f.param(self.skip_z);
        let gz = f.gather_rows(gz, &rows)?;
        let zs = f.scale(z_t, 1.0 / (1.0 - ab).sqrt());
        let zs = f.mul(gz, zs)?;
        let gs = f.param(self.skip_src);
        let gs = f.gather_rows(gs, &rows)?;
        let ss = f.scale(src, (ab / (1.0 - ab)).sqrt());
        let ss = f.mul(gs, ss)?;
        let out = f.add(out, zs)?;
        f.add(out, ss)
    }
}

/// `mse(eps_hat, eps)`.
pub fn sd_loss(f: &mut Forward<'_>, eps_hat: Var, eps: &Tensor) -> Result<Var> {
    let e = f.constant(eps.clone());
    f.mse(eps_hat, e)
}

/// Fixed conditioning tensors for one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConditions {
    pub src_latent: Tensor,
    pub v_txt: Tensor,
    pub f_txt: Tensor,
    pub f_img: Tensor,
}

/// Ancestral sampling from `z_T ~ N(0, I)` over `steps` respaced timesteps.
pub fn sample_latent<R: Rng + ?Sized>(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &SampleConditions,
    lambda: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = cond.src_latent.shape().to_vec();
    let mut z = Tensor::randn(&shape, 1.0, rng);
    let ts = schedule.respaced(steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_hat = {
            let mut f = Forward::inference(store);
            let zt = f.constant(z.clone());
            let src = f.constant(cond.src_latent.clone());
            let vt = f.constant(cond.v_txt.clone());
            let ft = f.constant(cond.f_txt.clone());
            let fi = f.constant(cond.f_img.clone());
            let e = denoiser.predict_noise(&mut f, zt, src, vt, ft, fi, t, lambda)?;
            f.value(e).clone()
        };
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let beta = 1.0 - ab / ab_prev;
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let sigma = if t_prev > 0 { (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() } else { 0.0 };
        let data = z
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(zv, e)| {
                let noise: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                inv * (zv - coef * e) + sigma * noise
            })
            .collect();
        z = Tensor::new(&shape, data)?;
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("sampler diverged at timestep {t}")));
        }
    }
    Ok(z)
}
