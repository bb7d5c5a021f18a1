//! The bridge from [MM] hidden states to denoiser conditions: a query
//! transformer and bidirectional interaction for the text stream, an adapter
//! for the image stream, and the fixed embedders its losses align to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::comprehension::VocabSpec;
use crate::error::{Error, Result};
use crate::nn::{scaled_dot_attention, Builder, Forward, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::raster::RasterImage;
use crate::tensor::{matmul, Tensor};

/// Side of the pixel grid the image embedder averages over.
const EMBED_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgingConfig {
    pub d_cond: usize,
    pub t_q: usize,
    pub n_img_tokens: usize,
    pub d_attn: usize,
    pub mapper_hidden: usize,
}

impl Default for BridgingConfig {
    fn default() -> Self {
        BridgingConfig {
            d_cond: 32,
            t_q: 8,
            n_img_tokens: 4,
            d_attn: 32,
            mapper_hidden: 64,
        }
    }
}

/// Input dimensions the bridge adapts between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeDims {
    pub d_llm: usize,
    pub r: usize,
    pub d_vision: usize,
    /// Side of the square vision patch grid.
    pub vision_side: usize,
    /// Denoiser token width and latent grid side, for `v_txt`.
    pub d_model: usize,
    pub latent_side: usize,
}

#[derive(Debug, Clone)]
pub struct QFormer {
    pub queries: ParamId,
    wq: Linear,
    wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    ln: LayerNorm,
    ffn: Mlp,
}

impl QFormer {
    /// `q1 = q + O(attn(q, h))`, `q' = q1 + FFN(LN(q1))`.
    pub fn forward(&self, f: &mut Forward<'_>, h: Var) -> Result<Var> {
        let q = f.param(self.queries);
        let qq = self.wq.forward(f, q)?;
        let k = self.wk.forward(f, h)?;
        let v = self.wv.forward(f, h)?;
        let a = scaled_dot_attention(f, qq, k, v, false)?;
        let o = self.wo.forward(f, a)?;
        let q1 = f.add(q, o)?;
        let n = self.ln.forward(f, q1)?;
        let m = self.ffn.forward(f, n)?;
        f.add(q1, m)
    }
}

/// One direction of cross-attention: `dst` rows query `src` rows.
#[derive(Debug, Clone)]
pub struct CrossPath {
    q: Linear,
    k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossPath {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_dst: usize, d_src: usize, d_attn: usize, d_out: usize) -> Self {
        b.scope(name, |b| CrossPath {
            q: Linear::new(b, "q", d_dst, d_attn, false, false),
            k: Linear::new(b, "k", d_src, d_attn, false, false),
            v: Linear::new(b, "v", d_src, d_out, false, false),
            o: Linear::new(b, "o", d_out, d_out, true, false),
        })
    }

    fn forward(&self, f: &mut Forward<'_>, dst: Var, src: Var) -> Result<Var> {
        let q = self.q.forward(f, dst)?;
        let k = self.k.forward(f, src)?;
        let v = self.v.forward(f, src)?;
        let a = scaled_dot_attention(f, q, k, v, false)?;
        self.o.forward(f, a)
    }
}

#[derive(Debug, Clone)]
pub struct Bim {
    pub text_path: CrossPath,
    pub image_path: CrossPath,
    pub image_res: Linear,
    upsample: Vec<usize>,
}

impl Bim {
    /// `f_txt = q' + attn(q' → img)`; `v_txt = up(img·W + attn(img → q'))`.
    pub fn forward(&self, f: &mut Forward<'_>, img_feats: Var, q_prime: Var) -> Result<(Var, Var)> {
        let t = self.text_path.forward(f, q_prime, img_feats)?;
        let f_txt = f.add(q_prime, t)?;
        let res = self.image_res.forward(f, img_feats)?;
        let back = self.image_path.forward(f, img_feats, q_prime)?;
        let v = f.add(res, back)?;
        let v_txt = f.gather_rows(v, &self.upsample)?;
        Ok((f_txt, v_txt))
    }
}

#[derive(Debug, Clone)]
pub struct Iaa {
    pub mapper: Mlp,
    expand: Linear,
    ln: LayerNorm,
    n: usize,
    d_cond: usize,
}

impl Iaa {
    /// Returns `(mapped [1×d_cond], f_img [N×d_cond])`.
    pub fn forward(&self, f: &mut Forward<'_>, h: Var) -> Result<(Var, Var)> {
        let numel = f.value(h).numel();
        let flat = f.reshape(h, &[1, numel])?;
        let mapped = self.mapper.forward(f, flat)?;
        let e = self.expand.forward(f, mapped)?;
        let e = f.reshape(e, &[self.n, self.d_cond])?;
        let f_img = self.ln.forward(f, e)?;
        Ok((mapped, f_img))
    }
}

/// Fixed random projections standing in for pretrained text and image
/// encoders. Stored as frozen parameters so checkpoints carry them.
#[derive(Debug, Clone)]
pub struct FrozenEmbedders {
    text: ParamId,
    image: ParamId,
    t_q: usize,
    d_cond: usize,
}

impl FrozenEmbedders {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, vocab_words: usize, t_q: usize, d_cond: usize) -> Self {
        let img_dim = EMBED_GRID * EMBED_GRID * 3;
        b.scope("embedders", |b| FrozenEmbedders {
            text: b.randn("text", &[vocab_words, t_q * d_cond], 1.0, true),
            image: b.randn("image", &[img_dim, d_cond], 2.0 / (img_dim as f64).sqrt(), true),
            t_q,
            d_cond,
        })
    }

    /// Bag-of-words counts over `vocab`, scaled by `1/√n`, projected to
    /// `t_q×d_cond`.
    pub fn text_embed(&self, store: &ParamStore, vocab: &VocabSpec, instruction: &str) -> Result<Tensor> {
        let w = store.tensor(self.text);
        let ids = vocab.encode(instruction);
        let words = &ids[1..];
        let mut counts = vec![0.0; w.rows()];
        for &i in words {
            counts[i] += 1.0;
        }
        let scale = 1.0 / (words.len().max(1) as f64).sqrt();
        let bow = Tensor::new(&[1, w.rows()], counts.iter().map(|c| c * scale).collect())?;
        matmul(&bow, w)?.reshape(&[self.t_q, self.d_cond])
    }

    /// Centred RGB means over a 4×4 grid, projected to `1×d_cond`.
    pub fn image_embed(&self, store: &ParamStore, img: &RasterImage) -> Result<Tensor> {
        let (cw, ch) = (img.width() / EMBED_GRID, img.height() / EMBED_GRID);
        if cw == 0 || ch == 0 {
            return Err(Error::InvalidShape {
                shape: vec![img.height(), img.width()],
                reason: "image smaller than the embedding grid".to_string(),
            });
        }
        let mut feats = Vec::with_capacity(EMBED_GRID * EMBED_GRID * 3);
        for gy in 0..EMBED_GRID {
            for gx in 0..EMBED_GRID {
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in 0..ch {
                        for x in 0..cw {
                            s += img.unit(gx * cw + x, gy * ch + y, c);
                        }
                    }
                    feats.push(s / (cw * ch) as f64 - 0.5);
                }
            }
        }
        let v = Tensor::new(&[1, feats.len()], feats)?;
        matmul(&v, store.tensor(self.image))
    }
}

#[derive(Debug, Clone)]
pub struct Bridging {
    pub config: BridgingConfig,
    pub qformer: QFormer,
    pub bim: Bim,
    pub iaa: Iaa,
    pub embedders: FrozenEmbedders,
}

/// Nearest-neighbour map from latent tokens to vision patches.
pub fn upsample_index(vision_side: usize, latent_side: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(latent_side * latent_side);
    for ly in 0..latent_side {
        for lx in 0..latent_side {
            idx.push((ly * vision_side / latent_side) * vision_side + lx * vision_side / latent_side);
        }
    }
    idx
}

impl Bridging {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &BridgingConfig, dims: BridgeDims, vocab_words: usize) -> Self {
        let c = config;
        let bridging = b.scope("bridging", |b| {
            let qformer = b.scope("qformer", |b| QFormer {
                queries: b.randn("queries", &[c.t_q, c.d_cond], 0.02, false),
                wq: Linear::new(b, "wq", c.d_cond, c.d_attn, false, false),
                wk: Linear::new(b, "wk", dims.d_llm, c.d_attn, false, false),
                wv: Linear::new(b, "wv", dims.d_llm, c.d_cond, false, false),
                wo: Linear::new(b, "wo", c.d_cond, c.d_cond, true, false),
                ln: LayerNorm::new(b, "ln", c.d_cond, false),
                ffn: Mlp::new(b, "ffn", c.d_cond, 2 * c.d_cond, c.d_cond, false),
            });
            let bim = b.scope("bim", |b| Bim {
                text_path: CrossPath::new(b, "text_path", c.d_cond, dims.d_vision, c.d_attn, c.d_cond),
                image_path: CrossPath::new(b, "image_path", dims.d_vision, c.d_cond, c.d_attn, dims.d_model),
                image_res: Linear::new(b, "image_res", dims.d_vision, dims.d_model, true, false),
                upsample: upsample_index(dims.vision_side, dims.latent_side),
            });
            let iaa = b.scope("iaa", |b| Iaa {
                mapper: Mlp::new(b, "mapper", dims.r * dims.d_llm, c.mapper_hidden, c.d_cond, false),
                expand: Linear::new(b, "expand", c.d_cond, c.n_img_tokens * c.d_cond, true, false),
                ln: LayerNorm::new(b, "ln", c.d_cond, false),
                n: c.n_img_tokens,
                d_cond: c.d_cond,
            });
            (qformer, bim, iaa)
        });
        let embedders = FrozenEmbedders::new(b, vocab_words, c.t_q, c.d_cond);
        Bridging {
            config: c.clone(),
            qformer: bridging.0,
            bim: bridging.1,
            iaa: bridging.2,
            embedders,
        }
    }

    pub fn qformer(&self, f: &mut Forward<'_>, h: Var) -> Result<Var> {
        self.qformer.forward(f, h)
    }

    pub fn bim(&self, f: &mut Forward<'_>, img_feats: Var, q_prime: Var) -> Result<(Var, Var)> {
        self.bim.forward(f, img_feats, q_prime)
    }

    pub fn iaa(&self, f: &mut Forward<'_>, h: Var) -> Result<(Var, Var)> {
        self.iaa.forward(f, h)
    }

    /// `mse(image_embed(target), mapped)`.
    pub fn iaa_loss(&self, f: &mut Forward<'_>, mapped: Var, target: &RasterImage) -> Result<Var> {
        let e = self.embedders.image_embed(f.store(), target)?;
        let e = f.constant(e);
        f.mse(e, mapped)
    }

    /// `mse(q', text_embed(instruction))`.
    pub fn text_feature_loss(&self, f: &mut Forward<'_>, q_prime: Var, vocab: &VocabSpec, instruction: &str) -> Result<Var> {
        let e = self.embedders.text_embed(f.store(), vocab, instruction)?;
        let e = f.constant(e);
        f.mse(q_prime, e)
    }

    /// Same as [`Self::iaa_loss`] but aligned to the source image.
    pub fn image_feature_loss(&self, f: &mut Forward<'_>, mapped: Var, source: &RasterImage) -> Result<Var> {
        self.iaa_loss(f, mapped, source)
    }
}
