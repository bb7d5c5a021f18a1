//! The multimodal language model stand-in: patch encoder, aligner, and a
//! small causal decoder whose vocabulary ends with `r` [MM] tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::datapipe::grammar::{closed_vocabulary, tokenize};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Builder, Forward, LayerNorm, Linear, LoraLinear, Mlp, ParamId};
use crate::raster::RasterImage;
use crate::tensor::Tensor;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComprehensionConfig {
    pub d_llm: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub r: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_len: usize,
}

impl Default for ComprehensionConfig {
    fn default() -> Self {
        ComprehensionConfig {
            d_llm: 64,
            d_vision: 32,
            n_layers: 2,
            n_heads: 4,
            patch_size: 8,
            image_size: 32,
            r: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            max_len: 64,
        }
    }
}

impl ComprehensionConfig {
    pub fn patch_grid(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_llm % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_llm {} not divisible by n_heads {}",
                self.d_llm, self.n_heads
            )));
        }
        if self.r == 0 || self.lora_rank == 0 {
            return Err(Error::Config("r and lora_rank must be at least 1".to_string()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Word-level vocabulary: specials, the world's closed word list, then the
/// `r` [MM] tokens as the last ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSpec {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    pub base_size: usize,
    pub r: usize,
}

impl VocabSpec {
    pub fn from_words(words: Vec<String>, r: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        for special in [UNK, BOS] {
            if !index.contains_key(special) {
                return Err(Error::InvalidArgument(format!("vocabulary lacks {special}")));
            }
        }
        Ok(VocabSpec {
            base_size: words.len(),
            words,
            index,
            r,
        })
    }

    /// The default vocabulary built from the scene grammar.
    pub fn closed(r: usize) -> Self {
        let mut words = vec![UNK.to_string(), BOS.to_string()];
        words.extend(closed_vocabulary());
        Self::from_words(words, r).expect("closed vocabulary is well formed")
    }

    pub fn size(&self) -> usize {
        self.base_size + self.r
    }

    pub fn mm_token_ids(&self) -> Vec<usize> {
        (self.base_size..self.size()).collect()
    }

    pub fn is_mm(&self, id: usize) -> bool {
        id >= self.base_size && id < self.size()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `<bos>` followed by word ids; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.index[UNK];
        std::iter::once(self.index[BOS])
            .chain(tokenize(text).iter().map(|t| *self.index.get(t).unwrap_or(&unk)))
            .collect()
    }

    /// One word per line, [MM] tokens excluded.
    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, r: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(), r)
    }
}

/// Extend an instruction with the [MM] ids in order.
pub fn append_mm_tokens(vocab: &VocabSpec, ids: &[usize]) -> Result<Vec<usize>> {
    if ids.iter().any(|&i| vocab.is_mm(i)) {
        return Err(Error::InvalidArgument("instruction already contains [MM] tokens".to_string()));
    }
    let mut out = ids.to_vec();
    out.extend(vocab.mm_token_ids());
    Ok(out)
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Parameter handles of the comprehension module.
#[derive(Debug, Clone)]
pub struct Comprehension {
    pub config: ComprehensionConfig,
    pub vocab: VocabSpec,
    patch_embed: ParamId,
    patch_mix: ParamId,
    fc_align: Linear,
    token_embed: ParamId,
    mm_embeddings: ParamId,
    pos_embed: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

/// Decoder outputs: next-token logits for every position and the final
/// hidden rows at the [MM] positions.
pub struct DecoderOutput {
    pub logits: Var,
    pub h: Var,
    pub prefix_len: usize,
}

impl Comprehension {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: &ComprehensionConfig, vocab: VocabSpec) -> Self {
        let c = config;
        let patch_dim = c.patch_size * c.patch_size * 3;
        b.scope("comprehension", |b| {
            let (patch_embed, patch_mix) = b.scope("vision", |b| {
                (
                    b.randn("patch", &[patch_dim, c.d_vision], 1.0 / (patch_dim as f64).sqrt(), true),
                    b.randn("mix", &[c.d_vision, c.d_vision], 1.0 / (c.d_vision as f64).sqrt(), true),
                )
            });
            let fc_align = Linear::new(b, "fc_align", c.d_vision, c.d_llm, true, true);
            let token_embed = b.randn("token_embed", &[vocab.base_size, c.d_llm], 1.0, true);
            let mm_embeddings = b.randn("mm_embeddings", &[c.r, c.d_llm], 1.0, false);
            let pos_embed = b.randn("pos_embed", &[c.max_len, c.d_llm], 0.1, true);
            let layers = (0..c.n_layers)
                .map(|i| {
                    b.scope(&format!("layers.{i}"), |b| DecoderLayer {
                        ln1: LayerNorm::new(b, "ln1", c.d_llm, true),
                        q: b.scope("attn", |b| LoraLinear::new(b, "q", c.d_llm, c.d_llm, c.lora_rank, c.lora_alpha)),
                        k: b.scope("attn", |b| LoraLinear::new(b, "k", c.d_llm, c.d_llm, c.lora_rank, c.lora_alpha)),
                        v: b.scope("attn", |b| LoraLinear::new(b, "v", c.d_llm, c.d_llm, c.lora_rank, c.lora_alpha)),
                        o: b.scope("attn", |b| LoraLinear::new(b, "o", c.d_llm, c.d_llm, c.lora_rank, c.lora_alpha)),
                        ln2: LayerNorm::new(b, "ln2", c.d_llm, true),
                        mlp: Mlp::new(b, "mlp", c.d_llm, 2 * c.d_llm, c.d_llm, true),
                    })
                })
                .collect();
            let ln_f = LayerNorm::new(b, "ln_f", c.d_llm, true);
            Comprehension {
                config: c.clone(),
                vocab,
                patch_embed,
                patch_mix,
                fc_align,
                token_embed,
                mm_embeddings,
                pos_embed,
                layers,
                ln_f,
            }
        })
    }

    /// Flattened RGB patches, one row per patch in raster order.
    pub fn patchify(&self, img: &RasterImage) -> Result<Tensor> {
        let p = self.config.patch_size;
        if img.width() % p != 0 || img.height() % p != 0 {
            return Err(Error::InvalidShape {
                shape: vec![img.height(), img.width()],
                reason: format!("image sides must be divisible by patch size {p}"),
            });
        }
        let (gx, gy) = (img.width() / p, img.height() / p);
        let mut data = Vec::with_capacity(gx * gy * p * p * 3);
        for py in 0..gy {
            for px in 0..gx {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            data.push(img.unit(px * p + x, py * p + y, c));
                        }
                    }
                }
            }
        }
        Tensor::new(&[gx * gy, p * p * 3], data)
    }

    /// Patch features `e + gelu(e·W_mix)` with `e = patches·W_patch`.
    pub fn encode_image(&self, f: &mut Forward<'_>, img: &RasterImage) -> Result<Var> {
        let patches = self.patchify(img)?;
        if patches.cols() != f.store().tensor(self.patch_embed).rows() {
            return Err(Error::shape("encode_image", patches.shape(), f.store().tensor(self.patch_embed).shape()));
        }
        let x = f.constant(patches);
        let w = f.param(self.patch_embed);
        let e = f.matmul(x, w)?;
        let m = f.param(self.patch_mix);
        let mixed = f.matmul(e, m)?;
        let mixed = f.gelu(mixed);
        f.add(e, mixed)
    }

    pub fn fc_align(&self, f: &mut Forward<'_>, v_raw: Var) -> Result<Var> {
        self.fc_align.forward(f, v_raw)
    }

    /// Tokenise an instruction and append the [MM] tokens.
    pub fn instruction_ids(&self, text: &str) -> Vec<usize> {
        append_mm_tokens(&self.vocab, &self.vocab.encode(text)).expect("tokeniser never emits [MM] ids")
    }

    /// Run the causal decoder over an optional aligned image prefix followed
    /// by `ids`, which must end with the [MM] tokens.
    pub fn run_decoder(&self, f: &mut Forward<'_>, v: Option<Var>, ids: &[usize]) -> Result<DecoderOutput> {
        let c = &self.config;
        let prefix_len = v.map_or(0, |v| f.value(v).rows());
        let len = prefix_len + ids.len();
        if len > c.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} exceeds max_len {}",
                c.max_len
            )));
        }
        let mm = self.vocab.mm_token_ids();
        if ids.len() < c.r || ids[ids.len() - c.r..] != mm[..] {
            return Err(Error::InvalidArgument("sequence must end with the [MM] tokens".to_string()));
        }
        let tok = f.param(self.token_embed);
        let mmv = f.param(self.mm_embeddings);
        let table = f.concat_rows(&[tok, mmv])?;
        let mut x = f.gather_rows(table, ids)?;
        if let Some(v) = v {
            x = f.concat_rows(&[v, x])?;
        }
        let pos = f.param(self.pos_embed);
        let pos = f.slice_rows(pos, 0, len)?;
        x = f.add(x, pos)?;
        for layer in &self.layers {
            let a = layer.ln1.forward(f, x)?;
            let q = layer.q.forward(f, a)?;
            let k = layer.k.forward(f, a)?;
            let vv = layer.v.forward(f, a)?;
            let att = multi_head_attention(f, q, k, vv, c.n_heads, true)?;
            let o = layer.o.forward(f, att)?;
            x = f.add(x, o)?;
            let m = layer.ln2.forward(f, x)?;
            let m = layer.mlp.forward(f, m)?;
            x = f.add(x, m)?;
        }
        let x = self.ln_f.forward(f, x)?;
        let logits = f.matmul_nt(x, table)?;
        let h = f.slice_rows(x, len - c.r, len)?;
        Ok(DecoderOutput { logits, h, prefix_len })
    }

    /// Mean NLL of each [MM] token given everything before it.
    pub fn llm_loss(&self, f: &mut Forward<'_>, out: &DecoderOutput, ids: &[usize]) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).filter(|&i| self.vocab.is_mm(ids[i])).collect();
        if positions.len() != self.config.r || positions[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "expected {} [MM] positions after the first token, found {}",
                self.config.r,
                positions.len()
            )));
        }
        let rows: Vec<usize> = positions.iter().map(|&p| out.prefix_len + p - 1).collect();
        let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
        let picked = f.gather_rows(out.logits, &rows)?;
        f.nll(picked, &targets)
    }

    /// Image-conditioned hidden states for an instruction.
    pub fn hidden_states(&self, f: &mut Forward<'_>, img: Option<&RasterImage>, ids: &[usize]) -> Result<DecoderOutput> {
        let v = match img {
            Some(img) => {
                let raw = self.encode_image(f, img)?;
                Some(self.fc_align(f, raw)?)
            }
            None => None,
        };
        self.run_decoder(f, v, ids)
    }
}
