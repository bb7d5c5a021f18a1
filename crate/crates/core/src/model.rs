//! The full editing model: comprehension, bridging and generation over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bridging::{BridgeDims, Bridging, BridgingConfig};
use crate::comprehension::{Comprehension, ComprehensionConfig, DecoderOutput, VocabSpec};
use crate::error::{Error, Result};
use crate::generation::{
    sample_latent, CodecConfig, Denoiser, DenoiserConfig, LatentCodec, NoiseSchedule, SampleConditions, ScheduleConfig,
};
use crate::nn::{Builder, Forward, ParamStore};
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub comprehension: ComprehensionConfig,
    pub bridging: BridgingConfig,
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            comprehension: ComprehensionConfig::default(),
            bridging: BridgingConfig::default(),
            denoiser: DenoiserConfig::default(),
            codec: CodecConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A much smaller model for gradient checks and quick tests.
    pub fn tiny() -> Self {
        ModelConfig {
            seed: 0,
            comprehension: ComprehensionConfig {
                d_llm: 8,
                d_vision: 6,
                n_layers: 1,
                n_heads: 2,
                patch_size: 8,
                image_size: 16,
                r: 2,
                lora_rank: 2,
                lora_alpha: 2.0,
                max_len: 40,
            },
            bridging: BridgingConfig {
                d_cond: 6,
                t_q: 3,
                n_img_tokens: 2,
                d_attn: 4,
                mapper_hidden: 5,
            },
            denoiser: DenoiserConfig {
                d_model: 8,
                n_blocks: 1,
                n_heads: 2,
                lambda_default: 1.0,
            },
            codec: CodecConfig {
                factor: 8,
                d_z: 4,
                scale: 0.5,
            },
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.comprehension.validate()?;
        let c = &self.comprehension;
        if c.image_size % self.codec.factor != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by codec factor {}",
                c.image_size, self.codec.factor
            )));
        }
        if self.denoiser.n_heads == 0 || self.denoiser.d_model % self.denoiser.n_heads != 0 {
            return Err(Error::Config("denoiser d_model must be divisible by n_heads".to_string()));
        }
        if self.bridging.t_q == 0 || self.bridging.n_img_tokens == 0 {
            return Err(Error::Config("t_q and n_img_tokens must be positive".to_string()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Every intermediate of one conditioning pass.
pub struct Conditions {
    pub decoder: DecoderOutput,
    pub ids: Vec<usize>,
    pub q_prime: Var,
    pub mapped: Var,
    pub f_img: Var,
    /// Present when the source image was fed to the model.
    pub f_txt: Option<Var>,
    pub v_txt: Option<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub comprehension: Comprehension,
    pub bridging: Bridging,
    pub denoiser: Denoiser,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let codec = LatentCodec::new(&config.codec)?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        let c = &config.comprehension;
        let vocab = VocabSpec::closed(c.r);
        let latent_side = codec.latent_side(c.image_size);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let vocab_words = vocab.base_size;
        let comprehension = Comprehension::new(&mut b, c, vocab);
        let dims = BridgeDims {
            d_llm: c.d_llm,
            r: c.r,
            d_vision: c.d_vision,
            vision_side: c.image_size / c.patch_size,
            d_model: config.denoiser.d_model,
            latent_side,
        };
        let bridging = Bridging::new(&mut b, &config.bridging, dims, vocab_words);
        let denoiser = Denoiser::new(&mut b, &config.denoiser, &schedule, codec.d_z(), latent_side, config.bridging.d_cond);
        store.set_trainable(|_| true);
        Ok(Model {
            config: config.clone(),
            store,
            comprehension,
            bridging,
            denoiser,
            codec,
            schedule,
        })
    }

    /// Run comprehension and bridging. Without an image the decoder sees
    /// text only and the BIM outputs are skipped.
    pub fn conditions(&self, f: &mut Forward<'_>, image: Option<&RasterImage>, instruction: &str) -> Result<Conditions> {
        let ids = self.comprehension.instruction_ids(instruction);
        let (decoder, feats) = match image {
            Some(img) => {
                let raw = self.comprehension.encode_image(f, img)?;
                let v = self.comprehension.fc_align(f, raw)?;
                (self.comprehension.run_decoder(f, Some(v), &ids)?, Some(raw))
            }
            None => (self.comprehension.run_decoder(f, None, &ids)?, None),
        };
        let q_prime = self.bridging.qformer(f, decoder.h)?;
        let (mapped, f_img) = self.bridging.iaa(f, decoder.h)?;
        let (f_txt, v_txt) = match feats {
            Some(raw) => {
                let (t, v) = self.bridging.bim(f, raw, q_prime)?;
                (Some(t), Some(v))
            }
            None => (None, None),
        };
        Ok(Conditions {
            decoder,
            ids,
            q_prime,
            mapped,
            f_img,
            f_txt,
            v_txt,
        })
    }

    /// Conditioning tensors for sampling an edit of `source`.
    pub fn sample_conditions(&self, source: &RasterImage, instruction: &str) -> Result<SampleConditions> {
        let mut f = Forward::inference(&self.store);
        let c = self.conditions(&mut f, Some(source), instruction)?;
        let (f_txt, v_txt) = (c.f_txt.expect("image given"), c.v_txt.expect("image given"));
        Ok(SampleConditions {
            src_latent: self.codec.encode(source)?,
            v_txt: f.value(v_txt).clone(),
            f_txt: f.value(f_txt).clone(),
            f_img: f.value(c.f_img).clone(),
        })
    }

    /// Sample an edited image with image-condition weight `lambda`.
    pub fn edit(&self, source: &RasterImage, instruction: &str, lambda: f64, steps: usize, seed: u64) -> Result<RasterImage> {
        let side = self.config.comprehension.image_size;
        if source.width() != side || source.height() != side {
            return Err(Error::InvalidShape {
                shape: vec![source.height(), source.width()],
                reason: format!("model expects {side}x{side} images"),
            });
        }
        for (_, p) in self.store.iter() {
            if !p.tensor.all_finite() {
                return Err(Error::NonFinite(format!("parameter {} holds non-finite values", p.name)));
            }
        }
        let cond = self.sample_conditions(source, instruction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_latent(&self.store, &self.denoiser, &self.schedule, &cond, lambda, steps, &mut rng)?;
        self.codec.decode(&z)
    }
}
