//! Flat key = value run configuration covering model dimensions, stage
//! schedules, pipeline thresholds and inference defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridging::BridgingConfig;
use crate::comprehension::ComprehensionConfig;
use crate::datapipe::grammar::{InstructionMode, Task};
use crate::datapipe::pipeline::PipelineConfig;
use crate::error::{Error, Result};
use crate::generation::{CodecConfig, DenoiserConfig, ScheduleConfig};
use crate::model::ModelConfig;
use crate::training::StageSchedule;

/// Environment variable consulted when no seed flag is given.
pub const SEED_ENV: &str = "BRIDGECOND_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub d_llm: usize,
    pub d_vision: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mm_tokens: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_len: usize,

    pub d_cond: usize,
    pub query_tokens: usize,
    pub image_tokens: usize,
    pub d_attn: usize,
    pub mapper_hidden: usize,

    pub d_model: usize,
    pub denoiser_blocks: usize,
    pub denoiser_heads: usize,
    pub lambda: f64,
    pub codec_factor: usize,
    pub latent_channels: usize,
    pub latent_scale: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,

    pub stage1_lr: f64,
    pub stage1_weight_decay: f64,
    pub stage1_warmup_ratio: f64,
    pub stage1_steps: usize,
    pub stage1_batch_size: usize,
    pub stage2_lr: f64,
    pub stage2_weight_decay: f64,
    pub stage2_warmup_ratio: f64,
    pub stage2_steps: usize,
    pub stage2_batch_size: usize,
    pub stage3_lr: f64,
    pub stage3_weight_decay: f64,
    pub stage3_warmup_ratio: f64,
    pub stage3_steps: usize,
    pub stage3_batch_size: usize,

    pub tau_conf: f64,
    pub tau_q: f64,
    pub close_radius: usize,
    pub tasks: Vec<Task>,
    pub modes: Vec<InstructionMode>,
    pub scorer: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PipelineConfig::default();
        let s: Vec<StageSchedule> = (1..=3).map(|i| StageSchedule::desk(i).expect("valid stage")).collect();
        RunConfig {
            seed: m.seed,
            d_llm: m.comprehension.d_llm,
            d_vision: m.comprehension.d_vision,
            llm_layers: m.comprehension.n_layers,
            llm_heads: m.comprehension.n_heads,
            patch_size: m.comprehension.patch_size,
            image_size: m.comprehension.image_size,
            mm_tokens: m.comprehension.r,
            lora_rank: m.comprehension.lora_rank,
            lora_alpha: m.comprehension.lora_alpha,
            max_len: m.comprehension.max_len,
            d_cond: m.bridging.d_cond,
            query_tokens: m.bridging.t_q,
            image_tokens: m.bridging.n_img_tokens,
            d_attn: m.bridging.d_attn,
            mapper_hidden: m.bridging.mapper_hidden,
            d_model: m.denoiser.d_model,
            denoiser_blocks: m.denoiser.n_blocks,
            denoiser_heads: m.denoiser.n_heads,
            lambda: m.denoiser.lambda_default,
            codec_factor: m.codec.factor,
            latent_channels: m.codec.d_z,
            latent_scale: m.codec.scale,
            diffusion_steps: m.schedule.steps,
            beta_start: m.schedule.beta_start,
            beta_end: m.schedule.beta_end,
            sample_steps: m.schedule.steps,
            stage1_lr: s[0].lr,
            stage1_weight_decay: s[0].weight_decay,
            stage1_warmup_ratio: s[0].warmup_ratio,
            stage1_steps: s[0].steps,
            stage1_batch_size: s[0].batch_size,
            stage2_lr: s[1].lr,
            stage2_weight_decay: s[1].weight_decay,
            stage2_warmup_ratio: s[1].warmup_ratio,
            stage2_steps: s[1].steps,
            stage2_batch_size: s[1].batch_size,
            stage3_lr: s[2].lr,
            stage3_weight_decay: s[2].weight_decay,
            stage3_warmup_ratio: s[2].warmup_ratio,
            stage3_steps: s[2].steps,
            stage3_batch_size: s[2].batch_size,
            tau_conf: p.tau_conf,
            tau_q: p.tau_q,
            close_radius: p.close_radius,
            tasks: p.tasks,
            modes: p.modes,
            scorer: "mock".to_string(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Defaults, or the file at `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.pipeline_config(0, 0).validate()?;
        for stage in 1..=3 {
            self.stage_schedule(stage)?.validate()?;
        }
        if self.lambda < 0.0 || self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            return Err(Error::Config(
                "lambda must be non-negative and sample_steps within 1..=diffusion_steps".to_string(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            comprehension: ComprehensionConfig {
                d_llm: self.d_llm,
                d_vision: self.d_vision,
                n_layers: self.llm_layers,
                n_heads: self.llm_heads,
                patch_size: self.patch_size,
                image_size: self.image_size,
                r: self.mm_tokens,
                lora_rank: self.lora_rank,
                lora_alpha: self.lora_alpha,
                max_len: self.max_len,
            },
            bridging: BridgingConfig {
                d_cond: self.d_cond,
                t_q: self.query_tokens,
                n_img_tokens: self.image_tokens,
                d_attn: self.d_attn,
                mapper_hidden: self.mapper_hidden,
            },
            denoiser: DenoiserConfig {
                d_model: self.d_model,
                n_blocks: self.denoiser_blocks,
                n_heads: self.denoiser_heads,
                lambda_default: self.lambda,
            },
            codec: CodecConfig {
                factor: self.codec_factor,
                d_z: self.latent_channels,
                scale: self.latent_scale,
            },
            schedule: ScheduleConfig {
                steps: self.diffusion_steps,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
        }
    }

    pub fn stage_schedule(&self, stage: u8) -> Result<StageSchedule> {
        let base = StageSchedule::desk(stage)?;
        let (lr, weight_decay, warmup_ratio, steps, batch_size) = match stage {
            1 => (self.stage1_lr, self.stage1_weight_decay, self.stage1_warmup_ratio, self.stage1_steps, self.stage1_batch_size),
            2 => (self.stage2_lr, self.stage2_weight_decay, self.stage2_warmup_ratio, self.stage2_steps, self.stage2_batch_size),
            _ => (self.stage3_lr, self.stage3_weight_decay, self.stage3_warmup_ratio, self.stage3_steps, self.stage3_batch_size),
        };
        Ok(StageSchedule {
            lr,
            weight_decay,
            warmup_ratio,
            steps,
            batch_size,
            ..base
        })
    }

    pub fn pipeline_config(&self, n_scenes: usize, base_seed: u64) -> PipelineConfig {
        PipelineConfig {
            n_scenes,
            base_seed,
            tau_conf: self.tau_conf,
            tau_q: self.tau_q,
            close_radius: self.close_radius,
            tasks: self.tasks.clone(),
            modes: self.modes.clone(),
        }
    }
}

/// Seed from the environment fallback variable, if set and numeric.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
