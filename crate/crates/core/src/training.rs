//! Three-stage training: loss composition, trainable masks, AdamW with
//! linear warm-up, and the deterministic training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::datapipe::manifest::{resolve, Manifest};
use crate::error::{Error, Result};
use crate::generation::sd_loss;
use crate::model::Model;
use crate::nn::{Forward, ParamGrads, ParamStore};
use crate::raster::RasterImage;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub source: RasterImage,
    pub target: RasterImage,
    pub instruction: String,
}

/// Accepted rows of a manifest, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<TrainSample>> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .filter(|r| r.accepted)
        .map(|r| {
            Ok(TrainSample {
                source: RasterImage::load_ppm(&resolve(root, &r.src_path))?,
                target: RasterImage::load_ppm(&resolve(root, &r.tgt_path))?,
                instruction: r.instruction.clone(),
            })
        })
        .collect()
}

/// Parameter-name patterns trainable in `stage`. A pattern matches when its
/// dotted components appear in order within the parameter name.
pub fn trainable_mask(stage: u8) -> Result<&'static [&'static str]> {
    match stage {
        1 => Ok(&["lora", "mm_embeddings", "qformer", "iaa.mapper"]),
        2 => Ok(&["lora", "mm_embeddings", "qformer", "iaa.mapper", "bim", "denoiser"]),
        3 => Ok(&["iaa", "denoiser.cross_attn.img"]),
        s => Err(Error::InvalidArgument(format!("unknown stage {s}"))),
    }
}

pub fn pattern_matches(name: &str, pattern: &str) -> bool {
    let mut parts = name.split('.');
    pattern.split('.').all(|want| parts.any(|p| p == want))
}

/// Loss part names in summation order.
pub fn stage_parts(stage: u8) -> Result<&'static [&'static str]> {
    match stage {
        1 => Ok(&["llm", "text_feature", "image_feature"]),
        2 => Ok(&["llm", "sd", "target_image_feature"]),
        3 => Ok(&["target_image_feature", "sd"]),
        s => Err(Error::InvalidArgument(format!("unknown stage {s}"))),
    }
}

/// Restrict training to `stage`'s mask (permanently frozen weights stay frozen).
pub fn apply_stage_mask(store: &mut ParamStore, stage: u8) -> Result<()> {
    let patterns = trainable_mask(stage)?;
    store.set_trainable(|name| patterns.iter().any(|p| pattern_matches(name, p)));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub stage: u8,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Image-condition weight used by the diffusion loss.
    pub lambda: f64,
}

impl StageSchedule {
    /// Desk-scale defaults.
    pub fn desk(stage: u8) -> Result<Self> {
        let (lr, steps, lambda) = match stage {
            1 => (2e-3, 500, 0.0),
            2 => (3e-3, 300, 0.0),
            3 => (1e-3, 300, 1.0),
            s => return Err(Error::InvalidArgument(format!("unknown stage {s}"))),
        };
        Ok(StageSchedule {
            stage,
            lr,
            weight_decay: 0.0,
            warmup_ratio: if stage == 1 { 0.0 } else { 0.001 },
            steps,
            batch_size: 8,
            lambda,
        })
    }

    /// Optimiser settings of the full-scale recipe.
    pub fn full_scale(stage: u8) -> Result<Self> {
        let mut s = Self::desk(stage)?;
        if stage == 1 {
            s.lr = 2e-4;
            s.weight_decay = 0.0;
            s.warmup_ratio = 0.0;
        } else {
            s.lr = 1e-5;
            s.weight_decay = 0.0;
            s.warmup_ratio = 0.001;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        trainable_mask(self.stage)?;
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..=1.0).contains(&self.warmup_ratio)) {
            return Err(Error::Config(format!("invalid optimiser settings {self:?}")));
        }
        if self.batch_size == 0 || self.steps == 0 || self.lambda < 0.0 {
            return Err(Error::Config("steps and batch_size must be positive, lambda non-negative".to_string()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).ceil() as usize
    }

    /// Learning rate at 0-based `step`: linear ramp from 0, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * step as f64 / w as f64
        } else {
            self.lr
        }
    }
}

/// AdamW moments for trainable parameters only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            t: 0,
            moments: store
                .ids()
                .map(|id| {
                    store.is_trainable(id).then(|| {
                        let shape = store.tensor(id).shape();
                        (Tensor::zeros(shape), Tensor::zeros(shape))
                    })
                })
                .collect(),
        }
    }
}

/// One AdamW update at learning rate `lr`; parameters without moments or
/// without a gradient are left untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some((m, v)) = state.moments[id.index()].as_mut() else { continue };
        let Some(g) = grads.get(id) else { continue };
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
        }
        let p = store.tensor_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            p[i] -= lr * (update + weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Named loss parts and their sum, all on one tape.
pub struct StageLoss {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

/// Batch-mean loss parts for `stage`, summed in the fixed part order.
/// `rng` supplies the diffusion timesteps and noise.
pub fn stage_losses<R: Rng + ?Sized>(
    model: &Model,
    f: &mut Forward<'_>,
    stage: u8,
    batch: &[&TrainSample],
    lambda: f64,
    rng: &mut R,
) -> Result<StageLoss> {
    let names = stage_parts(stage)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let mut sums: Vec<Option<Var>> = vec![None; names.len()];
    let vocab = &model.comprehension.vocab;
    for sample in batch {
        let image = (stage != 1).then_some(&sample.source);
        let c = model.conditions(f, image, &sample.instruction)?;
        let mut values = Vec::with_capacity(names.len());
        for name in names {
            let v = match *name {
                "llm" => model.comprehension.llm_loss(f, &c.decoder, &c.ids)?,
                "text_feature" => model.bridging.text_feature_loss(f, c.q_prime, vocab, &sample.instruction)?,
                "image_feature" => model.bridging.image_feature_loss(f, c.mapped, &sample.source)?,
                "target_image_feature" => model.bridging.iaa_loss(f, c.mapped, &sample.target)?,
                "sd" => {
                    let (f_txt, v_txt) = (c.f_txt.expect("image given"), c.v_txt.expect("image given"));
                    let z0 = model.codec.encode(&sample.target)?;
                    let src = model.codec.encode(&sample.source)?;
                    let t = rng.random_range(1..=model.schedule.steps());
                    let eps = Tensor::randn(z0.shape(), 1.0, rng);
                    let zt = model.schedule.add_noise(&z0, t, &eps)?;
                    let (zt, src) = (f.constant(zt), f.constant(src));
                    let eps_hat = model.denoiser.predict_noise(f, zt, src, v_txt, f_txt, c.f_img, t, lambda)?;
                    sd_loss(f, eps_hat, &eps)?
                }
                other => unreachable!("unknown loss part {other}"),
            };
            values.push(v);
        }
        for (slot, v) in sums.iter_mut().zip(values) {
            *slot = Some(match *slot {
                Some(acc) => f.add(acc, v)?,
                None => v,
            });
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let parts: Vec<(&'static str, Var)> = names
        .iter()
        .zip(sums)
        .map(|(n, s)| (*n, f.scale(s.expect("batch is nonempty"), inv)))
        .collect();
    let mut total = parts[0].1;
    for &(_, p) in &parts[1..] {
        total = f.add(total, p)?;
    }
    Ok(StageLoss { total, parts })
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub stage: u8,
    pub total: f64,
    pub parts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub part_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,total");
        for n in &self.part_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.step, r.stage, r.total);
            for p in &r.parts {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mutable training state carried across steps and checkpoints.
pub struct TrainState {
    pub stage: u8,
    /// Optimiser steps completed in this stage.
    pub step: usize,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &mut Model, stage: u8, seed: u64) -> Result<Self> {
        apply_stage_mask(&mut model.store, stage)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(stage));
        Ok(TrainState {
            stage,
            step: 0,
            adam: AdamState::new(&model.store),
            rng,
            seed,
        })
    }
}

/// Dataset indices for 0-based `step`: each epoch is a fresh seeded shuffle.
pub fn batch_indices(seed: u64, stage: u8, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for k in 0..batch_size {
        let pos = step * batch_size + k;
        let epoch = pos / n;
        if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(stage) << 56));
            rng.set_stream(epoch as u64 + 1);
            perm.shuffle(&mut rng);
            epoch_cache = Some((epoch, perm));
        }
        out.push(epoch_cache.as_ref().expect("filled above").1[pos % n]);
    }
    out
}

/// Run one optimiser step and return its trace row.
pub fn train_step(model: &mut Model, state: &mut TrainState, schedule: &StageSchedule, data: &[TrainSample]) -> Result<TraceRow> {
    let idx = batch_indices(state.seed, state.stage, state.step, schedule.batch_size, data.len());
    let batch: Vec<&TrainSample> = idx.iter().map(|&i| &data[i]).collect();
    let (grads, total, parts) = {
        let mut f = Forward::new(&model.store);
        let loss = stage_losses(model, &mut f, state.stage, &batch, schedule.lambda, &mut state.rng)?;
        let total = f.value(loss.total).item();
        let parts: Vec<f64> = loss.parts.iter().map(|(_, v)| f.value(*v).item()).collect();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("stage {} loss at step {}", state.stage, state.step + 1)));
        }
        (f.backward(loss.total)?, total, parts)
    };
    let lr = schedule.lr_at(state.step);
    adamw_step(&mut model.store, &grads, &mut state.adam, lr, schedule.weight_decay)?;
    state.step += 1;
    Ok(TraceRow {
        step: state.step,
        stage: state.stage,
        total,
        parts,
    })
}

/// Continue `state` until `schedule.steps` optimiser steps are done.
pub fn train_stage(model: &mut Model, state: &mut TrainState, schedule: &StageSchedule, data: &[TrainSample]) -> Result<LossTrace> {
    schedule.validate()?;
    if schedule.stage != state.stage {
        return Err(Error::InvalidArgument(format!(
            "schedule for stage {} applied to stage {} state",
            schedule.stage, state.stage
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".to_string()));
    }
    let mut trace = LossTrace {
        part_names: stage_parts(state.stage)?.iter().map(|s| s.to_string()).collect(),
        rows: Vec::new(),
    };
    while state.step < schedule.steps {
        trace.rows.push(train_step(model, state, schedule, data)?);
    }
    Ok(trace)
}
