//! Binary checkpoints: config echo, parameters, optimiser moments, RNG
//! state and training position. All numbers are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{apply_stage_mask, AdamState, TrainState};

pub const MAGIC: &[u8] = b"BRIDGECOND1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: u8,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam_t: u64,
    /// Moments keyed by parameter name, trainable parameters only.
    pub moments: Vec<(String, Tensor, Tensor)>,
    pub seed: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn capture(model: &Model, state: &TrainState) -> Self {
        let params = model.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
        let moments = model
            .store
            .iter()
            .filter_map(|(id, p)| {
                state.adam.moments[id.index()]
                    .as_ref()
                    .map(|(m, v)| (p.name.clone(), m.clone(), v.clone()))
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            stage: state.stage,
            step: state.step,
            params,
            adam_t: state.adam.t,
            moments,
            seed: state.seed,
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
        }
    }

    /// Rebuild the model and copy the stored parameters into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if model.store.tensor(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *model.store.tensor_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// The model plus the exact training state, for resuming this stage.
    pub fn resume(&self) -> Result<(Model, TrainState)> {
        let mut model = self.model()?;
        apply_stage_mask(&mut model.store, self.stage)?;
        let mut adam = AdamState::new(&model.store);
        adam.t = self.adam_t;
        for (name, m, v) in &self.moments {
            let id = model.store.id(name).expect("names checked in model()");
            let slot = adam.moments[id.index()]
                .as_mut()
                .ok_or_else(|| Error::Checkpoint(format!("moments stored for non-trainable {name}")))?;
            *slot = (m.clone(), v.clone());
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        let state = TrainState {
            stage: self.stage,
            step: self.step,
            adam,
            rng,
            seed: self.seed,
        };
        Ok((model, state))
    }

    /// Error unless this checkpoint was made with `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".to_string()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_bytes(&mut out, self.config.to_toml().as_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_named_tensor(&mut out, name, t);
        }
        put_u64(&mut out, self.adam_t);
        put_u64(&mut out, self.moments.len() as u64);
        for (name, m, v) in &self.moments {
            put_named_tensor(&mut out, name, m);
            put_f64s(&mut out, v.data());
        }
        put_u64(&mut out, self.seed);
        out.extend_from_slice(&self.rng_seed);
        put_u64(&mut out, self.rng_stream);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.push(self.stage);
        put_u64(&mut out, self.step as u64);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".to_string()));
        }
        let text = std::str::from_utf8(r.bytes_block()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = ModelConfig::from_toml(text)?;
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            params.push(r.named_tensor()?);
        }
        let adam_t = r.u64()?;
        let n = r.u64()? as usize;
        let mut moments = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (name, m) = r.named_tensor()?;
            let v = Tensor::new(m.shape(), r.f64s(m.numel())?)?;
            moments.push((name, m, v));
        }
        let seed = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("length 32");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("length 16"));
        let stage = r.take(1)?[0];
        let step = r.u64()? as usize;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".to_string()));
        }
        Ok(Checkpoint {
            config,
            stage,
            step,
            params,
            adam_t,
            moments,
            seed,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_named_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_f64s(out, t.data());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length 4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length 8")))
    }

    fn bytes_block(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".to_string()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("length 8")))
            .collect())
    }

    fn named_tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint("size overflow".to_string()))?;
        let data = self.f64s(numel)?;
        Ok((name, Tensor::new(&shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{train_stage, StageSchedule, TrainSample};
    use crate::datapipe::world::gen_scene;
    use crate::raster::RasterImage;

    fn toy_data() -> Vec<TrainSample> {
        (0..4)
            .map(|s| {
                let (_, img) = gen_scene(s);
                let mut small = RasterImage::filled(16, 16, [0, 0, 0]);
                for y in 0..16 {
                    for x in 0..16 {
                        small.set_pixel(x, y, img.pixel(2 * x, 2 * y));
                    }
                }
                TrainSample {
                    source: small.clone(),
                    target: small,
                    instruction: "remove the red circle.".to_string(),
                }
            })
            .collect()
    }

    #[test]
    fn bytes_round_trip_and_resume_is_bit_exact() {
        let data = toy_data();
        let sched = |steps| StageSchedule { steps, batch_size: 2, ..StageSchedule::desk(2).unwrap() };
        let mut model = Model::new(&ModelConfig::tiny()).unwrap();
        let mut state = TrainState::new(&mut model, 2, 7).unwrap();
        train_stage(&mut model, &mut state, &sched(2), &data).unwrap();
        let ck = Checkpoint::capture(&model, &state);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..MAGIC.len()], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);

        train_stage(&mut model, &mut state, &sched(4), &data).unwrap();
        let (mut m2, mut s2) = back.resume().unwrap();
        train_stage(&mut m2, &mut s2, &sched(4), &data).unwrap();
        assert_eq!(Checkpoint::capture(&model, &state).to_bytes(), Checkpoint::capture(&m2, &s2).to_bytes());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = Model::new(&ModelConfig::tiny()).unwrap();
        let mut m = Model::new(&ModelConfig::tiny()).unwrap();
        let state = TrainState::new(&mut m, 1, 0).unwrap();
        let bytes = Checkpoint::capture(&model, &state).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACHECKPOINT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(ck.check_config(&ModelConfig::default()).is_err());
        assert!(ck.check_config(&ModelConfig::tiny()).is_ok());
    }
}
