//! Finite-difference verification of every differentiable block.
//!
//! Each block is a scalar function of a parameter store. Inputs are added to
//! a clone of the tiny model's store as extra parameters, every parameter is
//! jittered so zero-initialised weights get non-trivial gradients, and a
//! sample of elements is compared against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::datapipe::world::gen_scene;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{grad_rel_error, multi_head_attention, Builder, Forward, LoraLinear, ParamId, ParamStore};
use crate::raster::RasterImage;
use crate::tensor::Tensor;
use crate::training::{apply_stage_mask, stage_losses, TrainSample};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Elements sampled per parameter tensor.
const PER_TENSOR: usize = 3;
const JITTER: f64 = 0.3;

pub const BLOCKS: &[&str] = &[
    "attention",
    "layer_norm",
    "lora",
    "qformer",
    "bim",
    "iaa",
    "denoiser",
    "stage1_loss",
    "stage2_loss",
    "stage3_loss",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub block: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Rows for `"all"` or for one named block.
pub fn run(which: &str) -> Result<Vec<GradcheckRow>> {
    let names: Vec<&str> = if which == "all" {
        BLOCKS.to_vec()
    } else if BLOCKS.contains(&which) {
        vec![which]
    } else {
        return Err(Error::InvalidArgument(format!(
            "unknown block {which:?}; expected all or one of {}",
            BLOCKS.join(", ")
        )));
    };
    names.into_iter().map(check_block).collect()
}

pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<14} {:>9} {:>14}  status\n", "block", "elements", "max_rel_error");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>9} {:>14.3e}  {}\n",
            r.block,
            r.elements,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

fn check_block(name: &str) -> Result<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let model = Model::new(&ModelConfig::tiny())?;
    let mut store = model.store.clone();
    let (elements, err) = match name {
        "attention" => {
            let mut s = ParamStore::new();
            let ids: Vec<ParamId> = ["q", "k", "v"]
                .iter()
                .map(|n| s.add(*n, Tensor::randn(&[5, 6], 1.0, &mut rng), false))
                .collect();
            let w = Tensor::randn(&[5, 6], 1.0, &mut rng);
            compare(&mut s, |_| true, &mut rng, |f| {
                let (q, k, v) = (f.param(ids[0]), f.param(ids[1]), f.param(ids[2]));
                let a = multi_head_attention(f, q, k, v, 2, false)?;
                let c = multi_head_attention(f, q, k, v, 3, true)?;
                let y = f.add(a, c)?;
                weighted(f, y, &w)
            })?
        }
        "layer_norm" => {
            let mut s = ParamStore::new();
            let x = s.add("x", Tensor::randn(&[4, 7], 1.0, &mut rng), false);
            let g = s.add("gamma", Tensor::randn(&[7], 1.0, &mut rng), false);
            let b = s.add("beta", Tensor::randn(&[7], 1.0, &mut rng), false);
            let w = Tensor::randn(&[4, 7], 1.0, &mut rng);
            compare(&mut s, |_| true, &mut rng, |f| {
                let (xv, gv, bv) = (f.param(x), f.param(g), f.param(b));
                let y = f.layer_norm(xv, gv, bv, 1e-5)?;
                weighted(f, y, &w)
            })?
        }
        "lora" => {
            let mut s = ParamStore::new();
            let mut init = ChaCha8Rng::seed_from_u64(1);
            let layer = LoraLinear::new(&mut Builder::new(&mut s, &mut init), "proj", 6, 5, 2, 4.0);
            let x = s.add("x", Tensor::randn(&[3, 6], 1.0, &mut rng), false);
            let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
            compare(&mut s, |_| true, &mut rng, |f| {
                let xv = f.param(x);
                let y = layer.forward(f, xv)?;
                weighted(f, y, &w)
            })?
        }
        "qformer" | "iaa" => {
            let c = &model.config.comprehension;
            let h = store.add("gradcheck.h", Tensor::randn(&[c.r, c.d_llm], 1.0, &mut rng), false);
            let probe = model.bridging.clone();
            let shapes = output_shapes(&store, |f| {
                let hv = f.param(h);
                if name == "qformer" {
                    Ok(vec![probe.qformer(f, hv)?])
                } else {
                    let (a, b) = probe.iaa(f, hv)?;
                    Ok(vec![a, b])
                }
            })?;
            let ws: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let prefix = format!("bridging.{name}");
            compare(&mut store, |n| n.starts_with(&prefix) || n.starts_with("gradcheck"), &mut rng, |f| {
                let hv = f.param(h);
                let outs = if name == "qformer" {
                    vec![probe.qformer(f, hv)?]
                } else {
                    let (a, b) = probe.iaa(f, hv)?;
                    vec![a, b]
                };
                weighted_all(f, &outs, &ws)
            })?
        }
        "bim" => {
            let c = &model.config.comprehension;
            let b = &model.config.bridging;
            let n = c.patch_grid() * c.patch_grid();
            let feats = store.add("gradcheck.feats", Tensor::randn(&[n, c.d_vision], 1.0, &mut rng), false);
            let q = store.add("gradcheck.q", Tensor::randn(&[b.t_q, b.d_cond], 1.0, &mut rng), false);
            let probe = model.bridging.clone();
            let run_bim = |f: &mut Forward<'_>| -> Result<Vec<Var>> {
                let (fv, qv) = (f.param(feats), f.param(q));
                let (a, b) = probe.bim(f, fv, qv)?;
                Ok(vec![a, b])
            };
            let shapes = output_shapes(&store, run_bim)?;
            let ws: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            compare(
                &mut store,
                |n| n.starts_with("bridging.bim") || n.starts_with("gradcheck"),
                &mut rng,
                |f| {
                    let outs = run_bim(f)?;
                    weighted_all(f, &outs, &ws)
                },
            )?
        }
        "denoiser" => {
            let cfg = &model.config;
            let tokens = model.denoiser.side * model.denoiser.side;
            let mut add = |n: &str, shape: &[usize]| store.add(format!("gradcheck.{n}"), Tensor::randn(shape, 1.0, &mut rng), false);
            let ids = [
                add("z_t", &[tokens, model.denoiser.d_z]),
                add("src", &[tokens, model.denoiser.d_z]),
                add("v_txt", &[tokens, cfg.denoiser.d_model]),
                add("f_txt", &[cfg.bridging.t_q, cfg.bridging.d_cond]),
                add("f_img", &[cfg.bridging.n_img_tokens, cfg.bridging.d_cond]),
            ];
            let w = Tensor::randn(&[tokens, model.denoiser.d_z], 1.0, &mut rng);
            let den = model.denoiser.clone();
            compare(
                &mut store,
                |n| n.starts_with("generation") || n.starts_with("gradcheck"),
                &mut rng,
                |f| {
                    let v: Vec<Var> = ids.iter().map(|&id| f.param(id)).collect();
                    let e = den.predict_noise(f, v[0], v[1], v[2], v[3], v[4], 37, 0.7)?;
                    weighted(f, e, &w)
                },
            )?
        }
        "stage1_loss" | "stage2_loss" | "stage3_loss" => {
            let stage = name.as_bytes()[5] - b'0';
            apply_stage_mask(&mut store, stage)?;
            let data = tiny_batch(model.config.comprehension.image_size);
            let batch: Vec<&TrainSample> = data.iter().collect();
            let lambda = if stage == 3 { 1.0 } else { 0.0 };
            let mut local = Model::new(&model.config)?;
            compare_with_model(&mut store, &mut local, &mut rng, |m, f| {
                let mut noise = ChaCha8Rng::seed_from_u64(5);
                let loss = stage_losses(m, f, stage, &batch, lambda, &mut noise)?;
                Ok(loss.total)
            })?
        }
        other => unreachable!("block {other} is listed in BLOCKS"),
    };
    Ok(GradcheckRow {
        block: name.to_string(),
        elements,
        max_rel_error: err,
    })
}

fn tiny_batch(side: usize) -> Vec<TrainSample> {
    (0..2)
        .map(|s| {
            let (_, img) = gen_scene(s);
            let step = img.width() / side;
            let mut small = RasterImage::filled(side, side, [0, 0, 0]);
            for y in 0..side {
                for x in 0..side {
                    small.set_pixel(x, y, img.pixel(x * step, y * step));
                }
            }
            let target = RasterImage::filled(side, side, small.pixel(0, 0));
            TrainSample {
                source: small,
                target,
                instruction: "remove the red circle.".to_string(),
            }
        })
        .collect()
}

fn weighted(f: &mut Forward<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let wv = f.constant(w.clone());
    let p = f.mul(y, wv)?;
    Ok(f.sum(p))
}

fn weighted_all(f: &mut Forward<'_>, ys: &[Var], ws: &[Tensor]) -> Result<Var> {
    let mut total = weighted(f, ys[0], &ws[0])?;
    for (y, w) in ys.iter().zip(ws).skip(1) {
        let s = weighted(f, *y, w)?;
        total = f.add(total, s)?;
    }
    Ok(total)
}

fn output_shapes(store: &ParamStore, run: impl Fn(&mut Forward<'_>) -> Result<Vec<Var>>) -> Result<Vec<Vec<usize>>> {
    let mut f = Forward::inference(store);
    let outs = run(&mut f)?;
    Ok(outs.iter().map(|v| f.shape(*v).to_vec()).collect())
}

/// Jitter the selected parameters, then compare sampled gradient entries.
fn compare(
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&mut Forward<'_>) -> Result<Var>,
) -> Result<(usize, f64)> {
    store.set_trainable(&select);
    jitter(store, rng);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut f = Forward::inference(s);
        let l = loss(&mut f)?;
        Ok(f.value(l).item())
    };
    let grads = {
        let mut f = Forward::new(store);
        let l = loss(&mut f)?;
        f.backward(l)?
    };
    sampled_compare(store, rng, |s| eval(s), |id| grads.get(id).cloned())
}

/// As [`compare`] for losses that need the whole model bound to the store.
fn compare_with_model(
    store: &mut ParamStore,
    model: &mut Model,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&Model, &mut Forward<'_>) -> Result<Var>,
) -> Result<(usize, f64)> {
    jitter(store, rng);
    model.store = store.clone();
    let grads = {
        let mut f = Forward::new(&model.store);
        let l = loss(model, &mut f)?;
        f.backward(l)?
    };
    let cell = std::cell::RefCell::new(model);
    sampled_compare(
        store,
        rng,
        |s| {
            let mut m = cell.borrow_mut();
            m.store = s.clone();
            let m = &**m;
            let mut f = Forward::inference(&m.store);
            let l = loss(m, &mut f)?;
            Ok(f.value(l).item())
        },
        |id| grads.get(id).cloned(),
    )
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let noise = Tensor::randn(store.tensor(id).shape(), JITTER, rng);
        store.tensor_mut(id).add_assign(&noise);
    }
}

fn sampled_compare(
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(&ParamStore) -> Result<f64>,
    analytic: impl Fn(ParamId) -> Option<Tensor>,
) -> Result<(usize, f64)> {
    let mut probe = store.clone();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no trainable parameters selected".to_string()));
    }
    for id in ids {
        let numel = store.tensor(id).numel();
        let g = analytic(id).unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
        for i in sample(rng, numel, PER_TENSOR.min(numel)).into_vec() {
            let orig = store.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            n.push((plus - minus) / (2.0 * STEP));
            a.push(g.data()[i]);
        }
    }
    let len = a.len();
    let at = Tensor::new(&[len], a)?;
    let nt = Tensor::new(&[len], n)?;
    Ok((len, grad_rel_error(&at, &nt)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_block_is_rejected() {
        assert!(run("nonsense").is_err());
    }

    #[test]
    fn table_marks_failures() {
        let rows = vec![
            GradcheckRow { block: "a".into(), elements: 3, max_rel_error: 1e-9 },
            GradcheckRow { block: "b".into(), elements: 3, max_rel_error: 1e-2 },
        ];
        let t = format_table(&rows);
        assert!(t.contains("ok") && t.contains("FAIL"));
    }

    #[test]
    fn small_blocks_pass() {
        for b in ["attention", "layer_norm", "lora"] {
            let row = &run(b).unwrap()[0];
            assert!(row.passed(), "{row:?}");
        }
    }
}
