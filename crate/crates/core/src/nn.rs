//! Named parameters, the per-forward binding context, and the layers every
//! model block is assembled from.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon used by every normalisation layer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model weight.
///
/// `frozen` marks weights that are never trained in any stage (frozen base
/// projections, fixed embedders). Stage masks narrow the trainable set further
/// through [`ParamStore::set_trainable`].
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Insertion-ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    active: Vec<bool>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on a duplicate name: names are fixed by
    /// model construction, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen,
        });
        self.active.push(!frozen);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Whether the parameter currently receives gradients.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.active[id.0]
    }

    /// Restrict training to non-frozen parameters accepted by `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (p, a) in self.params.iter().zip(self.active.iter_mut()) {
            *a = !p.frozen && pred(&p.name);
        }
    }

    /// Copy every tensor from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} != expected {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.tensor.shape(),
                    mine.name,
                    mine.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Per-parameter gradients gathered from one backward pass.
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Sum `other` into `self`, scaled by `k`.
    pub fn accumulate(&mut self, other: ParamGrads, k: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            let Some(g) = theirs else { continue };
            let g = if k == 1.0 { g } else { g.map(|x| x * k) };
            match mine {
                Some(m) => m.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// Forward pass that records no gradient requirements (inference).
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut f = Self::new(store);
        f.grad_enabled = false;
        f
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires = self.grad_enabled && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.tensor(id).clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        let mut g: Gradients = self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| g.take(v)))
            .collect();
        Ok(ParamGrads { grads })
    }
}

impl Deref for Forward<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Forward<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Helper that registers parameters under a dotted prefix.
pub struct Builder<'s, R> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
    prefix: String,
}

impl<'s, R: Rng> Builder<'s, R> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Run `f` with `name` pushed onto the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.path(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, frozen: bool) -> ParamId {
        let path = self.path(name);
        self.store.add(path, tensor, frozen)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, frozen: bool) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t, frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], frozen: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape), frozen)
    }
}

/// `y = x·W + b` with `W: [d_in×d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        frozen: bool,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        b.scope(name, |b| Self {
            w: b.randn("w", &[d_in, d_out], std, frozen),
            b: bias.then(|| b.zeros("b", &[d_out], frozen)),
        })
    }

    /// Linear layer whose weights (and bias) start at zero.
    pub fn zeroed<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        b.scope(name, |b| Self {
            w: b.zeros("w", &[d_in, d_out], false),
            b: bias.then(|| b.zeros("b", &[d_out], false)),
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        let y = f.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.param(b);
                f.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Frozen base projection plus a trainable low-rank update:
/// `y = x·W + (alpha/rank)·(x·Aᵀ)·Bᵀ` with `A: [rank×d_in]`, `B: [d_out×rank]`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    /// `A` starts small-uniform and `B` at zero, so a fresh adapter reproduces
    /// the base projection exactly.
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        assert!(rank >= 1, "lora rank must be at least 1");
        let std = 1.0 / (d_in as f64).sqrt();
        b.scope(name, |b| {
            let base = b.randn("base", &[d_in, d_out], std, true);
            b.scope("lora", |b| {
                let bound = 1.0 / (d_in as f64).sqrt();
                let a = Tensor::uniform(&[rank, d_in], bound, b.rng);
                Self {
                    base,
                    a: b.add("a", a, false),
                    b: b.zeros("b", &[d_out, rank], false),
                    rank,
                    alpha,
                }
            })
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        lora_linear(f, x, self.base, self.a, self.b, self.scaling())
    }
}

/// Functional form of [`LoraLinear::forward`].
pub fn lora_linear(
    f: &mut Forward<'_>,
    x: Var,
    base: ParamId,
    a: ParamId,
    b: ParamId,
    scaling: f64,
) -> Result<Var> {
    let w = f.param(base);
    let y = f.matmul(x, w)?;
    if scaling == 0.0 {
        return Ok(y);
    }
    let (a, b) = (f.param(a), f.param(b));
    let down = f.matmul_nt(x, a)?;
    let up = f.matmul_nt(down, b)?;
    let up = f.scale(up, scaling);
    f.add(y, up)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, frozen: bool) -> Self {
        b.scope(name, |b| Self {
            gamma: b.add("gamma", Tensor::full(&[d], 1.0), frozen),
            beta: b.zeros("beta", &[d], frozen),
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        frozen: bool,
    ) -> Self {
        b.scope(name, |b| Self {
            fc1: Linear::new(b, "fc1", d_in, hidden, true, frozen),
            fc2: Linear::new(b, "fc2", hidden, d_out, true, frozen),
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// `softmax(Q·Kᵀ/√d)·V` for a single head.
pub fn scaled_dot_attention(
    f: &mut Forward<'_>,
    q: Var,
    k: Var,
    v: Var,
    causal: bool,
) -> Result<Var> {
    let (qs, ks, vs) = (f.shape(q).to_vec(), f.shape(k).to_vec(), f.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention q/k", &qs, &ks));
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(Error::shape("attention k/v", &ks, &vs));
    }
    let scores = f.matmul_nt(q, k)?;
    let scores = f.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = if causal {
        f.causal_softmax(scores)?
    } else {
        f.softmax(scores, 1)?
    };
    f.matmul(weights, v)
}

/// Attention split over `heads` equal column groups, heads concatenated back.
pub fn multi_head_attention(
    f: &mut Forward<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    if heads == 1 {
        return scaled_dot_attention(f, q, k, v, causal);
    }
    let d = f.value(q).cols();
    let dv = f.value(v).cols();
    if d % heads != 0 || dv % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {d}/{dv} not divisible by {heads} heads"
        )));
    }
    let (hd, hv) = (d / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = f.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = f.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = f.slice_cols(v, h * hv, (h + 1) * hv)?;
        outs.push(scaled_dot_attention(f, qh, kh, vh, causal)?);
    }
    f.concat_cols(&outs)
}

/// Central-difference gradient of `f` at `p`: `(f(p+h) − f(p−h)) / 2h` per element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Max elementwise deviation between two gradients, relative to the larger
/// of their max magnitudes (floored at `1e-12` so all-zero pairs compare as 0).
pub fn grad_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn finite_diff_examples() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &p, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| 3.5, &p, 1e-5);
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store);
        let q = f.constant(Tensor::from_rows(&[&[1.0, -4.0], &[9.0, 0.3], &[0.0, 0.0]]));
        let k = f.constant(Tensor::from_rows(&[&[0.2, 0.7]]));
        let v = f.constant(Tensor::from_rows(&[&[5.0, -1.0, 2.0]]));
        let out = scaled_dot_attention(&mut f, q, k, v, false).unwrap();
        for r in 0..3 {
            assert_eq!(f.value(out).row(r), &[5.0, -1.0, 2.0]);
        }
    }

    #[test]
    fn attention_zero_values_give_zero() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store);
        let q = f.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let k = f.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = f.constant(Tensor::zeros(&[2, 3]));
        let out = scaled_dot_attention(&mut f, q, k, v, false).unwrap();
        assert_eq!(f.value(out).data(), &[0.0; 3]);
    }

    #[test]
    fn attention_two_keys_matches_formula() {
        // q·k1 = 1, q·k2 = 3, scaled by 1/√2
        let store = ParamStore::new();
        let mut f = Forward::new(&store);
        let q = f.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let k = f.constant(Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 2.0]]));
        let v = f.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let out = scaled_dot_attention(&mut f, q, k, v, false).unwrap();
        let s = 2f64.sqrt();
        let (e1, e2) = ((1.0 / s).exp(), (3.0 / s).exp());
        let expect = [e1 / (e1 + e2), e2 / (e1 + e2)];
        for (a, b) in f.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store);
        let q = f.constant(Tensor::zeros(&[2, 3]));
        let k = f.constant(Tensor::zeros(&[2, 4]));
        let v = f.constant(Tensor::zeros(&[2, 4]));
        assert!(scaled_dot_attention(&mut f, q, k, v, false).is_err());
        let k = f.constant(Tensor::zeros(&[2, 3]));
        let v = f.constant(Tensor::zeros(&[3, 4]));
        assert!(scaled_dot_attention(&mut f, q, k, v, false).is_err());
    }

    fn lora_setup(rank: usize, alpha: f64) -> (ParamStore, LoraLinear) {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = {
            let mut b = Builder::new(&mut store, &mut r);
            LoraLinear::new(&mut b, "proj", 5, 3, rank, alpha)
        };
        (store, layer)
    }

    fn base_only(store: &ParamStore, layer: &LoraLinear, x: &Tensor) -> Tensor {
        crate::tensor::matmul(x, store.tensor(layer.base)).unwrap()
    }

    #[test]
    fn lora_zero_b_equals_base() {
        let (store, layer) = lora_setup(2, 4.0);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng());
        let mut f = Forward::new(&store);
        let xv = f.constant(x.clone());
        let y = layer.forward(&mut f, xv).unwrap();
        let base = base_only(&store, &layer, &x);
        for (a, b) in f.value(y).data().iter().zip(base.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lora_alpha_zero_equals_base() {
        let (mut store, layer) = lora_setup(2, 0.0);
        *store.tensor_mut(layer.b) = Tensor::randn(&[3, 2], 1.0, &mut rng());
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng());
        let mut f = Forward::new(&store);
        let xv = f.constant(x.clone());
        let y = layer.forward(&mut f, xv).unwrap();
        assert_eq!(f.value(y), &base_only(&store, &layer, &x));
    }

    #[test]
    fn lora_rank_one_matches_dense_update() {
        let (mut store, layer) = lora_setup(1, 3.0);
        *store.tensor_mut(layer.b) = Tensor::randn(&[3, 1], 1.0, &mut rng());
        let x = Tensor::randn(&[4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(99));
        // dense oracle: W' = W + s·(B·A)ᵀ, built elementwise
        let (w, a, b) = (
            store.tensor(layer.base),
            store.tensor(layer.a),
            store.tensor(layer.b),
        );
        let s = layer.scaling();
        let mut dense = w.clone();
        for i in 0..5 {
            for o in 0..3 {
                dense.data_mut()[i * 3 + o] += s * b.at(o, 0) * a.at(0, i);
            }
        }
        let mut expect = vec![0.0; 12];
        for r in 0..4 {
            for o in 0..3 {
                expect[r * 3 + o] = (0..5).map(|i| x.at(r, i) * dense.at(i, o)).sum();
            }
        }
        let mut f = Forward::new(&store);
        let xv = f.constant(x);
        let y = layer.forward(&mut f, xv).unwrap();
        for (p, q) in f.value(y).data().iter().zip(&expect) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_base_never_gets_gradient() {
        let (store, layer) = lora_setup(2, 2.0);
        let mut f = Forward::new(&store);
        let x = f.constant(Tensor::randn(&[2, 5], 1.0, &mut rng()));
        let y = layer.forward(&mut f, x).unwrap();
        let s = f.sum(y);
        let g = f.backward(s).unwrap();
        assert!(g.get(layer.base).is_none());
        assert!(g.get(layer.b).is_some());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a.b", Tensor::zeros(&[1]), false);
        store.add("a.b", Tensor::zeros(&[1]), false);
    }
}
