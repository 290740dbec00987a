//! Parameter storage, forward-pass context and the small layer vocabulary
//! shared by every branch of the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// the weights but never receive gradients.
    pub trainable: bool,
}

/// Flat, ordered store of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: layer construction is deterministic, so a
    /// clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    /// Returns the number of tensors copied; shapes must agree.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, String> {
        let mut copied = 0;
        for e in &mut self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            let Some(src) = other.find(&e.name) else {
                return Err(format!("source is missing parameter {}", e.name));
            };
            let src = other.get(src);
            if src.shape() != e.value.shape() {
                return Err(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                ));
            }
            e.value = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * self.std;
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Silu,
}

/// Running-statistic update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// One forward evaluation: a tape, the parameters it reads, and the
/// stochastic state (dropout) of this pass.
pub struct Forward<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    /// Inference pass: evaluation mode and no gradient bookkeeping.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut f = Self::new(params, Mode::Eval, 0);
        f.track_grads = false;
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let v = self.tape.leaf(e.value.clone(), e.trainable && self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    /// The tape variable of a parameter if this pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 - rate;
        let mask = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_const(x, Matrix::from_vec(r, c, mask))
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter this pass touched.
    pub fn gradients(&self, loss: Var) -> ParamGrads {
        let mut g = self.tape.backward(loss);
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| g.take(v)))
            .collect();
        ParamGrads { grads }
    }
}

/// Gradients indexed by [`ParamId`]; `None` for untouched or frozen tensors.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }
}

/// Dense layer `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(in_dim, out_dim), true);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), true);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let y = f.tape.matmul(x, w);
        f.tape.add_row(y, b)
    }
}

/// Stack of dense layers with an activation after every layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    /// When false the last layer is left linear.
    pub activate_last: bool,
}

impl Mlp {
    /// `widths` lists the output width of each layer.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        activation: Activation,
        activate_last: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, init, &format!("{name}.{i}"), d, w));
            d = w;
        }
        Self {
            layers,
            activation,
            activate_last,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn forward(&self, f: &mut Forward, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(f, x);
            if i + 1 < n || self.activate_last {
                x = activate(f, x, self.activation);
            }
        }
        x
    }
}

pub fn activate(f: &mut Forward, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => f.tape.gelu(x),
        Activation::Silu => f.tape.silu(x),
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0), true),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim), true),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch normalisation over rows, with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    /// Normalise with the current batch's statistics in evaluation mode
    /// too, leaving the running buffers untouched.
    pub batch_stats_at_eval: bool,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0), true),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim), true),
            running_mean: store.add(format!("{name}.running_mean"), Matrix::zeros(1, dim), false),
            running_var: store.add(format!("{name}.running_var"), Matrix::filled(1, dim, 1.0), false),
            momentum: 0.1,
            batch_stats_at_eval: false,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        match f.mode() {
            Mode::Train => {
                let (y, mean, var) = f.tape.batch_norm_train(x, g, b, Self::EPS);
                f.record_bn(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                    momentum: self.momentum,
                });
                y
            }
            Mode::Eval if self.batch_stats_at_eval => f.tape.batch_norm_train(x, g, b, Self::EPS).0,
            Mode::Eval => {
                let params = f.params();
                let mean = params.get(self.running_mean).data().to_vec();
                let var = params.get(self.running_var).data().to_vec();
                f.tape.batch_norm_eval(x, g, b, &mean, &var, Self::EPS)
            }
        }
    }
}

/// Applies recorded running-statistic updates in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
            let m = store.get_mut(id);
            for (r, b) in m.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate of one tensor; zero freezes it.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        if self.lr_scale.len() <= id.0 {
            self.lr_scale.resize(id.0 + 1, 1.0);
        }
        self.lr_scale[id.0] = scale;
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let lr = self.lr * self.lr_scale.get(id.0).copied().unwrap_or(1.0);
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            let (r, c) = p.shape();
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(r, c));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(r, c));
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut init = Init::new(3, 0.02);
        let m = init.trunc_normal(50, 40);
        assert!(m.data().iter().all(|v| v.abs() <= 0.04));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, Mode::Eval, 1);
        let x = f.tape.constant(Matrix::filled(3, 3, 2.0));
        assert_eq!(f.dropout(x, 0.3), x);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]), true);
        let mut f = Forward::new(&store, Mode::Train, 0);
        let w = f.param(id);
        let sq = f.tape.mul(w, w);
        let loss = f.tape.sum(sq);
        let g = f.gradients(loss);
        let mut adam = Adam::new(0.1, None);
        adam.update(&mut store, &g);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn lr_scale_shrinks_or_freezes_one_tensor() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::scalar(1.0), true);
        let b = store.add("b", Matrix::scalar(1.0), true);
        let c = store.add("c", Matrix::scalar(1.0), true);
        let mut f = Forward::new(&store, Mode::Train, 0);
        let (va, vb, vc) = (f.param(a), f.param(b), f.param(c));
        let s = f.tape.add(va, vb);
        let s = f.tape.add(s, vc);
        let g = f.gradients(s);
        let mut adam = Adam::new(0.1, None);
        adam.set_lr_scale(b, 0.5);
        adam.set_lr_scale(c, 0.0);
        adam.update(&mut store, &g);
        assert!((store.get(a).item() - 0.9).abs() < 1e-6);
        assert!((store.get(b).item() - 0.95).abs() < 1e-6);
        assert_eq!(store.get(c).item(), 1.0);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut f = Forward::new(&store, Mode::Train, 0);
        let x = f.tape.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]));
        bn.forward(&mut f, x);
        let ups = f.take_bn_updates();
        apply_bn_updates(&mut store, &ups);
        assert_eq!(store.get(bn.running_mean).data(), &[0.2, 0.4]);
        let v = store.get(bn.running_var).data();
        assert!((v[0] - (0.9 + 0.1)).abs() < 1e-12);
        assert!((v[1] - (0.9 + 0.4)).abs() < 1e-12);
    }
}
