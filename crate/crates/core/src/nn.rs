//! Parameterized layers and the residual down/up blocks used by both
//! encoders and decoders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, Var};
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is persisted but not optimized (batch-norm running stats).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub grad: Option<Tensor>,
}

/// Flat, ordered collection of every parameter and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrite parameter values from another store with an identical
    /// layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(TensorError::Invalid(format!(
                    "parameter layout mismatch at {}",
                    dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Batch-norm behaviour and whether running statistics are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A graph together with the leaves bound to model parameters.
pub struct Session {
    pub graph: Graph,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl Session {
    /// Parameters are bound as gradient-tracked leaves.
    pub fn new(graph: Graph) -> Session {
        Session {
            graph,
            bound: Vec::new(),
            track_params: true,
        }
    }

    /// Parameters are bound as constants; for inference.
    pub fn inference(graph: Graph) -> Session {
        Session {
            graph,
            bound: Vec::new(),
            track_params: false,
        }
    }

    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = store.get(id);
        let trainable = self.track_params && p.kind == ParamKind::Trainable;
        let v = self.graph.leaf(p.value.clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Copy leaf gradients into the store. Trainable parameters that did not
    /// take part in the graph receive zeros.
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for i in 0..store.len() {
            let id = ParamId(i);
            let p = store.get(id);
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let grad = self
                .bound
                .get(i)
                .copied()
                .flatten()
                .and_then(|v| self.graph.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            store.get_mut(id).grad = Some(grad);
        }
    }
}

/// Fan-in scaled uniform initialization, `U(-b, b)` with `b = sqrt(1/fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    math::sqrt(1.0 / fan_in as f64)
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    // Stored state is kept at f32 precision so checkpoints are lossless.
    Tensor::from_fn(shape, |_| math::to_f32_precision(dist.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Conv2dLayer {
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let w = uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros([out_channels]),
            ParamKind::Trainable,
        );
        Conv2dLayer {
            weight,
            bias,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &mut Session, store: &ParamStore, x: Var) -> Result<Var> {
        let w = s.bind(store, self.weight);
        let b = s.bind(store, self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full([channels], 1.0),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros([channels]),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros([channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full([channels], 1.0),
                ParamKind::Buffer,
            ),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages only.
    pub fn forward(&self, s: &mut Session, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = s.bind(store, self.gamma);
        let beta = s.bind(store, self.beta);
        match mode {
            Mode::Eval => {
                let rm = store.value(self.running_mean).data();
                let rv = store.value(self.running_var).data();
                let (y, _, _) = s.graph.batch_norm(x, gamma, beta, Some((rm, rv)), self.eps)?;
                Ok(y)
            }
            Mode::Train => {
                let (y, mean, var) = s.graph.batch_norm(x, gamma, beta, None, self.eps)?;
                let shape = s.graph.shape(x);
                let count = shape[0] * shape[2] * shape[3];
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                let m = self.momentum;
                for (r, b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = math::to_f32_precision((1.0 - m) * *r + m * b);
                }
                for (r, b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = math::to_f32_precision((1.0 - m) * *r + m * b * unbias);
                }
                Ok(y)
            }
        }
    }
}

/// Two 3x3 conv/BN/LeakyReLU stages followed by 2x2 average pooling, plus a
/// pooled 1x1-conv skip path.
#[derive(Debug, Clone)]
pub struct ResidualDownBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2d,
    pub skip: Conv2dLayer,
    pub slope: f64,
}

impl ResidualDownBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        ResidualDownBlock {
            conv1: Conv2dLayer::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv2dLayer::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out),
            skip: Conv2dLayer::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng),
            slope,
        }
    }

    pub fn forward(&self, s: &mut Session, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(s, store, x)?;
        let h = self.bn1.forward(s, store, h, mode)?;
        let h = s.graph.leaky_relu(h, self.slope)?;
        let h = self.conv2.forward(s, store, h)?;
        let h = self.bn2.forward(s, store, h, mode)?;
        let h = s.graph.leaky_relu(h, self.slope)?;
        let main = s.graph.avg_pool2(h)?;
        let skip = self.skip.forward(s, store, x)?;
        let skip = s.graph.avg_pool2(skip)?;
        s.graph.add(main, skip)
    }
}

/// Nearest-neighbour 2x upsampling followed by two 3x3 conv/BN/LeakyReLU
/// stages, plus an upsampled 1x1-conv skip path.
#[derive(Debug, Clone)]
pub struct ResidualUpBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2d,
    pub skip: Conv2dLayer,
    pub slope: f64,
}

impl ResidualUpBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        ResidualUpBlock {
            conv1: Conv2dLayer::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv2dLayer::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out),
            skip: Conv2dLayer::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng),
            slope,
        }
    }

    pub fn forward(&self, s: &mut Session, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let up = s.graph.upsample2(x)?;
        let h = self.conv1.forward(s, store, up)?;
        let h = self.bn1.forward(s, store, h, mode)?;
        let h = s.graph.leaky_relu(h, self.slope)?;
        let h = self.conv2.forward(s, store, h)?;
        let h = self.bn2.forward(s, store, h, mode)?;
        let main = s.graph.leaky_relu(h, self.slope)?;
        let skip = self.skip.forward(s, store, up)?;
        s.graph.add(main, skip)
    }
}

/// Zero every parameter whose name starts with `prefix`.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    for p in store.iter_mut() {
        if p.name.starts_with(prefix) && p.kind == ParamKind::Trainable {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Shape-only helper for tests and parameter counting.
pub fn conv_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn init_is_deterministic_and_bn_starts_at_identity() {
        let build = || {
            let mut s = ParamStore::new();
            ResidualDownBlock::new(&mut s, "b", 3, 8, 0.2, &mut rng());
            s
        };
        let (a, b) = (build(), build());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let g = a.find("b.bn1.gamma").unwrap();
        assert!(a.value(g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_init_moments() {
        // std of U(-b, b) is b / sqrt(3)
        let mut store = ParamStore::new();
        let conv = Conv2dLayer::new(&mut store, "c", 100, 100, 1, 1, 0, &mut rng());
        let w = store.value(conv.weight).data();
        assert_eq!(w.len(), 10_000);
        let b = fan_in_bound(100);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let want = b / math::sqrt(3.0);
        assert!((math::sqrt(var) - want).abs() / want < 0.05);
        assert!(w.iter().all(|x| x.abs() <= b));
    }

    fn run_down(store: &mut ParamStore, block: &ResidualDownBlock, x: Tensor, mode: Mode) -> Tensor {
        let mut s = Session::new(Graph::new());
        let xv = s.graph.constant(x);
        let y = block.forward(&mut s, store, xv, mode).unwrap();
        s.graph.value(y).clone()
    }

    #[test]
    fn down_block_halves_spatial_extent() {
        let mut store = ParamStore::new();
        let block = ResidualDownBlock::new(&mut store, "d", 3, 64, 0.2, &mut rng());
        let x = Tensor::from_fn([1, 3, 64, 64], |i| (i % 7) as f64 / 7.0);
        let y = run_down(&mut store, &block, x, Mode::Eval);
        assert_eq!(y.shape(), &[1, 64, 32, 32]);
    }

    #[test]
    fn up_block_doubles_spatial_extent_and_chains_to_64() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let first = ResidualUpBlock::new(&mut store, "u0", 128, 512, 0.2, &mut r);
        let mut s = Session::new(Graph::new());
        let x = s.graph.constant(Tensor::full([1, 128, 1, 1], 0.3));
        let y = first.forward(&mut s, &mut store, x, Mode::Eval).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 512, 2, 2]);

        let widths = [8, 8, 8, 8, 8, 8];
        let mut store = ParamStore::new();
        let mut c_in = 4;
        let blocks: Vec<_> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResidualUpBlock::new(&mut store, &format!("u{i}"), c_in, w, 0.2, &mut r);
                c_in = w;
                b
            })
            .collect();
        let mut s = Session::new(Graph::new());
        let mut h = s.graph.constant(Tensor::full([1, 4, 1, 1], 0.5));
        for b in &blocks {
            h = b.forward(&mut s, &mut store, h, Mode::Eval).unwrap();
        }
        assert_eq!(s.graph.shape(h), &[1, 8, 64, 64]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let down = ResidualDownBlock::new(&mut store, "d", 2, 4, 0.2, &mut rng());
        let up = ResidualUpBlock::new(&mut store, "u", 4, 2, 0.2, &mut rng());
        zero_params(&mut store, "d.conv");
        zero_params(&mut store, "d.skip");
        zero_params(&mut store, "u.conv");
        zero_params(&mut store, "u.skip");
        let x = Tensor::from_fn([2, 2, 4, 4], |i| i as f64 * 0.1 - 1.0);
        let y = run_down(&mut store, &down, x, Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut s = Session::new(Graph::new());
        let x = s.graph.constant(Tensor::from_fn([2, 4, 2, 2], |i| i as f64));
        let y = up.forward(&mut s, &mut store, x, Mode::Train).unwrap();
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_main_path_reduces_to_skip() {
        let mut store = ParamStore::new();
        let down = ResidualDownBlock::new(&mut store, "d", 3, 5, 0.2, &mut rng());
        zero_params(&mut store, "d.conv");
        // With zero main-path weights and zero beta, BN of a zero map is zero.
        let x = Tensor::from_fn([2, 3, 4, 4], |i| math::sin(i as f64));
        let y = run_down(&mut store, &down, x.clone(), Mode::Train);

        let mut s = Session::new(Graph::new());
        let xv = s.graph.constant(x);
        let skip = down.skip.forward(&mut s, &store, xv).unwrap();
        let pooled = s.graph.avg_pool2(skip).unwrap();
        assert_eq!(&y, s.graph.value(pooled));
    }

    #[test]
    fn batch_norm_train_mode_standardizes() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let mut s = Session::new(Graph::new());
        let x = s
            .graph
            .constant(Tensor::from_fn([4, 3, 5, 5], |i| math::sin(i as f64 * 0.7) * 3.0 + 2.0));
        let y = bn.forward(&mut s, &mut store, x, Mode::Train).unwrap();
        let y = s.graph.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.sample(n)[c * 25..(c + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            // eps = 1e-5 shrinks the variance slightly below 1
            assert!((v - 1.0).abs() < 1e-5 * 2.0);
        }
        let rm = store.value(bn.running_mean).data();
        assert!(rm.iter().all(|v| v.abs() > 0.0));
    }

    #[test]
    fn batch_norm_eval_mode_is_deterministic() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        store.value_mut(bn.running_mean).data_mut().copy_from_slice(&[0.5, -1.0]);
        store.value_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 0.25]);
        let x = Tensor::from_fn([1, 2, 2, 2], |i| i as f64);
        let run = |store: &mut ParamStore| {
            let mut s = Session::new(Graph::new());
            let xv = s.graph.constant(x.clone());
            let y = bn.forward(&mut s, store, xv, Mode::Eval).unwrap();
            s.graph.value(y).clone()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
        let expect = (0.0 - 0.5) / math::sqrt(4.0 + 1e-5);
        assert!((a.data()[0] - expect).abs() < 1e-12);
    }
}
