//! Parameter storage and the layers both networks are built from.

use ndarray::{Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named tensors of one network, in construction order. Non-trainable
/// entries hold batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn set_value(&mut self, i: usize, v: Tensor) {
        assert_eq!(v.shape(), self.values[i].shape(), "{}: shape change", self.names[i]);
        self.values[i] = v;
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.trainable[i]).collect()
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.trainable_indices()
            .iter()
            .map(|&i| self.values[i].len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), &t)| (n.as_str(), v, t))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Train mode uses batch statistics and dropout; eval mode uses running
/// statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass of one network over a graph.
pub struct Forward<'g> {
    pub graph: &'g Graph,
    vars: Vec<Var<'g>>,
    trainable: Vec<usize>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(usize, Tensor)>,
}

impl<'g> Forward<'g> {
    /// Places every tensor of `params` on `graph` as a leaf. `seed` drives dropout.
    pub fn new(graph: &'g Graph, params: &ParamSet, mode: Mode, seed: u64) -> Self {
        let vars = params.values.iter().map(|v| graph.leaf(v.clone())).collect();
        Self {
            graph,
            vars,
            trainable: params.trainable_indices(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, i: usize) -> Var<'g> {
        self.vars[i]
    }

    /// Trainable parameters as `(index, var)` pairs, for [`Graph::grad`].
    pub fn trainable_vars(&self) -> Vec<(usize, Var<'g>)> {
        self.trainable.iter().map(|&i| (i, self.vars[i])).collect()
    }

    /// Running-statistic updates recorded by train-mode batch norms.
    pub fn take_buffer_updates(&mut self) -> Vec<(usize, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn dropout(&mut self, x: Var<'g>, p: f64) -> Var<'g> {
        if self.mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let rng = &mut self.rng;
        let mask = Tensor::from_shape_fn(x.value().raw_dim(), |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        x.mask_mul(mask)
    }

    /// Latest value of a buffer, counting updates from earlier calls in
    /// this pass.
    fn pending(&self, i: usize) -> std::sync::Arc<Tensor> {
        self.buffer_updates
            .iter()
            .rev()
            .find(|(j, _)| *j == i)
            .map(|(_, t)| std::sync::Arc::new(t.clone()))
            .unwrap_or_else(|| self.vars[i].value())
    }

    fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.leaf(t)
    }
}

/// Applies buffer updates collected from a forward pass.
pub fn apply_buffer_updates(params: &mut ParamSet, updates: Vec<(usize, Tensor)>) {
    for (i, v) in updates {
        params.set_value(i, v);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// 1-D convolution with same padding.
#[derive(Debug, Clone)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * k) as f64;
        let w = ps.push(
            format!("{name}.weight"),
            uniform(rng, &[cout, cin, k], (6.0 / fan_in).sqrt()),
            true,
        );
        let b = bias.then(|| {
            ps.push(
                format!("{name}.bias"),
                uniform(rng, &[cout], 1.0 / fan_in.sqrt()),
                true,
            )
        });
        Self { w, b }
    }

    pub fn forward<'g>(&self, f: &mut Forward<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.conv1d(f.var(self.w));
        match self.b {
            None => y,
            Some(b) => {
                let shape = y.shape();
                let bias = f.var(b).reshape(&[1, shape[1], 1]).broadcast_to(&shape);
                y + bias
            }
        }
    }
}

/// Batch normalization over batch and time, per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.push(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c])), true),
            beta: ps.push(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c])), true),
            running_mean: ps.push(
                format!("{name}.running_mean"),
                Tensor::zeros(IxDyn(&[c])),
                false,
            ),
            running_var: ps.push(format!("{name}.running_var"), Tensor::ones(IxDyn(&[c])), false),
        }
    }

    pub fn forward<'g>(&self, f: &mut Forward<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let (n, c, l) = (shape[0], shape[1], shape[2]);
        let per_channel = [1, c, 1];
        let bcast = |v: Var<'g>| v.broadcast_to(&shape);
        let gamma = bcast(f.var(self.gamma).reshape(&per_channel));
        let beta = bcast(f.var(self.beta).reshape(&per_channel));
        let xhat = match f.mode {
            Mode::Train => {
                let count = (n * l) as f64;
                let mean = x.sum_to(&per_channel).scale(1.0 / count);
                let xc = x - bcast(mean);
                let var = xc.square().sum_to(&per_channel).scale(1.0 / count);
                let inv_std = bcast(var.add_scalar(BN_EPS).sqrt());
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let rm = f.pending(self.running_mean);
                let rv = f.pending(self.running_var);
                let bm = mean.value().to_shape(IxDyn(&[c])).unwrap().to_owned();
                let bv = var.value().to_shape(IxDyn(&[c])).unwrap().to_owned();
                f.buffer_updates.push((
                    self.running_mean,
                    &*rm * (1.0 - BN_MOMENTUM) + &bm * BN_MOMENTUM,
                ));
                f.buffer_updates.push((
                    self.running_var,
                    &*rv * (1.0 - BN_MOMENTUM) + &bv * (BN_MOMENTUM * unbiased),
                ));
                xc.div(inv_std)
            }
            Mode::Eval => {
                let rm = f.var(self.running_mean).value();
                let rv = f.var(self.running_var).value();
                let mean = rm.to_shape(IxDyn(&per_channel)).unwrap().to_owned();
                let inv = rv
                    .mapv(|v| 1.0 / (v + BN_EPS).sqrt())
                    .to_shape(IxDyn(&per_channel))
                    .unwrap()
                    .to_owned();
                let mean = f.constant(mean);
                let inv = f.constant(inv);
                (x - bcast(mean)) * bcast(inv)
            }
        };
        xhat * gamma + beta
    }
}

/// `(conv → batch norm → ReLU → dropout) × 2`.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    dropout: f64,
}

impl DoubleConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dropout: f64,
    ) -> Self {
        Self {
            conv1: Conv::new(ps, rng, &format!("{name}.conv1"), cin, cout, k, false),
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), cout),
            conv2: Conv::new(ps, rng, &format!("{name}.conv2"), cout, cout, k, false),
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), cout),
            dropout,
        }
    }

    pub fn forward<'g>(&self, f: &mut Forward<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv1.forward(f, x);
        let h = self.bn1.forward(f, h).relu();
        let h = f.dropout(h, self.dropout);
        let h = self.conv2.forward(f, h);
        let h = self.bn2.forward(f, h).relu();
        f.dropout(h, self.dropout)
    }
}

/// Fully connected layer on `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            w: ps.push(format!("{name}.weight"), uniform(rng, &[din, dout], bound), true),
            b: ps.push(format!("{name}.bias"), uniform(rng, &[1, dout], bound), true),
        }
    }

    pub fn forward<'g>(&self, f: &mut Forward<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(f.var(self.w));
        let shape = y.shape();
        y + f.var(self.b).broadcast_to(&shape)
    }
}

/// Stacks time-major `[L, C]` matrices into a channels-first `[N, C, L]` tensor.
pub fn to_channels_first(batch: &[ndarray::ArrayView2<'_, f64>]) -> Tensor {
    let n = batch.len();
    let (l, c) = batch.first().map_or((0, 0), |m| m.dim());
    Array3::from_shape_fn((n, c, l), |(i, ch, t)| batch[i][[t, ch]]).into_dyn()
}

/// Inverse of [`to_channels_first`].
pub fn to_time_major(t: &Tensor) -> Vec<Array2<f64>> {
    let (n, c, l) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..n)
        .map(|i| Array2::from_shape_fn((l, c), |(s, ch)| t[[i, ch, s]]))
        .collect()
}
