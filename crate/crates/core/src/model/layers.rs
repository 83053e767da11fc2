use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Normalization behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-forward state shared by every layer.
pub struct Ctx<'a> {
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    /// Bind parameters as gradient-tracked leaves.
    pub trainable: bool,
}

impl Ctx<'_> {
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        if self.trainable {
            tape.param(self.store, id)
        } else {
            tape.frozen_param(self.store, id)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        bias: bool,
    ) -> Self {
        let (kh, kw) = kernel;
        let weight = store.add_kaiming(format!("{name}.weight"), &[cout, cin, kh, kw], cin * kh * kw, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Stride-1 convolution that preserves spatial size.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        bias: bool,
    ) -> Self {
        let padding = ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2);
        Self::new(store, rng, name, cin, cout, kernel, 1, padding, bias)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let w = ctx.bind(tape, self.weight);
        let b = self.bias.map(|b| ctx.bind(tape, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    mean_key: String,
    var_key: String,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        store.set_buffer(mean_key.clone(), Tensor::zeros(&[channels]));
        store.set_buffer(var_key.clone(), Tensor::full(&[channels], 1.0));
        Self {
            gamma,
            beta,
            mean_key,
            var_key,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let g = ctx.bind(tape, self.gamma);
        let b = ctx.bind(tape, self.beta);
        match ctx.mode {
            Mode::Eval => {
                let mean = ctx.store.buffer(&self.mean_key).expect("running mean").clone();
                let var = ctx.store.buffer(&self.var_key).expect("running var").clone();
                let (y, _) = tape.batch_norm(x, g, b, Some((mean.data(), var.data())), Self::EPS)?;
                Ok(y)
            }
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, g, b, None, Self::EPS)?;
                let stats = stats.expect("training statistics");
                let m = Self::MOMENTUM;
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                let rm = ctx.store.buffer_mut(&self.mean_key).expect("running mean");
                for (r, s) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * s;
                }
                let rv = ctx.store.buffer_mut(&self.var_key).expect("running var");
                for (r, s) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * s * unbias;
                }
                Ok(y)
            }
        }
    }
}
