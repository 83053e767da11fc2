use super::conv::{self, ConvGeom};
use super::{shape_err, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat(Vec<Var>),
    ChannelScale(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SelectRows(Var, Vec<usize>),
    DiffH(Var),
    DiffW(Var),
    ReflectPad {
        input: Var,
        pad_h: usize,
        pad_w: usize,
    },
    Crop(Var),
    SpectralNorm {
        weight: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward pass. Nodes are appended in creation order, which is
/// a topological order; `backward` visits them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, u64, ParamId)>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Its gradient flows back into the
    /// store through [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.leaf(p.value.clone(), p.requires_grad);
        if p.requires_grad {
            self.bindings.push((var, store.uid(), id));
        }
        var
    }

    /// Binds a stored parameter without gradient tracking.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.get(id).value.clone(), false)
    }

    /// A gradient-free copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Cross-correlation of `(N,C,H,W)` input with `(O,C,kh,kw)` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.o),
                ));
            }
        }
        let out = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.nodes[b.0].value.data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Nearest-neighbour x2 upsampling of the two spatial axes.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("upsample_nearest2x")?;
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c, h2, w2], out)?, rg, Op::Upsample2x(a)))
    }

    /// `(N,C,H,W) -> (N,C)` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("global_avg_pool")?;
        let hw = (h * w) as f64;
        let out = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::GlobalAvgPool(a)))
    }

    /// `(N,Cin) x (Cout,Cin)^T + bias`.
    pub fn dense(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let (&[n, cin], &[cout, wcin]) = (self.shape(input), self.shape(weight)) else {
            return Err(shape_err(
                "dense",
                format!("input {:?}, weight {:?}", self.shape(input), self.shape(weight)),
            ));
        };
        if cin != wcin {
            return Err(shape_err("dense", format!("input has {cin} features, weight {wcin}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("dense", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let (x, wt) = (self.value(input).data(), self.value(weight).data());
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            for o in 0..cout {
                let mut acc = bv.map_or(0.0, |b| b[o]);
                for k in 0..cin {
                    acc += x[i * cin + k] * wt[o * cin + k];
                }
                out[i * cout + o] = acc;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, cout], out)?,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(first)),
                ));
            }
            channels += pc;
        }
        let mut out = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * h * w;
                out.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, channels, h, w], out)?,
            rg,
            Op::Concat(parts.to_vec()),
        ))
    }

    /// `f (N,C,H,W)` scaled per sample and channel by `a (N,C)`.
    pub fn channel_scale(&mut self, f: Var, a: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(f).dims4("channel_scale")?;
        if self.shape(a) != [n, c] {
            return Err(shape_err(
                "channel_scale",
                format!("scale {:?} for features {:?}", self.shape(a), self.shape(f)),
            ));
        }
        let scale = self.value(a).data();
        let out = self
            .value(f)
            .data()
            .chunks(h * w)
            .zip(scale)
            .flat_map(|(p, &s)| p.iter().map(move |&x| x * s))
            .collect();
        let rg = self.rg(f) || self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, rg, Op::ChannelScale(f, a)))
    }

    /// Per-channel normalization over `(N,H,W)` followed by `gamma * x + beta`.
    ///
    /// With `running = None` the batch statistics are used and returned; with
    /// `running = Some((mean, var))` the map is a fixed affine transform.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>), TensorError> {
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", "gamma/beta must have one entry per channel"));
        }
        let hw = h * w;
        let count = n * hw;
        let x = self.value(input).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", "running stats length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        );
        Ok((var_out, stats))
    }

    /// Gathers the listed rows (axis 2) of a 4-d tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("select_rows")?;
        if let Some(&r) = rows.iter().find(|&&r| r >= h) {
            return Err(shape_err("select_rows", format!("row {r} out of {h}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * rows.len() * w);
        for p in 0..n * c {
            for &r in rows {
                let start = (p * h + r) * w;
                out.extend_from_slice(&src[start..start + w]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n, c, rows.len(), w], out)?,
            rg,
            Op::SelectRows(a, rows.to_vec()),
        ))
    }

    /// Forward difference along the row axis: `x[i+1] - x[i]`, shape `(N,C,H-1,W)`.
    pub fn diff_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("diff_rows")?;
        if h < 2 {
            return Err(shape_err("diff_rows", "needs at least two rows"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * (h - 1) * w);
        for p in 0..n * c {
            for y in 0..h - 1 {
                for x in 0..w {
                    out.push(src[(p * h + y + 1) * w + x] - src[(p * h + y) * w + x]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c, h - 1, w], out)?, rg, Op::DiffH(a)))
    }

    /// Forward difference along the column axis, shape `(N,C,H,W-1)`.
    pub fn diff_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("diff_cols")?;
        if w < 2 {
            return Err(shape_err("diff_cols", "needs at least two columns"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * h * (w - 1));
        for r in 0..n * c * h {
            for x in 0..w - 1 {
                out.push(src[r * w + x + 1] - src[r * w + x]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c, h, w - 1], out)?, rg, Op::DiffW(a)))
    }

    /// Reflect-pads the bottom and right edges (`x[H+k] = x[H-2-k]`).
    pub fn reflect_pad(&mut self, a: Var, pad_h: usize, pad_w: usize) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(a).dims4("reflect_pad")?;
        if pad_h >= h || pad_w >= w {
            return Err(shape_err(
                "reflect_pad",
                format!("padding ({pad_h},{pad_w}) must be smaller than ({h},{w})"),
            ));
        }
        let (h2, w2) = (h + pad_h, w + pad_w);
        let src = self.value(a).data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let sy = reflect_index(y, h);
                for x in 0..w2 {
                    out[(p * h2 + y) * w2 + x] = src[(p * h + sy) * w + reflect_index(x, w)];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![n, c, h2, w2], out)?,
            rg,
            Op::ReflectPad {
                input: a,
                pad_h,
                pad_w,
            },
        ))
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, a: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let (n, c, sh, sw) = self.value(a).dims4("crop")?;
        if h > sh || w > sw {
            return Err(shape_err("crop", format!("{h}x{w} from {sh}x{sw}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let start = (p * sh + y) * sw;
                out.extend_from_slice(&src[start..start + w]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, rg, Op::Crop(a)))
    }

    /// `weight / sigma` with `sigma = u^T W v`, `W` the `(O, rest)` reshape of
    /// the weight. `u` and `v` are treated as constants.
    pub fn spectral_normalize(
        &mut self,
        weight: Var,
        u: &[f64],
        v: &[f64],
    ) -> Result<(Var, f64), TensorError> {
        let shape = self.shape(weight).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| shape_err("spectral_normalize", "scalar weight"))?;
        let cols = self.value(weight).numel() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(shape_err(
                "spectral_normalize",
                format!("u/v lengths {}/{} for {rows}x{cols}", u.len(), v.len()),
            ));
        }
        let wd = self.value(weight).data();
        let mut sigma = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            let row = &wd[i * cols..(i + 1) * cols];
            sigma += ui * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        let sigma = sigma.max(1e-12);
        let out = wd.iter().map(|x| x / sigma).collect();
        let rg = self.rg(weight);
        let var = self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::SpectralNorm {
                weight,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        );
        Ok((var, sigma))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Gradients add onto any
    /// already present from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut seeds: Vec<Option<Vec<f64>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (target, contribution) in self.contributions(i, &g) {
                add_into(&mut pending[target.0], &contribution);
            }
            add_into(&mut seeds[i], &g);
        }
        for (node, g) in self.nodes.iter_mut().zip(seeds) {
            node.grad = g;
        }
        Ok(())
    }

    fn contributions(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        let mut emit = |v: Var, grad: Vec<f64>| {
            if self.rg(v) {
                out.push((v, grad));
            }
        };
        let map = |src: &[f64], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            src.iter().enumerate().map(|(k, &x)| f(k, x)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                emit(*a, map(y, &|k, yv| g[k] * yv));
                emit(*b, map(x, &|k, xv| g[k] * xv));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                emit(*a, map(y, &|k, yv| g[k] / yv));
                emit(*b, map(y, &|k, yv| -g[k] * x[k] / (yv * yv)));
            }
            Op::Scale(a, c) => emit(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => emit(*a, g.to_vec()),
            Op::Square(a) => emit(*a, map(val(*a), &|k, x| 2.0 * x * g[k])),
            Op::Abs(a) => emit(*a, map(val(*a), &|k, x| g[k] * sign(x))),
            Op::Relu(a) => emit(*a, map(val(*a), &|k, x| if x > 0.0 { g[k] } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                emit(*a, map(val(*a), &|k, x| if x > 0.0 { g[k] } else { s * g[k] }))
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                emit(*a, map(y, &|k, yv| g[k] * yv * (1.0 - yv)));
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                emit(*a, vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => emit(*a, vec![g[0]; val(*a).len()]),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let grads = conv::backward(val(*input), val(*weight), g, geom, need);
                if let Some(dx) = grads.input {
                    emit(*input, dx);
                }
                if let Some(dw) = grads.weight {
                    emit(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    emit(*b, db);
                }
            }
            Op::Upsample2x(a) => {
                let shape = self.shape(*a);
                let (h, w) = (shape[2], shape[3]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; val(*a).len()];
                for p in 0..shape[0] * shape[1] {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            dx[p * h * w + (y / 2) * w + x / 2] += g[p * h2 * w2 + y * w2 + x];
                        }
                    }
                }
                emit(*a, dx);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let hw = shape[2] * shape[3];
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                    .collect();
                emit(*a, dx);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (x, wt) = (val(*input), val(*weight));
                let cin = self.shape(*input)[1];
                let cout = self.shape(*weight)[0];
                let n = x.len() / cin;
                if self.rg(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for i in 0..n {
                        for o in 0..cout {
                            let gv = g[i * cout + o];
                            for k in 0..cin {
                                dx[i * cin + k] += gv * wt[o * cin + k];
                            }
                        }
                    }
                    emit(*input, dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; wt.len()];
                    for i in 0..n {
                        for o in 0..cout {
                            let gv = g[i * cout + o];
                            for k in 0..cin {
                                dw[o * cin + k] += gv * x[i * cin + k];
                            }
                        }
                    }
                    emit(*weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; cout];
                    for i in 0..n {
                        for o in 0..cout {
                            db[o] += g[i * cout + o];
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let (n, c_total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * c_total + offset) * hw;
                            dp.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        emit(p, dp);
                    }
                    offset += pc;
                }
            }
            Op::ChannelScale(f, a) => {
                let shape = self.shape(*f);
                let hw = shape[2] * shape[3];
                let (fv, av) = (val(*f), val(*a));
                if self.rg(*f) {
                    emit(*f, map(fv, &|k, _| g[k] * av[k / hw]));
                }
                if self.rg(*a) {
                    let da = (0..av.len())
                        .map(|p| {
                            (p * hw..(p + 1) * hw).map(|k| g[k] * fv[k]).sum::<f64>()
                        })
                        .collect();
                    emit(*a, da);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gm = val(*gamma);
                let m = (n * hw) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * x_hat[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let s = gm[ch] * inv_std[ch];
                            for k in base..base + hw {
                                dx[k] = if *batch_stats {
                                    s * (g[k] - sum_g[ch] / m - x_hat[k] * sum_gx[ch] / m)
                                } else {
                                    s * g[k]
                                };
                            }
                        }
                    }
                    emit(*input, dx);
                }
                emit(*gamma, sum_gx);
                emit(*beta, sum_g);
            }
            Op::SelectRows(a, rows) => {
                let shape = self.shape(*a);
                let (h, w) = (shape[2], shape[3]);
                let mut dx = vec![0.0; val(*a).len()];
                let r = rows.len();
                for p in 0..shape[0] * shape[1] {
                    for (j, &row) in rows.iter().enumerate() {
                        for x in 0..w {
                            dx[(p * h + row) * w + x] += g[(p * r + j) * w + x];
                        }
                    }
                }
                emit(*a, dx);
            }
            Op::DiffH(a) => {
                let shape = self.shape(*a);
                let (h, w) = (shape[2], shape[3]);
                let mut dx = vec![0.0; val(*a).len()];
                for p in 0..shape[0] * shape[1] {
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let gv = g[(p * (h - 1) + y) * w + x];
                            dx[(p * h + y + 1) * w + x] += gv;
                            dx[(p * h + y) * w + x] -= gv;
                        }
                    }
                }
                emit(*a, dx);
            }
            Op::DiffW(a) => {
                let w = self.shape(*a)[3];
                let mut dx = vec![0.0; val(*a).len()];
                for r in 0..dx.len() / w {
                    for x in 0..w - 1 {
                        let gv = g[r * (w - 1) + x];
                        dx[r * w + x + 1] += gv;
                        dx[r * w + x] -= gv;
                    }
                }
                emit(*a, dx);
            }
            Op::ReflectPad {
                input,
                pad_h,
                pad_w,
            } => {
                let shape = self.shape(*input);
                let (h, w) = (shape[2], shape[3]);
                let (h2, w2) = (h + pad_h, w + pad_w);
                let mut dx = vec![0.0; val(*input).len()];
                for p in 0..shape[0] * shape[1] {
                    for y in 0..h2 {
                        let sy = reflect_index(y, h);
                        for x in 0..w2 {
                            dx[(p * h + sy) * w + reflect_index(x, w)] += g[(p * h2 + y) * w2 + x];
                        }
                    }
                }
                emit(*input, dx);
            }
            Op::Crop(a) => {
                let src = self.shape(*a);
                let (sh, sw) = (src[2], src[3]);
                let (h, w) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = vec![0.0; val(*a).len()];
                for p in 0..src[0] * src[1] {
                    for y in 0..h {
                        let d = (p * sh + y) * sw;
                        let s = (p * h + y) * w;
                        dx[d..d + w].copy_from_slice(&g[s..s + w]);
                    }
                }
                emit(*a, dx);
            }
            Op::SpectralNorm {
                weight,
                u,
                v,
                sigma,
            } => {
                // d(W/s) = dW/s - W (u v^T : dW) / s^2
                let wd = val(*weight);
                let cols = v.len();
                let dot: f64 = g.iter().zip(wd).map(|(a, b)| a * b).sum();
                let coef = dot / (sigma * sigma);
                let dw = (0..wd.len())
                    .map(|k| g[k] / sigma - coef * u[k / cols] * v[k % cols])
                    .collect();
                emit(*weight, dw);
            }
        }
        out
    }

    /// Adds the gradients of every leaf bound from `store` onto the store's
    /// accumulated gradients.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let uid = store.uid();
        for &(var, owner, id) in &self.bindings {
            if owner != uid {
                continue;
            }
            if let Some(g) = &self.nodes[var.0].grad {
                store
                    .get_mut(id)
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}
