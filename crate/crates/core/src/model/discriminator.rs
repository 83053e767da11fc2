use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::pad_to;
use super::layers::{Conv2d, Ctx, Mode};
use super::spectral;
use super::ModelError;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub out_channels: usize,
    pub leaky_slope_milli: u32,
    /// Power iterations run once at construction.
    pub warm_start_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            channels: vec![32, 64, 128],
            out_channels: 1,
            leaky_slope_milli: 200,
            warm_start_iters: 50,
        }
    }
}

impl DiscriminatorConfig {
    pub fn leaky_slope(&self) -> f64 {
        f64::from(self.leaky_slope_milli) / 1000.0
    }
}

#[derive(Debug, Clone)]
struct SnConv {
    conv: Conv2d,
    u_key: String,
    rows: usize,
    cols: usize,
}

impl SnConv {
    fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        x: Var,
        update_u: bool,
    ) -> Result<Var, TensorError> {
        let w = ctx.store.get(self.conv.weight).value.clone();
        let mut u = ctx.store.buffer(&self.u_key).expect("u vector").data().to_vec();
        if update_u {
            spectral::power_iterate(w.data(), self.rows, self.cols, &mut u, 1);
            *ctx.store.buffer_mut(&self.u_key).expect("u vector") =
                Tensor::new(vec![self.rows], u.clone())?;
        }
        let v = spectral::right_vector(w.data(), self.rows, self.cols, &u);
        let wv = ctx.bind(tape, self.conv.weight);
        let (wn, _) = tape.spectral_normalize(wv, &u, &v)?;
        let b = self.conv.bias.map(|b| ctx.bind(tape, b));
        tape.conv2d(x, wn, b, self.conv.stride, self.conv.padding)
    }
}

/// Conditional PatchGAN: three stride-2 leaky-ReLU convolutions and a 3x3
/// head, all spectrally normalized, emitting raw patch scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    layers: Vec<SnConv>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        if config.channels.is_empty() || config.in_channels == 0 || config.out_channels == 0 {
            return Err(ModelError::Config("discriminator needs layers and channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut prev = config.in_channels;
        let n = config.channels.len();
        let specs = config
            .channels
            .iter()
            .map(|&c| (c, (4, 4), 2, (1, 1)))
            .chain(std::iter::once((config.out_channels, (3, 3), 1, (1, 1))));
        for (i, (c, k, stride, pad)) in specs.enumerate() {
            let name = if i < n {
                format!("d.conv{}", i + 1)
            } else {
                "d.head".to_string()
            };
            let conv = Conv2d::new(&mut store, &mut rng, &name, prev, c, k, stride, pad, true);
            let rows = c;
            let cols = prev * k.0 * k.1;
            let mut u = spectral::initial_u(rows, seed.wrapping_add(i as u64 + 1));
            let w = store.get(conv.weight).value.clone();
            spectral::power_iterate(w.data(), rows, cols, &mut u, config.warm_start_iters);
            let u_key = format!("{name}.sn_u");
            store.set_buffer(u_key.clone(), Tensor::new(vec![rows], u)?);
            layers.push(SnConv {
                conv,
                u_key,
                rows,
                cols,
            });
            prev = c;
        }
        Ok(Self {
            config,
            store,
            layers,
        })
    }

    /// Multiple the input is reflect-padded to.
    pub fn size_multiple(&self) -> usize {
        1 << self.config.channels.len()
    }

    /// Scores `(N, 1, h', w')` for a `(condition, candidate)` pair of
    /// `(N, 1, H, W)` images. `update_u` advances the power iteration.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        condition: Var,
        candidate: Var,
        update_u: bool,
        trainable: bool,
    ) -> Result<Var, TensorError> {
        let x = tape.concat_channels(&[condition, candidate])?;
        let (_, c, h, w) = tape.value(x).dims4("discriminator")?;
        if c != self.config.in_channels {
            return Err(TensorError::Shape {
                op: "discriminator",
                detail: format!("expected {} channels, got {c}", self.config.in_channels),
            });
        }
        let m = self.size_multiple();
        if h < m || w < m {
            return Err(TensorError::Shape {
                op: "discriminator",
                detail: format!("{h}x{w} is too small for {} halvings", self.config.channels.len()),
            });
        }
        let (ph, pw) = (pad_to(h, m), pad_to(w, m));
        let mut x = if ph > 0 || pw > 0 {
            tape.reflect_pad(x, ph, pw)?
        } else {
            x
        };
        let mut ctx = Ctx {
            store: &mut self.store,
            mode: Mode::Train,
            trainable,
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, &mut ctx, x, update_u)?;
            if i < last {
                x = tape.leaky_relu(x, self.config.leaky_slope());
            }
        }
        Ok(x)
    }

    /// Top singular value of each normalized weight, from a fresh
    /// `iters`-step power iteration.
    pub fn normalized_sigmas(&self, iters: usize) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                let w = self.store.get(l.conv.weight).value.data();
                let u = self.store.buffer(&l.u_key).expect("u vector").data();
                let (_, sigma_hat) = spectral::sigma_from(w, l.rows, l.cols, u);
                let normalized: Vec<f64> = w.iter().map(|x| x / sigma_hat).collect();
                spectral::estimate_sigma(&normalized, l.rows, l.cols, iters)
            })
            .collect()
    }

    /// Output channel count of every layer, head included.
    pub fn channel_progression(&self) -> Vec<usize> {
        std::iter::once(self.config.in_channels)
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }
}
