use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inception::InceptionBlock;
use super::layers::{BatchNorm2d, Conv2d, Ctx, Mode};
use super::ModelError;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

/// Number of encoder levels for an `h x w` image:
/// `min(5, floor(log2(min(h, w))) - 2)`.
pub fn adaptive_depth(h: usize, w: usize) -> Result<usize, ModelError> {
    let m = h.min(w);
    if m < 8 {
        return Err(ModelError::Config(format!(
            "image {h}x{w} too small: min side must be at least 8"
        )));
    }
    Ok(5.min(m.ilog2() as usize - 2))
}

/// Level count actually built: the three-level layout at 101x1001 (either
/// orientation), [`adaptive_depth`] everywhere else.
pub fn generator_depth(h: usize, w: usize) -> Result<usize, ModelError> {
    let d = adaptive_depth(h, w)?;
    if (h.min(w), h.max(w)) == (101, 1001) {
        Ok(3)
    } else {
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub reduction: usize,
}

impl GeneratorConfig {
    pub const BASE_CHANNELS: usize = 64;
    pub const MAX_CHANNELS: usize = 256;

    /// Channels double from 64 per level and saturate at 256.
    pub fn for_image(height: usize, width: usize) -> Result<Self, ModelError> {
        let depth = generator_depth(height, width)?;
        let encoder_channels: Vec<usize> = (0..depth)
            .map(|i| (Self::BASE_CHANNELS << i).min(Self::MAX_CHANNELS))
            .collect();
        let decoder_channels = encoder_channels.iter().rev().copied().collect();
        Ok(Self {
            height,
            width,
            in_channels: 2,
            out_channels: 1,
            depth,
            encoder_channels,
            bottleneck_channels: vec![Self::MAX_CHANNELS; 2],
            decoder_channels,
            reduction: 4,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 || self.encoder_channels.len() != self.depth {
            return err(format!("depth {} vs encoder list {:?}", self.depth, self.encoder_channels));
        }
        let rev: Vec<usize> = self.encoder_channels.iter().rev().copied().collect();
        if self.decoder_channels != rev {
            return err("decoder channels must mirror the encoder".into());
        }
        if self.bottleneck_channels.is_empty() {
            return err("empty bottleneck".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return err("channel counts must be positive".into());
        }
        let multiple = 1usize << self.depth;
        let (ph, pw) = (pad_to(self.height, multiple), pad_to(self.width, multiple));
        if ph >= self.height || pw >= self.width {
            return err(format!(
                "{}x{} cannot be reflect-padded to a multiple of {multiple}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    /// Spatial size after padding to a multiple of `2^depth`.
    pub fn padded_shape(&self) -> (usize, usize) {
        let m = 1usize << self.depth;
        (
            self.height + pad_to(self.height, m),
            self.width + pad_to(self.width, m),
        )
    }
}

pub(crate) fn pad_to(n: usize, multiple: usize) -> usize {
    (multiple - n % multiple) % multiple
}

#[derive(Debug, Clone)]
struct Level {
    block: InceptionBlock,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Conv2d,
    block: InceptionBlock,
}

/// U-Net over `(N, 2, H, W)` mask+data stacks producing `(N, 1, H, W)` fields.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    stem: Conv2d,
    stem_norm: BatchNorm2d,
    encoder: Vec<Level>,
    bottleneck: Vec<InceptionBlock>,
    decoder: Vec<UpLevel>,
    head: Conv2d,
}

impl Generator {
    /// Builds the network and checks that every parameter receives gradient.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        let g = Self::build(config, seed)?;
        g.verify_gradient_flow(seed)?;
        Ok(g)
    }

    /// Builds without the gradient-flow check.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = config.encoder_channels[0];
        let r = config.reduction;
        let stem = Conv2d::same(&mut store, &mut rng, "g.stem", config.in_channels, c0, (3, 3), false);
        let stem_norm = BatchNorm2d::new(&mut store, "g.stem.bn", c0);
        let mut encoder = Vec::new();
        let mut prev = c0;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let block = InceptionBlock::new(&mut store, &mut rng, &format!("g.enc{i}"), prev, c, r)?;
            let down = Conv2d::new(
                &mut store,
                &mut rng,
                &format!("g.down{i}"),
                c,
                c,
                (4, 4),
                2,
                (1, 1),
                true,
            );
            encoder.push(Level { block, down });
            prev = c;
        }
        let mut bottleneck = Vec::new();
        for (i, &c) in config.bottleneck_channels.iter().enumerate() {
            bottleneck.push(InceptionBlock::new(&mut store, &mut rng, &format!("g.mid{i}"), prev, c, r)?);
            prev = c;
        }
        let mut decoder = Vec::new();
        for (j, &c) in config.decoder_channels.iter().enumerate() {
            let level = config.depth - 1 - j;
            let up = Conv2d::same(&mut store, &mut rng, &format!("g.up{level}"), prev, c, (3, 3), true);
            let block =
                InceptionBlock::new(&mut store, &mut rng, &format!("g.dec{level}"), 2 * c, c, r)?;
            decoder.push(UpLevel { up, block });
            prev = c;
        }
        let head = Conv2d::same(&mut store, &mut rng, "g.head", prev, config.out_channels, (1, 1), true);
        Ok(Self {
            config,
            store,
            stem,
            stem_norm,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Forward pass on a tape. `trainable` binds weights as gradient leaves.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<Var, TensorError> {
        let (_, c, h, w) = tape.value(input).dims4("generator")?;
        if c != self.config.in_channels {
            return Err(TensorError::Shape {
                op: "generator",
                detail: format!("expected {} input channels, got {c}", self.config.in_channels),
            });
        }
        let m = 1usize << self.config.depth;
        let (ph, pw) = (pad_to(h, m), pad_to(w, m));
        let mut x = if ph > 0 || pw > 0 {
            tape.reflect_pad(input, ph, pw)?
        } else {
            input
        };
        let mut ctx = Ctx {
            store: &mut self.store,
            mode,
            trainable,
        };
        x = self.stem.forward(tape, &ctx, x)?;
        x = self.stem_norm.forward(tape, &mut ctx, x)?;
        x = tape.relu(x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = level.block.forward(tape, &mut ctx, x)?;
            skips.push(x);
            x = level.down.forward(tape, &ctx, x)?;
        }
        for block in &self.bottleneck {
            x = block.forward(tape, &mut ctx, x)?;
        }
        for level in &self.decoder {
            x = tape.upsample_nearest2x(x)?;
            x = level.up.forward(tape, &ctx, x)?;
            let skip = skips.pop().expect("one skip per level");
            x = tape.concat_channels(&[x, skip])?;
            x = level.block.forward(tape, &mut ctx, x)?;
        }
        x = self.head.forward(tape, &ctx, x)?;
        x = tape.relu(x);
        if ph > 0 || pw > 0 {
            x = tape.crop(x, h, w)?;
        }
        Ok(x)
    }

    /// Evaluation-mode inference on a `(N, 2, H, W)` tensor.
    pub fn infer(&mut self, input: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(y).clone())
    }

    /// Runs one training-mode forward/backward on a random batch (on a copy)
    /// and fails if any parameter's gradient is identically zero.
    pub fn verify_gradient_flow(&self, seed: u64) -> Result<(), ModelError> {
        let mut probe = self.clone();
        probe.store.zero_grad();
        let side = 2usize << self.config.depth;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let input = Tensor::from_fn(&[2, self.config.in_channels, side, side], |_| rng.gen_range(0.0..1.0));
        let weights = Tensor::from_fn(&[2, self.config.out_channels, side, side], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let y = probe.forward(&mut tape, x, Mode::Train, true)?;
        let r = tape.constant(weights);
        let p = tape.mul(y, r)?;
        let loss = tape.sum(p);
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut probe.store);
        for p in probe.store.params() {
            if p.grad.data().iter().all(|&g| g == 0.0) {
                return Err(ModelError::DeadParameter(p.name.clone()));
            }
        }
        Ok(())
    }
}
