use rand::Rng;

use super::attention::ChannelAttention;
use super::layers::{BatchNorm2d, Conv2d, Ctx};
use super::ModelError;
use crate::tensor::{ParamStore, Tape, TensorError, Var};

/// Kernel shapes of the four parallel branches.
pub const BRANCH_KERNELS: [(usize, usize); 4] = [(1, 1), (1, 7), (7, 1), (3, 3)];

#[derive(Debug, Clone)]
struct Branch {
    conv: Conv2d,
    norm: BatchNorm2d,
}

/// Four same-padded branches (conv, batch norm, ReLU) of `Cout/4` channels
/// each, concatenated and gated by channel attention.
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    branches: Vec<Branch>,
    pub attention: ChannelAttention,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl InceptionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        reduction: usize,
    ) -> Result<Self, ModelError> {
        if cout % 4 != 0 || cout == 0 {
            return Err(ModelError::Config(format!(
                "inception output channels {cout} not divisible by 4"
            )));
        }
        let width = cout / 4;
        let branches = BRANCH_KERNELS
            .iter()
            .map(|&(kh, kw)| {
                let bname = format!("{name}.b{kh}x{kw}");
                Branch {
                    conv: Conv2d::same(store, rng, &format!("{bname}.conv"), cin, width, (kh, kw), false),
                    norm: BatchNorm2d::new(store, &format!("{bname}.bn"), width),
                }
            })
            .collect();
        let attention = ChannelAttention::new(store, rng, &format!("{name}.cam"), cout, reduction)?;
        Ok(Self {
            branches,
            attention,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let mut outs = Vec::with_capacity(4);
        for b in &self.branches {
            let y = b.conv.forward(tape, ctx, x)?;
            let y = b.norm.forward(tape, ctx, y)?;
            outs.push(tape.relu(y));
        }
        let cat = tape.concat_channels(&outs)?;
        self.attention.forward(tape, ctx, cat)
    }
}
