use rand::Rng;

use super::layers::Ctx;
use super::ModelError;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};

/// `F * sigmoid(W2 relu(W1 GAP(F)))`, one gate per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub w1: ParamId,
    pub w2: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self, ModelError> {
        if reduction == 0 || channels % reduction != 0 || channels < reduction {
            return Err(ModelError::Config(format!(
                "reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let w1 = store.add_kaiming(format!("{name}.w1"), &[hidden, channels], channels, rng);
        let w2 = store.add_kaiming(format!("{name}.w2"), &[channels, hidden], hidden, rng);
        Ok(Self {
            w1,
            w2,
            channels,
            reduction,
        })
    }

    /// Gate values `(N, C)` in `(0, 1)`.
    pub fn weights(&self, tape: &mut Tape, ctx: &Ctx, f: Var) -> Result<Var, TensorError> {
        let c = tape.shape(f).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(TensorError::Shape {
                op: "channel_attention",
                detail: format!("expected {} channels, got {c}", self.channels),
            });
        }
        let pooled = tape.global_avg_pool(f)?;
        let w1 = ctx.bind(tape, self.w1);
        let w2 = ctx.bind(tape, self.w2);
        let h = tape.dense(pooled, w1, None)?;
        let h = tape.relu(h);
        let s = tape.dense(h, w2, None)?;
        Ok(tape.sigmoid(s))
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, f: Var) -> Result<Var, TensorError> {
        let a = self.weights(tape, ctx, f)?;
        tape.channel_scale(f, a)
    }
}
