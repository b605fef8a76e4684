// Post-norm Transformer blocks: every sub-layer is wrapped as
// `LN(x + sublayer(x))`.

use rand::Rng;

use super::{AttentionParams, Binding, LinearParams, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.channel_normalize(x, LAYER_NORM_EPS)?;
        let y = tape.mul_row(y, bind.var(self.gain))?;
        tape.add_row(y, bind.var(self.bias))
    }
}

/// `Linear(d → 2d) → ReLU → Linear(2d → d)`.
#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub expand: LinearParams,
    pub contract: LinearParams,
}

impl FeedForwardParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        FeedForwardParams {
            expand: LinearParams::new(store, rng, &format!("{name}.expand"), group, dim, 2 * dim),
            contract: LinearParams::new(
                store,
                rng,
                &format!("{name}.contract"),
                group,
                2 * dim,
                dim,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, bind, x)?;
        let h = tape.relu(h);
        self.contract.forward(tape, bind, h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.expand.zero(store);
        self.contract.zero(store);
    }
}

fn residual_norm(
    tape: &mut Tape,
    bind: &Binding,
    ln: &LayerNormParams,
    x: Var,
    branch: Var,
) -> Result<Var> {
    let s = tape.add(x, branch)?;
    ln.forward(tape, bind, s)
}

fn check_width(tape: &Tape, x: Var, dim: usize, op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::dim(op, shape, &[shape.first().copied().unwrap_or(0), dim]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub ff: FeedForwardParams,
}

impl EncoderBlockParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderBlockParams {
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), group, dim, heads)?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), group, dim),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), group, dim),
            ff: FeedForwardParams::new(store, rng, &format!("{name}.ff"), group, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.d_model
    }

    /// `x' = LN(x + SelfAttn(x)); out = LN(x' + FF(x'))`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        check_width(tape, x, self.dim(), "encoder_block")?;
        let a = self.attn.forward(tape, bind, x, x)?;
        let x1 = residual_norm(tape, bind, &self.norm1, x, a)?;
        let f = self.ff.forward(tape, bind, x1)?;
        residual_norm(tape, bind, &self.norm2, x1, f)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub norm3: LayerNormParams,
    pub ff: FeedForwardParams,
}

impl DecoderBlockParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(DecoderBlockParams {
            self_attn: AttentionParams::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                group,
                dim,
                heads,
            )?,
            cross_attn: AttentionParams::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                group,
                dim,
                heads,
            )?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), group, dim),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), group, dim),
            norm3: LayerNormParams::new(store, &format!("{name}.norm3"), group, dim),
            ff: FeedForwardParams::new(store, rng, &format!("{name}.ff"), group, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.self_attn.d_model
    }

    /// Self-attention over the queries, cross-attention from the queries into
    /// `memory`, then the feed-forward, each with a post-norm residual.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, queries: Var, memory: Var) -> Result<Var> {
        check_width(tape, queries, self.dim(), "decoder_block")?;
        if tape.value(memory).rows() == 0 || tape.shape(memory).len() != 2 {
            return Err(Error::Contract("decoder block needs a non-empty memory".into()));
        }
        check_width(tape, memory, self.dim(), "decoder_block")?;
        let a = self.self_attn.forward(tape, bind, queries, queries)?;
        let x1 = residual_norm(tape, bind, &self.norm1, queries, a)?;
        let c = self.cross_attn.forward(tape, bind, x1, memory)?;
        let x2 = residual_norm(tape, bind, &self.norm2, x1, c)?;
        let f = self.ff.forward(tape, bind, x2)?;
        residual_norm(tape, bind, &self.norm3, x2, f)
    }
}

pub fn encoder_block(p: &EncoderBlockParams, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
    p.forward(tape, bind, x)
}

pub fn decoder_block(
    p: &DecoderBlockParams,
    tape: &mut Tape,
    bind: &Binding,
    queries: Var,
    memory: Var,
) -> Result<Var> {
    p.forward(tape, bind, queries, memory)
}
