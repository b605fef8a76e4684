use rand::Rng;

use super::{Binding, LinearParams, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Query, key and value projections of one head, each `d_model → d_k`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

/// Multi-head scaled dot-product attention with per-head projections and a
/// shared output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub output: LinearParams,
    pub d_model: usize,
    pub d_k: usize,
}

/// Per-head attention weights `[m × n]` and outputs `[m × d_k]`.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub weights: Var,
    pub output: Var,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d_model} is not divisible into {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let heads = (0..heads)
            .map(|h| {
                let p = |s: &str| format!("{name}.head{h}.{s}");
                HeadParams {
                    query: LinearParams::new(store, rng, &p("query"), group, d_model, d_k),
                    key: LinearParams::new(store, rng, &p("key"), group, d_model, d_k),
                    value: LinearParams::new(store, rng, &p("value"), group, d_model, d_k),
                }
            })
            .collect();
        let output = LinearParams::new(
            store,
            rng,
            &format!("{name}.output"),
            group,
            d_model,
            d_model,
        );
        Ok(AttentionParams {
            heads,
            output,
            d_model,
            d_k,
        })
    }

    /// Zeroes every projection, query/key/value and output.
    pub fn zero(&self, store: &mut ParamStore) {
        for h in &self.heads {
            h.query.zero(store);
            h.key.zero(store);
            h.value.zero(store);
        }
        self.output.zero(store);
    }

    /// `softmax(Q Kᵀ / √d_k) V` for every head, before concatenation.
    pub fn heads_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        q_in: Var,
        kv_in: Var,
    ) -> Result<Vec<HeadTrace>> {
        let (_, dq) = tape.value(q_in).dims2()?;
        let (n, dkv) = tape.value(kv_in).dims2()?;
        if n == 0 {
            return Err(Error::Contract("attention over zero keys".into()));
        }
        if dq != self.d_model || dkv != self.d_model {
            return Err(Error::dim(
                "multi_head_attention",
                tape.shape(q_in),
                tape.shape(kv_in),
            ));
        }
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(tape, bind, q_in)?;
            let k = head.key.forward(tape, bind, kv_in)?;
            let v = head.value.forward(tape, bind, kv_in)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 1)?;
            let output = tape.matmul(weights, v)?;
            out.push(HeadTrace { weights, output });
        }
        Ok(out)
    }

    /// Heads concatenated along columns, then output-projected: `[m × d_model]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, q_in: Var, kv_in: Var) -> Result<Var> {
        let traces = self.heads_forward(tape, bind, q_in, kv_in)?;
        let outputs: Vec<Var> = traces.iter().map(|t| t.output).collect();
        let cat = tape.concat_cols(&outputs)?;
        self.output.forward(tape, bind, cat)
    }
}

pub fn multi_head_attention(
    p: &AttentionParams,
    tape: &mut Tape,
    bind: &Binding,
    q_in: Var,
    kv_in: Var,
) -> Result<Var> {
    p.forward(tape, bind, q_in, kv_in)
}
