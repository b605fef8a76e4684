//! Class masks, per-point class confidences, per-class affine parameters and
//! the semantic-affine transformation that blends them.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Mlp, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Variance floor used by every per-point normalization in this module.
pub const AFFINE_NORM_EPS: f64 = 1e-5;

/// `softplus⁻¹(1)`; initial scale-head bias giving unit scales.
pub fn identity_scale_bias() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Learnable `[N × d_h]` class embeddings.
#[derive(Clone, Debug)]
pub struct ClassQueries {
    pub embeddings: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl ClassQueries {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        classes: usize,
        dim: usize,
    ) -> Self {
        let embeddings = store.add_uniform(name, ParamGroup::Attention, &[classes, dim], dim, rng);
        ClassQueries {
            embeddings,
            classes,
            dim,
        }
    }

    pub fn var(&self, bind: &Binding) -> Var {
        bind.var(self.embeddings)
    }
}

/// `[N × d_m]`, one mask vector per class.
#[derive(Clone, Copy, Debug)]
pub struct ClassMasks {
    pub masks: Var,
}

/// Per-class scales (`≥ 0`) and biases, both `[N × d_i]`.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub scales: Var,
    pub biases: Var,
}

/// Row-stochastic `[n × N]` confidences and, when they came from a
/// classifier, the logits behind them.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceMatrix {
    pub probs: Var,
    pub logits: Option<Var>,
}

impl ConfidenceMatrix {
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self> {
        let probs = tape.softmax(logits, 1)?;
        Ok(ConfidenceMatrix {
            probs,
            logits: Some(logits),
        })
    }

    /// Wraps a given probability matrix; rows must sum to 1.
    pub fn from_probs(tape: &Tape, probs: Var) -> Result<Self> {
        let t = tape.value(probs);
        let (n, _) = t.dims2()?;
        for j in 0..n {
            let row = t.row(j);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "confidence row {j} is not a distribution"
                )));
            }
        }
        Ok(ConfidenceMatrix {
            probs,
            logits: None,
        })
    }
}

/// Two 5-layer MLPs mapping one class's decoder state to its scale and bias
/// vectors for a decoder level of width `dim`.
#[derive(Clone, Debug)]
pub struct AffineHeads {
    pub scale: Mlp,
    pub bias: Mlp,
    pub dim: usize,
}

impl AffineHeads {
    /// The last scale layer starts at zero weight and bias `ln(e − 1)` and the
    /// last bias layer at zero, so a fresh head emits `s ≡ 1`, `b ≡ 0`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_h: usize,
        dim: usize,
    ) -> Self {
        let dims = [d_h, d_h, d_h, d_h, d_h, dim];
        let scale = Mlp::new(store, rng, &format!("{name}.scale"), ParamGroup::Attention, &dims);
        let bias = Mlp::new(store, rng, &format!("{name}.bias"), ParamGroup::Attention, &dims);
        let heads = AffineHeads { scale, bias, dim };
        heads.reset_identity(store);
        heads
    }

    pub fn reset_identity(&self, store: &mut ParamStore) {
        self.scale.last().zero(store);
        *store.get_mut(self.scale.last().bias) = Tensor::full(&[self.dim], identity_scale_bias());
        self.bias.last().zero(store);
    }
}

pub fn predict_masks(
    tape: &mut Tape,
    bind: &Binding,
    head: &Mlp,
    h_final: Var,
    classes: usize,
) -> Result<ClassMasks> {
    let rows = tape.value(h_final).rows();
    if rows != classes {
        return Err(Error::dim("predict_masks", tape.shape(h_final), &[classes, head.in_dim()]));
    }
    Ok(ClassMasks {
        masks: head.forward(tape, bind, h_final)?,
    })
}

/// `logits[j, k] = m_k · f_j`, `A = softmax` over classes.
pub fn mask_confidences(tape: &mut Tape, m: &ClassMasks, f: Var) -> Result<ConfidenceMatrix> {
    let logits = tape
        .matmul_nt(f, m.masks)
        .map_err(|_| Error::dim("mask_confidences", tape.shape(f), tape.shape(m.masks)))?;
    ConfidenceMatrix::from_logits(tape, logits)
}

pub fn predict_affine_params(
    tape: &mut Tape,
    bind: &Binding,
    heads: &AffineHeads,
    h_u: Var,
) -> Result<AffineParams> {
    let raw = heads.scale.forward(tape, bind, h_u)?;
    let scales = tape.softplus(raw);
    let biases = heads.bias.forward(tape, bind, h_u)?;
    Ok(AffineParams { scales, biases })
}

/// `S = A·s`, `B = A·b`.
pub fn combine_affine(tape: &mut Tape, a: &ConfidenceMatrix, p: &AffineParams) -> Result<(Var, Var)> {
    let (_, classes) = tape.value(a.probs).dims2()?;
    let (ns, _) = tape.value(p.scales).dims2()?;
    if ns != classes || tape.shape(p.scales) != tape.shape(p.biases) {
        return Err(Error::dim("combine_affine", tape.shape(a.probs), tape.shape(p.scales)));
    }
    let s = tape.matmul(a.probs, p.scales)?;
    let b = tape.matmul(a.probs, p.biases)?;
    Ok((s, b))
}

/// `f̃_j = S_j ⊙ f̂_j + B_j` with `f̂_j` the zero-mean unit-variance
/// normalization of `f_j` over its channels.
pub fn semantic_affine_transform(
    tape: &mut Tape,
    f: Var,
    a: &ConfidenceMatrix,
    p: &AffineParams,
) -> Result<Var> {
    let (s, b) = combine_affine(tape, a, p)?;
    if tape.shape(s) != tape.shape(f) {
        return Err(Error::dim("semantic_affine_transform", tape.shape(f), tape.shape(s)));
    }
    let fhat = tape.channel_normalize(f, AFFINE_NORM_EPS)?;
    let y = tape.mul(s, fhat)?;
    tape.add(y, b)
}

/// One class-agnostic `(scale, bias)` pair, each of `d_i` entries, applied to
/// every normalized point.
pub fn adain_transform(tape: &mut Tape, f: Var, scale: Var, bias: Var) -> Result<Var> {
    let fhat = tape.channel_normalize(f, AFFINE_NORM_EPS)?;
    let y = tape.mul_row(fhat, scale)?;
    tape.add_row(y, bias)
}

/// Column means of a `[rows × d]` matrix as a `[1 × d]` row.
pub fn row_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    tape.segment_mean(x, Arc::from(vec![0usize; rows]), 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckConfig};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn worked_example(tape: &mut Tape) -> (ConfidenceMatrix, AffineParams) {
        let probs = tape.constant(t(&[&[0.25, 0.75]]));
        let a = ConfidenceMatrix::from_probs(tape, probs).unwrap();
        let p = AffineParams {
            scales: tape.constant(t(&[&[1.0, 1.0], &[3.0, 1.0]])),
            biases: tape.constant(t(&[&[0.0, 0.0], &[1.0, 1.0]])),
        };
        (a, p)
    }

    #[test]
    fn combine_affine_worked_example() {
        let mut tape = Tape::new();
        let (a, p) = worked_example(&mut tape);
        let (s, b) = combine_affine(&mut tape, &a, &p).unwrap();
        assert_eq!(tape.value(s).data(), &[2.5, 1.0]);
        assert_eq!(tape.value(b).data(), &[0.75, 0.75]);
    }

    #[test]
    fn transform_worked_example() {
        let mut tape = Tape::new();
        let (a, p) = worked_example(&mut tape);
        let f = tape.constant(t(&[&[2.0, 4.0]]));
        let y = semantic_affine_transform(&mut tape, f, &a, &p).unwrap();
        let h = 1.0 / (1.0 + AFFINE_NORM_EPS).sqrt();
        let expect = [2.5 * -h + 0.75, h + 0.75];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(tape.value(y).max_abs_diff(&t(&[&[-1.75, 1.75]])) < 2e-5);
    }

    #[test]
    fn identity_affine_is_plain_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::uniform(&[5, 4], 3.0, &mut rng));
        let logits = tape.constant(Tensor::uniform(&[5, 3], 3.0, &mut rng));
        let a = ConfidenceMatrix::from_logits(&mut tape, logits).unwrap();
        let p = AffineParams {
            scales: tape.constant(Tensor::full(&[3, 4], 1.0)),
            biases: tape.constant(Tensor::zeros(&[3, 4])),
        };
        let y = semantic_affine_transform(&mut tape, f, &a, &p).unwrap();
        let n = tape.channel_normalize(f, AFFINE_NORM_EPS).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(n)) < 1e-15);

        let one = tape.constant(Tensor::full(&[4], 1.0));
        let zero = tape.constant(Tensor::zeros(&[4]));
        let z = adain_transform(&mut tape, f, one, zero).unwrap();
        assert_eq!(tape.value(z), tape.value(n));
    }

    #[test]
    fn mask_confidence_examples() {
        let mut tape = Tape::new();
        let m = ClassMasks {
            masks: tape.constant(t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])),
        };
        let f = tape.constant(t(&[&[0.3, -7.0], &[5.0, 1.0]]));
        let a = mask_confidences(&mut tape, &m, f).unwrap();
        for v in tape.value(a.probs).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let m = ClassMasks {
            masks: tape.constant(t(&[&[0.0, 1.0], &[2.0f64.ln(), 0.0]])),
        };
        let f = tape.constant(t(&[&[1.0, 0.0]]));
        let a = mask_confidences(&mut tape, &m, f).unwrap();
        let row = tape.value(a.probs).row(0);
        assert!((row[0] - 1.0 / 3.0).abs() < 1e-15 && (row[1] - 2.0 / 3.0).abs() < 1e-15);

        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(mask_confidences(&mut tape, &m, bad).is_err());
    }

    #[test]
    fn orthonormal_masks_pick_the_scaled_class() {
        let n = 4;
        let mut tape = Tape::new();
        let m = ClassMasks {
            masks: tape.constant(Tensor::eye(n)),
        };
        let mut f = Tensor::zeros(&[1, n]);
        f.data_mut()[2] = 100.0;
        let f = tape.constant(f);
        let a = mask_confidences(&mut tape, &m, f).unwrap();
        let row = tape.value(a.probs).row(0).to_vec();
        let logits = tape.value(a.logits.unwrap()).row(0).to_vec();
        assert_eq!(logits, vec![0.0, 0.0, 100.0, 0.0]);
        let want = 1.0 / (1.0 + (n - 1) as f64 * (-100f64).exp());
        assert!((row[2] - want).abs() < 1e-15 && (row[2] - 1.0).abs() < 1e-40);
        assert!(row.iter().enumerate().all(|(k, &v)| k == 2 || v < row[2]));
    }

    #[test]
    fn affine_head_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let heads = AffineHeads::new(&mut store, &mut rng, "aff", 6, 3);
        let h = Tensor::uniform(&[4, 6], 1.0, &mut rng);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let p = predict_affine_params(&mut tape, &bind, &heads, hv).unwrap();
        for v in tape.value(p.scales).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(tape.value(p.biases).data().iter().all(|&v| v == 0.0));

        *store.get_mut(heads.scale.last().bias) = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let hv = tape.constant(h);
        let p = predict_affine_params(&mut tape, &bind, &heads, hv).unwrap();
        for v in tape.value(p.scales).data() {
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_rows_are_independent_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let heads = AffineHeads::new(&mut store, &mut rng, "aff", 5, 3);
        for l in heads.scale.layers().iter().chain(heads.bias.layers()) {
            let w = Tensor::uniform(&[l.out_dim, l.in_dim], 0.8, &mut rng);
            store.set(l.weight, w).unwrap();
        }
        let h = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let all = predict_affine_params(&mut tape, &bind, &heads, hv).unwrap();
        for k in 0..4 {
            let row = tape.constant(Tensor::new(&[1, 5], h.row(k).to_vec()).unwrap());
            let one = predict_affine_params(&mut tape, &bind, &heads, row).unwrap();
            assert_eq!(tape.value(one.scales).data(), tape.value(all.scales).row(k));
            assert_eq!(tape.value(one.biases).data(), tape.value(all.biases).row(k));
        }
    }

    #[test]
    fn shared_class_params_collapse_to_adain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let rep = |x: &Tensor| Tensor::from_rows(&[x.data(), x.data(), x.data()]).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::uniform(&[6, 4], 2.0, &mut rng));
        let logits = tape.constant(Tensor::uniform(&[6, 3], 4.0, &mut rng));
        let a = ConfidenceMatrix::from_logits(&mut tape, logits).unwrap();
        let p = AffineParams {
            scales: tape.constant(rep(&s)),
            biases: tape.constant(rep(&b)),
        };
        let y = semantic_affine_transform(&mut tape, f, &a, &p).unwrap();
        let (sv, bv) = (tape.constant(s), tape.constant(b));
        let z = adain_transform(&mut tape, f, sv, bv).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(z)) < 1e-14);
    }

    #[test]
    fn from_probs_rejects_non_distributions() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[&[0.5, 0.6]]));
        assert!(ConfidenceMatrix::from_probs(&tape, p).is_err());
    }

    #[test]
    fn composed_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let heads = AffineHeads::new(&mut store, &mut rng, "aff", 4, 3);
        let mask_head = Mlp::new(&mut store, &mut rng, "mask", ParamGroup::Attention, &[4, 4, 4, 5]);
        for l in heads.scale.layers().iter().chain(heads.bias.layers()) {
            let w = Tensor::uniform(&[l.out_dim, l.in_dim], 0.8, &mut rng);
            store.set(l.weight, w).unwrap();
        }
        let mut params = store.named_tensors();
        params.push(("class_features".into(), Tensor::uniform(&[2, 4], 1.0, &mut rng)));
        params.push(("point_embed".into(), Tensor::uniform(&[6, 5], 1.0, &mut rng)));
        params.push(("f".into(), Tensor::uniform(&[6, 3], 2.0, &mut rng)));
        let report = finite_diff_check(
            |t, v| {
                let n = v.len();
                let bind = Binding::from_vars(v[..n - 3].to_vec());
                let m = predict_masks(t, &bind, &mask_head, v[n - 3], 2)?;
                let a = mask_confidences(t, &m, v[n - 2])?;
                let p = predict_affine_params(t, &bind, &heads, v[n - 3])?;
                let y = semantic_affine_transform(t, v[n - 1], &a, &p)?;
                let w = t.constant(Tensor::uniform(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
