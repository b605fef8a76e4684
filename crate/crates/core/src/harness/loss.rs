use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{Tape, Tensor, Var};

/// Mean over points of `−log softmax(logits)[label]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Sum over levels of the mean binary cross entropy between
/// `sigmoid(logits)` and the multi-hot targets of that level.
pub fn midlevel_bce_loss(tape: &mut Tape, logits: &[Var], targets: &[Tensor]) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} logit levels against {} target levels",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Contract("no supervised levels".into()));
    }
    let mut total: Option<Var> = None;
    for (&l, t) in logits.iter().zip(targets) {
        let b = tape.bce_with_logits(l, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, b)?,
            None => b,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub final_ce: f64,
    pub mid_bce: f64,
}

/// Scalar parts of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub bce: Var,
}

/// `w_final · CE + w_mid · Σ_levels BCE`.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardOutput,
    labels0: &[usize],
    shadow: &[Tensor],
    w: LossWeights,
) -> Result<LossTerms> {
    let ce = cross_entropy_loss(tape, fwd.final_logits, labels0)?;
    let bce = midlevel_bce_loss(tape, &fwd.mid_logits(), shadow)?;
    let a = tape.scale(ce, w.final_ce);
    let b = tape.scale(bce, w.mid_bce);
    let total = tape.add(a, b)?;
    Ok(LossTerms { total, ce, bce })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckConfig};

    fn ce_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
        let mut s = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            s += -(row[l].exp() / z).ln();
        }
        s / labels.len() as f64
    }

    fn bce_oracle(logits: &Tensor, t: &Tensor) -> f64 {
        let mut s = 0.0;
        for (x, y) in logits.data().iter().zip(t.data()) {
            let p = 1.0 / (1.0 + (-x).exp());
            s += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        s / logits.numel() as f64
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[3, 5]));
        let l = cross_entropy_loss(&mut tape, u, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-15);

        let peaked = tape.constant(Tensor::from_rows(&[[100.0, 0.0, 0.0]]).unwrap());
        let l = cross_entropy_loss(&mut tape, peaked, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-40);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[7, 4], 3.0, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..4)).collect();
        let v = tape.constant(x.clone());
        let l = cross_entropy_loss(&mut tape, v, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - ce_oracle(&x, &labels)).abs() < 1e-12);

        assert!(matches!(cross_entropy_loss(&mut tape, v, &[4; 7]), Err(Error::Validation(_))));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let t = Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        let l = midlevel_bce_loss(&mut tape, &[z], &[t.clone()]).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let big = tape.constant(Tensor::full(&[1, 2], 100.0));
        let l = midlevel_bce_loss(&mut tape, &[big], &[Tensor::full(&[1, 2], 1.0)]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-40);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        let mut want = 0.0;
        for n in [3, 5, 8] {
            let x = Tensor::uniform(&[n, 4], 4.0, &mut rng);
            let data = (0..n * 4).map(|_| rng.random_range(0..2) as f64).collect();
            let y = Tensor::new(&[n, 4], data).unwrap();
            want += bce_oracle(&x, &y);
            logits.push(tape.constant(x));
            targets.push(y);
        }
        let l = midlevel_bce_loss(&mut tape, &logits, &targets).unwrap();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-10);

        let bad = Tensor::full(&[3, 4], 0.5);
        assert!(matches!(
            midlevel_bce_loss(&mut tape, &logits[..1], &[bad]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t1 = Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let params = vec![
            ("final".to_string(), Tensor::uniform(&[4, 3], 2.0, &mut rng)),
            ("mid".to_string(), Tensor::uniform(&[2, 3], 2.0, &mut rng)),
        ];
        let report = finite_diff_check(
            |t, v| {
                let ce = cross_entropy_loss(t, v[0], &[0, 2, 1, 1])?;
                let b = midlevel_bce_loss(t, &[v[1]], std::slice::from_ref(&t1))?;
                let b = t.scale(b, 0.7);
                t.add(ce, b)
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
