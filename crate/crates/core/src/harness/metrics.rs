use std::fmt;

use crate::error::{Error, Result};

/// `counts[gt][pred]` pooled over any number of scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::dim("confusion", &[preds.len()], &[labels.len()]));
        }
        let n = self.classes;
        if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n) {
            return Err(Error::Validation(format!("class id {bad} out of range for {n} classes")));
        }
        for (&p, &g) in preds.iter().zip(labels) {
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.classes;
        let mut iou = Vec::with_capacity(n);
        let mut correct = 0;
        let mut total = 0;
        for k in 0..n {
            let tp = self.get(k, k);
            let gt: u64 = (0..n).map(|p| self.get(k, p)).sum();
            let pred: u64 = (0..n).map(|g| self.get(g, k)).sum();
            let union = gt + pred - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            correct += tp;
            total += gt;
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Metrics {
            iou,
            miou,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mid_bce: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes absent from both predictions and ground truth.
    pub iou: Vec<Option<f64>>,
    /// Mean over the classes that have an IoU.
    pub miou: f64,
    pub accuracy: f64,
    /// Mean mid-level BCE per supervised level, coarsest first.
    pub mid_bce: Vec<f64>,
}

pub fn compute_miou(preds: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    let mut c = Confusion::new(classes);
    c.add(preds, labels)?;
    Ok(c.metrics())
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mIoU      {:.4}", self.miou)?;
        writeln!(f, "accuracy  {:.4}", self.accuracy)?;
        for (k, v) in self.iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(f, "class {k:<3} IoU {v:.4}")?,
                None => writeln!(f, "class {k:<3} absent")?,
            }
        }
        for (i, b) in self.mid_bce.iter().enumerate() {
            writeln!(f, "mid level {i} BCE {b:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_example() {
        let m = compute_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(m.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.75);
    }

    #[test]
    fn perfect_and_swapped() {
        let m = compute_miou(&[0, 1, 2, 2], &[0, 1, 2, 2], 4).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.iou[3], None);
        let m = compute_miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn absent_class_does_not_change_miou() {
        let p = [0, 2, 1, 1, 0];
        let g = [0, 1, 1, 2, 0];
        let a = compute_miou(&p, &g, 3).unwrap();
        let b = compute_miou(&p, &g, 5).unwrap();
        assert_eq!(a.miou, b.miou);
    }

    #[test]
    fn pooled_counts_differ_from_scene_average() {
        let mut c = Confusion::new(3);
        c.add(&[0, 0, 1], &[0, 1, 1]).unwrap();
        c.add(&[2, 2, 2, 0], &[2, 2, 2, 2]).unwrap();
        let pooled = c.metrics();
        // class 0: tp 1, gt 1, pred 3 → 1/3; class 1: tp 1, gt 2, pred 1 → 1/2; class 2: 3/4
        assert!((pooled.miou - (1.0 / 3.0 + 0.5 + 0.75) / 3.0).abs() < 1e-15);
        let a = compute_miou(&[0, 0, 1], &[0, 1, 1], 3).unwrap().miou;
        let b = compute_miou(&[2, 2, 2, 0], &[2, 2, 2, 2], 3).unwrap().miou;
        assert!((pooled.miou - (a + b) / 2.0).abs() > 1e-3);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_miou(&[0], &[0, 1], 2).is_err());
        assert!(compute_miou(&[3], &[0], 2).is_err());
    }
}
