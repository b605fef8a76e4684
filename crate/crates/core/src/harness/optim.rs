use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Number of warmup steps out of `total`.
pub fn warmup_steps(cfg: &TrainConfig, total: usize) -> usize {
    if cfg.warmup_fraction <= 0.0 {
        return 0;
    }
    ((cfg.warmup_fraction * total as f64).ceil() as usize).clamp(1, total.max(1))
}

/// Linear ramp from 0 to 1 over the warmup steps, then squared decay from 1
/// at the end of warmup to 0 at `total`.
pub fn schedule_factor(cfg: &TrainConfig, t: usize, total: usize) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    let w = warmup_steps(cfg, total);
    if t < w {
        return t as f64 / w as f64;
    }
    let frac = (t - w) as f64 / (total - w) as f64;
    (1.0 - frac) * (1.0 - frac)
}

pub fn group_factor(cfg: &TrainConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Backbone => 1.0,
        ParamGroup::Attention => cfg.attention_lr_factor,
    }
}

pub fn learning_rate(cfg: &TrainConfig, group: ParamGroup, t: usize, total: usize) -> f64 {
    cfg.lr * group_factor(cfg, group) * schedule_factor(cfg, t, total)
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before rescaling. `max_norm = 0` leaves them untouched.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr(t)·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
    /// Steps taken so far.
    pub step: usize,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Sgd {
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    /// One update at step `self.step` of `total`; returns the backbone
    /// learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig, total: usize) -> Result<f64> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", cfg.lr)));
        }
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                self.velocity.len(),
                store.len()
            )));
        }
        let t = self.step;
        for ((p, g), v) in store.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if g.shape() != p.value.shape() {
                return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
            }
            let lr = learning_rate(cfg, p.group, t, total);
            for ((pv, gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(learning_rate(cfg, ParamGroup::Backbone, t, total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> TrainConfig {
        TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plain_step_moves_by_lr_times_grad() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::vector(&[1.0, -2.0]));
        let mut opt = Sgd::new(&store);
        let cfg = plain();
        let lr = opt.step(&mut store, &[Tensor::vector(&[0.5, 0.25])], &cfg, 10).unwrap();
        assert_eq!(lr, cfg.lr);
        assert_eq!(store.iter().next().unwrap().value.data(), &[1.0 - cfg.lr * 0.5, -2.0 - cfg.lr * 0.25]);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        let total = 200;
        let w = warmup_steps(&cfg, total);
        assert_eq!(w, 10);
        assert_eq!(learning_rate(&cfg, ParamGroup::Backbone, 0, total), 0.0);
        assert_eq!(learning_rate(&cfg, ParamGroup::Backbone, w, total), cfg.lr);
        assert_eq!(
            learning_rate(&cfg, ParamGroup::Attention, w, total),
            cfg.lr * cfg.attention_lr_factor
        );
        assert_eq!(learning_rate(&cfg, ParamGroup::Backbone, total, total), 0.0);
        let peak = (0..=total)
            .map(|t| learning_rate(&cfg, ParamGroup::Backbone, t, total))
            .fold(0.0, f64::max);
        assert_eq!(peak, cfg.lr);
    }

    #[test]
    fn step_at_end_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::vector(&[3.0]));
        let mut opt = Sgd::new(&store);
        opt.step = 5;
        opt.step(&mut store, &[Tensor::vector(&[7.0])], &plain(), 5).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data(), &[3.0]);
    }

    #[test]
    fn attention_group_steps_a_tenth() {
        let mut store = ParamStore::new();
        store.add("b", ParamGroup::Backbone, Tensor::vector(&[0.0]));
        store.add("a", ParamGroup::Attention, Tensor::vector(&[0.0]));
        let mut opt = Sgd::new(&store);
        opt.step = 50;
        let g = Tensor::vector(&[1.0]);
        opt.step(&mut store, &[g.clone(), g], &TrainConfig::default(), 100).unwrap();
        let v: Vec<f64> = store.iter().map(|p| p.value.data()[0]).collect();
        assert!((v[1] / v[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::vector(&[3.0]), Tensor::vector(&[0.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 0.0), 5.0);
        assert_eq!(g[1].data(), &[0.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::vector(&[0.0, 0.0]));
        let mut opt = Sgd::new(&store);
        let cfg = TrainConfig::default();
        assert!(opt.step(&mut store, &[], &cfg, 10).is_err());
        assert!(opt.step(&mut store, &[Tensor::vector(&[1.0])], &cfg, 10).is_err());
        let bad = TrainConfig { lr: 0.0, ..cfg };
        assert!(matches!(
            opt.step(&mut store, &[Tensor::vector(&[1.0, 1.0])], &bad, 10),
            Err(Error::Config(_))
        ));
    }
}
