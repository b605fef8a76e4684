use std::fmt;
use std::str::FromStr;

use super::{synth_corpus, train, Corpus, RunConfig};
use crate::error::{Error, Result};
use crate::model::{AffineMode, Classifier};

/// A named classifier/affine combination of the ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub classifier: Classifier,
    pub affine: AffineMode,
}

pub const VARIANTS: [Variant; 5] = [
    Variant {
        name: "fc",
        classifier: Classifier::Fc,
        affine: AffineMode::Bn,
    },
    Variant {
        name: "mask",
        classifier: Classifier::Mask,
        affine: AffineMode::None,
    },
    Variant {
        name: "bn",
        classifier: Classifier::Mask,
        affine: AffineMode::Bn,
    },
    Variant {
        name: "adain",
        classifier: Classifier::Mask,
        affine: AffineMode::AdaIn,
    },
    Variant {
        name: "sa",
        classifier: Classifier::Mask,
        affine: AffineMode::Sa,
    },
];

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VARIANTS
            .iter()
            .find(|v| v.name == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}', expected fc, mask, bn, adain or sa")))
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let vs: Vec<Variant> = list
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if vs.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(vs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub variant: &'static str,
    pub baseline: &'static str,
    /// Per seed, variant mIoU minus baseline mIoU.
    pub improvements: Vec<f64>,
    pub wins: usize,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl AblationReport {
    pub fn miou(&self, variant: &str, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.variant.name == variant && r.seed == seed)
            .map(|r| r.miou)
    }

    /// Seed-paired comparison of `variant` against `baseline`.
    pub fn compare(&self, variant: &str, baseline: &str) -> Result<Comparison> {
        let find = |name: &str| {
            VARIANTS
                .iter()
                .find(|v| v.name == name)
                .map(|v| v.name)
                .ok_or_else(|| Error::Config(format!("unknown variant '{name}'")))
        };
        let (v, b) = (find(variant)?, find(baseline)?);
        let mut improvements = Vec::with_capacity(self.seeds.len());
        for &s in &self.seeds {
            match (self.miou(v, s), self.miou(b, s)) {
                (Some(x), Some(y)) => improvements.push(x - y),
                _ => return Err(Error::Contract(format!("seed {s} lacks a {v} or {b} run"))),
            }
        }
        Ok(Comparison {
            variant: v,
            baseline: b,
            wins: improvements.iter().filter(|&&d| d > 0.0).count(),
            median: median(&improvements),
            improvements,
        })
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.variant.name) {
                names.push(r.variant.name);
            }
        }
        write!(f, "seed")?;
        for n in &names {
            write!(f, "\t{n}")?;
        }
        writeln!(f)?;
        for &s in &self.seeds {
            write!(f, "{s}")?;
            for n in &names {
                match self.miou(n, s) {
                    Some(m) => write!(f, "\t{m:.4}")?,
                    None => write!(f, "\t-")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "median")?;
        for n in &names {
            let v: Vec<f64> = self.seeds.iter().filter_map(|&s| self.miou(n, s)).collect();
            write!(f, "\t{:.4}", median(&v))?;
        }
        writeln!(f)?;
        Ok(())
    }
}

/// Trains every variant once per seed on the same corpus. Seed `k` uses
/// training seed `cfg.train.seed + k`, so variants of one seed share their
/// initialization and scene order.
pub fn ablate_on(
    cfg: &RunConfig,
    corpus: &Corpus,
    variants: &[Variant],
    seeds: usize,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| cfg.train.seed + k).collect();
    let mut runs = Vec::with_capacity(seeds * variants.len());
    for &seed in &seed_list {
        for &v in variants {
            let mut c = cfg.clone();
            c.train.seed = seed;
            c.model.classifier = v.classifier;
            c.model.affine = v.affine;
            let out = train(&c, corpus, |_| {})?;
            let run = AblationRun {
                variant: v,
                seed,
                miou: out.metrics.miou,
                accuracy: out.metrics.accuracy,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport {
        seeds: seed_list,
        runs,
    })
}

/// Synthesizes the configured corpus, then runs [`ablate_on`].
pub fn ablate(
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: usize,
    progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    cfg.validate()?;
    let corpus = synth_corpus(&cfg.scene, &cfg.corpus, &cfg.model)?;
    ablate_on(cfg, &corpus, variants, seeds, progress)
}
