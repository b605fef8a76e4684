use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::{SceneSpec, Template};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier on `lr` for the attention-module parameter group.
    pub attention_lr_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Full-size training ran 100 epochs at batch 16.
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub w_final: f64,
    pub w_mid: f64,
    /// Weight of a 2D-branch loss; accepted and recorded, never used.
    pub w_2d: f64,
    /// Largest global L2 norm of a batch gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-2,
            attention_lr_factor: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 60,
            batch_size: 4,
            warmup_fraction: 0.05,
            w_final: 1.0,
            w_mid: 1.0,
            w_2d: 0.1,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, k: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} must be positive, got {v}")))
            }
        };
        pos(self.lr, "lr")?;
        pos(self.attention_lr_factor, "attention_lr_factor")?;
        for (v, k) in [
            (self.weight_decay, "weight_decay"),
            (self.w_final, "w_final"),
            (self.w_mid, "w_mid"),
            (self.w_2d, "w_2d"),
            (self.grad_clip, "grad_clip"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Size and seed of a corpus synthesized in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_scenes: 200,
            val_scenes: 50,
            seed: 1000,
        }
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub corpus: CorpusConfig,
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid value '{v}' for '{key}'"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_value(line, key, s.trim())).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.scene.classes != self.model.classes {
            return Err(Error::Config("scene and model class counts differ".into()));
        }
        Ok(())
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.scene;
        let c = &mut self.corpus;
        match key {
            "classes" => {
                m.classes = parse_value(line, key, v)?;
                s.classes = m.classes;
            }
            "levels" => m.levels = parse_value(line, key, v)?,
            "dims" => m.dims = parse_list(line, key, v)?,
            "d_h" => m.d_h = parse_value(line, key, v)?,
            "d_m" => m.d_m = parse_value(line, key, v)?,
            "isam_depth" => m.isam_depth = parse_value(line, key, v)?,
            "esam_depth" => m.esam_depth = parse_value(line, key, v)?,
            "heads" => m.heads = parse_value(line, key, v)?,
            "level_offset" => m.level_offset = parse_value(line, key, v)?,
            "base_voxel" => m.base_voxel = parse_value(line, key, v)?,
            "classifier" => m.classifier = v.parse()?,
            "affine" => m.affine = v.parse()?,
            "lr" => t.lr = parse_value(line, key, v)?,
            "attention_lr_factor" => t.attention_lr_factor = parse_value(line, key, v)?,
            "weight_decay" => t.weight_decay = parse_value(line, key, v)?,
            "momentum" => t.momentum = parse_value(line, key, v)?,
            "epochs" => t.epochs = parse_value(line, key, v)?,
            "batch_size" => t.batch_size = parse_value(line, key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse_value(line, key, v)?,
            "w_final" => t.w_final = parse_value(line, key, v)?,
            "w_mid" => t.w_mid = parse_value(line, key, v)?,
            "w_2d" => t.w_2d = parse_value(line, key, v)?,
            "grad_clip" => t.grad_clip = parse_value(line, key, v)?,
            "seed" => t.seed = parse_value(line, key, v)?,
            "templates" => {
                s.templates = v
                    .split(',')
                    .map(|x| Template::parse(x.trim()))
                    .collect::<Result<_>>()?
            }
            "objects" => s.objects = parse_value(line, key, v)?,
            "points_per_object" => s.points_per_object = parse_value(line, key, v)?,
            "noise" => s.noise = parse_value(line, key, v)?,
            "gap" => s.gap = parse_value(line, key, v)?,
            "room" => s.room = parse_value(line, key, v)?,
            "max_retries" => s.max_retries = parse_value(line, key, v)?,
            "train_scenes" => c.train_scenes = parse_value(line, key, v)?,
            "val_scenes" => c.val_scenes = parse_value(line, key, v)?,
            "corpus_seed" => c.seed = parse_value(line, key, v)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 'key = value', found '{body}'"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(first) = seen.insert(k.to_string(), line) {
                return Err(Error::Parse {
                    line,
                    msg: format!("key '{k}' already set on line {first}"),
                });
            }
            cfg.set(line, k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Context {
            context: path.display().to_string(),
            source: Box::new(e),
        })
    }

    /// Every key with its current value, in a fixed order; `parse` of the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t, s, c) = (&self.model, &self.train, &self.scene, &self.corpus);
        let join = |v: &[String]| v.join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("classes", m.classes.to_string());
        kv("levels", m.levels.to_string());
        kv("dims", join(&m.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>()));
        kv("d_h", m.d_h.to_string());
        kv("d_m", m.d_m.to_string());
        kv("isam_depth", m.isam_depth.to_string());
        kv("esam_depth", m.esam_depth.to_string());
        kv("heads", m.heads.to_string());
        kv("level_offset", m.level_offset.to_string());
        kv("base_voxel", m.base_voxel.to_string());
        kv("classifier", m.classifier.to_string());
        kv("affine", m.affine.to_string());
        kv("lr", t.lr.to_string());
        kv("attention_lr_factor", t.attention_lr_factor.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("warmup_fraction", t.warmup_fraction.to_string());
        kv("w_final", t.w_final.to_string());
        kv("w_mid", t.w_mid.to_string());
        kv("w_2d", t.w_2d.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("seed", t.seed.to_string());
        kv(
            "templates",
            join(&s.templates.iter().map(|x| x.as_str().to_string()).collect::<Vec<_>>()),
        );
        kv("objects", s.objects.to_string());
        kv("points_per_object", s.points_per_object.to_string());
        kv("noise", s.noise.to_string());
        kv("gap", s.gap.to_string());
        kv("room", s.room.to_string());
        kv("max_retries", s.max_retries.to_string());
        kv("train_scenes", c.train_scenes.to_string());
        kv("val_scenes", c.val_scenes.to_string());
        kv("corpus_seed", c.seed.to_string());
        out
    }
}
