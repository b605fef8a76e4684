use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_global_norm, total_loss, Checkpoint, Confusion, CorpusConfig, LossWeights, Metrics, RunConfig, Sgd};
use crate::error::{Error, Result, ResultExt};
use crate::hierarchy::{shadow_labels, LabelMatrix};
use crate::model::{argmax_rows, model_forward, prepare_input, Model, ModelConfig, SceneInput};
use crate::scene::{generate_scene, read_manifest, read_scene, LabeledCloud, SceneSpec, Split};
use crate::tensor::{Tape, Tensor};

/// A scene with its hierarchy, input features and per-level targets.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub input: SceneInput,
    pub labels: Vec<usize>,
    /// Multi-hot targets of each supervised level, in decoder order.
    pub shadow: Vec<Tensor>,
}

pub fn prepare_scene(cloud: &LabeledCloud, cfg: &ModelConfig) -> Result<PreparedScene> {
    if cloud.classes != cfg.classes {
        return Err(Error::Validation(format!(
            "scene has {} classes, model expects {}",
            cloud.classes, cfg.classes
        )));
    }
    let input = prepare_input(&cloud.coords, cfg)?;
    let onehot = LabelMatrix::one_hot(&cloud.labels, cfg.classes)?;
    let shadow = shadow_labels(&input.hierarchy, &onehot)?;
    Ok(PreparedScene {
        shadow: cfg.mid_levels().into_iter().map(|l| shadow.level(l).to_tensor()).collect(),
        labels: cloud.labels.clone(),
        input,
    })
}

/// Train and validation scenes ready for the model.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

impl Corpus {
    /// Scenes scored after each epoch: the validation split, or the training
    /// split when there is none.
    pub fn eval_set(&self) -> &[PreparedScene] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Reads every scene named in a manifest.
pub fn load_corpus(manifest: &Path, cfg: &ModelConfig) -> Result<Corpus> {
    let entries = read_manifest(manifest)?;
    let mut corpus = Corpus::default();
    for e in entries {
        let (cloud, _) = read_scene(&e.path)?;
        let scene = prepare_scene(&cloud, cfg).context(|| e.path.display().to_string())?;
        match e.split {
            Split::Train => corpus.train.push(scene),
            Split::Val => corpus.val.push(scene),
        }
    }
    Ok(corpus)
}

/// Synthesizes a corpus in memory: training scenes use seeds
/// `seed, seed+1, …`, validation scenes continue after them.
pub fn synth_corpus(spec: &SceneSpec, corpus: &CorpusConfig, cfg: &ModelConfig) -> Result<Corpus> {
    let make = |offset: usize, count: usize| -> Result<Vec<PreparedScene>> {
        (0..count)
            .map(|i| {
                let seed = corpus.seed + (offset + i) as u64;
                let cloud = generate_scene(spec, seed)?;
                prepare_scene(&cloud, cfg).context(|| format!("scene seed {seed}"))
            })
            .collect()
    };
    Ok(Corpus {
        train: make(0, corpus.train_scenes)?,
        val: make(corpus.train_scenes, corpus.val_scenes)?,
    })
}

/// Pooled confusion counts over all scenes plus the mean mid-level BCE of
/// each supervised level.
pub fn evaluate(model: &Model, scenes: &[PreparedScene]) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::Contract("evaluation over zero scenes".into()));
    }
    let mut conf = Confusion::new(model.config.classes);
    let levels = model.config.mid_levels().len();
    let mut bce = vec![0.0; levels];
    for s in scenes {
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape, false);
        let out = model_forward(&mut tape, &bind, model, &s.input)?;
        conf.add(&argmax_rows(tape.value(out.final_logits)), &s.labels)?;
        for (acc, (&l, t)) in bce.iter_mut().zip(out.mid_logits().iter().zip(&s.shadow)) {
            let b = tape.bce_with_logits(l, t)?;
            *acc += tape.value(b).item()?;
        }
    }
    let mut m = conf.metrics();
    m.mid_bce = bce.into_iter().map(|b| b / scenes.len() as f64).collect();
    Ok(m)
}

/// Mean final cross entropy over the scenes.
pub fn mean_cross_entropy(model: &Model, scenes: &[PreparedScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Contract("cross entropy over zero scenes".into()));
    }
    let mut sum = 0.0;
    for s in scenes {
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape, false);
        let out = model_forward(&mut tape, &bind, model, &s.input)?;
        let ce = tape.cross_entropy(out.final_logits, &s.labels)?;
        sum += tape.value(ce).item()?;
    }
    Ok(sum / scenes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's scenes.
    pub train_loss: f64,
    pub val_miou: f64,
    /// Backbone learning rate of the epoch's first step.
    pub lr: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.17e}\t{:.17e}\t{:.17e}",
            self.epoch, self.train_loss, self.val_miou, self.lr
        )
    }
}

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{}", r.to_line()).unwrap();
    }
    s
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

pub fn steps_per_epoch(train_scenes: usize, batch_size: usize) -> usize {
    train_scenes.div_ceil(batch_size)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Sgd,
    pub records: Vec<EpochRecord>,
    /// Metrics of the final model on the evaluation set.
    pub metrics: Metrics,
}

/// Trains from a fresh initialization. Gradients of a batch are averaged and
/// norm-clipped before one optimizer step; the scene order is reshuffled every
/// epoch from the run seed.
pub fn train(cfg: &RunConfig, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Contract("no training scenes".into()));
    }
    let tc = &cfg.train;
    let mut model = Model::new(cfg.model.clone(), tc.seed)?;
    let mut opt = Sgd::new(&model.store);
    let weights = LossWeights {
        final_ce: tc.w_final,
        mid_bce: tc.w_mid,
    };
    let per_epoch = steps_per_epoch(corpus.train.len(), tc.batch_size);
    let total = per_epoch * tc.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut records = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut first_lr = None;
        for batch in order.chunks(tc.batch_size) {
            let mut acc: Vec<Tensor> = model.store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            for &i in batch {
                let s = &corpus.train[i];
                let mut tape = Tape::new();
                let bind = model.store.bind(&mut tape, true);
                let out = model_forward(&mut tape, &bind, &model, &s.input)?;
                let terms = total_loss(&mut tape, &out, &s.labels, &s.shadow, weights)?;
                let loss = tape.value(terms.total).item()?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {loss} at epoch {epoch}, step {}",
                        opt.step
                    )));
                }
                loss_sum += loss;
                let grads = tape.backward(terms.total)?;
                for (a, &v) in acc.iter_mut().zip(bind.vars()) {
                    if let Some(g) = grads.get(v) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            clip_global_norm(&mut acc, tc.grad_clip);
            let lr = opt.step(&mut model.store, &acc, tc, total)?;
            first_lr.get_or_insert(lr);
        }
        let metrics = evaluate(&model, corpus.eval_set())?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / corpus.train.len() as f64,
            val_miou: metrics.miou,
            lr: first_lr.unwrap_or(0.0),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    let metrics = evaluate(&model, corpus.eval_set())?;
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        records,
        metrics,
    })
}

/// Trains on the scenes of `manifest` and writes the checkpoint to `out`
/// and the per-epoch log next to it.
pub fn train_run(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(manifest, &cfg.model).context(|| manifest.display().to_string())?;
    let log = log_path(out);
    fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
    let mut text = String::new();
    let mut io_err = None;
    let outcome = train(cfg, &corpus, |r| {
        writeln!(text, "{}", r.to_line()).unwrap();
        if io_err.is_none() {
            io_err = fs::write(&log, &text).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log, e));
    }
    Checkpoint::from_state(cfg, &outcome.model, &outcome.optimizer).save(out)?;
    Ok(outcome)
}

/// Dataset-level metrics of a saved model over the manifest's validation
/// scenes, or all of its scenes when it has no validation split.
pub fn eval_run(checkpoint: &Path, manifest: &Path) -> Result<Metrics> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, _) = ckpt.restore()?;
    let corpus = load_corpus(manifest, &model.config).context(|| manifest.display().to_string())?;
    if corpus.train.is_empty() && corpus.val.is_empty() {
        return Err(Error::Contract(format!("{} lists no scenes", manifest.display())));
    }
    evaluate(&model, corpus.eval_set())
}
