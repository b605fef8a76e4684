//! The segmentation network: a voxel-hierarchy encoder-decoder whose top
//! level is refined by self-attention and whose mid-level decoder features
//! are transformed with parameters decoded from learnable class queries.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{AffineMode, Classifier, ModelConfig};

use crate::error::{Error, Result, ResultExt};
use crate::hierarchy::{build_hierarchy, pool_features, unpool_features, Hierarchy};
use crate::nn::{
    Binding, DecoderBlockParams, EncoderBlockParams, LinearParams, Mlp, ParamGroup, ParamId,
    ParamStore,
};
use crate::semaffine::{
    adain_transform, mask_confidences, predict_affine_params, predict_masks, row_mean,
    semantic_affine_transform, AffineHeads, AffineParams, ClassMasks, ClassQueries,
    ConfidenceMatrix,
};
use crate::tensor::{Tape, Tensor, Var};

/// Width of the per-point input features.
pub const INPUT_DIM: usize = 6;

/// Geometry of one scene, computed once and reused across epochs.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub hierarchy: Hierarchy,
    /// `[n_0 × 6]`: horizontally centered coordinates, height, and offset
    /// from the level-1 centroid in base-voxel units.
    pub features: Tensor,
    /// Per level, coordinates with the same horizontal centering.
    pub centered: Vec<Tensor>,
}

pub fn prepare_input(coords: &Tensor, cfg: &ModelConfig) -> Result<SceneInput> {
    let hierarchy = build_hierarchy(coords, cfg.base_voxel, cfg.levels)?;
    let n = coords.rows();
    let (mut cx, mut cy) = (0.0, 0.0);
    for j in 0..n {
        cx += coords.at(j, 0);
        cy += coords.at(j, 1);
    }
    let (cx, cy) = (cx / n as f64, cy / n as f64);
    let center = |t: &Tensor| {
        let mut t = t.clone();
        for row in t.data_mut().chunks_mut(3) {
            row[0] -= cx;
            row[1] -= cy;
        }
        t
    };
    let centered: Vec<Tensor> = (0..cfg.levels).map(|l| center(hierarchy.coords(l))).collect();

    let parent = hierarchy.parents(0)?;
    let up = hierarchy.coords(1);
    let mut features = Vec::with_capacity(n * INPUT_DIM);
    for j in 0..n {
        features.extend_from_slice(centered[0].row(j));
        let p = coords.row(j);
        let c = up.row(parent[j]);
        features.extend((0..3).map(|k| (p[k] - c[k]) / cfg.base_voxel));
    }
    Ok(SceneInput {
        hierarchy,
        features: Tensor::new(&[n, INPUT_DIM], features)?,
        centered,
    })
}

/// Parameters of one supervised mid-level decoder stage.
#[derive(Clone, Debug)]
pub struct StageParams {
    pub level: usize,
    pub mask_proj: LinearParams,
    pub fc: LinearParams,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub affine: AffineHeads,
    pub up: LinearParams,
    pub refine: LinearParams,
}

/// Every parameter of the network, whatever the configured variant, so that
/// variants built from one seed start from identical weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Vec<Mlp>,
    pub top_proj: LinearParams,
    pub pos_embed: Mlp,
    pub isam: Vec<EncoderBlockParams>,
    pub queries: ClassQueries,
    pub esam: Vec<DecoderBlockParams>,
    pub mask_head: Mlp,
    pub dec_in: LinearParams,
    pub stages: Vec<StageParams>,
    pub final_mask_proj: LinearParams,
    pub final_fc: LinearParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (bb, at) = (ParamGroup::Backbone, ParamGroup::Attention);
        let d = &c.dims;

        let encoder = (0..c.levels)
            .map(|l| {
                let input = if l == 0 { INPUT_DIM } else { d[l - 1] + 3 };
                Mlp::new(&mut store, &mut rng, &format!("enc{l}"), bb, &[input, d[l], d[l]])
            })
            .collect();
        let top = c.levels - 1;
        let top_proj = LinearParams::new(&mut store, &mut rng, "top_proj", bb, d[top], c.d_h);

        let pos_embed = Mlp::new(&mut store, &mut rng, "isam.pos", at, &[3, c.d_h, c.d_h, c.d_h]);
        let isam = (0..c.isam_depth)
            .map(|k| {
                EncoderBlockParams::new(&mut store, &mut rng, &format!("isam.block{k}"), at, c.d_h, c.heads)
            })
            .collect::<Result<_>>()?;
        let queries = ClassQueries::new(&mut store, &mut rng, "esam.queries", c.classes, c.d_h);
        let esam = (0..c.esam_depth)
            .map(|k| {
                DecoderBlockParams::new(&mut store, &mut rng, &format!("esam.block{k}"), at, c.d_h, c.heads)
            })
            .collect::<Result<_>>()?;
        let mask_head = Mlp::new(
            &mut store,
            &mut rng,
            "esam.mask_head",
            at,
            &[c.d_h, c.d_h, c.d_h, c.d_m],
        );

        let dec_in = LinearParams::new(&mut store, &mut rng, "dec.in", bb, c.d_h, d[top]);
        let stages = c
            .mid_levels()
            .into_iter()
            .map(|l| {
                let p = |s: &str| format!("dec{l}.{s}");
                StageParams {
                    level: l,
                    mask_proj: LinearParams::new(&mut store, &mut rng, &p("mask_proj"), bb, d[l], c.d_m),
                    fc: LinearParams::new(&mut store, &mut rng, &p("fc"), bb, d[l], c.classes),
                    norm_gain: store.add(p("norm.gain"), bb, Tensor::full(&[d[l]], 1.0)),
                    norm_bias: store.add(p("norm.bias"), bb, Tensor::zeros(&[d[l]])),
                    affine: AffineHeads::new(&mut store, &mut rng, &format!("esam.affine{l}"), c.d_h, d[l]),
                    up: LinearParams::new(&mut store, &mut rng, &p("up"), bb, d[l], d[l - 1]),
                    refine: LinearParams::new(&mut store, &mut rng, &p("refine"), bb, d[l - 1], d[l - 1]),
                }
            })
            .collect();
        let final_mask_proj = LinearParams::new(&mut store, &mut rng, "head.mask_proj", bb, d[0], c.d_m);
        let final_fc = LinearParams::new(&mut store, &mut rng, "head.fc", bb, d[0], c.classes);

        Ok(Model {
            config,
            store,
            encoder,
            top_proj,
            pos_embed,
            isam,
            queries,
            esam,
            mask_head,
            dec_in,
            stages,
            final_mask_proj,
            final_fc,
        })
    }

    /// Same weights under a different classifier or affine variant.
    pub fn with_variant(&self, classifier: Classifier, affine: AffineMode) -> Result<Self> {
        let mut m = self.clone();
        m.config.classifier = classifier;
        m.config.affine = affine;
        m.config.validate()?;
        Ok(m)
    }
}

/// Mid-level classification at one hierarchy level.
#[derive(Clone, Copy, Debug)]
pub struct MidLevelOutput {
    pub level: usize,
    pub confidences: ConfidenceMatrix,
    /// Decoder features entering the stage.
    pub features: Var,
    /// Features after the affine stage.
    pub transformed: Var,
    /// Class affine parameters, when the variant predicts them.
    pub affine: Option<AffineParams>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub final_logits: Var,
    /// One entry per supervised level, coarsest first.
    pub mid: Vec<MidLevelOutput>,
    pub masks: Option<ClassMasks>,
    /// Decoder states of every class-query layer.
    pub esam_layers: Vec<Var>,
    pub encoder_features: Vec<Var>,
    pub isam_output: Var,
}

impl ForwardOutput {
    pub fn mid_logits(&self) -> Vec<Var> {
        self.mid
            .iter()
            .map(|m| m.confidences.logits.expect("classifier logits"))
            .collect()
    }
}

/// Per-level encoder features `e_0 … e_{L−1}`, each `relu(MLP(·))` of the
/// previous level pooled, concatenated with the level's coordinates.
pub fn backbone_encode(tape: &mut Tape, bind: &Binding, model: &Model, input: &SceneInput) -> Result<Vec<Var>> {
    let h = &input.hierarchy;
    let mut feats = Vec::with_capacity(model.config.levels);
    let x = tape.constant(input.features.clone());
    let e0 = model.encoder[0].forward(tape, bind, x).context(|| "encoder level 0".into())?;
    feats.push(tape.relu(e0));
    for l in 1..model.config.levels {
        let pooled = pool_features(tape, h, l - 1, feats[l - 1])?;
        let pos = tape.constant(input.centered[l].clone());
        let x = tape.concat_cols(&[pooled, pos])?;
        let e = model.encoder[l]
            .forward(tape, bind, x)
            .context(|| format!("encoder level {l}"))?;
        feats.push(tape.relu(e));
    }
    Ok(feats)
}

/// Encoder blocks over the top-level tokens plus a positional embedding of
/// their coordinates.
pub fn isam_forward(tape: &mut Tape, bind: &Binding, model: &Model, f0: Var, pos: &Tensor) -> Result<Var> {
    if tape.value(f0).rows() == 0 {
        return Err(Error::Contract("self-attention over zero tokens".into()));
    }
    let p = tape.constant(pos.clone());
    let pe = model.pos_embed.forward(tape, bind, p)?;
    let mut x = tape.add(f0, pe)?;
    for (k, block) in model.isam.iter().enumerate() {
        x = block.forward(tape, bind, x).context(|| format!("isam block {k}"))?;
    }
    Ok(x)
}

/// Decoder states after every class-query block; the last is the final one.
pub fn esam_forward(tape: &mut Tape, bind: &Binding, model: &Model, memory: Var) -> Result<Vec<Var>> {
    let mut h = model.queries.var(bind);
    let mut layers = Vec::with_capacity(model.esam.len());
    for (k, block) in model.esam.iter().enumerate() {
        h = block.forward(tape, bind, h, memory).context(|| format!("esam block {k}"))?;
        layers.push(h);
    }
    Ok(layers)
}

fn classify(
    tape: &mut Tape,
    bind: &Binding,
    cfg: &ModelConfig,
    masks: Option<&ClassMasks>,
    mask_proj: &LinearParams,
    fc: &LinearParams,
    g: Var,
) -> Result<ConfidenceMatrix> {
    match cfg.classifier {
        Classifier::Mask => {
            let z = mask_proj.forward(tape, bind, g)?;
            mask_confidences(tape, masks.expect("masks exist in mask mode"), z)
        }
        Classifier::Fc => {
            let logits = fc.forward(tape, bind, g)?;
            ConfidenceMatrix::from_logits(tape, logits)
        }
    }
}

pub fn model_forward(tape: &mut Tape, bind: &Binding, model: &Model, input: &SceneInput) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let h = &input.hierarchy;
    if h.num_levels() != cfg.levels {
        return Err(Error::Contract(format!(
            "input has {} levels, model expects {}",
            h.num_levels(),
            cfg.levels
        )));
    }
    let top = cfg.levels - 1;
    let enc = backbone_encode(tape, bind, model, input)?;
    let f0 = model.top_proj.forward(tape, bind, enc[top])?;
    let fbar = isam_forward(tape, bind, model, f0, &input.centered[top])?;

    let (esam_layers, masks) = if cfg.uses_esam() {
        let layers = esam_forward(tape, bind, model, fbar)?;
        let last = *layers.last().expect("validated depth");
        let masks = if cfg.classifier == Classifier::Mask {
            Some(predict_masks(tape, bind, &model.mask_head, last, cfg.classes).context(|| "mask head".into())?)
        } else {
            None
        };
        (layers, masks)
    } else {
        (Vec::new(), None)
    };

    let start = model.dec_in.forward(tape, bind, fbar)?;
    let mut g = tape.add(start, enc[top])?;
    let mut mid = Vec::with_capacity(model.stages.len());
    for stage in &model.stages {
        let l = stage.level;
        let ctx = |op: &str| format!("decoder level {l}: {op}");
        let conf = classify(tape, bind, cfg, masks.as_ref(), &stage.mask_proj, &stage.fc, g)
            .context(|| ctx("classify"))?;
        let (transformed, affine) = match cfg.affine {
            AffineMode::None => (g, None),
            AffineMode::Bn => {
                let (s, b) = (bind.var(stage.norm_gain), bind.var(stage.norm_bias));
                (adain_transform(tape, g, s, b).context(|| ctx("normalize"))?, None)
            }
            AffineMode::AdaIn | AffineMode::Sa => {
                let hu = esam_layers[cfg.esam_layer_for(l)];
                let p = predict_affine_params(tape, bind, &stage.affine, hu).context(|| ctx("affine heads"))?;
                let y = if cfg.affine == AffineMode::Sa {
                    semantic_affine_transform(tape, g, &conf, &p)
                } else {
                    let s = row_mean(tape, p.scales)?;
                    let b = row_mean(tape, p.biases)?;
                    adain_transform(tape, g, s, b)
                };
                (y.context(|| ctx("affine transform"))?, Some(p))
            }
        };
        mid.push(MidLevelOutput {
            level: l,
            confidences: conf,
            features: g,
            transformed,
            affine,
        });
        let up = stage.up.forward(tape, bind, transformed)?;
        let merged = unpool_features(tape, h, l - 1, up, enc[l - 1]).context(|| ctx("unpool"))?;
        let refined = stage.refine.forward(tape, bind, merged)?;
        g = tape.relu(refined);
    }

    let fin = classify(tape, bind, cfg, masks.as_ref(), &model.final_mask_proj, &model.final_fc, g)
        .context(|| "final classifier".into())?;
    Ok(ForwardOutput {
        final_logits: fin.logits.expect("classifier logits"),
        mid,
        masks,
        esam_layers,
        encoder_features: enc,
        isam_output: fbar,
    })
}

/// Forward pass without gradients; returns the final logits.
pub fn infer(model: &Model, input: &SceneInput) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, false);
    let out = model_forward(&mut tape, &bind, model, input)?;
    Ok(tape.value(out.final_logits).clone())
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
