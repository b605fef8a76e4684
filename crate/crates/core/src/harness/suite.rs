use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy_loss, midlevel_bce_loss, total_loss, LossWeights};
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, pool_features, unpool_features, shadow_labels, LabelMatrix};
use crate::model::{model_forward, prepare_input, AffineMode, Classifier, Model, ModelConfig};
use crate::nn::{
    multi_head_attention, AttentionParams, Binding, DecoderBlockParams, EncoderBlockParams,
    LinearParams, Mlp, ParamGroup, ParamStore,
};
use crate::semaffine::{
    adain_transform, mask_confidences, predict_affine_params, predict_masks, row_mean,
    semantic_affine_transform, AffineHeads, ClassMasks, ConfidenceMatrix,
};
use crate::tensor::{finite_diff_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};

pub const SUITE_MODULES: [&str; 6] = ["tensor", "nn", "hierarchy", "semaffine", "harness", "model"];
pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    params: Vec<(String, Tensor)>,
    f: Check,
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry reaches the
/// loss with a distinct weight.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(tape.shape(out), 1.0, &mut rng));
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

fn op_case(
    name: &str,
    params: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        params: named(params),
        f: Box::new(move |t, v| {
            let out = f(t, v)?;
            if t.value(out).is_scalar() {
                Ok(out)
            } else {
                probe(t, out, 99)
            }
        }),
    }
}

/// Checks every tensor of `store` through `f`, which sees them bound as
/// parameters.
fn store_case(
    name: &str,
    store: &ParamStore,
    f: impl Fn(&mut Tape, &Binding) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        params: store.named_tensors(),
        f: Box::new(move |t, v| {
            let bind = Binding::from_vars(v.to_vec());
            let out = f(t, &bind)?;
            if t.value(out).is_scalar() {
                Ok(out)
            } else {
                probe(t, out, 98)
            }
        }),
    }
}

fn tensor_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut r);
    let segment: Arc<[usize]> = Arc::from(vec![0, 2, 1, 0, 2, 2]);
    let gather: Arc<[usize]> = Arc::from(vec![1, 0, 2, 2, 1]);
    let mut targets = Tensor::zeros(&[4, 3]);
    for (i, v) in targets.data_mut().iter_mut().enumerate() {
        *v = (i % 3 == 0 || i % 5 == 1) as u8 as f64;
    }
    vec![
        op_case("matmul", vec![u(&[4, 3]), u(&[3, 5])], |t, v| t.matmul(v[0], v[1])),
        op_case("matmul_nt", vec![u(&[4, 3]), u(&[5, 3])], |t, v| t.matmul_nt(v[0], v[1])),
        op_case("transpose", vec![u(&[3, 4])], |t, v| t.transpose(v[0])),
        op_case("add", vec![u(&[3, 4]), u(&[3, 4])], |t, v| t.add(v[0], v[1])),
        op_case("sub", vec![u(&[3, 4]), u(&[3, 4])], |t, v| t.sub(v[0], v[1])),
        op_case("mul", vec![u(&[3, 4]), u(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        op_case("add_row", vec![u(&[3, 4]), u(&[4])], |t, v| t.add_row(v[0], v[1])),
        op_case("mul_row", vec![u(&[3, 4]), u(&[4])], |t, v| t.mul_row(v[0], v[1])),
        op_case("scale", vec![u(&[3, 4])], |t, v| Ok(t.scale(v[0], -1.7))),
        op_case("relu", vec![u(&[3, 4])], |t, v| Ok(t.relu(v[0]))),
        op_case("softplus", vec![u(&[3, 4])], |t, v| Ok(t.softplus(v[0]))),
        op_case("exp", vec![u(&[3, 4])], |t, v| Ok(t.exp(v[0]))),
        op_case("sigmoid", vec![u(&[3, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        op_case("softmax_rows", vec![u(&[3, 4])], |t, v| t.softmax(v[0], 1)),
        op_case("softmax_cols", vec![u(&[3, 4])], |t, v| t.softmax(v[0], 0)),
        op_case("channel_normalize", vec![u(&[3, 5])], |t, v| t.channel_normalize(v[0], 1e-5)),
        op_case("concat_cols", vec![u(&[3, 2]), u(&[3, 4])], |t, v| t.concat_cols(&[v[0], v[1]])),
        op_case("gather_rows", vec![u(&[3, 4])], move |t, v| t.gather_rows(v[0], gather.clone())),
        op_case("segment_mean", vec![u(&[6, 4])], move |t, v| t.segment_mean(v[0], segment.clone(), 3)),
        op_case("sum", vec![u(&[3, 4])], |t, v| Ok(t.sum(v[0]))),
        op_case("mean", vec![u(&[3, 4])], |t, v| t.mean(v[0])),
        op_case("cross_entropy", vec![u(&[4, 3])], |t, v| t.cross_entropy(v[0], &[2, 0, 1, 1])),
        op_case("bce_with_logits", vec![u(&[4, 3])], move |t, v| t.bce_with_logits(v[0], &targets)),
    ]
}

fn nn_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = ParamGroup::Backbone;
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let lin = LinearParams::new(&mut store, &mut rng, "lin", g, 4, 3);
    let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    cases.push(store_case("linear", &store, move |t, b| {
        let x = t.constant(x.clone());
        lin.forward(t, b, x)
    }));

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, &mut rng, "mlp", g, &[4, 6, 5, 3]);
    let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    cases.push(store_case("mlp", &store, move |t, b| {
        let x = t.constant(x.clone());
        mlp.forward(t, b, x)
    }));

    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, &mut rng, "attn", g, 8, 2).expect("valid heads");
    let q = Tensor::uniform(&[3, 8], 2.0, &mut rng);
    let kv = Tensor::uniform(&[5, 8], 2.0, &mut rng);
    cases.push(store_case("multi_head_attention", &store, move |t, b| {
        let (q, kv) = (t.constant(q.clone()), t.constant(kv.clone()));
        multi_head_attention(&attn, t, b, q, kv)
    }));

    let mut store = ParamStore::new();
    let enc = EncoderBlockParams::new(&mut store, &mut rng, "enc", g, 8, 2).expect("valid heads");
    let x = Tensor::uniform(&[4, 8], 2.0, &mut rng);
    cases.push(store_case("encoder_block", &store, move |t, b| {
        let x = t.constant(x.clone());
        enc.forward(t, b, x)
    }));

    let mut store = ParamStore::new();
    let dec = DecoderBlockParams::new(&mut store, &mut rng, "dec", g, 8, 2).expect("valid heads");
    let q = Tensor::uniform(&[3, 8], 2.0, &mut rng);
    let mem = Tensor::uniform(&[5, 8], 2.0, &mut rng);
    cases.push(store_case("decoder_block", &store, move |t, b| {
        let (q, mem) = (t.constant(q.clone()), t.constant(mem.clone()));
        dec.forward(t, b, q, mem)
    }));
    cases
}

fn random_coords(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(&[n, 3], data).expect("n×3")
}

fn hierarchy_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = Arc::new(build_hierarchy(&random_coords(24, &mut rng), 0.3, 3)?);
    let f0 = Tensor::uniform(&[h.len(0), 3], 1.0, &mut rng);
    let f1 = Tensor::uniform(&[h.len(1), 3], 1.0, &mut rng);
    let (ha, hb) = (h.clone(), h.clone());
    Ok(vec![
        op_case("pool_features", vec![f0.clone()], move |t, v| pool_features(t, &ha, 0, v[0])),
        op_case("unpool_features", vec![f1, f0], move |t, v| unpool_features(t, &hb, 0, v[0], v[1])),
    ])
}

fn semaffine_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, classes, d, dh) = (6, 3, 4, 5);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let head = Mlp::new(&mut store, &mut rng, "mask_head", ParamGroup::Attention, &[dh, dh, dh, d]);
    let h = Tensor::uniform(&[classes, dh], 1.0, &mut rng);
    let f = Tensor::uniform(&[n, d], 1.0, &mut rng);
    cases.push(store_case("mask_confidences", &store, move |t, b| {
        let h = t.constant(h.clone());
        let m = predict_masks(t, b, &head, h, classes)?;
        let f = t.constant(f.clone());
        Ok(mask_confidences(t, &m, f)?.probs)
    }));

    let mut store = ParamStore::new();
    let heads = AffineHeads::new(&mut store, &mut rng, "affine", dh, d);
    // move away from the identity start so every layer carries gradient
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let h = Tensor::uniform(&[classes, dh], 1.0, &mut rng);
    let hh = h.clone();
    let heads2 = heads.clone();
    cases.push(store_case("predict_affine_params", &store, move |t, b| {
        let h = t.constant(hh.clone());
        let p = predict_affine_params(t, b, &heads2, h)?;
        let both = t.concat_cols(&[p.scales, p.biases])?;
        Ok(both)
    }));

    let f = Tensor::uniform(&[n, d], 2.0, &mut rng);
    let logits = Tensor::uniform(&[n, classes], 2.0, &mut rng);
    let s = Tensor::uniform(&[classes, d], 1.0, &mut rng);
    let bias = Tensor::uniform(&[classes, d], 1.0, &mut rng);
    cases.push(op_case(
        "semantic_affine_transform",
        vec![f.clone(), logits, s.clone(), bias.clone()],
        |t, v| {
            let a = ConfidenceMatrix::from_logits(t, v[1])?;
            let p = crate::semaffine::AffineParams {
                scales: v[2],
                biases: v[3],
            };
            semantic_affine_transform(t, v[0], &a, &p)
        },
    ));
    cases.push(op_case("adain_transform", vec![f, s.clone(), bias.clone()], |t, v| {
        let s = row_mean(t, v[1])?;
        let b = row_mean(t, v[2])?;
        adain_transform(t, v[0], s, b)
    }));
    let m = Tensor::uniform(&[classes, d], 1.0, &mut rng);
    let g = Tensor::uniform(&[n, d], 1.0, &mut rng);
    cases.push(op_case("mask_logits", vec![g, m], |t, v| {
        let c = mask_confidences(t, &ClassMasks { masks: v[1] }, v[0])?;
        Ok(c.logits.expect("logits"))
    }));
    cases
}

fn harness_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let t1 = Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).expect("rows");
    let t2 = Tensor::from_rows(&[[1.0, 1.0, 0.0]]).expect("rows");
    vec![
        op_case("cross_entropy_loss", vec![Tensor::uniform(&[5, 3], 2.0, &mut rng)], |t, v| {
            cross_entropy_loss(t, v[0], &[0, 2, 1, 1, 0])
        }),
        op_case(
            "midlevel_bce_loss",
            vec![Tensor::uniform(&[2, 3], 2.0, &mut rng), Tensor::uniform(&[1, 3], 2.0, &mut rng)],
            move |t, v| midlevel_bce_loss(t, &[v[0], v[1]], &[t1.clone(), t2.clone()]),
        ),
    ]
}

/// Small configuration used by the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        classes: 3,
        levels: 3,
        dims: vec![4, 5, 6],
        d_h: 4,
        d_m: 4,
        isam_depth: 1,
        esam_depth: 3,
        heads: 2,
        level_offset: 1,
        base_voxel: 0.3,
        ..ModelConfig::default()
    }
}

/// `w_final·CE + w_mid·BCE` of the whole network on a 16-point scene, checked
/// against every parameter.
pub fn end_to_end_case(classifier: Classifier, affine: AffineMode) -> Result<(String, Vec<(String, Tensor)>, Check)> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut cfg = tiny_model_config();
    cfg.classifier = classifier;
    cfg.affine = affine;
    let coords = random_coords(16, &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| i % cfg.classes).collect();
    let input = prepare_input(&coords, &cfg)?;
    let shadow = shadow_labels(&input.hierarchy, &LabelMatrix::one_hot(&labels, cfg.classes)?)?;
    let targets: Vec<Tensor> = cfg.mid_levels().into_iter().map(|l| shadow.level(l).to_tensor()).collect();
    let mut model = Model::new(cfg, 17)?;
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let name = format!("end_to_end_{}_{}", classifier.as_str(), affine.as_str());
    let params = model.store.named_tensors();
    let w = LossWeights {
        final_ce: 1.0,
        mid_bce: 1.0,
    };
    let f: Check = Box::new(move |t, v| {
        let bind = Binding::from_vars(v.to_vec());
        let out = model_forward(t, &bind, &model, &input)?;
        Ok(total_loss(t, &out, &labels, &targets, w)?.total)
    });
    Ok((name, params, f))
}

fn model_cases() -> Result<Vec<Case>> {
    let variants = [
        (Classifier::Mask, AffineMode::Sa),
        (Classifier::Mask, AffineMode::AdaIn),
        (Classifier::Mask, AffineMode::Bn),
        (Classifier::Mask, AffineMode::None),
        (Classifier::Fc, AffineMode::Bn),
    ];
    variants
        .into_iter()
        .map(|(c, a)| {
            let (name, params, f) = end_to_end_case(c, a)?;
            Ok(Case { name, params, f })
        })
        .collect()
}

/// Runs the finite-difference checks of one module, or all of them. Each
/// operation is checked at `OP_TOL` and the whole network at
/// `END_TO_END_TOL` unless `tol` overrides both.
pub fn gradcheck_suite(module: Option<&str>, tol: Option<f64>) -> Result<Vec<SuiteEntry>> {
    if let Some(m) = module {
        if !SUITE_MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module '{m}', expected one of {}",
                SUITE_MODULES.join(", ")
            )));
        }
    }
    if let Some(t) = tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("tolerance must be positive, got {t}")));
        }
    }
    let mut out = Vec::new();
    for &m in SUITE_MODULES.iter().filter(|&&m| module.is_none_or(|x| x == m)) {
        let cases = match m {
            "tensor" => tensor_cases(),
            "nn" => nn_cases(),
            "hierarchy" => hierarchy_cases()?,
            "semaffine" => semaffine_cases(),
            "harness" => harness_cases(),
            _ => model_cases()?,
        };
        let cfg = GradCheckConfig {
            tol: tol.unwrap_or(if m == "model" { END_TO_END_TOL } else { OP_TOL }),
            ..GradCheckConfig::default()
        };
        for c in cases {
            let report = finite_diff_check(&c.f, &c.params, &cfg)?;
            out.push(SuiteEntry {
                module: m,
                name: c.name,
                report,
            });
        }
    }
    Ok(out)
}
