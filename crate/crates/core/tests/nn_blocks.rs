mod common;

use common::{mat, max_diff};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semaffine_core::nn::{
    AttentionParams, Binding, DecoderBlockParams, EncoderBlockParams, ParamGroup, ParamStore,
};
use semaffine_core::tensor::{finite_diff_check, GradCheckConfig};
use semaffine_core::{Error, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn attention_matches_dense_oracle() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, &mut r, "a", ParamGroup::Attention, 4, 2).unwrap();
    let q = Tensor::uniform(&[2, 4], 1.5, &mut r);
    let kv = Tensor::uniform(&[3, 4], 1.5, &mut r);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let (vq, vkv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
    let y = p.forward(&mut tape, &bind, vq, vkv).unwrap();
    let want = common::attention(&store, &p, &mat(&q), &mat(&kv));
    assert!(max_diff(&want, tape.value(y)) <= 1e-10);
}

#[test]
fn encoder_with_zero_branches_is_double_layer_norm() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let p = EncoderBlockParams::new(&mut store, &mut r, "enc", ParamGroup::Attention, 8, 4).unwrap();
    p.attn.zero(&mut store);
    p.ff.zero(&mut store);
    let x = Tensor::uniform(&[5, 8], 3.0, &mut r);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let vx = tape.constant(x.clone());
    let y = p.forward(&mut tape, &bind, vx).unwrap();
    let want = common::plain_norm(&common::plain_norm(&mat(&x)));
    assert!(max_diff(&want, tape.value(y)) <= 1e-12);
}

#[test]
fn encoder_single_token_preserves_shape() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let p = EncoderBlockParams::new(&mut store, &mut r, "enc", ParamGroup::Attention, 4, 2).unwrap();
    let x = Tensor::uniform(&[1, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let vx = tape.constant(x.clone());
    let y = p.forward(&mut tape, &bind, vx).unwrap();
    assert_eq!(tape.shape(y), &[1, 4]);
    // one token attends only to itself: the branch is a projection of the token
    let a = p.attn.forward(&mut tape, &bind, vx, vx).unwrap();
    let kv_only = common::linear(
        &store,
        &p.attn.output,
        &vec![p
            .attn
            .heads
            .iter()
            .flat_map(|h| common::linear(&store, &h.value, &mat(&x)).remove(0))
            .collect()],
    );
    assert!(max_diff(&kv_only, tape.value(a)) <= 1e-12);
    assert!(max_diff(&common::encoder(&store, &p, &mat(&x)), tape.value(y)) <= 1e-10);
}

#[test]
fn encoder_matches_scripted_composition() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let p = EncoderBlockParams::new(&mut store, &mut r, "enc", ParamGroup::Attention, 8, 2)
            .unwrap();
        let x = Tensor::uniform(&[6, 8], 2.0, &mut r);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = p.forward(&mut tape, &bind, vx).unwrap();
        assert_eq!(tape.shape(y), &[6, 8]);
        assert!(max_diff(&common::encoder(&store, &p, &mat(&x)), tape.value(y)) <= 1e-10);
    }
}

#[test]
fn decoder_single_memory_token_cross_heads_equal_value_projection() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let p = DecoderBlockParams::new(&mut store, &mut r, "dec", ParamGroup::Attention, 4, 2).unwrap();
    let q = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let mem = Tensor::uniform(&[1, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let (vq, vm) = (tape.constant(q), tape.constant(mem.clone()));
    let traces = p.cross_attn.heads_forward(&mut tape, &bind, vq, vm).unwrap();
    for (h, tr) in p.cross_attn.heads.iter().zip(traces) {
        let v = common::linear(&store, &h.value, &mat(&mem)).remove(0);
        assert!(max_diff(&vec![v.clone(), v.clone(), v], tape.value(tr.output)) <= 1e-14);
    }
    let y = p.forward(&mut tape, &bind, vq, vm).unwrap();
    assert_eq!(tape.shape(y), &[3, 4]);
}

#[test]
fn decoder_single_query_and_random_case() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let p = DecoderBlockParams::new(&mut store, &mut r, "dec", ParamGroup::Attention, 8, 4).unwrap();
    for (nq, nm) in [(1, 5), (3, 5)] {
        let q = Tensor::uniform(&[nq, 8], 1.5, &mut r);
        let mem = Tensor::uniform(&[nm, 8], 1.5, &mut r);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let (vq, vm) = (tape.constant(q.clone()), tape.constant(mem.clone()));
        let y = p.forward(&mut tape, &bind, vq, vm).unwrap();
        assert_eq!(tape.shape(y), &[nq, 8]);
        let want = common::decoder(&store, &p, &mat(&q), &mat(&mem));
        assert!(max_diff(&want, tape.value(y)) <= 1e-10);
    }
}

#[test]
fn decoder_rejects_empty_memory_and_bad_width() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let p = DecoderBlockParams::new(&mut store, &mut r, "dec", ParamGroup::Attention, 4, 2).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let q = tape.constant(Tensor::zeros(&[2, 4]));
    let empty = tape.constant(Tensor::zeros(&[0, 4]));
    assert!(matches!(p.forward(&mut tape, &bind, q, empty), Err(Error::Contract(_))));
    let wide = tape.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(p.forward(&mut tape, &bind, wide, q), Err(Error::Dimension { .. })));
}

#[test]
fn block_gradients_pass_finite_differences() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let enc = EncoderBlockParams::new(&mut store, &mut r, "enc", ParamGroup::Attention, 4, 2).unwrap();
    let dec = DecoderBlockParams::new(&mut store, &mut r, "dec", ParamGroup::Attention, 4, 2).unwrap();
    let mut params = store.named_tensors();
    params.push(("x".into(), Tensor::uniform(&[3, 4], 1.0, &mut r)));
    params.push(("queries".into(), Tensor::uniform(&[2, 4], 1.0, &mut r)));
    let weights = Tensor::uniform(&[2, 4], 1.0, &mut r);
    let report = finite_diff_check(
        |t, v| {
            let n = v.len();
            let bind = Binding::from_vars(v[..n - 2].to_vec());
            let m = enc.forward(t, &bind, v[n - 2])?;
            let y = dec.forward(t, &bind, v[n - 1], m)?;
            let w = t.constant(weights.clone());
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        },
        &params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
