use rand::Rng;

use super::{Binding, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Affine layer `x · Wᵀ + b` with `W: [out × in]`, `b: [out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[out_dim, in_dim],
            in_dim,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), group, &[out_dim], in_dim, rng);
        LinearParams {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if tape.shape(x).len() != 2 || cols != self.in_dim {
            return Err(Error::dim(
                "linear_forward",
                tape.shape(x),
                &[self.out_dim, self.in_dim],
            ));
        }
        let y = tape.matmul_nt(x, bind.var(self.weight))?;
        tape.add_row(y, bind.var(self.bias))
    }

    /// Sets both weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        *store.get_mut(self.weight) = Tensor::zeros(&[self.out_dim, self.in_dim]);
        *store.get_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }
}

/// Stack of linear layers with ReLU between consecutive layers and nothing
/// after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<LinearParams>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]` gives `dims.len() − 1` layers.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearParams::new(store, rng, &format!("{name}.{i}"), group, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<LinearParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::dim(
                    "mlp chain",
                    &[w[0].out_dim, w[0].in_dim],
                    &[w[1].out_dim, w[1].in_dim],
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[LinearParams] {
        &self.layers
    }

    pub fn last(&self) -> &LinearParams {
        self.layers.last().expect("non-empty")
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.last().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        mlp_forward(&self.layers, tape, bind, x)
    }
}

pub fn mlp_forward(
    layers: &[LinearParams],
    tape: &mut Tape,
    bind: &Binding,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            h = tape.relu(h);
        }
        h = layer.forward(tape, bind, h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckConfig};

    fn oracle_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, i) = x.dims2().unwrap();
        let o = w.rows();
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            for c in 0..o {
                let mut s = b.data()[c];
                for k in 0..i {
                    s += x.at(r, k) * w.at(c, k);
                }
                out.data_mut()[r * o + c] = s;
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = LinearParams::new(&mut store, &mut rng, "l", ParamGroup::Backbone, 3, 3);
        store.set(lin.weight, Tensor::eye(3)).unwrap();
        store.set(lin.bias, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &bind, vx).unwrap();
        assert_eq!(tape.value(y), &x);

        store.set(lin.weight, Tensor::zeros(&[3, 3])).unwrap();
        store.set(lin.bias, Tensor::vector(&[1.0, -2.0, 0.5])).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = lin.forward(&mut tape, &bind, vx).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(y).row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_matches_oracle_and_rejects_bad_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = LinearParams::new(&mut store, &mut rng, "l", ParamGroup::Backbone, 5, 3);
        let x = Tensor::uniform(&[6, 5], 1.0, &mut rng);
        let expect = oracle_linear(&x, store.get(lin.weight), store.get(lin.bias));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = lin.forward(&mut tape, &bind, vx).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-12);

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(lin.forward(&mut tape, &bind, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let single = Mlp::new(&mut store, &mut rng, "one", ParamGroup::Backbone, &[3, 3]);
        store.set(single.last().weight, Tensor::eye(3)).unwrap();
        store.set(single.last().bias, Tensor::zeros(&[3])).unwrap();
        let deep = Mlp::new(&mut store, &mut rng, "deep", ParamGroup::Backbone, &[3, 4, 4, 2]);
        for l in deep.layers() {
            l.zero(&mut store);
        }
        store
            .set(deep.last().bias, Tensor::vector(&[0.25, -4.0]))
            .unwrap();
        let two = Mlp::new(&mut store, &mut rng, "two", ParamGroup::Backbone, &[3, 6, 2]);

        let x = Tensor::uniform(&[5, 3], 2.0, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = single.forward(&mut tape, &bind, vx).unwrap();
        assert_eq!(tape.value(y), &x);
        let y = deep.forward(&mut tape, &bind, vx).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(y).row(r), &[0.25, -4.0]);
        }

        // sequential oracle: relu between, nothing after
        let l0 = &two.layers()[0];
        let l1 = &two.layers()[1];
        let mut h = oracle_linear(&x, store.get(l0.weight), store.get(l0.bias));
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let expect = oracle_linear(&h, store.get(l1.weight), store.get(l1.bias));
        let y = two.forward(&mut tape, &bind, vx).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn mlp_chain_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = LinearParams::new(&mut store, &mut rng, "a", ParamGroup::Backbone, 3, 4);
        let b = LinearParams::new(&mut store, &mut rng, "b", ParamGroup::Backbone, 5, 2);
        assert!(matches!(Mlp::from_layers(vec![a, b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "m", ParamGroup::Backbone, &[3, 5, 4, 2]);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let mut params = store.named_tensors();
        params.push(("x".into(), x));
        let report = finite_diff_check(
            |t, v| {
                let bind = Binding::from_vars(v[..v.len() - 1].to_vec());
                let y = mlp.forward(t, &bind, v[v.len() - 1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
