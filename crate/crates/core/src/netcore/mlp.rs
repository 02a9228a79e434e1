use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Bound, ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Dense network: affine + SiLU on every hidden layer, affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers weights (normal, std `1/sqrt(fan_in)`) and zero biases under
    /// `prefix/l{i}/{w,b}`.
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, layer_sizes: &[usize], rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[0], w[1]), || std * rng.sample::<f64, _>(StandardNormal));
                let wid = store.add(format!("{prefix}/l{i}/w"), weights);
                let bid = store.add(format!("{prefix}/l{i}/b"), Array2::zeros((1, w[1])));
                (wid, bid)
            })
            .collect();
        Mlp {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        }
    }

    /// Re-attaches to parameters already present in `store`.
    pub fn attach(store: &ParameterStore, prefix: &str, layer_sizes: &[usize]) -> Result<Self> {
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let find = |name: String, shape: (usize, usize)| {
                    let id = store
                        .id(&name)
                        .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
                    if store.get(id).dim() != shape {
                        return Err(Error::Shape(format!(
                            "parameter {name} has shape {:?}, expected {shape:?}",
                            store.get(id).dim()
                        )));
                    }
                    Ok(id)
                };
                Ok((
                    find(format!("{prefix}/l{i}/w"), (w[0], w[1]))?,
                    find(format!("{prefix}/l{i}/b"), (1, w[1]))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_scalars(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "MLP expects input width {}, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, params.var(w), params.var(b));
            if i != last {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

/// Rational network `sgn(φn) |φn|^N / (1 + |φd|^D)` with independent dense
/// networks `φn` and `φd` of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Pade {
    pub numerator: Mlp,
    pub denominator: Mlp,
    pub order_n: u32,
    pub order_d: u32,
}

impl Pade {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        layer_sizes: &[usize],
        order_n: u32,
        order_d: u32,
        rng: &mut R,
    ) -> Self {
        assert!(order_n >= 1 && order_d >= 1, "Padé orders must be >= 1");
        Pade {
            numerator: Mlp::init(store, &format!("{prefix}/num"), layer_sizes, rng),
            denominator: Mlp::init(store, &format!("{prefix}/den"), layer_sizes, rng),
            order_n,
            order_d,
        }
    }

    pub fn attach(store: &ParameterStore, prefix: &str, layer_sizes: &[usize], order_n: u32, order_d: u32) -> Result<Self> {
        Ok(Pade {
            numerator: Mlp::attach(store, &format!("{prefix}/num"), layer_sizes)?,
            denominator: Mlp::attach(store, &format!("{prefix}/den"), layer_sizes)?,
            order_n,
            order_d,
        })
    }

    pub fn num_scalars(layer_sizes: &[usize]) -> usize {
        2 * Mlp::num_scalars(layer_sizes)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let n = self.numerator.forward(tape, params, x)?;
        let d = self.denominator.forward(tape, params, x)?;
        Ok(tape.pade(n, d, self.order_n, self.order_d))
    }
}

/// Evaluates `mlp` on a plain batch without recording gradients.
pub fn mlp_forward(store: &ParameterStore, mlp: &Mlp, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = mlp.forward(&mut tape, &p, xv)?;
    Ok(tape.value(out).clone())
}

pub fn pade_forward(store: &ParameterStore, pade: &Pade, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = pade.forward(&mut tape, &p, xv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "m", &[3, 5, 2], &mut rng::stream(0, "t"));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let y = mlp_forward(&store, &mlp, &array![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn single_identity_layer_passes_input() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "m", &[2, 2], &mut rng::stream(0, "t"));
        *store.get_mut(store.id("m/l0/w").unwrap()) = Array2::eye(2);
        let x = array![[0.3, -4.0], [1.0, 2.0]];
        assert_eq!(mlp_forward(&store, &mlp, &x).unwrap(), x);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "m", &[2, 8, 8, 3], &mut rng::stream(4, "t"));
        let y = mlp_forward(&store, &mlp, &array![[0.5, -1.0], [0.5, -1.0]]).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "m", &[2, 3], &mut rng::stream(0, "t"));
        assert!(matches!(mlp_forward(&store, &mlp, &array![[1.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = |seed| {
            let mut s = ParameterStore::new();
            Pade::init(&mut s, "p", &[3, 4, 2], 2, 2, &mut rng::stream(seed, "init"));
            s
        };
        assert_eq!(build(9), build(9));
        assert_ne!(build(9), build(10));
    }

    fn one_layer_pade(num: f64, den: f64) -> (ParameterStore, Pade) {
        let mut store = ParameterStore::new();
        let pade = Pade::init(&mut store, "p", &[1, 1], 2, 2, &mut rng::stream(0, "t"));
        *store.get_mut(store.id("p/num/l0/w").unwrap()) = array![[0.0]];
        *store.get_mut(store.id("p/num/l0/b").unwrap()) = array![[num]];
        *store.get_mut(store.id("p/den/l0/w").unwrap()) = array![[0.0]];
        *store.get_mut(store.id("p/den/l0/b").unwrap()) = array![[den]];
        (store, pade)
    }

    #[test]
    fn pade_direct_values() {
        let (s, p) = one_layer_pade(-2.0, 1.0);
        assert_eq!(pade_forward(&s, &p, &array![[0.7]]).unwrap(), array![[-2.0]]);
        let (s, p) = one_layer_pade(0.0, 3.0);
        assert_eq!(pade_forward(&s, &p, &array![[0.7]]).unwrap(), array![[0.0]]);
    }

    #[test]
    fn pade_bounded_by_numerator_power() {
        let mut store = ParameterStore::new();
        let pade = Pade::init(&mut store, "p", &[2, 16, 16, 3], 2, 2, &mut rng::stream(5, "t"));
        let x = Array2::from_shape_fn((64, 2), |(i, j)| ((i * 7 + j * 13) % 17) as f64 - 8.0);
        let out = pade_forward(&store, &pade, &x).unwrap();
        let num = mlp_forward(&store, &pade.numerator, &x).unwrap();
        for (o, n) in out.iter().zip(num.iter()) {
            assert!(o.abs() <= n.abs().powi(2) * (1.0 + 1e-15));
        }
    }

    #[test]
    fn pade_finite_for_huge_inputs() {
        let mut store = ParameterStore::new();
        let pade = Pade::init(&mut store, "p", &[3, 16, 16, 2], 2, 2, &mut rng::stream(8, "t"));
        let x = array![[1e8, -1e8, 3e7], [-1e8, 1e8, 1e8]];
        assert!(pade_forward(&store, &pade, &x).unwrap().iter().all(|v| v.is_finite()));
    }
}
