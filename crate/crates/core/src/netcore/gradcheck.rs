//! Central finite-difference checks of tape gradients.
//!
//! The error of a check is `|g - g_fd| / max(|g|, |g_fd|)` with `|.|` the
//! Euclidean norm over every parameter entry, and step
//! `h = 1e-6 (1 + |θ|)` per entry.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{grad, Bound, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng;

/// Worst-case relative gradient error of `loss` around `store`.
pub fn check<F>(store: &ParameterStore, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let (_, analytic) = grad(store, &loss)?;
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let out = loss(&mut tape, &p)?;
        tape.check_finite()?;
        Ok(tape.value(out)[[0, 0]])
    };
    let mut probe = store.clone();
    let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
    for id in store.ids() {
        let g = analytic.get(id);
        for idx in 0..g.len() {
            let (i, j) = (idx / g.ncols(), idx % g.ncols());
            let theta = store.get(id)[[i, j]];
            let h = 1e-6 * (1.0 + theta.abs());
            probe.get_mut(id)[[i, j]] = theta + h;
            let up = eval(&probe)?;
            probe.get_mut(id)[[i, j]] = theta - h;
            let down = eval(&probe)?;
            probe.get_mut(id)[[i, j]] = theta;
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - g[[i, j]]).powi(2);
            a2 += g[[i, j]].powi(2);
            f2 += fd * fd;
        }
    }
    let scale = a2.max(f2).sqrt();
    Ok(if scale == 0.0 { diff2.sqrt() } else { diff2.sqrt() / scale })
}

type Case = Box<dyn Fn(&mut Tape, &Bound) -> Var>;

fn normal(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gradient check of every registered tape primitive on random inputs.
/// Each primitive's output is projected onto fixed random weights so the
/// loss exercises every output entry.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cases: Vec<(&'static str, Vec<(usize, usize)>, Case)> = vec![
        ("add", vec![(4, 3), (1, 3)], Box::new(|t, p| t.add(p_(p, 0), p_(p, 1)))),
        ("sub", vec![(4, 3), (4, 1)], Box::new(|t, p| t.sub(p_(p, 0), p_(p, 1)))),
        ("mul", vec![(4, 3), (1, 1)], Box::new(|t, p| t.mul(p_(p, 0), p_(p, 1)))),
        ("scale", vec![(3, 2)], Box::new(|t, p| t.scale(p_(p, 0), -1.7))),
        ("exp", vec![(3, 2)], Box::new(|t, p| t.exp(p_(p, 0)))),
        (
            "affine",
            vec![(5, 3), (3, 4), (1, 4)],
            Box::new(|t, p| t.affine(p_(p, 0), p_(p, 1), p_(p, 2))),
        ),
        ("silu", vec![(4, 3)], Box::new(|t, p| t.silu(p_(p, 0)))),
        ("pade", vec![(4, 3), (4, 3)], Box::new(|t, p| t.pade(p_(p, 0), p_(p, 1), 2, 2))),
        ("pade_n3_d1", vec![(4, 3), (4, 3)], Box::new(|t, p| t.pade(p_(p, 0), p_(p, 1), 3, 1))),
        ("slice_cols", vec![(4, 5)], Box::new(|t, p| t.slice_cols(p_(p, 0), 1, 3))),
        ("slice_rows", vec![(5, 2)], Box::new(|t, p| t.slice_rows(p_(p, 0), 2, 2))),
        (
            "concat_cols",
            vec![(3, 2), (3, 1)],
            Box::new(|t, p| t.concat_cols(&[p_(p, 0), p_(p, 1)])),
        ),
        ("tile_rows", vec![(3, 2)], Box::new(|t, p| t.tile_rows(p_(p, 0), 4))),
        ("repeat_rows", vec![(3, 2)], Box::new(|t, p| t.repeat_rows(p_(p, 0), 4))),
        (
            "pair_aggregate",
            vec![(12, 3), (4, 1)],
            Box::new(|t, p| t.pair_aggregate(p_(p, 0), p_(p, 1))),
        ),
        ("smoothlog_norm", vec![(5, 3)], Box::new(|t, p| t.smoothlog_norm(p_(p, 0)))),
        (
            "legendre_pairs",
            vec![(5, 3), (5, 3)],
            Box::new(|t, p| t.legendre_pairs(p_(p, 0), p_(p, 1), 4)),
        ),
        ("envelope_2d", vec![(5, 2)], Box::new(|t, p| t.envelope(p_(p, 0)))),
        ("envelope_3d", vec![(5, 3)], Box::new(|t, p| t.envelope(p_(p, 0)))),
        ("unit_vec", vec![(5, 3)], Box::new(|t, p| t.unit_vec(p_(p, 0)))),
        ("axis_basis", vec![(5, 3)], Box::new(|t, p| t.axis_basis(p_(p, 0)))),
        (
            "reject",
            vec![(5, 3), (5, 3)],
            Box::new(|t, p| {
                let dir = t.unit_vec(p_(p, 1));
                t.reject(p_(p, 0), dir)
            }),
        ),
        (
            "contract",
            vec![(5, 4), (5, 2), (5, 2)],
            Box::new(|t, p| t.contract(p_(p, 0), 1, &[p_(p, 1), p_(p, 2)])),
        ),
        (
            "huber_sum",
            vec![(6, 2)],
            Box::new(|t, p| {
                let w = Array2::from_shape_fn((6, 2), |(i, j)| 0.5 + ((i + j) % 3) as f64);
                t.huber_sum(p_(p, 0), w, 1.0)
            }),
        ),
        (
            "vec_huber_sum",
            vec![(6, 2)],
            Box::new(|t, p| t.vec_huber_sum(p_(p, 0), vec![1.0, 0.0, 2.0, 0.5, 1.0, 3.0], 1.0)),
        ),
        ("sum_all", vec![(3, 3)], Box::new(|t, p| t.sum_all(p_(p, 0)))),
    ];

    let mut results = Vec::with_capacity(cases.len());
    for (name, shapes, op) in cases {
        let mut r = rng::stream(seed, name);
        let mut store = ParameterStore::new();
        let inputs: Vec<Array2<f64>> = shapes.iter().map(|&s| normal(&mut r, s, 1.0)).collect();
        for (i, x) in inputs.iter().enumerate() {
            store.add(format!("{name}/in{i}"), x.clone());
        }
        let probe_shape = {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let out = op(&mut tape, &p);
            tape.shape(out)
        };
        let weights = normal(&mut r, probe_shape, 1.0);
        let err = check(&store, |tape, p| {
            let out = op(tape, p);
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out, w);
            Ok(tape.sum_all(prod))
        })?;
        results.push((name, err));
    }
    Ok(results)
}

fn p_(p: &Bound, i: usize) -> Var {
    p.var(super::params::ParamId(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for seed in [0, 1] {
            for (name, err) in primitive_checks(seed).unwrap() {
                assert!(err < 1e-5, "{name}: relative gradient error {err:.3e}");
            }
        }
    }

    #[test]
    fn exact_gradient_has_negligible_error() {
        let mut store = ParameterStore::new();
        let x = store.add("x", Array2::from_elem((1, 1), 0.7));
        let err = check(&store, |t, p| {
            let y = t.mul(p.var(x), p.var(x));
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-8);
    }
}
