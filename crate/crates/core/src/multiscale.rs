//! Parallel kernel branches at distinct reference lengths, superposed.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BoundaryMesh;
use crate::invariants::ScalarBag;
use crate::kernel::{GlobalInputs, KernelBranch, KernelSpec, SourceInputs};
use crate::netcore::{Bound, ParameterStore, Tape, Var};

/// `ell * exp(alpha)`.
pub fn effective_length(ell: f64, alpha: f64) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::Domain(format!("reference length must be > 0, got {ell}")));
    }
    Ok(ell * alpha.exp())
}

/// Number of log-ratio features for `n` scales.
pub fn ratio_feature_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// `ln(ℓ_i / ℓ_j)` for every `i < j`, from the raw (not learned) lengths.
pub fn scale_ratio_features(scales: &[f64]) -> Result<ScalarBag> {
    if scales.is_empty() {
        return Err(Error::Domain("at least one reference length is required".into()));
    }
    if let Some(bad) = scales.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Domain(format!("reference lengths must be positive and finite, got {bad}")));
    }
    let mut out = Vec::with_capacity(ratio_feature_count(scales.len()));
    for i in 0..scales.len() {
        for j in i + 1..scales.len() {
            out.push((scales[i] / scales[j]).ln());
        }
    }
    Ok(ScalarBag(out))
}

/// One kernel branch per reference length, identical architecture and
/// independent parameters. `spec.n_global_scalars` counts the ratio
/// features, which are appended after the caller's global scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleKernel {
    pub branches: Vec<KernelBranch>,
}

impl MultiscaleKernel {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        spec: &KernelSpec,
        n_scales: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let branches = (0..n_scales)
            .map(|k| KernelBranch::init(store, &format!("{prefix}/branch{k}"), spec.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(MultiscaleKernel { branches })
    }

    pub fn attach(store: &ParameterStore, prefix: &str, spec: &KernelSpec, n_scales: usize) -> Result<Self> {
        let branches = (0..n_scales)
            .map(|k| KernelBranch::attach(store, &format!("{prefix}/branch{k}"), spec.clone()))
            .collect::<Result<_>>()?;
        Ok(MultiscaleKernel { branches })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.branches[0].spec
    }

    pub fn num_parameters(&self) -> usize {
        self.branches.iter().map(|b| b.spec.num_parameters()).sum()
    }

    /// `Σ_k Σ_s w_s^(k) a_s K_ts^(k)` as a `[T, output_width]` node.
    /// `strengths[k]` is the `[S, 1]` strength column of branch `k`;
    /// `sources.strengths` is ignored.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        sources: &SourceInputs,
        strengths: &[Var],
        globals: &GlobalInputs,
        targets: &Array2<f64>,
        scales: &[f64],
    ) -> Result<Var> {
        if strengths.len() != self.branches.len() || scales.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} branches need as many strength columns and scales, got {} and {}",
                self.branches.len(),
                strengths.len(),
                scales.len()
            )));
        }
        let globals = with_ratio_features(globals, scales)?;
        let mut total = None;
        for ((branch, &w), &ell) in self.branches.iter().zip(strengths).zip(scales) {
            let src = SourceInputs {
                strengths: w,
                ..sources.clone()
            };
            let out = branch.forward(tape, params, &src, &globals, targets, ell)?;
            total = Some(match total {
                None => out,
                Some(acc) => tape.add(acc, out),
            });
        }
        total.ok_or_else(|| Error::Shape("multiscale kernel has no branches".into()))
    }
}

/// Caller globals followed by the log-ratio features of `scales`.
pub fn with_ratio_features(globals: &GlobalInputs, scales: &[f64]) -> Result<GlobalInputs> {
    let ratios = Array1::from(scale_ratio_features(scales)?.0);
    Ok(GlobalInputs {
        scalars: concatenate(Axis(0), &[globals.scalars.view(), ratios.view()]).unwrap(),
        vectors: globals.vectors.clone(),
    })
}

/// Plain-value multiscale evaluation from one mesh without face latents.
/// `strengths[k][s]` is the strength of face `s` in branch `k`.
pub fn multiscale_eval(
    store: &ParameterStore,
    mk: &MultiscaleKernel,
    scales: &[f64],
    mesh: &BoundaryMesh,
    targets: &Array2<f64>,
    strengths: &[Vec<f64>],
    globals: &GlobalInputs,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let sources = SourceInputs::from_mesh(&mut tape, mesh);
    let mut cols = Vec::with_capacity(strengths.len());
    for w in strengths {
        if w.len() != mesh.len() {
            return Err(Error::Shape(format!("{} strengths for {} faces", w.len(), mesh.len())));
        }
        cols.push(tape.constant(Array2::from_shape_vec((w.len(), 1), w.clone()).unwrap()));
    }
    let out = mk.forward(&mut tape, &params, &sources, &cols, globals, targets, scales)?;
    tape.check_finite()?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Face;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(n_ratio: usize) -> KernelSpec {
        KernelSpec {
            dim: 2,
            include_normal: true,
            n_face_scalars: 0,
            n_global_scalars: 1 + n_ratio,
            n_face_vectors: 0,
            n_global_vectors: 1,
            n_harmonics: 1,
            hidden: vec![6, 6],
            order_n: 2,
            order_d: 2,
            n_scalar_out: 1,
            n_vector_out: 1,
            basis_leak: None,
        }
    }

    fn setup(n_scales: usize, seed: u64) -> (ParameterStore, MultiscaleKernel, BoundaryMesh, Array2<f64>, GlobalInputs) {
        let mut store = ParameterStore::new();
        let mk = MultiscaleKernel::init(
            &mut store,
            "ms",
            &spec(ratio_feature_count(n_scales)),
            n_scales,
            &mut rng::stream(seed, "init"),
        )
        .unwrap();
        let mut r = rng::stream(seed, "geo");
        let faces = (0..5)
            .map(|_| {
                Face::new(
                    vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                    vec![r.random_range(-1.0..1.0), 1.0],
                    r.random_range(0.1..0.5),
                )
                .unwrap()
            })
            .collect();
        let mesh = BoundaryMesh::new(2, "wall", faces).unwrap();
        let targets = Array2::from_shape_fn((6, 2), |_| r.random_range(-3.0..3.0));
        let g = GlobalInputs {
            scalars: array![0.2],
            vectors: vec![array![0.6, 0.8]],
        };
        (store, mk, mesh, targets, g)
    }

    #[test]
    fn effective_length_examples() {
        assert_eq!(effective_length(0.3, 0.0).unwrap(), 0.3);
        assert!((effective_length(1.0, 2f64.ln()).unwrap() - 2.0).abs() < 1e-15);
        assert!(effective_length(1.0, -700.0).unwrap() > 0.0);
        assert!(effective_length(0.0, 0.0).is_err());
    }

    #[test]
    fn ratio_feature_examples() {
        assert!(scale_ratio_features(&[0.7]).unwrap().0.is_empty());
        let f = scale_ratio_features(&[1.0, 0.01]).unwrap().0;
        assert!((f[0] - 100f64.ln()).abs() < 1e-15);
        assert!((f[0] - 4.60517).abs() < 1e-5);
        assert_eq!(scale_ratio_features(&[0.4, 0.4]).unwrap().0, vec![0.0]);
        assert_eq!(scale_ratio_features(&[1.0, 2.0, 4.0]).unwrap().0.len(), 3);
        assert!(scale_ratio_features(&[]).is_err());
    }

    #[test]
    fn zero_strengths_give_zero_field() {
        let (store, mk, mesh, t, g) = setup(2, 1);
        let out = multiscale_eval(&store, &mk, &[1.0, 0.1], &mesh, &t, &[vec![0.0; 5], vec![0.0; 5]], &g).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_branch_is_the_kernel() {
        let (store, mk, mesh, t, g) = setup(1, 2);
        let out = multiscale_eval(&store, &mk, &[0.5], &mesh, &t, &[vec![1.0; 5]], &g).unwrap();
        let direct = crate::kernel::evaluate_branch(&store, &mk.branches[0], &mesh, &[1.0; 5], &g, &t, 0.5).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn branches_superpose_linearly() {
        let (store, mk, mesh, t, g) = setup(2, 3);
        let scales = [1.0, 0.2];
        let w0: Vec<f64> = (0..5).map(|i| 0.5 + i as f64 * 0.1).collect();
        let w1: Vec<f64> = (0..5).map(|i| 1.0 - i as f64 * 0.15).collect();
        let both = multiscale_eval(&store, &mk, &scales, &mesh, &t, &[w0.clone(), w1.clone()], &g).unwrap();
        let only0 = multiscale_eval(&store, &mk, &scales, &mesh, &t, &[w0.clone(), vec![0.0; 5]], &g).unwrap();
        let only1 = multiscale_eval(&store, &mk, &scales, &mesh, &t, &[vec![0.0; 5], w1.clone()], &g).unwrap();
        let sum = &only0 + &only1;
        for (a, b) in both.iter().zip(sum.iter()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
        let doubled: Vec<f64> = w1.iter().map(|w| 2.0 * w).collect();
        let twice = multiscale_eval(&store, &mk, &scales, &mesh, &t, &[w0, doubled], &g).unwrap();
        let expect = &only0 + &(&only1 * 2.0);
        for (a, b) in twice.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn perturbing_one_branch_leaves_the_other() {
        let (mut store, mk, mesh, t, g) = setup(2, 4);
        let scales = [1.0, 0.3];
        let w = vec![vec![1.0; 5], vec![1.0; 5]];
        let only0 = |s: &ParameterStore| multiscale_eval(s, &mk, &scales, &mesh, &t, &[w[0].clone(), vec![0.0; 5]], &g).unwrap();
        let before = only0(&store);
        let id = store.id("ms/branch1/num/l0/w").unwrap();
        store.get_mut(id).mapv_inplace(|v| v + 0.5);
        assert_eq!(only0(&store), before);
    }

    #[test]
    fn scale_similarity() {
        let (store, mk, mesh, t, g) = setup(2, 5);
        let w = vec![vec![1.0; 5], vec![0.5; 5]];
        let base = multiscale_eval(&store, &mk, &[1.0, 0.1], &mesh, &t, &w, &g).unwrap();
        // lengths, and reference lengths, all scaled by λ; areas are
        // model inputs and stay fixed, as every dimensionless input does
        let check = |lambda: f64, tol: f64| {
            let moved = BoundaryMesh::new(
                2,
                "wall",
                mesh.faces
                    .iter()
                    .map(|f| Face {
                        centroid: f.centroid.iter().map(|c| c * lambda).collect(),
                        ..f.clone()
                    })
                    .collect(),
            )
            .unwrap();
            let out = multiscale_eval(&store, &mk, &[lambda, 0.1 * lambda], &moved, &(&t * lambda), &w, &g).unwrap();
            for (a, b) in out.iter().zip(base.iter()) {
                assert!((a - b).abs() <= tol * (1.0 + b.abs()), "λ={lambda}: {a} vs {b}");
            }
        };
        check(4.0, 0.0);
        check(0.3048, 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn effective_length_is_positive(ell in 1e-6f64..1e6, alpha in -50.0f64..50.0) {
            prop_assert!(effective_length(ell, alpha).unwrap() > 0.0);
        }

        #[test]
        fn ratio_features_are_antisymmetric(a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
            let ab = scale_ratio_features(&[a, b]).unwrap().0[0];
            let ba = scale_ratio_features(&[b, a]).unwrap().0[0];
            prop_assert!((ab + ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        }
    }
}
