//! Rotation-invariant scalar features built from vectors.
//!
//! Every vector `v` contributes `smoothlog(|v|)`; every unordered pair
//! `(a, b)` contributes `smoothlog(|a||b|) * P_i(cos θ_ab)` for each Legendre
//! order `i`. Both depend only on norms and dot products, so they are
//! invariant under any orthogonal transform, proper or improper.

use crate::error::{Error, Result};

/// Norms below this are treated as exactly zero when normalizing.
pub const ZERO_NORM: f64 = 1e-30;

/// Ordered, dimensionless scalar inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalarBag(pub Vec<f64>);

/// Ordered, dimensionless vector inputs; zero vectors are allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorBag(pub Vec<Vec<f64>>);

/// `(1 - e^-x) ln(1 + x)` for `x >= 0`.
pub fn smoothlog(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("smoothlog is defined for x >= 0, got {x}")));
    }
    Ok(smoothlog_unchecked(x))
}

#[inline]
pub(crate) fn smoothlog_unchecked(x: f64) -> f64 {
    -(-x).exp_m1() * x.ln_1p()
}

/// d/dx smoothlog(x).
#[inline]
pub fn smoothlog_derivative(x: f64) -> f64 {
    (-x).exp() * x.ln_1p() - (-x).exp_m1() / (1.0 + x)
}

/// `(x_t - x_s) / ell`.
pub fn relative_position(target: &[f64], source: &[f64], ell: f64) -> Result<Vec<f64>> {
    if !(ell > 0.0) {
        return Err(Error::Domain(format!("reference length must be > 0, got {ell}")));
    }
    if target.len() != source.len() {
        return Err(Error::Shape(format!(
            "target has {} components, source has {}",
            target.len(),
            source.len()
        )));
    }
    Ok(target.iter().zip(source).map(|(t, s)| (t - s) / ell).collect())
}

/// Legendre polynomials `P_1..=P_order` and their derivatives at `c`, by the
/// three-term recurrence.
pub fn legendre(c: f64, order: usize, values: &mut [f64], derivs: &mut [f64]) {
    let (mut p_prev, mut p) = (1.0, c);
    let (mut d_prev, mut d) = (0.0, 1.0);
    for i in 1..=order {
        values[i - 1] = p;
        derivs[i - 1] = d;
        let n = i as f64;
        let p_next = ((2.0 * n + 1.0) * c * p - n * p_prev) / (n + 1.0);
        // P'_{n+1} = P'_{n-1} + (2n + 1) P_n
        let d_next = d_prev + (2.0 * n + 1.0) * p;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `smoothlog(|v|)`; when `grad` is given, accumulates `upstream * d/dv`.
#[inline]
pub(crate) fn magnitude_feature(v: &[f64], grad: Option<(f64, &mut [f64])>) -> f64 {
    let n = norm(v);
    if let Some((g, out)) = grad {
        if n >= ZERO_NORM {
            let k = g * smoothlog_derivative(n) / n;
            for (o, x) in out.iter_mut().zip(v) {
                *o += k * x;
            }
        }
    }
    smoothlog_unchecked(n)
}

/// Pair features `smoothlog(|a||b|) P_i(cos θ)` for `i = 1..=out.len()`.
#[inline]
pub(crate) fn pair_features(a: &[f64], b: &[f64], out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        out.fill(0.0);
        return;
    }
    let p = na * nb;
    let c = (dot(a, b) / p).clamp(-1.0, 1.0);
    let s = smoothlog_unchecked(p);
    let mut derivs = vec![0.0; out.len()];
    legendre(c, out.len(), out, &mut derivs);
    for o in out.iter_mut() {
        *o *= s;
    }
}

/// Accumulates the gradient of `Σ_i upstream[i] * pair_feature_i(a, b)` into
/// `ga` and `gb`.
pub(crate) fn pair_features_backward(
    a: &[f64],
    b: &[f64],
    upstream: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return;
    }
    let p = na * nb;
    let c = (dot(a, b) / p).clamp(-1.0, 1.0);
    let s = smoothlog_unchecked(p);
    let ds = smoothlog_derivative(p);
    let order = upstream.len();
    let mut vals = vec![0.0; order];
    let mut ders = vec![0.0; order];
    legendre(c, order, &mut vals, &mut ders);
    let mut sum_p = 0.0;
    let mut sum_dp = 0.0;
    for i in 0..order {
        sum_p += upstream[i] * vals[i];
        sum_dp += upstream[i] * ders[i];
    }
    // f = S(p) P(c),  p = |a||b|,  c = a.b / p
    // df/da = S'(p) P(c) |b| a/|a| + S(p) P'(c) (b/p - c a/|a|^2)
    let k_rad_a = sum_p * ds * nb / na - sum_dp * s * c / (na * na);
    let k_rad_b = sum_p * ds * na / nb - sum_dp * s * c / (nb * nb);
    let k_cross = sum_dp * s / p;
    for k in 0..a.len() {
        ga[k] += k_rad_a * a[k] + k_cross * b[k];
        gb[k] += k_rad_b * b[k] + k_cross * a[k];
    }
}

/// Number of scalars `encode_vectors` emits for `n_vectors` inputs.
pub fn encoded_len(n_vectors: usize, n_harmonics: usize) -> usize {
    n_vectors + n_vectors * n_vectors.saturating_sub(1) / 2 * n_harmonics
}

/// Magnitudes first (in bag order), then pair features in lexicographic pair
/// order, harmonic order innermost.
pub fn encode_vectors(vectors: &VectorBag, n_harmonics: usize) -> Result<ScalarBag> {
    if n_harmonics == 0 {
        return Err(Error::Domain("n_harmonics must be >= 1".into()));
    }
    let v = &vectors.0;
    if let Some(w) = v.windows(2).find(|w| w[0].len() != w[1].len()) {
        return Err(Error::Shape(format!(
            "vectors of dimension {} and {} in one bag",
            w[0].len(),
            w[1].len()
        )));
    }
    let mut out = Vec::with_capacity(encoded_len(v.len(), n_harmonics));
    out.extend(v.iter().map(|x| magnitude_feature(x, None)));
    let mut buf = vec![0.0; n_harmonics];
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            pair_features(&v[a], &v[b], &mut buf);
            out.extend_from_slice(&buf);
        }
    }
    Ok(ScalarBag(out))
}
