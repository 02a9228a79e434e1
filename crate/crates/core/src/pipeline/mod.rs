//! Unit-free samples: nondimensionalization, field layout, masking,
//! synthetic analytic-flow generators and the sample text format.
//!
//! Field values are stored in one `[n, ns + d * nv]` array: scalar fields in
//! schema order, then `d` columns per vector field. Masks are per point and
//! per field (`[n, ns + nv]`).

mod format;
mod synth;

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::geometry::BoundaryMesh;

pub use format::{parse_sample, read_sample, write_sample, write_sample_string};
pub use synth::{
    cylinder_surface_cp, gen_cylinder_raw, gen_cylinder_sample, gen_laplace_source_sample, CylinderConfig,
    laplace_field, LaplaceConfig, Monopole,
};

/// Points with total-pressure coefficient above this are non-physical.
pub const CPT_LIMIT: f64 = 1.02;

/// Dimensional flow constants in any consistent unit system.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConstants {
    pub rho: f64,
    pub nu: f64,
    pub u_inf: Vec<f64>,
    pub c_ref: f64,
}

impl FlowConstants {
    pub fn speed(&self) -> f64 {
        self.u_inf.iter().map(|u| u * u).sum::<f64>().sqrt()
    }

    /// `½ ρ |U∞|²`.
    pub fn q_inf(&self) -> f64 {
        0.5 * self.rho * self.speed().powi(2)
    }

    /// Free-stream viscous length `sqrt(ν c_ref / |U∞|)`.
    pub fn delta_fs(&self) -> f64 {
        (self.nu * self.c_ref / self.speed()).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let speed = self.speed();
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(Error::Domain("free-stream speed must be positive".into()));
        }
        if !(self.nu > 0.0 && self.c_ref > 0.0 && self.rho > 0.0) {
            return Err(Error::Domain("rho, nu and c_ref must be positive".into()));
        }
        Ok(())
    }
}

/// Named scalar and vector output fields.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldSchema {
    pub scalars: Vec<String>,
    pub vectors: Vec<String>,
}

impl FieldSchema {
    pub fn new<S: Into<String>>(scalars: impl IntoIterator<Item = S>, vectors: impl IntoIterator<Item = S>) -> Self {
        FieldSchema {
            scalars: scalars.into_iter().map(Into::into).collect(),
            vectors: vectors.into_iter().map(Into::into).collect(),
        }
    }

    /// `Cp, Cpt, ln_nut` and `dU, CF_shear`.
    pub fn aerodynamic() -> Self {
        FieldSchema::new(["Cp", "Cpt", "ln_nut"], ["dU", "CF_shear"])
    }

    /// `phi` and `grad_phi`.
    pub fn laplace() -> Self {
        FieldSchema::new(["phi"], ["grad_phi"])
    }

    pub fn n_fields(&self) -> usize {
        self.scalars.len() + self.vectors.len()
    }

    pub fn width(&self, dim: usize) -> usize {
        self.scalars.len() + dim * self.vectors.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.scalars.iter().chain(&self.vectors).map(String::as_str)
    }

    /// Field index (scalars first) of `name`.
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names().position(|n| n == name)
    }

    pub fn is_vector(&self, field: usize) -> bool {
        field >= self.scalars.len()
    }

    /// Value columns of field `field`.
    pub fn columns(&self, field: usize, dim: usize) -> Range<usize> {
        let ns = self.scalars.len();
        if field < ns {
            field..field + 1
        } else {
            let c = ns + (field - ns) * dim;
            c..c + dim
        }
    }

    /// Names from `self` absent in `other`.
    pub fn missing_from(&self, other: &FieldSchema) -> Vec<String> {
        self.scalars
            .iter()
            .filter(|n| !other.scalars.contains(n))
            .chain(self.vectors.iter().filter(|n| !other.vectors.contains(n)))
            .cloned()
            .collect()
    }
}

/// Scalar and vector channels over a point batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub dim: usize,
    pub schema: FieldSchema,
    pub values: Array2<f64>,
}

impl FieldSet {
    pub fn new(dim: usize, schema: FieldSchema, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != schema.width(dim) {
            return Err(Error::Shape(format!(
                "field values have {} columns, schema needs {}",
                values.ncols(),
                schema.width(dim)
            )));
        }
        Ok(FieldSet { dim, schema, values })
    }

    pub fn zeros(dim: usize, schema: FieldSchema, n: usize) -> Self {
        let w = schema.width(dim);
        FieldSet {
            dim,
            schema,
            values: Array2::zeros((n, w)),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn field(&self, index: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., self.schema.columns(index, self.dim)])
    }

    pub fn scalar(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        let i = self.schema.scalars.iter().position(|n| n == name)?;
        Some(self.values.column(i))
    }

    pub fn vector(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        let i = self.schema.index(name).filter(|&i| self.schema.is_vector(i))?;
        Some(self.field(i))
    }

    pub fn select(&self, rows: &[usize]) -> FieldSet {
        FieldSet {
            dim: self.dim,
            schema: self.schema.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Re-orders columns into `schema`, failing with the missing names.
    pub fn project(&self, schema: &FieldSchema) -> Result<FieldSet> {
        let missing = schema.missing_from(&self.schema);
        if !missing.is_empty() {
            return Err(Error::Schema { missing });
        }
        let mut cols = Vec::new();
        for name in schema.names() {
            let i = self.schema.index(name).unwrap();
            cols.extend(self.schema.columns(i, self.dim));
        }
        Ok(FieldSet {
            dim: self.dim,
            schema: schema.clone(),
            values: self.values.select(Axis(1), &cols),
        })
    }
}

/// One unit-free problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dim: usize,
    pub boundaries: BTreeMap<String, BoundaryMesh>,
    pub global_scalars: Vec<(String, f64)>,
    pub global_vectors: Vec<(String, Vec<f64>)>,
    pub reference_lengths: Vec<f64>,
    pub queries: Array2<f64>,
    pub targets: Option<FieldSet>,
    /// `[n_queries, n_fields]`, true where the target is usable.
    pub mask: Option<Array2<bool>>,
    /// Query points lying on a boundary, for surface-only metrics.
    pub surface: Vec<bool>,
}

impl Sample {
    pub fn n_queries(&self) -> usize {
        self.queries.nrows()
    }

    pub fn global_scalar(&self, name: &str) -> Option<f64> {
        self.global_scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn global_vector(&self, name: &str) -> Option<&[f64]> {
        self.global_vectors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Mask, or all-true when absent.
    pub fn mask_or_default(&self) -> Option<Array2<bool>> {
        let t = self.targets.as_ref()?;
        Some(self.mask.clone().unwrap_or_else(|| Array2::from_elem((t.len(), t.schema.n_fields()), true)))
    }

    /// The sample restricted to query rows `rows`, in that order.
    pub fn select_queries(&self, rows: &[usize]) -> Sample {
        Sample {
            queries: self.queries.select(Axis(0), rows),
            targets: self.targets.as_ref().map(|t| t.select(rows)),
            mask: self.mask.as_ref().map(|m| m.select(Axis(0), rows)),
            surface: rows.iter().map(|&r| self.surface.get(r).copied().unwrap_or(false)).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_queries();
        let d = self.dim;
        if self.queries.ncols() != d {
            return Err(Error::Shape(format!("queries must have {d} columns")));
        }
        if self.boundaries.values().any(|m| m.dim != d) {
            return Err(Error::Shape("boundary dimension differs from sample dimension".into()));
        }
        if self.global_vectors.iter().any(|(_, v)| v.len() != d) {
            return Err(Error::Shape(format!("global vectors must have {d} components")));
        }
        if self.reference_lengths.is_empty() || self.reference_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Domain("reference lengths must be positive and non-empty".into()));
        }
        if let Some(t) = &self.targets {
            if t.len() != n || t.dim != d {
                return Err(Error::Shape("targets do not match queries".into()));
            }
            if let Some(m) = &self.mask {
                if m.dim() != (n, t.schema.n_fields()) {
                    return Err(Error::Shape("mask shape does not match targets".into()));
                }
            }
        } else if self.mask.is_some() {
            return Err(Error::Shape("mask without targets".into()));
        }
        if !self.surface.is_empty() && self.surface.len() != n {
            return Err(Error::Shape("surface flags do not match queries".into()));
        }
        Ok(())
    }
}

/// Dimensional flow data at probe points, before nondimensionalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFlow {
    pub dim: usize,
    pub boundaries: Vec<BoundaryMesh>,
    pub points: Array2<f64>,
    pub velocity: Array2<f64>,
    /// Gauge pressure (free-stream pressure is zero).
    pub pressure: Array1<f64>,
    pub nu_t: Array1<f64>,
    /// Wall shear stress, where the dataset provides it.
    pub wall_shear: Option<Array2<f64>>,
    pub surface: Vec<bool>,
}

impl RawFlow {
    /// The same flow expressed in another unit system, where one old unit of
    /// length, time and mass equals `length`, `time` and `mass` new units.
    pub fn in_units(&self, c: &FlowConstants, length: f64, time: f64, mass: f64) -> (RawFlow, FlowConstants) {
        let vel = length / time;
        let press = mass / (length * time * time);
        let visc = length * length / time;
        let raw = RawFlow {
            dim: self.dim,
            boundaries: self.boundaries.iter().map(|m| m.scaled(length)).collect(),
            points: &self.points * length,
            velocity: &self.velocity * vel,
            pressure: &self.pressure * press,
            nu_t: &self.nu_t * visc,
            wall_shear: self.wall_shear.as_ref().map(|w| w * press),
            surface: self.surface.clone(),
        };
        let consts = FlowConstants {
            rho: c.rho * mass / length.powi(3),
            nu: c.nu * visc,
            u_inf: c.u_inf.iter().map(|u| u * vel).collect(),
            c_ref: c.c_ref * length,
        };
        (raw, consts)
    }
}

/// Name of the free-stream direction global vector.
pub const FREESTREAM_DIRECTION: &str = "U_dir";

/// Converts dimensional data to a unit-free sample with the aerodynamic
/// schema. Lengths are divided by `c_ref`, velocities by `|U∞|`, pressures
/// and stresses by `q∞`; reference lengths are `{1, δ_FS / c_ref}`.
pub fn nondimensionalize(raw: &RawFlow, c: &FlowConstants) -> Result<Sample> {
    c.validate()?;
    let d = raw.dim;
    let n = raw.points.nrows();
    if c.u_inf.len() != d || raw.points.ncols() != d || raw.velocity.dim() != (n, d) {
        return Err(Error::Shape("velocity and points must be n x d".into()));
    }
    if raw.pressure.len() != n || raw.nu_t.len() != n {
        return Err(Error::Shape("pressure and nu_t need one value per point".into()));
    }
    let speed = c.speed();
    let q_inf = c.q_inf();
    let schema = FieldSchema::aerodynamic();
    let mut values = Array2::zeros((n, schema.width(d)));
    let mut mask = Array2::from_elem((n, schema.n_fields()), true);
    let check = |field: &str, i: usize, v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteField {
                field: field.into(),
                index: i,
            })
        }
    };
    for i in 0..n {
        let u = raw.velocity.row(i);
        let mut u2 = 0.0;
        for k in 0..d {
            let uk = check("U", i, u[k])? / speed;
            u2 += uk * uk;
            values[[i, 3 + k]] = uk - c.u_inf[k] / speed;
        }
        let p = check("p", i, raw.pressure[i])?;
        let cp = p / q_inf;
        values[[i, 0]] = cp;
        // (p + q) / q∞ with q = q∞ |U / |U∞||²
        values[[i, 1]] = cp + u2;
        values[[i, 2]] = (check("nu_t", i, raw.nu_t[i])? / c.nu).ln_1p();
        match &raw.wall_shear {
            Some(w) => {
                for k in 0..d {
                    values[[i, 3 + d + k]] = check("wall_shear", i, w[[i, k]])? / q_inf;
                }
            }
            None => mask[[i, 4]] = false,
        }
    }
    let boundaries = crate::geometry::merge_by_bc(&raw.boundaries.iter().map(|m| m.scaled(1.0 / c.c_ref)).collect::<Vec<_>>())?;
    let sample = Sample {
        dim: d,
        boundaries,
        global_scalars: Vec::new(),
        global_vectors: vec![(FREESTREAM_DIRECTION.into(), c.u_inf.iter().map(|u| u / speed).collect())],
        reference_lengths: vec![1.0, c.delta_fs() / c.c_ref],
        queries: &raw.points / c.c_ref,
        targets: Some(FieldSet::new(d, schema, values)?),
        mask: Some(mask),
        surface: if raw.surface.is_empty() { vec![false; n] } else { raw.surface.clone() },
    };
    sample.validate()?;
    Ok(sample)
}

/// Clears the mask of every field at points whose `Cpt` target exceeds
/// [`CPT_LIMIT`] (strictly).
pub fn mask_nonphysical(sample: &Sample) -> Result<Sample> {
    let targets = sample
        .targets
        .as_ref()
        .ok_or_else(|| Error::Schema { missing: vec!["targets".into()] })?;
    let cpt = targets.scalar("Cpt").ok_or_else(|| Error::Schema { missing: vec!["Cpt".into()] })?;
    let mut mask = sample.mask_or_default().unwrap();
    for (i, &v) in cpt.iter().enumerate() {
        if v > CPT_LIMIT {
            mask.row_mut(i).fill(false);
        }
    }
    Ok(Sample {
        mask: Some(mask),
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Face;
    use ndarray::array;

    fn consts() -> FlowConstants {
        FlowConstants {
            rho: 1.2,
            nu: 1.5e-5,
            u_inf: vec![30.0, 4.0],
            c_ref: 0.8,
        }
    }

    fn raw(velocity: Array2<f64>, pressure: Array1<f64>, nu_t: Array1<f64>) -> RawFlow {
        let n = velocity.nrows();
        RawFlow {
            dim: 2,
            boundaries: vec![BoundaryMesh::new(
                2,
                "no_slip",
                vec![Face::new(vec![0.4, 0.0], vec![1.0, 0.0], 0.05).unwrap()],
            )
            .unwrap()],
            points: Array2::from_shape_fn((n, 2), |(i, k)| (i + k) as f64 * 0.3),
            velocity,
            pressure,
            nu_t,
            wall_shear: None,
            surface: vec![],
        }
    }

    #[test]
    fn freestream_state() {
        let c = consts();
        let s = nondimensionalize(&raw(array![[30.0, 4.0]], array![0.0], array![0.0]), &c).unwrap();
        let t = s.targets.unwrap();
        assert_eq!(t.scalar("Cp").unwrap()[0], 0.0);
        assert!((t.scalar("Cpt").unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(t.scalar("ln_nut").unwrap()[0], 0.0);
        assert!(t.vector("dU").unwrap().iter().all(|v| v.abs() < 1e-16));
        assert!(!s.mask.unwrap()[[0, 4]], "no wall shear provided");
        let dir = s.global_vectors[0].1.clone();
        assert!((dir[0] * dir[0] + dir[1] * dir[1] - 1.0).abs() < 1e-15);
        assert_eq!(s.reference_lengths[0], 1.0);
        assert!((s.reference_lengths[1] - c.delta_fs() / 0.8).abs() < 1e-18);
    }

    #[test]
    fn stagnation_point() {
        let c = consts();
        let q = c.q_inf();
        let s = nondimensionalize(&raw(array![[0.0, 0.0]], array![q], array![0.0]), &c).unwrap();
        let t = s.targets.unwrap();
        assert!((t.scalar("Cp").unwrap()[0] - 1.0).abs() < 1e-15);
        assert!((t.scalar("Cpt").unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn turbulent_viscosity_ratio() {
        let c = consts();
        let s = nondimensionalize(&raw(array![[1.0, 0.0]], array![0.0], array![c.nu * (1f64.exp() - 1.0)]), &c).unwrap();
        assert!((s.targets.unwrap().scalar("ln_nut").unwrap()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_field_is_reported() {
        let err = nondimensionalize(&raw(array![[1.0, 0.0], [1.0, f64::NAN]], array![0.0, 0.0], array![0.0, 0.0]), &consts())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteField { index: 1, .. }), "{err}");
    }

    #[test]
    fn unit_change_gives_same_sample() {
        let c = consts();
        let mut r = raw(
            array![[12.0, -3.0], [0.5, 2.0], [29.0, 5.0]],
            array![100.0, -20.0, 3.5],
            array![1e-4, 0.0, 3e-5],
        );
        r.wall_shear = Some(array![[0.1, 0.2], [0.0, -0.3], [1.0, 0.0]]);
        let base = nondimensionalize(&r, &c).unwrap();
        for (l, t, m) in [(1.0 / 0.3048, 1.0, 1.0), (100.0, 1.0, 1000.0), (0.3048, 7.0, 0.45)] {
            let (r2, c2) = r.in_units(&c, l, t, m);
            let other = nondimensionalize(&r2, &c2).unwrap();
            let close = |a: &Array2<f64>, b: &Array2<f64>| {
                a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
            };
            assert!(close(&other.targets.as_ref().unwrap().values, &base.targets.as_ref().unwrap().values));
            assert!(close(&other.queries, &base.queries));
            for (x, y) in other.reference_lengths.iter().zip(&base.reference_lengths) {
                assert!((x - y).abs() <= 1e-12 * y);
            }
            let (ma, mb) = (&other.boundaries["no_slip"], &base.boundaries["no_slip"]);
            assert!((ma.faces[0].area - mb.faces[0].area).abs() <= 1e-12 * mb.faces[0].area);
        }
    }

    fn with_cpt(values: &[f64]) -> Sample {
        let n = values.len();
        let schema = FieldSchema::aerodynamic();
        let mut v = Array2::zeros((n, schema.width(2)));
        for (i, &x) in values.iter().enumerate() {
            v[[i, 1]] = x;
        }
        Sample {
            dim: 2,
            boundaries: BTreeMap::new(),
            global_scalars: vec![],
            global_vectors: vec![],
            reference_lengths: vec![1.0],
            queries: Array2::zeros((n, 2)),
            targets: Some(FieldSet::new(2, schema, v).unwrap()),
            mask: None,
            surface: vec![false; n],
        }
    }

    #[test]
    fn masking_is_strict_and_row_wide() {
        let m = mask_nonphysical(&with_cpt(&[1.0, 1.05, 1.02, 0.3])).unwrap().mask.unwrap();
        assert!(m.row(0).iter().all(|&b| b));
        assert!(m.row(1).iter().all(|&b| !b));
        assert!(m.row(2).iter().all(|&b| b), "1.02 itself is kept");
        assert!(m.row(3).iter().all(|&b| b));
        let all = mask_nonphysical(&with_cpt(&[1.0; 5])).unwrap().mask.unwrap();
        assert!(all.iter().all(|&b| b));
    }

    #[test]
    fn field_projection_and_schema_errors() {
        let f = FieldSet::new(2, FieldSchema::new(["a", "b"], ["v"]), array![[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let p = f.project(&FieldSchema::new(["b"], ["v"])).unwrap();
        assert_eq!(p.values, array![[2.0, 3.0, 4.0]]);
        match f.project(&FieldSchema::new(["c"], ["v", "w"])) {
            Err(Error::Schema { missing }) => assert_eq!(missing, vec!["c".to_string(), "w".into()]),
            other => panic!("{other:?}"),
        }
        assert_eq!(f.vector("v").unwrap().to_owned(), array![[3.0, 4.0]]);
        assert!(f.vector("a").is_none());
    }
}
