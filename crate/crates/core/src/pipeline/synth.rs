//! Analytic training oracles: potential flow past a circular cylinder and
//! superposed 2-D Laplace monopoles.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use ndarray::{Array1, Array2};
use rand::Rng;

use super::{mask_nonphysical, nondimensionalize, FieldSchema, FieldSet, FlowConstants, RawFlow, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BoundaryMesh, Face};
use crate::rng;

/// Dimensional set-up of one cylinder sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderConfig {
    pub radius: f64,
    /// Free-stream direction, radians from +x.
    pub angle: f64,
    pub speed: f64,
    pub rho: f64,
    /// Chosen so that `δ_FS / c_ref` equals this value.
    pub delta_ratio: f64,
    pub n_faces: usize,
    pub n_query: usize,
    pub outward_normals: bool,
}

impl Default for CylinderConfig {
    fn default() -> Self {
        CylinderConfig {
            radius: 0.5,
            angle: 0.0,
            speed: 10.0,
            rho: 1.0,
            delta_ratio: 0.01,
            n_faces: 64,
            n_query: 512,
            outward_normals: true,
        }
    }
}

/// Surface pressure coefficient `1 - 4 sin²θ`, θ measured from the
/// free-stream direction.
pub fn cylinder_surface_cp(theta: f64) -> f64 {
    1.0 - 4.0 * theta.sin().powi(2)
}

/// Velocity of uniform flow `speed` at `angle` past a cylinder of `radius`
/// centred at the origin.
fn cylinder_velocity(x: f64, y: f64, radius: f64, speed: f64, angle: f64) -> [f64; 2] {
    let r2 = x * x + y * y;
    let theta = y.atan2(x);
    let phi = theta - angle;
    let k = radius * radius / r2;
    let ur = speed * (1.0 - k) * phi.cos();
    let ut = -speed * (1.0 + k) * phi.sin();
    let (s, c) = theta.sin_cos();
    [ur * c - ut * s, ur * s + ut * c]
}

/// Dimensional cylinder data: boundary faces, probe points and the
/// analytic inviscid solution with gauge pressure.
pub fn gen_cylinder_raw(cfg: &CylinderConfig, seed: u64) -> Result<(RawFlow, FlowConstants)> {
    if cfg.n_faces < 8 {
        return Err(Error::Domain(format!("need at least 8 boundary faces, got {}", cfg.n_faces)));
    }
    if !(cfg.radius > 0.0 && cfg.speed > 0.0 && cfg.delta_ratio > 0.0) {
        return Err(Error::Domain("radius, speed and delta_ratio must be positive".into()));
    }
    let big_r = cfg.radius;
    let c_ref = 2.0 * big_r;
    // δ = sqrt(ν c / U) = ratio · c  ⇒  ν = ratio² c U
    let nu = cfg.delta_ratio.powi(2) * c_ref * cfg.speed;
    let consts = FlowConstants {
        rho: cfg.rho,
        nu,
        u_inf: vec![cfg.speed * cfg.angle.cos(), cfg.speed * cfg.angle.sin()],
        c_ref,
    };
    let sign = if cfg.outward_normals { 1.0 } else { -1.0 };
    let faces = (0..cfg.n_faces)
        .map(|i| {
            let t = (i as f64 + 0.5) / cfg.n_faces as f64 * TAU;
            let (s, c) = t.sin_cos();
            Face::new(vec![big_r * c, big_r * s], vec![sign * c, sign * s], TAU * big_r / cfg.n_faces as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let mesh = BoundaryMesh::new(2, "free_slip", faces)?;

    let mut r = rng::stream(seed, "queries");
    let n = cfg.n_query;
    let mut points = Array2::zeros((n, 2));
    let mut surface = vec![false; n];
    for i in 0..n {
        let theta = r.random_range(0.0..TAU);
        let radius = if i % 2 == 0 {
            // area-uniform in the annulus R..10R
            (r.random_range(1.0..100.0f64)).sqrt() * big_r
        } else {
            let offset = 10f64.powf(r.random_range(-3.0..0.0));
            surface[i] = offset <= 1e-2;
            big_r * (1.0 + offset)
        };
        points[[i, 0]] = radius * theta.cos();
        points[[i, 1]] = radius * theta.sin();
    }
    let q_inf = consts.q_inf();
    let mut velocity = Array2::zeros((n, 2));
    let mut pressure = Array1::zeros(n);
    for i in 0..n {
        let u = cylinder_velocity(points[[i, 0]], points[[i, 1]], big_r, cfg.speed, cfg.angle);
        velocity[[i, 0]] = u[0];
        velocity[[i, 1]] = u[1];
        pressure[i] = q_inf * (1.0 - (u[0] * u[0] + u[1] * u[1]) / (cfg.speed * cfg.speed));
    }
    let raw = RawFlow {
        dim: 2,
        boundaries: vec![mesh],
        points,
        velocity,
        pressure,
        nu_t: Array1::zeros(n),
        wall_shear: None,
        surface,
    };
    Ok((raw, consts))
}

/// Nondimensional, masked cylinder sample.
pub fn gen_cylinder_sample(cfg: &CylinderConfig, seed: u64) -> Result<Sample> {
    let (raw, consts) = gen_cylinder_raw(cfg, seed)?;
    mask_nonphysical(&nondimensionalize(&raw, &consts)?)
}

/// A 2-D point source of signed strength `q`: `φ = q ln r / 2π`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monopole {
    pub position: [f64; 2],
    pub strength: f64,
}

/// Set-up of Laplace monopole samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceConfig {
    pub min_sources: usize,
    pub max_sources: usize,
    /// Sources lie in `[-h, h]²`.
    pub source_half_width: f64,
    /// Queries lie in `[-h, h]²`.
    pub query_half_width: f64,
    pub min_strength: f64,
    pub max_strength: f64,
    pub positive_only: bool,
    /// Each monopole is a ring of outward faces of this radius.
    pub ring_radius: f64,
    pub faces_per_source: usize,
    /// Queries closer than this to a source are rejected.
    pub min_distance: f64,
    pub reference_length: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig {
            min_sources: 1,
            max_sources: 3,
            source_half_width: 1.0,
            query_half_width: 1.5,
            min_strength: 0.5,
            max_strength: 1.5,
            positive_only: false,
            ring_radius: 0.02,
            faces_per_source: 8,
            min_distance: 0.05,
            reference_length: 1.0,
        }
    }
}

impl LaplaceConfig {
    pub fn random_monopoles(&self, seed: u64) -> Vec<Monopole> {
        let mut r = rng::stream(seed, "monopoles");
        let n = r.random_range(self.min_sources..=self.max_sources);
        let h = self.source_half_width;
        (0..n)
            .map(|_| {
                let mag = r.random_range(self.min_strength..=self.max_strength);
                let sign = if self.positive_only || r.random_bool(0.5) { 1.0 } else { -1.0 };
                Monopole {
                    position: [r.random_range(-h..h), r.random_range(-h..h)],
                    strength: sign * mag,
                }
            })
            .collect()
    }
}

/// `φ(x)` and `∇φ(x)` of superposed monopoles.
pub fn laplace_field(sources: &[Monopole], x: [f64; 2]) -> (f64, [f64; 2]) {
    let mut phi = 0.0;
    let mut grad = [0.0; 2];
    for m in sources {
        let dx = x[0] - m.position[0];
        let dy = x[1] - m.position[1];
        let r2 = dx * dx + dy * dy;
        phi += m.strength * r2.ln() / (4.0 * PI);
        grad[0] += m.strength * dx / (TAU * r2);
        grad[1] += m.strength * dy / (TAU * r2);
    }
    (phi, grad)
}

/// Boundary partitions `source_pos` / `source_neg`: each monopole becomes a
/// ring of outward faces whose areas sum to `|q|`. Targets are `phi` and
/// `grad_phi` at random queries at least `min_distance` from every source.
pub fn gen_laplace_source_sample(sources: &[Monopole], cfg: &LaplaceConfig, n_query: usize, seed: u64) -> Result<Sample> {
    if sources.is_empty() {
        return Err(Error::Domain("at least one monopole is required".into()));
    }
    let k = cfg.faces_per_source.max(1);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for m in sources {
        for j in 0..k {
            let t = (j as f64 + 0.5) / k as f64 * TAU;
            let (s, c) = t.sin_cos();
            let face = Face::new(
                vec![m.position[0] + cfg.ring_radius * c, m.position[1] + cfg.ring_radius * s],
                vec![c, s],
                m.strength.abs() / k as f64,
            )?;
            if m.strength >= 0.0 { &mut pos } else { &mut neg }.push(face);
        }
    }
    let mut boundaries = BTreeMap::new();
    if !pos.is_empty() {
        boundaries.insert("source_pos".to_string(), BoundaryMesh::new(2, "source_pos", pos)?);
    }
    if !neg.is_empty() {
        boundaries.insert("source_neg".to_string(), BoundaryMesh::new(2, "source_neg", neg)?);
    }

    let mut r = rng::stream(seed, "queries");
    let h = cfg.query_half_width;
    let mut points = Vec::with_capacity(n_query);
    let mut attempts = 0usize;
    while points.len() < n_query {
        attempts += 1;
        if attempts > 1000 * (n_query + 1) {
            return Err(Error::Domain("could not place queries away from the sources".into()));
        }
        let p = [r.random_range(-h..h), r.random_range(-h..h)];
        let clear = sources.iter().all(|m| {
            let (dx, dy) = (p[0] - m.position[0], p[1] - m.position[1]);
            (dx * dx + dy * dy).sqrt() > cfg.min_distance
        });
        if clear {
            points.push(p);
        }
    }
    let queries = Array2::from_shape_fn((n_query, 2), |(i, c)| points[i][c]);
    let schema = FieldSchema::laplace();
    let mut values = Array2::zeros((n_query, schema.width(2)));
    for (i, p) in points.iter().enumerate() {
        let (phi, g) = laplace_field(sources, *p);
        values[[i, 0]] = phi;
        values[[i, 1]] = g[0];
        values[[i, 2]] = g[1];
    }
    let sample = Sample {
        dim: 2,
        boundaries,
        global_scalars: Vec::new(),
        global_vectors: Vec::new(),
        reference_lengths: vec![cfg.reference_length],
        queries,
        targets: Some(FieldSet::new(2, schema.clone(), values)?),
        mask: Some(Array2::from_elem((n_query, schema.n_fields()), true)),
        surface: vec![false; n_query],
    };
    sample.validate()?;
    Ok(sample)
}
