//! Torus-invariant Kähler metrics as convex potentials on ℝⁿ.
//!
//! A metric in the anticanonical class is represented in log coordinates of
//! the open orbit by φ = φ₀ + ψ, where φ₀(x) = log Σ_{u ∈ P∩ℤⁿ} e^{⟨u,x⟩} is
//! the reference potential and ψ a bounded relative potential on a uniform
//! grid over [−R, R]ⁿ. The volume form is det D²φ dx and the total volume is
//! identified with the Euclidean volume of P (the universal constant cancels
//! in every normalized functional).
//!
//! The normalized Ricci potential is
//!   ρ = log c − φ − log det D²φ,   c = V / ∫ e^{−φ} dx,
//! so that ∫ e^ρ det D²φ dx = V holds by construction and the canonical
//! probability measure is e^{−φ} dx / ∫ e^{−φ} dx.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{quadrature, PField, Polytope, Quadrature};

/// Default tolerance for the enforced normalization ∫ e^ρ det D²φ = V.
pub const TOL_NORM: f64 = 1e-8;
/// Default relative boundary-mass tolerance (fraction of V) before a grid is
/// rejected as too small.
pub const TOL_BC: f64 = 1e-6;
/// Density floor below which relative entropy returns the +∞ sentinel.
pub const TOL_FLOOR: f64 = 1e-300;
/// Facet slack below which a quadrature node counts as boundary layer and the
/// Legendre transform is allowed to saturate on the box edge.
const INTERIOR_SLACK: f64 = 0.02;

/// Uniform grid on [−R, R]ⁿ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub box_radius: f64,
    pub nodes_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, box_radius: f64, nodes_per_axis: usize) -> Self {
        assert!(dim == 1 || dim == 2, "supported dimensions are 1 and 2");
        assert!(nodes_per_axis >= 33, "grid needs at least 33 nodes per axis");
        assert!(box_radius > 0.0);
        Self {
            dim,
            box_radius,
            nodes_per_axis,
        }
    }

    pub fn h(&self) -> f64 {
        2.0 * self.box_radius / (self.nodes_per_axis - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.box_radius + self.h() * i as f64
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let m = self.nodes_per_axis;
        match self.dim {
            1 => vec![self.coord(idx)],
            _ => vec![self.coord(idx / m), self.coord(idx % m)],
        }
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let m = self.nodes_per_axis;
        match self.dim {
            1 => idx == 0 || idx == m - 1,
            _ => {
                let (i, j) = (idx / m, idx % m);
                i == 0 || j == 0 || i == m - 1 || j == m - 1
            }
        }
    }

    /// Trapezoid weight of a node (hⁿ with halving on each boundary face).
    pub fn weight(&self, idx: usize) -> f64 {
        let m = self.nodes_per_axis;
        let h = self.h();
        let axis_w = |i: usize| if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
        match self.dim {
            1 => h * axis_w(idx),
            _ => h * h * axis_w(idx / m) * axis_w(idx % m),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    pub fn integrate(&self, field: &[f64]) -> f64 {
        (0..self.len()).map(|i| self.weight(i) * field[i]).sum()
    }
}

/// Second-derivative fields of a grid function. Centered differences at
/// interior nodes, one-sided second differences on the box boundary.
#[derive(Debug, Clone)]
pub struct Hessian {
    pub det: Vec<f64>,
    pub trace: Vec<f64>,
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub xy: Vec<f64>,
}

fn d2_1d(f: &[f64], i: usize, m: usize, h2: f64) -> f64 {
    if i == 0 {
        (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h2
    } else if i == m - 1 {
        (2.0 * f[m - 1] - 5.0 * f[m - 2] + 4.0 * f[m - 3] - f[m - 4]) / h2
    } else {
        (f[i + 1] - 2.0 * f[i] + f[i - 1]) / h2
    }
}

pub fn hessian(grid: &GridSpec, phi: &[f64]) -> Hessian {
    let m = grid.nodes_per_axis;
    let h2 = grid.h() * grid.h();
    let n = grid.len();
    match grid.dim {
        1 => {
            let mut xx = vec![0.0; n];
            for i in 0..m {
                xx[i] = d2_1d(phi, i, m, h2);
            }
            Hessian {
                det: xx.clone(),
                trace: xx.clone(),
                yy: vec![0.0; n],
                xy: vec![0.0; n],
                xx,
            }
        }
        _ => {
            let mut xx = vec![0.0; n];
            let mut yy = vec![0.0; n];
            let mut xy = vec![0.0; n];
            let at = |i: usize, j: usize| i * m + j;
            for i in 0..m {
                for j in 0..m {
                    let idx = at(i, j);
                    // along x (index i) with column j fixed
                    xx[idx] = if i == 0 {
                        (2.0 * phi[at(0, j)] - 5.0 * phi[at(1, j)] + 4.0 * phi[at(2, j)]
                            - phi[at(3, j)])
                            / h2
                    } else if i == m - 1 {
                        (2.0 * phi[at(m - 1, j)] - 5.0 * phi[at(m - 2, j)]
                            + 4.0 * phi[at(m - 3, j)]
                            - phi[at(m - 4, j)])
                            / h2
                    } else {
                        (phi[at(i + 1, j)] - 2.0 * phi[idx] + phi[at(i - 1, j)]) / h2
                    };
                    yy[idx] = if j == 0 {
                        (2.0 * phi[at(i, 0)] - 5.0 * phi[at(i, 1)] + 4.0 * phi[at(i, 2)]
                            - phi[at(i, 3)])
                            / h2
                    } else if j == m - 1 {
                        (2.0 * phi[at(i, m - 1)] - 5.0 * phi[at(i, m - 2)]
                            + 4.0 * phi[at(i, m - 3)]
                            - phi[at(i, m - 4)])
                            / h2
                    } else {
                        (phi[at(i, j + 1)] - 2.0 * phi[idx] + phi[at(i, j - 1)]) / h2
                    };
                    // mixed derivative: centered at the clamped interior node
                    let ic = i.clamp(1, m - 2);
                    let jc = j.clamp(1, m - 2);
                    xy[idx] = (phi[at(ic + 1, jc + 1)] - phi[at(ic + 1, jc - 1)]
                        - phi[at(ic - 1, jc + 1)]
                        + phi[at(ic - 1, jc - 1)])
                        / (4.0 * h2);
                }
            }
            let mut det = vec![0.0; n];
            let mut trace = vec![0.0; n];
            for idx in 0..n {
                det[idx] = xx[idx] * yy[idx] - xy[idx] * xy[idx];
                trace[idx] = xx[idx] + yy[idx];
            }
            Hessian {
                det,
                trace,
                xx,
                yy,
                xy,
            }
        }
    }
}

/// Reference potential φ₀(x) = log Σ_{u ∈ P∩ℤⁿ} e^{⟨u,x⟩}, evaluated with a
/// max shift. Smooth, convex, gradient image the interior of P.
///
/// Gradient and Hessian have closed forms: the mean and covariance of the
/// lattice points under the softmax weights. Using them instead of finite
/// differences keeps ρ accurate in the far field, where second differences
/// of the O(|x|) potential are destroyed by cancellation.
pub struct ReferencePotential {
    points: Vec<Vec<f64>>,
}

impl ReferencePotential {
    pub fn new(p: &Polytope) -> Self {
        let points = p
            .lattice_points(1)
            .into_iter()
            .map(|u| u.into_iter().map(|c| c as f64).collect())
            .collect();
        Self { points }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for u in &self.points {
            let d: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            if d > best {
                best = d;
            }
        }
        let mut s = 0.0;
        for u in &self.points {
            let d: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            s += (d - best).exp();
        }
        best + s.ln()
    }

    /// Value, gradient and Hessian components (xx, yy, xy) at x.
    pub fn eval_full(&self, x: &[f64]) -> (f64, Vec<f64>, [f64; 3]) {
        let dim = x.len();
        let mut best = f64::NEG_INFINITY;
        for u in &self.points {
            let d: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            if d > best {
                best = d;
            }
        }
        let mut z = 0.0;
        let mut mean = vec![0.0; dim];
        let mut m2 = [0.0; 3];
        for u in &self.points {
            let d: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            let w = (d - best).exp();
            z += w;
            for k in 0..dim {
                mean[k] += w * u[k];
            }
            m2[0] += w * u[0] * u[0];
            if dim == 2 {
                m2[1] += w * u[1] * u[1];
                m2[2] += w * u[0] * u[1];
            }
        }
        for k in 0..dim {
            mean[k] /= z;
        }
        let xx = m2[0] / z - mean[0] * mean[0];
        let (yy, xy) = if dim == 2 {
            (
                m2[1] / z - mean[1] * mean[1],
                m2[2] / z - mean[0] * mean[1],
            )
        } else {
            (0.0, 0.0)
        };
        (best + z.ln(), mean, [xx, yy, xy])
    }
}

pub fn reference_potential(p: &Polytope) -> impl Fn(&[f64]) -> f64 {
    let rp = ReferencePotential::new(p);
    move |x| rp.eval(x)
}

/// A torus-invariant metric: grid, relative potential and cached reference
/// values/Hessian.
#[derive(Debug, Clone)]
pub struct ToricMetric {
    polytope: Arc<Polytope>,
    grid: GridSpec,
    psi: Vec<f64>,
    phi0: Arc<Vec<f64>>,
    hess0: Arc<Hessian>,
}

impl ToricMetric {
    /// Validating constructor: requires discrete convexity of φ₀ + ψ at every
    /// interior node.
    pub fn new(polytope: Arc<Polytope>, grid: GridSpec, psi: Vec<f64>) -> Result<Self> {
        assert_eq!(grid.dim, polytope.dim());
        assert_eq!(psi.len(), grid.len());
        let rp = ReferencePotential::new(&polytope);
        let n = grid.len();
        let mut phi0 = Vec::with_capacity(n);
        let mut xx = vec![0.0; n];
        let mut yy = vec![0.0; n];
        let mut xy = vec![0.0; n];
        for i in 0..n {
            let (v, _grad, h) = rp.eval_full(&grid.node(i));
            phi0.push(v);
            xx[i] = h[0];
            yy[i] = h[1];
            xy[i] = h[2];
        }
        let (det, trace) = match grid.dim {
            1 => (xx.clone(), xx.clone()),
            _ => {
                let det: Vec<f64> = (0..n).map(|i| xx[i] * yy[i] - xy[i] * xy[i]).collect();
                let trace: Vec<f64> = (0..n).map(|i| xx[i] + yy[i]).collect();
                (det, trace)
            }
        };
        let hess0 = Hessian {
            det,
            trace,
            xx,
            yy,
            xy,
        };
        let m = Self {
            polytope,
            grid,
            psi,
            phi0: Arc::new(phi0),
            hess0: Arc::new(hess0),
        };
        m.check_convex()?;
        Ok(m)
    }

    /// The reference metric ψ ≡ 0.
    pub fn reference(polytope: Arc<Polytope>, grid: GridSpec) -> Self {
        Self::new(polytope, grid, vec![0.0; grid.len()]).expect("reference metric is convex")
    }

    pub fn polytope(&self) -> &Arc<Polytope> {
        &self.polytope
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn phi0(&self) -> &Arc<Vec<f64>> {
        &self.phi0
    }

    pub fn full_potential(&self) -> Vec<f64> {
        self.phi0
            .iter()
            .zip(&self.psi)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Same grid and reference, new relative potential.
    pub fn with_psi(&self, psi: Vec<f64>) -> Result<Self> {
        let m = self.with_psi_unchecked(psi);
        m.check_convex()?;
        Ok(m)
    }

    /// Unchecked variant for flow internals that validate separately.
    pub(crate) fn with_psi_unchecked(&self, psi: Vec<f64>) -> Self {
        assert_eq!(psi.len(), self.grid.len());
        Self {
            polytope: self.polytope.clone(),
            grid: self.grid,
            psi,
            phi0: self.phi0.clone(),
            hess0: self.hess0.clone(),
        }
    }

    /// Hessian of φ = φ₀ + ψ: analytic reference part plus finite differences
    /// of the bounded relative potential.
    pub fn metric_hessian(&self) -> Hessian {
        let mut h = hessian(&self.grid, &self.psi);
        let n = self.grid.len();
        let h0 = &*self.hess0;
        for i in 0..n {
            h.xx[i] += h0.xx[i];
            h.yy[i] += h0.yy[i];
            h.xy[i] += h0.xy[i];
        }
        match self.grid.dim {
            1 => {
                for i in 0..n {
                    h.det[i] = h.xx[i];
                    h.trace[i] = h.xx[i];
                }
            }
            _ => {
                for i in 0..n {
                    h.det[i] = h.xx[i] * h.yy[i] - h.xy[i] * h.xy[i];
                    h.trace[i] = h.xx[i] + h.yy[i];
                }
            }
        }
        h
    }

    fn check_convex(&self) -> Result<()> {
        let hess = self.metric_hessian();
        convexity_defect(&self.grid, &hess).map(|_| ())
    }

    /// ψ dump with grid header; one value per line.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# dim={} nodes_per_axis={} box_radius={}\n",
            self.grid.dim, self.grid.nodes_per_axis, self.grid.box_radius
        );
        for v in &self.psi {
            s.push_str(&format!("{v:.17e}\n"));
        }
        s
    }

    pub fn from_csv(polytope: Arc<Polytope>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::ConfigInvalid("empty metric dump".into()))?;
        let mut dim = 0usize;
        let mut m = 0usize;
        let mut r = 0.0f64;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                match k {
                    "dim" => dim = v.parse().map_err(|_| Error::ConfigInvalid("dim".into()))?,
                    "nodes_per_axis" => {
                        m = v
                            .parse()
                            .map_err(|_| Error::ConfigInvalid("nodes_per_axis".into()))?
                    }
                    "box_radius" => {
                        r = v
                            .parse()
                            .map_err(|_| Error::ConfigInvalid("box_radius".into()))?
                    }
                    _ => {}
                }
            }
        }
        let grid = GridSpec::new(dim, r, m);
        let psi: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ConfigInvalid("bad value in metric dump".into()))?;
        if psi.len() != grid.len() {
            return Err(Error::ConfigInvalid(format!(
                "metric dump has {} values, grid needs {}",
                psi.len(),
                grid.len()
            )));
        }
        Self::new(polytope, grid, psi)
    }
}

/// Fails with the first non-convex node; returns the margin otherwise.
pub fn convexity_defect(grid: &GridSpec, hess: &Hessian) -> Result<f64> {
    let m = grid.nodes_per_axis;
    let mut margin = f64::INFINITY;
    for idx in 0..grid.len() {
        // interior nodes only; boundary rows use one-sided stencils and are
        // monitored through the boundary-mass check instead
        let interior = match grid.dim {
            1 => idx > 0 && idx < m - 1,
            _ => {
                let (i, j) = (idx / m, idx % m);
                i > 0 && j > 0 && i < m - 1 && j < m - 1
            }
        };
        if !interior {
            continue;
        }
        if !(hess.det[idx] > 0.0 && hess.trace[idx] > 0.0) || !hess.det[idx].is_finite() {
            return Err(Error::NonConvex { node: idx });
        }
        margin = margin.min(hess.det[idx]);
    }
    Ok(margin)
}

/// Ricci-potential data for one metric.
#[derive(Debug, Clone)]
pub struct RhoData {
    pub rho: Vec<f64>,
    /// Normalization constant c = V / ∫ e^{−φ}.
    pub c: f64,
    pub det: Vec<f64>,
    pub exp_rho: Vec<f64>,
    pub hess: Hessian,
    /// ∫ e^{−φ} dx over the box.
    pub mass: f64,
    /// Boundary-ring masses relative to V, for e^{−φ} and det D²φ.
    pub boundary_rel: f64,
}

/// Normalized Ricci potential ρ = log c − φ − log det D²φ.
///
/// The discrete normalization ∫ e^ρ det D²φ dx = V holds by construction of
/// c. Rejects non-convex metrics and grids whose boundary ring carries more
/// than `boundary_tol_rel · V` of either e^{−φ} or det D²φ.
pub fn ricci_potential_with_tol(m: &ToricMetric, boundary_tol_rel: f64) -> Result<RhoData> {
    let grid = m.grid();
    let phi = m.full_potential();
    let hess = m.metric_hessian();
    convexity_defect(grid, &hess)?;
    // log det needs positivity on the boundary ring as well
    for i in 0..grid.len() {
        if !(hess.det[i] > 0.0) {
            return Err(Error::NonConvex { node: i });
        }
    }

    let v = m.polytope().volume_f64();
    let n = grid.len();
    let mut mass = 0.0;
    let mut ring_exp = 0.0;
    let mut ring_det = 0.0;
    for i in 0..n {
        let w = grid.weight(i);
        let e = (-phi[i]).exp();
        mass += w * e;
        if grid.is_boundary(i) {
            ring_exp += w * e;
            ring_det += w * hess.det[i].max(0.0);
        }
    }
    let boundary_rel = (ring_exp / v).max(ring_det / v);
    if boundary_rel > boundary_tol_rel {
        return Err(Error::DomainTooSmall(format!(
            "boundary ring carries {boundary_rel:.3e} of V (tolerance {boundary_tol_rel:.1e}); \
             increase box_radius"
        )));
    }
    let c = v / mass;
    let logc = c.ln();
    let mut rho = vec![0.0; n];
    let mut exp_rho = vec![0.0; n];
    for i in 0..n {
        rho[i] = logc - phi[i] - hess.det[i].ln();
        exp_rho[i] = rho[i].exp();
    }
    Ok(RhoData {
        rho,
        c,
        det: hess.det.clone(),
        exp_rho,
        hess,
        mass,
        boundary_rel,
    })
}

pub fn ricci_potential(m: &ToricMetric) -> Result<(Vec<f64>, f64)> {
    let d = ricci_potential_with_tol(m, TOL_BC)?;
    Ok((d.rho, d.c))
}

/// Evaluated energy functionals of one metric against a baseline on the same
/// grid. D = L − E is always the literal difference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyReport {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub ricci_calabi: f64,
    pub mabuchi: f64,
    pub h_functional: f64,
    pub normalization_const: f64,
}

/// Monge-Ampère energy relative to a baseline, via the normalized mixed
/// Monge-Ampère density (hand-coded for n ≤ 2).
///
/// The density is Σ_i ω^i ∧ ω_b^{n−i}; normalizing by its own discrete mass
/// makes E(ψ + const) = E(ψ) + const exact, which the flow stepper and the
/// first-variation identity both rely on.
pub fn monge_ampere_energy(grid: &GridSpec, psi_rel: &[f64], h_m: &Hessian, h_b: &Hessian) -> f64 {
    let n = grid.len();
    let mut num = 0.0;
    let mut den = 0.0;
    match grid.dim {
        1 => {
            for i in 0..n {
                let w = grid.weight(i);
                let d = h_m.xx[i] + h_b.xx[i];
                num += w * psi_rel[i] * d;
                den += w * d;
            }
        }
        _ => {
            for i in 0..n {
                let w = grid.weight(i);
                let mixed =
                    h_m.xx[i] * h_b.yy[i] + h_m.yy[i] * h_b.xx[i] - 2.0 * h_m.xy[i] * h_b.xy[i];
                let d = h_m.det[i] + 0.5 * mixed + h_b.det[i];
                num += w * psi_rel[i] * d;
                den += w * d;
            }
        }
    }
    num / den
}

pub struct EnergyContext {
    pub rho_m: RhoData,
    pub rho_b: RhoData,
}

/// All functionals at M against `baseline` (same polytope and grid).
pub fn energies(m: &ToricMetric, baseline: &ToricMetric) -> Result<EnergyReport> {
    energies_with_tol(m, baseline, TOL_BC)
}

pub fn energies_with_tol(
    m: &ToricMetric,
    baseline: &ToricMetric,
    boundary_tol_rel: f64,
) -> Result<EnergyReport> {
    assert_eq!(m.grid(), baseline.grid(), "metrics must share a grid");
    let rho_m = ricci_potential_with_tol(m, boundary_tol_rel)?;
    let rho_b = ricci_potential_with_tol(baseline, boundary_tol_rel)?;
    Ok(energies_from_parts(m, baseline, &rho_m, &rho_b))
}

pub fn energies_from_parts(
    m: &ToricMetric,
    baseline: &ToricMetric,
    rho_m: &RhoData,
    rho_b: &RhoData,
) -> EnergyReport {
    let grid = m.grid();
    let v = m.polytope().volume_f64();
    let psi_rel: Vec<f64> = m
        .psi()
        .iter()
        .zip(baseline.psi())
        .map(|(a, b)| a - b)
        .collect();
    let e = monge_ampere_energy(grid, &psi_rel, &rho_m.hess, &rho_b.hess);
    let l = rho_m.c.ln() - rho_b.c.ln();
    let d = l - e;
    let n = grid.len();
    let mut ricci = 0.0;
    let mut h = 0.0;
    let mut rho_g = 0.0;
    let mut rho_g_b = 0.0;
    for i in 0..n {
        let w = grid.weight(i);
        let g = rho_m.det[i];
        let er = rho_m.exp_rho[i];
        ricci += w * (er - 1.0) * (er - 1.0) * g;
        h += w * rho_m.rho[i] * er * g;
        rho_g += w * rho_m.rho[i] * g;
        rho_g_b += w * rho_b.rho[i] * rho_b.det[i];
    }
    ricci /= v;
    h /= v;
    // K-energy in the form D − (1/V)∫ρ ω^n + (1/V)∫ρ_b ω_b^n, which agrees
    // with the entropy decomposition and is monotone along the flow.
    let mabuchi = d - rho_g / v + rho_g_b / v;
    EnergyReport {
        e,
        l,
        d,
        ricci_calabi: ricci,
        mabuchi,
        h_functional: h,
        normalization_const: rho_m.c,
    }
}

/// First variation of D at M in direction δψ, as the canonical-measure
/// pairing ⟨δψ⟩_μ − ⟨δψ⟩_{ω^n}. Both measures are discretely normalized, so
/// δψ ≡ const pairs to zero exactly.
pub fn d_first_variation(m: &ToricMetric, rho: &RhoData, delta: &[f64]) -> f64 {
    let grid = m.grid();
    let phi = m.full_potential();
    let mut mu_num = 0.0;
    let mut mu_den = 0.0;
    let mut ma_num = 0.0;
    let mut ma_den = 0.0;
    for i in 0..grid.len() {
        let w = grid.weight(i);
        let emu = w * (-phi[i]).exp();
        mu_num += emu * delta[i];
        mu_den += emu;
        let g = w * rho.det[i];
        ma_num += g * delta[i];
        ma_den += g;
    }
    mu_num / mu_den - ma_num / ma_den
}

/// Relative entropy ∫ log(ν/μ) ν of two grid densities (with 0·log 0 = 0).
pub fn entropy(grid: &GridSpec, nu: &[f64], mu: &[f64]) -> Result<f64> {
    let total_nu = grid.integrate(nu);
    let total_mu = grid.integrate(mu);
    for (label, t) in [("nu", total_nu), ("mu", total_mu)] {
        if (t - 1.0).abs() > 1e-8 {
            let _ = label;
            return Err(Error::NotNormalized(t));
        }
    }
    let mut s = 0.0;
    for i in 0..grid.len() {
        let n = nu[i];
        if n <= 0.0 {
            continue;
        }
        if mu[i] < TOL_FLOOR {
            if n > 1e-15 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        s += grid.weight(i) * n * (n / mu[i]).ln();
    }
    Ok(s)
}

/// Legendre-dual lower bound ∫ f ν − log ∫ e^f μ ≤ H(ν‖μ) for bounded f.
pub fn entropy_legendre_lower_bound(
    grid: &GridSpec,
    nu: &[f64],
    mu: &[f64],
    f: &[f64],
) -> Result<f64> {
    let total_nu = grid.integrate(nu);
    let total_mu = grid.integrate(mu);
    for t in [total_nu, total_mu] {
        if (t - 1.0).abs() > 1e-8 {
            return Err(Error::NotNormalized(t));
        }
    }
    let mut lin = 0.0;
    let mut fmax = f64::NEG_INFINITY;
    for i in 0..grid.len() {
        lin += grid.weight(i) * f[i] * nu[i];
        if mu[i] > 0.0 && f[i] > fmax {
            fmax = f[i];
        }
    }
    let mut z = 0.0;
    for i in 0..grid.len() {
        if mu[i] > 0.0 {
            z += grid.weight(i) * mu[i] * (f[i] - fmax).exp();
        }
    }
    Ok(lin - (fmax + z.ln()))
}

/// Discrete Legendre transform of φ onto the polytope nodes:
/// u(y) = max over grid nodes x of ⟨x, y⟩ − φ(x).
///
/// Errors with DomainTooSmall when the maximum saturates on the box boundary
/// for a node that sits at facet slack ≥ 0.02 (nodes in the thin boundary
/// layer of P legitimately saturate and contribute O(e^{−R}) errors).
pub fn legendre(m: &ToricMetric, quad: &Quadrature) -> Result<PField> {
    let grid = m.grid();
    let phi = m.full_potential();
    let mgrid = grid.nodes_per_axis;
    let mut out = Vec::with_capacity(quad.len());
    match grid.dim {
        1 => {
            // the argmax is nondecreasing in y for convex φ and ascending nodes
            let mut start = 0usize;
            let mut prev_y = f64::NEG_INFINITY;
            for y in &quad.nodes {
                let yy = y[0];
                if yy < prev_y {
                    start = 0;
                }
                prev_y = yy;
                let mut best_i = start;
                let mut best = f64::NEG_INFINITY;
                for i in start..mgrid {
                    let val = grid.coord(i) * yy - phi[i];
                    if val > best {
                        best = val;
                        best_i = i;
                    } else if i > best_i + 2 {
                        break;
                    }
                }
                start = best_i;
                if (best_i == 0 || best_i == mgrid - 1)
                    && m.polytope().facet_slack(&[yy]) >= INTERIOR_SLACK
                {
                    return Err(Error::DomainTooSmall(format!(
                        "Legendre argmax saturates at the box edge for y = {yy}"
                    )));
                }
                out.push(best);
            }
        }
        _ => {
            for y in &quad.nodes {
                let (y0, y1) = (y[0], y[1]);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for i in 0..mgrid {
                    let xc = grid.coord(i);
                    let row = i * mgrid;
                    let base = xc * y0;
                    for j in 0..mgrid {
                        let val = base + grid.coord(j) * y1 - phi[row + j];
                        if val > best {
                            best = val;
                            best_idx = row + j;
                        }
                    }
                }
                if grid.is_boundary(best_idx) && m.polytope().facet_slack(y) >= INTERIOR_SLACK {
                    return Err(Error::DomainTooSmall(format!(
                        "Legendre argmax saturates at the box edge for y = ({y0}, {y1})"
                    )));
                }
                out.push(best);
            }
        }
    }
    Ok(out)
}

/// Inverse transform: φ(x) = max over P-nodes of ⟨x, y⟩ − u(y), evaluated on
/// a grid. Used for biconjugate checks and ray reconstruction.
pub fn legendre_inverse(u: &[f64], quad: &Quadrature, grid: &GridSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let x = grid.node(idx);
        let mut best = f64::NEG_INFINITY;
        for (y, uv) in quad.nodes.iter().zip(u) {
            let val = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() - uv;
            if val > best {
                best = val;
            }
        }
        out.push(best);
    }
    out
}

/// Smooth random perturbation of the reference metric: a few Gaussian bumps
/// with amplitudes shrunk until discrete convexity holds.
pub fn perturbed_metric(
    polytope: Arc<Polytope>,
    grid: GridSpec,
    seed: u64,
    amplitude: f64,
) -> ToricMetric {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let dim = grid.dim;
    let k = 4;
    let bumps: Vec<(Vec<f64>, f64, f64)> = (0..k)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sigma = rng.gen_range(0.9..1.6);
            let alpha = rng.gen_range(-1.0..1.0);
            (z, sigma, alpha)
        })
        .collect();
    let mut amp = amplitude;
    for _ in 0..40 {
        let psi: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.node(i);
                bumps
                    .iter()
                    .map(|(z, sigma, alpha)| {
                        let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                        amp * alpha * (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum()
            })
            .collect();
        if let Ok(m) = ToricMetric::new(polytope.clone(), grid, psi) {
            return m;
        }
        amp *= 0.5;
    }
    ToricMetric::reference(polytope, grid)
}

/// Closed-form round metric on the interval polytope: φ(x) = 2 log(2 cosh(x/2)).
/// Satisfies e^{−φ} = φ″/2, hence ρ ≡ 0.
///
/// ψ = φ − φ₀ is evaluated through log1p so its far-field values keep full
/// relative precision (both potentials grow like |x| and cancel).
pub fn round_metric_p1(polytope: Arc<Polytope>, grid: GridSpec) -> ToricMetric {
    assert_eq!(grid.dim, 1);
    let psi: Vec<f64> = (0..grid.len())
        .map(|i| {
            let a = grid.node(i)[0].abs();
            let e = (-a).exp();
            2.0 * e.ln_1p() - (e + e * e).ln_1p()
        })
        .collect();
    ToricMetric::new(polytope, grid, psi).expect("round metric is convex")
}

/// Default quadrature used when a module needs integrals over P.
pub fn default_quadrature(p: &Polytope) -> Quadrature {
    quadrature(p, if p.dim() == 1 { 256 } else { 48 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1() -> Arc<Polytope> {
        Arc::new(Polytope::by_name("P1").unwrap())
    }

    #[test]
    fn reference_potential_values() {
        let p = p1();
        let rp = ReferencePotential::new(&p);
        assert!((rp.eval(&[0.0]) - 3.0f64.ln()).abs() < 1e-14);
        // slope saturates at the vertex: φ0(x) − x → 0 as x → ∞
        assert!((rp.eval(&[30.0]) - 30.0).abs() < 1e-12);

        let p2 = Polytope::by_name("P2").unwrap();
        let rp2 = ReferencePotential::new(&p2);
        assert!((rp2.eval(&[0.0, 0.0]) - 10.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn round_metric_has_vanishing_ricci_potential() {
        let p = p1();
        let grid = GridSpec::new(1, 16.0, 65537);
        let m = round_metric_p1(p, grid);
        let (rho, c) = ricci_potential(&m).unwrap();
        let max_rho = rho.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        assert!(max_rho < 1e-6, "max |rho| = {max_rho}");
        assert!((c - 2.0).abs() < 1e-6, "c = {c}");
    }

    #[test]
    fn reference_is_not_kahler_einstein() {
        let p = p1();
        let grid = GridSpec::new(1, 12.0, 513);
        let m = ToricMetric::reference(p, grid);
        let (rho, _) = ricci_potential(&m).unwrap();
        let max_rho = rho.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        assert!(max_rho > 1e-3, "reference should not be KE: {max_rho}");
    }

    #[test]
    fn normalization_is_enforced() {
        let p = p1();
        let grid = GridSpec::new(1, 12.0, 513);
        for seed in [1u64, 2, 3] {
            let m = perturbed_metric(p.clone(), grid, seed, 0.3);
            let d = ricci_potential_with_tol(&m, TOL_BC).unwrap();
            let v = m.polytope().volume_f64();
            let total: f64 = (0..grid.len())
                .map(|i| grid.weight(i) * d.exp_rho[i] * d.det[i])
                .sum();
            assert!(
                ((total / v) - 1.0).abs() < TOL_NORM,
                "normalization off: {}",
                total / v
            );
        }
    }

    #[test]
    fn energy_report_basics() {
        let p = p1();
        let grid = GridSpec::new(1, 15.0, 4097);
        let base = ToricMetric::reference(p.clone(), grid);
        let r0 = energies(&base, &base).unwrap();
        assert_eq!(r0.e, 0.0);
        assert_eq!(r0.l, 0.0);
        assert_eq!(r0.d, 0.0);

        let round = round_metric_p1(p, grid);
        let r1 = energies(&round, &base).unwrap();
        assert!(r1.ricci_calabi < 1e-6, "R = {}", r1.ricci_calabi);
        assert!(r1.h_functional.abs() < 1e-6, "H = {}", r1.h_functional);
        assert_eq!(r1.d, r1.l - r1.e);
    }

    #[test]
    fn shift_invariance_of_normalized_functionals() {
        let p = p1();
        let grid = GridSpec::new(1, 12.0, 513);
        let base = ToricMetric::reference(p.clone(), grid);
        let m = perturbed_metric(p, grid, 7, 0.3);
        let shifted = m
            .with_psi(m.psi().iter().map(|v| v + 3.25).collect())
            .unwrap();
        let a = energies(&m, &base).unwrap();
        let b = energies(&shifted, &base).unwrap();
        assert!((b.e - a.e - 3.25).abs() < 1e-10, "E must shift by c");
        assert!((b.l - a.l - 3.25).abs() < 1e-10, "L must shift by c");
        for (x, y, name) in [
            (a.d, b.d, "D"),
            (a.ricci_calabi, b.ricci_calabi, "R"),
            (a.mabuchi, b.mabuchi, "M"),
            (a.h_functional, b.h_functional, "H"),
        ] {
            assert!((x - y).abs() < 1e-9, "{name} not shift-invariant: {x} vs {y}");
        }
    }

    #[test]
    fn mabuchi_agrees_with_entropy_decomposition() {
        let p = p1();
        let grid = GridSpec::new(1, 12.0, 1025);
        let base = ToricMetric::reference(p.clone(), grid);
        let m = perturbed_metric(p, grid, 11, 0.3);
        let rep = energies(&m, &base).unwrap();

        let rho_m = ricci_potential_with_tol(&m, TOL_BC).unwrap();
        let rho_b = ricci_potential_with_tol(&base, TOL_BC).unwrap();
        let v = m.polytope().volume_f64();
        let n = grid.len();
        let mut ent = 0.0;
        let mut psi_g = 0.0;
        let mut corr = 0.0;
        for i in 0..n {
            let w = grid.weight(i);
            let g = rho_m.det[i];
            let gb = rho_b.det[i];
            ent += w * g * (g / gb).ln();
            psi_g += w * (m.psi()[i] - base.psi()[i]) * g;
            corr += w * rho_b.rho[i] * (gb - g);
        }
        let route2 = ent / v + psi_g / v - rep.e + corr / v;
        assert!(
            (route2 - rep.mabuchi).abs() < 1e-6,
            "mabuchi routes disagree: {} vs {}",
            rep.mabuchi,
            route2
        );
    }

    #[test]
    fn entropy_gaussians_and_bounds() {
        let grid = GridSpec::new(1, 14.0, 4097);
        let gauss = |s2: f64| -> Vec<f64> {
            (0..grid.len())
                .map(|i| {
                    let x = grid.node(i)[0];
                    (-x * x / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
                })
                .collect()
        };
        let nu = gauss(1.0);
        let mu = gauss(2.0);
        let kl = entropy(&grid, &nu, &mu).unwrap();
        let exact = 0.5 * (0.5 - 1.0 + 2.0f64.ln());
        assert!((kl - exact).abs() < 1e-4, "KL = {kl}, exact = {exact}");
        assert!(entropy(&grid, &nu, &nu).unwrap().abs() < 1e-12);
        assert!(kl >= 0.0);

        // Legendre dual lower bound, nearly attained at f = log(nu/mu)
        let f: Vec<f64> = nu
            .iter()
            .zip(&mu)
            .map(|(n, m)| (n.max(1e-280) / m.max(1e-280)).ln().clamp(-40.0, 40.0))
            .collect();
        let lb = entropy_legendre_lower_bound(&grid, &nu, &mu, &f).unwrap();
        assert!(lb <= kl + 1e-8);
        assert!((lb - kl).abs() < 1e-4, "duality gap {}", (kl - lb).abs());
        // constants give zero
        let c = vec![2.0; grid.len()];
        let z = entropy_legendre_lower_bound(&grid, &nu, &mu, &c).unwrap();
        assert!(z.abs() < 1e-10);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        let grid = GridSpec::new(1, 5.0, 65);
        let nu = vec![1.0; grid.len()];
        let mu = vec![0.1; grid.len()];
        assert!(matches!(
            entropy(&grid, &nu, &mu),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn legendre_of_round_metric() {
        let p = p1();
        let grid = GridSpec::new(1, 14.0, 4097);
        let m = round_metric_p1(p.clone(), grid);
        let quad = quadrature(&p, 128);
        let u = legendre(&m, &quad).unwrap();
        // u(y) = (1+y)log(1+y) + (1−y)log(1−y) up to an affine term; the
        // constant is −2 log 2 and the linear term vanishes by symmetry.
        let closed = |y: f64| {
            (1.0 + y) * (1.0 + y).ln() + (1.0 - y) * (1.0 - y).ln() - 2.0 * 2.0f64.ln()
        };
        let probe = |y: f64| -> f64 {
            // nearest quadrature node
            let (mut bi, mut bd) = (0usize, f64::INFINITY);
            for (i, nodeval) in quad.nodes.iter().enumerate() {
                let d = (nodeval[0] - y).abs();
                if d < bd {
                    bd = d;
                    bi = i;
                }
            }
            u[bi] - closed(quad.nodes[bi][0])
        };
        let c0 = probe(0.0);
        for y in [-0.5, 0.5] {
            let c = probe(y);
            assert!((c - c0).abs() < 2e-3, "affine defect at {y}: {c} vs {c0}");
        }

        // biconjugate recovers φ on the bulk
        let phi = m.full_potential();
        let back = legendre_inverse(&u, &quad, &grid);
        let tol = 1e-3 * (1.0 + grid.box_radius);
        for i in 0..grid.len() {
            let x = grid.node(i)[0];
            if x.abs() <= grid.box_radius / 2.0 {
                assert!(
                    (back[i] - phi[i]).abs() <= tol,
                    "biconjugate defect {} at x = {x}",
                    (back[i] - phi[i]).abs()
                );
            }
        }
    }

    #[test]
    fn legendre_quadratic_self_dual() {
        // φ = |x|²/2 restricted to a huge box is self-dual near the middle of P.
        let p = p1();
        let grid = GridSpec::new(1, 20.0, 2049);
        let rp = ReferencePotential::new(&p);
        let psi: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.node(i)[0];
                0.5 * x * x - rp.eval(&[x])
            })
            .collect();
        let m = ToricMetric::new(p.clone(), grid, psi).unwrap();
        let quad = quadrature(&p, 64);
        let u = legendre(&m, &quad).unwrap();
        for (y, uv) in quad.nodes.iter().zip(&u) {
            let want = 0.5 * y[0] * y[0];
            assert!((uv - want).abs() < 1e-4, "u({}) = {uv}, want {want}", y[0]);
        }
    }

    #[test]
    fn domain_too_small_is_detected() {
        let p = p1();
        // tiny box: the boundary ring carries visible e^{−φ} mass
        let grid = GridSpec::new(1, 2.0, 65);
        let m = ToricMetric::reference(p, grid);
        assert!(matches!(
            ricci_potential(&m),
            Err(Error::DomainTooSmall(_))
        ));
    }

    #[test]
    fn gradient_of_d_matches_pairing() {
        let p = p1();
        let grid = GridSpec::new(1, 12.0, 2049);
        let base = ToricMetric::reference(p.clone(), grid);
        let m = perturbed_metric(p, grid, 3, 0.25);
        let rho = ricci_potential_with_tol(&m, TOL_BC).unwrap();

        // constant direction pairs to zero exactly and FD is zero exactly
        let ones = vec![1.0; grid.len()];
        assert_eq!(d_first_variation(&m, &rho, &ones), 0.0);

        let eps = 1e-4;
        let bump = |center: f64, width: f64| -> Vec<f64> {
            (0..grid.len())
                .map(|i| {
                    let x = grid.node(i)[0];
                    (-(x - center) * (x - center) / (2.0 * width * width)).exp()
                })
                .collect()
        };
        for (c, w) in [(0.0, 1.0), (1.0, 0.8), (-1.5, 1.2)] {
            let delta = bump(c, w);
            let plus = m
                .with_psi(
                    m.psi()
                        .iter()
                        .zip(&delta)
                        .map(|(p, d)| p + eps * d)
                        .collect(),
                )
                .unwrap();
            let minus = m
                .with_psi(
                    m.psi()
                        .iter()
                        .zip(&delta)
                        .map(|(p, d)| p - eps * d)
                        .collect(),
                )
                .unwrap();
            let dp = energies(&plus, &base).unwrap().d;
            let dm = energies(&minus, &base).unwrap().d;
            let fd = (dp - dm) / (2.0 * eps);
            let pairing = d_first_variation(&m, &rho, &delta);
            assert!(
                (fd - pairing).abs() <= 1e-4 * (1.0 + pairing.abs()),
                "FD {fd} vs pairing {pairing}"
            );
        }
    }

    #[test]
    fn metric_csv_round_trip() {
        let p = p1();
        let grid = GridSpec::new(1, 10.0, 65);
        let m = perturbed_metric(p.clone(), grid, 5, 0.1);
        let dump = m.to_csv();
        let back = ToricMetric::from_csv(p, &dump).unwrap();
        assert_eq!(m.psi(), back.psi());
    }
}
