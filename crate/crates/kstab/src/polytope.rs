//! Reflexive moment polytopes of toric Fano curves and surfaces.
//!
//! A polytope is given in H-representation {y : ⟨n_i, y⟩ ≥ −1} with integer
//! facet normals and all offsets equal to 1 (anticanonical normalization).
//! Vertices, volume, barycenter and second moments are derived in exact
//! rational arithmetic via the fan triangulation over the origin; quadrature
//! rules are floating point.

use num::bigint::BigInt;
use num::{BigRational, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rat = BigRational;

pub fn rat(n: i64) -> Rat {
    BigRational::from_integer(BigInt::from(n))
}

pub fn ratio_of(n: i64, d: i64) -> Rat {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn dot_int(n: &[i64], y: &[Rat]) -> Rat {
    n.iter().zip(y).map(|(&a, b)| rat(a) * b).sum()
}

fn cross_rat(p: &[Rat], q: &[Rat]) -> Rat {
    &p[0] * &q[1] - &p[1] * &q[0]
}

/// Angular order around the origin: upper half-plane (incl. +x axis) first,
/// then counterclockwise by exact cross products.
fn angle_less(p: &[Rat], q: &[Rat]) -> bool {
    let upper = |v: &[Rat]| v[1].is_positive() || (v[1].is_zero() && v[0].is_positive());
    let (up, uq) = (upper(p), upper(q));
    if up != uq {
        return up;
    }
    cross_rat(p, q).is_positive()
}

/// Fano-normalized reflexive polytope with exact derived data.
#[derive(Debug, Clone)]
pub struct Polytope {
    dim: usize,
    normals: Vec<Vec<i64>>,
    /// Vertices in counterclockwise cyclic order (n = 2) or sorted (n = 1).
    vertices: Vec<Vec<Rat>>,
    volume: Rat,
    barycenter: Vec<Rat>,
    /// Exact (1/V)∫ y_i y_j dy, stored row-major.
    second_moments: Vec<Rat>,
}

#[derive(Serialize, Deserialize)]
struct PolytopeJson {
    dim: usize,
    normals: Vec<Vec<i64>>,
}

impl Polytope {
    /// Build from integer facet normals; all offsets are 1.
    ///
    /// Validates boundedness, interior origin and reflexivity (every vertex
    /// a lattice point) and derives volume/barycenter/moments exactly.
    pub fn from_facets(normals: &[Vec<i64>]) -> Result<Self> {
        if normals.is_empty() {
            return Err(Error::Unbounded);
        }
        let dim = normals[0].len();
        if dim == 0 || dim > 2 {
            return Err(Error::ConfigInvalid(format!(
                "supported dimensions are 1 and 2, got {dim}"
            )));
        }
        for n in normals {
            if n.len() != dim {
                return Err(Error::ConfigInvalid(
                    "facet normals of mixed dimension".into(),
                ));
            }
            if n.iter().all(|&c| c == 0) {
                return Err(Error::OriginNotInterior);
            }
        }
        match dim {
            1 => Self::build_1d(normals),
            2 => Self::build_2d(normals),
            _ => unreachable!(),
        }
    }

    fn build_1d(normals: &[Vec<i64>]) -> Result<Self> {
        // {y : n y >= -1}: positive normals bound below, negative bound above.
        let mut lo: Option<Rat> = None;
        let mut hi: Option<Rat> = None;
        for n in normals {
            let c = n[0];
            if c > 0 {
                let b = -ratio_of(1, c);
                lo = Some(match lo {
                    Some(v) if v >= b => v,
                    _ => b,
                });
            } else {
                let b = ratio_of(1, -c);
                hi = Some(match hi {
                    Some(v) if v <= b => v,
                    _ => b,
                });
            }
        }
        let (a, b) = match (lo, hi) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Unbounded),
        };
        for v in [&a, &b] {
            if !v.is_integer() {
                return Err(Error::NonReflexive(format!("{v}")));
            }
        }
        let volume = &b - &a;
        let barycenter = (&a + &b) / rat(2);
        // (1/V)\int y^2 = (b^3 - a^3) / (3 V)
        let m2 = (b.clone() * &b * &b - a.clone() * &a * &a) / (rat(3) * &volume);
        Ok(Self {
            dim: 1,
            normals: normals.to_vec(),
            vertices: vec![vec![a], vec![b]],
            volume,
            barycenter: vec![barycenter],
            second_moments: vec![m2],
        })
    }

    fn build_2d(normals: &[Vec<i64>]) -> Result<Self> {
        // Bounded iff the normal directions leave no angular gap >= pi.
        let mut dirs: Vec<Vec<Rat>> = normals
            .iter()
            .map(|n| vec![rat(n[0]), rat(n[1])])
            .collect();
        dirs.sort_by(|p, q| {
            if angle_less(p, q) {
                std::cmp::Ordering::Less
            } else if angle_less(q, p) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        dirs.dedup_by(|p, q| cross_rat(p, q).is_zero() && {
            let d = &p[0] * &q[0] + &p[1] * &q[1];
            d.is_positive()
        });
        if dirs.len() < 3 {
            return Err(Error::Unbounded);
        }
        for i in 0..dirs.len() {
            let j = (i + 1) % dirs.len();
            if !cross_rat(&dirs[i], &dirs[j]).is_positive() {
                return Err(Error::Unbounded);
            }
        }

        // Vertices: feasible intersections of facet pairs.
        let mut verts: Vec<Vec<Rat>> = Vec::new();
        let m = normals.len();
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b) = (&normals[i], &normals[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det == 0 {
                    continue;
                }
                let det = rat(det);
                // Solve a.y = -1, b.y = -1.
                let y0 = (rat(-b[1]) + rat(a[1])) / det.clone();
                let y1 = (rat(b[0]) - rat(a[0])) / det;
                let y = vec![y0, y1];
                let feasible = normals
                    .iter()
                    .all(|n| dot_int(n, &y) >= rat(-1));
                if feasible && !verts.iter().any(|v| v[0] == y[0] && v[1] == y[1]) {
                    verts.push(y);
                }
            }
        }
        if verts.len() < 3 {
            return Err(Error::Unbounded);
        }
        verts.sort_by(|p, q| {
            if angle_less(p, q) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        for v in &verts {
            if !(v[0].is_integer() && v[1].is_integer()) {
                return Err(Error::NonReflexive(format!("({}, {})", v[0], v[1])));
            }
        }

        // Fan over the origin in cyclic order: exact volume, barycenter,
        // second moments from per-triangle closed forms.
        let mut volume = Rat::zero();
        let mut bary = vec![Rat::zero(), Rat::zero()];
        let mut m2 = vec![Rat::zero(); 4];
        let k = verts.len();
        for i in 0..k {
            let p = &verts[i];
            let q = &verts[(i + 1) % k];
            let area = cross_rat(p, q) / rat(2);
            if !area.is_positive() {
                return Err(Error::OriginNotInterior);
            }
            volume += area.clone();
            for d in 0..2 {
                bary[d] += area.clone() * (&p[d] + &q[d]) / rat(3);
            }
            // Triangle (0, p, q): \int y_i y_j = (A/12)(2 p_i p_j + 2 q_i q_j + p_i q_j + p_j q_i)
            for r in 0..2 {
                for c in 0..2 {
                    let s = rat(2) * &p[r] * &p[c]
                        + rat(2) * &q[r] * &q[c]
                        + &p[r] * &q[c]
                        + &p[c] * &q[r];
                    m2[2 * r + c] += area.clone() * s / rat(12);
                }
            }
        }
        let bary: Vec<Rat> = bary.into_iter().map(|b| b / volume.clone()).collect();
        let m2: Vec<Rat> = m2.into_iter().map(|v| v / volume.clone()).collect();
        Ok(Self {
            dim: 2,
            normals: normals.to_vec(),
            vertices: verts,
            volume,
            barycenter: bary,
            second_moments: m2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normals(&self) -> &[Vec<i64>] {
        &self.normals
    }

    pub fn vertices(&self) -> &[Vec<Rat>] {
        &self.vertices
    }

    pub fn volume(&self) -> &Rat {
        &self.volume
    }

    pub fn volume_f64(&self) -> f64 {
        self.volume.to_f64().unwrap()
    }

    pub fn barycenter(&self) -> &[Rat] {
        &self.barycenter
    }

    pub fn barycenter_f64(&self) -> Vec<f64> {
        self.barycenter.iter().map(|b| b.to_f64().unwrap()).collect()
    }

    /// Exact (1/V)∫ y_i y_j dy.
    pub fn second_moment(&self, i: usize, j: usize) -> Rat {
        self.second_moments[self.dim * i + j].clone()
    }

    /// Exact covariance matrix (1/V)∫ y_i y_j − b_i b_j, row-major.
    pub fn covariance(&self) -> Vec<Rat> {
        let mut cov = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                cov.push(self.second_moment(i, j) - &self.barycenter[i] * &self.barycenter[j]);
            }
        }
        cov
    }

    /// Lattice points of the dilation kP: all u ∈ ℤⁿ with ⟨n_i, u⟩ ≥ −k.
    pub fn lattice_points(&self, k: i64) -> Vec<Vec<i64>> {
        assert!(k >= 1, "dilation factor must be >= 1");
        let mut lo = vec![i64::MAX; self.dim];
        let mut hi = vec![i64::MIN; self.dim];
        for v in &self.vertices {
            for d in 0..self.dim {
                let s = v[d].clone() * rat(k);
                lo[d] = lo[d].min(s.floor().to_integer().to_i64().unwrap());
                hi[d] = hi[d].max(s.ceil().to_integer().to_i64().unwrap());
            }
        }
        let inside = |u: &[i64]| {
            self.normals
                .iter()
                .all(|n| n.iter().zip(u).map(|(&a, &b)| a * b).sum::<i64>() >= -k)
        };
        let mut pts = Vec::new();
        if self.dim == 1 {
            for x in lo[0]..=hi[0] {
                if inside(&[x]) {
                    pts.push(vec![x]);
                }
            }
        } else {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    if inside(&[x, y]) {
                        pts.push(vec![x, y]);
                    }
                }
            }
        }
        pts
    }

    /// Minimum facet slack ⟨n_i, y⟩ + 1 over all facets; ≥ 0 inside.
    pub fn facet_slack(&self, y: &[f64]) -> f64 {
        self.normals
            .iter()
            .map(|n| n.iter().zip(y).map(|(&a, &b)| a as f64 * b).sum::<f64>() + 1.0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.facet_slack(y) >= -tol
    }

    /// Support function h_P(d) = max over vertices of ⟨v, d⟩.
    pub fn support(&self, d: &[f64]) -> f64 {
        self.vertices
            .iter()
            .map(|v| {
                v.iter()
                    .zip(d)
                    .map(|(a, &b)| a.to_f64().unwrap() * b)
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest |coordinate| over vertices; bounds the gradient image.
    pub fn vertex_radius(&self) -> f64 {
        self.vertices
            .iter()
            .flat_map(|v| v.iter().map(|c| c.to_f64().unwrap().abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PolytopeJson {
            dim: self.dim,
            normals: self.normals.clone(),
        })
        .expect("polytope serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: PolytopeJson = serde_json::from_str(s)?;
        Self::from_facets(&p.normals)
    }

    /// Built-in registry of anticanonical polytopes.
    pub fn by_name(name: &str) -> Result<Self> {
        let normals: Vec<Vec<i64>> = match name {
            "P1" => vec![vec![1], vec![-1]],
            "P2" => vec![vec![1, 0], vec![0, 1], vec![-1, -1]],
            "P1xP1" => vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1]],
            "Bl1P2" => vec![vec![1, 0], vec![0, 1], vec![-1, -1], vec![1, 1]],
            "Bl2P2" => vec![
                vec![1, 0],
                vec![0, 1],
                vec![-1, -1],
                vec![1, 1],
                vec![-1, 0],
            ],
            _ => {
                return Err(Error::ConfigInvalid(format!(
                    "unknown polytope name '{name}' (known: P1, P2, P1xP1, Bl1P2, Bl2P2)"
                )))
            }
        };
        Self::from_facets(&normals)
    }
}

/// Values attached to the nodes of a [`Quadrature`].
pub type PField = Vec<f64>;

/// Quadrature over P: a triangulated refinement with a per-cell rule exact
/// for polynomials of total degree ≤ 2. Weights sum to vol(P) exactly.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub resolution: usize,
    volume: f64,
    dim: usize,
    /// n = 2 structure for point location: fan triangle corners (p, q) as f64.
    fan: Vec<([f64; 2], [f64; 2])>,
    /// n = 1 structure: cell edges, ascending.
    cells_1d: Vec<f64>,
}

impl Quadrature {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn integrate(&self, field: &[f64]) -> f64 {
        self.weights.iter().zip(field).map(|(w, f)| w * f).sum()
    }

    pub fn mean(&self, field: &[f64]) -> f64 {
        self.integrate(field) / self.volume
    }

    pub fn integrate_with(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(y, w)| w * f(y))
            .sum()
    }

    /// Sample a function into a node-aligned field.
    pub fn sample(&self, mut f: impl FnMut(&[f64]) -> f64) -> PField {
        self.nodes.iter().map(|y| f(y)).collect()
    }

    /// Piecewise-affine interpolation of a node field at y ∈ P.
    ///
    /// n = 2 uses the medial-triangle basis of the containing subtriangle
    /// (exact for affine fields); n = 1 interpolates linearly between the two
    /// Gauss nodes of the containing cell.
    pub fn interpolate(&self, field: &[f64], y: &[f64]) -> f64 {
        if self.dim == 1 {
            return self.interpolate_1d(field, y[0]);
        }
        self.interpolate_2d(field, y)
    }

    fn interpolate_1d(&self, field: &[f64], y: f64) -> f64 {
        let r = self.resolution;
        let ncells = self.cells_1d.len() - 1;
        let mut c = 0usize;
        while c + 1 < ncells && y > self.cells_1d[c + 1] {
            c += 1;
        }
        let _ = r;
        let (i0, i1) = (2 * c, 2 * c + 1);
        let (x0, x1) = (self.nodes[i0][0], self.nodes[i1][0]);
        let t = (y - x0) / (x1 - x0);
        field[i0] * (1.0 - t) + field[i1] * t
    }

    fn interpolate_2d(&self, field: &[f64], y: &[f64]) -> f64 {
        let r = self.resolution;
        // Locate fan triangle.
        let mut best = (0usize, 0.0f64, 0.0f64, f64::NEG_INFINITY);
        for (t, (p, q)) in self.fan.iter().enumerate() {
            let det = p[0] * q[1] - p[1] * q[0];
            let lp = (y[0] * q[1] - y[1] * q[0]) / det;
            let lq = (p[0] * y[1] - p[1] * y[0]) / det;
            let slack = lp.min(lq).min(1.0 - lp - lq);
            if slack > best.3 {
                best = (t, lp, lq, slack);
            }
            if slack >= 0.0 {
                break;
            }
        }
        let (t, lp, lq, _) = best;
        let (p, q) = self.fan[t];
        let rf = r as f64;
        let u = (lp * rf).clamp(0.0, rf - 1e-12);
        let v = (lq * rf).clamp(0.0, rf - 1e-12);
        let mut a = u.floor() as usize;
        let mut b = v.floor() as usize;
        a = a.min(r - 1);
        b = b.min(r - 1 - a.min(r - 1)).min(r - 1);
        if a + b > r - 1 {
            b = r - 1 - a;
        }
        let (fu, fv) = (u - a as f64, v - b as f64);
        let down = fu + fv > 1.0 && a + b <= r.saturating_sub(2);
        // Subtriangle corners in barycentric steps.
        let corner = |alpha: usize, beta: usize| -> [f64; 2] {
            let s = alpha as f64 / rf;
            let t2 = beta as f64 / rf;
            [s * p[0] + t2 * q[0], s * p[1] + t2 * q[1]]
        };
        let (va, vb, vc) = if down {
            (corner(a + 1, b), corner(a + 1, b + 1), corner(a, b + 1))
        } else {
            (corner(a, b), corner(a + 1, b), corner(a, b + 1))
        };
        let base = self.cell_node_base(t, a, b, down);
        // Barycentric w.r.t. (va, vb, vc).
        let det = (vb[0] - va[0]) * (vc[1] - va[1]) - (vb[1] - va[1]) * (vc[0] - va[0]);
        let l1 = ((y[0] - va[0]) * (vc[1] - va[1]) - (y[1] - va[1]) * (vc[0] - va[0])) / det;
        let l2 = ((vb[0] - va[0]) * (y[1] - va[1]) - (vb[1] - va[1]) * (y[0] - va[0])) / det;
        let l0 = 1.0 - l1 - l2;
        // Nodes are midpoints: base+0 = mid(A,B), base+1 = mid(B,C), base+2 = mid(C,A).
        (1.0 - 2.0 * l0) * field[base + 1]
            + (1.0 - 2.0 * l1) * field[base + 2]
            + (1.0 - 2.0 * l2) * field[base]
    }

    /// Node index of the first of the three midpoint nodes of a subtriangle.
    fn cell_node_base(&self, tri: usize, a: usize, b: usize, down: bool) -> usize {
        let r = self.resolution;
        let per_tri = 3 * r * r;
        let mut idx = tri * per_tri;
        // Cells are generated as: for a, for b in 0..r-a: up(a,b) then down(a,b) if b < r-a-1.
        let cells_before = |a: usize| -> usize {
            // Sum over alpha < a of (r-alpha) + (r-alpha-1) = 2(r-alpha)-1
            let mut s = 0;
            for alpha in 0..a {
                s += 2 * (r - alpha) - 1;
            }
            s
        };
        let mut cell = cells_before(a);
        cell += 2 * b;
        if down {
            cell += 1;
        }
        idx += 3 * cell;
        idx
    }
}

/// Build the degree-2-exact quadrature rule at the given refinement level.
pub fn quadrature(p: &Polytope, resolution: usize) -> Quadrature {
    assert!(resolution >= 2, "quadrature resolution must be >= 2");
    let r = resolution;
    match p.dim() {
        1 => {
            let a = p.vertices()[0][0].to_f64().unwrap();
            let b = p.vertices()[1][0].to_f64().unwrap();
            let mut edges = Vec::new();
            for i in 0..=r {
                edges.push(a + (0.0 - a) * i as f64 / r as f64);
            }
            for i in 1..=r {
                edges.push(0.0 + (b - 0.0) * i as f64 / r as f64);
            }
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            let g = 0.5 / 3.0f64.sqrt();
            for c in 0..(edges.len() - 1) {
                let (x0, x1) = (edges[c], edges[c + 1]);
                let h = x1 - x0;
                let m = 0.5 * (x0 + x1);
                nodes.push(vec![m - g * h]);
                nodes.push(vec![m + g * h]);
                weights.push(0.5 * h);
                weights.push(0.5 * h);
            }
            let volume = b - a;
            Quadrature {
                nodes,
                weights,
                resolution: r,
                volume,
                dim: 1,
                fan: Vec::new(),
                cells_1d: edges,
            }
        }
        2 => {
            let verts: Vec<[f64; 2]> = p
                .vertices()
                .iter()
                .map(|v| [v[0].to_f64().unwrap(), v[1].to_f64().unwrap()])
                .collect();
            let k = verts.len();
            let mut fan = Vec::new();
            for i in 0..k {
                fan.push((verts[i], verts[(i + 1) % k]));
            }
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            let rf = r as f64;
            for (pv, qv) in &fan {
                let tri_area = 0.5 * (pv[0] * qv[1] - pv[1] * qv[0]);
                let sub_area = tri_area / (rf * rf);
                let corner = |alpha: usize, beta: usize| -> [f64; 2] {
                    let s = alpha as f64 / rf;
                    let t = beta as f64 / rf;
                    [s * pv[0] + t * qv[0], s * pv[1] + t * qv[1]]
                };
                let mut push_tri = |va: [f64; 2], vb: [f64; 2], vc: [f64; 2]| {
                    let mids = [
                        [(va[0] + vb[0]) / 2.0, (va[1] + vb[1]) / 2.0],
                        [(vb[0] + vc[0]) / 2.0, (vb[1] + vc[1]) / 2.0],
                        [(vc[0] + va[0]) / 2.0, (vc[1] + va[1]) / 2.0],
                    ];
                    for m in mids {
                        nodes.push(vec![m[0], m[1]]);
                        weights.push(sub_area / 3.0);
                    }
                };
                for a in 0..r {
                    for b in 0..(r - a) {
                        push_tri(corner(a, b), corner(a + 1, b), corner(a, b + 1));
                        if b < r - a - 1 {
                            push_tri(corner(a + 1, b), corner(a + 1, b + 1), corner(a, b + 1));
                        }
                    }
                }
            }
            let volume = p.volume_f64();
            Quadrature {
                nodes,
                weights,
                resolution: r,
                volume,
                dim: 2,
                fan,
                cells_1d: Vec::new(),
            }
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p1_is_the_unit_interval() {
        let p = Polytope::by_name("P1").unwrap();
        assert_eq!(p.dim(), 1);
        assert_eq!(*p.volume(), rat(2));
        assert_eq!(p.barycenter()[0], rat(0));
    }

    #[test]
    fn p2_exact_data() {
        let p = Polytope::by_name("P2").unwrap();
        assert_eq!(p.vertices().len(), 3);
        assert_eq!(*p.volume(), ratio_of(9, 2));
        assert_eq!(p.barycenter()[0], rat(0));
        assert_eq!(p.barycenter()[1], rat(0));
        let vs: Vec<(i64, i64)> = p
            .vertices()
            .iter()
            .map(|v| {
                (
                    v[0].to_integer().to_i64().unwrap(),
                    v[1].to_integer().to_i64().unwrap(),
                )
            })
            .collect();
        for want in [(-1, -1), (2, -1), (-1, 2)] {
            assert!(vs.contains(&want), "missing vertex {want:?}");
        }
    }

    #[test]
    fn bl1p2_exact_data() {
        let p = Polytope::by_name("Bl1P2").unwrap();
        assert_eq!(p.vertices().len(), 4);
        assert_eq!(*p.volume(), rat(4));
        assert_eq!(p.barycenter()[0], ratio_of(1, 12));
        assert_eq!(p.barycenter()[1], ratio_of(1, 12));
    }

    #[test]
    fn unbounded_and_nonreflexive_are_rejected() {
        assert!(matches!(
            Polytope::from_facets(&[vec![1, 0], vec![0, 1]]),
            Err(Error::Unbounded)
        ));
        assert!(matches!(
            Polytope::from_facets(&[vec![1], vec![-2]]),
            Err(Error::NonReflexive(_))
        ));
        // Half-open strip in 2d.
        assert!(matches!(
            Polytope::from_facets(&[vec![1, 0], vec![-1, 0], vec![0, 1]]),
            Err(Error::Unbounded)
        ));
    }

    #[test]
    fn lattice_point_counts() {
        let p1 = Polytope::by_name("P1").unwrap();
        let pts = p1.lattice_points(1);
        assert_eq!(pts, vec![vec![-1], vec![0], vec![1]]);
        assert_eq!(p1.lattice_points(3).len(), 7);

        let p2 = Polytope::by_name("P2").unwrap();
        assert_eq!(p2.lattice_points(1).len(), 10);
    }

    #[test]
    fn ehrhart_growth() {
        // N_k / k^n -> vol with O(1/k) error, stable constant under doubling.
        for name in ["P1", "P2", "P1xP1", "Bl1P2", "Bl2P2"] {
            let p = Polytope::by_name(name).unwrap();
            let vol = p.volume_f64();
            let n = p.dim() as i32;
            let mut consts = Vec::new();
            for k in [8i64, 16, 32] {
                let nk = p.lattice_points(k).len() as f64;
                let err = (nk / (k as f64).powi(n) - vol).abs();
                consts.push(err * k as f64);
            }
            let cmax = consts.iter().cloned().fold(0.0f64, f64::max);
            let cmin = consts.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                cmax <= 4.0 * (cmin + 1e-9) + 1e-6,
                "{name}: Ehrhart constant unstable: {consts:?}"
            );
        }
    }

    #[test]
    fn lattice_riemann_sums() {
        // (1/N_k) sum g(u/k) -> (1/vol) \int g with O(1/k) error.
        let p = Polytope::by_name("P2").unwrap();
        let quad = quadrature(&p, 64);
        let gs: Vec<(&str, Box<dyn Fn(&[f64]) -> f64>)> = vec![
            ("1", Box::new(|_y: &[f64]| 1.0)),
            ("x1", Box::new(|y: &[f64]| y[0])),
            ("x1^2", Box::new(|y: &[f64]| y[0] * y[0])),
            ("exp(x1)", Box::new(|y: &[f64]| y[0].exp())),
        ];
        for (label, g) in &gs {
            let exact = quad.integrate_with(|y| g(y)) / quad.volume();
            let mut errs = Vec::new();
            for k in [16i64, 32, 64] {
                let pts = p.lattice_points(k);
                let avg: f64 = pts
                    .iter()
                    .map(|u| {
                        let y: Vec<f64> = u.iter().map(|&c| c as f64 / k as f64).collect();
                        g(&y)
                    })
                    .sum::<f64>()
                    / pts.len() as f64;
                errs.push((avg - exact).abs() * k as f64);
            }
            let cmax = errs.iter().cloned().fold(0.0f64, f64::max);
            let cmin = errs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                cmax <= 4.0 * (cmin + 1e-6) + 1e-6,
                "Riemann constant unstable for {label}: {errs:?}"
            );
        }
    }

    #[test]
    fn quadrature_weight_sum_and_moments() {
        let p1 = Polytope::by_name("P1").unwrap();
        let q = quadrature(&p1, 16);
        assert!((q.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let q64 = quadrature(&p1, 64);
        let ix2 = q64.integrate_with(|y| y[0] * y[0]);
        assert!((ix2 - 2.0 / 3.0).abs() < 1e-10, "got {ix2}");

        let bl = Polytope::by_name("Bl1P2").unwrap();
        let qb = quadrature(&bl, 64);
        assert!((qb.weights.iter().sum::<f64>() - 4.0).abs() < 1e-12 * 4.0);
        let bary_x = qb.integrate_with(|y| y[0]) / qb.volume();
        assert!((bary_x - 1.0 / 12.0).abs() < 1e-8, "got {bary_x}");
        // quadrature vs exact rational second moment
        let m2 = bl.second_moment(0, 0).to_f64().unwrap();
        let m2q = qb.integrate_with(|y| y[0] * y[0]) / qb.volume();
        assert!((m2 - m2q).abs() < 1e-8);
    }

    #[test]
    fn quadrature_nodes_inside_and_interpolation_affine_exact() {
        for name in ["P2", "Bl1P2", "Bl2P2"] {
            let p = Polytope::by_name(name).unwrap();
            let q = quadrature(&p, 12);
            for y in &q.nodes {
                assert!(p.contains(y, 1e-12), "{name}: node {y:?} outside");
            }
            let field = q.sample(|y| 1.25 * y[0] - 0.5 * y[1] + 0.75);
            // probe strictly interior points
            let b = p.barycenter_f64();
            for s in [0.0, 0.3, 0.7, 0.95] {
                for v in p.vertices() {
                    let y = [
                        b[0] + s * (v[0].to_f64().unwrap() * 0.9 - b[0]),
                        b[1] + s * (v[1].to_f64().unwrap() * 0.9 - b[1]),
                    ];
                    let got = q.interpolate(&field, &y);
                    let want = 1.25 * y[0] - 0.5 * y[1] + 0.75;
                    assert!(
                        (got - want).abs() < 1e-10,
                        "{name}: interp at {y:?}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn polytope_json_round_trip() {
        let p = Polytope::by_name("Bl2P2").unwrap();
        let s = p.to_json();
        let q = Polytope::from_json(&s).unwrap();
        assert_eq!(q.vertices().len(), 5);
        assert_eq!(*q.volume(), ratio_of(7, 2));
    }
}
