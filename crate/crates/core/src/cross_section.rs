//! Triangulated cross-sections, moment normalization, P1 operators and torsional rigidity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{invalid, Error, Result};
use crate::sparse::{orthonormalize, projected_pcg, CgOptions, CsrMatrix, Projector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SectionPreset {
    Disc { radius: f64 },
    Square { side: f64 },
    /// Rectangle of width `aspect` and height 1.
    Rectangle { aspect: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

/// Triangulation before normalization.
#[derive(Debug, Clone)]
pub struct RawMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Exact integrals of 1, ξ, ζ, ξ², ξζ, ζ² over a triangulation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub area: f64,
    pub first: [f64; 2],
    /// (∫ξ², ∫ξζ, ∫ζ²)
    pub second: [f64; 3],
}

fn tri_area(p: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

fn tri_moments(p: &[[f64; 2]; 3]) -> Moments {
    let a = tri_area(p);
    let sx: f64 = p.iter().map(|q| q[0]).sum();
    let sz: f64 = p.iter().map(|q| q[1]).sum();
    let xx: f64 = p.iter().map(|q| q[0] * q[0]).sum();
    let zz: f64 = p.iter().map(|q| q[1] * q[1]).sum();
    let xz: f64 = p.iter().map(|q| q[0] * q[1]).sum();
    Moments {
        area: a,
        first: [a * sx / 3.0, a * sz / 3.0],
        second: [a / 12.0 * (xx + sx * sx), a / 12.0 * (xz + sx * sz), a / 12.0 * (zz + sz * sz)],
    }
}

pub fn mesh_moments(vertices: &[[f64; 2]], triangles: &[[usize; 3]]) -> Moments {
    let mut m = Moments::default();
    for t in triangles {
        let tm = tri_moments(&[vertices[t[0]], vertices[t[1]], vertices[t[2]]]);
        m.area += tm.area;
        m.first[0] += tm.first[0];
        m.first[1] += tm.first[1];
        for k in 0..3 {
            m.second[k] += tm.second[k];
        }
    }
    m
}

fn polygon_signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        a[0] * b[1] - b[0] * a[1]
    })
    .sum::<f64>()
        * 0.5
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: [f64; 2], b: [f64; 2], c: [f64; 2], d: f64| {
        d == 0.0 && c[0] >= a[0].min(b[0]) && c[0] <= a[0].max(b[0]) && c[1] >= a[1].min(b[1]) && c[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

fn is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn distance_to_boundary(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dz) / (dx * dx + dz * dz)).clamp(0.0, 1.0);
            ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dz).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn preset_polygon(preset: &SectionPreset, edge: f64) -> Result<Vec<[f64; 2]>> {
    let poly = match preset {
        SectionPreset::Disc { radius } => {
            if !(radius.is_finite() && *radius > 0.0) {
                return invalid(format!("disc radius must be positive, got {radius}"));
            }
            let n = ((2.0 * PI * radius / edge).ceil() as usize).max(8);
            (0..n)
                .map(|i| {
                    let th = 2.0 * PI * i as f64 / n as f64;
                    [radius * th.cos(), radius * th.sin()]
                })
                .collect()
        }
        SectionPreset::Square { side } => {
            if !(side.is_finite() && *side > 0.0) {
                return invalid(format!("square side must be positive, got {side}"));
            }
            let a = 0.5 * side;
            vec![[-a, -a], [a, -a], [a, a], [-a, a]]
        }
        SectionPreset::Rectangle { aspect } => {
            if !(aspect.is_finite() && *aspect > 0.0) {
                return invalid(format!("rectangle aspect must be positive, got {aspect}"));
            }
            let a = 0.5 * aspect;
            vec![[-a, -0.5], [a, -0.5], [a, 0.5], [-a, 0.5]]
        }
        SectionPreset::Polygon { vertices } => {
            if vertices.len() < 3 {
                return invalid("polygon needs at least three vertices");
            }
            if vertices.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
                return invalid("polygon vertices must be finite");
            }
            vertices.clone()
        }
    };
    if !is_simple(&poly) {
        return Err(Error::Mesh("polygon is self-intersecting".into()));
    }
    let area = polygon_signed_area(&poly);
    if area.abs() < 1e-300 {
        return Err(Error::Mesh("polygon has zero area".into()));
    }
    Ok(if area < 0.0 { poly.into_iter().rev().collect() } else { poly })
}

/// Mesh a section preset: boundary points at spacing ≤ `edge`, interior points from a
/// triangular lattice clipped to the polygon, connected by a constrained Delaunay
/// triangulation.
pub fn make_section(preset: &SectionPreset, edge: f64) -> Result<RawMesh> {
    if !(edge.is_finite() && edge > 0.0) {
        return invalid(format!("target edge length must be positive, got {edge}"));
    }
    let poly = preset_polygon(preset, edge)?;
    let n = poly.len();
    let mut boundary = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let m = ((len / edge).ceil() as usize).max(1);
        for j in 0..m {
            let t = j as f64 / m as f64;
            boundary.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    let (mut xmin, mut xmax, mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &poly {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        zmin = zmin.min(p[1]);
        zmax = zmax.max(p[1]);
    }
    let dz = edge * 3f64.sqrt() / 2.0;
    let mut interior = Vec::new();
    let rows = ((zmax - zmin) / dz).ceil() as usize + 1;
    let cols = ((xmax - xmin) / edge).ceil() as usize + 2;
    for r in 0..rows {
        let z = zmin + r as f64 * dz;
        let shift = if r % 2 == 1 { 0.5 * edge } else { 0.0 };
        for c in 0..cols {
            let p = [xmin + shift + c as f64 * edge, z];
            if point_in_polygon(p, &poly) && distance_to_boundary(p, &poly) >= 0.45 * edge {
                interior.push(p);
            }
        }
    }
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> = ConstrainedDelaunayTriangulation::new();
    let mut handles = Vec::with_capacity(boundary.len());
    for p in &boundary {
        handles.push(cdt.insert(Point2::new(p[0], p[1])).map_err(|e| Error::Mesh(format!("{e:?}")))?);
    }
    for p in &interior {
        cdt.insert(Point2::new(p[0], p[1])).map_err(|e| Error::Mesh(format!("{e:?}")))?;
    }
    let nb = handles.len();
    for i in 0..nb {
        cdt.add_constraint(handles[i], handles[(i + 1) % nb]);
    }
    let mut vertices: Vec<[f64; 2]> = vec![[0.0; 2]; cdt.num_vertices()];
    for v in cdt.vertices() {
        let p = v.position();
        vertices[v.fix().index()] = [p.x, p.y];
    }
    let mut triangles = Vec::new();
    for f in cdt.inner_faces() {
        let vs = f.vertices();
        let t = [vs[0].fix().index(), vs[1].fix().index(), vs[2].fix().index()];
        let pts = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
        let c = [(pts[0][0] + pts[1][0] + pts[2][0]) / 3.0, (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0];
        if !point_in_polygon(c, &poly) {
            continue;
        }
        // slivers between nearly collinear boundary points carry no area
        if tri_area(&pts) <= 1e-10 * edge * edge {
            continue;
        }
        triangles.push(t);
    }
    // drop vertices not referenced by any kept triangle
    let mut used = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    for t in &mut triangles {
        for v in t.iter_mut() {
            if used[*v] == usize::MAX {
                used[*v] = kept.len();
                kept.push(vertices[*v]);
            }
            *v = used[*v];
        }
    }
    // deterministic ordering: vertices by first use in face order, faces sorted
    triangles.sort();
    Ok(RawMesh { vertices: kept, triangles })
}

/// Transforms applied by `normalize_section`: x ↦ scale·Rot(angle)·(x − translation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub translation: [f64; 2],
    pub rotation_angle: f64,
    pub scale: f64,
    pub raw_area: f64,
}

impl NormalizationReport {
    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_angle.sin_cos();
        let (x, z) = (p[0] - self.translation[0], p[1] - self.translation[1]);
        [self.scale * (c * x + s * z), self.scale * (-s * x + c * z)]
    }

    pub fn to_user(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_angle.sin_cos();
        let (x, z) = (q[0] / self.scale, q[1] / self.scale);
        [c * x - s * z + self.translation[0], s * x + c * z + self.translation[1]]
    }

    pub fn describe(&self) -> String {
        format!(
            "translation = ({:.17e}, {:.17e})\nrotation_angle = {:.17e}\nscale = {:.17e}\nraw_area = {:.17e}\n",
            self.translation[0], self.translation[1], self.rotation_angle, self.scale, self.raw_area
        )
    }
}

/// Normalized section: unit area, centered, principal axes along the coordinates.
#[derive(Debug, Clone)]
pub struct SectionMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<[usize; 2]>,
    pub area: f64,
    /// ∫ζ²
    pub i2: f64,
    /// ∫ξ²
    pub i3: f64,
    /// μ(D) = I₂ + I₃
    pub mu: f64,
    pub moments: Moments,
    pub tri_area: Vec<f64>,
    /// Gradients of the three barycentric functions per triangle.
    pub tri_grad: Vec<[[f64; 2]; 3]>,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

impl SectionMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn tri_points(&self, t: usize) -> [[f64; 2]; 3] {
        let tr = self.triangles[t];
        [self.vertices[tr[0]], self.vertices[tr[1]], self.vertices[tr[2]]]
    }

    pub fn tri_centroid(&self, t: usize) -> [f64; 2] {
        let p = self.tri_points(t);
        [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0]
    }

    /// Map barycentric coordinates of triangle t to (ξ, ζ).
    pub fn bary_to_point(&self, t: usize, l: &[f64; 3]) -> [f64; 2] {
        let p = self.tri_points(t);
        [l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0], l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1]]
    }

    /// Vertex table (index, ξ, ζ), triangle table and boundary edges for CSV export.
    pub fn vertex_table(&self) -> Vec<[f64; 2]> {
        self.vertices.clone()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let root = find(&mut parent, 0);
        (0..n).all(|v| find(&mut parent, v) == root)
    }
}

/// Translate, rotate to principal axes and scale to unit area.
pub fn normalize_section(raw: &RawMesh) -> Result<(SectionMesh, NormalizationReport)> {
    if raw.triangles.is_empty() {
        return Err(Error::Mesh("empty mesh".into()));
    }
    let m0 = mesh_moments(&raw.vertices, &raw.triangles);
    if !(m0.area > 0.0) {
        return Err(Error::Mesh(format!("mesh area must be positive, got {}", m0.area)));
    }
    let c = [m0.first[0] / m0.area, m0.first[1] / m0.area];
    let centered: Vec<[f64; 2]> = raw.vertices.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect();
    let m1 = mesh_moments(&centered, &raw.triangles);
    let [jxx, jxz, jzz] = m1.second;
    let angle = if jxz.abs() <= 1e-14 * (jxx + jzz) { 0.0 } else { 0.5 * (2.0 * jxz).atan2(jxx - jzz) };
    let report = NormalizationReport { translation: c, rotation_angle: angle, scale: 1.0 / m0.area.sqrt(), raw_area: m0.area };
    let vertices: Vec<[f64; 2]> = raw.vertices.iter().map(|p| report.to_normalized(*p)).collect();
    Ok((build_mesh(vertices, raw.triangles.clone())?, report))
}

/// Assemble operators for an already-normalized vertex set.
pub fn build_mesh(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<SectionMesh> {
    let n = vertices.len();
    let moments = mesh_moments(&vertices, &triangles);
    let mut tri_area_v = Vec::with_capacity(triangles.len());
    let mut tri_grad = Vec::with_capacity(triangles.len());
    let mut k_trip = Vec::with_capacity(9 * triangles.len());
    let mut m_trip = Vec::with_capacity(9 * triangles.len());
    let mut edge_count = std::collections::BTreeMap::new();
    for t in &triangles {
        let p = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
        let a = tri_area(&p);
        if a <= 0.0 {
            return Err(Error::Mesh(format!("triangle {t:?} has non-positive area {a:e}")));
        }
        let g = [
            [(p[1][1] - p[2][1]) / (2.0 * a), (p[2][0] - p[1][0]) / (2.0 * a)],
            [(p[2][1] - p[0][1]) / (2.0 * a), (p[0][0] - p[2][0]) / (2.0 * a)],
            [(p[0][1] - p[1][1]) / (2.0 * a), (p[1][0] - p[0][0]) / (2.0 * a)],
        ];
        for i in 0..3 {
            for j in 0..3 {
                k_trip.push((t[i], t[j], a * (g[i][0] * g[j][0] + g[i][1] * g[j][1])));
                m_trip.push((t[i], t[j], a / 12.0 * if i == j { 2.0 } else { 1.0 }));
            }
            let e = if t[i] < t[(i + 1) % 3] { [t[i], t[(i + 1) % 3]] } else { [t[(i + 1) % 3], t[i]] };
            *edge_count.entry(e).or_insert(0usize) += 1;
        }
        tri_area_v.push(a);
        tri_grad.push(g);
    }
    let boundary_edges = edge_count.into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect();
    Ok(SectionMesh {
        vertices,
        triangles,
        boundary_edges,
        area: moments.area,
        i2: moments.second[2],
        i3: moments.second[0],
        mu: moments.second[0] + moments.second[2],
        moments,
        tri_area: tri_area_v,
        tri_grad,
        stiffness: CsrMatrix::from_triplets(n, k_trip),
        mass: CsrMatrix::from_triplets(n, m_trip),
    })
}

/// Saint-Venant warping ψ and torsional rigidity T = min ∫|∇ψ + (−ζ, ξ)|².
#[derive(Debug, Clone)]
pub struct TorsionSolution {
    pub psi: Vec<f64>,
    pub rigidity: f64,
    pub iterations: usize,
}

pub fn torsional_rigidity(mesh: &SectionMesh) -> Result<TorsionSolution> {
    if !mesh.is_connected() {
        return Err(Error::Mesh("section mesh is disconnected; the Neumann problem is singular".into()));
    }
    let n = mesh.n_vertices();
    let mut rhs = vec![0.0; n];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let c = mesh.tri_centroid(t);
        let g = [-c[1], c[0]];
        let a = mesh.tri_area[t];
        for i in 0..3 {
            let gl = mesh.tri_grad[t][i];
            rhs[tri[i]] -= a * (gl[0] * g[0] + gl[1] * g[1]);
        }
    }
    let basis = orthonormalize(&[vec![1.0; n]]);
    let proj = Projector { basis: &basis, fixed: None };
    let (mut psi, rep) = projected_pcg(&mesh.stiffness, &rhs, &proj, CgOptions::default())?;
    let mean = mesh.mass.apply(&psi).iter().sum::<f64>() / mesh.area;
    psi.iter_mut().for_each(|p| *p -= mean);
    Ok(TorsionSolution { rigidity: torsion_functional(mesh, &psi), psi, iterations: rep.iterations })
}

/// ∫|∇ψ + (−ζ, ξ)|² evaluated exactly for a P1 field ψ.
pub fn torsion_functional(mesh: &SectionMesh, psi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let g = mesh.tri_grad[t];
        let grad = [
            (0..3).map(|i| psi[tri[i]] * g[i][0]).sum::<f64>(),
            (0..3).map(|i| psi[tri[i]] * g[i][1]).sum::<f64>(),
        ];
        let tm = tri_moments(&mesh.tri_points(t));
        // |c + (−ζ, ξ)|² integrated: A|c|² + 2(−c₀∫ζ + c₁∫ξ) + ∫(ξ² + ζ²)
        total += tm.area * (grad[0] * grad[0] + grad[1] * grad[1]) + 2.0 * (-grad[0] * tm.first[1] + grad[1] * tm.first[0])
            + tm.second[0]
            + tm.second[2];
    }
    total
}

/// Rigidity of the unit square from the truncated Saint-Venant series
/// T = (1/3)(1 − (192/π⁵) Σ_{n odd} tanh(nπ/2)/n⁵) for a rectangle a×b with a ≥ b, scaled by a b³.
pub fn rectangle_torsion_series(a: f64, b: f64, terms: usize) -> f64 {
    let (a, b) = if a >= b { (a, b) } else { (b, a) };
    let mut sum = 0.0;
    for k in 0..terms {
        let n = (2 * k + 1) as f64;
        sum += (n * PI * a / (2.0 * b)).tanh() / n.powi(5);
    }
    a * b.powi(3) / 3.0 * (1.0 - 192.0 / PI.powi(5) * (b / a) * sum)
}
