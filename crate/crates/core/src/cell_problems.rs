//! Linearized elastic form Q₃, the warping cell problem Q⁰(s,t,F), its minimum over t,
//! and the isotropic closed form.
//!
//! Warping fields are P1 vector fields stored in frame coordinates φ̂ = R₀ᵀφ, three
//! entries per vertex. The cell matrix is M = (F(0,ξ,ζ)ᵀ + te₁ | ∂ξφ̂ | ∂ζφ̂) and the
//! integrand is Q₃(R₀MR₀ᵀ).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix4, SMatrix, SVector, Vector4};

use crate::cross_section::SectionMesh;
use crate::error::{invalid, Result};
use crate::frame_geometry::{sym, FramePoint, Mat3, Vec3};
use crate::quadrature::TriangleRule;
use crate::sparse::{dot, norm, orthonormalize, projected_pcg, CgOptions, CgReport, CsrMatrix, Projector};

type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SVector<f64, 9>;

/// User-supplied Q₃(s, ξ, ζ; G).
pub type QuadraticForm = Arc<dyn Fn(f64, f64, f64, &Mat3) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Material {
    IsotropicLame { lambda: f64, mu: f64 },
    /// Symmetric positive semidefinite form, expected to vanish on skew matrices.
    QuadraticFormField(QuadraticForm),
}

impl fmt::Debug for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Material::IsotropicLame { lambda, mu } => write!(f, "IsotropicLame {{ lambda: {lambda}, mu: {mu} }}"),
            Material::QuadraticFormField(_) => write!(f, "QuadraticFormField(..)"),
        }
    }
}

impl Material {
    pub fn isotropic(lambda: f64, mu: f64) -> Result<Self> {
        let m = Material::IsotropicLame { lambda, mu };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let Material::IsotropicLame { lambda, mu } = *self {
            if !(lambda.is_finite() && mu.is_finite()) {
                return invalid("Lamé moduli must be finite");
            }
            if mu <= 0.0 {
                return invalid(format!("shear modulus mu must be positive, got {mu}"));
            }
            if 3.0 * lambda + 2.0 * mu <= 0.0 {
                return invalid(format!("3 lambda + 2 mu must be positive, got {}", 3.0 * lambda + 2.0 * mu));
            }
        }
        Ok(())
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(self, Material::IsotropicLame { .. })
    }

    /// Q₃ at a point of the section.
    pub fn q3(&self, s: f64, xi: f64, zeta: f64, g: &Mat3) -> f64 {
        match self {
            Material::IsotropicLame { lambda, mu } => {
                let e = sym(g);
                2.0 * mu * e.norm_squared() + lambda * g.trace().powi(2)
            }
            Material::QuadraticFormField(q) => q(s, xi, zeta, g),
        }
    }
}

pub fn q3(material: &Material, s: f64, xi: f64, zeta: f64, g: &Mat3) -> f64 {
    material.q3(s, xi, zeta, g)
}

/// Unit matrix e_row ⊗ e_col for the column-major index k = 3·col + row.
fn unit(k: usize) -> Mat3 {
    let mut m = Mat3::zeros();
    m[(k % 3, k / 3)] = 1.0;
    m
}

/// Matrix C with Q₃(R₀MR₀ᵀ) = vec(M)ᵀ C vec(M), by polarization.
fn polarized_form(material: &Material, fp: &FramePoint, xi: f64, zeta: f64) -> Mat9 {
    let r = fp.r0;
    let q = |m: &Mat3| material.q3(fp.s, xi, zeta, &(r * m * r.transpose()));
    let diag: Vec<f64> = (0..9).map(|k| q(&unit(k))).collect();
    let mut c = Mat9::zeros();
    for i in 0..9 {
        c[(i, i)] = diag[i];
        for j in 0..i {
            let v = 0.5 * (q(&(unit(i) + unit(j))) - diag[i] - diag[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Reject non-skew F.
fn check_skew(f: &Mat3) -> Result<()> {
    let s = sym(f).abs().max();
    if s >= 1e-12 || !f.iter().all(|x| x.is_finite()) {
        return invalid(format!("F must be skew-symmetric, symmetric part has size {s:e}"));
    }
    Ok(())
}

/// First column of M before warping: F(0,ξ,ζ)ᵀ + te₁.
fn data_column(t: f64, f: &Mat3, xi: f64, zeta: f64) -> Vec3 {
    f * Vec3::new(0.0, xi, zeta) + Vec3::new(t, 0.0, 0.0)
}

/// Section operators of the cell problem at one frame point, reusable for many (t, F).
#[derive(Debug, Clone)]
pub struct CellProblem<'a> {
    pub mesh: &'a SectionMesh,
    pub s: f64,
    pub r0: Mat3,
    rule: TriangleRule,
    /// C per triangle and quadrature point (one entry when homogeneous).
    forms: Vec<Mat9>,
    homogeneous: bool,
    pub stiffness: CsrMatrix,
    /// Euclidean-orthonormal basis of the stiffness kernel.
    kernel: Vec<Vec<f64>>,
    /// Raw kernel vectors: three translations and the in-plane rotation (0, ζ, −ξ).
    kernel_raw: Vec<Vec<f64>>,
    /// Linear functionals defining 𝒱 as nodal weight vectors.
    constraints: Vec<Vec<f64>>,
    pub cg: CgOptions,
}

impl<'a> CellProblem<'a> {
    pub fn new(material: &Material, fp: &FramePoint, mesh: &'a SectionMesh) -> Result<Self> {
        material.validate()?;
        let rule = TriangleRule::degree2();
        let homogeneous = material.is_homogeneous();
        let mut forms = Vec::new();
        if homogeneous {
            forms.push(polarized_form(material, fp, 0.0, 0.0));
        } else {
            for t in 0..mesh.triangles.len() {
                for l in &rule.points {
                    let p = mesh.bary_to_point(t, l);
                    forms.push(polarized_form(material, fp, p[0], p[1]));
                }
            }
        }
        let scale = forms.iter().map(|c| c.abs().max()).fold(0.0, f64::max).max(1e-300);
        for c in &forms {
            let sc = c.fixed_view::<6, 6>(3, 3).into_owned();
            let ev = sc.symmetric_eigenvalues();
            if ev.min() < -1e-10 * scale {
                return invalid(format!("material form is indefinite: eigenvalue {:e}", ev.min()));
            }
        }
        let n = mesh.n_vertices();
        let mut trip = Vec::with_capacity(81 * mesh.triangles.len());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let cff = Self::integrated_form(&forms, homogeneous, &rule, mesh, t).fixed_view::<6, 6>(3, 3).into_owned();
            let g = mesh.tri_grad[t];
            for a in 0..3 {
                for ra in 0..3 {
                    for b in 0..3 {
                        for rb in 0..3 {
                            let v = g[a][0] * g[b][0] * cff[(ra, rb)]
                                + g[a][0] * g[b][1] * cff[(ra, 3 + rb)]
                                + g[a][1] * g[b][0] * cff[(3 + ra, rb)]
                                + g[a][1] * g[b][1] * cff[(3 + ra, 3 + rb)];
                            if v != 0.0 {
                                trip.push((3 * tri[a] + ra, 3 * tri[b] + rb, v));
                            }
                        }
                    }
                }
            }
        }
        let stiffness = CsrMatrix::from_triplets(3 * n, trip);
        let mut kernel_raw = Vec::new();
        for r in 0..3 {
            let mut k = vec![0.0; 3 * n];
            (0..n).for_each(|v| k[3 * v + r] = 1.0);
            kernel_raw.push(k);
        }
        let mut rot = vec![0.0; 3 * n];
        for (v, p) in mesh.vertices.iter().enumerate() {
            rot[3 * v + 1] = p[1];
            rot[3 * v + 2] = -p[0];
        }
        kernel_raw.push(rot);
        let kernel = orthonormalize(&kernel_raw);
        let lumped = mesh.mass.apply(&vec![1.0; n]);
        let zeta: Vec<f64> = mesh.vertices.iter().map(|p| p[1]).collect();
        let xi: Vec<f64> = mesh.vertices.iter().map(|p| p[0]).collect();
        let mz = mesh.mass.apply(&zeta);
        let mx = mesh.mass.apply(&xi);
        let mut constraints = Vec::new();
        for r in 0..3 {
            let mut c = vec![0.0; 3 * n];
            (0..n).for_each(|v| c[3 * v + r] = lumped[v]);
            constraints.push(c);
        }
        let mut c = vec![0.0; 3 * n];
        for v in 0..n {
            c[3 * v + 1] = mz[v];
            c[3 * v + 2] = -mx[v];
        }
        constraints.push(c);
        Ok(CellProblem {
            mesh,
            s: fp.s,
            r0: fp.r0,
            rule,
            forms,
            homogeneous,
            stiffness,
            kernel,
            kernel_raw,
            constraints,
            cg: CgOptions::default(),
        })
    }

    fn form(&self, t: usize, q: usize) -> &Mat9 {
        if self.homogeneous {
            &self.forms[0]
        } else {
            &self.forms[t * self.rule.points.len() + q]
        }
    }

    fn integrated_form(forms: &[Mat9], homogeneous: bool, rule: &TriangleRule, mesh: &SectionMesh, t: usize) -> Mat9 {
        let a = mesh.tri_area[t];
        if homogeneous {
            return forms[0] * a;
        }
        let nq = rule.points.len();
        (0..nq).fold(Mat9::zeros(), |acc, q| acc + forms[t * nq + q] * (a * rule.weights[q]))
    }

    fn warp_gradient(&self, t: usize, phi: &[f64]) -> [f64; 6] {
        let tri = self.mesh.triangles[t];
        let g = self.mesh.tri_grad[t];
        let mut d = [0.0; 6];
        for a in 0..3 {
            for r in 0..3 {
                let p = phi[3 * tri[a] + r];
                d[r] += p * g[a][0];
                d[3 + r] += p * g[a][1];
            }
        }
        d
    }

    fn cell_vector(&self, t: usize, q: usize, tt: f64, f: &Mat3, dphi: Option<&[f64; 6]>) -> Vec9 {
        let p = self.mesh.bary_to_point(t, &self.rule.points[q]);
        let c = data_column(tt, f, p[0], p[1]);
        let mut m = Vec9::zeros();
        m[0] = c[0];
        m[1] = c[1];
        m[2] = c[2];
        if let Some(d) = dphi {
            for k in 0..6 {
                m[3 + k] = d[k];
            }
        }
        m
    }

    /// Integral of vec(M₁)ᵀ C vec(M₂) for two data/warping pairs.
    pub fn bilinear(&self, d1: (f64, &Mat3, Option<&[f64]>), d2: (f64, &Mat3, Option<&[f64]>)) -> f64 {
        let mut total = 0.0;
        for t in 0..self.mesh.triangles.len() {
            let g1 = d1.2.map(|p| self.warp_gradient(t, p));
            let g2 = d2.2.map(|p| self.warp_gradient(t, p));
            let a = self.mesh.tri_area[t];
            for q in 0..self.rule.points.len() {
                let m1 = self.cell_vector(t, q, d1.0, d1.1, g1.as_ref());
                let m2 = self.cell_vector(t, q, d2.0, d2.1, g2.as_ref());
                total += a * self.rule.weights[q] * m1.dot(&(self.form(t, q) * m2));
            }
        }
        total
    }

    /// ∫_D Q₃(R₀MR₀ᵀ) for a given warping φ̂ (or none), without relaxation.
    pub fn integrand_value(&self, t: f64, f: &Mat3, phi: Option<&[f64]>) -> Result<f64> {
        check_skew(f)?;
        if let Some(p) = phi {
            if p.len() != 3 * self.mesh.n_vertices() {
                return invalid(format!("warping field has {} entries, expected {}", p.len(), 3 * self.mesh.n_vertices()));
            }
        }
        Ok(self.bilinear((t, f, phi), (t, f, phi)))
    }

    fn load(&self, t: f64, f: &Mat3) -> Vec<f64> {
        let mut b = vec![0.0; self.stiffness.n];
        for (ti, tri) in self.mesh.triangles.iter().enumerate() {
            let g = self.mesh.tri_grad[ti];
            let a = self.mesh.tri_area[ti];
            let mut fc = [0.0; 6];
            for q in 0..self.rule.points.len() {
                let m = self.cell_vector(ti, q, t, f, None);
                let cm = self.form(ti, q) * m;
                for k in 0..6 {
                    fc[k] += a * self.rule.weights[q] * cm[3 + k];
                }
            }
            for node in 0..3 {
                for r in 0..3 {
                    b[3 * tri[node] + r] -= g[node][0] * fc[r] + g[node][1] * fc[3 + r];
                }
            }
        }
        b
    }

    /// Shift by a kernel combination so that the 𝒱 constraints hold.
    fn gauge(&self, phi: &mut [f64]) {
        let mut a = Matrix4::zeros();
        let mut rhs = Vector4::zeros();
        for i in 0..4 {
            rhs[i] = -dot(&self.constraints[i], phi);
            for j in 0..4 {
                a[(i, j)] = dot(&self.constraints[i], &self.kernel_raw[j]);
            }
        }
        if let Some(c) = a.lu().solve(&rhs) {
            for j in 0..4 {
                phi.iter_mut().zip(&self.kernel_raw[j]).for_each(|(p, k)| *p += c[j] * k);
            }
        }
    }

    /// Values of the four 𝒱 functionals: ∫φ̂ and ∫(ζφ̂₂ − ξφ̂₃).
    pub fn constraint_values(&self, phi: &[f64]) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| dot(&self.constraints[i], phi))
    }

    pub fn solve(&self, t: f64, f: &Mat3) -> Result<CellSolution> {
        check_skew(f)?;
        let b = self.load(t, f);
        let proj = Projector { basis: &self.kernel, fixed: None };
        let (mut phi, report) = if norm(&b) == 0.0 {
            (vec![0.0; b.len()], CgReport { iterations: 0, relative_residual: 0.0, history: vec![] })
        } else {
            projected_pcg(&self.stiffness, &b, &proj, self.cg)?
        };
        self.gauge(&mut phi);
        let value = self.bilinear((t, f, Some(&phi)), (t, f, Some(&phi)));
        Ok(CellSolution { value, phi_frame: phi, s: self.s, r0: self.r0, t, f: *f, cg: report })
    }

    /// Minimum of Q⁰ over t by a three-point parabola on exact evaluations.
    pub fn q_min(&self, f: &Mat3) -> Result<(f64, f64)> {
        check_skew(f)?;
        let h = 1.0 + f.abs().max();
        let qm = self.solve(-h, f)?.value;
        let q0 = self.solve(0.0, f)?.value;
        let qp = self.solve(h, f)?.value;
        let a = (qp + qm - 2.0 * q0) / (2.0 * h * h);
        let b = (qp - qm) / (2.0 * h);
        if a <= 0.0 {
            return invalid(format!("Q0 is not strictly convex in t (curvature {a:e})"));
        }
        let t_star = -b / (2.0 * a);
        Ok((q0 - b * b / (4.0 * a), t_star))
    }

    /// Quadratic-form matrix of Q⁰ in y = (t, F₁₂, F₁₃, F₂₃) from four basis solves.
    pub fn cell_data(&self) -> Result<CellData> {
        let sols: Vec<CellSolution> = (0..4)
            .map(|i| {
                let (t, f) = CellData::basis(i);
                self.solve(t, &f)
            })
            .collect::<Result<_>>()?;
        let mut c = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..=i {
                let v = self.bilinear(
                    (sols[i].t, &sols[i].f, Some(&sols[i].phi_frame)),
                    (sols[j].t, &sols[j].f, Some(&sols[j].phi_frame)),
                );
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(CellData { c })
    }

    /// Cell data with the warping field fixed to zero (no cross-section relaxation).
    pub fn cell_data_unrelaxed(&self) -> CellData {
        let basis: Vec<(f64, Mat3)> = (0..4).map(CellData::basis).collect();
        let mut c = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..=i {
                let v = self.bilinear((basis[i].0, &basis[i].1, None), (basis[j].0, &basis[j].1, None));
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        CellData { c }
    }
}

/// Minimizer and value of the cell problem for data (s, t, F).
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub value: f64,
    /// Warping in frame coordinates, three entries per vertex.
    pub phi_frame: Vec<f64>,
    pub s: f64,
    pub r0: Mat3,
    pub t: f64,
    pub f: Mat3,
    pub cg: CgReport,
}

impl CellSolution {
    /// Warping φ = R₀φ̂ at vertex v.
    pub fn phi(&self, v: usize) -> Vec3 {
        self.r0 * Vec3::new(self.phi_frame[3 * v], self.phi_frame[3 * v + 1], self.phi_frame[3 * v + 2])
    }
}

/// Q⁰ integrand with a given warping; φ = None means φ = 0.
pub fn q0_integrand_value(
    material: &Material,
    fp: &FramePoint,
    mesh: &SectionMesh,
    t: f64,
    f: &Mat3,
    phi_frame: Option<&[f64]>,
) -> Result<f64> {
    check_skew(f)?;
    CellProblem::new(material, fp, mesh)?.integrand_value(t, f, phi_frame)
}

pub fn q0_solve(material: &Material, fp: &FramePoint, mesh: &SectionMesh, t: f64, f: &Mat3) -> Result<CellSolution> {
    CellProblem::new(material, fp, mesh)?.solve(t, f)
}

pub fn q_min(material: &Material, fp: &FramePoint, mesh: &SectionMesh, f: &Mat3) -> Result<(f64, f64)> {
    CellProblem::new(material, fp, mesh)?.q_min(f)
}

/// μ(3λ+2μ)/(λ+μ)·(t² + I₃F₁₂² + I₂F₁₃²) + μT F₂₃².
pub fn q0_closed_form_isotropic(lambda: f64, mu: f64, i2: f64, i3: f64, torsion: f64, t: f64, f: &Mat3) -> Result<f64> {
    check_skew(f)?;
    if lambda + mu == 0.0 {
        return invalid("lambda + mu must be nonzero");
    }
    let young = mu * (3.0 * lambda + 2.0 * mu) / (lambda + mu);
    Ok(young * (t * t + i3 * f[(0, 1)].powi(2) + i2 * f[(0, 2)].powi(2)) + mu * torsion * f[(1, 2)].powi(2))
}

/// Q⁰(s,·,·) as a 4×4 quadratic form on y = (t, F₁₂, F₁₃, F₂₃).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellData {
    pub c: Matrix4<f64>,
}

impl CellData {
    pub fn closed_form_isotropic(lambda: f64, mu: f64, i2: f64, i3: f64, torsion: f64) -> Result<Self> {
        Material::isotropic(lambda, mu)?;
        let young = mu * (3.0 * lambda + 2.0 * mu) / (lambda + mu);
        Ok(CellData { c: Matrix4::from_diagonal(&Vector4::new(young, young * i3, young * i2, mu * torsion)) })
    }

    /// Data of the i-th coordinate direction of y.
    pub fn basis(i: usize) -> (f64, Mat3) {
        let mut f = Mat3::zeros();
        let (r, c) = match i {
            0 => return (1.0, f),
            1 => (0, 1),
            2 => (0, 2),
            _ => (1, 2),
        };
        f[(r, c)] = 1.0;
        f[(c, r)] = -1.0;
        (0.0, f)
    }

    pub fn coordinates(t: f64, f: &Mat3) -> Vector4<f64> {
        Vector4::new(t, f[(0, 1)], f[(0, 2)], f[(1, 2)])
    }

    pub fn q0(&self, t: f64, f: &Mat3) -> f64 {
        let y = Self::coordinates(t, f);
        y.dot(&(self.c * y))
    }

    /// Q(F) = min_t Q⁰(t,F) and the minimizing t, via the Schur complement.
    pub fn q(&self, f: &Mat3) -> (f64, f64) {
        let y = Self::coordinates(0.0, f);
        let cy = self.c * y;
        let t_star = -cy[0] / self.c[(0, 0)];
        (y.dot(&cy) + t_star * cy[0], t_star)
    }

    /// 3×3 form on (F₁₂, F₁₃, F₂₃) after eliminating t.
    pub fn reduced(&self) -> nalgebra::Matrix3<f64> {
        let mut r = nalgebra::Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = self.c[(i + 1, j + 1)] - self.c[(i + 1, 0)] * self.c[(0, j + 1)] / self.c[(0, 0)];
            }
        }
        r
    }
}

/// Dense copy of a small CSR matrix, for diagnostics.
pub fn to_dense(a: &CsrMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.n, a.n);
    for i in 0..a.n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            d[(i, a.cols[k])] += a.vals[k];
        }
    }
    d
}

/// A skew matrix from (F₁₂, F₁₃, F₂₃).
pub fn skew_from_entries(f12: f64, f13: f64, f23: f64) -> Mat3 {
    Mat3::new(0.0, f12, f13, -f12, 0.0, f23, -f13, -f23, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::cross_section::{make_section, normalize_section, torsional_rigidity, SectionPreset};
    use crate::frame_geometry::{adapted_frame, make_curve, CurvePreset, FrameMode};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn disc(edge: f64) -> SectionMesh {
        normalize_section(&make_section(&SectionPreset::Disc { radius: 1.0 }, edge).unwrap()).unwrap().0
    }

    fn helix_point() -> FramePoint {
        let c = make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 1.0 }, Some(3.0)).unwrap();
        adapted_frame(&c, 60, FrameMode::RotationMinimizing, None).unwrap().frame_at(1.3)
    }

    fn straight_point() -> FramePoint {
        let c = make_curve(&CurvePreset::Line, Some(1.0)).unwrap();
        adapted_frame(&c, 4, FrameMode::RotationMinimizing, None).unwrap().frame_at(0.5)
    }

    #[test]
    fn q3_examples() {
        let m = Material::isotropic(1.0, 1.0).unwrap();
        assert_eq!(m.q3(0.0, 0.0, 0.0, &Mat3::identity()), 15.0);
        let m0 = Material::isotropic(0.0, 1.0).unwrap();
        let e11 = unit(0);
        assert_eq!(m0.q3(0.0, 0.0, 0.0, &e11), 2.0);
        assert!(m.q3(0.0, 0.0, 0.0, &skew_from_entries(1.0, -2.0, 0.5)).abs() < 1e-15);
        assert!(Material::isotropic(1.0, 0.0).is_err());
        assert!(Material::isotropic(-1.0, 1.0).is_err());
    }

    #[test]
    fn unrelaxed_stretch_value() {
        let mesh = disc(0.2);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let v = q0_integrand_value(&m, &helix_point(), &mesh, 1.0, &Mat3::zeros(), None).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(q0_integrand_value(&m, &helix_point(), &mesh, 1.0, &Mat3::identity(), None).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let z = Mat3::zeros();
        assert_eq!(q0_closed_form_isotropic(1.0, 1.0, 0.1, 0.1, 0.1, 0.0, &z).unwrap(), 0.0);
        assert_eq!(q0_closed_form_isotropic(1.0, 1.0, 0.1, 0.1, 0.1, 1.0, &z).unwrap(), 2.5);
        let i = 1.0 / (4.0 * PI);
        let v = q0_closed_form_isotropic(0.0, 1.0, i, i, 2.0 * i, 0.0, &skew_from_entries(1.0, 0.0, 0.0)).unwrap();
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(q0_closed_form_isotropic(-1.0, 1.0, i, i, i, 1.0, &z).is_err());
    }

    #[test]
    fn stretch_and_twist_match_closed_form() {
        let mesh = disc(0.08);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let fp = helix_point();
        let sol = q0_solve(&m, &fp, &mesh, 1.0, &Mat3::zeros()).unwrap();
        assert!((sol.value - 2.5).abs() < 0.05);
        let tw = q0_solve(&m, &fp, &mesh, 0.0, &skew_from_entries(0.0, 0.0, 1.0)).unwrap();
        assert!((tw.value / (1.0 / (2.0 * PI)) - 1.0).abs() < 0.02);
        let tor = torsional_rigidity(&mesh).unwrap();
        assert!((tw.value - tor.rigidity).abs() < 1e-8 * tor.rigidity);
        let cv = CellProblem::new(&m, &fp, &mesh).unwrap().constraint_values(&tw.phi_frame);
        assert!(cv.iter().all(|c| c.abs() < 1e-10), "{cv:?}");
    }

    #[test]
    fn zero_data_gives_zero() {
        let mesh = disc(0.25);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let sol = q0_solve(&m, &straight_point(), &mesh, 0.0, &Mat3::zeros()).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.phi_frame.iter().all(|&p| p == 0.0));
        let (v, t) = q_min(&m, &straight_point(), &mesh, &Mat3::zeros()).unwrap();
        assert!(v.abs() < 1e-14 && t.abs() < 1e-12);
    }

    #[test]
    fn stiffness_kernel_is_four_dimensional() {
        let mesh = disc(0.35);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let p = CellProblem::new(&m, &helix_point(), &mesh).unwrap();
        let ev = to_dense(&p.stiffness).symmetric_eigen().eigenvalues;
        let mut v: Vec<f64> = ev.iter().cloned().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = v[v.len() - 1];
        assert!(v[..4].iter().all(|x| x.abs() < 1e-10 * top));
        assert!(v[4] > 1e-6 * top);
    }

    #[test]
    fn fem_cell_data_is_diagonal_for_isotropic_disc() {
        let mesh = disc(0.15);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let cd = CellProblem::new(&m, &helix_point(), &mesh).unwrap().cell_data().unwrap();
        let tor = torsional_rigidity(&mesh).unwrap();
        let cf = CellData::closed_form_isotropic(1.0, 1.0, mesh.i2, mesh.i3, tor.rigidity).unwrap();
        assert!((cd.c[(0, 0)] - 2.5).abs() < 1e-8);
        for i in 0..4 {
            for j in 0..4 {
                // quadratic Poisson warping is only approximated by P1 fields
                let tol = 5e-3 * (cf.c[(i, i)] * cf.c[(j, j)]).sqrt();
                assert!((cd.c[(i, j)] - cf.c[(i, j)]).abs() < tol, "{i}{j}: {} vs {}", cd.c[(i, j)], cf.c[(i, j)]);
            }
        }
    }

    fn coupled_material() -> Material {
        Material::QuadraticFormField(Arc::new(|_s, xi, _zeta, g: &Mat3| {
            let e = sym(g);
            let w = 1.0 + 0.8 * xi;
            w * (2.0 * e.norm_squared() + g.trace().powi(2)) + (e[(0, 0)] + 0.5 * e[(1, 1)] + 0.3 * e[(0, 2)]).powi(2)
        }))
    }

    #[test]
    fn q_min_matches_brute_force_scan() {
        let mesh = disc(0.3);
        let m = coupled_material();
        let fp = helix_point();
        let f = skew_from_entries(0.7, -0.4, 0.3);
        let p = CellProblem::new(&m, &fp, &mesh).unwrap();
        let (qv, t_star) = p.q_min(&f).unwrap();
        assert!(t_star.abs() > 1e-3);
        let mut best = (f64::INFINITY, 0.0);
        for k in -400..=400 {
            let t = t_star + k as f64 * 1e-3 - 0.0;
            let v = p.solve(t, &f).unwrap().value;
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!((best.1 - t_star).abs() <= 1e-3);
        assert!(qv <= best.0 + 1e-10);
        let cd = p.cell_data().unwrap();
        let (q_schur, t_schur) = cd.q(&f);
        assert!((q_schur - qv).abs() < 1e-9 * (1.0 + qv) && (t_schur - t_star).abs() < 1e-8);
    }

    #[test]
    fn isotropic_q_min_has_zero_t() {
        let mesh = disc(0.25);
        let m = Material::isotropic(1.0, 1.0).unwrap();
        let f = skew_from_entries(0.3, 0.2, -0.5);
        let p = CellProblem::new(&m, &helix_point(), &mesh).unwrap();
        let (qv, t) = p.q_min(&f).unwrap();
        assert!(t.abs() < 1e-9);
        assert!((qv - p.solve(0.0, &f).unwrap().value).abs() < 1e-10);
    }

    #[test]
    fn indefinite_form_rejected() {
        let mesh = disc(0.4);
        let bad = Material::QuadraticFormField(Arc::new(|_, _, _, g: &Mat3| -sym(g).norm_squared()));
        assert!(matches!(CellProblem::new(&bad, &straight_point(), &mesh), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn homogeneous_superposition_and_ordering(
            t1 in -1.0f64..1.0, a1 in -1.0f64..1.0, b1 in -1.0f64..1.0, c1 in -1.0f64..1.0,
            t2 in -1.0f64..1.0, a2 in -1.0f64..1.0, b2 in -1.0f64..1.0, c2 in -1.0f64..1.0,
            lam in -3.0f64..3.0,
        ) {
            let mesh = disc(0.3);
            let m = coupled_material();
            let p = CellProblem::new(&m, &helix_point(), &mesh).unwrap();
            let f1 = skew_from_entries(a1, b1, c1);
            let f2 = skew_from_entries(a2, b2, c2);
            let s1 = p.solve(t1, &f1).unwrap();
            let s2 = p.solve(t2, &f2).unwrap();
            let s12 = p.solve(t1 + t2, &(f1 + f2)).unwrap();
            let scale = norm(&s12.phi_frame).max(norm(&s1.phi_frame)).max(1e-12);
            let diff: Vec<f64> = (0..s12.phi_frame.len()).map(|i| s12.phi_frame[i] - s1.phi_frame[i] - s2.phi_frame[i]).collect();
            prop_assert!(norm(&diff) <= 1e-8 * scale);
            let sl = p.solve(lam * t1, &(f1 * lam)).unwrap();
            prop_assert!((sl.value - lam * lam * s1.value).abs() <= 1e-10 * (lam * lam * s1.value).max(1e-300) + 1e-14);
            let upper = p.integrand_value(t1, &f1, None).unwrap();
            let (qm, _) = p.q_min(&f1).unwrap();
            prop_assert!(upper >= s1.value - 1e-12);
            prop_assert!(s1.value >= qm - 1e-10 * (1.0 + s1.value));
            prop_assert!(qm >= -1e-12);
        }
    }
}
