//! Minimization of the limit energies under loads and boundary conditions.
//!
//! The discrete space is the Hermite/linear `RodState` space. The tangential part of v′
//! between nodes is controlled by a penalty ½ρ∫(v′·τ)² so that the discrete kernel is
//! exactly the rigid-motion family.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::cell_problems::CellData;
use crate::error::{invalid, Error, Result};
use crate::frame_geometry::{FramePoint, FramedCurve, Regime, ScalingRegime, Vec3};
use crate::rod_functionals::{
    constraint_residual, energy_i_alpha, hermite, inextensibility_residual, strain_from_sample, unit_gauss, RodSample,
    RodState, NODE_DOFS,
};
use crate::sparse::{dot, norm, orthonormalize, projected_pcg, CgOptions, CsrMatrix, LinearOperator, Projector};

/// Distributed loads sampled at the rod nodes: force f on v, axial load g on u, moment m on w.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadCase {
    pub f: Vec<[f64; 3]>,
    pub g: Vec<f64>,
    pub m: Vec<f64>,
}

impl LoadCase {
    pub fn zero(frame: &FramedCurve) -> Self {
        let n = frame.s.len();
        LoadCase { f: vec![[0.0; 3]; n], g: vec![0.0; n], m: vec![0.0; n] }
    }

    /// Sample loads from functions of (s, frame point).
    pub fn from_fn(
        frame: &FramedCurve,
        f: impl Fn(&FramePoint) -> Vec3,
        g: impl Fn(&FramePoint) -> f64,
        m: impl Fn(&FramePoint) -> f64,
    ) -> Self {
        let pts: Vec<FramePoint> = (0..frame.s.len()).map(|i| frame.node(i)).collect();
        LoadCase {
            f: pts.iter().map(|p| f(p).into()).collect(),
            g: pts.iter().map(&g).collect(),
            m: pts.iter().map(&m).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        LoadCase {
            f: self.f.iter().map(|v| [c * v[0], c * v[1], c * v[2]]).collect(),
            g: self.g.iter().map(|v| c * v).collect(),
            m: self.m.iter().map(|v| c * v).collect(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.f.len() != n || self.g.len() != n || self.m.len() != n {
            return invalid(format!("loads must have one sample per rod node ({n})"));
        }
        if self.f.iter().flatten().chain(&self.g).chain(&self.m).any(|v| !v.is_finite()) {
            return invalid("loads must be finite");
        }
        Ok(())
    }
}

/// Which fields a clamp fixes to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampSet {
    pub v: bool,
    pub dv: bool,
    pub w: bool,
    pub u: bool,
}

impl ClampSet {
    pub const ALL: ClampSet = ClampSet { v: true, dv: true, w: true, u: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundarySpec {
    Free,
    Clamped { start: Option<ClampSet>, end: Option<ClampSet> },
    PeriodicRing,
}

impl BoundarySpec {
    pub fn clamped_both() -> Self {
        BoundarySpec::Clamped { start: Some(ClampSet::ALL), end: Some(ClampSet::ALL) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizationReport {
    /// I_α of the returned state.
    pub energy: f64,
    /// ∫ f·v + g·u + m·w.
    pub load_work: f64,
    /// I_α + penalty − load work.
    pub objective: f64,
    pub penalty_energy: f64,
    pub inextensibility_residual: f64,
    pub periodicity_defect: f64,
    /// ‖u′ + ½|v′_⊥|²‖ (meaningful in the intermediate regime).
    pub constraint_residual: f64,
    pub iterations: usize,
    pub solver_residual: f64,
    pub projected_gradient_norm: f64,
    pub newton_history: Vec<NewtonStep>,
    pub levenberg_shifts: usize,
    pub kernel_dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Penalty ρ on (v′·τ)²; `None` selects a scale from the bending stiffness and grid.
    pub penalty: Option<f64>,
    pub cg: CgOptions,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { penalty: None, cg: CgOptions { tol: 1e-12, accept: 1e-9, max_iter: 200_000 }, newton_max_iter: 100, newton_tol: 1e-9 }
    }
}

const ROWS: usize = 12;
type LocalRows = SMatrix<f64, ROWS, 14>;
const R_DU: usize = 0;
const R_E: usize = 1;
const R_A: usize = 4;
const R_B: usize = 5;
const R_TAU: usize = 6;
const R_V: usize = 7;
const R_W: usize = 10;
const R_U: usize = 11;

struct GaussPoint {
    element: usize,
    weight: f64,
    c: nalgebra::Matrix4<f64>,
    rows: LocalRows,
    f: Vec3,
    g: f64,
    m: f64,
}

/// Discretized rod problem on the reduced (boundary-compatible) unknowns.
pub struct RodProblem<'a> {
    pub frame: &'a FramedCurve,
    pub regime: ScalingRegime,
    pub boundary: BoundarySpec,
    gps: Vec<GaussPoint>,
    map: Vec<Option<usize>>,
    pub n_reduced: usize,
    pub penalty: f64,
    kernel: Vec<Vec<f64>>,
    opts: SolverOptions,
}

fn sample_local(q: &[f64; 14], nu: [(Vec3, Vec3); 2], x: f64, ds: f64) -> RodSample {
    let (h, dh, ddh) = hermite(x);
    let v0 = Vec3::new(q[0], q[1], q[2]);
    let v1 = Vec3::new(q[7], q[8], q[9]);
    let d0 = nu[0].0 * q[3] + nu[0].1 * q[4];
    let d1 = nu[1].0 * q[10] + nu[1].1 * q[11];
    let vals = [v0, d0 * ds, v1, d1 * ds];
    let comb = |c: &[f64; 4]| vals.iter().zip(c).fold(Vec3::zeros(), |acc, (v, ci)| acc + v * *ci);
    RodSample {
        v: comb(&h),
        dv: comb(&dh) / ds,
        ddv: comb(&ddh) / (ds * ds),
        w: q[5] * (1.0 - x) + q[12] * x,
        dw: (q[12] - q[5]) / ds,
        u: q[6] * (1.0 - x) + q[13] * x,
        du: (q[13] - q[6]) / ds,
    }
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], x: f64) -> Vec3 {
    Vec3::new(a[0] * (1.0 - x) + b[0] * x, a[1] * (1.0 - x) + b[1] * x, a[2] * (1.0 - x) + b[2] * x)
}

impl<'a> RodProblem<'a> {
    pub fn new(
        frame: &'a FramedCurve,
        cell: &dyn Fn(&FramePoint) -> Result<CellData>,
        regime: ScalingRegime,
        loads: &LoadCase,
        boundary: BoundarySpec,
        opts: SolverOptions,
    ) -> Result<Self> {
        let n = frame.n_intervals();
        loads.check(n + 1)?;
        if boundary == BoundarySpec::PeriodicRing && !frame.closed {
            return invalid("periodic ring boundary conditions need a closed frame");
        }
        let ds = frame.ds();
        let (gx, gw) = unit_gauss(2);
        let nus: Vec<(Vec3, Vec3)> = frame.r0.iter().map(|r| (r.column(1).into(), r.column(2).into())).collect();
        let mut gps = Vec::with_capacity(2 * n);
        for e in 0..n {
            for (x, w) in gx.iter().zip(&gw) {
                let fp = frame.frame_at(frame.s[e] + x * ds);
                let mut rows = LocalRows::zeros();
                for k in 0..14 {
                    let mut q = [0.0; 14];
                    q[k] = 1.0;
                    let smp = sample_local(&q, [nus[e], nus[e + 1]], *x, ds);
                    let st = strain_from_sample(&smp, &fp, Regime::Linear);
                    let col = [
                        smp.du,
                        st.e[(0, 1)],
                        st.e[(0, 2)],
                        st.e[(1, 2)],
                        st.a,
                        st.b_perp,
                        smp.dv.dot(&fp.tau()),
                        smp.v[0],
                        smp.v[1],
                        smp.v[2],
                        smp.w,
                        smp.u,
                    ];
                    for (r, val) in col.iter().enumerate() {
                        rows[(r, k)] = *val;
                    }
                }
                gps.push(GaussPoint {
                    element: e,
                    weight: w * ds,
                    c: cell(&fp)?.c,
                    rows,
                    f: lerp3(&loads.f[e], &loads.f[e + 1], *x),
                    g: loads.g[e] * (1.0 - x) + loads.g[e + 1] * x,
                    m: loads.m[e] * (1.0 - x) + loads.m[e + 1] * x,
                });
            }
        }
        let penalty = match opts.penalty {
            Some(p) => p,
            None => {
                let stiff = gps.iter().map(|g| g.c[(1, 1)].max(g.c[(2, 2)])).fold(0.0, f64::max);
                stiff.max(1e-300) / (ds * ds)
            }
        };
        // reduced numbering
        let mut map: Vec<Option<usize>> = vec![None; NODE_DOFS * (n + 1)];
        let mut clamped = vec![false; NODE_DOFS * (n + 1)];
        let intermediate = regime.regime == Regime::Intermediate;
        let mut clamp = |node: usize, c: &ClampSet| {
            let b = NODE_DOFS * node;
            for k in 0..3 {
                clamped[b + k] |= c.v;
            }
            clamped[b + 3] |= c.dv;
            clamped[b + 4] |= c.dv;
            clamped[b + 5] |= c.w;
            clamped[b + 6] |= c.u;
        };
        if let BoundarySpec::Clamped { start, end } = &boundary {
            if let Some(c) = start {
                clamp(0, c);
            }
            if let Some(c) = end {
                clamp(n, c);
            }
        }
        let mut next = 0;
        for i in 0..=n {
            for k in 0..NODE_DOFS {
                let idx = NODE_DOFS * i + k;
                if clamped[idx] || (intermediate && k == 6) {
                    continue;
                }
                if boundary == BoundarySpec::PeriodicRing && i == n && k < 6 {
                    map[idx] = map[k];
                    continue;
                }
                map[idx] = Some(next);
                next += 1;
            }
        }
        let mut prob = RodProblem { frame, regime, boundary, gps, map, n_reduced: next, penalty, kernel: vec![], opts };
        prob.kernel = prob.compute_kernel();
        Ok(prob)
    }

    fn gather(&self, x: &[f64], e: usize) -> [f64; 14] {
        let mut q = [0.0; 14];
        for (k, qk) in q.iter_mut().enumerate() {
            if let Some(r) = self.map[NODE_DOFS * e + k] {
                *qk = x[r];
            }
        }
        q
    }

    fn scatter(&self, y: &mut [f64], e: usize, q: &[f64]) {
        for (k, qk) in q.iter().enumerate() {
            if let Some(r) = self.map[NODE_DOFS * e + k] {
                y[r] += qk;
            }
        }
    }

    /// Expand reduced unknowns to a full nodal vector.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        self.map.iter().map(|m| m.map_or(0.0, |r| x[r])).collect()
    }

    /// Restrict a full nodal vector (values at the representative entries).
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_reduced];
        let mut seen = vec![false; self.n_reduced];
        for (i, m) in self.map.iter().enumerate() {
            if let Some(r) = m {
                if !seen[*r] {
                    x[*r] = full[i];
                    seen[*r] = true;
                }
            }
        }
        x
    }

    pub fn state(&self, x: &[f64]) -> Result<RodState> {
        RodState::from_dofs(self.frame, &self.expand(x))
    }

    /// Symmetric matrix of the quadratic part: I_α (for α ≠ 3, or its linearization at 0) + penalty.
    fn local_form(&self, gp: &GaussPoint) -> SMatrix<f64, 14, 14> {
        let r = &gp.rows;
        let mut m = SMatrix::<f64, 14, 14>::zeros();
        if self.regime.regime == Regime::Intermediate {
            let cd = CellData { c: gp.c };
            let red = cd.reduced();
            let l = r.fixed_view::<3, 14>(R_E, 0);
            m += l.transpose() * red * l;
        } else {
            let l = r.fixed_view::<4, 14>(R_DU, 0);
            m += l.transpose() * gp.c * l;
        }
        let t = r.fixed_view::<1, 14>(R_TAU, 0);
        m += t.transpose() * t * self.penalty;
        m * gp.weight
    }

    pub fn assemble_quadratic(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.gps.len() * 196);
        for gp in &self.gps {
            let m = self.local_form(gp);
            for a in 0..14 {
                let Some(ra) = self.map[NODE_DOFS * gp.element + a] else { continue };
                for b in 0..14 {
                    let Some(rb) = self.map[NODE_DOFS * gp.element + b] else { continue };
                    if m[(a, b)] != 0.0 {
                        trip.push((ra, rb, m[(a, b)]));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(self.n_reduced, trip)
    }

    pub fn load_vector(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n_reduced];
        for gp in &self.gps {
            let r = &gp.rows;
            let mut q = [0.0; 14];
            for (k, qk) in q.iter_mut().enumerate() {
                *qk = gp.weight
                    * (gp.f[0] * r[(R_V, k)] + gp.f[1] * r[(R_V + 1, k)] + gp.f[2] * r[(R_V + 2, k)]
                        + gp.m * r[(R_W, k)]
                        + gp.g * r[(R_U, k)]);
            }
            self.scatter(&mut b, gp.element, &q);
        }
        b
    }

    /// Rigid motions v = c + Ωγ, v′ = Ωτ, w = (Ων₂)·ν₃ and constant u, restricted to the
    /// boundary conditions, orthonormalized in the reduced space.
    fn candidate_vectors(&self) -> Vec<Vec<f64>> {
        let n = self.frame.n_intervals();
        let mut out = Vec::new();
        let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
        for c in &axes {
            let mut full = vec![0.0; NODE_DOFS * (n + 1)];
            for i in 0..=n {
                for k in 0..3 {
                    full[NODE_DOFS * i + k] = c[k];
                }
            }
            out.push(full);
        }
        let rotations_allowed = self.regime.regime != Regime::VonKarman;
        if rotations_allowed {
            for om in &axes {
                let mut full = vec![0.0; NODE_DOFS * (n + 1)];
                for i in 0..=n {
                    let fp = self.frame.node(i);
                    let v = om.cross(&fp.gamma);
                    let dv = om.cross(&fp.tau());
                    let b = NODE_DOFS * i;
                    full[b..b + 3].copy_from_slice(v.as_slice());
                    full[b + 3] = dv.dot(&fp.nu2());
                    full[b + 4] = dv.dot(&fp.nu3());
                    full[b + 5] = om.cross(&fp.nu2()).dot(&fp.nu3());
                }
                out.push(full);
            }
        }
        if self.regime.regime != Regime::Intermediate {
            let mut full = vec![0.0; NODE_DOFS * (n + 1)];
            for i in 0..=n {
                full[NODE_DOFS * i + 6] = 1.0;
            }
            out.push(full);
        }
        out
    }

    fn compute_kernel(&self) -> Vec<Vec<f64>> {
        let cands = self.candidate_vectors();
        let m = cands.len();
        // combinations vanishing on clamped entries
        let clamped: Vec<usize> = (0..self.map.len())
            .filter(|&i| self.map[i].is_none() && !(self.regime.regime == Regime::Intermediate && i % NODE_DOFS == 6))
            .collect();
        let combos: Vec<Vec<f64>> = if clamped.is_empty() {
            (0..m).map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect()
        } else {
            let mut a = DMatrix::zeros(clamped.len().max(m), m);
            for (r, &i) in clamped.iter().enumerate() {
                for j in 0..m {
                    a[(r, j)] = cands[j][i];
                }
            }
            let svd = a.svd(false, true);
            let vt = svd.v_t.unwrap();
            let smax = svd.singular_values.max().max(1.0);
            (0..m)
                .filter(|&j| svd.singular_values.get(j).is_none_or(|&s| s <= 1e-10 * smax))
                .map(|j| vt.row(j).iter().cloned().collect())
                .collect()
        };
        let vecs: Vec<Vec<f64>> = combos
            .iter()
            .map(|c| {
                let mut full = vec![0.0; self.map.len()];
                for (j, cj) in c.iter().enumerate() {
                    full.iter_mut().zip(&cands[j]).for_each(|(f, v)| *f += cj * v);
                }
                self.restrict(&full)
            })
            .collect();
        orthonormalize(&vecs)
    }

    /// Discrete energy of each kernel vector relative to the largest diagonal entry;
    /// nonzero on curved rods only through interpolation error.
    pub fn kernel_energies(&self) -> Vec<f64> {
        let a = self.assemble_quadratic();
        let scale = a.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
        self.kernel.iter().map(|k| a.quad_form(k) / scale).collect()
    }

    pub fn kernel(&self) -> &[Vec<f64>] {
        &self.kernel
    }

    fn check_equilibrium(&self, b: &[f64]) -> Result<()> {
        let scale = norm(b).max(1e-300);
        for (j, k) in self.kernel.iter().enumerate() {
            let p = dot(b, k);
            if p.abs() > 1e-9 * scale {
                return Err(Error::NotEquilibrated { direction: j, pairing: p });
            }
        }
        Ok(())
    }

    fn projector(&self) -> Projector<'_> {
        Projector { basis: &self.kernel, fixed: None }
    }

    /// Penalty energy ½ρ∫(v′·τ)².
    pub fn penalty_energy(&self, x: &[f64]) -> f64 {
        self.gps
            .iter()
            .map(|gp| {
                let q = self.gather(x, gp.element);
                let t: f64 = (0..14).map(|k| gp.rows[(R_TAU, k)] * q[k]).sum();
                0.5 * self.penalty * gp.weight * t * t
            })
            .sum()
    }

    fn point_values(gp: &GaussPoint, q: &[f64; 14]) -> [f64; ROWS] {
        let mut y = [0.0; ROWS];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = (0..14).map(|k| gp.rows[(r, k)] * q[k]).sum();
        }
        y
    }

    /// Objective for the von-Kármán regime: I₃ + penalty − load work.
    pub fn vk_objective(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for gp in &self.gps {
            let q = self.gather(x, gp.element);
            let y = Self::point_values(gp, &q);
            let z = nalgebra::Vector4::new(y[R_DU] + 0.5 * (y[R_A] * y[R_A] + y[R_B] * y[R_B]), y[R_E], y[R_E + 1], y[R_E + 2]);
            total += gp.weight * (0.5 * z.dot(&(gp.c * z)) + 0.5 * self.penalty * y[R_TAU] * y[R_TAU]);
        }
        total - dot(b, x)
    }

    /// Analytic gradient of the von-Kármán objective.
    pub fn vk_gradient(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_reduced];
        for gp in &self.gps {
            let q = self.gather(x, gp.element);
            let y = Self::point_values(gp, &q);
            let z = nalgebra::Vector4::new(y[R_DU] + 0.5 * (y[R_A] * y[R_A] + y[R_B] * y[R_B]), y[R_E], y[R_E + 1], y[R_E + 2]);
            let cz = gp.c * z;
            let mut local = [0.0; 14];
            for (k, lk) in local.iter_mut().enumerate() {
                let r = &gp.rows;
                let jt = r[(R_DU, k)] + y[R_A] * r[(R_A, k)] + y[R_B] * r[(R_B, k)];
                *lk = gp.weight
                    * (cz[0] * jt + cz[1] * r[(R_E, k)] + cz[2] * r[(R_E + 1, k)] + cz[3] * r[(R_E + 2, k)]
                        + self.penalty * y[R_TAU] * r[(R_TAU, k)]);
            }
            self.scatter(&mut g, gp.element, &local);
        }
        g.iter_mut().zip(b).for_each(|(gi, bi)| *gi -= bi);
        g
    }

    /// Analytic Hessian of the von-Kármán objective.
    pub fn vk_hessian(&self, x: &[f64]) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.gps.len() * 196);
        for gp in &self.gps {
            let q = self.gather(x, gp.element);
            let y = Self::point_values(gp, &q);
            let r = &gp.rows;
            let z = nalgebra::Vector4::new(y[R_DU] + 0.5 * (y[R_A] * y[R_A] + y[R_B] * y[R_B]), y[R_E], y[R_E + 1], y[R_E + 2]);
            let cz = gp.c * z;
            let mut j = SMatrix::<f64, 4, 14>::zeros();
            for k in 0..14 {
                j[(0, k)] = r[(R_DU, k)] + y[R_A] * r[(R_A, k)] + y[R_B] * r[(R_B, k)];
                for e in 0..3 {
                    j[(1 + e, k)] = r[(R_E + e, k)];
                }
            }
            let ra = r.fixed_view::<1, 14>(R_A, 0);
            let rb = r.fixed_view::<1, 14>(R_B, 0);
            let rt = r.fixed_view::<1, 14>(R_TAU, 0);
            let m = (j.transpose() * gp.c * j
                + (ra.transpose() * ra + rb.transpose() * rb) * cz[0]
                + rt.transpose() * rt * self.penalty)
                * gp.weight;
            for a in 0..14 {
                let Some(ia) = self.map[NODE_DOFS * gp.element + a] else { continue };
                for bb in 0..14 {
                    let Some(ib) = self.map[NODE_DOFS * gp.element + bb] else { continue };
                    trip.push((ia, ib, m[(a, bb)]));
                }
            }
        }
        CsrMatrix::from_triplets(self.n_reduced, trip)
    }

    fn finish(&self, x: Vec<f64>, iterations: usize, solver_residual: f64, b: &[f64]) -> Result<(RodState, MinimizationReport)> {
        let mut state = self.state(&x)?;
        if self.regime.regime == Regime::Intermediate {
            reconstruct_u(self.frame, &mut state);
        }
        let cells: Vec<(f64, CellData)> = self.gps.iter().map(|g| (g.weight, CellData { c: g.c })).collect();
        let lookup = |fp: &FramePoint| -> Result<CellData> {
            let ds = self.frame.ds();
            let e = ((fp.s / ds).floor() as usize).min(self.frame.n_intervals() - 1);
            let x = (fp.s - self.frame.s[e]) / ds;
            Ok(cells[2 * e + usize::from(x > 0.5)].1)
        };
        let energy = energy_i_alpha(&state, self.frame, &lookup, self.regime)?;
        let penalty_energy = self.penalty_energy(&x);
        let load_work = dot(b, &x);
        let objective = match self.regime.regime {
            Regime::VonKarman => self.vk_objective(&x, b),
            _ => energy + penalty_energy - load_work,
        };
        let grad = match self.regime.regime {
            Regime::VonKarman => self.vk_gradient(&x, b),
            _ => {
                let a = self.assemble_quadratic();
                a.apply(&x).iter().zip(b).map(|(ax, bi)| ax - bi).collect()
            }
        };
        let mut pg = grad;
        self.projector().apply(&mut pg);
        let report = MinimizationReport {
            energy,
            load_work,
            objective,
            penalty_energy,
            inextensibility_residual: inextensibility_residual(&state, self.frame),
            periodicity_defect: if self.boundary == BoundarySpec::PeriodicRing { state.periodicity_defect() } else { 0.0 },
            constraint_residual: constraint_residual(&state, self.frame),
            iterations,
            solver_residual,
            projected_gradient_norm: norm(&pg),
            newton_history: vec![],
            levenberg_shifts: 0,
            kernel_dimension: self.kernel.len(),
        };
        Ok((state, report))
    }

    pub fn solve_quadratic(&self) -> Result<(Vec<f64>, RodState, MinimizationReport)> {
        if self.regime.regime == Regime::VonKarman {
            return invalid("the von Karman regime is not quadratic; use minimize_von_karman");
        }
        let b = self.load_vector();
        self.check_equilibrium(&b)?;
        let a = self.assemble_quadratic();
        let (x, rep) = projected_pcg(&a, &b, &self.projector(), self.opts.cg)?;
        let (st, report) = self.finish(x.clone(), rep.iterations, rep.relative_residual, &b)?;
        Ok((x, st, report))
    }

    pub fn solve_von_karman(&self, initial: Option<&[f64]>) -> Result<(Vec<f64>, RodState, MinimizationReport)> {
        let b = self.load_vector();
        self.check_equilibrium(&b)?;
        let mut x = initial.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; self.n_reduced]);
        if x.len() != self.n_reduced {
            return invalid(format!("initial guess has {} entries, expected {}", x.len(), self.n_reduced));
        }
        self.projector().apply(&mut x);
        let proj = self.projector();
        let mut history = Vec::new();
        let mut shifts = 0;
        let mut f = self.vk_objective(&x, &b);
        let mut last_res = 0.0;
        for it in 0..self.opts.newton_max_iter {
            let mut g = self.vk_gradient(&x, &b);
            proj.apply(&mut g);
            let gn = norm(&g);
            if gn <= self.opts.newton_tol * (1.0 + f.abs()) {
                history.push(NewtonStep { iteration: it, objective: f, gradient_norm: gn, step: 0.0, shift: 0.0 });
                let (st, mut rep) = self.finish(x.clone(), it, last_res, &b)?;
                rep.newton_history = history;
                rep.levenberg_shifts = shifts;
                return Ok((x, st, rep));
            }
            let h = self.vk_hessian(&x);
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let mut shift = 0.0;
            let diag_scale = h.diagonal().iter().cloned().fold(0.0, f64::max);
            let d = loop {
                let op = Shifted { a: &h, shift };
                match projected_pcg(&op, &rhs, &proj, self.opts.cg) {
                    Ok((d, rep)) if dot(&d, &g) < 0.0 => {
                        last_res = rep.relative_residual;
                        break d;
                    }
                    _ => {
                        shift = if shift == 0.0 { 1e-8 * diag_scale } else { shift * 10.0 };
                        shifts += 1;
                        if shift > 1e6 * diag_scale {
                            return Err(Error::LineSearchFailure { iteration: it, gradient_norm: gn, last_iterate: x });
                        }
                    }
                }
            };
            let slope = dot(&d, &g);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
                let ft = self.vk_objective(&trial, &b);
                if ft <= f + 1e-4 * step * slope {
                    x = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            history.push(NewtonStep { iteration: it, objective: f, gradient_norm: gn, step, shift });
            if !accepted {
                // no decrease possible at roundoff level: accept if already tight
                if gn <= 1e3 * self.opts.newton_tol * (1.0 + f.abs()) {
                    let (st, mut rep) = self.finish(x.clone(), it, last_res, &b)?;
                    rep.newton_history = history;
                    rep.levenberg_shifts = shifts;
                    return Ok((x, st, rep));
                }
                return Err(Error::LineSearchFailure { iteration: it, gradient_norm: gn, last_iterate: x });
            }
        }
        let g = self.vk_gradient(&x, &b);
        Err(Error::LineSearchFailure { iteration: self.opts.newton_max_iter, gradient_norm: norm(&g), last_iterate: x })
    }
}

struct Shifted<'a> {
    a: &'a CsrMatrix,
    shift: f64,
}

impl LinearOperator for Shifted<'_> {
    fn dim(&self) -> usize {
        self.a.n
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.a.mul_vec(x, y);
        y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += self.shift * xi);
    }
    fn diag(&self) -> Vec<f64> {
        self.a.diagonal().iter().map(|d| d + self.shift).collect()
    }
}

/// u with u′ = −½((v′·ν₂)² + (v′·ν₃)²) and zero mean, at the nodes.
pub fn reconstruct_u(frame: &FramedCurve, state: &mut RodState) {
    let n = frame.n_intervals();
    let ds = frame.ds();
    let (gx, gw) = unit_gauss(4);
    let mut u = vec![0.0; n + 1];
    for e in 0..n {
        let mut inc = 0.0;
        for (x, w) in gx.iter().zip(&gw) {
            let fp = frame.frame_at(frame.s[e] + x * ds);
            let dv = state.sample_at(fp.s).dv;
            inc += w * ds * -0.5 * (dv.dot(&fp.nu2()).powi(2) + dv.dot(&fp.nu3()).powi(2));
        }
        u[e + 1] = u[e] + inc;
    }
    // mean of the piecewise-linear interpolant
    let mean = (0..n).map(|e| 0.5 * (u[e] + u[e + 1]) * ds).sum::<f64>() / frame.length;
    state.u = u.iter().map(|v| v - mean).collect();
}

pub fn minimize_quadratic(
    frame: &FramedCurve,
    cell: &dyn Fn(&FramePoint) -> Result<CellData>,
    regime: ScalingRegime,
    loads: &LoadCase,
    boundary: BoundarySpec,
    opts: SolverOptions,
) -> Result<(RodState, MinimizationReport)> {
    let p = RodProblem::new(frame, cell, regime, loads, boundary, opts)?;
    let (_, st, rep) = p.solve_quadratic()?;
    Ok((st, rep))
}

pub fn minimize_von_karman(
    frame: &FramedCurve,
    cell: &dyn Fn(&FramePoint) -> Result<CellData>,
    loads: &LoadCase,
    boundary: BoundarySpec,
    initial: Option<&RodState>,
    opts: SolverOptions,
) -> Result<(RodState, MinimizationReport)> {
    let p = RodProblem::new(frame, cell, ScalingRegime::new(3.0)?, loads, boundary, opts)?;
    let init = initial.map(|s| p.restrict(&s.to_dofs()));
    let (_, st, rep) = p.solve_von_karman(init.as_deref())?;
    Ok((st, rep))
}

/// Zero-energy states compatible with the boundary conditions, as full nodal vectors.
pub fn kernel_basis(
    frame: &FramedCurve,
    cell: &dyn Fn(&FramePoint) -> Result<CellData>,
    regime: ScalingRegime,
    boundary: BoundarySpec,
) -> Result<Vec<Vec<f64>>> {
    let p = RodProblem::new(frame, cell, regime, &LoadCase::zero(frame), boundary, SolverOptions::default())?;
    Ok(p.kernel.iter().map(|k| p.expand(k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::frame_geometry::{adapted_frame, make_curve, CurvePreset, FrameMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const YOUNG: f64 = 2.5;
    const I: f64 = 1.0 / (4.0 * PI);

    fn iso(_: &FramePoint) -> Result<CellData> {
        CellData::closed_form_isotropic(1.0, 1.0, I, I, 2.0 * I)
    }

    fn line(n: usize, l: f64) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Line, Some(l)).unwrap(), n, FrameMode::RotationMinimizing, None).unwrap()
    }

    fn helix(n: usize) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 1.0 }, Some(3.0)).unwrap(), n, FrameMode::RotationMinimizing, None)
            .unwrap()
    }

    fn circle(n: usize) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Circle { radius: 1.0 }, None).unwrap(), n, FrameMode::RotationMinimizing, None).unwrap()
    }

    /// Dense finite-difference solve of EI v'''' = f, v = v′ = 0 at both ends; returns
    /// −½∫f v, the equilibrium energy.
    fn euler_bernoulli_energy(ei: f64, l: f64, f: impl Fn(f64) -> f64, m: usize) -> f64 {
        let h = l / m as f64;
        // unknowns v_1..v_{m-1}; ghost values from v′ = 0: v_{-1} = v_1, v_{m+1} = v_{m-1}
        let nn = m - 1;
        let mut a = DMatrix::<f64>::zeros(nn, nn);
        let st = [1.0, -4.0, 6.0, -4.0, 1.0];
        for i in 1..m {
            for (o, c) in st.iter().enumerate() {
                let j = i as isize + o as isize - 2;
                let jj = if j == -1 { 1 } else if j == m as isize + 1 { m as isize - 1 } else { j };
                if jj >= 1 && jj <= nn as isize {
                    a[(i - 1, jj as usize - 1)] += ei * c / h.powi(4);
                }
            }
        }
        let rhs = nalgebra::DVector::from_iterator(nn, (1..m).map(|i| f(i as f64 * h)));
        let v = a.lu().solve(&rhs).unwrap();
        -0.5 * (0..nn).map(|i| f((i + 1) as f64 * h) * v[i] * h).sum::<f64>()
    }

    #[test]
    fn clamped_beam_matches_dense_oracle() {
        let l = 2.0;
        let frame = line(64, l);
        let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.0, (PI * p.s / l).sin(), 0.0), |_| 0.0, |_| 0.0);
        let (st, rep) = minimize_quadratic(&frame, &iso, ScalingRegime::new(4.0).unwrap(), &loads, BoundarySpec::clamped_both(), SolverOptions::default())
            .unwrap();
        let oracle = euler_bernoulli_energy(YOUNG * I, l, |s| (PI * s / l).sin(), 800);
        let eq_energy = rep.energy - rep.load_work;
        assert!(((eq_energy - oracle) / oracle).abs() < 5e-3, "{eq_energy} vs {oracle}");
        assert!(st.v.iter().all(|v| v[0].abs() < 1e-10 && v[2].abs() < 1e-10));
        assert!(rep.projected_gradient_norm < 1e-8 * (1.0 + rep.load_work.abs()));
    }

    #[test]
    fn zero_load_free_rod_stays_at_zero() {
        let frame = helix(20);
        let (st, rep) =
            minimize_quadratic(&frame, &iso, ScalingRegime::new(4.0).unwrap(), &LoadCase::zero(&frame), BoundarySpec::Free, SolverOptions::default())
                .unwrap();
        assert_eq!(rep.energy, 0.0);
        assert!(st.to_dofs().iter().all(|&v| v == 0.0));
        assert_eq!(rep.kernel_dimension, 7);
    }

    #[test]
    fn kernel_dimensions_and_energies() {
        let frame = line(12, 1.0);
        let reg = ScalingRegime::new(4.0).unwrap();
        let k = kernel_basis(&frame, &iso, reg, BoundarySpec::Free).unwrap();
        assert_eq!(k.len(), 7);
        for kv in &k {
            let st = RodState::from_dofs(&frame, kv).unwrap();
            assert!(energy_i_alpha(&st, &frame, &iso, reg).unwrap() < 1e-12);
        }
        assert!(kernel_basis(&frame, &iso, reg, BoundarySpec::clamped_both()).unwrap().is_empty());
        let ring = circle(24);
        let kr = kernel_basis(&ring, &iso, reg, BoundarySpec::PeriodicRing).unwrap();
        assert_eq!(kr.len(), 7);
        for kv in &kr {
            let st = RodState::from_dofs(&ring, kv).unwrap();
            assert!(st.periodicity_defect() < 1e-12);
        }
        let ki = kernel_basis(&frame, &iso, ScalingRegime::new(2.5).unwrap(), BoundarySpec::Free).unwrap();
        assert_eq!(ki.len(), 6);
    }

    #[test]
    fn non_equilibrated_ring_load_rejected() {
        let ring = circle(24);
        let loads = LoadCase::from_fn(&ring, |_| Vec3::new(1.0, 0.0, 0.0), |_| 0.0, |_| 0.0);
        let r = minimize_quadratic(&ring, &iso, ScalingRegime::new(4.0).unwrap(), &loads, BoundarySpec::PeriodicRing, SolverOptions::default());
        assert!(matches!(r, Err(Error::NotEquilibrated { .. })));
    }

    #[test]
    fn ring_moment_load_gives_periodic_twist() {
        let ring = circle(48);
        let l = ring.length;
        let loads = LoadCase::from_fn(&ring, |_| Vec3::zeros(), |_| 0.0, |p| (4.0 * PI * p.s / l).cos());
        let (st, rep) =
            minimize_quadratic(&ring, &iso, ScalingRegime::new(4.0).unwrap(), &loads, BoundarySpec::PeriodicRing, SolverOptions::default()).unwrap();
        assert_eq!(st.w[0], st.w[st.n_nodes() - 1]);
        assert!(rep.periodicity_defect == 0.0);
        assert!(rep.energy > 0.0);
    }

    #[test]
    fn quadratic_solutions_are_linear_in_loads_and_optimal() {
        let frame = helix(24);
        let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.2, p.s.sin(), 0.3 * p.s.cos()), |p| 0.1 * p.s, |p| 0.5 - p.s);
        let reg = ScalingRegime::new(4.0).unwrap();
        let bc = BoundarySpec::Clamped { start: Some(ClampSet::ALL), end: None };
        let p1 = RodProblem::new(&frame, &iso, reg, &loads, bc, SolverOptions::default()).unwrap();
        let p2 = RodProblem::new(&frame, &iso, reg, &loads.scaled(2.0), bc, SolverOptions::default()).unwrap();
        let (x1, _, rep1) = p1.solve_quadratic().unwrap();
        let (x2, _, _) = p2.solve_quadratic().unwrap();
        let diff: Vec<f64> = x2.iter().zip(&x1).map(|(a, b)| a - 2.0 * b).collect();
        assert!(norm(&diff) <= 1e-8 * norm(&x2));
        let a = p1.assemble_quadratic();
        let b = p1.load_vector();
        let obj = |x: &[f64]| 0.5 * a.quad_form(x) - dot(&b, x);
        let f0 = obj(&x1);
        assert!((f0 - rep1.objective).abs() < 1e-8 * f0.abs());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d: Vec<f64> = (0..x1.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = 1e-3 * norm(&x1) / norm(&d);
            let xt: Vec<f64> = x1.iter().zip(&d).map(|(x, di)| x + t * di).collect();
            assert!(obj(&xt) >= f0 - 1e-10 * f0.abs());
        }
    }

    #[test]
    fn refinement_does_not_raise_the_minimum() {
        let mut prev = f64::INFINITY;
        for n in [4, 8, 16, 32] {
            let frame = line(n, 1.5);
            let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.0, (3.0 * p.s).sin(), p.s), |p| p.s.cos(), |p| p.s * p.s);
            let opts = SolverOptions { penalty: Some(1e3), ..Default::default() };
            let (_, rep) =
                minimize_quadratic(&frame, &iso, ScalingRegime::new(4.0).unwrap(), &loads, BoundarySpec::clamped_both(), opts).unwrap();
            assert!(rep.objective <= prev + 1e-10 * prev.abs(), "{n}: {} > {prev}", rep.objective);
            prev = rep.objective;
        }
    }

    #[test]
    fn intermediate_regime_reconstructs_constrained_u() {
        let frame = helix(32);
        let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.0, 0.0, p.s.sin()), |_| 0.0, |p| 0.2 * p.s.cos());
        let (st, rep) = minimize_quadratic(
            &frame,
            &iso,
            ScalingRegime::new(2.5).unwrap(),
            &loads,
            BoundarySpec::Clamped { start: Some(ClampSet::ALL), end: None },
            SolverOptions::default(),
        )
        .unwrap();
        let mean: f64 = (0..frame.n_intervals()).map(|e| 0.5 * (st.u[e] + st.u[e + 1]) * frame.ds()).sum();
        let umax = st.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(umax > 0.0 && mean.abs() < 1e-12 * umax);
        let scale = st.v.iter().map(|v| v.norm()).fold(0.0, f64::max).powi(2);
        assert!(rep.constraint_residual < 1e-2 * scale.max(1e-300), "{} vs {scale}", rep.constraint_residual);
    }

    #[test]
    fn von_karman_gradient_and_hessian_match_finite_differences() {
        let frame = helix(10);
        let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.1, p.s, -0.2), |_| 0.3, |_| 0.1);
        let p = RodProblem::new(&frame, &iso, ScalingRegime::new(3.0).unwrap(), &loads, BoundarySpec::Clamped { start: Some(ClampSet::ALL), end: None }, SolverOptions::default())
            .unwrap();
        let b = p.load_vector();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..p.n_reduced).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let g = p.vk_gradient(&x, &b);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let d: Vec<f64> = (0..p.n_reduced).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, c)| a + h * c).collect();
            let xm: Vec<f64> = x.iter().zip(&d).map(|(a, c)| a - h * c).collect();
            let fd = (p.vk_objective(&xp, &b) - p.vk_objective(&xm, &b)) / (2.0 * h);
            let an = dot(&g, &d);
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        assert!(worst <= 1e-6, "{worst}");
        let hm = p.vk_hessian(&x);
        let d: Vec<f64> = (0..p.n_reduced).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, c)| a + h * c).collect();
        let xm: Vec<f64> = x.iter().zip(&d).map(|(a, c)| a - h * c).collect();
        let fd: Vec<f64> = p.vk_gradient(&xp, &b).iter().zip(p.vk_gradient(&xm, &b)).map(|(a, c)| (a - c) / (2.0 * h)).collect();
        let an = hm.apply(&d);
        let err: Vec<f64> = fd.iter().zip(&an).map(|(a, c)| a - c).collect();
        assert!(norm(&err) <= 1e-5 * norm(&an));
    }

    #[test]
    fn von_karman_zero_load_and_small_load_limit() {
        let frame = helix(24);
        let bc = BoundarySpec::clamped_both();
        let (st, rep) = minimize_von_karman(&frame, &iso, &LoadCase::zero(&frame), bc, None, SolverOptions::default()).unwrap();
        assert!(st.to_dofs().iter().all(|&v| v == 0.0));
        assert_eq!(rep.energy, 0.0);
        let loads = LoadCase::from_fn(&frame, |p| Vec3::new(0.0, p.s.sin(), 0.5), |_| 0.2, |p| p.s.cos());
        let (lin, _) = minimize_quadratic(&frame, &iso, ScalingRegime::new(4.0).unwrap(), &loads, bc, SolverOptions::default()).unwrap();
        let lin_v: Vec<f64> = lin.v.iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()).collect();
        let mut gaps = Vec::new();
        for eps in [1e-2, 1e-3] {
            let (vk, rep) = minimize_von_karman(&frame, &iso, &loads.scaled(eps), bc, None, SolverOptions::default()).unwrap();
            assert!(!rep.newton_history.is_empty());
            let vk_v: Vec<f64> = vk.v.iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()).collect();
            let diff: Vec<f64> = vk_v.iter().zip(&lin_v).map(|(a, b)| a - eps * b).collect();
            gaps.push(norm(&diff) / (eps * norm(&lin_v)));
        }
        assert!(gaps[0] < 0.1 && gaps[1] < 0.2 * gaps[0], "{gaps:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn quadratic_solve_is_homogeneous_in_loads(c in -5.0f64..5.0, amp in 0.1f64..2.0) {
            let frame = helix(12);
            let loads = LoadCase::from_fn(&frame, |p| Vec3::new(amp, p.s.cos(), 0.0), |p| p.s.sin(), |_| 0.3);
            let reg = ScalingRegime::new(4.0).unwrap();
            let bc = BoundarySpec::clamped_both();
            let (a, _) = minimize_quadratic(&frame, &iso, reg, &loads, bc, SolverOptions::default()).unwrap();
            let (b, _) = minimize_quadratic(&frame, &iso, reg, &loads.scaled(c), bc, SolverOptions::default()).unwrap();
            let xa = a.to_dofs();
            let diff: Vec<f64> = b.to_dofs().iter().zip(&xa).map(|(y, x)| y - c * x).collect();
            prop_assert!(norm(&diff) <= 1e-8 * (c.abs() * norm(&xa)).max(1e-300));
        }
    }
}
