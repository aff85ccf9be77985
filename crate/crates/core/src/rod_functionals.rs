//! One-dimensional limit states (u, v, w), the strain matrices B and E = B′ + 2 skw(KB),
//! and the limit energies I_α.
//!
//! Frame coordinates are used throughout: with K = R₀ᵀR₀′ one has 2 skw(R₀ᵀR₀′B) = KB − BK.

use serde::{Deserialize, Serialize};

use crate::cell_problems::CellData;
use crate::error::{invalid, Result};
use crate::frame_geometry::{FramePoint, FramedCurve, Mat3, Regime, ScalingRegime, Vec3};
use crate::quadrature::{gauss_legendre, gauss_on};

/// B = [[0,−a,−b],[a,0,−w],[b,w,0]] with a = v′·ν₂, b = v′·ν₃.
pub fn b_matrix(a: f64, b: f64, w: f64) -> Mat3 {
    Mat3::new(0.0, -a, -b, a, 0.0, -w, b, w, 0.0)
}

/// Values and derivatives of a limit state at one arc-length parameter.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RodSample {
    pub v: Vec3,
    pub dv: Vec3,
    pub ddv: Vec3,
    pub w: f64,
    pub dw: f64,
    pub u: f64,
    pub du: f64,
}

/// Anything that can be sampled as a limit state along the frame.
pub trait RodField {
    fn sample(&self, fp: &FramePoint) -> RodSample;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrainSample {
    pub b: Mat3,
    pub e: Mat3,
    /// First argument of Q⁰; absent in the intermediate regime.
    pub t_arg: Option<f64>,
    pub a: f64,
    pub b_perp: f64,
}

/// a = v′·ν₂, b = v′·ν₃ and their derivatives, with ν′ = R₀Ke.
fn transverse(sample: &RodSample, fp: &FramePoint) -> (f64, f64, f64, f64) {
    let dr = fp.dr0();
    let (n2, n3) = (fp.nu2(), fp.nu3());
    let dn2: Vec3 = dr.column(1).into();
    let dn3: Vec3 = dr.column(2).into();
    (
        sample.dv.dot(&n2),
        sample.dv.dot(&n3),
        sample.ddv.dot(&n2) + sample.dv.dot(&dn2),
        sample.ddv.dot(&n3) + sample.dv.dot(&dn3),
    )
}

pub fn strain_from_sample(sample: &RodSample, fp: &FramePoint, regime: Regime) -> StrainSample {
    let (a, b, da, db) = transverse(sample, fp);
    let bm = b_matrix(a, b, sample.w);
    let k = fp.k();
    let e = b_matrix(da, db, sample.dw) + k * bm - bm * k;
    let t_arg = match regime {
        Regime::Linear => Some(sample.du),
        Regime::VonKarman => Some(sample.du + 0.5 * (a * a + b * b)),
        Regime::Intermediate => None,
    };
    StrainSample { b: bm, e, t_arg, a, b_perp: b }
}

pub fn strain_measure(state: &dyn RodField, fp: &FramePoint, regime: Regime) -> StrainSample {
    strain_from_sample(&state.sample(fp), fp, regime)
}

/// Gauss points of the frame grid: (s, weight), `per_element` points per interval.
pub fn rod_quadrature(frame: &FramedCurve, per_element: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(frame.n_intervals() * per_element);
    for i in 0..frame.n_intervals() {
        let (x, w) = gauss_on(frame.s[i], frame.s[i + 1], per_element);
        out.extend(x.into_iter().zip(w));
    }
    out
}

/// Frame points at the rod quadrature nodes, with weights.
pub fn quadrature_frames(frame: &FramedCurve, per_element: usize) -> Vec<(FramePoint, f64)> {
    rod_quadrature(frame, per_element).into_iter().map(|(s, w)| (frame.frame_at(s), w)).collect()
}

/// I_α with a cell-data provider; 2-point Gauss per element.
pub fn energy_i_alpha(
    state: &dyn RodField,
    frame: &FramedCurve,
    cell: &dyn Fn(&FramePoint) -> Result<CellData>,
    regime: ScalingRegime,
) -> Result<f64> {
    energy_i_alpha_on(state, &quadrature_frames(frame, 2), cell, regime)
}

/// I_α on a precomputed set of quadrature frames.
pub fn energy_i_alpha_on(
    state: &dyn RodField,
    points: &[(FramePoint, f64)],
    cell: &dyn Fn(&FramePoint) -> Result<CellData>,
    regime: ScalingRegime,
) -> Result<f64> {
    let mut total = 0.0;
    for (fp, wq) in points {
        let st = strain_measure(state, fp, regime.regime);
        let cd = cell(fp)?;
        let q = match st.t_arg {
            Some(t) => cd.q0(t, &st.e),
            None => cd.q(&st.e).0,
        };
        total += wq * q;
    }
    Ok(0.5 * total)
}

/// Which sign the (v·ν₂)(k₂k₃ + ϱ′) term of q₂ carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QForm {
    /// Plus sign, as commonly printed.
    #[default]
    AsPrinted,
    /// Minus sign, the value consistent with the strain matrix E.
    Corrected,
}

/// (q₁, q₂, q₃) at one point, from the components p = R₀ᵀv and their derivatives.
pub fn q_forms(sample: &RodSample, fp: &FramePoint, form: QForm) -> (f64, f64, f64) {
    let r = fp.r0;
    let dr = fp.dr0();
    let ddr = fp.ddr0();
    let p: Vec3 = r.transpose() * sample.v;
    let dp: Vec3 = r.transpose() * sample.dv + dr.transpose() * sample.v;
    let ddp: Vec3 = r.transpose() * sample.ddv + dr.transpose() * sample.dv * 2.0 + ddr.transpose() * sample.v;
    let (k2, k3, rho) = (fp.k2, fp.k3, fp.rho);
    let (dk2, dk3, drho) = (fp.dk2, fp.dk3, fp.drho);
    let q1 = sample.dw + k2 * dp[2] - k3 * dp[1] + rho * (k2 * p[1] + k3 * p[2]);
    let sign = match form {
        QForm::AsPrinted => 1.0,
        QForm::Corrected => -1.0,
    };
    let q2 = k2 * sample.w - ddp[2] - 2.0 * rho * dp[1] - p[0] * (rho * k2 + dk3)
        + sign * p[1] * (k2 * k3 + drho)
        + p[2] * (rho * rho - k3 * k3);
    let q3 = k3 * sample.w + ddp[1] - 2.0 * rho * dp[2] - p[0] * (rho * k3 - dk2) - p[1] * (rho * rho - k2 * k2)
        + p[2] * (k2 * k3 - drho);
    (q1, q2, q3)
}

/// ½·μ(3λ+2μ)/(λ+μ)∫((u′)² + I₂q₂² + I₃q₃²) + ½μT∫q₁², 2-point Gauss per element.
#[allow(clippy::too_many_arguments)]
pub fn energy_isotropic_q(
    state: &dyn RodField,
    frame: &FramedCurve,
    i2: f64,
    i3: f64,
    torsion: f64,
    lambda: f64,
    mu: f64,
    form: QForm,
) -> Result<f64> {
    energy_isotropic_q_on(state, &quadrature_frames(frame, 2), i2, i3, torsion, lambda, mu, form)
}

#[allow(clippy::too_many_arguments)]
pub fn energy_isotropic_q_on(
    state: &dyn RodField,
    points: &[(FramePoint, f64)],
    i2: f64,
    i3: f64,
    torsion: f64,
    lambda: f64,
    mu: f64,
    form: QForm,
) -> Result<f64> {
    if lambda + mu == 0.0 {
        return invalid("lambda + mu must be nonzero");
    }
    let young = mu * (3.0 * lambda + 2.0 * mu) / (lambda + mu);
    let mut total = 0.0;
    for (fp, wq) in points {
        let smp = state.sample(fp);
        let (q1, q2, q3) = q_forms(&smp, fp, form);
        total += wq * (young * (smp.du * smp.du + i2 * q2 * q2 + i3 * q3 * q3) + mu * torsion * q1 * q1);
    }
    Ok(0.5 * total)
}

/// ‖u′ + ½((v′·ν₂)² + (v′·ν₃)²)‖ in L²(0,L), 4-point Gauss per element.
pub fn constraint_residual(state: &dyn RodField, frame: &FramedCurve) -> f64 {
    let mut total = 0.0;
    for (fp, wq) in quadrature_frames(frame, 4) {
        let smp = state.sample(&fp);
        let (a, b, _, _) = transverse(&smp, &fp);
        total += wq * (smp.du + 0.5 * (a * a + b * b)).powi(2);
    }
    total.sqrt()
}

/// ‖v′·τ‖ in L²(0,L), 4-point Gauss per element.
pub fn inextensibility_residual(state: &dyn RodField, frame: &FramedCurve) -> f64 {
    quadrature_frames(frame, 4)
        .iter()
        .map(|(fp, wq)| wq * state.sample(fp).dv.dot(&fp.tau()).powi(2))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Discrete states

/// Degrees of freedom per node: v (3), v′·ν₂, v′·ν₃, w, u.
pub const NODE_DOFS: usize = 7;

/// Hermite shape functions on [0,1] and their first two derivatives.
pub fn hermite(x: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let x2 = x * x;
    let x3 = x2 * x;
    (
        [1.0 - 3.0 * x2 + 2.0 * x3, x - 2.0 * x2 + x3, 3.0 * x2 - 2.0 * x3, -x2 + x3],
        [-6.0 * x + 6.0 * x2, 1.0 - 4.0 * x + 3.0 * x2, 6.0 * x - 6.0 * x2, -2.0 * x + 3.0 * x2],
        [-6.0 + 12.0 * x, -4.0 + 6.0 * x, 6.0 - 12.0 * x, -2.0 + 6.0 * x],
    )
}

/// Discrete limit state: cubic Hermite v with nodal derivatives v′ = d₂ν₂ + d₃ν₃ ⊥ τ,
/// piecewise-linear w and u on the frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RodState {
    pub s: Vec<f64>,
    pub v: Vec<Vec3>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    nu2: Vec<Vec3>,
    nu3: Vec<Vec3>,
    pub ring: bool,
}

impl RodState {
    pub fn zeros(frame: &FramedCurve) -> Self {
        let n = frame.s.len();
        RodState {
            s: frame.s.clone(),
            v: vec![Vec3::zeros(); n],
            d2: vec![0.0; n],
            d3: vec![0.0; n],
            w: vec![0.0; n],
            u: vec![0.0; n],
            nu2: frame.r0.iter().map(|r| r.column(1).into()).collect(),
            nu3: frame.r0.iter().map(|r| r.column(2).into()).collect(),
            ring: frame.closed,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.s.len()
    }

    pub fn n_dofs(&self) -> usize {
        NODE_DOFS * self.n_nodes()
    }

    pub fn from_dofs(frame: &FramedCurve, x: &[f64]) -> Result<Self> {
        let mut st = Self::zeros(frame);
        if x.len() != st.n_dofs() {
            return invalid(format!("state vector has {} entries, expected {}", x.len(), st.n_dofs()));
        }
        for i in 0..st.n_nodes() {
            let d = &x[NODE_DOFS * i..NODE_DOFS * (i + 1)];
            st.v[i] = Vec3::new(d[0], d[1], d[2]);
            st.d2[i] = d[3];
            st.d3[i] = d[4];
            st.w[i] = d[5];
            st.u[i] = d[6];
        }
        Ok(st)
    }

    pub fn to_dofs(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_dofs());
        for i in 0..self.n_nodes() {
            x.extend(self.v[i].iter());
            x.extend([self.d2[i], self.d3[i], self.w[i], self.u[i]]);
        }
        x
    }

    /// Nodal interpolation of a smooth field; v′ is projected onto τ^⊥ at the nodes.
    pub fn interpolate(frame: &FramedCurve, field: &dyn RodField) -> Self {
        let mut st = Self::zeros(frame);
        for i in 0..st.n_nodes() {
            let fp = frame.node(i);
            let smp = field.sample(&fp);
            st.v[i] = smp.v;
            st.d2[i] = smp.dv.dot(&fp.nu2());
            st.d3[i] = smp.dv.dot(&fp.nu3());
            st.w[i] = smp.w;
            st.u[i] = smp.u;
        }
        st
    }

    pub fn dv_node(&self, i: usize) -> Vec3 {
        self.nu2[i] * self.d2[i] + self.nu3[i] * self.d3[i]
    }

    fn locate(&self, s: f64) -> (usize, f64, f64) {
        let n = self.n_nodes() - 1;
        let l = self.s[n];
        let ds = l / n as f64;
        let i = ((s / ds).floor().max(0.0) as usize).min(n - 1);
        (i, ((s - self.s[i]) / ds).clamp(0.0, 1.0), ds)
    }

    /// Sample at arc length s.
    pub fn sample_at(&self, s: f64) -> RodSample {
        let (i, x, ds) = self.locate(s);
        let (h, dh, ddh) = hermite(x);
        let vals = [self.v[i], self.dv_node(i) * ds, self.v[i + 1], self.dv_node(i + 1) * ds];
        let comb = |c: &[f64; 4]| vals.iter().zip(c).fold(Vec3::zeros(), |acc, (v, ci)| acc + v * *ci);
        RodSample {
            v: comb(&h),
            dv: comb(&dh) / ds,
            ddv: comb(&ddh) / (ds * ds),
            w: self.w[i] * (1.0 - x) + self.w[i + 1] * x,
            dw: (self.w[i + 1] - self.w[i]) / ds,
            u: self.u[i] * (1.0 - x) + self.u[i + 1] * x,
            du: (self.u[i + 1] - self.u[i]) / ds,
        }
    }

    /// Ring compatibility: v, v′, w equal at both ends.
    pub fn periodicity_defect(&self) -> f64 {
        let n = self.n_nodes() - 1;
        let dv = (self.v[n] - self.v[0]).amax();
        let dd = (self.dv_node(n) - self.dv_node(0)).amax();
        dv.max(dd).max((self.w[n] - self.w[0]).abs())
    }

    /// Rows (s, u, w, v, v′) for CSV export.
    pub fn table(&self) -> (Vec<&'static str>, Vec<Vec<f64>>) {
        let header = vec!["s", "u", "w", "v_x", "v_y", "v_z", "dv_x", "dv_y", "dv_z"];
        let rows = (0..self.n_nodes())
            .map(|i| {
                let mut r = vec![self.s[i], self.u[i], self.w[i]];
                r.extend(self.v[i].iter());
                r.extend(self.dv_node(i).iter());
                r
            })
            .collect();
        (header, rows)
    }
}

impl RodField for RodState {
    fn sample(&self, fp: &FramePoint) -> RodSample {
        self.sample_at(fp.s)
    }
}

// ---------------------------------------------------------------------------
// Analytic test states

/// f(s) = c + slope·s + Σ_k (A_k cos(2πks/L) + B_k sin(2πks/L)).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub slope: f64,
    /// (k, A_k, B_k)
    #[serde(default)]
    pub modes: Vec<(u32, f64, f64)>,
}

impl FourierSeries {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.slope == 0.0 && self.modes.iter().all(|m| m.1 == 0.0 && m.2 == 0.0)
    }

    /// (f, f′, f″)
    pub fn eval(&self, s: f64, length: f64) -> (f64, f64, f64) {
        let mut f = self.constant + self.slope * s;
        let mut d1 = self.slope;
        let mut d2 = 0.0;
        for &(k, a, b) in &self.modes {
            let om = 2.0 * std::f64::consts::PI * k as f64 / length;
            let (sn, cs) = (om * s).sin_cos();
            f += a * cs + b * sn;
            d1 += om * (-a * sn + b * cs);
            d2 -= om * om * (a * cs + b * sn);
        }
        (f, d1, d2)
    }

    /// ∫₀ˢ f(σ) dσ in closed form.
    pub fn primitive(&self, s: f64, length: f64) -> f64 {
        let mut f = self.constant * s + 0.5 * self.slope * s * s;
        for &(k, a, b) in &self.modes {
            if k == 0 {
                f += a * s;
                continue;
            }
            let om = 2.0 * std::f64::consts::PI * k as f64 / length;
            let (sn, cs) = (om * s).sin_cos();
            f += (a * sn + b * (1.0 - cs)) / om;
        }
        f
    }

    pub fn scaled(&self, c: f64) -> Self {
        FourierSeries {
            constant: c * self.constant,
            slope: c * self.slope,
            modes: self.modes.iter().map(|&(k, a, b)| (k, c * a, c * b)).collect(),
        }
    }
}

/// Specification of a smooth test state: a = v′·ν₂, b = v′·ν₃, w, u.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSpec {
    #[serde(default)]
    pub a: FourierSeries,
    #[serde(default)]
    pub b: FourierSeries,
    #[serde(default)]
    pub w: FourierSeries,
    #[serde(default)]
    pub u: FourierSeries,
}

/// Smooth state with v(s) = ∫₀ˢ R₀(0, a, b)ᵀ dσ, so that v′·τ = 0 exactly.
#[derive(Debug, Clone)]
pub struct AnalyticState {
    pub spec: AnalyticSpec,
    pub length: f64,
    v_nodes: Vec<Vec3>,
    ds: f64,
    frame: FramedCurve,
}

const V_GAUSS: usize = 8;

impl AnalyticState {
    pub fn new(frame: &FramedCurve, spec: AnalyticSpec) -> Self {
        let n = frame.n_intervals();
        let mut st = AnalyticState {
            spec,
            length: frame.length,
            v_nodes: Vec::with_capacity(n + 1),
            ds: frame.ds(),
            frame: frame.clone(),
        };
        let mut v = Vec3::zeros();
        st.v_nodes.push(v);
        for i in 0..n {
            v += st.integral(frame.s[i], frame.s[i + 1]);
            st.v_nodes.push(v);
        }
        st
    }

    pub fn zero(frame: &FramedCurve) -> Self {
        Self::new(frame, AnalyticSpec::default())
    }

    fn dv_at(&self, fp: &FramePoint) -> Vec3 {
        let (a, _, _) = self.spec.a.eval(fp.s, self.length);
        let (b, _, _) = self.spec.b.eval(fp.s, self.length);
        fp.nu2() * a + fp.nu3() * b
    }

    fn integral(&self, s0: f64, s1: f64) -> Vec3 {
        if s1 == s0 {
            return Vec3::zeros();
        }
        let (x, w) = gauss_on(s0, s1, V_GAUSS);
        x.iter().zip(&w).fold(Vec3::zeros(), |acc, (s, wi)| acc + self.dv_at(&self.frame.frame_at(*s)) * *wi)
    }

    pub fn v_at(&self, s: f64) -> Vec3 {
        let n = self.v_nodes.len() - 1;
        let i = ((s / self.ds).round().max(0.0) as usize).min(n);
        self.v_nodes[i] + self.integral(self.frame.s[i], s)
    }

    pub fn frame(&self) -> &FramedCurve {
        &self.frame
    }

    /// v(L) − v(0); zero for states compatible with a ring.
    pub fn closure_gap(&self) -> Vec3 {
        self.v_nodes[self.v_nodes.len() - 1] - self.v_nodes[0]
    }

    /// (a, b, w, u) with first and second derivatives.
    pub fn coefficients(&self, s: f64) -> [(f64, f64, f64); 4] {
        let l = self.length;
        [self.spec.a.eval(s, l), self.spec.b.eval(s, l), self.spec.w.eval(s, l), self.spec.u.eval(s, l)]
    }

    pub fn sample_with_v(&self, fp: &FramePoint, v: Vec3) -> RodSample {
        let [(a, da, _), (b, db, _), (w, dw, _), (u, du, _)] = self.coefficients(fp.s);
        let dr = fp.dr0();
        let dv = fp.nu2() * a + fp.nu3() * b;
        let ddv = fp.nu2() * da + fp.nu3() * db + dr.column(1) * a + dr.column(2) * b;
        RodSample { v, dv, ddv, w, dw, u, du }
    }
}

impl RodField for AnalyticState {
    fn sample(&self, fp: &FramePoint) -> RodSample {
        self.sample_with_v(fp, self.v_at(fp.s))
    }
}

/// Gauss–Legendre abscissae on [0,1] for element-local evaluation.
pub fn unit_gauss(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    (x.iter().map(|t| 0.5 * (t + 1.0)).collect(), w.iter().map(|wi| 0.5 * wi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_geometry::{adapted_frame, make_curve, skew, CurvePreset, FrameMode};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn line(n: usize) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Line, Some(2.0)).unwrap(), n, FrameMode::RotationMinimizing, None).unwrap()
    }

    fn circle(n: usize) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Circle { radius: 1.0 }, None).unwrap(), n, FrameMode::RotationMinimizing, None)
            .unwrap()
    }

    fn helix(n: usize, mode: FrameMode) -> FramedCurve {
        adapted_frame(&make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 1.0 }, Some(4.0)).unwrap(), n, mode, None).unwrap()
    }

    fn test_spec() -> AnalyticSpec {
        AnalyticSpec {
            a: FourierSeries { constant: 0.1, slope: 0.0, modes: vec![(1, 0.3, -0.2), (2, 0.0, 0.1)] },
            b: FourierSeries { constant: -0.2, slope: 0.0, modes: vec![(1, -0.1, 0.25)] },
            w: FourierSeries { constant: 0.05, slope: 0.0, modes: vec![(1, 0.2, 0.1), (3, 0.05, 0.0)] },
            u: FourierSeries { constant: 0.0, slope: 0.0, modes: vec![(1, 0.1, 0.3)] },
        }
    }

    fn iso_cell(fp: &FramePoint) -> Result<CellData> {
        let _ = fp;
        CellData::closed_form_isotropic(1.0, 1.0, 0.08, 0.09, 0.13)
    }

    #[test]
    fn b_matrix_layout() {
        assert_eq!(b_matrix(0.0, 0.0, 0.0), Mat3::zeros());
        let b = b_matrix(0.0, 0.0, 1.0);
        assert_eq!(b[(2, 1)], 1.0);
        assert_eq!(b[(1, 2)], -1.0);
        assert_eq!(b.abs().sum(), 2.0);
        let b = b_matrix(1.0, 2.0, 3.0);
        assert_eq!(b.column(0).into_owned(), Vec3::new(0.0, 1.0, 2.0));
        assert_eq!(b + b.transpose(), Mat3::zeros());
    }

    #[test]
    fn straight_rod_strain_is_b_prime() {
        let f = line(20);
        let spec = test_spec();
        let st = AnalyticState::new(&f, spec.clone());
        let fp = f.frame_at(0.77);
        let ss = strain_measure(&st, &fp, Regime::Linear);
        let [(a, da, _), (b, db, _), (w, dw, _), (_, du, _)] = st.coefficients(0.77);
        assert!((ss.b - b_matrix(a, b, w)).abs().max() < 1e-14);
        assert!((ss.e - b_matrix(da, db, dw)).abs().max() < 1e-14);
        assert_eq!(ss.t_arg, Some(du));
        assert!((ss.e + ss.e.transpose()).abs().max() == 0.0);
        let c = AnalyticSpec {
            a: FourierSeries { constant: 0.3, ..Default::default() },
            b: FourierSeries { constant: -0.1, ..Default::default() },
            w: FourierSeries { constant: 0.7, ..Default::default() },
            u: FourierSeries::zero(),
        };
        let st = AnalyticState::new(&f, c);
        assert!(strain_measure(&st, &fp, Regime::Linear).e.abs().max() < 1e-15);
    }

    #[test]
    fn circle_strain_matches_hand_product() {
        let f = circle(64);
        let spec = AnalyticSpec { a: FourierSeries { constant: 0.4, ..Default::default() }, ..Default::default() };
        let st = AnalyticState::new(&f, spec);
        let fp = f.frame_at(1.1);
        let e = strain_measure(&st, &fp, Regime::Linear).e;
        // K = [[0,−1,0],[1,0,0],[0,0,0]], B = a(e₂⊗e₁ − e₁⊗e₂): KB − BK = 0 for this pair
        let k = fp.k();
        assert!((k - Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).abs().max() < 1e-10);
        assert!(e.abs().max() < 1e-10);
        let spec = AnalyticSpec { b: FourierSeries { constant: 0.4, ..Default::default() }, ..Default::default() };
        let e = strain_measure(&AnalyticState::new(&f, spec), &fp, Regime::Linear).e;
        // B = 0.4(e₃⊗e₁ − e₁⊗e₃): KB − BK has E₂₃ = −0.4·k₂
        assert!((e[(1, 2)] + 0.4).abs() < 1e-10 && (e[(2, 1)] - 0.4).abs() < 1e-10);
        assert!(e[(0, 1)].abs() < 1e-10 && e[(0, 2)].abs() < 1e-10);
    }

    #[test]
    fn zero_state_and_rigid_motion_have_zero_energy() {
        let f = line(16);
        let reg = ScalingRegime::new(4.0).unwrap();
        assert_eq!(energy_i_alpha(&AnalyticState::zero(&f), &f, &iso_cell, reg).unwrap(), 0.0);
        // v = A₀γ, v′ = A₀τ, w = (A₀ν₂)·ν₃ on a straight rod
        let a0 = skew(&Vec3::new(0.3, -0.2, 0.5));
        let mut st = RodState::zeros(&f);
        for i in 0..st.n_nodes() {
            let fp = f.node(i);
            st.v[i] = a0 * fp.gamma + Vec3::new(1.0, 2.0, 3.0);
            let dv = a0 * fp.tau();
            st.d2[i] = dv.dot(&fp.nu2());
            st.d3[i] = dv.dot(&fp.nu3());
            st.w[i] = (a0 * fp.nu2()).dot(&fp.nu3());
        }
        let e = energy_i_alpha(&st, &f, &iso_cell, reg).unwrap();
        assert!(e < 1e-24, "{e}");
    }

    #[test]
    fn q_path_reduces_to_classical_rod_on_line() {
        let f = line(40);
        let st = AnalyticState::new(&f, test_spec());
        let fp = f.frame_at(0.9);
        let smp = st.sample(&fp);
        let (q1, q2, q3) = q_forms(&smp, &fp, QForm::AsPrinted);
        assert!((q1 - smp.dw).abs() < 1e-14);
        assert!((q2 + smp.ddv[2]).abs() < 1e-14);
        assert!((q3 - smp.ddv[1]).abs() < 1e-14);
    }

    #[test]
    fn q_path_and_strain_path_agree_on_frenet_helix() {
        let f = helix(80, FrameMode::Frenet);
        let st = AnalyticState::new(&f, test_spec());
        let (lam, mu, i2, i3, t) = (1.0, 1.0, 0.08, 0.09, 0.13);
        let cell = |_: &FramePoint| CellData::closed_form_isotropic(lam, mu, i2, i3, t);
        let reg = ScalingRegime::new(4.0).unwrap();
        let e1 = energy_i_alpha(&st, &f, &cell, reg).unwrap();
        let e2 = energy_isotropic_q(&st, &f, i2, i3, t, lam, mu, QForm::AsPrinted).unwrap();
        assert!(((e1 - e2) / e1).abs() < 1e-10, "{e1} {e2}");
    }

    #[test]
    fn printed_q2_sign_differs_on_rotation_minimizing_helix() {
        let f = helix(80, FrameMode::RotationMinimizing);
        let st = AnalyticState::new(&f, test_spec());
        let (lam, mu, i2, i3, t) = (1.0, 1.0, 0.08, 0.09, 0.13);
        let cell = |_: &FramePoint| CellData::closed_form_isotropic(lam, mu, i2, i3, t);
        let reg = ScalingRegime::new(4.0).unwrap();
        let e1 = energy_i_alpha(&st, &f, &cell, reg).unwrap();
        let fixed = energy_isotropic_q(&st, &f, i2, i3, t, lam, mu, QForm::Corrected).unwrap();
        let printed = energy_isotropic_q(&st, &f, i2, i3, t, lam, mu, QForm::AsPrinted).unwrap();
        assert!(((e1 - fixed) / e1).abs() < 1e-10, "{e1} {fixed}");
        assert!(((e1 - printed) / e1).abs() > 1e-4);
    }

    #[test]
    fn constraint_residual_examples() {
        let f = adapted_frame(&make_curve(&CurvePreset::Line, Some(2.0 * PI)).unwrap(), 200, FrameMode::RotationMinimizing, None)
            .unwrap();
        let zero = AnalyticState::zero(&f);
        assert_eq!(constraint_residual(&zero, &f), 0.0);
        // a = sin s on L = 2π: ‖½sin²‖ = ½√(3L/8)
        let a = FourierSeries { modes: vec![(1, 0.0, 1.0)], ..Default::default() };
        let st = AnalyticState::new(&f, AnalyticSpec { a: a.clone(), ..Default::default() });
        let r = constraint_residual(&st, &f);
        assert!((r - 0.5 * (3.0 * 2.0 * PI / 8.0).sqrt()).abs() < 1e-10, "{r}");
        // u′ = −½sin² = −¼ + ¼cos 2s
        let u = FourierSeries { constant: 0.0, slope: -0.25, modes: vec![(2, 0.0, 0.125)] };
        let st = AnalyticState::new(&f, AnalyticSpec { a, u, ..Default::default() });
        assert!(constraint_residual(&st, &f) < 1e-12);
    }

    #[test]
    fn hermite_state_reproduces_cubic() {
        let f = line(5);
        let mut st = RodState::zeros(&f);
        let cubic = |s: f64| Vec3::new(0.0, s * s * s - s, 0.5 * s * s);
        let dcubic = |s: f64| Vec3::new(0.0, 3.0 * s * s - 1.0, s);
        for i in 0..st.n_nodes() {
            st.v[i] = cubic(f.s[i]);
            st.d2[i] = dcubic(f.s[i])[1];
            st.d3[i] = dcubic(f.s[i])[2];
        }
        for s in [0.0, 0.33, 1.01, 1.99] {
            let smp = st.sample_at(s);
            assert!((smp.v - cubic(s)).norm() < 1e-13);
            assert!((smp.dv - dcubic(s)).norm() < 1e-12);
            assert!((smp.ddv - Vec3::new(0.0, 6.0 * s, 1.0)).norm() < 1e-11);
        }
        let x = st.to_dofs();
        assert_eq!(RodState::from_dofs(&f, &x).unwrap(), st);
    }

    #[test]
    fn von_karman_t_argument_scales() {
        let f = helix(40, FrameMode::RotationMinimizing);
        let spec = test_spec();
        let fp = f.frame_at(1.7);
        for lam in [0.5, 2.0, -3.0] {
            let scaled = AnalyticSpec { a: spec.a.scaled(lam), b: spec.b.scaled(lam), w: spec.w.scaled(lam), u: spec.u.scaled(lam * lam) };
            let t1 = strain_measure(&AnalyticState::new(&f, spec.clone()), &fp, Regime::VonKarman).t_arg.unwrap();
            let t2 = strain_measure(&AnalyticState::new(&f, scaled), &fp, Regime::VonKarman).t_arg.unwrap();
            assert!((t2 - lam * lam * t1).abs() < 1e-12 * (1.0 + t2.abs()));
        }
    }

    #[test]
    fn analytic_state_is_inextensible() {
        let f = helix(40, FrameMode::RotationMinimizing);
        let st = AnalyticState::new(&f, test_spec());
        assert!(inextensibility_residual(&st, &f) < 1e-12);
        let fp = f.frame_at(2.3);
        let h = 1e-4;
        let dv_fd = (st.v_at(2.3 + h) - st.v_at(2.3 - h)) / (2.0 * h);
        assert!((dv_fd - st.sample(&fp).dv).norm() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn quadratic_regime_energy_is_two_homogeneous(lam in -4.0f64..4.0, seed in 0u64..1000) {
            let f = helix(24, FrameMode::RotationMinimizing);
            let mut st = RodState::zeros(&f);
            let mut x: Vec<f64> = (0..st.n_dofs()).map(|i| (((i as u64 + 1) * (seed + 7)) % 97) as f64 / 97.0 - 0.5).collect();
            st = RodState::from_dofs(&f, &x).unwrap();
            let reg = ScalingRegime::new(4.5).unwrap();
            let e1 = energy_i_alpha(&st, &f, &iso_cell, reg).unwrap();
            x.iter_mut().for_each(|v| *v *= lam);
            let e2 = energy_i_alpha(&RodState::from_dofs(&f, &x).unwrap(), &f, &iso_cell, reg).unwrap();
            prop_assert!(e1 >= 0.0);
            prop_assert!((e2 - lam * lam * e1).abs() <= 1e-10 * (lam * lam * e1) + 1e-300);
            let ri = ScalingRegime::new(2.5).unwrap();
            let i1 = energy_i_alpha(&st, &f, &iso_cell, ri).unwrap();
            let i2 = energy_i_alpha(&RodState::from_dofs(&f, &x).unwrap(), &f, &iso_cell, ri).unwrap();
            prop_assert!((i2 - lam * lam * i1).abs() <= 1e-10 * (lam * lam * i1) + 1e-300);
        }
    }
}
