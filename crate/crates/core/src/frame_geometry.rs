//! Arc-length curves, adapted frames R₀ = (τ | ν₂ | ν₃) and the thin-tube map Ψ^(h).
//!
//! Frame coefficients follow τ′ = k₂ν₂ + k₃ν₃, ν₂′ = −k₂τ + ϱν₃, ν₃′ = −k₃τ − ϱν₂,
//! i.e. R₀′ = R₀K with K = [[0,−k₂,−k₃],[k₂,0,−ϱ],[k₃,ϱ,0]].

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::gauss_on;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Skew matrix with axial vector x, so that skew(x)·y = x × y.
pub fn skew(x: &Vec3) -> Mat3 {
    Mat3::new(0.0, -x[2], x[1], x[2], 0.0, -x[0], -x[1], x[0], 0.0)
}

/// Axial vector of the skew part of m.
pub fn axial(m: &Mat3) -> Vec3 {
    Vec3::new(0.5 * (m[(2, 1)] - m[(1, 2)]), 0.5 * (m[(0, 2)] - m[(2, 0)]), 0.5 * (m[(1, 0)] - m[(0, 1)]))
}

pub fn sym(m: &Mat3) -> Mat3 {
    0.5 * (m + m.transpose())
}

pub fn skw(m: &Mat3) -> Mat3 {
    0.5 * (m - m.transpose())
}

/// Coefficient matrix K of the frame equations.
pub fn k_matrix(k2: f64, k3: f64, rho: f64) -> Mat3 {
    Mat3::new(0.0, -k2, -k3, k2, 0.0, -rho, k3, rho, 0.0)
}

/// (sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³) evaluated stably.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta), (theta - theta.sin()) / (theta * theta * theta))
    }
}

/// e^A − Id for the skew part of A, without cancellation for small A.
pub fn rotation_exp_minus_identity(a: &Mat3) -> Mat3 {
    let s = skw(a);
    let theta = axial(&s).norm();
    let (c1, c2, _) = rodrigues_coefficients(theta);
    s * c1 + s * s * c2
}

/// Closed-form exponential of the skew part of A.
pub fn rotation_exp(a: &Mat3) -> Mat3 {
    Mat3::identity() + rotation_exp_minus_identity(a)
}

/// Right Jacobian of the exponential: e^{−X}·d/ds e^{X} = skew(J_r(x)·x′) with x = axial(X).
pub fn exp_right_jacobian(x: &Vec3) -> Mat3 {
    let theta = x.norm();
    let (_, c2, c3) = rodrigues_coefficients(theta);
    let sx = skew(x);
    Mat3::identity() - sx * c2 + sx * sx * c3
}

/// Nearest rotation (polar factor) of a nearly orthogonal matrix.
pub fn polar_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Minimal rotation taking unit vector c onto unit vector t, applied from the left.
fn align_first_column(r: &Mat3, t: &Vec3) -> Mat3 {
    let c: Vec3 = r.column(0).into();
    let v = c.cross(t);
    let cos = c.dot(t);
    if cos <= -0.5 {
        return *r;
    }
    let sv = skew(&v);
    let q = Mat3::identity() + sv + sv * sv / (1.0 + cos);
    q * r
}

pub fn orthogonality_defect(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

// ---------------------------------------------------------------------------
// Curves

/// One Fourier mode of a closed curve γ(θ) = Σ cos(kθ)·c_k + sin(kθ)·s_k, θ ∈ [0, 2π).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub k: u32,
    pub cos: [f64; 3],
    pub sin: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurvePreset {
    Line,
    Circle { radius: f64 },
    Helix { radius: f64, pitch: f64 },
    Fourier { modes: Vec<FourierMode> },
}

/// Position and tangent derivatives at an arc-length parameter.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub gamma: Vec3,
    pub tau: Vec3,
    pub dtau: Vec3,
    pub ddtau: Vec3,
}

#[derive(Debug, Clone)]
struct FourierCurve {
    modes: Vec<FourierMode>,
    theta_nodes: Vec<f64>,
    arc_nodes: Vec<f64>,
    total: f64,
}

impl FourierCurve {
    const SEGMENTS: usize = 1024;

    fn new(modes: Vec<FourierMode>) -> Result<Self> {
        if modes.is_empty() || modes.iter().all(|m| m.k == 0) {
            return invalid("fourier curve needs at least one mode with k > 0");
        }
        let mut c = FourierCurve { modes, theta_nodes: vec![], arc_nodes: vec![], total: 0.0 };
        let n = Self::SEGMENTS;
        let mut acc = 0.0;
        c.theta_nodes.push(0.0);
        c.arc_nodes.push(0.0);
        for j in 0..n {
            let a = 2.0 * PI * j as f64 / n as f64;
            let b = 2.0 * PI * (j + 1) as f64 / n as f64;
            acc += c.arc(a, b);
            c.theta_nodes.push(b);
            c.arc_nodes.push(acc);
        }
        c.total = acc;
        for j in 0..=n {
            let d = c.derivs(c.theta_nodes[j]);
            if d[1].norm() < 1e-10 {
                return invalid(format!("fourier curve is singular near theta = {}", c.theta_nodes[j]));
            }
        }
        Ok(c)
    }

    /// γ and its first three θ-derivatives.
    fn derivs(&self, th: f64) -> [Vec3; 4] {
        let mut out = [Vec3::zeros(); 4];
        for m in &self.modes {
            let k = m.k as f64;
            let (s, c) = (k * th).sin_cos();
            let cv = Vec3::from(m.cos);
            let sv = Vec3::from(m.sin);
            out[0] += cv * c + sv * s;
            out[1] += (-cv * s + sv * c) * k;
            out[2] += (-cv * c - sv * s) * (k * k);
            out[3] += (cv * s - sv * c) * (k * k * k);
        }
        out
    }

    fn arc(&self, a: f64, b: f64) -> f64 {
        let (x, w) = gauss_on(a, b, 10);
        x.iter().zip(&w).map(|(t, wi)| wi * self.derivs(*t)[1].norm()).sum()
    }

    fn theta_of(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total);
        let j = match self.arc_nodes.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(j) => return self.theta_nodes[j],
            Err(j) => j.saturating_sub(1).min(Self::SEGMENTS - 1),
        };
        let (t0, s0) = (self.theta_nodes[j], self.arc_nodes[j]);
        let mut th = t0 + (s - s0) / self.derivs(t0)[1].norm();
        for _ in 0..30 {
            let f = s0 + self.arc(t0, th) - s;
            let d = self.derivs(th)[1].norm();
            let step = f / d;
            th -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        th
    }

    fn point(&self, s: f64) -> CurvePoint {
        let th = self.theta_of(s);
        let [g0, g1, g2, g3] = self.derivs(th);
        let sigma = g1.norm();
        let t = g1 / sigma;
        let dsigma = g1.dot(&g2) / sigma;
        let n2 = g2 - t * g2.dot(&t);
        let tau_th = n2 / sigma;
        let tau_thth = (g3 - t * (g3.dot(&t) + g2.dot(&tau_th)) - tau_th * g2.dot(&t)) / sigma - n2 * dsigma / (sigma * sigma);
        let dtau = tau_th / sigma;
        let ddtau = (tau_thth / sigma - tau_th * dsigma / (sigma * sigma)) / sigma;
        CurvePoint { gamma: g0, tau: t, dtau, ddtau }
    }
}

/// Analytic arc-length curve.
#[derive(Debug, Clone)]
pub struct Curve {
    kind: CurveKind,
    pub preset: CurvePreset,
    pub length: f64,
    pub closed: bool,
}

#[derive(Debug, Clone)]
enum CurveKind {
    Line,
    Circle { r: f64 },
    Helix { r: f64, c: f64 },
    Fourier(Box<FourierCurve>),
}

impl Curve {
    pub fn point(&self, s: f64) -> CurvePoint {
        match &self.kind {
            CurveKind::Line => CurvePoint {
                gamma: Vec3::new(s, 0.0, 0.0),
                tau: Vec3::x(),
                dtau: Vec3::zeros(),
                ddtau: Vec3::zeros(),
            },
            CurveKind::Circle { r } => {
                let (sn, cs) = (s / r).sin_cos();
                CurvePoint {
                    gamma: Vec3::new(r * cs, r * sn, 0.0),
                    tau: Vec3::new(-sn, cs, 0.0),
                    dtau: Vec3::new(-cs, -sn, 0.0) / *r,
                    ddtau: Vec3::new(sn, -cs, 0.0) / (r * r),
                }
            }
            CurveKind::Helix { r, c } => {
                let rho = (r * r + c * c).sqrt();
                let th = s / rho;
                let (sn, cs) = th.sin_cos();
                CurvePoint {
                    gamma: Vec3::new(r * cs, r * sn, c * th),
                    tau: Vec3::new(-r * sn, r * cs, *c) / rho,
                    dtau: Vec3::new(-r * cs, -r * sn, 0.0) / (rho * rho),
                    ddtau: Vec3::new(r * sn, -r * cs, 0.0) / (rho * rho * rho),
                }
            }
            CurveKind::Fourier(f) => f.point(s),
        }
    }
}

/// Geometry-only factory; `length` defaults to the full closed length for circles and
/// Fourier curves and is required otherwise.
pub fn make_curve(preset: &CurvePreset, length: Option<f64>) -> Result<Curve> {
    let check_len = |l: f64| -> Result<f64> {
        if !(l.is_finite() && l > 0.0) {
            return invalid(format!("curve length must be positive, got {l}"));
        }
        Ok(l)
    };
    let (kind, full) = match preset {
        CurvePreset::Line => (CurveKind::Line, None),
        CurvePreset::Circle { radius } => {
            if !(radius.is_finite() && *radius > 0.0) {
                return invalid(format!("circle radius must be positive, got {radius}"));
            }
            (CurveKind::Circle { r: *radius }, Some(2.0 * PI * radius))
        }
        CurvePreset::Helix { radius, pitch } => {
            if !(radius.is_finite() && *radius > 0.0) {
                return invalid(format!("helix radius must be positive, got {radius}"));
            }
            if !pitch.is_finite() {
                return invalid("helix pitch must be finite");
            }
            (CurveKind::Helix { r: *radius, c: pitch / (2.0 * PI) }, None)
        }
        CurvePreset::Fourier { modes } => {
            let f = FourierCurve::new(modes.clone())?;
            let total = f.total;
            (CurveKind::Fourier(Box::new(f)), Some(total))
        }
    };
    let (length, closed) = match (length, full) {
        (Some(l), Some(f)) => {
            let l = check_len(l)?;
            if l > f * (1.0 + 1e-12) {
                return invalid(format!("requested length {l} exceeds closed curve length {f}"));
            }
            ((l).min(f), (l - f).abs() <= 1e-9 * f)
        }
        (None, Some(f)) => (f, true),
        (Some(l), None) => (check_len(l)?, false),
        (None, None) => return invalid("length is required for open curve presets"),
    };
    Ok(Curve { kind, preset: preset.clone(), length, closed })
}

// ---------------------------------------------------------------------------
// Frames

/// Smooth twist profile ϱ(s) = c₀ + Σ aₖcos(2πks/L) + bₖsin(2πks/L).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TwistProfile {
    pub constant: f64,
    #[serde(default)]
    pub modes: Vec<(u32, f64, f64)>,
}

impl TwistProfile {
    pub fn constant(c: f64) -> Self {
        TwistProfile { constant: c, modes: vec![] }
    }

    pub fn value(&self, s: f64, length: f64) -> (f64, f64) {
        let mut v = self.constant;
        let mut d = 0.0;
        for &(k, a, b) in &self.modes {
            let om = 2.0 * PI * k as f64 / length;
            let (sn, cs) = (om * s).sin_cos();
            v += a * cs + b * sn;
            d += om * (-a * sn + b * cs);
        }
        (v, d)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameMode {
    Frenet,
    #[default]
    RotationMinimizing,
    Prescribed { twist: TwistProfile },
}

/// Frame data at one arc-length parameter, including coefficient derivatives.
#[derive(Debug, Clone, Copy)]
pub struct FramePoint {
    pub s: f64,
    pub gamma: Vec3,
    pub r0: Mat3,
    pub k2: f64,
    pub k3: f64,
    pub rho: f64,
    pub dk2: f64,
    pub dk3: f64,
    pub drho: f64,
}

impl FramePoint {
    pub fn tau(&self) -> Vec3 {
        self.r0.column(0).into()
    }
    pub fn nu2(&self) -> Vec3 {
        self.r0.column(1).into()
    }
    pub fn nu3(&self) -> Vec3 {
        self.r0.column(2).into()
    }
    /// K = R₀ᵀR₀′.
    pub fn k(&self) -> Mat3 {
        k_matrix(self.k2, self.k3, self.rho)
    }
    pub fn dk(&self) -> Mat3 {
        k_matrix(self.dk2, self.dk3, self.drho)
    }
    /// R₀′ = R₀K.
    pub fn dr0(&self) -> Mat3 {
        self.r0 * self.k()
    }
    /// R₀″ = R₀(K² + K′).
    pub fn ddr0(&self) -> Mat3 {
        let k = self.k();
        self.r0 * (k * k + self.dk())
    }
}

/// Arc-length curve with an adapted rotation field sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct FramedCurve {
    pub curve: Curve,
    pub mode: FrameMode,
    pub length: f64,
    pub s: Vec<f64>,
    pub gamma: Vec<Vec3>,
    pub r0: Vec<Mat3>,
    pub k2: Vec<f64>,
    pub k3: Vec<f64>,
    pub rho: Vec<f64>,
    pub closed: bool,
    /// Constant twist added to a rotation-minimizing frame so that a closed frame is periodic.
    pub closure_twist: f64,
    substeps: usize,
}

const SUBSTEPS: usize = 8;

impl FramedCurve {
    pub fn n_intervals(&self) -> usize {
        self.s.len() - 1
    }

    pub fn ds(&self) -> f64 {
        self.length / self.n_intervals() as f64
    }

    fn twist(&self, s: f64) -> (f64, f64) {
        match &self.mode {
            FrameMode::Prescribed { twist } => twist.value(s, self.length),
            FrameMode::RotationMinimizing => (self.closure_twist, 0.0),
            FrameMode::Frenet => (0.0, 0.0),
        }
    }

    fn rate(&self, s: f64) -> Mat3 {
        let p = self.curve.point(s);
        let (rho, _) = self.twist(s);
        skew(&(p.tau.cross(&p.dtau) + p.tau * rho))
    }

    fn rk4_step(&self, r: &Mat3, s: f64, h: f64) -> Mat3 {
        let k1 = self.rate(s) * r;
        let k2 = self.rate(s + 0.5 * h) * (r + k1 * (0.5 * h));
        let k3 = self.rate(s + 0.5 * h) * (r + k2 * (0.5 * h));
        let k4 = self.rate(s + h) * (r + k3 * h);
        let next = r + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        align_first_column(&polar_rotation(&next), &self.curve.point(s + h).tau)
    }

    fn integrate(&self, r_start: &Mat3, s0: f64, s1: f64) -> Mat3 {
        let span = s1 - s0;
        if span == 0.0 {
            return *r_start;
        }
        let m = ((span.abs() / self.ds()) * self.substeps as f64).ceil().max(1.0) as usize;
        let h = span / m as f64;
        let mut r = *r_start;
        for j in 0..m {
            r = self.rk4_step(&r, s0 + j as f64 * h, h);
        }
        r
    }

    fn frenet_point(&self, s: f64) -> Result<FramePoint> {
        let p = self.curve.point(s);
        let kappa = p.dtau.norm();
        if kappa < 1e-12 {
            let node = ((s / self.ds()).round() as usize).min(self.n_intervals());
            return Err(Error::DegenerateFrenet { node, s });
        }
        let nu2 = p.dtau / kappa;
        let nu3 = p.tau.cross(&nu2);
        let torsion = |q: &CurvePoint| {
            let k = q.dtau.norm();
            q.ddtau.dot(&q.tau.cross(&(q.dtau / k))) / k
        };
        let rho = torsion(&p);
        let delta = 1e-5 * self.length.min(1.0);
        let lo = (s - delta).max(0.0);
        let hi = (s + delta).min(self.length);
        let drho = (torsion(&self.curve.point(hi)) - torsion(&self.curve.point(lo))) / (hi - lo);
        Ok(FramePoint {
            s,
            gamma: p.gamma,
            r0: Mat3::from_columns(&[p.tau, nu2, nu3]),
            k2: kappa,
            k3: 0.0,
            rho,
            dk2: p.ddtau.dot(&nu2),
            dk3: 0.0,
            drho,
        })
    }

    fn point_from_rotation(&self, s: f64, r0: Mat3) -> FramePoint {
        let p = self.curve.point(s);
        let nu2: Vec3 = r0.column(1).into();
        let nu3: Vec3 = r0.column(2).into();
        let k2 = p.dtau.dot(&nu2);
        let k3 = p.dtau.dot(&nu3);
        let (rho, drho) = self.twist(s);
        FramePoint {
            s,
            gamma: p.gamma,
            r0,
            k2,
            k3,
            rho,
            dk2: p.ddtau.dot(&nu2) + rho * k3,
            dk3: p.ddtau.dot(&nu3) - rho * k2,
            drho,
        }
    }

    /// Frame at node i (exact copy of the stored samples).
    pub fn node(&self, i: usize) -> FramePoint {
        let s = self.s[i];
        match self.mode {
            FrameMode::Frenet => {
                let mut fp = self.frenet_point(s).expect("frenet nodes validated at construction");
                fp.r0 = self.r0[i];
                fp.gamma = self.gamma[i];
                fp
            }
            _ => {
                let mut fp = self.point_from_rotation(s, self.r0[i]);
                fp.gamma = self.gamma[i];
                fp
            }
        }
    }

    /// Frame at an arbitrary s ∈ [0, L], integrated from the nearest node.
    pub fn frame_at(&self, s: f64) -> FramePoint {
        let s = s.clamp(0.0, self.length);
        let ds = self.ds();
        let i = ((s / ds).round() as usize).min(self.n_intervals());
        if (s - self.s[i]).abs() <= 1e-14 * self.length.max(1.0) {
            return self.node(i);
        }
        match self.mode {
            FrameMode::Frenet => self.frenet_point(s).expect("frenet validated on grid"),
            _ => {
                let r = self.integrate(&self.r0[i], self.s[i], s);
                self.point_from_rotation(s, r)
            }
        }
    }

    /// Rows (s, γ, R₀ column-major, k₂, k₃, ϱ) for CSV export.
    pub fn table(&self) -> (Vec<&'static str>, Vec<Vec<f64>>) {
        let header = vec![
            "s", "gamma_x", "gamma_y", "gamma_z", "tau_x", "tau_y", "tau_z", "nu2_x", "nu2_y", "nu2_z", "nu3_x",
            "nu3_y", "nu3_z", "k2", "k3", "rho",
        ];
        let rows = (0..self.s.len())
            .map(|i| {
                let mut row = vec![self.s[i]];
                row.extend(self.gamma[i].iter());
                row.extend(self.r0[i].iter());
                row.extend([self.k2[i], self.k3[i], self.rho[i]]);
                row
            })
            .collect();
        (header, rows)
    }
}

/// Build an adapted frame on a uniform grid of `n_s` intervals.
pub fn adapted_frame(curve: &Curve, n_s: usize, mode: FrameMode, r0_initial: Option<Mat3>) -> Result<FramedCurve> {
    if n_s < 2 {
        return invalid(format!("need at least 2 grid intervals, got {n_s}"));
    }
    let length = curve.length;
    let s: Vec<f64> = (0..=n_s).map(|i| length * i as f64 / n_s as f64).collect();
    let mut fc = FramedCurve {
        curve: curve.clone(),
        mode: mode.clone(),
        length,
        s: s.clone(),
        gamma: vec![],
        r0: vec![],
        k2: vec![],
        k3: vec![],
        rho: vec![],
        closed: curve.closed,
        closure_twist: 0.0,
        substeps: SUBSTEPS,
    };
    let mut points = Vec::with_capacity(n_s + 1);
    match &mode {
        FrameMode::Frenet => {
            for (i, &si) in s.iter().enumerate() {
                let fp = fc.frenet_point(si).map_err(|e| match e {
                    Error::DegenerateFrenet { s, .. } => Error::DegenerateFrenet { node: i, s },
                    other => other,
                })?;
                points.push(fp);
            }
        }
        _ => {
            let p0 = curve.point(0.0);
            let r_init = match r0_initial {
                Some(r) => {
                    if orthogonality_defect(&r) > 1e-10 || r.determinant() < 0.0 {
                        return invalid("initial frame is not a rotation");
                    }
                    let c: Vec3 = r.column(0).into();
                    if (c - p0.tau).norm() > 1e-8 {
                        return invalid("initial frame first column must equal the curve tangent");
                    }
                    align_first_column(&r, &p0.tau)
                }
                None => default_initial_frame(&p0),
            };
            let march = |fc: &FramedCurve| -> Vec<Mat3> {
                let mut rs = vec![r_init];
                for i in 0..n_s {
                    let next = fc.integrate(&rs[i], s[i], s[i + 1]);
                    rs.push(next);
                }
                rs
            };
            let mut rs = march(&fc);
            if curve.closed {
                let last = rs[n_s];
                let r_first = rs[0];
                let cos = last.column(1).dot(&r_first.column(1));
                let sin = last.column(1).dot(&r_first.column(2));
                let delta = sin.atan2(cos);
                match &mode {
                    FrameMode::RotationMinimizing => {
                        if delta.abs() > 1e-13 {
                            fc.closure_twist = -delta / length;
                            rs = march(&fc);
                        }
                    }
                    FrameMode::Prescribed { .. } => {
                        if delta.abs() > 1e-8 {
                            return invalid(format!("prescribed twist does not close the frame (mismatch angle {delta:e})"));
                        }
                    }
                    FrameMode::Frenet => unreachable!(),
                }
                rs[n_s] = rs[0];
            }
            for (i, r) in rs.into_iter().enumerate() {
                points.push(fc.point_from_rotation(s[i], r));
            }
        }
    }
    if curve.closed {
        points[n_s].gamma = points[0].gamma;
        points[n_s].r0 = points[0].r0;
    }
    fc.gamma = points.iter().map(|p| p.gamma).collect();
    fc.r0 = points.iter().map(|p| p.r0).collect();
    fc.k2 = points.iter().map(|p| p.k2).collect();
    fc.k3 = points.iter().map(|p| p.k3).collect();
    fc.rho = points.iter().map(|p| p.rho).collect();
    if curve.closed {
        fc.k2[n_s] = fc.k2[0];
        fc.k3[n_s] = fc.k3[0];
        fc.rho[n_s] = fc.rho[0];
    }
    Ok(fc)
}

/// Deterministic initial frame: ν₂ is the normalized curvature vector when it exists,
/// otherwise the projection of the coordinate axis least aligned with τ.
fn default_initial_frame(p: &CurvePoint) -> Mat3 {
    let t = p.tau;
    let nu2 = if p.dtau.norm() > 1e-8 {
        p.dtau.normalize()
    } else {
        let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
        let e = axes
            .iter()
            .min_by(|a, b| a.dot(&t).abs().partial_cmp(&b.dot(&t).abs()).unwrap())
            .unwrap();
        (e - t * e.dot(&t)).normalize()
    };
    Mat3::from_columns(&[t, nu2, t.cross(&nu2)])
}

/// Curvature and torsion fields on the grid; torsion is `None` where κ vanishes.
#[derive(Debug, Clone)]
pub struct CurvatureTorsion {
    pub kappa: Vec<f64>,
    pub torsion: Vec<Option<f64>>,
}

/// Fourth-order centered differences on a uniform grid; periodic wrap when closed.
pub fn grid_derivative(values: &[f64], ds: f64, closed: bool) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    if closed {
        let m = n - 1;
        let at = |j: isize| values[j.rem_euclid(m as isize) as usize];
        for (i, di) in d.iter_mut().enumerate().take(m) {
            let i = i as isize;
            *di = (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / (12.0 * ds);
        }
        d[m] = d[0];
        return d;
    }
    if n < 5 {
        for i in 0..n {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            d[i] = (values[b] - values[a]) / ((b - a) as f64 * ds);
        }
        return d;
    }
    for i in 0..n {
        d[i] = if i >= 2 && i + 2 < n {
            (values[i - 2] - 8.0 * values[i - 1] + 8.0 * values[i + 1] - values[i + 2]) / (12.0 * ds)
        } else if i < 2 {
            let v = &values[i..i + 5];
            let c: [f64; 5] = if i == 0 { [-25.0, 48.0, -36.0, 16.0, -3.0] } else { [-3.0, -10.0, 18.0, -6.0, 1.0] };
            let v = if i == 0 { v.to_vec() } else { values[0..5].to_vec() };
            c.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (12.0 * ds)
        } else {
            let v = &values[n - 5..n];
            let c: [f64; 5] = if i == n - 1 { [3.0, -16.0, 36.0, -48.0, 25.0] } else { [-1.0, 6.0, -18.0, 10.0, 3.0] };
            c.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (12.0 * ds)
        };
    }
    d
}

pub fn curvature_torsion(frame: &FramedCurve) -> CurvatureTorsion {
    let ds = frame.ds();
    let dk2 = grid_derivative(&frame.k2, ds, frame.closed);
    let dk3 = grid_derivative(&frame.k3, ds, frame.closed);
    let mut kappa = Vec::with_capacity(frame.s.len());
    let mut torsion = Vec::with_capacity(frame.s.len());
    for i in 0..frame.s.len() {
        let (k2, k3) = (frame.k2[i], frame.k3[i]);
        let kap2 = k2 * k2 + k3 * k3;
        kappa.push(kap2.sqrt());
        torsion.push(if kap2.sqrt() > 1e-12 { Some(frame.rho[i] + (k2 * dk3[i] - k3 * dk2[i]) / kap2) } else { None });
    }
    CurvatureTorsion { kappa, torsion }
}

/// ∇_hΨ^(h) with its exact inverse and determinant.
#[derive(Debug, Clone, Copy)]
pub struct TubeJacobian {
    pub grad: Mat3,
    pub inv: Mat3,
    pub det: f64,
}

/// ∇_hΨ^(h) = R₀ + h(ξν₂′ + ζν₃′) ⊗ e₁; the inverse follows from the rank-one structure.
pub fn grad_h_psi(fp: &FramePoint, xi: f64, zeta: f64, h: f64) -> Result<TubeJacobian> {
    let dr = fp.dr0();
    let w: Vec3 = (dr.column(1) * xi + dr.column(2) * zeta) * h;
    let det = 1.0 - h * (xi * fp.k2 + zeta * fp.k3);
    if det <= 0.0 || !det.is_finite() {
        return Err(Error::NonPositiveJacobian { s: fp.s, xi, zeta, h, det });
    }
    let mut grad = fp.r0;
    let c0 = grad.column(0) + w;
    grad.set_column(0, &c0);
    let rtw = fp.r0.transpose() * w;
    let inv = fp.r0.transpose() - rtw * fp.tau().transpose() / det;
    Ok(TubeJacobian { grad, inv, det })
}

/// First-order expansion R₀ᵀ − hR₀ᵀ[(ξν₂′+ζν₃′) ⊗ τ] of the inverse tube gradient.
pub fn grad_h_psi_inv_expansion(fp: &FramePoint, xi: f64, zeta: f64, h: f64) -> Mat3 {
    let dr = fp.dr0();
    let w: Vec3 = dr.column(1) * xi + dr.column(2) * zeta;
    fp.r0.transpose() - fp.r0.transpose() * (w * fp.tau().transpose()) * h
}

/// Ψ^(h)(s, ξ, ζ) = γ + hξν₂ + hζν₃.
pub fn psi(fp: &FramePoint, xi: f64, zeta: f64, h: f64) -> Vec3 {
    fp.gamma + (fp.nu2() * xi + fp.nu3() * zeta) * h
}

// ---------------------------------------------------------------------------
// Scaling regimes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Intermediate,
    VonKarman,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRegime {
    pub alpha: f64,
    pub regime: Regime,
}

impl ScalingRegime {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 2.0) {
            return invalid(format!("scaling exponent alpha must exceed 2, got {alpha}"));
        }
        let regime = if (alpha - 3.0).abs() <= 1e-12 {
            Regime::VonKarman
        } else if alpha < 3.0 {
            Regime::Intermediate
        } else {
            Regime::Linear
        };
        Ok(ScalingRegime { alpha, regime })
    }

    /// Exponent 2α − 2 of the energy scaling.
    pub fn energy_exponent(&self) -> f64 {
        2.0 * self.alpha - 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn helix(turns: f64, n: usize, mode: FrameMode) -> FramedCurve {
        let (r, pitch) = (1.0f64, 1.0f64);
        let c = pitch / (2.0 * PI);
        let len = turns * 2.0 * PI * (r * r + c * c).sqrt();
        let curve = make_curve(&CurvePreset::Helix { radius: r, pitch }, Some(len)).unwrap();
        adapted_frame(&curve, n, mode, None).unwrap()
    }

    #[test]
    fn line_frame_is_constant() {
        let curve = make_curve(&CurvePreset::Line, Some(1.0)).unwrap();
        let f = adapted_frame(&curve, 10, FrameMode::RotationMinimizing, Some(Mat3::identity())).unwrap();
        for i in 0..=10 {
            assert!((f.r0[i] - Mat3::identity()).abs().max() < 1e-15);
            assert_eq!((f.k2[i], f.k3[i], f.rho[i]), (0.0, 0.0, 0.0));
            assert!((f.gamma[i] - Vec3::new(f.s[i], 0.0, 0.0)).norm() < 1e-15);
        }
        let ct = curvature_torsion(&f);
        assert!(ct.torsion.iter().all(|t| t.is_none()));
    }

    #[test]
    fn circle_with_inward_normal_has_unit_k2() {
        let curve = make_curve(&CurvePreset::Circle { radius: 1.0 }, None).unwrap();
        assert!(curve.closed);
        let f = adapted_frame(&curve, 64, FrameMode::RotationMinimizing, None).unwrap();
        for i in 0..=64 {
            assert!((f.k2[i] - 1.0).abs() < 1e-12, "k2 = {}", f.k2[i]);
            assert!(f.k3[i].abs() < 1e-12);
            assert!(f.rho[i].abs() < 1e-12);
        }
        assert_eq!(f.r0[0], f.r0[64]);
        let ct = curvature_torsion(&f);
        for t in &ct.torsion {
            assert!(t.unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn helix_arc_length_factor() {
        // speed of the (cos t, sin t, t/2π) helix is √(1 + 1/4π²)
        let c = 1.0 / (2.0 * PI);
        let curve = make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 1.0 }, Some(5.0)).unwrap();
        let p = curve.point(2.0);
        assert!((p.tau.norm() - 1.0).abs() < 1e-14);
        let t = 2.0 / (1.0 + c * c).sqrt();
        assert!((p.gamma - Vec3::new(t.cos(), t.sin(), c * t)).norm() < 1e-14);
    }

    #[test]
    fn helix_rotation_minimizing_frame_invariants() {
        let f = helix(3.0, 400, FrameMode::RotationMinimizing);
        let c = 1.0 / (2.0 * PI);
        let kappa = 1.0 / (1.0 + c * c);
        let tors = c / (1.0 + c * c);
        let ct = curvature_torsion(&f);
        for i in 0..f.s.len() {
            assert!(orthogonality_defect(&f.r0[i]) < 1e-12);
            assert!((f.r0[i].determinant() - 1.0).abs() < 1e-12);
            let tau = f.curve.point(f.s[i]).tau;
            assert!((f.r0[i].column(0) - tau).norm() < 1e-12);
            assert!((ct.kappa[i] - kappa).abs() < 1e-10);
            assert!((ct.torsion[i].unwrap() - tors).abs() < 1e-6, "node {i}: {}", ct.torsion[i].unwrap());
        }
    }

    #[test]
    fn frenet_helix_coefficients_are_constant() {
        let f = helix(1.0, 50, FrameMode::Frenet);
        let c = 1.0 / (2.0 * PI);
        for i in 0..f.s.len() {
            assert!((f.k2[i] - 1.0 / (1.0 + c * c)).abs() < 1e-13);
            assert!((f.rho[i] - c / (1.0 + c * c)).abs() < 1e-13);
        }
    }

    #[test]
    fn frenet_rejects_straight_line() {
        let curve = make_curve(&CurvePreset::Line, Some(1.0)).unwrap();
        match adapted_frame(&curve, 4, FrameMode::Frenet, None) {
            Err(Error::DegenerateFrenet { node, .. }) => assert_eq!(node, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frame_ode_residual_is_small() {
        let f = helix(1.0, 200, FrameMode::RotationMinimizing);
        for i in 1..f.s.len() - 1 {
            let d = (f.r0[i + 1] - f.r0[i - 1]) / (2.0 * f.ds());
            let expected = f.r0[i] * k_matrix(f.k2[i], f.k3[i], f.rho[i]);
            assert!((d - expected).abs().max() < 1e-3 * f.ds().powi(2) * 1e3);
        }
    }

    #[test]
    fn frame_at_matches_node_samples_and_ode() {
        let f = helix(1.0, 40, FrameMode::RotationMinimizing);
        let s = 0.5 * (f.s[7] + f.s[8]);
        let a = f.frame_at(s);
        let b = f.integrate(&f.r0[8], f.s[8], s);
        assert!((a.r0 - b).abs().max() < 1e-11);
        let delta = 1e-5;
        let num = (f.frame_at(s + delta).r0 - f.frame_at(s - delta).r0) / (2.0 * delta);
        assert!((num - a.dr0()).abs().max() < 1e-7);
        let num_k = (f.frame_at(s + delta).k2 - f.frame_at(s - delta).k2) / (2.0 * delta);
        assert!((num_k - a.dk2).abs() < 1e-7);
    }

    #[test]
    fn prescribed_twist_frame_is_rotated_rmf() {
        let twist = TwistProfile::constant(0.3);
        let f = helix(1.0, 100, FrameMode::Prescribed { twist });
        let g = helix(1.0, 100, FrameMode::RotationMinimizing);
        for i in 0..f.s.len() {
            let rel = g.r0[i].transpose() * f.r0[i];
            let ang = rel[(2, 1)].atan2(rel[(1, 1)]);
            assert!((ang - 0.3 * f.s[i]).abs() < 1e-9);
            assert!((f.rho[i] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_fourier_curve_frame_is_periodic() {
        let modes = vec![
            FourierMode { k: 1, cos: [1.0, 0.0, 0.0], sin: [0.0, 1.0, 0.0] },
            FourierMode { k: 2, cos: [0.0, 0.0, 0.3], sin: [0.1, 0.0, 0.0] },
        ];
        let curve = make_curve(&CurvePreset::Fourier { modes }, None).unwrap();
        let f = adapted_frame(&curve, 200, FrameMode::RotationMinimizing, None).unwrap();
        let n = f.n_intervals();
        assert_eq!(f.r0[0], f.r0[n]);
        // the frame just before the seam joins smoothly onto the first node
        let back = f.integrate(&f.r0[n - 1], f.s[n - 1], f.s[n]);
        assert!((back - f.r0[0]).abs().max() < 1e-9);
        for i in 0..=n {
            let p = curve.point(f.s[i]);
            assert!((p.tau.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tube_inverse_is_exact_and_expansion_is_second_order() {
        let curve = make_curve(&CurvePreset::Circle { radius: 1.0 }, None).unwrap();
        let f = adapted_frame(&curve, 32, FrameMode::RotationMinimizing, None).unwrap();
        let fp = f.frame_at(0.37);
        let mut errs = vec![];
        for h in [1e-3, 5e-4] {
            let j = grad_h_psi(&fp, 0.3, -0.2, h).unwrap();
            assert!((j.inv * j.grad - Mat3::identity()).abs().max() < 1e-14);
            assert!((j.det - j.grad.determinant()).abs() < 1e-14);
            errs.push((j.inv - grad_h_psi_inv_expansion(&fp, 0.3, -0.2, h)).abs().max());
        }
        let ratio = errs[0] / errs[1];
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn tube_rejects_self_penetration() {
        let curve = make_curve(&CurvePreset::Circle { radius: 1.0 }, None).unwrap();
        let f = adapted_frame(&curve, 16, FrameMode::RotationMinimizing, None).unwrap();
        assert!(matches!(grad_h_psi(&f.node(0), 2.0, 0.0, 1.0), Err(Error::NonPositiveJacobian { .. })));
    }

    #[test]
    fn rotation_exp_identities() {
        assert_eq!(rotation_exp(&Mat3::zeros()), Mat3::identity());
        let gen = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = rotation_exp(&(gen * PI));
        let expected = Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-15);
        let a = skew(&Vec3::new(0.3, -1.2, 0.7));
        let eps = 1e-3;
        let lhs = sym(&rotation_exp_minus_identity(&(a * eps))) / (eps * eps);
        let rhs = a * a * 0.5;
        assert!((lhs - rhs).norm() / rhs.norm() < 1e-3);
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let x = |t: f64| Vec3::new(0.4 * t.sin(), 1.1 * t, -0.3 + t * t);
        let dx = |t: f64| Vec3::new(0.4 * t.cos(), 1.1, 2.0 * t);
        let t = 0.7;
        let d = 1e-6;
        let num = (rotation_exp(&skew(&x(t + d))) - rotation_exp(&skew(&x(t - d)))) / (2.0 * d);
        let r = rotation_exp(&skew(&x(t)));
        let ana = r * skew(&(exp_right_jacobian(&x(t)) * dx(t)));
        assert!((num - ana).abs().max() < 1e-8);
    }

    #[test]
    fn scaling_regime_tags() {
        assert!(ScalingRegime::new(2.0).is_err());
        assert_eq!(ScalingRegime::new(2.5).unwrap().regime, Regime::Intermediate);
        assert_eq!(ScalingRegime::new(3.0).unwrap().regime, Regime::VonKarman);
        assert_eq!(ScalingRegime::new(4.0).unwrap().regime, Regime::Linear);
        assert_eq!(ScalingRegime::new(4.0).unwrap().energy_exponent(), 6.0);
    }

    #[test]
    fn degenerate_presets_are_rejected() {
        assert!(make_curve(&CurvePreset::Circle { radius: 0.0 }, None).is_err());
        assert!(make_curve(&CurvePreset::Line, Some(0.0)).is_err());
        assert!(make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 1.0 }, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn helix_frames_stay_orthonormal_and_adapted(
            radius in 0.2f64..3.0,
            pitch in -2.0f64..2.0,
            frenet in any::<bool>(),
        ) {
            let c = pitch / (2.0 * PI);
            let len = 2.0 * PI * (radius * radius + c * c).sqrt();
            let curve = make_curve(&CurvePreset::Helix { radius, pitch }, Some(len)).unwrap();
            let mode = if frenet { FrameMode::Frenet } else { FrameMode::RotationMinimizing };
            let frame = adapted_frame(&curve, 64, mode, None).unwrap();
            for i in 0..frame.s.len() {
                prop_assert!(orthogonality_defect(&frame.r0[i]) <= 1e-10);
                prop_assert!((frame.r0[i].column(0) - curve.point(frame.s[i]).tau).norm() <= 1e-8);
            }
        }

        #[test]
        fn tube_jacobian_inverse_is_exact(
            s in 0.0f64..3.0,
            xi in -0.7f64..0.7,
            zeta in -0.7f64..0.7,
            h in 1e-4f64..0.5,
        ) {
            let frame = helix(1.0, 32, FrameMode::RotationMinimizing);
            let fp = frame.frame_at(s.min(frame.length));
            let jac = grad_h_psi(&fp, xi, zeta, h).unwrap();
            prop_assert!((jac.inv * jac.grad - Mat3::identity()).norm() <= 1e-12);
        }

        #[test]
        fn rotation_exp_is_a_rotation(x in -4.0f64..4.0, y in -4.0f64..4.0, z in -4.0f64..4.0) {
            let r = rotation_exp(&skew(&Vec3::new(x, y, z)));
            prop_assert!(orthogonality_defect(&r) <= 1e-13);
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-13);
        }
    }
}
