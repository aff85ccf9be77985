//! Shared fixtures for the kernel benchmarks in `benches/`.

use rodlimit::cross_section::{make_section, normalize_section, SectionMesh, SectionPreset};
use rodlimit::frame_geometry::{adapted_frame, make_curve, CurvePreset, FrameMode, FramedCurve};
use rodlimit::rod_functionals::{AnalyticSpec, AnalyticState, FourierSeries};

pub fn disc(edge: f64) -> SectionMesh {
    normalize_section(&make_section(&SectionPreset::Disc { radius: 1.0 }, edge).expect("disc meshes")).expect("disc normalizes").0
}

pub fn helix(n: usize) -> FramedCurve {
    let curve = make_curve(&CurvePreset::Helix { radius: 1.0, pitch: 0.5 }, Some(4.0)).expect("helix");
    adapted_frame(&curve, n, FrameMode::RotationMinimizing, None).expect("helix frame")
}

pub fn smooth_state(frame: &FramedCurve) -> AnalyticState {
    let f = |c: f64, k: u32, a: f64| FourierSeries { constant: c, slope: 0.0, modes: vec![(k, a, 0.5 * a)] };
    AnalyticState::new(frame, AnalyticSpec { a: f(0.3, 1, 0.2), b: f(-0.1, 2, 0.1), w: f(0.2, 1, -0.1), u: f(0.05, 1, 0.1) })
}
