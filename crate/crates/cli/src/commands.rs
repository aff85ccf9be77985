use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rodlimit::cell_problems::{q0_closed_form_isotropic, skew_from_entries, CellData, CellProblem, Material};
use rodlimit::cross_section::{make_section, normalize_section, rectangle_torsion_series, torsional_rigidity, SectionMesh, SectionPreset};
use rodlimit::frame_geometry::{adapted_frame, make_curve, FramedCurve, Regime, ScalingRegime, Vec3};
use rodlimit::gamma_harness::{
    convergence_study, periodicity_defect, recovery_intermediate, recovery_ring, recovery_standard, reference_energy,
    unrelaxed_cell_data, ConvergenceRecord, Deformation3D, QuadratureSpec, RelaxedWarp, WarpField,
};
use rodlimit::rod_functionals::AnalyticState;
use rodlimit::rod_minimizer::{minimize_quadratic, minimize_von_karman, LoadCase, SolverOptions};

use crate::config::{RunConfig, WarpChoice};
use crate::output::{col, csv, num, Artifacts, Cell};

/// Settings taken from the command line.
pub struct RunSettings {
    pub seed: u64,
    pub threads: usize,
    pub self_check: bool,
}

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub hash: String,
    pub settings: RunSettings,
}

fn section_mesh(cfg: &RunConfig) -> Result<SectionMesh> {
    let raw = make_section(&cfg.section, cfg.mesh_edge).context("meshing the cross-section")?;
    Ok(normalize_section(&raw).context("normalizing the cross-section")?.0)
}

fn frame(cfg: &RunConfig) -> Result<FramedCurve> {
    let curve = make_curve(&cfg.curve, cfg.length).context("building the mid-fiber curve")?;
    adapted_frame(&curve, cfg.n_s, cfg.frame.clone(), None).context("building the adapted frame")
}

/// Series rigidity of the unit-area rectangle, when the section is one.
fn series_rigidity(preset: &SectionPreset) -> Option<f64> {
    match preset {
        SectionPreset::Square { .. } => Some(rectangle_torsion_series(1.0, 1.0, 200)),
        SectionPreset::Rectangle { aspect } => Some(rectangle_torsion_series(aspect.sqrt(), 1.0 / aspect.sqrt(), 200)),
        _ => None,
    }
}

fn lame(material: &Material) -> Option<(f64, f64)> {
    match material {
        Material::IsotropicLame { lambda, mu } => Some((*lambda, *mu)),
        _ => None,
    }
}

pub fn section(ctx: &Ctx, out: &mut Artifacts) -> Result<()> {
    let raw = make_section(&ctx.cfg.section, ctx.cfg.mesh_edge).context("meshing the cross-section")?;
    let (mesh, norm) = normalize_section(&raw).context("normalizing the cross-section")?;
    let torsion = torsional_rigidity(&mesh).context("solving the torsion problem")?;
    let mut rows = vec![
        ("area", mesh.area, "length^2"),
        ("I2 = int zeta^2", mesh.i2, "length^4"),
        ("I3 = int xi^2", mesh.i3, "length^4"),
        ("mu(D) = int (xi^2 + zeta^2)", mesh.mu, "length^4"),
        ("T", torsion.rigidity, "length^4"),
    ];
    let series = series_rigidity(&ctx.cfg.section);
    if let Some(t) = series {
        rows.push(("T_series", t, "length^4"));
    }
    let table: Vec<Vec<Cell>> =
        rows.iter().map(|(n, v, u)| vec![Cell::Text(n.to_string()), Cell::Num(*v), Cell::Text(u.to_string())]).collect();
    out.write("section.csv", &csv(&ctx.hash, &[col("quantity", "-"), col("value", "see unit"), col("unit", "-")], &table))?;
    let mut rep = String::new();
    writeln!(rep, "cross-section report (normalized: unit area, centered, principal axes)")?;
    writeln!(rep, "config_sha256 = {}", ctx.hash)?;
    writeln!(rep, "vertices = {}", mesh.vertices.len())?;
    writeln!(rep, "triangles = {}", mesh.triangles.len())?;
    for (n, v, _) in &rows {
        writeln!(rep, "{n} = {}", num(*v))?;
    }
    if let Some(t) = series {
        writeln!(rep, "T relative deviation from series = {}", num((torsion.rigidity - t) / t))?;
    }
    writeln!(rep, "torsion solver iterations = {}", torsion.iterations)?;
    rep.push_str(&norm.describe());
    out.write("section_report.txt", &rep)
}

pub fn cell(ctx: &Ctx, out: &mut Artifacts) -> Result<()> {
    let cfg = ctx.cfg;
    let mesh = section_mesh(cfg)?;
    let frame = frame(cfg)?;
    let material = cfg.material.material()?;
    let problem = CellProblem::new(&material, &frame.node(0), &mesh).context("assembling the cell problem")?;
    let fem = problem.cell_data().context("solving the cell problems")?;
    let closed = match lame(&material) {
        Some((l, m)) => {
            let t = torsional_rigidity(&mesh)?.rigidity;
            Some((l, m, t, CellData::closed_form_isotropic(l, m, mesh.i2, mesh.i3, t)?))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.settings.seed);
    let amp = cfg.cell.amplitude;
    let mut rows = Vec::with_capacity(cfg.cell.samples);
    for k in 0..cfg.cell.samples {
        let y: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-amp..=amp));
        let f = skew_from_entries(y[1], y[2], y[3]);
        let sol = problem.solve(y[0], &f).with_context(|| format!("cell sample {k}"))?;
        let mut row = vec![Cell::Int(k), Cell::Num(y[0]), Cell::Num(y[1]), Cell::Num(y[2]), Cell::Num(y[3]), Cell::Num(sol.value)];
        if let Some((l, m, t, _)) = closed {
            let c = q0_closed_form_isotropic(l, m, mesh.i2, mesh.i3, t, y[0], &f)?;
            row.push(Cell::Num(c));
            row.push(Cell::Num((sol.value - c) / c));
        }
        rows.push(row);
    }
    let mut cols = vec![
        col("sample", "-"),
        col("t", "1/length"),
        col("F12", "1/length"),
        col("F13", "1/length"),
        col("F23", "1/length"),
        col("Q0_fem", "energy/length"),
    ];
    if closed.is_some() {
        cols.push(col("Q0_closed_form", "energy/length"));
        cols.push(col("relative_difference", "-"));
    }
    out.write("cell_samples.csv", &csv(&ctx.hash, &cols, &rows))?;
    let names = ["t", "F12", "F13", "F23"];
    let mut data = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let mut row = vec![Cell::Text(names[i].into()), Cell::Text(names[j].into()), Cell::Num(fem.c[(i, j)])];
            if let Some((.., cf)) = &closed {
                row.push(Cell::Num(cf.c[(i, j)]));
            }
            data.push(row);
        }
    }
    let mut cols = vec![col("row", "-"), col("column", "-"), col("C_fem", "energy*length")];
    if closed.is_some() {
        cols.push(col("C_closed_form", "energy*length"));
    }
    out.write("cell_data.csv", &csv(&ctx.hash, &cols, &data))
}

pub fn reduce(ctx: &Ctx, out: &mut Artifacts) -> Result<()> {
    let cfg = ctx.cfg;
    let Some(block) = &cfg.reduce else { bail!("reduce: config has no `reduce` block") };
    let mesh = section_mesh(cfg)?;
    let frame = frame(cfg)?;
    let material = cfg.material.material()?;
    // homogeneous isotropic sections give the same cell data at every s in frame coordinates
    let cd = CellProblem::new(&material, &frame.node(0), &mesh)?.cell_data().context("solving the cell problems")?;
    let cell = move |_: &rodlimit::FramePoint| Ok(cd);
    let l = frame.length;
    let loads = LoadCase::from_fn(
        &frame,
        |fp| Vec3::new(block.loads.f[0].eval(fp.s, l).0, block.loads.f[1].eval(fp.s, l).0, block.loads.f[2].eval(fp.s, l).0),
        |fp| block.loads.g.eval(fp.s, l).0,
        |fp| block.loads.m.eval(fp.s, l).0,
    );
    let opts = SolverOptions { penalty: block.penalty, ..SolverOptions::default() };
    let regime = ScalingRegime::new(cfg.alpha)?;
    let (state, report) = if regime.regime == Regime::VonKarman {
        minimize_von_karman(&frame, &cell, &loads, block.boundary, None, opts).context("minimizing the von Karman rod energy")?
    } else {
        minimize_quadratic(&frame, &cell, regime, &loads, block.boundary, opts).context("minimizing the quadratic rod energy")?
    };
    let (header, rows) = state.table();
    let units = |h: &str| if h == "s" || h.starts_with("v_") { "length" } else { "-" };
    let cols: Vec<_> = header.iter().map(|h| col(*h, units(h))).collect();
    let rows: Vec<Vec<Cell>> = rows.into_iter().map(|r| r.into_iter().map(Cell::Num).collect()).collect();
    out.write("rod_state.csv", &csv(&ctx.hash, &cols, &rows))?;
    let mut rep = String::new();
    writeln!(rep, "rod minimization report")?;
    writeln!(rep, "config_sha256 = {}", ctx.hash)?;
    writeln!(rep, "alpha = {}", num(cfg.alpha))?;
    writeln!(rep, "regime = {:?}", regime.regime)?;
    for (k, v) in [
        ("energy", report.energy),
        ("load_work", report.load_work),
        ("objective", report.objective),
        ("penalty_energy", report.penalty_energy),
        ("inextensibility_residual", report.inextensibility_residual),
        ("periodicity_defect", report.periodicity_defect),
        ("constraint_residual", report.constraint_residual),
        ("solver_residual", report.solver_residual),
        ("projected_gradient_norm", report.projected_gradient_norm),
    ] {
        writeln!(rep, "{k} = {}", num(v))?;
    }
    writeln!(rep, "iterations = {}", report.iterations)?;
    writeln!(rep, "levenberg_shifts = {}", report.levenberg_shifts)?;
    writeln!(rep, "kernel_dimension = {}", report.kernel_dimension)?;
    for step in &report.newton_history {
        writeln!(
            rep,
            "newton {} objective = {} gradient_norm = {} step = {} shift = {}",
            step.iteration,
            num(step.objective),
            num(step.gradient_norm),
            num(step.step),
            num(step.shift)
        )?;
    }
    out.write("reduce_report.txt", &rep)
}

fn quadrature(ctx: &Ctx, s_order: usize, tri_degree: usize) -> QuadratureSpec {
    QuadratureSpec { s_order, tri_degree, threads: ctx.settings.threads }
}

pub fn gamma(ctx: &Ctx, out: &mut Artifacts, ring: bool) -> Result<()> {
    let cfg = ctx.cfg;
    let name = if ring { "ring" } else { "gamma" };
    let Some(block) = &cfg.gamma else { bail!("{name}: config has no `gamma` block") };
    let regime = ScalingRegime::new(cfg.alpha)?;
    if ring && regime.regime != Regime::VonKarman {
        bail!("ring: the periodic recovery is built for alpha = 3 (got {})", cfg.alpha);
    }
    let mesh = section_mesh(cfg)?;
    let frame = frame(cfg)?;
    if ring && !frame.closed {
        bail!("ring: the configured curve is not closed");
    }
    let state = AnalyticState::new(&frame, block.state.clone());
    let (warp, cd): (Option<Arc<dyn WarpField>>, CellData) = match block.warp {
        WarpChoice::None => (None, unrelaxed_cell_data(&cfg.material, &mesh, &frame)?),
        WarpChoice::Relaxed => {
            let w = RelaxedWarp::new(&cfg.material.material()?, &mesh, &frame, &state, regime).context("building the relaxed warping")?;
            let cd = w.cell_data;
            (Some(Arc::new(w)), cd)
        }
    };
    let quad = quadrature(ctx, block.s_order, block.tri_degree);
    let stretch = (regime.regime == Regime::Intermediate).then_some(&block.stretch);
    let reference = reference_energy(&state, stretch, &frame, &cd, regime, quad.s_order);
    let alpha = cfg.alpha;
    let builder = |h: f64| -> rodlimit::Result<Box<dyn Deformation3D>> {
        Ok(if ring {
            Box::new(recovery_ring(&state, warp.clone(), &frame, h)?)
        } else if regime.regime == Regime::Intermediate {
            Box::new(recovery_intermediate(&state, &block.stretch, warp.clone(), alpha, &frame, h)?)
        } else {
            Box::new(recovery_standard(&state, warp.clone(), regime, &frame, h)?)
        })
    };
    let record = convergence_study(&builder, reference, &block.h, &frame, &mesh, &cfg.material, alpha, &quad, ctx.settings.self_check)
        .with_context(|| format!("{name}: convergence study"))?;
    let defects: Vec<f64> = if ring {
        block.h.iter().map(|&h| builder(h).map(|d| periodicity_defect(d.as_ref(), &frame, &mesh))).collect::<rodlimit::Result<_>>()?
    } else {
        vec![]
    };
    write_record(ctx, out, name, &record, &defects)
}

fn write_record(ctx: &Ctx, out: &mut Artifacts, name: &str, rec: &ConvergenceRecord, defects: &[f64]) -> Result<()> {
    let mut cols = vec![
        col("h", "length"),
        col("energy", "energy"),
        col("scaled_energy", "energy/h^(2alpha-2)"),
        col("reference", "energy"),
        col("ratio", "-"),
        col("check_scaled_energy", "energy/h^(2alpha-2)"),
        col("under_resolved", "bool"),
    ];
    if !defects.is_empty() {
        cols.push(col("periodicity_defect", "length"));
    }
    let rows: Vec<Vec<Cell>> = rec
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![
                Cell::Num(r.h),
                Cell::Num(r.energy),
                Cell::Num(r.scaled_energy),
                Cell::Num(r.reference),
                Cell::Num(r.ratio),
                r.check_scaled_energy.map_or(Cell::Text(String::new()), Cell::Num),
                Cell::Text(r.under_resolved.to_string()),
            ];
            if let Some(d) = defects.get(i) {
                row.push(Cell::Num(*d));
            }
            row
        })
        .collect();
    out.write(&format!("{name}_convergence.csv"), &csv(&ctx.hash, &cols, &rows))?;
    let mut rep = String::new();
    writeln!(rep, "convergence record")?;
    writeln!(rep, "config_sha256 = {}", ctx.hash)?;
    writeln!(rep, "alpha = {}", num(rec.alpha))?;
    match rec.fitted_order {
        Some(p) => writeln!(rep, "fitted_order = {}", num(p))?,
        None => writeln!(rep, "fitted_order = none (ratios equal 1 or fewer than two usable points)")?,
    }
    writeln!(rep, "non_monotone = {}", rec.non_monotone)?;
    writeln!(rep, "under_resolved = {}", rec.under_resolved)?;
    writeln!(rep, "low_alpha = {}", rec.low_alpha)?;
    writeln!(rep, "quadrature = s_order {} tri_degree {}", rec.quadrature.s_order, rec.quadrature.tri_degree)?;
    for p in &rec.provenance {
        writeln!(rep, "provenance: {p}")?;
    }
    out.write(&format!("{name}_report.txt"), &rep)
}
