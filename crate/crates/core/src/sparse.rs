//! Compressed sparse row matrices and a projected, Jacobi-preconditioned CG.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for (i, di) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.cols[k] == i {
                    *di += self.vals[k];
                }
            }
        }
        d
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.apply(x))
    }

    /// Largest absolute asymmetry |a_ij − a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                worst = worst.max((self.vals[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.vals[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalize vectors (modified Gram–Schmidt, twice); near-dependent ones are dropped.
pub fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let scale = norm(v);
        if scale == 0.0 {
            continue;
        }
        let mut q = v.clone();
        for _ in 0..2 {
            for b in &out {
                let c = dot(&q, b);
                q.iter_mut().zip(b).for_each(|(qi, bi)| *qi -= c * bi);
            }
        }
        let nq = norm(&q);
        if nq > 1e-10 * scale {
            q.iter_mut().for_each(|x| *x /= nq);
            out.push(q);
        }
    }
    out
}

/// Linear operator interface for the CG driver.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
    fn diag(&self) -> Vec<f64>;
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec(x, y)
    }
    fn diag(&self) -> Vec<f64> {
        self.diagonal()
    }
}

/// Restriction of a symmetric positive semidefinite operator to the subspace orthogonal
/// to `basis` (orthonormal) with the `fixed` entries clamped to zero.
pub struct Projector<'a> {
    pub basis: &'a [Vec<f64>],
    pub fixed: Option<&'a [bool]>,
}

impl Projector<'_> {
    pub fn apply(&self, x: &mut [f64]) {
        if let Some(f) = self.fixed {
            x.iter_mut().zip(f).for_each(|(xi, &fi)| {
                if fi {
                    *xi = 0.0
                }
            });
        }
        for b in self.basis {
            let c = dot(x, b);
            x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= c * bi);
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Target relative residual.
    pub tol: f64,
    /// Residual above which a capped run is reported as failure.
    pub accept: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-12, accept: 1e-10, max_iter: 20_000 }
    }
}

/// Solve A x = b on the projected subspace; b is projected first.
pub fn projected_pcg(
    a: &dyn LinearOperator,
    b: &[f64],
    proj: &Projector,
    opts: CgOptions,
) -> Result<(Vec<f64>, CgReport)> {
    let n = a.dim();
    let mut rhs = b.to_vec();
    proj.apply(&mut rhs);
    let bnorm = norm(&rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, CgReport { iterations: 0, relative_residual: 0.0, history: vec![0.0] }));
    }
    let dinv: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d.abs() } else { 1.0 })
        .collect();
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
        proj.apply(&mut z);
        z
    };
    let mut r = rhs.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut history = vec![1.0];
    let mut rel = 1.0;
    for it in 0..opts.max_iter {
        a.apply_into(&p, &mut ap);
        proj.apply(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            if rel <= opts.accept {
                return Ok((x, CgReport { iterations: it, relative_residual: rel, history }));
            }
            return Err(Error::SolverNonConvergence { residual: rel, iterations: it, history });
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= opts.tol {
            // true residual refresh guards against drift of the recursive residual
            let mut ax = vec![0.0; n];
            a.apply_into(&x, &mut ax);
            proj.apply(&mut ax);
            let true_rel = norm(&rhs.iter().zip(&ax).map(|(b, q)| b - q).collect::<Vec<_>>()) / bnorm;
            if true_rel <= opts.tol * 10.0 || true_rel <= opts.accept * 1e-2 {
                return Ok((x, CgReport { iterations: it + 1, relative_residual: true_rel, history }));
            }
            r = rhs.iter().zip(&ax).map(|(b, q)| b - q).collect();
            z = precond(&r);
            p = z.clone();
            rz = dot(&r, &z);
            continue;
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    if rel <= opts.accept {
        Ok((x, CgReport { iterations: opts.max_iter, relative_residual: rel, history }))
    } else {
        Err(Error::SolverNonConvergence { residual: rel, iterations: opts.max_iter, history })
    }
}
