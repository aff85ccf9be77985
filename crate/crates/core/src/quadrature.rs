//! Gauss–Legendre rules on intervals and symmetric rules on triangles.

/// Nodes and weights of an n-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one point");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss rule mapped to [a, b]: (points, weights).
pub fn gauss_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        x.iter().map(|t| mid + half * t).collect(),
        w.iter().map(|wi| wi * half).collect(),
    )
}

/// Quadrature rule on the reference triangle in barycentric form; weights sum to one.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl TriangleRule {
    /// Edge-midpoint rule, exact for quadratics.
    pub fn degree2() -> Self {
        TriangleRule {
            points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            weights: vec![1.0 / 3.0; 3],
            degree: 2,
        }
    }

    /// Six-point symmetric rule exact for degree 4.
    pub fn degree4() -> Self {
        let a1 = 0.445_948_490_915_965;
        let w1 = 0.223_381_589_678_011;
        let a2 = 0.091_576_213_509_771;
        let w2 = 0.109_951_743_655_322;
        let mut points = Vec::with_capacity(6);
        let mut weights = Vec::with_capacity(6);
        for (a, w) in [(a1, w1), (a2, w2)] {
            let b = 1.0 - 2.0 * a;
            points.push([a, a, b]);
            points.push([a, b, a]);
            points.push([b, a, a]);
            weights.extend([w; 3]);
        }
        TriangleRule { points, weights, degree: 4 }
    }

    /// Collapsed-square Gauss product rule with n×n points, exact for degree 2n−2.
    pub fn collapsed(n: usize) -> Self {
        let (x, w) = gauss_on(0.0, 1.0, n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let u = x[i];
                let v = x[j] * (1.0 - u);
                // reference triangle area is 1/2, normalize to unit total weight
                points.push([1.0 - u - v, u, v]);
                weights.push(2.0 * w[i] * w[j] * (1.0 - u));
            }
        }
        TriangleRule { points, weights, degree: 2 * n - 2 }
    }

    /// Rule of at least the given degree.
    pub fn of_degree(d: usize) -> Self {
        match d {
            0..=2 => Self::degree2(),
            3..=4 => Self::degree4(),
            _ => Self::collapsed(d.div_ceil(2) + 1),
        }
    }
}
