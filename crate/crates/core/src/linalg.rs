//! Small numerical helpers shared by the estimation and coding layers.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Numerical rank from the singular values, relative tolerance `1e-10`.
pub(crate) fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = max * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

pub(crate) fn max_asymmetry(p: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..p.nrows() {
        for j in 0..i {
            worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    worst
}

/// Draws `L z` with `z ~ N(0, I)`, i.e. a sample of `N(0, L Lᵀ)`.
pub(crate) fn sample_gaussian<R: Rng + ?Sized>(chol_l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(chol_l.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol_l * z
}

/// Integer powers of a fixed square matrix, cached per exponent.
///
/// Each new exponent is built by binary exponentiation from cached powers of two,
/// so a run that references `A^d` for many repeated `d` pays for each only once.
#[derive(Debug, Clone)]
pub struct MatrixPowers {
    base: DMatrix<f64>,
    squares: Vec<DMatrix<f64>>,
    cache: HashMap<u64, DMatrix<f64>>,
}

impl MatrixPowers {
    pub fn new(base: DMatrix<f64>) -> Self {
        assert!(base.is_square(), "matrix powers need a square base");
        let squares = vec![base.clone()];
        Self {
            base,
            squares,
            cache: HashMap::new(),
        }
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn pow(&mut self, exp: u64) -> &DMatrix<f64> {
        if !self.cache.contains_key(&exp) {
            let value = self.compute(exp);
            self.cache.insert(exp, value);
        }
        &self.cache[&exp]
    }

    fn compute(&mut self, exp: u64) -> DMatrix<f64> {
        let n = self.base.nrows();
        let mut acc = DMatrix::<f64>::identity(n, n);
        let mut bit = 0usize;
        let mut e = exp;
        while e > 0 {
            while self.squares.len() <= bit {
                let last = self.squares.last().expect("seeded with base");
                let next = last * last;
                self.squares.push(next);
            }
            if e & 1 == 1 {
                acc = &acc * &self.squares[bit];
            }
            e >>= 1;
            bit += 1;
        }
        acc
    }
}

/// Exact difference `a - b` as an unevaluated pair `(hi, lo)` with `hi + lo == a - b`.
pub(crate) fn two_diff(a: f64, b: f64) -> (f64, f64) {
    let hi = a - b;
    let bb = a - hi;
    let aa = hi + bb;
    let lo = (a - aa) + (bb - b);
    (hi, lo)
}

/// Correctly rounded sum of a slice of finite floats (Shewchuk partials with
/// round-half-even correction). When the exact sum is representable it is
/// returned exactly.
pub(crate) fn exact_sum(values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum();
    }
    let mut partials: Vec<f64> = Vec::with_capacity(4);
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}
