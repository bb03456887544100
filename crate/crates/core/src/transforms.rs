//! Affine transform algebra on the homogeneous-matrix representation.
//!
//! An affine map `T(s) = A s + b` in dimension `d` is stored as the
//! `(d+1) x (d+1)` matrix `H = [[A, b], [0, 1]]`; `(A, b)` is a derived view.
//! Tangent vectors ([`LieVector`]) hold the top `d` rows of a generator
//! `[[L, w], [0, 0]]`, row-major, so they have `d (d + 1)` entries.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

/// Minimum `|det A|` for a transform to count as invertible.
pub const SINGULAR_DET: f64 = 1e-12;
pub const KARCHER_TOL: f64 = 1e-10;
pub const KARCHER_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    h: DMatrix<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            h: DMatrix::identity(dim + 1, dim + 1),
        }
    }

    /// Builds a transform from its homogeneous matrix. The last row must be
    /// `[0, .., 0, 1]` and the linear part invertible.
    pub fn from_homogeneous(h: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        if n < 2 || n > 3 || h.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: n,
            });
        }
        let d = n - 1;
        let last_ok = (0..d).all(|j| h[(d, j)] == 0.0) && h[(d, d)] == 1.0;
        if !last_ok {
            return Err(Error::Validation(
                "homogeneous matrix must have last row [0, .., 0, 1]".into(),
            ));
        }
        let t = Self { h };
        let det = t.det();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::SingularTransform { det });
        }
        Ok(t)
    }

    pub fn from_parts(a: &DMatrix<f64>, b: &[f64]) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: b.len(),
            });
        }
        let mut h = DMatrix::identity(d + 1, d + 1);
        h.view_mut((0, 0), (d, d)).copy_from(a);
        for i in 0..d {
            h[(i, d)] = b[i];
        }
        Self::from_homogeneous(h)
    }

    /// Builds from a row-major `(d+1)^2` buffer of homogeneous entries.
    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        let n = dim + 1;
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        Self::from_homogeneous(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn translation(b: &[f64]) -> Self {
        let d = b.len();
        let mut h = DMatrix::identity(d + 1, d + 1);
        for i in 0..d {
            h[(i, d)] = b[i];
        }
        Self { h }
    }

    /// `s ↦ s * factor` (isotropic).
    pub fn scaling(dim: usize, factor: f64) -> Result<Self> {
        let a = DMatrix::identity(dim, dim) * factor;
        Self::from_parts(&a, &vec![0.0; dim])
    }

    /// Planar rotation by `theta` radians about the origin.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let h = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        Self { h }
    }

    /// Planar rotation by `theta` about `center`.
    pub fn rotation_about(theta: f64, center: &[f64]) -> Self {
        let to = Self::translation(center);
        let back = Self::translation(&[-center[0], -center[1]]);
        to.compose_unchecked(&Self::rotation(theta))
            .compose_unchecked(&back)
    }

    /// One-dimensional `s ↦ a s + b`.
    pub fn affine_1d(a: f64, b: f64) -> Result<Self> {
        Self::from_row_major(1, &[a, b, 0.0, 1.0])
    }

    pub fn dim(&self) -> usize {
        self.h.nrows() - 1
    }

    pub fn homogeneous(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn row_major(&self) -> Vec<f64> {
        let n = self.h.nrows();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.h[(i, j)]);
            }
        }
        out
    }

    pub fn linear(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.h.view((0, 0), (d, d)).into_owned()
    }

    pub fn offset(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.h[(i, d)]).collect()
    }

    pub fn det(&self) -> f64 {
        let d = self.dim();
        match d {
            1 => self.h[(0, 0)],
            _ => self.h[(0, 0)] * self.h[(1, 1)] - self.h[(0, 1)] * self.h[(1, 0)],
        }
    }

    /// `A s + b`.
    pub fn apply(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: s.len(),
            });
        }
        let mut out = vec![0.0; s.len()];
        self.apply_into(s, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`apply`](Self::apply) for hot loops.
    #[inline]
    pub fn apply_into(&self, s: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = self.h[(i, d)];
            for j in 0..d {
                acc += self.h[(i, j)] * s[j];
            }
            out[i] = acc;
        }
    }

    /// `s ↦ self(other(s))`.
    pub fn compose(&self, other: &AffineTransform) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.compose_unchecked(other))
    }

    fn compose_unchecked(&self, other: &AffineTransform) -> Self {
        Self {
            h: &self.h * &other.h,
        }
    }

    /// Closed form `(A^{-1}, -A^{-1} b)`.
    pub fn inverse(&self) -> Result<Self> {
        let d = self.dim();
        let det = self.det();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::SingularTransform { det });
        }
        let a_inv = match d {
            1 => DMatrix::from_element(1, 1, 1.0 / self.h[(0, 0)]),
            _ => DMatrix::from_row_slice(
                2,
                2,
                &[
                    self.h[(1, 1)] / det,
                    -self.h[(0, 1)] / det,
                    -self.h[(1, 0)] / det,
                    self.h[(0, 0)] / det,
                ],
            ),
        };
        let b = self.offset();
        let nb: Vec<f64> = (0..d)
            .map(|i| -(0..d).map(|j| a_inv[(i, j)] * b[j]).sum::<f64>())
            .collect();
        let mut h = DMatrix::identity(d + 1, d + 1);
        h.view_mut((0, 0), (d, d)).copy_from(&a_inv);
        for i in 0..d {
            h[(i, d)] = nb[i];
        }
        Ok(Self { h })
    }

    /// Frobenius norm of `H_self H_other - I`, the inverse-consistency penalty.
    pub fn inverse_consistency_error(&self, other: &AffineTransform) -> f64 {
        let n = self.h.nrows();
        (&self.h * &other.h - DMatrix::<f64>::identity(n, n)).norm()
    }

    /// Frobenius distance between homogeneous matrices.
    pub fn distance(&self, other: &AffineTransform) -> f64 {
        (&self.h - &other.h).norm()
    }
}

/// Coordinates of an element of the affine Lie algebra.
#[derive(Clone, Debug, PartialEq)]
pub struct LieVector {
    dim: usize,
    delta: Vec<f64>,
}

impl LieVector {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            delta: vec![0.0; dim * (dim + 1)],
        }
    }

    pub fn new(dim: usize, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != dim * (dim + 1) {
            return Err(Error::DimensionMismatch {
                expected: dim * (dim + 1),
                got: delta.len(),
            });
        }
        Ok(Self { dim, delta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.delta
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            dim: self.dim,
            delta: self.delta.iter().map(|x| x * k).collect(),
        }
    }

    /// Trace of the linear block of the generator.
    pub fn linear_trace(&self) -> f64 {
        (0..self.dim).map(|i| self.delta[i * (self.dim + 1) + i]).sum()
    }

    /// The `(d+1) x (d+1)` generator matrix with zero last row.
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.dim + 1;
        let mut g = DMatrix::zeros(n, n);
        for i in 0..self.dim {
            for j in 0..n {
                g[(i, j)] = self.delta[i * n + j];
            }
        }
        g
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub(crate) fn expm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| x[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.125 {
        (norm1 / 0.125).log2().ceil() as u32
    } else {
        0
    };
    let y = x / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=30 {
        term = &term * &y / k as f64;
        sum += &term;
        if term.norm() <= 1e-18 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Principal logarithm of a real 2x2 matrix, via `log A = c0 I + c1 A`
/// with divided differences of `ln` over the eigenvalues.
fn log_2x2(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    if !(det > 0.0) {
        return Err(Error::NoRealLogarithm);
    }
    let mu = 0.5 * tr;
    let disc = mu * mu - det;
    let c1 = if disc >= 0.0 {
        // Real eigenvalues mu ± h, same sign since det > 0.
        if !(mu > 0.0) {
            return Err(Error::NoRealLogarithm);
        }
        let h = disc.sqrt();
        let z = h / mu;
        if z < 1e-4 {
            let z2 = z * z;
            (1.0 + z2 / 3.0 + z2 * z2 / 5.0) / mu
        } else {
            z.atanh() / h
        }
    } else {
        let w = (-disc).sqrt();
        w.atan2(mu) / w
    };
    let c0 = 0.5 * det.ln() - c1 * mu;
    Ok(DMatrix::identity(2, 2) * c0 + a * c1)
}

/// Principal matrix logarithm of `H`, flattened to a [`LieVector`].
///
/// The linear block uses the closed 2x2 (or scalar) form; the translation part
/// solves `b = G(L) w` with `G(L) = Σ L^k / (k+1)!`, read off the exponential
/// of the block matrix `[[L, I], [0, 0]]`.
pub fn lie_log(t: &AffineTransform) -> Result<LieVector> {
    let d = t.dim();
    let b = t.offset();
    match d {
        1 => {
            let a = t.h[(0, 0)];
            if !(a > 0.0) {
                return Err(Error::NoRealLogarithm);
            }
            let u = a - 1.0;
            let l = a.ln();
            // l / (a - 1) = ln(1+u)/u
            let ratio = if u.abs() < 1e-5 {
                1.0 - u / 2.0 + u * u / 3.0 - u * u * u / 4.0
            } else {
                u.ln_1p() / u
            };
            Ok(LieVector {
                dim: 1,
                delta: vec![l, b[0] * ratio],
            })
        }
        _ => {
            let l = log_2x2(&t.linear())?;
            let mut block = DMatrix::zeros(4, 4);
            block.view_mut((0, 0), (2, 2)).copy_from(&l);
            block[(0, 2)] = 1.0;
            block[(1, 3)] = 1.0;
            let e = expm(&block);
            let g = e.view((0, 2), (2, 2)).into_owned();
            let gdet = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
            if !(gdet.abs() > 1e-300) {
                return Err(Error::NoRealLogarithm);
            }
            let w0 = (g[(1, 1)] * b[0] - g[(0, 1)] * b[1]) / gdet;
            let w1 = (-g[(1, 0)] * b[0] + g[(0, 0)] * b[1]) / gdet;
            Ok(LieVector {
                dim: 2,
                delta: vec![l[(0, 0)], l[(0, 1)], w0, l[(1, 0)], l[(1, 1)], w1],
            })
        }
    }
}

pub fn lie_exp(delta: &LieVector) -> AffineTransform {
    let mut h = expm(&delta.generator());
    let d = delta.dim;
    for j in 0..d {
        h[(d, j)] = 0.0;
    }
    h[(d, d)] = 1.0;
    AffineTransform { h }
}

/// Matrix of `ad_delta = [delta, ·]` on the affine Lie algebra, in the
/// [`LieVector`] coordinate basis.
pub fn adjoint_matrix(delta: &LieVector) -> DMatrix<f64> {
    let d = delta.dim;
    let n = d + 1;
    let p = d * n;
    let g = delta.generator();
    let mut ad = DMatrix::zeros(p, p);
    for k in 0..p {
        let mut e = DMatrix::zeros(n, n);
        e[(k / n, k % n)] = 1.0;
        let c = &g * &e - &e * &g;
        for r in 0..p {
            ad[(r, k)] = c[(r / n, r % n)];
        }
    }
    ad
}

/// `λ / (1 - e^{-λ})`, continuous through 0.
fn jacobian_factor(z: Complex<f64>) -> Complex<f64> {
    if z.norm() < 1e-4 {
        let z2 = z * z;
        Complex::new(1.0, 0.0) + z / 2.0 + z2 / 12.0 - z2 * z2 / 720.0
    } else {
        z / (Complex::new(1.0, 0.0) - (-z).exp())
    }
}

/// `J(δ) = Π_{λ ∈ Sp(ad_δ), λ ≠ 0} λ / (1 - e^{-λ})`.
///
/// This is the reciprocal of the determinant of the left-trivialized
/// differential of `exp` at `δ`. Zero eigenvalues contribute a factor of 1.
pub fn proposal_jacobian(delta: &LieVector) -> f64 {
    log_proposal_jacobian(delta).exp()
}

pub fn log_proposal_jacobian(delta: &LieVector) -> f64 {
    if delta.norm() == 0.0 {
        return 0.0;
    }
    let eig = adjoint_matrix(delta).complex_eigenvalues();
    eig.iter().map(|&z| jacobian_factor(z).norm().ln()).sum()
}

/// Intrinsic mean: iterate `T̄ ← T̄ exp(mean_i log(T̄^{-1} T_i))`.
pub fn karcher_mean(
    transforms: &[AffineTransform],
    tol: f64,
    max_iter: usize,
) -> Result<AffineTransform> {
    let first = transforms
        .first()
        .ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    let d = first.dim();
    let n = transforms.len() as f64;
    let mut mean = first.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let inv = mean.inverse()?;
        let mut acc = vec![0.0; d * (d + 1)];
        for t in transforms {
            let l = lie_log(&inv.compose(t)?)?;
            for (a, x) in acc.iter_mut().zip(l.as_slice()) {
                *a += x / n;
            }
        }
        let step = LieVector { dim: d, delta: acc };
        residual = step.norm();
        if residual < tol {
            return Ok(mean);
        }
        mean = mean.compose(&lie_exp(&step))?;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Midpoint standardization `T̂_i = T_i ∘ T̄^{-1}`.
pub fn standardize(transforms: &[AffineTransform]) -> Result<Vec<AffineTransform>> {
    let mean = karcher_mean(transforms, KARCHER_TOL, KARCHER_MAX_ITER)?;
    let inv = mean.inverse()?;
    transforms.iter().map(|t| t.compose(&inv)).collect()
}
