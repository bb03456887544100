//! Exponential-kernel Gaussian-process machinery.
//!
//! Two routes are provided for the same densities: a dense route through
//! `nalgebra` Cholesky factorizations (the exact oracle) and the
//! nearest-neighbor route used by the sampler, which works with small
//! neighbor-sized systems and unit-variance weights. Because the jitter and
//! the conditional-variance floor are both proportional to `alpha`, the
//! kriging weights depend only on `rho` and the conditional variances scale
//! linearly in `alpha`; [`Conditionals`] stores the `alpha = 1` quantities.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::map::{distance, Lattice, LocationSet};

/// Diagonal jitter, relative to `alpha`.
pub const JITTER: f64 = 1e-10;
/// Floor on conditional variances, relative to `alpha`.
pub const F_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceParams {
    pub alpha: f64,
    pub rho: f64,
}

impl CovarianceParams {
    pub fn new(alpha: f64, rho: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(rho > 0.0) || !alpha.is_finite() || !rho.is_finite() {
            return Err(Error::Validation(format!(
                "covariance parameters must be positive (alpha={alpha}, rho={rho})"
            )));
        }
        Ok(Self { alpha, rho })
    }
}

/// `alpha * exp(-rho * |s - t|)`.
pub fn exp_cov(s: &[f64], t: &[f64], params: CovarianceParams) -> f64 {
    params.alpha * (-params.rho * distance(s, t)).exp()
}

fn cov_matrix(a: &LocationSet, b: &LocationSet, params: CovarianceParams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| exp_cov(a.point(i), b.point(j), params))
}

fn jittered(a: &LocationSet, params: CovarianceParams) -> DMatrix<f64> {
    let mut c = cov_matrix(a, a, params);
    for i in 0..a.len() {
        c[(i, i)] += JITTER * params.alpha;
    }
    c
}

/// Dense kriging of `target` from `source`: `P = C^T Σ^{-1}`, `S = Σ_T - P Σ P^T`.
pub fn dense_kriging(
    source: &LocationSet,
    target: &LocationSet,
    params: CovarianceParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sigma = jittered(source, params);
    let chol = sigma.clone().cholesky().ok_or(Error::IllConditioned)?;
    let cross = cov_matrix(source, target, params); // V x T
    let p = chol.solve(&cross).transpose(); // T x V
    let sigma_t = cov_matrix(target, target, params);
    let s = &sigma_t - &p * &cross;
    let s = (&s + s.transpose()) * 0.5;
    Ok((p, s))
}

/// Exact multivariate-normal log density of `values` under the jittered GP.
pub fn dense_log_density(
    values: &[f64],
    locations: &LocationSet,
    params: CovarianceParams,
) -> Result<f64> {
    let sigma = jittered(locations, params);
    let chol = sigma.cholesky().ok_or(Error::IllConditioned)?;
    let x = DVector::from_column_slice(values);
    let sol = chol.solve(&x);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (values.len() as f64 * LN_2PI + logdet + x.dot(&sol)))
}

fn nearest_by<F: Fn(usize) -> f64>(candidates: usize, k: usize, dist: F) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = (0..candidates).map(|j| (dist(j), j)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|(_, j)| j).collect()
}

/// For each site `l`, its `min(m, l)` nearest predecessors in `{0, .., l-1}`,
/// nearest first, ties broken by smaller index.
pub fn build_ordered_neighbor_sets(sites: &LocationSet, m: usize) -> Vec<Vec<usize>> {
    (0..sites.len())
        .map(|l| {
            let p = sites.point(l);
            nearest_by(l, m.min(l), |j| distance(p, sites.point(j)))
        })
        .collect()
}

/// Precomputed `m`-nearest-neighbor sets in the template lattice for every
/// point of an enlarged lattice, allowing constant-time neighbor resolution
/// for transformed sites.
#[derive(Clone, Debug)]
pub struct NeighborLibrary {
    template: Lattice,
    grid: Lattice,
    k: usize,
    neighbors: Vec<u32>,
}

/// Builds the library over `template` enlarged by `margin` points per side.
pub fn build_neighbor_library(template: &Lattice, margin: usize, m: usize) -> NeighborLibrary {
    let grid = template.enlarged(margin);
    let sites = template.locations();
    let k = m.min(sites.len());
    let mut neighbors = Vec::with_capacity(grid.len() * k);
    let mut p = vec![0.0; grid.dim()];
    for g in 0..grid.len() {
        grid.point_into(g, &mut p);
        let set = nearest_by(sites.len(), k, |j| distance(&p, sites.point(j)));
        neighbors.extend(set.into_iter().map(|j| j as u32));
    }
    NeighborLibrary {
        template: template.clone(),
        grid,
        k,
        neighbors,
    }
}

impl NeighborLibrary {
    pub fn grid(&self) -> &Lattice {
        &self.grid
    }

    pub fn template(&self) -> &Lattice {
        &self.template
    }

    /// Points added on each side of the template lattice.
    pub fn margin(&self) -> usize {
        (self.grid.dims()[0] - self.template.dims()[0]) / 2
    }

    /// Number of neighbors per entry, `min(m, V)`.
    pub fn set_size(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn entry(&self, g: usize) -> &[u32] {
        &self.neighbors[g * self.k..(g + 1) * self.k]
    }

    /// Index in the enlarged grid of the lattice point closest to `p`
    /// (coordinate-wise rounding, ties upward).
    pub fn locate(&self, p: &[f64]) -> Result<usize> {
        let mut multi = [0usize; 2];
        for k in 0..self.grid.dim() {
            let r = (self.grid.index_coord(k, p[k]) + 0.5).floor();
            if !(r >= 0.0 && r < self.grid.dims()[k] as f64) {
                return Err(Error::OutOfLibraryBounds(p.to_vec()));
            }
            multi[k] = r as usize;
        }
        Ok(self.grid.ravel(multi))
    }

    /// Neighbor set (template indices) for an arbitrary location.
    pub fn lookup(&self, p: &[f64]) -> Result<&[u32]> {
        Ok(self.entry(self.locate(p)?))
    }

    /// Cholesky factors of the unit-variance neighbor covariance of every
    /// library entry at decay `rho`.
    pub fn factors(&self, rho: f64) -> Result<LibraryFactors> {
        let sites = self.template.locations();
        let k = self.k;
        let mut chol = vec![0.0; self.len() * k * k];
        for (g, block) in chol.chunks_mut(k * k).enumerate() {
            fill_neighbor_cov(block, self.entry(g), &sites, rho);
            if !linalg::cholesky_in_place(block, k) {
                return Err(Error::IllConditioned);
            }
        }
        Ok(LibraryFactors { rho, k, chol })
    }
}

/// Per-entry Cholesky factors for a [`NeighborLibrary`] at one `rho`.
#[derive(Clone, Debug)]
pub struct LibraryFactors {
    rho: f64,
    k: usize,
    chol: Vec<f64>,
}

impl LibraryFactors {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn factor(&self, g: usize) -> &[f64] {
        &self.chol[g * self.k * self.k..(g + 1) * self.k * self.k]
    }
}

fn fill_neighbor_cov(block: &mut [f64], nbrs: &[u32], sites: &LocationSet, rho: f64) {
    let k = nbrs.len();
    for a in 0..k {
        for b in 0..=a {
            let v = if a == b {
                1.0 + JITTER
            } else {
                (-rho * distance(sites.point(nbrs[a] as usize), sites.point(nbrs[b] as usize))).exp()
            };
            block[a * k + b] = v;
            block[b * k + a] = v;
        }
    }
}

/// Kriging weights `B` and conditional variance `F` of one site given a
/// neighbor set.
#[derive(Clone, Debug, PartialEq)]
pub struct NngpWeights {
    pub b: Vec<f64>,
    pub f: f64,
}

/// Reference computation of `(B, F)` for `target` given `neighbors`.
pub fn nngp_weights(
    target: &[f64],
    neighbors: &LocationSet,
    params: CovarianceParams,
) -> Result<NngpWeights> {
    let k = neighbors.len();
    let var = params.alpha * (1.0 + JITTER);
    if k == 0 {
        return Ok(NngpWeights { b: vec![], f: var });
    }
    let c_n = jittered(neighbors, params);
    let chol = c_n.cholesky().ok_or(Error::IllConditioned)?;
    let c = DVector::from_iterator(k, neighbors.iter().map(|s| exp_cov(target, s, params)));
    let b = chol.solve(&c);
    let f = (var - b.dot(&c)).max(F_FLOOR * params.alpha);
    Ok(NngpWeights {
        b: b.iter().cloned().collect(),
        f,
    })
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// `Σ_l log N(X(s_l) | B_l X(N_l), F_l)` with neighbor sets given explicitly.
pub fn nngp_log_density(
    values: &[f64],
    sites: &LocationSet,
    sets: &[Vec<usize>],
    params: CovarianceParams,
) -> Result<f64> {
    if values.len() != sites.len() || sets.len() != sites.len() {
        return Err(Error::DimensionMismatch {
            expected: sites.len(),
            got: values.len(),
        });
    }
    let mut total = 0.0;
    for (l, set) in sets.iter().enumerate() {
        let w = nngp_weights(sites.point(l), &sites.select(set), params)?;
        let mean: f64 = w.b.iter().zip(set).map(|(b, &j)| b * values[j]).sum();
        total += normal_logpdf(values[l], mean, w.f);
    }
    Ok(total)
}

/// Unit-variance NNGP conditionals for a collection of sites, in CSR layout.
/// Each site `i` has neighbors (template indices), weights `B_i`, and a
/// conditional variance `F̂_i`; at spatial variance `alpha` the variance is
/// `alpha * F̂_i`.
#[derive(Clone, Debug, Default)]
pub struct Conditionals {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    weights: Vec<f64>,
    fvar: Vec<f64>,
}

impl Conditionals {
    pub fn len(&self) -> usize {
        self.fvar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fvar.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn fvar(&self, i: usize) -> f64 {
        self.fvar[i]
    }

    /// Conditional mean `B_i X(N_i)`.
    #[inline]
    pub fn mean(&self, i: usize, template: &[f64]) -> f64 {
        self.neighbors(i)
            .iter()
            .zip(self.weights(i))
            .map(|(&j, w)| w * template[j as usize])
            .sum()
    }

    /// `Σ_i (v_i - B_i X(N_i))^2 / F̂_i`.
    pub fn scaled_sq_residuals(&self, values: &[f64], template: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| {
                let r = values[i] - self.mean(i, template);
                r * r / self.fvar[i]
            })
            .sum()
    }

    pub fn sum_ln_fvar(&self) -> f64 {
        self.fvar.iter().map(|f| f.ln()).sum()
    }

    /// `Σ_i log N(v_i | B_i X(N_i), alpha F̂_i)`.
    pub fn log_density(&self, values: &[f64], template: &[f64], alpha: f64) -> f64 {
        let n = self.len() as f64;
        -0.5 * (n * (LN_2PI + alpha.ln())
            + self.sum_ln_fvar()
            + self.scaled_sq_residuals(values, template) / alpha)
    }

    fn push(&mut self, nbrs: &[u32], weights: &[f64], f: f64) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.neighbors.extend_from_slice(nbrs);
        self.weights.extend_from_slice(weights);
        self.fvar.push(f);
        self.offsets.push(self.neighbors.len());
    }

    fn with_capacity(n: usize, k: usize) -> Self {
        let mut c = Self {
            offsets: Vec::with_capacity(n + 1),
            neighbors: Vec::with_capacity(n * k),
            weights: Vec::with_capacity(n * k),
            fvar: Vec::with_capacity(n),
        };
        c.offsets.push(0);
        c
    }

    /// Conditionals of the template sites on their ordered predecessor sets.
    pub fn for_template(sites: &LocationSet, sets: &[Vec<usize>], rho: f64) -> Result<Self> {
        let kmax = sets.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = Self::with_capacity(sites.len(), kmax);
        let mut block = vec![0.0; kmax * kmax];
        let mut w = vec![0.0; kmax];
        let mut nbrs = Vec::with_capacity(kmax);
        for (l, set) in sets.iter().enumerate() {
            nbrs.clear();
            nbrs.extend(set.iter().map(|&j| j as u32));
            let k = nbrs.len();
            let block = &mut block[..k * k];
            fill_neighbor_cov(block, &nbrs, sites, rho);
            if !linalg::cholesky_in_place(block, k) {
                return Err(Error::IllConditioned);
            }
            let f = solve_weights(block, &nbrs, sites, sites.point(l), rho, &mut w[..k]);
            out.push(&nbrs, &w[..k], f);
        }
        Ok(out)
    }

    /// Conditionals of arbitrary points, each conditioned on the library
    /// neighbor set of its nearest enlarged-lattice point.
    pub fn for_points(
        points: &LocationSet,
        library: &NeighborLibrary,
        factors: &LibraryFactors,
    ) -> Result<Self> {
        let sites = library.template.locations();
        let k = library.k;
        let mut out = Self::with_capacity(points.len(), k);
        let mut w = vec![0.0; k];
        for p in points.iter() {
            let g = library.locate(p)?;
            let nbrs = library.entry(g);
            let f = solve_weights(factors.factor(g), nbrs, &sites, p, factors.rho, &mut w);
            out.push(nbrs, &w, f);
        }
        Ok(out)
    }
}

/// Given the Cholesky factor of the neighbor covariance, writes `B` into `w`
/// and returns the floored unit-variance `F`.
fn solve_weights(
    chol: &[f64],
    nbrs: &[u32],
    sites: &LocationSet,
    target: &[f64],
    rho: f64,
    w: &mut [f64],
) -> f64 {
    let k = nbrs.len();
    if k == 0 {
        return 1.0 + JITTER;
    }
    let mut c = [0.0f64; 64];
    let c = if k <= 64 {
        &mut c[..k]
    } else {
        // Large neighborhoods only occur in oracle-scale tests.
        return solve_weights_large(chol, nbrs, sites, target, rho, w);
    };
    for (a, &j) in nbrs.iter().enumerate() {
        c[a] = (-rho * distance(target, sites.point(j as usize))).exp();
    }
    w.copy_from_slice(c);
    linalg::forward_solve(chol, k, w);
    linalg::backward_solve(chol, k, w);
    let quad: f64 = w.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
    (1.0 + JITTER - quad).max(F_FLOOR)
}

fn solve_weights_large(
    chol: &[f64],
    nbrs: &[u32],
    sites: &LocationSet,
    target: &[f64],
    rho: f64,
    w: &mut [f64],
) -> f64 {
    let k = nbrs.len();
    let c: Vec<f64> = nbrs
        .iter()
        .map(|&j| (-rho * distance(target, sites.point(j as usize))).exp())
        .collect();
    w.copy_from_slice(&c);
    linalg::forward_solve(chol, k, w);
    linalg::backward_solve(chol, k, w);
    let quad: f64 = w.iter().zip(&c).map(|(a, b)| a * b).sum();
    (1.0 + JITTER - quad).max(F_FLOOR)
}

/// Reverse dependency index: for each template site `s`, the entries `t`
/// (of any conditional set) whose neighbor set contains `s`, together with
/// the weight position inside `t`'s neighbor list.
#[derive(Clone, Debug, Default)]
pub struct ReverseIndex {
    offsets: Vec<usize>,
    /// (set id, entry index, position within the entry's neighbors)
    entries: Vec<(u32, u32, u32)>,
}

impl ReverseIndex {
    pub fn build(n_template: usize, sets: &[&Conditionals]) -> Self {
        let mut counts = vec![0usize; n_template + 1];
        for c in sets {
            for &j in &c.neighbors {
                counts[j as usize + 1] += 1;
            }
        }
        for i in 0..n_template {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut entries = vec![(0u32, 0u32, 0u32); counts[n_template]];
        for (sid, c) in sets.iter().enumerate() {
            for t in 0..c.len() {
                for (pos, &j) in c.neighbors(t).iter().enumerate() {
                    let slot = &mut fill[j as usize];
                    entries[*slot] = (sid as u32, t as u32, pos as u32);
                    *slot += 1;
                }
            }
        }
        Self {
            offsets: counts,
            entries,
        }
    }

    pub fn dependents(&self, s: usize) -> &[(u32, u32, u32)] {
        &self.entries[self.offsets[s]..self.offsets[s + 1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(alpha: f64, rho: f64) -> CovarianceParams {
        CovarianceParams::new(alpha, rho).unwrap()
    }

    fn line(points: &[f64]) -> LocationSet {
        LocationSet::new(1, points.to_vec()).unwrap()
    }

    #[test]
    fn exp_cov_examples() {
        assert_eq!(exp_cov(&[1.0, 2.0], &[1.0, 2.0], params(2.0, 1.0)), 2.0);
        assert!((exp_cov(&[0.0], &[1.0], params(1.0, 1.0)) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let t = [rng.random::<f64>(), rng.random::<f64>()];
            let p = params(1.3, 0.7);
            assert_eq!(exp_cov(&s, &t, p), exp_cov(&t, &s, p));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CovarianceParams::new(0.0, 1.0).is_err());
        assert!(CovarianceParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn kriging_at_observed_sites_interpolates() {
        let src = line(&[0.0, 1.0, 2.5]);
        let tgt = line(&[1.0, 0.0]);
        let (p, s) = dense_kriging(&src, &tgt, params(1.0, 0.8)).unwrap();
        assert!((p[(0, 1)] - 1.0).abs() < 1e-8 && p[(0, 0)].abs() < 1e-8);
        assert!((p[(1, 0)] - 1.0).abs() < 1e-8);
        assert!(s.abs().max() < 1e-8);
    }

    #[test]
    fn kriging_two_point_closed_form() {
        let (p, s) = dense_kriging(&line(&[0.0]), &line(&[1.0]), params(1.0, 1.0)).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((p[(0, 0)] - e1).abs() < 1e-9);
        assert!((s[(0, 0)] - (1.0 - (-2.0f64).exp())).abs() < 1e-9);
    }

    #[test]
    fn kriging_independence_limit() {
        let (p, s) = dense_kriging(&line(&[0.0, 1.0]), &line(&[0.5, 3.0]), params(2.0, 200.0)).unwrap();
        assert!(p.abs().max() < 1e-20);
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12 && (s[(1, 1)] - 2.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-20);
    }

    #[test]
    fn ordered_sets_small_cases() {
        let sites = line(&[0.0, 1.0, 2.0, 3.0]);
        let sets = build_ordered_neighbor_sets(&sites, 10);
        assert!(sets[0].is_empty());
        assert_eq!(sets[2], vec![1, 0]);
        let sets = build_ordered_neighbor_sets(&sites, 1);
        assert_eq!(sets[3], vec![2]);
    }

    #[test]
    fn ordered_sets_match_exhaustive_sort_on_grid() {
        let sites = Lattice::grid(5, 5).unwrap().locations();
        let sets = build_ordered_neighbor_sets(&sites, 3);
        let l = 12; // site (2, 2)
        let mut all: Vec<(f64, usize)> = (0..l)
            .map(|j| (distance(sites.point(l), sites.point(j)), j))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<usize> = all.iter().take(3).map(|x| x.1).collect();
        // (1,2)=7 and (2,1)=11 at 1, then (1,1)=6 at sqrt 2 before (1,3)=8.
        assert_eq!(expect, vec![7, 11, 6]);
        assert_eq!(sets[l], expect);
    }

    #[test]
    fn library_margin_zero_is_self() {
        let lat = Lattice::grid(4, 3).unwrap();
        let lib = build_neighbor_library(&lat, 0, 2);
        assert_eq!(lib.len(), 12);
        for g in 0..lib.len() {
            assert_eq!(lib.entry(g)[0] as usize, g);
        }
    }

    #[test]
    fn library_1d_outside_point() {
        let lat = Lattice::line(10, 1.0, 0.0).unwrap();
        let lib = build_neighbor_library(&lat, 2, 2);
        assert_eq!(lib.len(), 14);
        let g = lib.locate(&[-1.0]).unwrap();
        assert_eq!(lib.entry(g), &[0, 1]);
    }

    #[test]
    fn library_counts_2d() {
        let lat = Lattice::grid(28, 28).unwrap();
        let lib = build_neighbor_library(&lat, 5, 10);
        assert_eq!(lib.grid().dims(), &[38, 38]);
        assert_eq!(lib.len(), 38 * 38);
        assert_eq!(lib.set_size(), 10);
    }

    #[test]
    fn lookup_rounds_to_nearest_point() {
        let lat = Lattice::grid(6, 6).unwrap();
        let lib = build_neighbor_library(&lat, 2, 4);
        let g = lib.locate(&[2.6, 2.6]).unwrap();
        assert_eq!(lib.grid().point(g), vec![3.0, 3.0]);
        assert_eq!(lib.lookup(&[2.6, 2.6]).unwrap(), lib.lookup(&[3.0, 3.0]).unwrap());
        // half-up tie
        assert_eq!(lib.grid().point(lib.locate(&[2.5, 1.5]).unwrap()), vec![3.0, 2.0]);
        assert!(matches!(
            lib.lookup(&[9.0, 0.0]),
            Err(Error::OutOfLibraryBounds(_))
        ));
        assert!(matches!(
            lib.lookup(&[-2.6, 0.0]),
            Err(Error::OutOfLibraryBounds(_))
        ));
    }

    #[test]
    fn lookup_respects_spacing() {
        let lat = Lattice::line(201, 0.05, -5.0).unwrap();
        let lib = build_neighbor_library(&lat, 5, 10);
        let g = lib.locate(&[0.012]).unwrap();
        assert!((lib.grid().point(g)[0] - 0.0).abs() < 1e-12);
        // last library point is 5.25; rounding admits up to half a spacing beyond it
        assert!(lib.locate(&[5.28]).is_err());
        assert!(lib.locate(&[5.27]).is_ok());
    }

    #[test]
    fn weights_edge_cases() {
        let p = params(1.7, 0.9);
        let w = nngp_weights(&[0.3], &line(&[]), p).unwrap();
        assert!(w.b.is_empty());
        assert!((w.f - 1.7).abs() < 1e-8);

        let r = 0.6;
        let w = nngp_weights(&[0.0], &line(&[r]), params(1.0, 1.0)).unwrap();
        assert!((w.b[0] - (-r).exp()).abs() < 1e-9);
        assert!((w.f - (1.0 - (-2.0 * r).exp())).abs() < 1e-9);
    }

    #[test]
    fn weights_with_full_neighborhood_match_dense_row() {
        let sites = Lattice::grid(4, 4).unwrap().locations();
        let target = [1.3, 2.2];
        let p = params(0.8, 0.7);
        let w = nngp_weights(&target, &sites, p).unwrap();
        let (pk, sk) = dense_kriging(&sites, &LocationSet::new(2, target.to_vec()).unwrap(), p).unwrap();
        for j in 0..sites.len() {
            assert!((w.b[j] - pk[(0, j)]).abs() < 1e-8);
        }
        assert!((w.f - sk[(0, 0)]).abs() < 1e-8);
    }

    #[test]
    fn log_density_single_site() {
        let sites = line(&[0.0]);
        let sets = build_ordered_neighbor_sets(&sites, 3);
        let ld = nngp_log_density(&[0.0], &sites, &sets, params(1.0, 1.0)).unwrap();
        assert!((ld + 0.5 * LN_2PI).abs() < 1e-9);
    }

    #[test]
    fn full_neighborhood_density_is_exact() {
        let sites = Lattice::grid(3, 4).unwrap().locations();
        let sets = build_ordered_neighbor_sets(&sites, sites.len() - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..sites.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        for alpha in [0.5, 1.0, 2.0] {
            let p = params(alpha, 0.6);
            let a = nngp_log_density(&x, &sites, &sets, p).unwrap();
            let b = dense_log_density(&x, &sites, p).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn doubling_alpha_shift_matches_dense() {
        let sites = line(&[0.0, 0.4, 1.1, 1.5, 2.9]);
        let sets = build_ordered_neighbor_sets(&sites, 4);
        let x = [0.3, -0.1, 0.7, 0.2, -0.4];
        let d1 = nngp_log_density(&x, &sites, &sets, params(1.0, 1.2)).unwrap();
        let d2 = nngp_log_density(&x, &sites, &sets, params(2.0, 1.2)).unwrap();
        let e1 = dense_log_density(&x, &sites, params(1.0, 1.2)).unwrap();
        let e2 = dense_log_density(&x, &sites, params(2.0, 1.2)).unwrap();
        assert!(((d2 - d1) - (e2 - e1)).abs() < 1e-8);
        // log N(x | 0, 2Σ) - log N(x | 0, Σ) = -V/2 ln 2 + Q/4, with Q = xᵀΣ⁻¹x = -2(e1 + c).
        let v = x.len() as f64;
        let c = 0.5 * v * LN_2PI;
        let sigma = jittered(&sites, params(1.0, 1.2));
        let logdet = sigma.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        let q = -2.0 * (e1 + c) - logdet;
        assert!(((e2 - e1) - (-0.5 * v * 2f64.ln() + 0.25 * q)).abs() < 1e-9);
    }

    #[test]
    fn conditionals_fast_path_matches_reference() {
        let lat = Lattice::grid(6, 5).unwrap();
        let sites = lat.locations();
        let sets = build_ordered_neighbor_sets(&sites, 5);
        let rho = 0.9;
        let cond = Conditionals::for_template(&sites, &sets, rho).unwrap();
        for l in 0..sites.len() {
            let w = nngp_weights(sites.point(l), &sites.select(&sets[l]), params(1.0, rho)).unwrap();
            assert!((cond.fvar(l) - w.f).abs() < 1e-12);
            for (a, b) in cond.weights(l).iter().zip(&w.b) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let lib = build_neighbor_library(&lat, 3, 6);
        let factors = lib.factors(rho).unwrap();
        let pts = LocationSet::new(2, vec![1.3, 2.7, -2.2, 0.1, 4.49, 6.2]).unwrap();
        let tc = Conditionals::for_points(&pts, &lib, &factors).unwrap();
        for i in 0..pts.len() {
            let nb: Vec<usize> = lib.lookup(pts.point(i)).unwrap().iter().map(|&j| j as usize).collect();
            let w = nngp_weights(pts.point(i), &sites.select(&nb), params(1.0, rho)).unwrap();
            assert!((tc.fvar(i) - w.f).abs() < 1e-12);
            for (a, b) in tc.weights(i).iter().zip(&w.b) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conditional_variances_bounded() {
        let lat = Lattice::grid(5, 5).unwrap();
        let sites = lat.locations();
        let sets = build_ordered_neighbor_sets(&sites, 4);
        let cond = Conditionals::for_template(&sites, &sets, 2.5).unwrap();
        for l in 0..cond.len() {
            assert!(cond.fvar(l) > 0.0 && cond.fvar(l) <= 1.0 + 1e-12 + JITTER);
        }
    }

    #[test]
    fn reverse_index_lists_dependents() {
        let sites = line(&[0.0, 1.0, 2.0, 3.0]);
        let sets = build_ordered_neighbor_sets(&sites, 2);
        let cond = Conditionals::for_template(&sites, &sets, 1.0).unwrap();
        let rev = ReverseIndex::build(4, &[&cond]);
        // site 1 is a neighbor of sites 2 and 3
        let deps: Vec<u32> = rev.dependents(1).iter().map(|e| e.1).collect();
        assert_eq!(deps, vec![2, 3]);
        assert!(rev.dependents(3).is_empty());
    }
}
