//! Regular lattices and the activation maps that live on them.
//!
//! A lattice in dimension `d` is described by per-axis point counts, spacing
//! and origin. Linear indices are row-major: the last axis varies fastest.
//! Coordinates are physical, so axis `k` of lattice index `i_k` sits at
//! `origin[k] + i_k * spacing[k]`.
//!
//! Maps are stored on disk as plain CSV with a three-line header:
//!
//! ```text
//! dims,28,28
//! spacing,1,1
//! origin,0,0
//! <n0 lines of n1 comma-separated values>
//! ```
//!
//! One-dimensional maps carry all values on a single line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl Lattice {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::Validation(format!(
                "lattice dimension must be 1 or 2, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() || origin.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: spacing.len().min(origin.len()),
            });
        }
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::Validation("lattice axis with zero points".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::Validation("lattice spacing must be positive".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// One-dimensional lattice covering `[start, start + (n-1) * step]`.
    pub fn line(n: usize, step: f64, start: f64) -> Result<Self> {
        Self::new(vec![n], vec![step], vec![start])
    }

    /// Unit-spaced `rows x cols` pixel grid with origin at 0.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols], vec![1.0, 1.0], vec![0.0, 0.0])
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of a linear index.
    pub fn unravel(&self, idx: usize) -> [usize; 2] {
        match self.dims.len() {
            1 => [idx, 0],
            _ => [idx / self.dims[1], idx % self.dims[1]],
        }
    }

    pub fn ravel(&self, multi: [usize; 2]) -> usize {
        match self.dims.len() {
            1 => multi[0],
            _ => multi[0] * self.dims[1] + multi[1],
        }
    }

    /// Physical coordinates of a lattice point, written into `out` (len = dim).
    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        let multi = self.unravel(idx);
        for k in 0..self.dim() {
            out[k] = self.origin[k] + multi[k] as f64 * self.spacing[k];
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(idx, &mut p);
        p
    }

    /// All lattice points in linear-index order.
    pub fn locations(&self) -> LocationSet {
        let d = self.dim();
        let mut coords = vec![0.0; self.len() * d];
        for (i, chunk) in coords.chunks_mut(d).enumerate() {
            self.point_into(i, chunk);
        }
        LocationSet { dim: d, coords }
    }

    /// Continuous lattice coordinate (in index units) of a physical point along axis `k`.
    pub fn index_coord(&self, k: usize, x: f64) -> f64 {
        (x - self.origin[k]) / self.spacing[k]
    }

    /// Geometric center of the lattice's bounding box.
    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.origin[k] + 0.5 * (self.dims[k] - 1) as f64 * self.spacing[k])
            .collect()
    }

    /// Extent (max - min coordinate) along each axis.
    pub fn extent(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| (self.dims[k] - 1) as f64 * self.spacing[k])
            .collect()
    }

    /// Lattice enlarged by `margin` points on every side of every axis.
    pub fn enlarged(&self, margin: usize) -> Lattice {
        Lattice {
            dims: self.dims.iter().map(|&n| n + 2 * margin).collect(),
            spacing: self.spacing.clone(),
            origin: self
                .origin
                .iter()
                .zip(&self.spacing)
                .map(|(&o, &h)| o - margin as f64 * h)
                .collect(),
        }
    }
}

/// An ordered list of `d`-dimensional locations, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    dim: usize,
    coords: Vec<f64>,
}

impl LocationSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: coords.len(),
            });
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Ok(Self { dim, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> LocationSet {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        LocationSet {
            dim: self.dim,
            coords,
        }
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A scalar field sampled on a regular lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    lattice: Lattice,
    values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: values.len(),
            });
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(lattice: Lattice, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut p = vec![0.0; lattice.dim()];
        let values = (0..lattice.len())
            .map(|i| {
                lattice.point_into(i, &mut p);
                f(&p)
            })
            .collect();
        Self { lattice, values }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let join_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "dims,{}", join_u(self.lattice.dims()));
        let _ = writeln!(s, "spacing,{}", join_f(self.lattice.spacing()));
        let _ = writeln!(s, "origin,{}", join_f(self.lattice.origin()));
        let row = *self.lattice.dims().last().unwrap();
        for chunk in self.values.chunks(row) {
            let _ = writeln!(s, "{}", join_f(chunk));
        }
        s
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            path: source.to_string(),
            msg,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| fmt_err(format!("missing `{key}` header line")))?;
            let mut fields = line.split(',').map(|f| f.trim().to_string());
            match fields.next() {
                Some(k) if k == key => Ok(fields.collect()),
                other => Err(fmt_err(format!("expected `{key}`, found {other:?}"))),
            }
        };
        let dims = header("dims")?
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(format!("bad dims: {e}")))?;
        let parse_f = |v: Vec<String>, what: &str| {
            v.iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| fmt_err(format!("bad {what}: {e}")))
        };
        let spacing = parse_f(header("spacing")?, "spacing")?;
        let origin = parse_f(header("origin")?, "origin")?;
        let lattice = Lattice::new(dims, spacing, origin)?;
        let mut values = Vec::with_capacity(lattice.len());
        for line in lines {
            for f in line.split(',') {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| fmt_err(format!("bad value `{f}`: {e}")))?,
                );
            }
        }
        if values.len() != lattice.len() {
            return Err(fmt_err(format!(
                "expected {} values, found {}",
                lattice.len(),
                values.len()
            )));
        }
        Ok(Self { lattice, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_csv(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Pearson correlation between two maps' values.
    pub fn correlation(&self, other: &ActivationMap) -> f64 {
        pearson(&self.values, &other.values)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_indexing_is_row_major() {
        let lat = Lattice::grid(3, 4).unwrap();
        assert_eq!(lat.len(), 12);
        assert_eq!(lat.unravel(5), [1, 1]);
        assert_eq!(lat.ravel([2, 3]), 11);
        assert_eq!(lat.point(6), vec![1.0, 2.0]);
    }

    #[test]
    fn enlarged_lattice_counts() {
        let lat = Lattice::grid(28, 28).unwrap();
        let big = lat.enlarged(5);
        assert_eq!(big.dims(), &[38, 38]);
        assert_eq!(big.origin(), &[-5.0, -5.0]);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let lat = Lattice::new(vec![2, 3], vec![0.5, 0.25], vec![-1.0, 3.0]).unwrap();
        let map = ActivationMap::new(lat, vec![0.1, 1.0 / 3.0, -2.5e-17, 4.0, 5.5, 1e300]).unwrap();
        let back = ActivationMap::from_csv(&map.to_csv(), "mem").unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn csv_rejects_wrong_count() {
        let text = "dims,3\nspacing,1\norigin,0\n1,2\n";
        assert!(matches!(
            ActivationMap::from_csv(text, "mem"),
            Err(Error::Format { .. })
        ));
    }
}
