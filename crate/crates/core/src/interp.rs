//! Catmull-Rom cubic interpolation of lattice maps.

use crate::map::{ActivationMap, LocationSet};

/// How samples beyond the lattice are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Boundary {
    /// The map is taken to be zero outside the lattice. Interpolation then
    /// decays smoothly to zero within two cells of the edge.
    #[default]
    Zero,
    /// Queries are clamped to the lattice and stencils replicate edge values.
    Clamp,
}

impl std::str::FromStr for Boundary {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Boundary::Zero),
            "clamp" => Ok(Boundary::Clamp),
            other => Err(format!("unknown boundary policy '{other}' (expected zero|clamp)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InterpolationPolicy {
    pub boundary: Boundary,
}

#[inline]
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ]
}

/// Stencil start index and weights along one axis, or `None` when the
/// whole stencil falls outside a zero-filled map.
#[inline]
fn stencil(u: f64, n: usize, boundary: Boundary) -> Option<(isize, [f64; 4])> {
    let u = match boundary {
        Boundary::Zero => {
            if !(u > -2.0 && u < n as f64 + 1.0) {
                return None;
            }
            u
        }
        Boundary::Clamp => u.clamp(0.0, (n - 1) as f64),
    };
    let i = u.floor();
    Some((i as isize - 1, catmull_rom(u - i)))
}

#[inline]
fn fetch(idx: isize, n: usize, boundary: Boundary) -> Option<usize> {
    if idx >= 0 && (idx as usize) < n {
        Some(idx as usize)
    } else {
        match boundary {
            Boundary::Zero => None,
            Boundary::Clamp => Some(idx.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Value of `map` at a single physical location.
pub fn interpolate_at(map: &ActivationMap, p: &[f64], policy: InterpolationPolicy) -> f64 {
    let lat = map.lattice();
    let v = map.values();
    let b = policy.boundary;
    match lat.dim() {
        1 => {
            let n = lat.dims()[0];
            let Some((i0, w)) = stencil(lat.index_coord(0, p[0]), n, b) else {
                return 0.0;
            };
            (0..4)
                .filter_map(|a| fetch(i0 + a as isize, n, b).map(|j| w[a] * v[j]))
                .sum()
        }
        _ => {
            let (nr, nc) = (lat.dims()[0], lat.dims()[1]);
            let Some((r0, wr)) = stencil(lat.index_coord(0, p[0]), nr, b) else {
                return 0.0;
            };
            let Some((c0, wc)) = stencil(lat.index_coord(1, p[1]), nc, b) else {
                return 0.0;
            };
            let mut acc = 0.0;
            for (a, wa) in wr.iter().enumerate() {
                let Some(r) = fetch(r0 + a as isize, nr, b) else {
                    continue;
                };
                let row = &v[r * nc..(r + 1) * nc];
                let mut inner = 0.0;
                for (c, wc) in wc.iter().enumerate() {
                    if let Some(j) = fetch(c0 + c as isize, nc, b) {
                        inner += wc * row[j];
                    }
                }
                acc += wa * inner;
            }
            acc
        }
    }
}

/// Values of `map` at every point of `points`.
pub fn interpolate(map: &ActivationMap, points: &LocationSet, policy: InterpolationPolicy) -> Vec<f64> {
    points.iter().map(|p| interpolate_at(map, p, policy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::Lattice;

    const ZERO: InterpolationPolicy = InterpolationPolicy {
        boundary: Boundary::Zero,
    };
    const CLAMP: InterpolationPolicy = InterpolationPolicy {
        boundary: Boundary::Clamp,
    };

    fn line_map(f: impl Fn(f64) -> f64) -> ActivationMap {
        ActivationMap::from_fn(Lattice::line(11, 1.0, 0.0).unwrap(), |p| f(p[0]))
    }

    #[test]
    fn lattice_points_are_reproduced() {
        let m = ActivationMap::from_fn(Lattice::grid(5, 6).unwrap(), |p| (p[0] * 1.7 + p[1]).sin());
        for i in 0..m.lattice().len() {
            let p = m.lattice().point(i);
            assert_eq!(interpolate_at(&m, &p, ZERO), m.values()[i]);
        }
    }

    #[test]
    fn linear_field_interior() {
        let m = line_map(|s| 3.0 * s + 1.0);
        assert!((interpolate_at(&m, &[2.5], ZERO) - 8.5).abs() < 1e-12);
        let q = [1.13, 4.5, 8.99];
        for x in q {
            assert!((interpolate_at(&m, &[x], ZERO) - (3.0 * x + 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn cubic_field_interior() {
        let f = |s: f64| 0.1 * s * s * s - s * s + 2.0;
        let m = line_map(f);
        // Catmull-Rom reproduces quadratics exactly on interior cells.
        let g = |s: f64| s * s - 3.0 * s;
        let mq = line_map(g);
        for x in [1.25, 3.7, 6.01] {
            assert!((interpolate_at(&mq, &[x], ZERO) - g(x)).abs() < 1e-10);
            assert!((interpolate_at(&m, &[x], ZERO) - f(x)).abs() < 0.05);
        }
    }

    #[test]
    fn fill_zero_far_outside() {
        let m = line_map(|s| s + 5.0);
        assert_eq!(interpolate_at(&m, &[100.0], ZERO), 0.0);
        assert_eq!(interpolate_at(&m, &[-3.0], ZERO), 0.0);
        assert_eq!(interpolate_at(&m, &[f64::NAN], ZERO), 0.0);
        assert!((interpolate_at(&m, &[100.0], CLAMP) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn separable_product() {
        let lat = Lattice::new(vec![7, 9], vec![0.5, 1.0], vec![-1.0, 2.0]).unwrap();
        let f = |x: f64| (x * 1.3).cos();
        let g = |y: f64| 0.2 * y * y - y;
        let m2 = ActivationMap::from_fn(lat.clone(), |p| f(p[0]) * g(p[1]));
        let mx = ActivationMap::from_fn(Lattice::line(7, 0.5, -1.0).unwrap(), |p| f(p[0]));
        let my = ActivationMap::from_fn(Lattice::line(9, 1.0, 2.0).unwrap(), |p| g(p[0]));
        for p in [[0.1, 3.3], [-1.4, 9.7], [1.9, 5.5]] {
            for pol in [ZERO, CLAMP] {
                let a = interpolate_at(&m2, &p, pol);
                let b = interpolate_at(&mx, &p[..1], pol) * interpolate_at(&my, &p[1..], pol);
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn boundary_parse() {
        assert_eq!("clamp".parse::<Boundary>().unwrap(), Boundary::Clamp);
        assert!("wrap".parse::<Boundary>().is_err());
    }
}
