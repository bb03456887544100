use groupreg::transforms::{lie_exp, lie_log, LieVector};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Left-trivialized chart around `exp(δ)`: `u ↦ log(exp(-δ) exp(δ + u))`.
fn chart(delta: &LieVector, u: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = delta.as_slice().iter().zip(u).map(|(a, b)| a + b).collect();
    let g = lie_exp(&delta.scaled(-1.0)).compose(&lie_exp(&LieVector::new(delta.dim(), p).unwrap())).unwrap();
    lie_log(&g).unwrap().as_slice().to_vec()
}

/// Inverse chart: `w ↦ log(exp(δ) exp(w)) - δ`.
fn chart_inverse(delta: &LieVector, w: &[f64]) -> Vec<f64> {
    let g = lie_exp(delta).compose(&lie_exp(&LieVector::new(delta.dim(), w.to_vec()).unwrap())).unwrap();
    lie_log(&g).unwrap().as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a - b).collect()
}

fn ln_unit_ball_volume(p: usize) -> f64 {
    let p = p as f64;
    0.5 * p * std::f64::consts::PI.ln() - statrs::function::gamma::ln_gamma(p / 2.0 + 1.0)
}

/// Monte-Carlo estimate of `vol(chart(B_ε)) / vol(B_ε)`. Points are drawn
/// uniformly from a box mapped through a finite-difference linearization
/// of the chart, and kept when their preimage lies in the ball.
pub fn volume_ratio(delta: &LieVector, eps: f64, n: usize, seed: u64) -> f64 {
    let p = delta.as_slice().len();
    let h = 1e-6;
    let mut lin = DMatrix::<f64>::zeros(p, p);
    for k in 0..p {
        let mut up = vec![0.0; p];
        let mut dn = vec![0.0; p];
        up[k] = h;
        dn[k] = -h;
        let (a, b) = (chart(delta, &up), chart(delta, &dn));
        for r in 0..p {
            lin[(r, k)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    let half = 1.02 * eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n {
        let z = nalgebra::DVector::from_iterator(p, (0..p).map(|_| rng.random_range(-half..half)));
        let w = &lin * z;
        let u = chart_inverse(delta, w.as_slice());
        if u.iter().map(|x| x * x).sum::<f64>() < eps * eps {
            hits += 1;
        }
    }
    let ln_box = p as f64 * (2.0 * half).ln() + lin.determinant().abs().ln();
    let ln_image = ln_box + (hits as f64 / n as f64).ln();
    (ln_image - ln_unit_ball_volume(p) - p as f64 * eps.ln()).exp()
}
