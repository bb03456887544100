//! Deterministic synthetic scenarios: indicator and truncated-cosine curves
//! under random affine warps, and rotated copies of a built-in glyph.
//!
//! Every subject map satisfies `Y_i(s) = X(T_i(s)) + noise`, so a true
//! transform that shifts the curve right by `b` is the translation by `-b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interp::{self, InterpolationPolicy};
use crate::map::{ActivationMap, Lattice};
use crate::sampler::rng::{stream, Phase};
use crate::transforms::{standardize, AffineTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Indicator,
    Cosine,
    Glyph,
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "indicator" => Ok(Scenario::Indicator),
            "cosine" => Ok(Scenario::Cosine),
            "glyph" => Ok(Scenario::Glyph),
            other => Err(format!("unknown scenario '{other}' (expected indicator|cosine|glyph)")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Indicator => "indicator",
            Scenario::Cosine => "cosine",
            Scenario::Glyph => "glyph",
        })
    }
}

/// Side of the glyph lattice in pixels.
pub const GLYPH_SIZE: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub noise_sd: f64,
    /// True forward transforms; drawn from `seed` when `None`. For the
    /// glyph scenario they are rotations about the image center built from
    /// `angles_deg`.
    pub transforms: Option<Vec<AffineTransform>>,
    pub angles_deg: Vec<f64>,
    pub seed: u64,
    pub lattice: Lattice,
    /// Half-width of the cosine bump.
    pub half_width: f64,
}

impl ScenarioSpec {
    /// 201 points on [-5, 5], noise sd 0.5.
    pub fn indicator(seed: u64) -> Self {
        Self {
            scenario: Scenario::Indicator,
            n_subjects: 3,
            noise_sd: 0.5,
            transforms: None,
            angles_deg: Vec::new(),
            seed,
            lattice: Lattice::line(201, 0.05, -5.0).expect("valid lattice"),
            half_width: 2.0,
        }
    }

    /// 81 points on [-4, 4], noise sd 0.1, half-width 2.
    pub fn cosine(seed: u64) -> Self {
        Self {
            scenario: Scenario::Cosine,
            noise_sd: 0.1,
            lattice: Lattice::line(81, 0.1, -4.0).expect("valid lattice"),
            ..Self::indicator(seed)
        }
    }

    /// 28 x 28 glyph rotated by -15, 0 and 15 degrees, no noise.
    pub fn glyph(seed: u64) -> Self {
        Self {
            scenario: Scenario::Glyph,
            n_subjects: 3,
            noise_sd: 0.0,
            transforms: None,
            angles_deg: vec![-15.0, 0.0, 15.0],
            seed,
            lattice: Lattice::grid(GLYPH_SIZE, GLYPH_SIZE).expect("valid lattice"),
            half_width: 2.0,
        }
    }

    pub fn for_scenario(scenario: Scenario, seed: u64) -> Self {
        match scenario {
            Scenario::Indicator => Self::indicator(seed),
            Scenario::Cosine => Self::cosine(seed),
            Scenario::Glyph => Self::glyph(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Validation(format!("noise sd must be non-negative, got {}", self.noise_sd)));
        }
        if self.n_subjects == 0 {
            return Err(Error::Validation("n_subjects must be positive".into()));
        }
        let want_dim = if self.scenario == Scenario::Glyph { 2 } else { 1 };
        if self.lattice.dim() != want_dim {
            return Err(Error::Validation(format!(
                "{} scenario needs a {want_dim}D lattice",
                self.scenario
            )));
        }
        if self.scenario == Scenario::Glyph && self.transforms.is_none() && self.angles_deg.len() != self.n_subjects {
            return Err(Error::Validation(format!(
                "{} angles given for {} subjects",
                self.angles_deg.len(),
                self.n_subjects
            )));
        }
        if let Some(ts) = &self.transforms {
            if ts.len() != self.n_subjects {
                return Err(Error::Validation(format!(
                    "{} transforms given for {} subjects",
                    ts.len(),
                    self.n_subjects
                )));
            }
            if ts.iter().any(|t| t.dim() != want_dim) {
                return Err(Error::Validation("transform dimension does not match the lattice".into()));
            }
        }
        if self.scenario == Scenario::Cosine && !(self.half_width > 0.0) {
            return Err(Error::Validation("cosine half-width must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a generated data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub template: ActivationMap,
    pub transforms: Vec<AffineTransform>,
    pub angles_deg: Option<Vec<f64>>,
}

pub fn indicator(s: f64) -> f64 {
    if (-1.0..=1.0).contains(&s) {
        1.0
    } else {
        0.0
    }
}

pub fn truncated_cosine(s: f64, half_width: f64) -> f64 {
    if s.abs() < half_width {
        (std::f64::consts::PI * s / (2.0 * half_width)).cos()
    } else {
        0.0
    }
}

/// Binary "7": a top bar and a diagonal stem, three pixels thick.
pub fn base_glyph() -> ActivationMap {
    let lat = Lattice::grid(GLYPH_SIZE, GLYPH_SIZE).expect("valid lattice");
    ActivationMap::from_fn(lat, |p| {
        let (r, c) = (p[0], p[1]);
        let bar = (5.0..=7.0).contains(&r) && (7.0..=20.0).contains(&c);
        // stem from (7, 20) down-left to (23, 11)
        let (r0, c0, r1, c1) = (7.0, 20.0, 23.0, 11.0);
        let (dr, dc) = (r1 - r0, c1 - c0);
        let len2 = dr * dr + dc * dc;
        let u = (((r - r0) * dr + (c - c0) * dc) / len2).clamp(0.0, 1.0);
        let dist = ((r - r0 - u * dr).powi(2) + (c - c0 - u * dc).powi(2)).sqrt();
        let stem = dist <= 1.5;
        if bar || stem {
            1.0
        } else {
            0.0
        }
    })
}

/// Draws 1D warps `s -> a s + b` with `b` uniform on ±10% of the domain
/// width and `a` uniform on [0.9, 1.1], then standardizes them so their
/// intrinsic mean is the identity.
pub fn draw_affine_1d(lattice: &Lattice, n: usize, seed: u64) -> Result<Vec<AffineTransform>> {
    let width = lattice.extent()[0];
    let raw = (0..n)
        .map(|i| {
            let mut rng = stream(seed, 0, i, Phase::Synth);
            let b = rng.random_range(-0.1 * width..=0.1 * width);
            let a = rng.random_range(0.9..=1.1);
            AffineTransform::affine_1d(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    standardize(&raw)
}

fn add_noise(values: &mut [f64], sd: f64, seed: u64, subject: usize) {
    if sd == 0.0 {
        return;
    }
    let mut rng = stream(seed, 1, subject, Phase::Synth);
    let normal = Normal::new(0.0, sd).expect("finite sd");
    for v in values {
        *v += normal.sample(&mut rng);
    }
}

fn curves(spec: &ScenarioSpec, f: impl Fn(f64) -> f64) -> Result<(Vec<ActivationMap>, Truth)> {
    spec.validate()?;
    let lattice = &spec.lattice;
    let transforms = match &spec.transforms {
        Some(ts) => ts.clone(),
        None => draw_affine_1d(lattice, spec.n_subjects, spec.seed)?,
    };
    let mut ys = Vec::with_capacity(spec.n_subjects);
    for (i, t) in transforms.iter().enumerate() {
        let mut y = ActivationMap::from_fn(lattice.clone(), |p| f(t.apply(p).expect("dimension checked")[0]));
        add_noise(y.values_mut(), spec.noise_sd, spec.seed, i);
        ys.push(y);
    }
    let truth = Truth {
        template: ActivationMap::from_fn(lattice.clone(), |p| f(p[0])),
        transforms,
        angles_deg: None,
    };
    Ok((ys, truth))
}

pub fn gen_indicator_curves(spec: &ScenarioSpec) -> Result<(Vec<ActivationMap>, Truth)> {
    curves(spec, indicator)
}

pub fn gen_cosine_curves(spec: &ScenarioSpec) -> Result<(Vec<ActivationMap>, Truth)> {
    let l = spec.half_width;
    curves(spec, |s| truncated_cosine(s, l))
}

/// Rotation by `deg` degrees about the glyph-lattice center.
pub fn glyph_rotation(lattice: &Lattice, deg: f64) -> AffineTransform {
    AffineTransform::rotation_about(deg.to_radians(), &lattice.center())
}

/// Resamples `map` at `t(s)` for every lattice site `s`.
pub fn warp(map: &ActivationMap, t: &AffineTransform, policy: InterpolationPolicy) -> ActivationMap {
    let lat = map.lattice();
    let mut out = vec![0.0; lat.dim()];
    let values = (0..lat.len())
        .map(|i| {
            t.apply_into(&lat.point(i), &mut out);
            interp::interpolate_at(map, &out, policy)
        })
        .collect();
    ActivationMap::new(lat.clone(), values).expect("same lattice")
}

pub fn gen_rotated_glyphs(spec: &ScenarioSpec) -> Result<(Vec<ActivationMap>, Truth)> {
    spec.validate()?;
    let base = base_glyph();
    if spec.lattice != *base.lattice() {
        return Err(Error::Validation(format!(
            "glyph scenario uses a {GLYPH_SIZE} x {GLYPH_SIZE} unit lattice"
        )));
    }
    let transforms = match &spec.transforms {
        Some(ts) => ts.clone(),
        None => spec
            .angles_deg
            .iter()
            .map(|&a| glyph_rotation(&spec.lattice, a))
            .collect(),
    };
    let policy = InterpolationPolicy::default();
    let ys = transforms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut y = warp(&base, t, policy);
            add_noise(y.values_mut(), spec.noise_sd, spec.seed, i);
            y
        })
        .collect();
    let truth = Truth {
        template: base,
        transforms,
        angles_deg: spec.transforms.is_none().then(|| spec.angles_deg.clone()),
    };
    Ok((ys, truth))
}

pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<ActivationMap>, Truth)> {
    match spec.scenario {
        Scenario::Indicator => gen_indicator_curves(spec),
        Scenario::Cosine => gen_cosine_curves(spec),
        Scenario::Glyph => gen_rotated_glyphs(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::pearson;

    fn fixed(spec: ScenarioSpec, ts: Vec<AffineTransform>) -> ScenarioSpec {
        ScenarioSpec {
            n_subjects: ts.len(),
            transforms: Some(ts),
            noise_sd: 0.0,
            ..spec
        }
    }

    #[test]
    fn identity_indicator_is_exact() {
        let spec = fixed(ScenarioSpec::indicator(1), vec![AffineTransform::identity(1)]);
        let (ys, truth) = gen_indicator_curves(&spec).unwrap();
        assert_eq!(ys[0], truth.template);
        assert_eq!(ys[0].lattice().len(), 201);
        assert_eq!(ys[0].values()[100], 1.0);
    }

    #[test]
    fn shift_moves_support() {
        let spec = fixed(ScenarioSpec::indicator(1), vec![AffineTransform::translation(&[-0.5])]);
        let (ys, _) = gen_indicator_curves(&spec).unwrap();
        let lat = ys[0].lattice();
        let support: Vec<f64> = (0..lat.len())
            .filter(|&i| ys[0].values()[i] == 1.0)
            .map(|i| lat.point(i)[0])
            .collect();
        assert!((support[0] + 0.5).abs() < 1e-9, "{:?}", support.first());
        assert!((support.last().unwrap() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(truncated_cosine(0.0, 2.0), 1.0);
        assert_eq!(truncated_cosine(2.0, 2.0), 0.0);
        let spec = ScenarioSpec::cosine(2);
        assert_eq!(spec.lattice.len(), 81);
        let (ys, _) = gen_cosine_curves(&spec).unwrap();
        assert_eq!(ys.len(), 3);
    }

    #[test]
    fn generators_are_deterministic() {
        for sc in [Scenario::Indicator, Scenario::Cosine, Scenario::Glyph] {
            let spec = ScenarioSpec {
                noise_sd: 0.2,
                ..ScenarioSpec::for_scenario(sc, 7)
            };
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn drawn_transforms_are_bounded_and_standardized() {
        let lat = Lattice::line(201, 0.05, -5.0).unwrap();
        let ts = draw_affine_1d(&lat, 5, 3).unwrap();
        let mean = crate::transforms::karcher_mean(&ts, 1e-12, 100).unwrap();
        assert!(mean.distance(&AffineTransform::identity(1)) < 1e-9);
        for t in &ts {
            assert!(t.det() > 0.75 && t.det() < 1.3);
            assert!(t.offset()[0].abs() < 2.5);
        }
    }

    #[test]
    fn zero_angle_is_base_glyph() {
        let spec = ScenarioSpec {
            angles_deg: vec![0.0],
            n_subjects: 1,
            ..ScenarioSpec::glyph(1)
        };
        let (ys, truth) = gen_rotated_glyphs(&spec).unwrap();
        assert_eq!(ys[0], truth.template);
    }

    #[test]
    fn four_quarter_turns_restore_glyph() {
        let base = base_glyph();
        let q = glyph_rotation(base.lattice(), 90.0);
        let mut m = base.clone();
        for _ in 0..4 {
            m = warp(&m, &q, InterpolationPolicy::default());
        }
        for (a, b) in m.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn derotation_improves_alignment() {
        let (ys, truth) = gen_rotated_glyphs(&ScenarioSpec::glyph(1)).unwrap();
        let policy = InterpolationPolicy::default();
        let aligned: Vec<ActivationMap> = ys
            .iter()
            .zip(&truth.transforms)
            .map(|(y, t)| warp(y, &t.inverse().unwrap(), policy))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let raw = pearson(ys[i].values(), ys[j].values());
                let fixed = pearson(aligned[i].values(), aligned[j].values());
                assert!(raw < fixed, "{i},{j}: {raw} vs {fixed}");
            }
        }
    }
}
