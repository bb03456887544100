//! Run configuration: `key=value` text, one setting per line, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::interp::{Boundary, InterpolationPolicy};
use crate::map::Lattice;
use crate::model::Hyperparams;
use crate::sampler::{ChainConfig, FitOptions};
use crate::store::ModelKind;
use crate::synth::{Scenario, ScenarioSpec};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GROUPREG_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Option<Scenario>,
    pub n_subjects: Option<usize>,
    pub noise_sd: Option<f64>,
    /// Subject map files; when empty the scenario is simulated.
    pub inputs: Vec<PathBuf>,
    /// Sample store read by `summarize` and `inverse-warp`.
    pub store: Option<PathBuf>,
    pub hyper: Hyperparams,
    pub chain: ChainConfig,
    pub margin: usize,
    pub boundary: Boundary,
    pub lambda_r_grid: Vec<f64>,
    pub out: PathBuf,
    pub model: ModelKind,
    pub landmark_stride: Option<usize>,
    pub tau: Option<f64>,
    pub level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            n_subjects: None,
            noise_sd: None,
            inputs: Vec::new(),
            store: None,
            hyper: Hyperparams::default(),
            chain: ChainConfig::default(),
            margin: 5,
            boundary: Boundary::Zero,
            lambda_r_grid: vec![0.1, 1.0, 10.0, 100.0],
            out: PathBuf::from("out"),
            model: ModelKind::Symmetric,
            landmark_stride: None,
            tau: None,
            level: 0.95,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Parse {
        line,
        msg: format!("bad value `{v}` for {key}: {e}"),
    })
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() || base == Path::new(".") {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses with relative paths taken from the working directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Parses with relative paths taken from `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key=value, found `{content}`"),
        })?;
        let (key, v) = (key.trim(), v.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        let h = &mut c.hyper;
        match key {
            "scenario" => c.scenario = Some(v.parse().map_err(|msg| Error::Parse { line, msg })?),
            "n_subjects" => c.n_subjects = Some(parse_value(line, key, v)?),
            "noise_sd" => c.noise_sd = Some(parse_value(line, key, v)?),
            "inputs" => {
                c.inputs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| resolve(base, s))
                    .collect()
            }
            "store" => c.store = Some(resolve(base, v)),
            "lambda_r" => h.lambda_r = parse_value(line, key, v)?,
            "a_t" => h.a_t = parse_value(line, key, v)?,
            "b_t" => h.b_t = parse_value(line, key, v)?,
            "a_tr" => h.a_tr = parse_value(line, key, v)?,
            "b_tr" => h.b_tr = parse_value(line, key, v)?,
            "a0_alpha" => h.a0_alpha = parse_value(line, key, v)?,
            "b0_alpha" => h.b0_alpha = parse_value(line, key, v)?,
            "rho_lower" => h.rho_lower = parse_value(line, key, v)?,
            "rho_upper" => h.rho_upper = parse_value(line, key, v)?,
            "mu0" => h.mu0 = parse_value(line, key, v)?,
            "lambda0" => h.lambda0 = parse_value(line, key, v)?,
            "a0" => h.a0 = parse_value(line, key, v)?,
            "a1" => h.a1 = parse_value(line, key, v)?,
            "m" => h.m = parse_value(line, key, v)?,
            "total" => c.chain.total = parse_value(line, key, v)?,
            "burn_in" => c.chain.burn_in = parse_value(line, key, v)?,
            "thin" => c.chain.thin = parse_value(line, key, v)?,
            "seed" => c.chain.seed = parse_value(line, key, v)?,
            "threads" => c.chain.threads = Some(parse_value(line, key, v)?),
            "margin" => c.margin = parse_value(line, key, v)?,
            "boundary" => c.boundary = v.parse().map_err(|msg| Error::Parse { line, msg })?,
            "lambda_r_grid" => c.lambda_r_grid = parse_list(line, key, v)?,
            "out" => c.out = resolve(base, v),
            "model" => c.model = v.parse().map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?,
            "landmark_stride" => c.landmark_stride = Some(parse_value(line, key, v)?),
            "tau" => c.tau = Some(parse_value(line, key, v)?),
            "level" => c.level = parse_value(line, key, v)?,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
    }
    c.validate()?;
    Ok(c)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.chain.validate()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Validation(format!("level must lie in (0, 1) (got {})", self.level)));
        }
        if self.lambda_r_grid.is_empty() {
            return Err(Error::Validation("lambda_r_grid must not be empty".into()));
        }
        if let Some(&bad) = self.lambda_r_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Validation(format!("lambda_r_grid values must be nonnegative (got {bad})")));
        }
        for p in self.inputs.iter().chain(&self.store) {
            if !p.is_file() {
                return Err(Error::Validation(format!("path {} does not exist", p.display())));
            }
        }
        if self.scenario.is_none() && (self.n_subjects.is_some() || self.noise_sd.is_some()) {
            return Err(Error::Validation("n_subjects and noise_sd require a scenario".into()));
        }
        self.scenario_spec().map(|s| s.validate()).transpose()?;
        self.baseline_overrides(BaselineConfig::for_scenario(Scenario::Indicator)).validate()?;
        Ok(())
    }

    pub fn policy(&self) -> InterpolationPolicy {
        InterpolationPolicy {
            boundary: self.boundary,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            margin: self.margin,
            policy: self.policy(),
        }
    }

    /// Scenario settings with the configured overrides; data use the chain seed.
    pub fn scenario_spec(&self) -> Option<ScenarioSpec> {
        self.scenario.map(|sc| {
            let mut spec = ScenarioSpec::for_scenario(sc, self.chain.seed);
            if let Some(n) = self.n_subjects {
                spec.n_subjects = n;
                if sc == Scenario::Glyph && n != spec.angles_deg.len() {
                    let k = n.max(2) as f64 - 1.0;
                    spec.angles_deg = (0..n).map(|i| -15.0 + 30.0 * i as f64 / k).collect();
                }
            }
            if let Some(sd) = self.noise_sd {
                spec.noise_sd = sd;
            }
            spec
        })
    }

    fn baseline_overrides(&self, mut cfg: BaselineConfig) -> BaselineConfig {
        if let Some(s) = self.landmark_stride {
            cfg.landmark_stride = s;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.policy = self.policy();
        cfg
    }

    /// Conventional-model settings for data on `lattice`.
    pub fn baseline_config(&self, lattice: &Lattice) -> BaselineConfig {
        let cfg = match self.scenario {
            Some(sc) if self.inputs.is_empty() => BaselineConfig::for_scenario(sc),
            _ => BaselineConfig::for_lattice(lattice),
        };
        self.baseline_overrides(cfg)
    }

    /// Chain settings with the thread count capped by the environment.
    pub fn chain_config(&self) -> Result<ChainConfig> {
        let mut chain = self.chain.clone();
        if let Ok(v) = std::env::var(THREADS_ENV) {
            let cap: usize = v
                .trim()
                .parse()
                .map_err(|e| Error::Validation(format!("{THREADS_ENV}={v}: {e}")))?;
            if cap == 0 {
                return Err(Error::Validation(format!("{THREADS_ENV} must be positive")));
            }
            chain.threads = Some(chain.threads.map_or(cap, |t| t.min(cap)));
        }
        Ok(chain)
    }

    /// Every setting in a fixed order; parsing it gives back this config.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let h = &self.hyper;
        let path = |p: &Path| p.display().to_string();
        if let Some(sc) = self.scenario {
            let _ = writeln!(s, "scenario={sc}");
        }
        if let Some(n) = self.n_subjects {
            let _ = writeln!(s, "n_subjects={n}");
        }
        if let Some(sd) = self.noise_sd {
            let _ = writeln!(s, "noise_sd={sd:?}");
        }
        if !self.inputs.is_empty() {
            let list: Vec<String> = self.inputs.iter().map(|p| path(p)).collect();
            let _ = writeln!(s, "inputs={}", list.join(","));
        }
        if let Some(p) = &self.store {
            let _ = writeln!(s, "store={}", path(p));
        }
        for (k, v) in [
            ("lambda_r", h.lambda_r),
            ("a_t", h.a_t),
            ("b_t", h.b_t),
            ("a_tr", h.a_tr),
            ("b_tr", h.b_tr),
            ("a0_alpha", h.a0_alpha),
            ("b0_alpha", h.b0_alpha),
            ("rho_lower", h.rho_lower),
            ("rho_upper", h.rho_upper),
            ("mu0", h.mu0),
            ("lambda0", h.lambda0),
            ("a0", h.a0),
            ("a1", h.a1),
        ] {
            let _ = writeln!(s, "{k}={v:?}");
        }
        let _ = writeln!(s, "m={}", h.m);
        let _ = writeln!(s, "total={}", self.chain.total);
        let _ = writeln!(s, "burn_in={}", self.chain.burn_in);
        let _ = writeln!(s, "thin={}", self.chain.thin);
        let _ = writeln!(s, "seed={}", self.chain.seed);
        if let Some(t) = self.chain.threads {
            let _ = writeln!(s, "threads={t}");
        }
        let _ = writeln!(s, "margin={}", self.margin);
        let boundary = match self.boundary {
            Boundary::Zero => "zero",
            Boundary::Clamp => "clamp",
        };
        let _ = writeln!(s, "boundary={boundary}");
        let grid: Vec<String> = self.lambda_r_grid.iter().map(|l| format!("{l:?}")).collect();
        let _ = writeln!(s, "lambda_r_grid={}", grid.join(","));
        let _ = writeln!(s, "out={}", path(&self.out));
        let _ = writeln!(s, "model={}", self.model.name());
        if let Some(k) = self.landmark_stride {
            let _ = writeln!(s, "landmark_stride={k}");
        }
        if let Some(t) = self.tau {
            let _ = writeln!(s, "tau={t:?}");
        }
        let _ = writeln!(s, "level={:?}", self.level);
        s
    }

    /// SHA-256 of the canonical text without the output directory and
    /// thread count, neither of which changes any result.
    pub fn hash(&self) -> [u8; 32] {
        let text: String = self
            .canonical_text()
            .lines()
            .filter(|l| !l.starts_with("out=") && !l.starts_with("threads="))
            .flat_map(|l| [l, "\n"])
            .collect();
        Sha256::digest(text.as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
