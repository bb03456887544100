//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::audit::run_audit;
use crate::baseline::{fit_conventional, inverse_warp, mean_pairwise_correlation, summarize_baseline};
use crate::config::{hex, parse_config_in, RunConfig};
use crate::error::{Error, Result};
use crate::map::{ActivationMap, Lattice};
use crate::sampler::{fit, summarize, FieldSummary, MemorySink, Sample, SampleSink};
use crate::store::{ModelKind, Records, SampleStore};
use crate::synth::{generate, Truth};
use crate::transforms::AffineTransform;

#[derive(Debug, Parser)]
#[command(name = "groupreg", version, about = "Symmetric group-wise registration to a latent Gaussian-process template")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// symmetric or conventional
    #[arg(long, global = true)]
    pub model: Option<ModelKind>,
    #[arg(long = "lambda-r", global = true)]
    pub lambda_r: Option<f64>,
    /// Comma-separated inverse-consistency weights for waic-scan
    #[arg(long = "lambda-r-grid", global = true, value_delimiter = ',')]
    pub lambda_r_grid: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a benchmark data set and its ground truth
    Simulate,
    /// Fit the configured model and write a sample store
    Fit,
    /// Fit the conventional kernel-template model
    FitBaseline,
    /// Fit the symmetric model over a grid of inverse-consistency weights
    WaicScan,
    /// Posterior summaries of a sample store
    Summarize,
    /// Warp the data back to template space with the posterior transforms
    InverseWarp,
    /// Conjugacy, detailed-balance and dense-GP audits
    Audit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::FitBaseline => "fit-baseline",
            Command::WaicScan => "waic-scan",
            Command::Summarize => "summarize",
            Command::InverseWarp => "inverse-warp",
            Command::Audit => "audit",
        }
    }
}

/// Files written by one command. Everything is removed again if the
/// command fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.files.push((name.to_string(), hex(&Sha256::digest(bytes))));
        fs::write(path, bytes)?;
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(&mut self, command: Command, cfg: &RunConfig) -> Result<()> {
        let text = cfg.canonical_text();
        self.write("config.txt", text.as_bytes())?;
        let artifacts: Vec<_> = self
            .files
            .iter()
            .map(|(name, sha)| json!({ "name": name, "sha256": sha }))
            .collect();
        let manifest = json!({
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "store_format": crate::store::VERSION,
            "seed": cfg.chain.seed,
            "config_hash": hex(&cfg.hash()),
            "config": text,
            "artifacts": artifacts,
        });
        self.write_json("manifest.json", &manifest)
    }

    fn discard(self) {
        for (name, _) in &self.files {
            let _ = fs::remove_file(self.dir.join(name));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let msg = json!({ "error": e.to_string(), "kind": error_kind(&e), "exit_code": code });
            eprintln!("{msg}");
            code
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e.exit_code() {
        2 => "config",
        4 => "audit",
        _ => "numerical",
    }
}

/// Reads the configuration and applies the command-line overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            parse_config_in(&text, base)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.chain.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = cli.model {
        cfg.model = m;
    }
    if let Some(l) = cli.lambda_r {
        cfg.hyper.lambda_r = l;
    }
    if let Some(g) = &cli.lambda_r_grid {
        cfg.lambda_r_grid = g.clone();
    }
    cfg.out = std::path::absolute(&cfg.out)?;
    for p in cfg.inputs.iter_mut().chain(cfg.store.as_mut()) {
        *p = std::path::absolute(&*p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut out = Outputs::open(&cfg.out)?;
    let result = match cli.command {
        Command::Simulate => simulate(&cfg, &mut out),
        Command::Fit => match cfg.model {
            ModelKind::Symmetric => fit_symmetric(&cfg, &mut out),
            ModelKind::Conventional => fit_baseline(&cfg, &mut out),
        },
        Command::FitBaseline => fit_baseline(&cfg, &mut out),
        Command::WaicScan => waic_scan(&cfg, &mut out),
        Command::Summarize => summarize_store(&cfg, &mut out),
        Command::InverseWarp => warp_back(&cfg, &mut out),
        Command::Audit => audit(&cfg, &mut out),
    };
    let result = result.and_then(|()| out.finish(cli.command, &cfg));
    if result.is_err() {
        out.discard();
    }
    result
}

/// Subject maps from the configured files, or simulated from the scenario.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<ActivationMap>, Option<Truth>)> {
    if !cfg.inputs.is_empty() {
        let ys = cfg.inputs.iter().map(|p| ActivationMap::read(p)).collect::<Result<Vec<_>>>()?;
        if ys.iter().any(|y| y.lattice() != ys[0].lattice()) {
            return Err(Error::Validation("input maps must share one lattice".into()));
        }
        return Ok((ys, None));
    }
    match cfg.scenario_spec() {
        Some(spec) => {
            let (ys, truth) = generate(&spec)?;
            Ok((ys, Some(truth)))
        }
        None => Err(Error::Validation("either `inputs` or `scenario` must be configured".into())),
    }
}

fn transforms_json(ts: &[AffineTransform]) -> serde_json::Value {
    json!(ts.iter().map(|t| t.row_major()).collect::<Vec<_>>())
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg
        .scenario_spec()
        .ok_or_else(|| Error::Validation("simulate needs a `scenario`".into()))?;
    let (ys, truth) = generate(&spec)?;
    for (i, y) in ys.iter().enumerate() {
        out.write(&format!("subject_{}.csv", i + 1), y.to_csv().as_bytes())?;
    }
    out.write("truth_template.csv", truth.template.to_csv().as_bytes())?;
    out.write_json(
        "truth.json",
        &json!({
            "scenario": spec.scenario.to_string(),
            "seed": spec.seed,
            "n_subjects": spec.n_subjects,
            "noise_sd": spec.noise_sd,
            "transforms": transforms_json(&truth.transforms),
            "angles_deg": truth.angles_deg,
        }),
    )
}

fn write_store(store: &SampleStore, out: &mut Outputs) -> Result<()> {
    out.write("samples.grs", &store.to_bytes())?;
    out.write("samples.csv", store.to_csv().as_bytes())
}

fn fit_symmetric(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (ys, _) = load_data(cfg)?;
    let chain = cfg.chain_config()?;
    let mut sink = MemorySink::default();
    let (res, _) = fit(&ys, &cfg.hyper, &chain, cfg.fit_options(), &mut sink)?;
    let d = &res.diagnostics;
    let rates = |s: &[crate::sampler::MoveStats]| s.iter().map(|m| m.acceptance_rate()).collect::<Vec<_>>();
    let report = json!({
        "model": "symmetric",
        "total": chain.total,
        "burn_in": chain.burn_in,
        "thin": chain.thin,
        "kept": sink.samples.len(),
        "acceptance": {
            "forward": rates(&d.forward),
            "reverse": rates(&d.reverse),
            "rho": d.rho.acceptance_rate(),
            "scale": d.scale.acceptance_rate(),
        },
        "trace": trace_summary(&d.trace_log_posterior),
        "waic": res.waic,
        "details": d,
    });
    let lattice = ys[0].lattice().clone();
    write_store(&SampleStore::symmetric(lattice, chain.seed, cfg.hash(), sink.samples), out)?;
    out.write_json("diagnostics.json", &report)
}

fn trace_summary(trace: &[f64]) -> serde_json::Value {
    if trace.is_empty() {
        return json!(null);
    }
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let half = trace.len() / 2;
    let first = trace[..half.max(1)].iter().sum::<f64>() / half.max(1) as f64;
    let second = trace[half..].iter().sum::<f64>() / (trace.len() - half) as f64;
    json!({
        "mean": mean,
        "min": trace.iter().copied().fold(f64::INFINITY, f64::min),
        "max": trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "first_half_mean": first,
        "second_half_mean": second,
    })
}

fn fit_baseline(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (ys, _) = load_data(cfg)?;
    let chain = cfg.chain_config()?;
    let lattice = ys[0].lattice().clone();
    let bcfg = cfg.baseline_config(&lattice);
    let res = fit_conventional(&ys, &cfg.hyper, &chain, &bcfg)?;
    let d = &res.diagnostics;
    let report = json!({
        "model": "conventional",
        "total": chain.total,
        "burn_in": chain.burn_in,
        "thin": chain.thin,
        "kept": res.samples.len(),
        "landmark_stride": bcfg.landmark_stride,
        "tau": bcfg.tau,
        "acceptance": { "forward": d.forward.iter().map(|m| m.acceptance_rate()).collect::<Vec<_>>() },
        "trace": trace_summary(&d.trace_log_joint),
        "details": d,
    });
    write_store(&SampleStore::conventional(lattice, chain.seed, cfg.hash(), res.samples), out)?;
    out.write_json("diagnostics.json", &report)
}

/// Running mean of `‖H_T H_{T^r} - I‖_F` over kept samples and subjects.
#[derive(Clone, Debug, Default)]
pub struct InverseConsistencySink {
    pub total: f64,
    pub count: usize,
}

impl InverseConsistencySink {
    pub fn mean(&self) -> f64 {
        self.total / self.count.max(1) as f64
    }
}

impl SampleSink for InverseConsistencySink {
    fn push(&mut self, s: &Sample) -> Result<()> {
        for (t, tr) in s.t.iter().zip(&s.t_r) {
            self.total += t.inverse_consistency_error(tr);
            self.count += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanRow {
    pub lambda_r: f64,
    pub waic: f64,
    pub mean_inverse_consistency: f64,
}

/// One symmetric fit per `lambda_r` value.
pub fn scan_lambda_r(ys: &[ActivationMap], cfg: &RunConfig) -> Result<Vec<ScanRow>> {
    let chain = cfg.chain_config()?;
    cfg.lambda_r_grid
        .iter()
        .map(|&lambda_r| {
            let hyper = crate::model::Hyperparams {
                lambda_r,
                ..cfg.hyper.clone()
            };
            let mut sink = InverseConsistencySink::default();
            let (res, _) = fit(ys, &hyper, &chain, cfg.fit_options(), &mut sink)?;
            let waic = res.waic.ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?;
            Ok(ScanRow {
                lambda_r,
                waic: waic.waic,
                mean_inverse_consistency: sink.mean(),
            })
        })
        .collect()
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let mut s = String::from("lambda_r,waic,mean_inverse_consistency_error\n");
    for r in rows {
        s.push_str(&format!("{:?},{:?},{:?}\n", r.lambda_r, r.waic, r.mean_inverse_consistency));
    }
    s
}

fn waic_scan(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (ys, _) = load_data(cfg)?;
    let rows = scan_lambda_r(&ys, cfg)?;
    out.write("waic_scan.csv", scan_csv(&rows).as_bytes())
}

fn read_store(cfg: &RunConfig) -> Result<SampleStore> {
    let path = cfg
        .store
        .as_ref()
        .ok_or_else(|| Error::Validation("this command needs a `store`".into()))?;
    SampleStore::read(path)
}

fn transforms_csv(rows: &[(&str, &[AffineTransform])]) -> String {
    let mut s = String::from("subject,kind,entries\n");
    for (kind, ts) in rows {
        for (i, t) in ts.iter().enumerate() {
            let e: Vec<String> = t.row_major().iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&format!("{},{kind},{}\n", i + 1, e.join(" ")));
        }
    }
    s
}

fn write_field(out: &mut Outputs, lattice: &Lattice, f: &FieldSummary) -> Result<()> {
    for (name, values) in [
        ("mean", &f.mean),
        ("sd", &f.sd),
        ("ratio", &f.ratio),
        ("lower", &f.lower),
        ("upper", &f.upper),
    ] {
        let map = ActivationMap::new(lattice.clone(), values.clone())?;
        out.write(&format!("template_{name}.csv"), map.to_csv().as_bytes())?;
    }
    Ok(())
}

fn summarize_store(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let store = read_store(cfg)?;
    let lattice = store.header.lattice.clone();
    match &store.records {
        Records::Symmetric(samples) => {
            let s = summarize(samples, cfg.level)?;
            write_field(out, &lattice, &s.template)?;
            out.write("transforms.csv", transforms_csv(&[("forward", &s.forward), ("reverse", &s.reverse)]).as_bytes())?;
            out.write_json(
                "summary.json",
                &json!({
                    "model": "symmetric",
                    "level": s.level,
                    "samples": s.samples,
                    "beta_mean": s.beta_mean,
                    "sigma2_mean": s.sigma2_mean,
                    "alpha_mean": s.alpha_mean,
                    "rho_mean": s.rho_mean,
                    "rho_median": s.rho_median,
                }),
            )
        }
        Records::Conventional(samples) => {
            let s = summarize_baseline(samples, cfg.level)?;
            write_field(out, &lattice, &s.template)?;
            out.write("transforms.csv", transforms_csv(&[("forward", &s.forward)]).as_bytes())?;
            out.write_json(
                "summary.json",
                &json!({
                    "model": "conventional",
                    "level": s.level,
                    "samples": s.samples,
                    "sigma2_mean": s.sigma2_mean,
                }),
            )
        }
    }
}

fn warp_back(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let store = read_store(cfg)?;
    let (ys, _) = load_data(cfg)?;
    if ys[0].lattice() != &store.header.lattice || ys.len() != store.header.n_subjects {
        return Err(Error::Validation("data do not match the sample store".into()));
    }
    let forward = match &store.records {
        Records::Symmetric(samples) => summarize(samples, cfg.level)?.forward,
        Records::Conventional(samples) => summarize_baseline(samples, cfg.level)?.forward,
    };
    let (warped, mean) = inverse_warp(&ys, &forward, cfg.policy())?;
    for (i, w) in warped.iter().enumerate() {
        out.write(&format!("warped_{}.csv", i + 1), w.to_csv().as_bytes())?;
    }
    out.write("warped_mean.csv", mean.to_csv().as_bytes())?;
    out.write_json(
        "alignment.json",
        &json!({
            "model": store.header.model.name(),
            "mean_pairwise_correlation": mean_pairwise_correlation(&warped),
            "raw_mean_pairwise_correlation": mean_pairwise_correlation(&ys),
        }),
    )
}

fn audit(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let report = run_audit(cfg.chain.seed)?;
    print!("{report}");
    out.write("audit.txt", report.to_string().as_bytes())?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(Error::AuditFailed(names.join(", ")))
    }
}
