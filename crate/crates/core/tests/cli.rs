use std::fs;
use std::path::{Path, PathBuf};

use groupreg::cli::run_command;
use groupreg::config::{parse_config, parse_config_in};
use groupreg::map::{ActivationMap, Lattice};
use groupreg::sampler::Sample;
use groupreg::store::SampleStore;
use groupreg::synth::Scenario;
use groupreg::transforms::AffineTransform;
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("groupreg").chain(args.iter().copied()))
}

fn read_map(path: &Path) -> ActivationMap {
    ActivationMap::read(path).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let dir = configs_dir();
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "conf") {
            let text = fs::read_to_string(&path).unwrap();
            let cfg = parse_config_in(&text, &dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(cfg.scenario.is_some());
            assert_eq!(cfg.chain.total, 20_000);
            assert_eq!(cfg.chain.burn_in, 10_000);
            n += 1;
        }
    }
    assert!(n >= 4);
    let glyph = parse_config_in(&fs::read_to_string(dir.join("glyph.conf")).unwrap(), &dir).unwrap();
    assert_eq!(glyph.scenario, Some(Scenario::Glyph));
    assert_eq!((glyph.hyper.a0_alpha, glyph.hyper.b0_alpha), (2.0, 1.0));
    assert_eq!((glyph.hyper.a_t, glyph.hyper.b_t), (2.0, 1.0));
}

#[test]
fn simulate_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("sim.conf");
    fs::write(&conf, "scenario=indicator\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let code = run(&["simulate", "--config", conf.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    for name in ["subject_1.csv", "subject_2.csv", "subject_3.csv", "truth_template.csv", "truth.json"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(!a.join("subject_4.csv").exists());
    let y = read_map(&a.join("subject_1.csv"));
    assert_eq!(y.lattice(), &Lattice::line(201, 0.05, -5.0).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 6);
}

#[test]
fn config_errors_exit_with_two_and_leave_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "burn_in=30000\ntotal=30000\n").unwrap();
    assert_eq!(run(&["fit", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert!(!out.exists());
    fs::write(&conf, "seed=1\nnot a setting\n").unwrap();
    assert_eq!(run(&["fit", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    // neither inputs nor a scenario
    assert_eq!(run(&["fit", "--out", out.to_str().unwrap()]), 2);
    assert!(!out.exists());
    assert_eq!(run(&["summarize", "--out", out.to_str().unwrap()]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert!(!out.exists());
}

#[test]
fn failures_keep_existing_directories_and_files() {
    let tmp = tempfile::tempdir().unwrap();
    let keep = tmp.path().join("keep.txt");
    fs::write(&keep, "x").unwrap();
    assert_eq!(run(&["fit", "--out", tmp.path().to_str().unwrap()]), 2);
    assert!(keep.exists());
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn audit_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["audit", "--out", tmp.path().to_str().unwrap()]), 0);
    let report = fs::read_to_string(tmp.path().join("audit.txt")).unwrap();
    assert_eq!(report.lines().count(), 13);
    assert!(report.lines().all(|l| l.starts_with("PASS")));
}

fn two_sample_store(dir: &Path) -> PathBuf {
    let lat = Lattice::line(2, 1.0, 0.0).unwrap();
    let sample = |it: u64, x0: f64, shift: f64| Sample {
        iteration: it,
        x: vec![x0, 3.0],
        t: vec![AffineTransform::translation(&[shift])],
        t_r: vec![AffineTransform::translation(&[-shift])],
        beta: vec![1.0],
        sigma2: vec![0.5],
        alpha: 1.0,
        rho: 1.0,
    };
    let store = SampleStore::symmetric(lat, 1, [0; 32], vec![sample(1, 0.0, 0.2), sample(2, 2.0, 0.4)]);
    let path = dir.join("two.grs");
    store.write(&path).unwrap();
    path
}

#[test]
fn summarize_two_sample_store() {
    let tmp = tempfile::tempdir().unwrap();
    let store = two_sample_store(tmp.path());
    let conf = tmp.path().join("s.conf");
    fs::write(&conf, format!("store={}\nlevel=0.5\n", store.display())).unwrap();
    let out = tmp.path().join("sum");
    assert_eq!(run(&["summarize", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let get = |name: &str| read_map(&out.join(format!("template_{name}.csv"))).into_values();
    assert_eq!(get("mean"), vec![1.0, 3.0]);
    assert!((get("sd")[0] - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(get("sd")[1], 0.0);
    assert_eq!(get("ratio")[1], 0.0);
    assert!((get("lower")[0] - 0.5).abs() < 1e-12);
    assert!((get("upper")[0] - 1.5).abs() < 1e-12);
    let transforms = fs::read_to_string(out.join("transforms.csv")).unwrap();
    let forward = transforms.lines().find(|l| l.starts_with("1,forward,")).unwrap();
    let entries: Vec<f64> = forward.split(',').nth(2).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert!((entries[1] - 0.3).abs() < 1e-9, "{entries:?}");
}

#[test]
fn fit_summarize_and_warp_back() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let conf = tmp.path().join("c.conf");
    fs::write(&conf, "scenario=cosine\n").unwrap();
    assert_eq!(run(&["simulate", "--config", conf.to_str().unwrap(), "--out", sim.to_str().unwrap()]), 0);
    let inputs: Vec<String> = (1..=3).map(|i| sim.join(format!("subject_{i}.csv")).display().to_string()).collect();
    let fit_conf = tmp.path().join("fit.conf");
    fs::write(&fit_conf, format!("inputs={}\ntotal=300\nburn_in=100\nthin=10\n", inputs.join(","))).unwrap();
    for (cmd, dir) in [("fit", "sym"), ("fit-baseline", "conv")] {
        let out = tmp.path().join(dir);
        assert_eq!(run(&[cmd, "--config", fit_conf.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let store = SampleStore::read(&out.join("samples.grs")).unwrap();
        let kept = match &store.records {
            groupreg::store::Records::Symmetric(r) => r.len(),
            groupreg::store::Records::Conventional(r) => r.len(),
        };
        assert_eq!(kept, 20);
        let diag: serde_json::Value = serde_json::from_slice(&fs::read(out.join("diagnostics.json")).unwrap()).unwrap();
        assert_eq!(diag["acceptance"]["forward"].as_array().unwrap().len(), 3);

        let warp_conf = tmp.path().join(format!("{dir}.conf"));
        fs::write(
            &warp_conf,
            format!("inputs={}\nstore={}\n", inputs.join(","), out.join("samples.grs").display()),
        )
        .unwrap();
        for (sub, file) in [("summarize", "template_mean.csv"), ("inverse-warp", "warped_mean.csv")] {
            let o = tmp.path().join(format!("{dir}-{sub}"));
            assert_eq!(run(&[sub, "--config", warp_conf.to_str().unwrap(), "--out", o.to_str().unwrap()]), 0);
            assert_eq!(read_map(&o.join(file)).lattice().len(), 81);
        }
    }
}

#[test]
fn rerun_from_written_config_reproduces_the_store() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("c.conf");
    fs::write(&conf, "scenario=cosine\ntotal=120\nburn_in=60\nthin=6\nseed=3\n").unwrap();
    let a = tmp.path().join("a");
    assert_eq!(run(&["fit", "--config", conf.to_str().unwrap(), "--out", a.to_str().unwrap()]), 0);
    let b = tmp.path().join("b");
    let written = a.join("config.txt");
    assert_eq!(run(&["fit", "--config", written.to_str().unwrap(), "--out", b.to_str().unwrap()]), 0);
    assert_eq!(fs::read(a.join("samples.grs")).unwrap(), fs::read(b.join("samples.grs")).unwrap());
    let ma: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["artifacts"][0], mb["artifacts"][0]);
}

#[test]
fn waic_scan_writes_one_row_per_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("c.conf");
    fs::write(&conf, "scenario=cosine\ntotal=60\nburn_in=30\nthin=3\n").unwrap();
    let out = tmp.path().join("scan");
    let code = run(&[
        "waic-scan",
        "--config",
        conf.to_str().unwrap(),
        "--lambda-r-grid",
        "0.1,1,10,100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let table = fs::read_to_string(out.join("waic_scan.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "lambda_r,waic,mean_inverse_consistency_error");
    assert_eq!(rows.len(), 5);
    let lambdas: Vec<f64> = rows[1..].iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(lambdas, vec![0.1, 1.0, 10.0, 100.0]);
    for r in &rows[1..] {
        let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[1].is_finite() && v[2] >= 0.0);
    }
}

#[test]
fn empty_config_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg.model.name(), "symmetric");
    assert_eq!(cfg.level, 0.95);
}

fn lattice_strategy() -> impl Strategy<Value = Lattice> {
    prop_oneof![
        (1usize..40, 1e-3f64..10.0, -50.0f64..50.0).prop_map(|(n, h, o)| Lattice::line(n, h, o).unwrap()),
        (1usize..8, 1usize..8, 1e-3f64..10.0, -50.0f64..50.0)
            .prop_map(|(r, c, h, o)| Lattice::new(vec![r, c], vec![h, 2.0 * h], vec![o, -o]).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_csv_roundtrip(lat in lattice_strategy(), seed in any::<u64>()) {
        let mut z = seed;
        let map = ActivationMap::from_fn(lat, |_| {
            z = z.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2e3 - 1e3
        });
        let back = ActivationMap::from_csv(&map.to_csv(), "mem").unwrap();
        prop_assert_eq!(back.lattice(), map.lattice());
        for (a, b) in back.values().iter().zip(map.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn store_csv_roundtrip(xs in proptest::collection::vec(-1e6f64..1e6, 3), shift in -1e3f64..1e3, s2 in 1e-9f64..1e9) {
        let lat = Lattice::line(3, 0.5, 0.0).unwrap();
        let sample = Sample {
            iteration: 11,
            x: xs.clone(),
            t: vec![AffineTransform::affine_1d(1.25, shift).unwrap()],
            t_r: vec![AffineTransform::translation(&[-shift])],
            beta: vec![0.75],
            sigma2: vec![s2],
            alpha: s2.sqrt(),
            rho: 1.5,
        };
        let store = SampleStore::symmetric(lat, 1, [0; 32], vec![sample]);
        let csv = store.to_csv();
        let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        prop_assert_eq!(row[0], 11.0);
        for (a, b) in row[1..4].iter().zip(&xs) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        prop_assert!((row[5] - shift).abs() <= 1e-12 * (1.0 + shift.abs()));
        prop_assert!((*row.last().unwrap() - 1.5).abs() < 1e-15);
    }
}
