use groupreg::baseline::{fit_conventional, BaselineConfig};
use groupreg::model::Hyperparams;
use groupreg::sampler::{fit, ChainConfig, FitOptions, MemorySink};
use groupreg::store::SampleStore;
use groupreg::synth::{generate, Scenario, ScenarioSpec};

fn symmetric_store(scenario: Scenario, total: u64, threads: Option<usize>) -> Vec<u8> {
    let (ys, _) = generate(&ScenarioSpec::for_scenario(scenario, 5)).unwrap();
    let cfg = ChainConfig {
        total,
        burn_in: total / 2,
        thin: 2,
        seed: 11,
        threads,
        ..Default::default()
    };
    let mut sink = MemorySink::default();
    let opts = FitOptions {
        margin: 5,
        ..Default::default()
    };
    fit(&ys, &Hyperparams::default(), &cfg, opts, &mut sink).unwrap();
    SampleStore::symmetric(ys[0].lattice().clone(), 11, [7; 32], sink.samples).to_bytes()
}

fn conventional_store(scenario: Scenario, total: u64, threads: Option<usize>) -> Vec<u8> {
    let (ys, _) = generate(&ScenarioSpec::for_scenario(scenario, 5)).unwrap();
    let cfg = ChainConfig {
        total,
        burn_in: total / 2,
        thin: 2,
        seed: 11,
        threads,
        ..Default::default()
    };
    let out = fit_conventional(&ys, &Hyperparams::default(), &cfg, &BaselineConfig::for_scenario(scenario)).unwrap();
    SampleStore::conventional(ys[0].lattice().clone(), 11, [7; 32], out.samples).to_bytes()
}

fn max_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).max(8)
}

#[test]
fn symmetric_stores_are_bit_identical() {
    for (scenario, total) in [(Scenario::Indicator, 60), (Scenario::Glyph, 16)] {
        let a = symmetric_store(scenario, total, None);
        assert_eq!(a, symmetric_store(scenario, total, None), "{scenario}");
        assert_eq!(a, symmetric_store(scenario, total, Some(1)), "{scenario}");
        assert_eq!(a, symmetric_store(scenario, total, Some(max_threads())), "{scenario}");
    }
}

#[test]
fn conventional_stores_are_bit_identical() {
    for (scenario, total) in [(Scenario::Cosine, 60), (Scenario::Glyph, 16)] {
        let a = conventional_store(scenario, total, None);
        assert_eq!(a, conventional_store(scenario, total, Some(1)), "{scenario}");
        assert_eq!(a, conventional_store(scenario, total, Some(max_threads())), "{scenario}");
    }
}

#[test]
fn seeds_change_the_chain() {
    let (ys, _) = generate(&ScenarioSpec::cosine(5)).unwrap();
    let run = |seed| {
        let cfg = ChainConfig {
            total: 20,
            burn_in: 10,
            thin: 1,
            seed,
            ..Default::default()
        };
        let mut sink = MemorySink::default();
        fit(&ys, &Hyperparams::default(), &cfg, FitOptions::default(), &mut sink).unwrap();
        sink.samples
    };
    assert_ne!(run(1), run(2));
}
