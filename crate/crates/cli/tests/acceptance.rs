//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Run alone with `cargo test --release -p apbfl-cli --test acceptance`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use apbfl::budget::{adjust, adjustment_coefficient, compute_score, BudgetState, HistoryWindow, WindowMode};
use apbfl::data::generate_blobs;
use apbfl::exec::ExecMode;
use apbfl::model::{gradient, init_model, objective, ModelSpec};
use apbfl::noise::{
    clip_l2, draw_many, ema_update, empirical_dp_check, gaussian_sigma, laplace_scale, DpCheckConfig, GaussianForm,
    Mechanism,
};
use apbfl::param::l2_norm;
use apbfl::rounds::update_threshold;
use apbfl::ParamVector;
use apbfl_cli::{run_experiment, ExperimentConfig};
use serde_json::{json, Value};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ROUNDS: usize = 30;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn close(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- runs

#[derive(Clone, Copy, Debug, PartialEq)]
struct RunSpec {
    algo: &'static str,
    epsilon: f64,
    sensitivity: f64,
    selected: usize,
    total: usize,
    seed: u64,
}

impl RunSpec {
    fn new(algo: &'static str, epsilon: f64, seed: u64) -> Self {
        Self {
            algo,
            epsilon,
            sensitivity: 1.0,
            selected: 10,
            total: 20,
            seed,
        }
    }

    fn config(&self, dir: &Path) -> ExperimentConfig {
        let mut dp = json!({"algo": self.algo});
        if self.algo != "no_dp" {
            dp["epsilon"] = json!(self.epsilon);
            dp["fixed_sensitivity"] = json!(self.sensitivity);
        }
        if self.algo == "apb_gauss" || self.algo == "apb_gaclip" {
            dp["delta"] = json!(0.01);
        }
        let v = json!({
            "no_rounds": ROUNDS,
            "total_clients": self.total,
            "selected_clients": self.selected,
            "dataset": "blobs",
            "blobs": {"num_classes": 3, "input_dim": 8, "train_samples": 4000, "test_samples": 1000, "spread": 0.3},
            "dp": dp,
            "seed": self.seed,
            "output_dir": dir,
        });
        ExperimentConfig::from_value(v).expect("acceptance config is valid")
    }
}

struct RunData {
    spec: RunSpec,
    dir: PathBuf,
    rounds: Vec<HashMap<String, String>>,
    clients: Vec<HashMap<String, String>>,
    summary: Value,
}

impl RunData {
    fn final_accuracy(&self) -> f64 {
        self.summary["final_accuracy"].as_f64().unwrap_or(f64::NAN)
    }
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).expect("csv exists");
    let headers = rdr.headers().expect("header").clone();
    rdr.records()
        .map(|r| {
            let r = r.expect("record");
            headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("column {key} = {:?}", row[key]))
}

struct Runner {
    root: tempfile::TempDir,
    cache: Vec<RunData>,
}

impl Runner {
    fn get(&mut self, spec: RunSpec) -> &RunData {
        if let Some(i) = self.cache.iter().position(|r| r.spec == spec) {
            return &self.cache[i];
        }
        let dir = self.root.path().join(format!("run_{:03}", self.cache.len()));
        let report = run_experiment(&spec.config(&dir)).expect("run succeeds");
        assert_eq!(report.exit_code(), 0, "{spec:?}: {:?}", report.summary.error);
        self.cache.push(RunData {
            spec,
            rounds: read_csv(&dir.join("rounds.csv")),
            clients: read_csv(&dir.join("clients.csv")),
            summary: serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap(),
            dir,
        });
        self.cache.last().unwrap()
    }

    fn mean_final(&mut self, make: impl Fn(u64) -> RunSpec) -> f64 {
        SEEDS.iter().map(|&s| self.get(make(s)).final_accuracy()).sum::<f64>() / SEEDS.len() as f64
    }

    fn private_runs(&self) -> impl Iterator<Item = &RunData> {
        self.cache.iter().filter(|r| r.spec.algo != "no_dp")
    }
}

// ---------------------------------------------------------------- criteria

fn formula_oracles() -> Outcome {
    let mut bad: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            bad.push(name.to_string());
        }
    };
    check("laplace (1,100)", close(laplace_scale(1.0, 100.0).unwrap(), 0.01, 1e-12));
    check("laplace (0.5,200)", close(laplace_scale(0.5, 200.0).unwrap(), 0.0025, 1e-12));
    check("laplace (1,1)", close(laplace_scale(1.0, 1.0).unwrap(), 1.0, 1e-12));
    // High-precision values of sqrt(2 ln 125)/100 and sqrt(ln 125)/100.
    let std26 = gaussian_sigma(1.0, 100.0, 0.01, GaussianForm::Standard).unwrap();
    check("gauss standard", close(std26, 0.031_075_114_600_922_395, 1e-12));
    check(
        "gauss no factor two",
        close(gaussian_sigma(1.0, 100.0, 0.01, GaussianForm::NoFactorTwo).unwrap(), 0.021_973_424_260_461_32, 1e-12),
    );
    check(
        "gauss half sensitivity",
        gaussian_sigma(0.5, 100.0, 0.01, GaussianForm::Standard).unwrap() == std26 / 2.0,
    );
    check("p negative", adjustment_coefficient(-0.3, 100, 10, 500, 50_000) == 1.0);
    check("p 0.95", close(adjustment_coefficient(0.5, 100, 10, 500, 50_000), 0.95, 1e-12));
    check("p zero", adjustment_coefficient(1.0, 100, 10, 5000, 50_000).abs() <= 1e-12);

    let mut h = HistoryWindow::default();
    h.push(0.1, 1.5);
    h.push(0.2, 2.0);
    check("score_loss", compute_score(&h, 3, 10, 3, WindowMode::Sum).unwrap().score_loss == 1.0);
    let s = compute_score(&h, 10, 200, 3, WindowMode::Sum).unwrap();
    check("score_t 10/200", close(s.score_t, 0.1, 1e-12));
    check("score_t 200/200", compute_score(&h, 200, 200, 3, WindowMode::Sum).unwrap().score_t == 1.0);
    let mut h = HistoryWindow::default();
    for a in [0.5, 0.6, 0.7] {
        h.push(a, 1.0);
    }
    let s = compute_score(&h, 4, 200, 3, WindowMode::Sum).unwrap();
    check("score_acc window", s.score_acc == 1.0);
    check(
        "score weighting",
        close(s.score, 30.0 * s.score_loss + 40.0 * s.score_acc + 30.0 * s.score_t, 1e-12),
    );

    let st = |cur: f64, init: f64| BudgetState {
        epsilon_current: cur,
        ..BudgetState::new(0, init).unwrap()
    };
    check("adjust decrease", close(adjust(&st(200.0, 200.0), 0.9, 100.0).epsilon_current, 180.0, 1e-12));
    check("adjust reset", adjust(&st(150.0, 200.0), 0.9, 40.0).epsilon_current == 200.0);
    check("adjust gate", adjust(&st(100.0, 100.0), 1.2, 100.0).epsilon_current == 100.0);

    let v = ParamVector::new(vec![1.5, 2.0]).unwrap();
    let c = clip_l2(&v, 1.0);
    check("clip norm", close(l2_norm(&c), 1.0, 1e-12));
    check("clip direction", close(c[0] / c[1], 0.75, 1e-12));
    let small = ParamVector::new(vec![0.3, 0.4]).unwrap();
    check("clip inside", clip_l2(&small, 1.0) == small);
    let zero = ParamVector::zeros(3).unwrap();
    check("clip zero", clip_l2(&zero, 1.0) == zero);

    check("ema mid", close(ema_update(5.0, 0.5, 3.0), 4.0, 1e-12));
    check("ema slow", close(ema_update(5.0, 0.0001, 4.0), 4.9999, 1e-12));
    check("ema full", ema_update(5.0, 1.0, 3.0) == 3.0);

    let norms: Vec<f64> = (1..=10).map(f64::from).collect();
    check("threshold 1..10", close(update_threshold(5.0, &norms, 0.5), 7.0, 1e-12));
    check("threshold single", close(update_threshold(5.0, &[3.0], 0.5), 4.0, 1e-12));
    check("threshold full", update_threshold(5.0, &norms, 1.0) == 9.0);
    check("threshold empty", update_threshold(5.0, &[], 0.5) == 5.0);

    let ok = bad.is_empty();
    outcome(ok, if ok { "all tabulated examples".into() } else { format!("failed: {}", bad.join(", ")) })
}

fn mechanism_statistics() -> Outcome {
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    };
    let lap_var = stats(&draw_many(Mechanism::Laplace, 0.01, 1_000_000, 101));
    let gau_std = stats(&draw_many(Mechanism::Gaussian, 0.0310751, 1_000_000, 102)).sqrt();
    let lap_ok = (lap_var - 2e-4).abs() <= 0.02 * 2e-4;
    let gau_ok = (gau_std - 0.0310751).abs() <= 0.01 * 0.0310751;
    outcome(
        lap_ok && gau_ok,
        format!("laplace var {lap_var:.4e} (target 2e-4), gaussian std {gau_std:.6} (target 0.0310751)"),
    )
}

fn empirical_dp() -> Outcome {
    let lap = empirical_dp_check(&DpCheckConfig::new(Mechanism::Laplace, 0.5, 0.0, 1_000_000), 201, ExecMode::Parallel)
        .unwrap();
    let gau = empirical_dp_check(&DpCheckConfig::new(Mechanism::Gaussian, 0.5, 0.05, 1_000_000), 202, ExecMode::Parallel)
        .unwrap();
    let broken = DpCheckConfig {
        scale_multiplier: 0.5,
        ..DpCheckConfig::new(Mechanism::Laplace, 0.5, 0.0, 1_000_000)
    };
    let half = empirical_dp_check(&broken, 203, ExecMode::Parallel).unwrap();
    outcome(
        lap.passed && gau.passed && !half.passed,
        format!(
            "laplace margin {:.2e} ({}), gaussian margin {:.2e} ({}), half-scale laplace margin {:.2e} ({})",
            lap.max_ratio_violation,
            verdict(lap.passed),
            gau.max_ratio_violation,
            verdict(gau.passed),
            half.max_ratio_violation,
            verdict(half.passed)
        ),
    )
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "passes"
    } else {
        "fails"
    }
}

fn budget_decay(runner: &mut Runner) -> Outcome {
    for algo in ["apb_lap", "apb_gauss", "apb_gaclip"] {
        for n in [5, 10] {
            for &seed in &SEEDS[..2] {
                runner.get(RunSpec {
                    selected: n,
                    ..RunSpec::new(algo, 20.0, seed)
                });
            }
        }
    }
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    let mut count = 0;
    for r in runner.private_runs() {
        count += 1;
        let eps0 = r.spec.epsilon;
        let sum: f64 = r.rounds.iter().map(|row| num(row, "mean_epsilon")).sum();
        let bound = eps0 * ROUNDS as f64;
        worst_ratio = worst_ratio.max(sum / bound);
        ok &= sum <= bound;
        ok &= r.clients.iter().all(|c| num(c, "epsilon_used") <= eps0);
        ok &= r.summary["sum_mean_epsilon"].as_f64().is_some_and(|s| s <= bound);
    }
    outcome(ok, format!("{count} private runs, max sum/(eps_init*T) = {worst_ratio:.4}"))
}

fn reset_behavior(runner: &Runner) -> Outcome {
    let (mut checked, mut resets, mut decreases, mut violations) = (0, 0, 0, 0);
    for r in runner.private_runs() {
        let eps0 = r.spec.epsilon;
        let mut last: HashMap<String, f64> = HashMap::new();
        for c in &r.clients {
            let eps = num(c, "epsilon_used");
            let prev = *last.get(&c["client_id"]).unwrap_or(&eps0);
            checked += 1;
            if eps == eps0 {
                resets += 1;
            } else if eps <= prev {
                decreases += 1;
            } else {
                violations += 1;
            }
            last.insert(c["client_id"].clone(), eps);
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{checked} records: {resets} at eps_init, {decreases} scaled by p <= 1, {violations} violations"),
    )
}

fn pp(x: f64) -> f64 {
    100.0 * x
}

fn epsilon_monotonicity(runner: &mut Runner) -> Outcome {
    let base = runner.mean_final(|s| RunSpec::new("no_dp", 0.0, s));
    let hi = runner.mean_final(|s| RunSpec::new("apb_lap", 50.0, s));
    let lo = runner.mean_final(|s| RunSpec::new("apb_lap", 5.0, s));
    outcome(
        base >= hi - 0.02 && hi >= lo - 0.02,
        format!("no_dp {:.2}% >= lap(eps=50) {:.2}% >= lap(eps=5) {:.2}%", pp(base), pp(hi), pp(lo)),
    )
}

fn laplace_vs_gaussian(runner: &mut Runner) -> Outcome {
    let lap = runner.mean_final(|s| RunSpec::new("apb_lap", 20.0, s));
    let gau = runner.mean_final(|s| RunSpec::new("apb_gauss", 20.0, s));
    outcome(lap >= gau - 0.02, format!("lap {:.2}% vs gauss {:.2}%", pp(lap), pp(gau)))
}

fn sensitivity_effect(runner: &mut Runner) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for algo in ["apb_lap", "apb_gauss"] {
        let half = runner.mean_final(|s| RunSpec {
            sensitivity: 0.5,
            ..RunSpec::new(algo, 20.0, s)
        });
        let one = runner.mean_final(|s| RunSpec::new(algo, 20.0, s));
        ok &= half >= one - 0.01;
        parts.push(format!("{algo}: df=0.5 {:.2}% vs df=1 {:.2}%", pp(half), pp(one)));
    }
    outcome(ok, parts.join("; "))
}

fn client_count_effect(runner: &mut Runner) -> Outcome {
    let at = |n: usize| {
        move |s| RunSpec {
            selected: n,
            total: 40,
            ..RunSpec::new("apb_lap", 20.0, s)
        }
    };
    let ten = runner.mean_final(at(10));
    let twenty = runner.mean_final(at(20));
    outcome(
        twenty >= ten - 0.01,
        format!("M=40: N=20 {:.2}% vs N=10 {:.2}%", pp(twenty), pp(ten)),
    )
}

/// Nearest-rank 90th percentile, recomputed here.
fn p90(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (0.9 * xs.len() as f64 - 1e-9).ceil() as usize;
    xs[rank.max(1) - 1]
}

fn clipping_end_to_end(runner: &Runner) -> Outcome {
    let (mut runs, mut worst_dev, mut ok) = (0, 0.0f64, true);
    for r in runner.cache.iter().filter(|r| r.spec.algo == "apb_gaclip") {
        runs += 1;
        let cfg: Value = serde_json::from_str(&fs::read_to_string(r.dir.join("config_echo.json")).unwrap()).unwrap();
        let tau = cfg["dp"]["lr_threshold"].as_f64().unwrap();
        let mut theta = cfg["dp"]["initial_threshold"].as_f64().unwrap();
        for row in &r.rounds {
            let round = &row["round"];
            let recorded = num(row, "threshold");
            worst_dev = worst_dev.max((recorded - theta).abs() / theta);
            let norms: Vec<f64> = r
                .clients
                .iter()
                .filter(|c| &c["round"] == round)
                .map(|c| num(c, "prenoise_l2"))
                .collect();
            ok &= norms.iter().all(|&n| n <= recorded);
            if !norms.is_empty() {
                theta = ((1.0 - tau) * theta + tau * p90(norms)).max(1e-9);
            }
        }
    }
    ok &= worst_dev <= 1e-12 && runs > 0;
    outcome(ok, format!("{runs} runs, max relative threshold replay deviation {worst_dev:.2e}"))
}

fn determinism(runner: &Runner) -> Outcome {
    let picks: Vec<RunSpec> = ["no_dp", "apb_lap", "apb_gauss", "apb_gaclip"]
        .iter()
        .filter_map(|a| runner.cache.iter().find(|r| r.spec.algo == *a).map(|r| r.spec))
        .collect();
    let tmp = tempfile::tempdir().unwrap();
    let mut same = true;
    for (i, spec) in picks.iter().enumerate() {
        let dir = tmp.path().join(i.to_string());
        run_experiment(&spec.config(&dir)).unwrap();
        let first = runner.cache.iter().find(|r| r.spec == *spec).unwrap();
        for f in ["rounds.csv", "clients.csv"] {
            same &= fs::read(dir.join(f)).unwrap() == fs::read(first.dir.join(f)).unwrap();
        }
    }
    outcome(same && picks.len() == 4, format!("{} configs repeated byte-for-byte", picks.len()))
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let specs = [
        ModelSpec::logistic(8, 3),
        ModelSpec {
            hidden_layers: vec![16],
            ..ModelSpec::logistic(8, 3)
        },
    ];
    for spec in &specs {
        let data = generate_blobs(3, 8, 10, 0.2, 7).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let model = init_model(spec, 3).unwrap();
        let anchor = model.params().clone();
        let g = gradient(&model, &data, &idx, &anchor, 0.0);
        let h = 1e-5;
        for (i, gi) in g.iter().enumerate() {
            let shift = |d: f64| {
                let mut p = model.params().as_slice().to_vec();
                p[i] += d;
                model.with_params(ParamVector::new(p).unwrap()).unwrap()
            };
            let fd = (objective(&shift(h), &data, &idx, &anchor, 0.0) - objective(&shift(-h), &data, &idx, &anchor, 0.0))
                / (2.0 * h);
            worst = worst.max((fd - gi).abs() / gi.abs().max(fd.abs()).max(1e-6));
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} (logistic and one-hidden-layer)"))
}

fn main() {
    let mut runner = Runner {
        root: tempfile::tempdir().expect("temp dir"),
        cache: Vec::new(),
    };
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        if !o.passed {
            failures += 1;
        }
        println!(
            "{} [{id:>2}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "formula oracles", &mut formula_oracles);
    report(2, "mechanism statistics", &mut mechanism_statistics);
    report(3, "empirical differential privacy", &mut empirical_dp);
    report(6, "epsilon-accuracy monotonicity", &mut || epsilon_monotonicity(&mut runner));
    report(7, "laplace vs gaussian", &mut || laplace_vs_gaussian(&mut runner));
    report(8, "sensitivity effect", &mut || sensitivity_effect(&mut runner));
    report(9, "client-count effect", &mut || client_count_effect(&mut runner));
    report(4, "budget decay bound", &mut || budget_decay(&mut runner));
    report(5, "reset behavior", &mut || reset_behavior(&runner));
    report(10, "clipping end-to-end", &mut || clipping_end_to_end(&runner));
    report(11, "determinism", &mut || determinism(&runner));
    report(12, "gradient correctness", &mut gradient_check);
    println!("acceptance: {} runs, {failures} criteria failed", runner.cache.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
