//! Acceptance suite. Every criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails. Run with `--nocapture` to see the table.

use std::path::Path;
use std::time::{Duration, Instant};

use adaptive_safety::config::Config;
use adaptive_safety::constraints::{allocate_threshold, ConstraintSet, PhiParams, SafetyBudget, SafetyLayer, StepInputs};
use adaptive_safety::context::{Context, ContextForecast, TransitionModel, NUM_CONTEXTS};
use adaptive_safety::env::{Action, Condition, MergeEnv, NUM_ACTIONS};
use adaptive_safety::harness::{
    audit, read_runs, run_experiment, seeds, write_outputs, write_summary_to, AggregateRow, Check, Experiment,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Criterion {
    name: &'static str,
    pass: bool,
}

#[derive(Default)]
struct Report {
    rows: Vec<Criterion>,
}

impl Report {
    fn check(&mut self, name: &'static str, pass: bool, detail: impl Into<String>) {
        println!("[{}] {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.into());
        self.rows.push(Criterion { name, pass });
    }
}

fn stat(rows: &[AggregateRow], method: &str, metric: &str) -> (f64, f64) {
    let row = rows.iter().find(|r| r.method == method).unwrap_or_else(|| panic!("no row for {method}"));
    let s = row.stat(metric).unwrap_or_else(|| panic!("no {metric} for {method}"));
    (s.mean, s.std)
}

fn run(report: &mut Report, cfg: &Config, experiment: Experiment, dir: &Path, limit_min: u64) -> Vec<AggregateRow> {
    let start = Instant::now();
    let out = run_experiment(cfg, experiment, Condition::Unseen, &seeds(cfg, 10), 3).unwrap();
    write_outputs(&out.rows, &out.runs, cfg, &dir.join(experiment.name())).unwrap();
    let took = start.elapsed();
    let name = match experiment {
        Experiment::C8Main => "runtime: main comparison",
        Experiment::C7Portability => "runtime: portability",
        Experiment::C5Ablation => "runtime: ablation",
    };
    report.check(name, took <= Duration::from_secs(60 * limit_min), format!("{:.1} s (limit {limit_min} min)", took.as_secs_f64()));
    out.rows
}

fn main_comparison(report: &mut Report, rows: &[AggregateRow]) {
    let (unc, unc_sd) = stat(rows, "unconstrained", "violations");
    let (fixed, _) = stat(rows, "fixed", "violations");
    let (full, full_sd) = stat(rows, "full", "violations");
    report.check(
        "main comparison: violation ordering",
        full < fixed && fixed < unc,
        format!("full {full:.3} < fixed {fixed:.3} < unconstrained {unc:.3}"),
    );
    report.check(
        "main comparison: full vs unconstrained intervals disjoint",
        full + full_sd < unc - unc_sd,
        format!("full [{:.3}, {:.3}] vs unconstrained [{:.3}, {:.3}]", full - full_sd, full + full_sd, unc - unc_sd, unc + unc_sd),
    );
    let (r_unc, _) = stat(rows, "unconstrained", "reward");
    let (r_fixed, _) = stat(rows, "fixed", "reward");
    let (r_full, _) = stat(rows, "full", "reward");
    report.check(
        "main comparison: reward ordering",
        r_unc > r_fixed && r_full >= 0.8 * r_fixed,
        format!("unconstrained {r_unc:.2} > fixed {r_fixed:.2}; full {r_full:.2} >= 0.8 * fixed = {:.2}", 0.8 * r_fixed),
    );
}

fn ablation(report: &mut Report, rows: &[AggregateRow]) {
    let (full, full_sd) = stat(rows, "CB+AS+SH", "violations");
    let mut worse = Vec::new();
    let mut parts = Vec::new();
    for set in ConstraintSet::non_empty_subsets().iter().filter(|s| **s != ConstraintSet::FULL) {
        let (v, _) = stat(rows, &set.to_string(), "violations");
        parts.push(format!("{set} {v:.3}"));
        if full > v + full_sd {
            worse.push(set.to_string());
        }
    }
    report.check(
        "ablation: CB+AS+SH no worse than any partial variant",
        worse.is_empty(),
        format!("CB+AS+SH {full:.3} ± {full_sd:.3} vs {}{}", parts.join(", "), if worse.is_empty() { String::new() } else { format!("; worse than {worse:?}") }),
    );
}

fn portability(report: &mut Report, rows: &[AggregateRow]) {
    let mut ok = true;
    let mut parts = Vec::new();
    for backbone in ["tabular", "heuristic"] {
        let (bare, _) = stat(rows, &format!("{backbone}_unshielded"), "violations");
        let (shielded, _) = stat(rows, &format!("{backbone}_full"), "violations");
        ok &= shielded <= 0.25 * bare;
        parts.push(format!("{backbone} {shielded:.3} vs 0.25 * {bare:.3}"));
    }
    report.check("portability: full shield <= 25% of unshielded", ok, parts.join("; "));
}

fn log_audits(report: &mut Report, dir: &Path) {
    let mut records = Vec::new();
    for e in [Experiment::C8Main, Experiment::C7Portability, Experiment::C5Ablation] {
        records.extend(read_runs(&dir.join(e.name())).unwrap());
    }
    let a = audit(&records);
    report.check(
        "audit: per-step admissibility",
        a.count(Check::Admissibility) == 0 && a.checked_admissible > 0,
        format!(
            "{} of {} non-infeasible shielded steps have h <= 0 ({} infeasible)",
            a.checked_admissible - a.count(Check::Admissibility),
            a.checked_admissible,
            a.infeasible_steps
        ),
    );
    report.check(
        "audit: budget consistency and local cost bound",
        a.count(Check::BudgetConsistency) == 0 && a.count(Check::LocalCostBound) == 0,
        format!(
            "{} budget findings, {} cost-bound findings over {} runs / {} steps",
            a.count(Check::BudgetConsistency),
            a.count(Check::LocalCostBound),
            a.runs,
            a.steps
        ),
    );
}

fn allocator(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa110c);
    let mut failures = 0;
    for _ in 0..1000 {
        let b = rng.random_range(0.0..20.0);
        let n = rng.random_range(1..200usize);
        let r = rng.random_range(0.0..1.0);
        let rho = rng.random_range(0.0..6.0);
        let p = PhiParams { alpha: rng.random_range(0.01..3.0), beta: rng.random_range(0.01..3.0), epsilon: 1e-6 };
        let base = allocate_threshold(b, n, r, rho, &p);
        let more_budget = allocate_threshold(b + rng.random_range(0.0..5.0), n, r, rho, &p);
        let more_steps = allocate_threshold(b, n + rng.random_range(0..50usize), r, rho, &p);
        let more_risk = allocate_threshold(b, n, r + rng.random_range(0.0..1.0), rho, &p);
        let more_pressure = allocate_threshold(b, n, r, rho.max(1.0) + rng.random_range(0.0..3.0), &p);
        let at_pressure = allocate_threshold(b, n, r, rho.max(1.0), &p);
        if !(more_budget >= base && more_steps <= base && more_risk <= base && more_pressure <= at_pressure) {
            failures += 1;
        }
    }
    let zero = PhiParams { alpha: 0.0, beta: 0.0, epsilon: 1e-6 };
    let unit = PhiParams { alpha: 1.0, beta: 1.0, epsilon: 1e-6 };
    // B / (N + eps) with no scaling, and B / (N + eps) / (1 + R) below rho = 1
    let a1 = allocate_threshold(10.0, 10, 0.7, 3.0, &zero);
    let a2 = allocate_threshold(1.0, 1, 1.0, 0.5, &unit);
    let anchors = (a1 - 10.0 / (10.0 + 1e-6)).abs() < 1e-12 && (a1 - 1.0).abs() < 1e-6 && (a2 - 0.5).abs() < 1e-6;
    report.check(
        "allocator: monotonicity probes and anchors",
        failures == 0 && anchors,
        format!("{failures} of 1000 probes violated monotonicity; anchors {a1:.6}, {a2:.6}"),
    );
}

fn predictor(report: &mut Report) {
    let mut persistent = true;
    let model = TransitionModel::new(5.0);
    for c in Context::all() {
        for h in 1..=10 {
            persistent &= model.predict(c, h).sequence == vec![c; h];
        }
    }

    let a = Context::new(0, 0, 0).unwrap();
    let b = Context::new(0, 0, 1).unwrap();
    let mut first = TransitionModel::new(5.0);
    first.set_count(a, b, 3);
    first.set_count(a, a, 1);
    // (1 + 5) / (3 + 1 + 5) against 3 / 9
    let p_stay = first.probability(a, a);
    let first_ok = (p_stay - 6.0 / 9.0).abs() < 1e-12
        && (first.probability(a, b) - 3.0 / 9.0).abs() < 1e-12
        && first.predict(a, 2).sequence == vec![a, a];

    let mut second = TransitionModel::new(1.0);
    second.set_count(a, b, 10);
    second.set_count(b, b, 20);
    // 10 / 11 for the jump, then B keeps (20 + 1) / 21 of its mass
    let second_ok = (second.probability(a, b) - 10.0 / 11.0).abs() < 1e-12
        && (second.probability(b, b) - 1.0).abs() < 1e-12
        && second.predict(a, 3).sequence == vec![b, b, b];

    report.check(
        "predictor: persistence and hand oracles",
        persistent && first_ok && second_ok,
        format!(
            "persistence over {NUM_CONTEXTS} contexts x H=1..10: {persistent}; P(A->A) = {p_stay:.4} (6/9), oracle 1: {first_ok}; oracle 2: {second_ok}"
        ),
    );
}

fn tightening(report: &mut Report) {
    let cfg = Config::default();
    let table = cfg.threshold_table().unwrap();
    let cb = SafetyLayer::adaptive(table.clone(), cfg.phi, cfg.as_, ConstraintSet { cb: true, as_: false, sh: false });
    let cb_as = SafetyLayer::adaptive(table, cfg.phi, cfg.as_, ConstraintSet { cb: true, as_: true, sh: false });
    let mut rng = ChaCha8Rng::seed_from_u64(0x7157);
    let budget = SafetyBudget::new(cfg.harness.budget);
    let (mut samples, mut counterexamples, mut tightened) = (0, 0, 0);
    let mut env_seed = 0u64;
    while samples < 10_000 {
        let mut env = MergeEnv::new(cfg.env.clone(), Condition::Unseen, env_seed);
        env_seed += 1;
        loop {
            let state = env.state().clone();
            let current = state.true_context;
            let forecast = ContextForecast::persistent(current, cfg.context.horizon);
            let rho = 1.0 + rng.random_range(f64::EPSILON..=4.0);
            let inputs = StepInputs {
                current,
                forecast: &forecast,
                budget: &budget,
                remaining_steps: cfg.env.episode_length.saturating_sub(state.time_step).max(1),
                rho,
            };
            let action = Action::ALL[rng.random_range(0..NUM_ACTIONS)];
            let loose = cb.evaluate(&cfg.env, &state, action, &inputs).unwrap();
            let tight = cb_as.evaluate(&cfg.env, &state, action, &inputs).unwrap();
            if tight.admissible && !loose.admissible {
                counterexamples += 1;
            }
            if loose.admissible && !tight.admissible {
                tightened += 1;
            }
            samples += 1;
            let out = env.step(Action::ALL[rng.random_range(0..NUM_ACTIONS)]);
            if out.terminated || samples >= 10_000 {
                break;
            }
        }
    }
    report.check(
        "tightening: CB+AS admissible set within CB-only set",
        counterexamples == 0,
        format!("{counterexamples} counterexamples over {samples} triples with rho > 1 ({tightened} pairs strictly tightened)"),
    );
}

fn determinism(report: &mut Report, cfg: &Config, first: &[AggregateRow]) {
    let again = run_experiment(cfg, Experiment::C8Main, Condition::Unseen, &seeds(cfg, 10), 3).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_summary_to(first, &mut a).unwrap();
    write_summary_to(&again.rows, &mut b).unwrap();
    report.check(
        "determinism: identical summary bytes",
        a == b,
        format!("{} bytes vs {} bytes, equal: {}", a.len(), b.len(), a == b),
    );
}

#[test]
fn acceptance() {
    let cfg = Config::default();
    let dir = tempfile::tempdir().unwrap();
    let mut report = Report::default();

    let c8 = run(&mut report, &cfg, Experiment::C8Main, dir.path(), 15);
    main_comparison(&mut report, &c8);
    let c5 = run(&mut report, &cfg, Experiment::C5Ablation, dir.path(), 10);
    ablation(&mut report, &c5);
    let c7 = run(&mut report, &cfg, Experiment::C7Portability, dir.path(), 5);
    portability(&mut report, &c7);
    log_audits(&mut report, dir.path());
    allocator(&mut report);
    predictor(&mut report);
    tightening(&mut report);
    determinism(&mut report, &cfg, &c8);

    let failed: Vec<&str> = report.rows.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    println!("{} of {} criteria passed", report.rows.len() - failed.len(), report.rows.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
