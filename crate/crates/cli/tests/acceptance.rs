//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The real-data check is skipped unless a LightGCN-format Gowalla directory
//! is given: `cargo test -p pderank-cli --test acceptance -- --gowalla DIR`
//! or `PDERANK_GOWALLA_DIR=DIR`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pderank::dataset::infer_bounds;
use pderank::metrics::top_k;
use pderank::oracle::{exact_risk, OracleInstance};
use pderank::verify::{
    self, random_dataset, random_model, PropertyResult, VerifyOptions, VerifyReport,
};
use pderank::{
    evaluate, evaluate_scorer, generate_synthetic, load_interactions, ndcg_at_k,
    planted_test_split, propagate, rank_items, train, train_step, Backbone, EmbeddingModel,
    InteractionDataset, MiniBatch, Optimiser, OptimiserState, Popularity, RiskKind, TrainConfig,
    Trainer,
};

enum Status {
    Pass,
    Fail,
    Skip,
}

type Criterion = Box<dyn FnOnce() -> Outcome>;

struct Outcome {
    status: Status,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn suite() -> &'static (VerifyReport, f64) {
    static REPORT: OnceLock<(VerifyReport, f64)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let start = Instant::now();
        let report = verify::run(&VerifyOptions {
            trials: 100,
            seed: 20_240_601,
            ..VerifyOptions::default()
        })
        .expect("oracle suite runs");
        (report, start.elapsed().as_secs_f64())
    })
}

fn properties(names: &[&str]) -> Vec<&'static PropertyResult> {
    let (report, _) = suite();
    names
        .iter()
        .map(|n| {
            report
                .properties
                .iter()
                .find(|p| p.name == *n)
                .unwrap_or_else(|| panic!("property {n} missing"))
        })
        .collect()
}

fn summarise(props: &[&PropertyResult], min_trials: usize) -> Outcome {
    let ok = props.iter().all(|p| p.passed && p.trials >= min_trials);
    let detail = props
        .iter()
        .map(|p| {
            format!(
                "{} {}x max {:.1e} (tol {:.0e})",
                p.name, p.trials, p.max_deviation, p.tolerance
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    pass_if(ok, detail)
}

fn oracle_identities() -> Outcome {
    let mut out = summarise(
        &properties(&[
            "kld_identity",
            "nll_vs_expected_score_risk",
            "optimal_generator_dominates",
            "w1_primal_equals_dual",
        ]),
        100,
    );
    let elapsed = suite().1;
    if elapsed >= 60.0 {
        out.status = Status::Fail;
    }
    out.detail += &format!("; full suite {elapsed:.1}s");
    out
}

fn estimator_consistency() -> Outcome {
    summarise(
        &properties(&["pde_full_batch_equals_exact", "wd_full_batch_equals_exact"]),
        20,
    )
}

fn gradient_checks() -> Outcome {
    summarise(
        &properties(&[
            "grad_pde_mf",
            "grad_pde_lgcn",
            "grad_wd_mf",
            "grad_wd_lgcn",
            "grad_pairwise_mf",
            "grad_pairwise_lgcn",
        ]),
        20,
    )
}

fn clipping_and_lipschitz() -> Outcome {
    let (ds, _) = generate_synthetic(60, 40, 4, 6, 3).unwrap();
    let bound = 2.0;
    let mut worst_norm: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut ok = true;
    for backbone in [Backbone::Mf, Backbone::Lgcn] {
        let cfg = TrainConfig {
            backbone,
            dim: 6,
            layers: 2,
            lambda: 0.0,
            clip_bound: bound,
            learning_rate: 0.2,
            batch_users: 20,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&ds, cfg).unwrap();
        for _ in 0..500 {
            trainer.step().unwrap();
            let model = trainer.model();
            let norm = model.max_row_norm();
            worst_norm = worst_norm.max(norm);
            ok &= norm <= bound + 1e-6;
            if backbone == Backbone::Mf {
                let prop = propagate(model).unwrap();
                for u in 0..model.n_users() {
                    let s = prop.user_scores(u);
                    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                    worst_gap = worst_gap.max(hi - lo);
                }
            }
        }
    }
    ok &= worst_gap <= 2.0 * bound * bound;
    pass_if(
        ok,
        format!(
            "max layer-0 norm {worst_norm:.9} (bound {bound}); max MF score gap {worst_gap:.4} (bound {})",
            2.0 * bound * bound
        ),
    )
}

fn pairwise_bounds() -> Outcome {
    summarise(&properties(&["pairwise_jensen_gap_bounds"]), 1000)
}

fn oracle_instance(model: &EmbeddingModel, ds: &InteractionDataset) -> OracleInstance {
    let prop = propagate(model).unwrap();
    OracleInstance::uniform(
        (0..ds.n_users())
            .map(|u| prop.user_scores(u).to_vec())
            .collect(),
        ds.iter()
            .map(|(_, p)| p.iter().map(|&i| i as usize).collect())
            .collect(),
    )
    .unwrap()
}

fn descent_sanity() -> Outcome {
    let ds = pderank::dataset::parse_interactions("0 0 1\n1 2 3\n2 4 0 2\n", 3, 5).unwrap();
    let cfg = TrainConfig {
        backbone: Backbone::Mf,
        dim: 4,
        lambda: 0.0,
        clip_bound: f64::INFINITY,
        learning_rate: 0.01,
        optimiser: Optimiser::Sgd,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = EmbeddingModel::init(&ds, 4, Backbone::Mf, 0, f64::INFINITY, &mut rng).unwrap();
    {
        // Start away from the origin so the steps are not vanishingly small.
        let (u, i) = model.tables_mut();
        u.mapv_inplace(|x| x * 20.0);
        i.mapv_inplace(|x| x * 20.0);
    }
    let batch = MiniBatch::full(&ds).unwrap();
    let mut state = OptimiserState::new(Optimiser::Sgd, &model);
    let mut risks = vec![exact_risk(&oracle_instance(&model, &ds))];
    for it in 1..=10 {
        train_step(&mut model, &batch, &cfg, &mut state, &mut rng, it).unwrap();
        risks.push(exact_risk(&oracle_instance(&model, &ds)));
    }
    let ok = risks.windows(2).all(|w| w[1] <= w[0]);
    pass_if(
        ok,
        format!(
            "exact risk {:.6} -> {:.6} over 10 sgd steps",
            risks[0], risks[10]
        ),
    )
}

// Calibrated with training seeds 1, 2, 3 on the seed-1 dataset: mean - 3 sd.
// Rerun with `-- --calibrate`.
const PDE_FLOOR: f64 = 0.0568;
const WD_FLOOR: f64 = 0.0355;

fn recovery_config(risk: RiskKind, seed: u64) -> TrainConfig {
    TrainConfig {
        risk,
        backbone: Backbone::Mf,
        dim: 8,
        lambda: 0.001,
        clip_bound: 5.0,
        learning_rate: 0.005,
        optimiser: Optimiser::ADAM,
        batch_users: 200,
        max_iterations: 2000,
        eval_every: 0,
        seed,
        record_timing: false,
        ..TrainConfig::default()
    }
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let (train_ds, truth) = generate_synthetic(200, 500, 8, 20, 1).unwrap();
    let test = planted_test_split(&train_ds, &truth, 20).unwrap();
    let pop = evaluate_scorer(&Popularity::fit(&train_ds), &train_ds, &test, 20)
        .unwrap()
        .ndcg;
    let mut detail = format!("popularity {pop:.4}");
    let mut ok = true;
    for (risk, floor) in [(RiskKind::Pde, PDE_FLOOR), (RiskKind::Wd, WD_FLOOR)] {
        let (model, _) = train(&train_ds, None, &recovery_config(risk, 1)).unwrap();
        let ndcg = evaluate(&model, &train_ds, &test, 20).unwrap().ndcg;
        ok &= ndcg > pop && ndcg >= floor;
        detail += &format!(
            "; {risk}-mf {ndcg:.4} (margin {:+.4}, floor {floor})",
            ndcg - pop
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 300.0;
    detail += &format!("; {elapsed:.0}s");
    pass_if(ok, detail)
}

fn calibrate() {
    let (train_ds, truth) = generate_synthetic(200, 500, 8, 20, 1).unwrap();
    let test = planted_test_split(&train_ds, &truth, 20).unwrap();
    for risk in [RiskKind::Pde, RiskKind::Wd] {
        let runs: Vec<f64> = (1..=3)
            .map(|seed| {
                let (model, _) = train(&train_ds, None, &recovery_config(risk, seed)).unwrap();
                evaluate(&model, &train_ds, &test, 20).unwrap().ndcg
            })
            .collect();
        let mean = runs.iter().sum::<f64>() / 3.0;
        let sd = (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        println!(
            "{risk}-mf ndcg@20 {runs:?} mean {mean:.5} sd {sd:.5} floor {:.4}",
            mean - 3.0 * sd
        );
    }
}

fn metric_correctness() -> Outcome {
    let single = ndcg_at_k(&[4, 7, 1], &[7], 20).unwrap();
    let expect = 2f64.ln() / 3f64.ln();
    let mut ok = (single - expect).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..100 {
        let ds = random_dataset(
            rng.random_range(1..=6),
            rng.random_range(2..=40),
            false,
            &mut rng,
        );
        let model = random_model(&ds, 3, Backbone::Mf, 0, 1.0, &mut rng);
        let prop = propagate(&model).unwrap();
        let k = rng.random_range(1..=45);
        for u in 0..ds.n_users() {
            let s = prop.user_scores(u);
            let mut oracle: Vec<u32> = (0..ds.n_items() as u32)
                .filter(|&i| !ds.contains(u, i))
                .collect();
            oracle.sort_by(|&a, &b| s[b as usize].total_cmp(&s[a as usize]).then(a.cmp(&b)));
            oracle.truncate(k);
            if rank_items(&model, &prop, u, ds.positives(u), k).unwrap() != oracle {
                mismatches += 1;
            }
        }
    }
    ok &= mismatches == 0;

    let ds = random_dataset(50, 60, false, &mut rng);
    let model = random_model(&ds, 4, Backbone::Lgcn, 2, 1.0, &mut rng);
    let prop = propagate(&model).unwrap();
    let mut leaks = 0;
    for u in 0..50 {
        let scores = prop.user_scores(u).to_vec();
        let ranked = top_k(&scores, ds.positives(u), ds.n_items());
        ok &= ranked.len() == ds.n_items() - ds.positives(u).len();
        leaks += ranked.iter().filter(|&&i| ds.contains(u, i)).count();
    }
    ok &= leaks == 0;
    pass_if(
        ok,
        format!(
            "ndcg single@2 {single:.15} vs {expect:.15}; rank mismatches {mismatches}; train leaks {leaks}"
        ),
    )
}

fn gowalla(dir: Option<PathBuf>) -> Outcome {
    let Some(dir) = dir else {
        return Outcome {
            status: Status::Skip,
            detail: "pass --gowalla DIR or set PDERANK_GOWALLA_DIR".into(),
        };
    };
    let (train_path, test_path) = (dir.join("train.txt"), dir.join("test.txt"));
    let (n_users, n_items) = infer_bounds(&[&train_path, &test_path]).unwrap();
    let train_ds = load_interactions(&train_path, n_users, n_items).unwrap();
    let test = load_interactions(&test_path, n_users, n_items).unwrap();
    let env = |key: &str, default: f64| {
        std::env::var(key)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let cfg = TrainConfig {
        risk: RiskKind::Pde,
        backbone: Backbone::Mf,
        dim: 64,
        batch_users: 2500,
        lambda: env("PDERANK_GOWALLA_LAMBDA", 1e-4),
        learning_rate: env("PDERANK_GOWALLA_LR", 0.01),
        clip_bound: env("PDERANK_GOWALLA_CLIP", 5.0),
        max_iterations: env("PDERANK_GOWALLA_ITERATIONS", 3000.0) as usize,
        eval_every: 250,
        ..TrainConfig::default()
    };
    let (_, history) = train(&train_ds, Some(&test), &cfg).unwrap();
    let best = history.best().expect("evaluated at least once");
    let (recall, ndcg) = (best.recall.unwrap(), best.ndcg.unwrap());
    let within = |x: f64, target: f64| (x / target - 1.0).abs() <= 0.15;
    pass_if(
        within(recall, 0.1512) && within(ndcg, 0.1224),
        format!(
            "best at iteration {}: recall@20 {recall:.4} (target 0.1512), ndcg@20 {ndcg:.4} (target 0.1224)",
            best.iteration
        ),
    )
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_pderank"))
        .args(args)
        .env_remove("PDERANK_SEED")
        .output()
        .expect("binary runs");
    assert!(
        status.status.success(),
        "pderank {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = p("data");
    run_cli(&[
        "synth",
        "--n-users",
        "80",
        "--n-items",
        "120",
        "--dim",
        "4",
        "--seed",
        "5",
        "--out",
        &data,
    ]);
    let mut ok = true;
    let mut detail = Vec::new();
    for (model, risk) in [("lgcn", "pde"), ("mf", "pairwise-ans")] {
        let (a, b) = (p(&format!("{model}-a")), p(&format!("{model}-b")));
        run_cli(&[
            "train",
            "--data",
            &data,
            "--out",
            &a,
            "--model",
            model,
            "--risk",
            risk,
            "--dim",
            "8",
            "--layers",
            "2",
            "--batch-users",
            "16",
            "--max-iterations",
            "60",
            "--eval-every",
            "20",
            "--seed",
            "9",
            "--threads",
            "1",
            "--no-timing",
        ]);
        let manifest = Path::new(&a).join("manifest.toml");
        run_cli(&["train", "--config", manifest.to_str().unwrap(), "--out", &b]);
        for file in ["checkpoint.txt", "history.csv"] {
            let same = std::fs::read(Path::new(&a).join(file)).unwrap()
                == std::fs::read(Path::new(&b).join(file)).unwrap();
            ok &= same;
            detail.push(format!(
                "{model}/{file} {}",
                if same { "identical" } else { "DIFFER" }
            ));
        }
    }
    pass_if(ok, detail.join(", "))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let gowalla_dir = args
        .iter()
        .position(|a| a == "--gowalla")
        .and_then(|i| args.get(i + 1))
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("PDERANK_GOWALLA_DIR").map(PathBuf::from));
    // Listing requests from the test runner have nothing to list.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    if args.iter().any(|a| a == "--calibrate") {
        calibrate();
        return ExitCode::SUCCESS;
    }

    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 oracle identities", Box::new(oracle_identities)),
        ("2 estimator consistency", Box::new(estimator_consistency)),
        ("3 gradient checks", Box::new(gradient_checks)),
        ("4 clipping and lipschitz", Box::new(clipping_and_lipschitz)),
        ("5 pairwise bounds", Box::new(pairwise_bounds)),
        ("6 descent sanity", Box::new(descent_sanity)),
        ("7 synthetic recovery", Box::new(synthetic_recovery)),
        ("8 metric correctness", Box::new(metric_correctness)),
        (
            "9 gowalla spot check",
            Box::new(move || gowalla(gowalla_dir)),
        ),
        ("10 determinism", Box::new(determinism)),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                status: Status::Fail,
                detail: format!("panicked: {msg}"),
            }
        });
        let label = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "criterion {name:<26} {label}  [{:.1}s] {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
