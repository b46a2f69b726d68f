//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Thresholds below are pinned. Calibrated ones record where they came from.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmsurv::cohort::{
    generate_synthetic, Mask, MissingnessScenario, ModalityId, ModalitySchema, SynthConfig,
};
use mmsurv::fusion::{
    dropout_rng, modality_dropout, model_footprint, recon_loss, DropoutPolicy, FusionConfig,
    FusionModel, FusionStrategy, ModalityVectors, Reconstruction,
};
use mmsurv::gradcheck::{run_suite, GradCheckOptions};
use mmsurv::pipeline::{
    ablation_cells, run_ablation_grid, ExperimentCell, GridOptions, PipelineConfig, Regime,
};
use mmsurv::survival::{concordance_index, cox_loss, SurvivalBatch};
use mmsurv::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const COX_ABS_TOL: f64 = 1e-9;
const SHIFT_ABS_TOL: f64 = 1e-10;
const RECON_HAND_TOL: f64 = 1e-12;
const DROPOUT_DRAWS: usize = 1_000_000;
const DROPOUT_REL_TOL: f64 = 0.01;
const SEEDS: u64 = 10;
const RECOVERY_HEADLINE: f64 = 0.70;
/// Median oracle c-index of the ten acceptance test cohorts (0.8633) minus 0.12.
const RECOVERY_FLOOR: f64 = 0.7433;
const RECOVERY_BUDGET: Duration = Duration::from_secs(600);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 gradient oracle suite", gradient_suite),
        ("2 cox loss equivalence", cox_equivalence),
        ("3 c-index equivalence", cindex_equivalence),
        ("4 reconstruction loss semantics", recon_semantics),
        ("5 dropout distribution", dropout_distribution),
        ("6 synthetic recovery", synthetic_recovery),
        ("7 directional trends", directional_trends),
        ("8 footprint ordering", footprint_ordering),
        ("9 cli reproducibility", cli_reproducibility),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let o = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "criterion {name:<34} {}  ({:.1?})  {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(&GradCheckOptions::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed() || r.instances < 50)
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        bad.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} checks, worst rel error {worst:.2e}, {elapsed:.1?}{}",
            reports.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!(", failing: {bad:?}")
            }
        ),
    )
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    tie_levels: u32,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=max_n);
    let hazards = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let times = (0..n)
        .map(|_| f64::from(rng.random_range(1..=tie_levels)))
        .collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    if !events.iter().any(|&e| e) {
        events[0] = true;
    }
    (hazards, times, events)
}

/// Negative partial log-likelihood with explicit risk-set loops, no logsumexp.
fn cox_oracle(h: &[f64], t: &[f64], e: &[bool]) -> f64 {
    let mut loss = 0.0;
    for i in 0..h.len() {
        if e[i] {
            let denom: f64 = (0..h.len())
                .filter(|&j| t[j] >= t[i])
                .map(|j| h[j].exp())
                .sum();
            loss -= h[i] - denom.ln();
        }
    }
    loss
}

fn cox_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (h, t, e) = random_batch(&mut rng, 20, 6);
        let got = cox_loss(&SurvivalBatch::new(&h, &t, &e).unwrap()).unwrap();
        worst = worst.max((got - cox_oracle(&h, &t, &e)).abs());
        let c = rng.random_range(-30.0..30.0);
        let shifted: Vec<f64> = h.iter().map(|x| x + c).collect();
        let moved = cox_loss(&SurvivalBatch::new(&shifted, &t, &e).unwrap()).unwrap();
        worst_shift = worst_shift.max((moved - got).abs());
    }
    outcome(
        worst <= COX_ABS_TOL && worst_shift <= SHIFT_ABS_TOL,
        format!("200 batches, max |loss - oracle| {worst:.1e}, max shift change {worst_shift:.1e}"),
    )
}

fn cindex_oracle(r: &[f64], t: &[f64], e: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if e[i] && t[i] < t[j] {
                den += 1.0;
                num += if r[i] > r[j] {
                    1.0
                } else if r[i] == r[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn cindex_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut mismatches) = (0, 0);
    while checked < 200 {
        let (_, t, e) = random_batch(&mut rng, 30, 8);
        // Few risk levels force risk ties.
        let r: Vec<f64> = t
            .iter()
            .map(|_| f64::from(rng.random_range(0..5)))
            .collect();
        let Some(want) = cindex_oracle(&r, &t, &e) else {
            assert!(matches!(
                concordance_index(&r, &t, &e),
                Err(Error::NoComparablePairs)
            ));
            continue;
        };
        checked += 1;
        let got = concordance_index(&r, &t, &e).unwrap();
        let affine: Vec<f64> = r.iter().map(|x| 2.5 * x + 1.0).collect();
        let cubic: Vec<f64> = r.iter().map(|x| x * x * x + x).collect();
        let exp: Vec<f64> = r.iter().map(|x| x.exp()).collect();
        let same = [affine, cubic, exp]
            .iter()
            .all(|m| concordance_index(m, &t, &e).unwrap() == got);
        mismatches += usize::from(got != want || !same);
    }
    outcome(
        mismatches == 0,
        format!("{checked} batches with tied times and risks, {mismatches} mismatches"),
    )
}

fn recon_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..6);
        let alpha: Vec<Mask> = (0..n)
            .map(|_| loop {
                let m = Mask::new(std::array::from_fn(|_| rng.random_bool(0.5)));
                if !m.is_empty() {
                    break m;
                }
            })
            .collect();
        let targets: Vec<ModalityVectors> = alpha
            .iter()
            .map(|a| {
                std::array::from_fn(|v| {
                    a.get(ModalityId::from_index(v).unwrap())
                        .then(|| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                })
            })
            .collect();
        let refs: Vec<&ModalityVectors> = targets.iter().collect();
        let recon: Vec<Reconstruction> = (0..n)
            .map(|_| std::array::from_fn(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let base = recon_loss(&recon, &refs, &alpha).unwrap();
        let mut noisy = recon.clone();
        for (r, a) in noisy.iter_mut().zip(&alpha) {
            for (v, block) in r.iter_mut().enumerate() {
                if !a.get(ModalityId::from_index(v).unwrap()) {
                    block
                        .iter_mut()
                        .for_each(|x| *x = rng.random_range(-1e6..1e6));
                }
            }
        }
        changed += usize::from(recon_loss(&noisy, &refs, &alpha).unwrap() != base);
    }

    // One sample, alpha (1,0,0,0), distance 3: loss 3.
    let t: ModalityVectors = [Some(vec![0.0, 0.0]), None, None, None];
    let r: Reconstruction = [
        vec![3.0, 0.0],
        vec![9.0, 9.0],
        vec![9.0, 9.0],
        vec![9.0, 9.0],
    ];
    let one = recon_loss(&[r], &[&t], &[Mask::new([true, false, false, false])]).unwrap();
    // Counts 2 and 3 with distances summing to 10: loss 2.
    let z = || Some(vec![0.0, 0.0]);
    let t0: ModalityVectors = [z(), z(), None, None];
    let t1: ModalityVectors = [None, z(), z(), z()];
    let r0: Reconstruction = [
        vec![1.0, 0.0],
        vec![0.0, 2.0],
        vec![7.0, 7.0],
        vec![7.0, 7.0],
    ];
    let r1: Reconstruction = [
        vec![7.0, 7.0],
        vec![3.0, 0.0],
        vec![0.0, 0.0],
        vec![0.0, 4.0],
    ];
    let two = recon_loss(
        &[r0, r1],
        &[&t0, &t1],
        &[
            Mask::new([true, true, false, false]),
            Mask::new([false, true, true, true]),
        ],
    )
    .unwrap();
    let hand_ok = (one - 3.0).abs() <= RECON_HAND_TOL && (two - 2.0).abs() <= RECON_HAND_TOL;
    outcome(
        changed == 0 && hand_ok,
        format!("500 perturbed batches, {changed} changed; hand batches {one} and {two}"),
    )
}

fn dropout_distribution() -> Outcome {
    // Exact marginal with the empty set excluded: 8 of 15 equally likely subsets keep a given modality.
    let exact = 8.0 / 15.0;
    let mut rng = dropout_rng(5);
    let policy = DropoutPolicy::default();
    let (mut kept, mut empty) = ([0usize; 4], 0);
    for _ in 0..DROPOUT_DRAWS {
        let m = modality_dropout(Mask::new([true; 4]), &policy, &mut rng).unwrap();
        empty += usize::from(m.is_empty());
        for (k, f) in kept.iter_mut().zip(m.flags()) {
            *k += usize::from(f);
        }
    }
    let freqs: Vec<f64> = kept
        .iter()
        .map(|&k| k as f64 / DROPOUT_DRAWS as f64)
        .collect();
    let worst = freqs
        .iter()
        .map(|f| (f - exact).abs() / exact)
        .fold(0.0, f64::max);
    outcome(
        worst < DROPOUT_REL_TOL && empty == 0,
        format!("frequencies {freqs:.4?} vs {exact:.4}, worst rel deviation {worst:.4}, {empty} empty masks"),
    )
}

/// Ten-seed mean-vector sweep shared by criteria 6 and 7.
struct Sweep {
    cells: Vec<ExperimentCell>,
    scenarios: Vec<String>,
    /// cindex[cell][scenario][seed]
    cindex: Vec<Vec<Vec<f64>>>,
    oracle: Vec<f64>,
    elapsed: Duration,
}

impl Sweep {
    fn median(&self, cell: &ExperimentCell, scenario: &str) -> f64 {
        let c = self
            .cells
            .iter()
            .position(|x| x == cell)
            .expect("cell in sweep");
        let s = self
            .scenarios
            .iter()
            .position(|x| x == scenario)
            .expect("scenario in sweep");
        median(&self.cindex[c][s])
    }
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sweep() -> &'static Sweep {
    static SWEEP: std::sync::OnceLock<Sweep> = std::sync::OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let schema = ModalitySchema::synthetic_default();
        let cells: Vec<ExperimentCell> = ablation_cells()
            .into_iter()
            .filter(|c| c.strategy == FusionStrategy::MeanVector)
            .collect();
        let scenarios: Vec<String> = MissingnessScenario::standard()
            .iter()
            .map(|s| s.name().to_string())
            .collect();
        let mut cindex = vec![vec![Vec::new(); scenarios.len()]; cells.len()];
        let mut oracle = Vec::new();
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        for seed in 0..SEEDS {
            let cohort = |n, s| {
                generate_synthetic(
                    &SynthConfig {
                        n,
                        ..Default::default()
                    },
                    &schema,
                    s,
                )
                .unwrap()
            };
            let (train, test) = (cohort(500, 2 * seed), cohort(200, 2 * seed + 1));
            oracle.push(
                concordance_index(
                    test.ground_truth_risk().unwrap(),
                    &test.times(),
                    &test.events(),
                )
                .unwrap(),
            );
            let mut pipeline = PipelineConfig::new(seed);
            pipeline.bootstrap = 0;
            let mut options = GridOptions::new(pipeline);
            options.workers = workers;
            let report = run_ablation_grid(&train, &test, &cells, &options).unwrap();
            for (ci, cell) in cells.iter().enumerate() {
                for (si, s) in scenarios.iter().enumerate() {
                    cindex[ci][si].push(report.cindex(cell, s).expect("cell trained"));
                }
            }
        }
        Sweep {
            cells,
            scenarios,
            cindex,
            oracle,
            elapsed: start.elapsed(),
        }
    })
}

fn synthetic_recovery() -> Outcome {
    let s = sweep();
    let mmd = s.median(&ExperimentCell::mmd(), "complete");
    let oracle = median(&s.oracle);
    let floor = RECOVERY_FLOOR.max(RECOVERY_HEADLINE);
    outcome(
        mmd >= floor && s.elapsed < RECOVERY_BUDGET,
        format!(
            "median MMD c-index {mmd:.4} over {SEEDS} seeds vs floor {floor:.4} (median oracle {oracle:.4}); \
             sweep of {} cells took {:.0?}",
            s.cells.len(),
            s.elapsed
        ),
    )
}

fn directional_trends() -> Outcome {
    let s = sweep();
    let mv = |s1, s2, d, r| ExperimentCell::new(FusionStrategy::MeanVector, s1, s2, d, r);
    let mut notes = Vec::new();
    let mut a_ok = true;
    for (d, r) in [(false, false), (true, false), (false, true), (true, true)] {
        for sc in &s.scenarios {
            let all = s.median(&mv(Regime::All, Regime::All, d, r), sc);
            let complete = s.median(&mv(Regime::All, Regime::Complete, d, r), sc);
            if all <= complete {
                a_ok = false;
                notes.push(format!(
                    "(a) dropout={d} recon={r} {sc}: C+M {all:.4} <= C {complete:.4}"
                ));
            }
        }
    }
    let target = ExperimentCell::mmd();
    let sc = "gene-pathology-missing";
    let best = s
        .cells
        .iter()
        .map(|c| (c, s.median(c, sc)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let b_ok = *best.0 == target;
    if !b_ok {
        notes.push(format!(
            "(b) best under {sc} is {} at {:.4}; {target} has {:.4}",
            best.0,
            best.1,
            s.median(&target, sc)
        ));
    }
    let summary = format!(
        "(a) {} (b) {}",
        if a_ok {
            "holds on all 4 pairs x 3 scenarios"
        } else {
            "violated"
        },
        if b_ok { "holds" } else { "violated" }
    );
    outcome(
        a_ok && b_ok,
        if notes.is_empty() {
            summary
        } else {
            format!("{summary}; {}", notes.join("; "))
        },
    )
}

fn footprint_ordering() -> Outcome {
    let dense = |dims: &[usize]| dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let expected = [
        (FusionStrategy::Concatenation, dense(&[128, 64, 1])),
        (
            FusionStrategy::MeanVector,
            4 * dense(&[32, 64, 128]) + dense(&[128, 64, 1]),
        ),
        (
            FusionStrategy::TensorFusion,
            4 * dense(&[32, 8]) + dense(&[6561, 64, 1]),
        ),
    ];
    let mut counts = Vec::new();
    let mut exact = true;
    for (s, want) in expected {
        let fp = model_footprint(&FusionModel::new(FusionConfig::new(s), 0).unwrap());
        exact &= fp.total == want && fp.bytes == 8 * want;
        counts.push(fp.total);
    }
    let ordered = counts[2] > counts[1] && counts[1] > counts[0];
    outcome(
        exact && ordered,
        format!(
            "concat {} < mean {} < tensor {}",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mmsurv"))
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| {
            std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() || !a.join(n).exists()
        })
        .map(|n| n.to_string())
        .collect()
}

fn cli_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let quick = [
        "--stage1-epochs",
        "5",
        "--fusion-epochs",
        "2",
        "--bootstrap",
        "50",
    ];
    let mut diffs = Vec::new();
    let mut failures = Vec::new();
    for run in ["a", "b"] {
        let ok = run_cli(
            &[
                "synth",
                "--n",
                "160",
                "--test-n",
                "80",
                "--seed",
                "7",
                "--out",
                &format!("synth-{run}"),
            ],
            dir,
        ) && run_cli(
            &[
                &[
                    "train-fuse",
                    "--data",
                    "synth-a/train.csv",
                    "--seed",
                    "3",
                    "--out",
                    &format!("fuse-{run}"),
                ][..],
                &quick,
            ]
            .concat(),
            dir,
        ) && run_cli(
            &[
                &[
                    "ablate",
                    "--train",
                    "synth-a/train.csv",
                    "--test",
                    "synth-a/test.csv",
                    "--seed",
                    "3",
                ][..],
                &[
                    "--workers",
                    if run == "a" { "1" } else { "3" },
                    "--out",
                    &format!("ablate-{run}"),
                ],
                &quick,
            ]
            .concat(),
            dir,
        );
        if !ok {
            failures.push(run);
        }
    }
    diffs.extend(same_files(
        &dir.join("synth-a"),
        &dir.join("synth-b"),
        &["train.csv", "test.csv", "schema.json"],
    ));
    diffs.extend(same_files(
        &dir.join("fuse-a"),
        &dir.join("fuse-b"),
        &["model.json", "trace.json"],
    ));
    diffs.extend(same_files(
        &dir.join("ablate-a"),
        &dir.join("ablate-b"),
        &["report.csv", "report.json", "report.md"],
    ));
    let md = std::fs::read_to_string(dir.join("ablate-a/report.md")).unwrap_or_default();
    let scenarios_listed = ["complete", "pathology-missing", "gene-pathology-missing"]
        .iter()
        .all(|s| md.contains(s));
    outcome(
        failures.is_empty() && diffs.is_empty() && scenarios_listed,
        format!(
            "synth, train-fuse and ablate (1 vs 3 workers) run twice; differing files {diffs:?}; failed runs {failures:?}"
        ),
    )
}
