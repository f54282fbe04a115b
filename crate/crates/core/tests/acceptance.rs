//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
//! any criterion fails. Runs every command on the bundled synthetic task,
//! so it takes several minutes on one core.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boostbert::baselines::{reference_problems, StumpLearner};
use boostbert::boosting::{check_weight_law, compute_alpha, run_boosting, RoundLog};
use boostbert::cli::{self, oracle_gaps, CompareRow, ORACLE_TOL};
use boostbert::encoder::{
    gradients, init_weights, EncoderConfig, InitContext, InitStrategy, LearnerKind, ModelSnapshot,
};
use boostbert::experiment::{FractionRow, MetricsRecord};
use boostbert::textdata::{EncodedExample, CLS, NUM_RESERVED, SEP};

/// Seed for the synthetic task and every run.
const SEED: u64 = 2024;

const ALPHA_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;
const BOOST_GAIN: f64 = 2.0;
const FUSION_SLACK: f64 = 1.0;
const BAG_SLACK: f64 = 0.5;
const TEACHER_SLACK: f64 = 1.0;
const FRACTIONS: [f64; 3] = [0.05, 0.2, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = Result<Outcome, String>;

fn cli_run(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["boostbert"];
    full.extend_from_slice(args);
    match cli::run(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited {code}", args.join(" "))),
    }
}

fn metrics(dir: &Path) -> Result<MetricsRecord, String> {
    MetricsRecord::read_all(&dir.join("metrics.jsonl"))
        .map_err(|e| e.to_string())?
        .pop()
        .ok_or_else(|| format!("no metrics in {}", dir.display()))
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn alpha_identity() -> Check {
    let worst = [2usize, 3, 5, 10, 31]
        .iter()
        .map(|&k| compute_alpha((k - 1) as f64 / k as f64, k).abs())
        .fold(0.0, f64::max);
    Ok(outcome(
        worst <= ALPHA_TOL,
        format!("max |alpha| at chance = {worst:.1e} (tol {ALPHA_TOL:.0e})"),
    ))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let gaps = oracle_gaps(0, 5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = gaps
        .iter()
        .map(|(_, g, _, _)| g.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let names: Vec<&str> = gaps.iter().map(|(n, _, _, _)| n.as_str()).collect();
    Ok(outcome(
        worst <= ORACLE_TOL && secs < 5.0,
        format!(
            "{} problems, M=5, max gap {worst:.1e} (tol {ORACLE_TOL:.0e}), {secs:.2}s",
            names.join("/")
        ),
    ))
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, k: usize) -> Vec<EncodedExample> {
    (0..5)
        .map(|i| {
            let len = rng.random_range(1..6);
            let mut token_ids = vec![CLS];
            token_ids.extend((0..len).map(|_| rng.random_range(NUM_RESERVED as u32..vocab as u32)));
            token_ids.push(SEP);
            let mut segment_ids = vec![0u8; token_ids.len()];
            if i % 2 == 1 {
                token_ids.push(rng.random_range(NUM_RESERVED as u32..vocab as u32));
                token_ids.push(SEP);
                segment_ids.resize(token_ids.len(), 1);
            }
            EncodedExample {
                token_ids,
                segment_ids,
                label_id: rng.random_range(0..k),
                weight: 1.0,
            }
        })
        .collect()
}

/// Worst per-group relative error between analytic and central-difference
/// gradients.
fn worst_group_error(
    model: &ModelSnapshot,
    batch: &[EncodedExample],
    weights: &[f64],
) -> (String, f64) {
    let (analytic, _) = gradients(model, batch, weights).expect("gradients");
    let mut probe = model.clone();
    let mut worst = (String::new(), 0.0);
    for entry in model.layout().entries {
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in entry.range() {
            let orig = probe.params[j];
            probe.params[j] = orig + FD_STEP;
            let up = gradients(&probe, batch, weights).expect("loss").1;
            probe.params[j] = orig - FD_STEP;
            let down = gradients(&probe, batch, weights).expect("loss").1;
            probe.params[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            d2 += (numeric - analytic[j]).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        let (a, n) = (a2.sqrt(), n2.sqrt());
        let err = if a.max(n) < 1e-8 {
            d2.sqrt()
        } else {
            d2.sqrt() / (a + n)
        };
        if err > worst.1 || worst.0.is_empty() {
            worst = (entry.name.clone(), err);
        }
    }
    worst
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut groups = 0;
    let mut worst = (String::new(), 0.0f64);
    for learner in [LearnerKind::Transformer, LearnerKind::SoftmaxRegression] {
        let cfg = EncoderConfig {
            learner,
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            max_seq_len: 12,
            dropout_rate: 0.1,
            num_classes: 3,
        };
        let model = init_weights(InitStrategy::Random, &InitContext::new(&cfg, rng.random()))
            .map_err(|e| e.to_string())?;
        let batch = random_batch(&mut rng, cfg.vocab_size, cfg.num_classes);
        let weights: Vec<f64> = (0..batch.len())
            .map(|_| rng.random_range(0.05..4.0))
            .collect();
        groups += model.layout().entries.len();
        let w = worst_group_error(&model, &batch, &weights);
        if w.1 > worst.1 {
            worst = w;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst.1 < FD_TOL && secs < 60.0,
        format!(
            "{groups} groups, weighted batch, worst {} at {:.1e} (tol {FD_TOL:.0e}), {secs:.1}s",
            worst.0, worst.1
        ),
    ))
}

fn weight_law(boost_log: &[RoundLog]) -> Check {
    let mut rounds = 0;
    for seed in 0..3 {
        for p in reference_problems(seed) {
            let mut learner = StumpLearner {
                num_classes: p.num_classes,
            };
            let run = run_boosting(&mut learner, &p.features, &p.labels, p.num_classes, 5)
                .map_err(|e| e.to_string())?;
            for (r, log) in run.rounds.iter().zip(&run.log) {
                check_weight_law(
                    r.round,
                    &r.weights_before,
                    &r.weights_after,
                    &r.predictions,
                    &p.labels,
                    r.alpha,
                )
                .map_err(|e| e.to_string())?;
                if !(log.wrong_fraction_after > log.wrong_fraction_before) {
                    return Ok(outcome(
                        false,
                        format!(
                            "{} round {}: misclassified mass did not grow",
                            p.name, r.round
                        ),
                    ));
                }
                rounds += 1;
            }
        }
    }
    let kept: Vec<&RoundLog> = boost_log.iter().filter(|l| l.kept).collect();
    let grew = kept.iter().all(|l| {
        l.wrong_fraction_after > l.wrong_fraction_before || l.wrong_fraction_before == 0.0
    });
    Ok(outcome(
        grew && !kept.is_empty(),
        format!(
            "{rounds} stump rounds and {} encoder rounds: total weight law holds, misclassified mass grows",
            kept.len()
        ),
    ))
}

struct MainRun {
    dir: PathBuf,
    metrics: MetricsRecord,
    secs: f64,
}

fn train_boost(config: &Path, out: &Path, extra: &[&str]) -> Result<MainRun, String> {
    let start = Instant::now();
    let mut args = vec!["train-boost", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    cli_run(&args)?;
    Ok(MainRun {
        dir: out.to_path_buf(),
        metrics: metrics(out)?,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn acc(v: Option<f64>, what: &str) -> Result<f64, String> {
    v.ok_or_else(|| format!("{what} accuracy missing"))
}

fn boosting_gain(run: &MainRun) -> Check {
    let single = acc(run.metrics.accuracy.single, "single")?;
    let fusion = acc(run.metrics.accuracy.boost_fusion, "fusion")?;
    let kept = run.metrics.details["rounds_kept"].as_u64().unwrap_or(0);
    Ok(outcome(
        fusion - single >= BOOST_GAIN && run.secs < 600.0,
        format!(
            "boost-fusion {fusion:.2} vs single {single:.2}: {:+.2} (need >= {BOOST_GAIN}), {kept} rounds, {:.0}s",
            fusion - single,
            run.secs
        ),
    ))
}

fn fusion_vs_vote(run: &MainRun) -> Check {
    let fusion = acc(run.metrics.accuracy.boost_fusion, "fusion")?;
    let vote = run.metrics.details["soft_vote"]
        .as_f64()
        .ok_or("soft vote missing")?;
    Ok(outcome(
        fusion >= vote - FUSION_SLACK,
        format!("fusion {fusion:.2} vs soft vote {vote:.2} (need >= vote - {FUSION_SLACK})"),
    ))
}

fn small_data(config: &Path, root: &Path, pretrained: &Path) -> Check {
    let start = Instant::now();
    let out = root.join("fractions");
    let list = FRACTIONS.map(|f| f.to_string()).join(",");
    cli_run(&[
        "fractions",
        "--config",
        s(config),
        "--out",
        s(&out),
        "--pretrained",
        s(pretrained),
        "--fractions",
        &list,
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let rows: Vec<FractionRow> = json(&out.join("fractions.json"))?;
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let inversions = deltas.windows(2).filter(|w| w[1] > w[0]).count();
    let first = deltas[0];
    let last = deltas[deltas.len() - 1];
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:n={} {:+.2}", r.fraction, r.train_size, r.delta))
        .collect();
    Ok(outcome(
        first > last && inversions <= 1 && secs < 900.0,
        format!(
            "delta by fraction [{}], {inversions} inversion(s), {secs:.0}s",
            table.join(", ")
        ),
    ))
}

fn boost_vs_bag(config: &Path, root: &Path, run: &MainRun, pretrained: &Path) -> Check {
    let start = Instant::now();
    let kept = run.metrics.details["rounds_kept"]
        .as_u64()
        .ok_or("rounds_kept missing")?;
    let m = format!("boost.rounds={kept}");
    let out = root.join("bag");
    cli_run(&[
        "train-bag",
        "--config",
        s(config),
        "--out",
        s(&out),
        "--pretrained",
        s(pretrained),
        "--set",
        &m,
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let bag = acc(metrics(&out)?.accuracy.bag, "bag")?;
    let fusion = acc(run.metrics.accuracy.boost_fusion, "fusion")?;
    Ok(outcome(
        fusion >= bag - BAG_SLACK && secs < 900.0,
        format!("boost-fusion {fusion:.2} vs bagging {bag:.2} with M={kept} (need >= bag - {BAG_SLACK}), {secs:.0}s"),
    ))
}

fn distill(teacher: &Path, out: &Path) -> Result<(MetricsRecord, f64), String> {
    let start = Instant::now();
    cli_run(&["distill", "--teacher", s(teacher), "--out", s(out)])?;
    Ok((metrics(out)?, start.elapsed().as_secs_f64()))
}

fn distillation(m: &MetricsRecord, secs: f64) -> Check {
    let single = acc(m.accuracy.single, "single")?;
    let teacher = acc(m.accuracy.teacher, "teacher")?;
    let student = acc(m.accuracy.distilled, "student")?;
    let ratio = m.details["param_ratio"]
        .as_f64()
        .ok_or("param ratio missing")?;
    let members = m.details["teacher_members"].as_u64().unwrap_or(0);
    let speed = m.timing.get("inference_ratio").copied().unwrap_or(f64::NAN);
    Ok(outcome(
        student >= single && student >= teacher - TEACHER_SLACK && secs < 600.0,
        format!(
            "student {student:.2}, single {single:.2}, teacher {teacher:.2}; params ratio {ratio:.3} (1/M = {:.3}), inference time ratio {speed:.2}, {secs:.0}s",
            1.0 / members.max(1) as f64
        ),
    ))
}

fn init_ordering(config: &Path, root: &Path, pretrained: &Path) -> Check {
    let start = Instant::now();
    let out = root.join("compare-init");
    cli_run(&[
        "compare",
        "--config",
        s(config),
        "--out",
        s(&out),
        "--pretrained",
        s(pretrained),
        "--axes",
        "init-strategy",
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let rows: Vec<CompareRow> = json(&out.join("summary.json"))?;
    let score = |name: &str| {
        rows.iter()
            .find(|r| r.init_strategy == name)
            .and_then(CompareRow::accuracy)
    };
    let random = score("random").ok_or("random run failed")?;
    let others: Vec<(String, Option<f64>)> = ["pretrained", "finetuning", "incremental"]
        .iter()
        .map(|n| (n.to_string(), score(n)))
        .collect();
    let pass = others.iter().all(|(_, v)| v.is_some_and(|v| v > random)) && secs < 1200.0;
    let listing: Vec<String> = others
        .iter()
        .map(|(n, v)| format!("{n} {}", v.map_or("failed".into(), |v| format!("{v:.2}"))))
        .collect();
    Ok(outcome(
        pass,
        format!("random {random:.2} vs {}, {secs:.0}s", listing.join(", ")),
    ))
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Result<Vec<String>, String> {
    let mut differ = Vec::new();
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            differ.push(f.to_string());
        }
    }
    Ok(differ)
}

fn determinism(
    first: &MainRun,
    second: &MainRun,
    d1: &(PathBuf, MetricsRecord),
    d2: &(PathBuf, MetricsRecord),
) -> Check {
    let boost_files = [
        "config.toml",
        "vocab.txt",
        "labels.txt",
        "pretrained.bgv",
        "single.bgv",
        "ensemble.bge",
        "fusion.bgf",
        "rounds.jsonl",
        "fusion_log.jsonl",
    ];
    let mut differ = same_files(&first.dir, &second.dir, &boost_files)?;
    differ.extend(same_files(
        &d1.0,
        &d2.0,
        &["student.bgv", "teacher.bgt", "distill_steps.jsonl"],
    )?);
    if first.metrics.without_timing() != second.metrics.without_timing() {
        differ.push("train-boost metrics".into());
    }
    if d1.1.without_timing() != d2.1.without_timing() {
        differ.push("distill metrics".into());
    }
    Ok(outcome(
        differ.is_empty(),
        if differ.is_empty() {
            format!("train-boost and distill reruns byte-identical ({} + 3 artifacts, metrics modulo wall time)", boost_files.len())
        } else {
            format!("differences: {}", differ.join(", "))
        },
    ))
}

fn report(results: &mut Vec<(String, bool)>, name: &str, check: Check) {
    let (pass, detail) = match check {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push((name.to_string(), pass));
}

fn main() {
    let keep = std::env::var_os("BOOSTBERT_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).expect("acceptance dir");
    println!(
        "acceptance suite, seed {SEED}, working in {}",
        root.display()
    );
    let mut results = Vec::new();

    report(&mut results, "1 alpha identity", alpha_identity());
    report(&mut results, "2 oracle equivalence", oracle_equivalence());
    report(
        &mut results,
        "3 gradient correctness",
        gradient_correctness(),
    );

    let data = root.join("task");
    let seed = SEED.to_string();
    if let Err(e) = cli_run(&["gen-data", "--out", s(&data), "--seed", &seed]) {
        println!("FAIL setup: {e}");
        std::process::exit(1);
    }
    let config = data.join("config.toml");
    let main = train_boost(&config, &root.join("boost-a"), &[]);
    let log: Vec<RoundLog> = main
        .as_ref()
        .map(|m| m.metrics.rounds.clone())
        .unwrap_or_default();
    report(&mut results, "4 weight-update law", weight_law(&log));

    match &main {
        Ok(run) => {
            let pretrained = run.dir.join("pretrained.bgv");
            report(&mut results, "5 boosting gain", boosting_gain(run));
            report(
                &mut results,
                "6 small-data amplification",
                small_data(&config, &root, &pretrained),
            );
            report(&mut results, "7 fusion vs vote", fusion_vs_vote(run));
            report(
                &mut results,
                "8 boosting vs bagging",
                boost_vs_bag(&config, &root, run, &pretrained),
            );
            let d1 = distill(&run.dir, &root.join("distill-a"));
            report(
                &mut results,
                "9 distillation",
                d1.as_ref()
                    .map_err(Clone::clone)
                    .and_then(|(m, t)| distillation(m, *t)),
            );
            report(
                &mut results,
                "10 init-strategy ordering",
                init_ordering(&config, &root, &pretrained),
            );
            let again = train_boost(&config, &root.join("boost-b"), &[]);
            let d2 = distill(&root.join("boost-b"), &root.join("distill-b"));
            let check = match (again, d1, d2) {
                (Ok(second), Ok(d1), Ok(d2)) => determinism(
                    run,
                    &second,
                    &(root.join("distill-a"), d1.0),
                    &(root.join("distill-b"), d2.0),
                ),
                (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(e),
            };
            report(&mut results, "11 determinism", check);
        }
        Err(e) => {
            for name in [
                "5 boosting gain",
                "6 small-data amplification",
                "7 fusion vs vote",
                "8 boosting vs bagging",
                "9 distillation",
                "10 init-strategy ordering",
                "11 determinism",
            ] {
                report(&mut results, name, Err(format!("main run failed: {e}")));
            }
        }
    }

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, p)| !p)
        .map(|(n, _)| n.as_str())
        .collect();
    println!(
        "{} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
