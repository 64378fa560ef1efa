//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. Exits
//! non-zero if any criterion fails or exceeds its runtime limit.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use uiekit_core::dataset::{
    curate_corpus, inject_strategy_hiding, render_target, route_instances, subsample_negatives, CurationRules,
    LossMask, SftSample, Split,
};
use uiekit_core::forge::{
    build_instances, candidate_pool, cluster_by_paradigm, cosine, diverge, embed_tfidf, generate_trace,
    mean_similarities, representative_indices, sample_core, AnalyticalDimension, ClusterId, StrategyCluster,
};
use uiekit_core::gateway::MockScript;
use uiekit_core::grpo::{group_advantages, run_alignment_loop, BanditPolicy, GrpoConfig};
use uiekit_core::jsonl::{read_values, to_jsonl_string};
use uiekit_core::records::records_match;
use uiekit_core::reward::{normalized_harmonic_mean, result_reward, score_completion};
use uiekit_core::schema::{compile_schema, parse_schema, serialize_schema, validate_output, ValidationReason};
use uiekit_core::scorer::{count_matches, micro_f1};
use uiekit_core::{
    CanonicalSet, CorpusRecord, EeSubtask, ExtractionRecord, ForgeConfig, Gateway, PromptTemplates, RewardConfig,
    RewardMode, Route, SchemaClass, Strategy, TaskKind, UnifiedSchema,
};

// Tolerances and limits, pinned.
const F1_TOL: f64 = 1e-12;
const REWARD_TOL: f64 = 1e-12;
const TFIDF_TOL: f64 = 1e-9;
const MEAN_SIM_TOL: f64 = 1e-9;
const ADV_SUM_TOL: f64 = 1e-9;
const ADV_VAR_TOL: f64 = 1e-6;
/// Standard deviations at or below this are numerically zero.
const ADV_STD_FLOOR: f64 = 1e-8;
const BINOMIAL_LEVEL: f64 = 0.99;

const LIMIT_SCORER: Duration = Duration::from_secs(5);
const LIMIT_REWARD: Duration = Duration::from_secs(5);
const LIMIT_FORGE: Duration = Duration::from_secs(30);
const LIMIT_CONVERGENCE: Duration = Duration::from_secs(30);
const LIMIT_GRPO: Duration = Duration::from_secs(60);
const LIMIT_DATA: Duration = Duration::from_secs(30);
const LIMIT_ROUND_TRIP: Duration = Duration::from_secs(30);
const LIMIT_SMOKE: Duration = Duration::from_secs(120);

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Number, name, time limit and check.
type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "scorer oracle equivalence", LIMIT_SCORER, scorer_oracle),
        (2, "reward properties", LIMIT_REWARD, reward_properties),
        (3, "strategy construction fidelity under scripted mock", LIMIT_FORGE, forge_fidelity),
        (4, "convergence math", LIMIT_CONVERGENCE, convergence_math),
        (5, "group advantage invariants and bandit alignment", LIMIT_GRPO, grpo_invariants),
        (6, "data pipeline counts", LIMIT_DATA, data_counts),
        (7, "schema and record round trips", LIMIT_ROUND_TRIP, round_trips),
        (8, "end-to-end CLI smoke", LIMIT_SMOKE, cli_smoke),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
            o => o,
        };
        match &outcome {
            Ok(detail) => println!("PASS  criterion {id}: {name} ({elapsed:.2?}, limit {limit:?}) {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {id}: {name} ({elapsed:.2?}, limit {limit:?}) {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- generators

const SPANS: [&str; 5] = ["Alice", "Bob", "Paris", "ACME", "the bank"];

fn rand_record(rng: &mut ChaCha8Rng, task: TaskKind) -> ExtractionRecord {
    let span = |rng: &mut ChaCha8Rng| SPANS[rng.gen_range(0..SPANS.len())];
    match task {
        TaskKind::Ner => ExtractionRecord::entity(span(rng), ["PER", "LOC", "ORG"][rng.gen_range(0..3)]),
        TaskKind::Re => ExtractionRecord::relation(span(rng), ["work_for", "located_in"][rng.gen_range(0..2)], span(rng)),
        TaskKind::Ee => {
            let n = rng.gen_range(0..4);
            let args: Vec<(String, String)> = (0..n)
                .map(|_| (["Agent", "Place"][rng.gen_range(0..2)].to_string(), span(rng).to_string()))
                .collect();
            ExtractionRecord::event(["Attack", "Move"][rng.gen_range(0..2)], ["hit", "went"][rng.gen_range(0..2)], args)
        }
    }
}

fn rand_set(rng: &mut ChaCha8Rng, task: TaskKind, max: usize) -> CanonicalSet {
    let n = rng.gen_range(0..=max);
    CanonicalSet::from((0..n).map(|_| rand_record(rng, task)).collect::<Vec<_>>())
}

fn test_schema(task: TaskKind) -> UnifiedSchema {
    let raw = match task {
        TaskKind::Ner => json!(["PER", "LOC", "ORG"]),
        TaskKind::Re => json!(["work_for", "located_in"]),
        TaskKind::Ee => json!({"Attack": ["Agent", "Place"], "Move": ["Agent", "Place"]}),
    };
    compile_schema(&raw, task, "acceptance").expect("test schema compiles")
}

// ---------------------------------------------------------------- criterion 1

/// Matching units, written independently of the scorer.
fn oracle_units(set: &CanonicalSet, sub: Option<EeSubtask>) -> Vec<String> {
    let mut out = Vec::new();
    for r in set.iter() {
        match r {
            ExtractionRecord::Entity { mention, class_id } => out.push(format!("{mention}\u{1}{class_id}")),
            ExtractionRecord::Relation { subject, relation, object } => {
                out.push(format!("{subject}\u{1}{relation}\u{1}{object}"))
            }
            ExtractionRecord::Event { class_id, trigger, arguments } => {
                if sub == Some(EeSubtask::Trigger) {
                    out.push(format!("{class_id}\u{1}{trigger}"));
                } else {
                    for (role, span) in arguments {
                        out.push(format!("{class_id}\u{1}{role}\u{1}{span}"));
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive pairing: each predicted unit claims one unused equal gold unit.
fn oracle_counts(pred: &[String], gold: &[String]) -> (u64, u64, u64) {
    let mut used = vec![false; gold.len()];
    let mut tp = 0;
    for p in pred {
        for (j, g) in gold.iter().enumerate() {
            if !used[j] && p == g {
                used[j] = true;
                tp += 1;
                break;
            }
        }
    }
    (tp, pred.len() as u64 - tp, gold.len() as u64 - tp)
}

fn hand_f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn scorer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let settings = [
        (TaskKind::Ner, None),
        (TaskKind::Re, None),
        (TaskKind::Ee, Some(EeSubtask::Trigger)),
        (TaskKind::Ee, Some(EeSubtask::Argument)),
    ];
    let mut checked = 0;
    for (task, sub) in settings {
        let mut all = Vec::new();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for _ in 0..1000 {
            let pred = rand_set(&mut rng, task, 5);
            let gold = rand_set(&mut rng, task, 5);
            let got = count_matches(&pred, &gold, task, sub).map_err(|e| e.to_string())?;
            let want = oracle_counts(&oracle_units(&pred, sub), &oracle_units(&gold, sub));
            check!(
                (got.tp, got.fp, got.fn_) == want,
                "{task} {sub:?}: counts {got:?} differ from oracle {want:?} for pred {} gold {}",
                pred.to_json_string(),
                gold.to_json_string()
            );
            let single = micro_f1(&[got]);
            let (p, r, f) = hand_f1(want.0, want.1, want.2);
            check!(
                (single.precision - p).abs() <= F1_TOL && (single.recall - r).abs() <= F1_TOL && (single.f1 - f).abs() <= F1_TOL,
                "per-instance micro-F1 {single:?} differs from ({p}, {r}, {f})"
            );
            tp += want.0;
            fp += want.1;
            fn_ += want.2;
            all.push(got);
            checked += 1;
        }
        let m = micro_f1(&all);
        let (p, r, f) = hand_f1(tp, fp, fn_);
        check!(
            (m.precision - p).abs() <= F1_TOL && (m.recall - r).abs() <= F1_TOL && (m.f1 - f).abs() <= F1_TOL,
            "{task} {sub:?}: pooled micro-F1 {m:?} differs from ({p}, {r}, {f})"
        );
        all.shuffle(&mut rng);
        check!(micro_f1(&all).f1 == m.f1, "micro-F1 changed under permutation");
    }
    Ok(format!("{checked} instances over 4 task settings"))
}

// ---------------------------------------------------------------- criterion 2

fn rand_config(rng: &mut ChaCha8Rng, mode: RewardMode) -> RewardConfig {
    let beta = rng.gen_range(0.1..2.0);
    let alpha = beta + rng.gen_range(0.01..3.0);
    let lambda1 = rng.gen_range(0.0..=1.0);
    RewardConfig {
        alpha,
        beta,
        lambda1,
        lambda2: 1.0 - lambda1,
        mode,
    }
}

fn rand_completion(rng: &mut ChaCha8Rng, task: TaskKind) -> String {
    let cites = ["[PER]", "[LOC]", "[work_for]", "[Attack]", "[Bogus]", "plain words", "Alice went", "[Move]"];
    let n = rng.gen_range(0..4);
    let cot: Vec<&str> = (0..n).map(|_| cites[rng.gen_range(0..cites.len())]).collect();
    let answer = rand_set(rng, task, 4).to_json_string();
    match rng.gen_range(0..10) {
        0 => "no structure at all".to_string(),
        1 => format!("<think>{}", cot.join(" ")),
        2 => format!("```json\n{answer}\n```"),
        _ => format!("<think>{}</think>{answer}", cot.join(" ")),
    }
}

fn reward_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tasks = [TaskKind::Ner, TaskKind::Re, TaskKind::Ee];
    let allowed = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let mut cases = 0;
    // end-to-end completions, both modes
    for i in 0..6000 {
        let task = tasks[i % 3];
        let s = test_schema(task);
        let mode = if i % 2 == 0 { RewardMode::Strict } else { RewardMode::Soft };
        let cfg = rand_config(&mut rng, mode);
        let x = "Alice met Bob in Paris while ACME watched; the bank went quiet after the hit.";
        let gold = rand_set(&mut rng, task, 4);
        let strategy = if rng.gen_bool(0.5) { Some("Find each entity mention and verify its type.") } else { None };
        let completion = rand_completion(&mut rng, task);
        let b = score_completion(x, &s, strategy, &completion, &gold, &cfg).map_err(|e| e.to_string())?;
        check!(
            (b.r_total - (cfg.lambda1 * b.r_result + cfg.lambda2 * b.r_process)).abs() <= REWARD_TOL,
            "r_total {} != {}*{} + {}*{}",
            b.r_total,
            cfg.lambda1,
            b.r_result,
            cfg.lambda2,
            b.r_process
        );
        check!(allowed.contains(&b.r_process), "process reward {} outside {{0, 1/3, 2/3, 1}}", b.r_process);
        if mode == RewardMode::Strict {
            check!(b.r_result == 0.0 || b.r_result == 1.0, "strict result reward {} not in {{0, 1}}", b.r_result);
        } else {
            check!((0.0..=1.0).contains(&b.r_result), "soft result reward {} outside [0, 1]", b.r_result);
        }
        cases += 1;
    }
    // strict set-level indicator on arbitrary pairs
    for i in 0..1000 {
        let task = tasks[i % 3];
        let cfg = rand_config(&mut rng, RewardMode::Strict);
        let (p, g) = (rand_set(&mut rng, task, 3), rand_set(&mut rng, task, 3));
        let r = result_reward(&p, &g, &cfg).map_err(|e| e.to_string())?.score;
        check!(r == 0.0 || r == 1.0, "strict result reward {r} not in {{0, 1}}");
        if p == g {
            check!(r == 1.0, "identical sets scored {r}");
        }
        cases += 1;
    }
    // soft mode: whenever both component F1s weakly improve, the reward does not fall
    let mut comparisons = 0;
    for i in 0..1500 {
        let task = tasks[i % 3];
        let cfg = rand_config(&mut rng, RewardMode::Soft);
        let gold = rand_set(&mut rng, task, 5);
        let wrong: Vec<ExtractionRecord> = if i % 2 == 0 {
            Vec::new()
        } else {
            rand_set(&mut rng, task, 2)
                .iter()
                .filter(|r| !gold.records().contains(r))
                .cloned()
                .collect()
        };
        let mut order: Vec<ExtractionRecord> = gold.records().to_vec();
        order.shuffle(&mut rng);
        let mut prev: Option<(f64, f64, f64)> = None;
        for k in 0..=order.len() {
            let mut pred: Vec<ExtractionRecord> = order[..k].to_vec();
            pred.extend(wrong.iter().cloned());
            let r = result_reward(&CanonicalSet::from(pred), &gold, &cfg).map_err(|e| e.to_string())?;
            if let Some((c, a, score)) = prev {
                // a growing subset of gold improves both components by construction
                let improved = r.category >= c && r.argument >= a;
                check!(!wrong.is_empty() || improved, "subset chain lowered a component at k={k}");
                if improved {
                    check!(r.score + REWARD_TOL >= score, "soft reward fell from {score} to {} at k={k}", r.score);
                    comparisons += 1;
                }
            }
            prev = Some((r.category, r.argument, r.score));
        }
        cases += 1;
    }
    // soft formula: monotone in each component
    for _ in 0..1500 {
        let cfg = rand_config(&mut rng, RewardMode::Soft);
        let (c, a) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
        let (c2, a2) = (rng.gen_range(c..=1.0), rng.gen_range(a..=1.0));
        let lo = normalized_harmonic_mean(c, a, cfg.alpha, cfg.beta);
        let hi = normalized_harmonic_mean(c2, a2, cfg.alpha, cfg.beta);
        check!(hi + REWARD_TOL >= lo, "soft formula not monotone: ({c},{a})->{lo} vs ({c2},{a2})->{hi}");
        cases += 1;
    }
    Ok(format!("{cases} randomized cases, {comparisons} soft monotonicity comparisons"))
}

// ---------------------------------------------------------------- criterion 3

fn mini_corpus() -> Result<Vec<CorpusRecord>, String> {
    let (_, raw) = read_values(&fixtures().join("mini_corpus.jsonl")).map_err(|e| e.to_string())?;
    let curated = curate_corpus(&raw, &CurationRules::default()).map_err(|e| e.to_string())?;
    Ok(curated.records)
}

fn mock_gateway() -> Result<Gateway, String> {
    Ok(Gateway::mock(MockScript::from_path(&fixtures().join("mock.json")).map_err(|e| e.to_string())?))
}

fn forge_fidelity() -> Outcome {
    let corpus = mini_corpus()?;
    check!(corpus.len() == 20, "mini corpus has {} examples, expected 20", corpus.len());
    let cfg = ForgeConfig::default();
    check!((cfg.n_per_dim, cfg.p, cfg.o) == (5, 5, 3), "defaults N, P, O are not 5, 5, 3");
    let templates = PromptTemplates::default();

    let run = || -> Result<Vec<_>, String> {
        let gw = mock_gateway()?;
        build_instances(&corpus, &cfg, &gw, &templates)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())
    };
    let first = run()?;
    let second = run()?;
    let bytes = to_jsonl_string(None, &first);
    check!(bytes == to_jsonl_string(None, &second), "two runs produced different bytes");

    // recompute every level through the individual steps on a fresh gateway
    let gw = mock_gateway()?;
    let mut levels = BTreeSet::new();
    for (rec, inst) in corpus.iter().zip(&first) {
        check!(
            inst.diagnostics.raw_strategies == 15 && inst.diagnostics.strategy_deficit == 0,
            "{}: {} raw strategies",
            rec.id,
            inst.diagnostics.raw_strategies
        );
        let div = diverge(&gw, &templates, &rec.x, &rec.schema_ref, cfg.n_per_dim, cfg.blank_retries).map_err(|e| e.to_string())?;
        check!(div.strategies.len() == 3 * cfg.n_per_dim, "{}: diverge gave {}", rec.id, div.strategies.len());
        let pool = candidate_pool(&cluster_by_paradigm(&div.strategies, &cfg.paradigms));
        let core = sample_core(&pool, cfg.p, cfg.instance_seed(&rec.id));
        let mut correct = 0;
        for strat in &core.strategies {
            let t = generate_trace(&gw, &templates, &rec.x, &rec.schema_ref, strat, &rec.gold).map_err(|e| e.to_string())?;
            correct += usize::from(t.correct && records_match(&t.prediction, &rec.gold));
        }
        check!(inst.level == correct, "{}: level {} but {correct} correct traces", rec.id, inst.level);
        check!(inst.traces.len() == inst.level, "{}: {} kept traces for level {}", rec.id, inst.traces.len(), inst.level);
        check!(inst.traces.iter().all(|t| t.correct && t.prediction == rec.gold), "{}: kept an incorrect trace", rec.id);
        let expected = if inst.level >= 3 { Route::Sft } else { Route::Rl };
        check!(inst.route == expected, "{}: level {} routed {:?}", rec.id, inst.level, inst.route);
        levels.insert(inst.level);
    }
    let (sft, rl) = route_instances(first.clone(), cfg.o);
    check!(sft.iter().all(|i| i.level >= 3) && rl.iter().all(|i| i.level < 3), "route_instances split at the wrong level");
    Ok(format!("20 examples, levels seen {levels:?}, SFT {} / RL {}, {} bytes identical", sft.len(), rl.len(), bytes.len()))
}

// ---------------------------------------------------------------- criterion 4

fn oracle_mean_sims(texts: &[String]) -> Vec<f64> {
    let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split_whitespace().collect()).collect();
    let vocab: BTreeSet<&str> = docs.iter().flatten().copied().collect();
    let vocab: Vec<&str> = vocab.into_iter().collect();
    let n = docs.len() as f64;
    let vecs: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| {
            vocab
                .iter()
                .map(|w| {
                    let count = d.iter().filter(|t| *t == w).count() as f64;
                    let df = docs.iter().filter(|o| o.contains(w)).count() as f64;
                    if d.is_empty() {
                        0.0
                    } else {
                        count / d.len() as f64 * ((n / (1.0 + df)).ln() + 1.0)
                    }
                })
                .collect()
        })
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    (0..vecs.len())
        .map(|i| {
            if vecs.len() < 2 {
                return 0.0;
            }
            (0..vecs.len()).filter(|&j| j != i).map(|j| cos(&vecs[i], &vecs[j])).sum::<f64>() / (vecs.len() - 1) as f64
        })
        .collect()
}

fn convergence_math() -> Outcome {
    // hand-computed: L = ln(3/2) + 1 is the idf of the two single-document words
    let docs = ["apple banana apple", "banana cherry", "cherry cherry date"];
    let l = 1.5f64.ln() + 1.0;
    let c01 = 1.0 / (2.0f64.sqrt() * (4.0 * l * l + 1.0).sqrt());
    let c12 = 2.0f64.sqrt() / (4.0 + l * l).sqrt();
    let emb = embed_tfidf(&docs);
    check!(emb.vocabulary == ["apple", "banana", "cherry", "date"], "vocabulary {:?}", emb.vocabulary);
    let expected_v0 = [2.0 * l / 3.0, 1.0 / 3.0, 0.0, 0.0];
    for (got, want) in emb.vectors[0].iter().zip(expected_v0) {
        check!((got - want).abs() <= TFIDF_TOL, "tf-idf weight {got} != {want}");
    }
    let pairs = [((0, 1), c01), ((1, 2), c12), ((0, 2), 0.0)];
    for ((i, j), want) in pairs {
        let got = cosine(&emb.vectors[i], &emb.vectors[j]);
        check!((got - want).abs() <= TFIDF_TOL, "cos({i},{j}) = {got}, oracle {want}");
    }
    let means = mean_similarities(&docs);
    for (got, want) in means.iter().zip([c01 / 2.0, (c01 + c12) / 2.0, c12 / 2.0]) {
        check!((got - want).abs() <= TFIDF_TOL, "mean similarity {got} != {want}");
    }

    let words = ["entity", "type", "span", "check", "verify", "relation", "event", "role"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clusters = 3000;
    for _ in 0..clusters {
        let size = rng.gen_range(1..=6);
        let texts: Vec<String> = (0..size)
            .map(|_| {
                let len = rng.gen_range(1..=5);
                (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let cluster = StrategyCluster {
            id: ClusterId::Paradigm(1),
            members: texts.iter().map(|t| Strategy::new(t.clone(), AnalyticalDimension::Cognitive)).collect(),
        };
        let (u, g) = representative_indices(&cluster);
        let oracle = oracle_mean_sims(&texts);
        let min = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        check!((oracle[u] - min).abs() <= MEAN_SIM_TOL, "unique pick {u} has mean {} but min is {min} in {texts:?}", oracle[u]);
        check!((oracle[g] - max).abs() <= MEAN_SIM_TOL, "generic pick {g} has mean {} but max is {max} in {texts:?}", oracle[g]);
    }
    Ok(format!("3-document oracle to {TFIDF_TOL:e}, {clusters} random clusters"))
}

// ---------------------------------------------------------------- criterion 5

fn grpo_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonzero = 0;
    for i in 0..1000 {
        let g = rng.gen_range(2..=8);
        let rewards: Vec<f64> = match i % 4 {
            0 => vec![rng.gen_range(0.0..=1.0); g],
            1 => (0..g).map(|_| f64::from(rng.gen_range(0..=3u8)) / 3.0).collect(),
            2 => (0..g).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            _ => (0..g).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        };
        let adv = group_advantages(&rewards);
        check!(adv.len() == g, "advantage count {} for group of {g}", adv.len());
        let sum: f64 = adv.iter().sum();
        check!(sum.abs() < ADV_SUM_TOL, "advantages sum to {sum} for {rewards:?}");
        let mean = rewards.iter().sum::<f64>() / g as f64;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        if std > ADV_STD_FLOOR {
            let var = adv.iter().map(|a| a * a).sum::<f64>() / g as f64 - (sum / g as f64).powi(2);
            check!((var - 1.0).abs() < ADV_VAR_TOL, "advantage variance {var} for {rewards:?}");
            nonzero += 1;
        } else {
            check!(adv.iter().all(|a| *a == 0.0), "zero-spread group gave {adv:?}");
        }
    }

    let pool: Vec<_> = mini_corpus()?.iter().map(|r| r.to_example()).collect();
    let cfg = GrpoConfig {
        seed: 11,
        ..GrpoConfig::default()
    };
    let mut policy = BanditPolicy::from_gold(&pool, 3, cfg.eta, cfg.seed);
    let mut groups = 0;
    let log = run_alignment_loop(&pool, &mut policy, 200, &cfg, &PromptTemplates::default(), &mut |_| groups += 1)
        .map_err(|e| e.to_string())?;
    check!(log.records.len() == 200, "{} dynamics records", log.records.len());
    check!(log.records.iter().enumerate().all(|(i, r)| r.step == i), "dynamics steps are not 0..200");
    check!(
        log.records.iter().all(|r| r.mean_reward.is_finite() && r.mean_response_length > 0.0),
        "dynamics has non-finite rewards or empty lengths"
    );
    let (first, last) = (log.records[0].mean_reward, log.records[199].mean_reward);
    check!(last > first, "mean reward did not rise: step 0 {first}, step 199 {last}");
    let csv = log.to_csv();
    check!(csv.starts_with("step,mean_reward,mean_response_length\n") && csv.lines().count() == 201, "csv shape");
    Ok(format!(
        "1000 groups ({nonzero} with spread); reward {first:.4} -> {last:.4}, length {:.1} -> {:.1}, {groups} groups exported",
        log.records[0].mean_response_length, log.records[199].mean_response_length
    ))
}

// ---------------------------------------------------------------- criterion 6

fn sample(id: usize, answer: &CanonicalSet) -> SftSample {
    let (target, seg) = render_target(&format!("reasoning for {id} cites [PER]"), answer);
    SftSample {
        instance_id: format!("i{id}"),
        strategy: format!("strategy {id}"),
        prompt: format!("Strategy: strategy {id}\n\nExtract."),
        target,
        loss_mask: LossMask::from_segments(seg, true),
        hidden: false,
    }
}

/// Smallest k with CDF >= q, CDF by direct summation of the pmf.
fn binomial_quantile(n: u64, p: f64, q: f64) -> u64 {
    let ln_choose = |k: u64| -> f64 { (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum() };
    let mut cdf = 0.0;
    for k in 0..=n {
        cdf += (ln_choose(k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
        if cdf >= q {
            return k;
        }
    }
    n
}

fn data_counts() -> Outcome {
    let answer = CanonicalSet::from(vec![ExtractionRecord::entity("Alice", "PER")]);
    for n in 0..=300usize {
        let samples: Vec<SftSample> = (0..n).map(|i| sample(i, &answer)).collect();
        let out = inject_strategy_hiding(&samples, 0.1, n as u64).map_err(|e| e.to_string())?;
        let expected = n.div_ceil(10);
        check!(out.len() - n == expected, "n={n}: {} clones, expected {expected}", out.len() - n);
        check!(out[..n] == samples[..], "n={n}: originals changed");
        for c in &out[n..] {
            check!(c.hidden, "clone not flagged hidden");
            check!(c.target.starts_with("<think></think>"), "clone target {:?}", c.target);
            check!(!c.loss_mask.cot.enabled && c.loss_mask.cot.start == c.loss_mask.cot.end, "clone CoT mask {:?}", c.loss_mask.cot);
            check!(c.loss_mask.structure.enabled, "clone structure mask disabled");
            check!(
                c.target.ends_with(&answer.to_json_string()),
                "clone lost its answer: {:?}",
                c.target
            );
        }
    }

    let s = test_schema(TaskKind::Ner);
    let record = |i: usize, gold: CanonicalSet| CorpusRecord {
        id: format!("r{i}"),
        x: format!("text {i}"),
        schema_ref: s.clone(),
        gold,
        source: "neg".into(),
        split: Split::Train,
    };
    let mut records: Vec<CorpusRecord> = (0..1000).map(|i| record(i, CanonicalSet::default())).collect();
    records.extend((1000..1050).map(|i| record(i, answer.clone())));
    let tail = (1.0 - BINOMIAL_LEVEL) / 2.0;
    let lo = binomial_quantile(1000, 0.4, tail);
    let hi = binomial_quantile(1000, 0.4, 1.0 - tail);
    let mut kept_counts = Vec::new();
    for seed in 0..100u64 {
        let kept = subsample_negatives(records.clone(), 0.4, seed).map_err(|e| e.to_string())?;
        let negatives = kept.iter().filter(|r| r.gold.is_empty()).count() as u64;
        let positives = kept.len() as u64 - negatives;
        check!(positives == 50, "seed {seed}: {positives} labeled records kept of 50");
        check!((lo..=hi).contains(&negatives), "seed {seed}: {negatives} negatives kept, bounds [{lo}, {hi}]");
        kept_counts.push(negatives);
    }
    let (min, max) = (kept_counts.iter().min().unwrap(), kept_counts.iter().max().unwrap());
    Ok(format!("hiding exact for n in 0..=300; negatives kept {min}..{max} within [{lo}, {hi}] over 100 seeds"))
}

// ---------------------------------------------------------------- criterion 7

fn rand_text(rng: &mut ChaCha8Rng) -> String {
    let pieces = ["alpha", "B\u{e9}ta", "\u{4e2d}\u{6587}", "quote\"d", "back\\slash", "tab\tx", "x_1", "Zed", "\u{1f600}", "n\u{303}"];
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| pieces[rng.gen_range(0..pieces.len())]).collect::<Vec<_>>().join(" ")
}

fn rand_schema(rng: &mut ChaCha8Rng) -> UnifiedSchema {
    let task = [TaskKind::Ner, TaskKind::Re, TaskKind::Ee][rng.gen_range(0..3)];
    let n = rng.gen_range(1..=6);
    let mut classes = Vec::new();
    for i in 0..n {
        let id = format!("{}_{i}", rand_text(rng).replace(' ', "_"));
        let arguments = match task {
            TaskKind::Ner => Vec::new(),
            TaskKind::Re => vec!["subject".to_string(), "object".to_string()],
            TaskKind::Ee => (0..rng.gen_range(1..=4)).map(|j| format!("role{j}_{}", rand_text(rng).len())).collect(),
        };
        classes.push(SchemaClass::new(id, arguments).with_description(rand_text(rng)));
    }
    UnifiedSchema::new(task, classes, rand_text(rng)).expect("random schema is valid")
}

fn valid_record(rng: &mut ChaCha8Rng, s: &UnifiedSchema) -> ExtractionRecord {
    let c = &s.classes[rng.gen_range(0..s.classes.len())];
    match s.task {
        TaskKind::Ner => ExtractionRecord::entity(rand_text(rng), c.class_id.clone()),
        TaskKind::Re => ExtractionRecord::relation(rand_text(rng), c.class_id.clone(), rand_text(rng)),
        TaskKind::Ee => {
            let args: Vec<(String, String)> = (0..rng.gen_range(0..=3))
                .map(|_| (c.arguments[rng.gen_range(0..c.arguments.len())].clone(), rand_text(rng)))
                .collect();
            ExtractionRecord::event(c.class_id.clone(), rand_text(rng), args)
        }
    }
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mutations = 0;
    for i in 0..100 {
        let s = rand_schema(&mut rng);
        let text = serialize_schema(&s);
        let back = parse_schema(&text).map_err(|e| format!("schema {i}: {e}"))?;
        check!(serialize_schema(&back) == text, "schema {i} round trip differs:\n{text}\n{}", serialize_schema(&back));
        check!(back == s, "schema {i} parsed to a different value");

        let records: Vec<ExtractionRecord> = (0..rng.gen_range(0..=5)).map(|_| valid_record(&mut rng, &s)).collect();
        let set = CanonicalSet::from(records.clone());
        let json1 = set.to_json_string();
        let parsed: CanonicalSet = serde_json::from_str(&json1).map_err(|e| format!("records {i}: {e}"))?;
        check!(parsed.to_json_string() == json1, "record set {i} round trip differs: {json1}");
        let v: Value = serde_json::from_str(&json1).unwrap();
        check!(serde_json::to_string(&v).unwrap().len() == json1.len(), "record set {i} is not compact JSON");

        check!(validate_output(&records, &s).is_valid(), "schema {i}: valid records rejected");
        for (idx, rec) in records.iter().enumerate() {
            let off_class = format!("zz_off_class_{i}_{idx}");
            let mut bad = records.clone();
            bad[idx] = match rec.clone() {
                ExtractionRecord::Entity { mention, .. } => ExtractionRecord::entity(mention, off_class.clone()),
                ExtractionRecord::Relation { subject, object, .. } => ExtractionRecord::relation(subject, off_class.clone(), object),
                ExtractionRecord::Event { trigger, arguments, .. } => ExtractionRecord::event(off_class.clone(), trigger, arguments),
            };
            let report = validate_output(&bad, &s);
            check!(
                report.issues.iter().any(|x| x.record == idx
                    && matches!(&x.reason, ValidationReason::UnknownClass { class } if *class == off_class)),
                "off-schema class at record {idx} not rejected: {report:?}"
            );
            mutations += 1;
            if let ExtractionRecord::Event { class_id, trigger, mut arguments } = rec.clone() {
                let off_role = format!("zz_off_role_{i}_{idx}");
                let at = if arguments.is_empty() { 0 } else { rng.gen_range(0..arguments.len()) };
                if arguments.is_empty() {
                    arguments.push((off_role.clone(), "span".into()));
                } else {
                    arguments[at].0 = off_role.clone();
                }
                let mut bad = records.clone();
                bad[idx] = ExtractionRecord::event(class_id, trigger, arguments);
                let report = validate_output(&bad, &s);
                check!(
                    report.issues.iter().any(|x| x.record == idx
                        && matches!(&x.reason, ValidationReason::UnknownArgument { role, .. } if *role == off_role)),
                    "off-schema role at record {idx} not rejected: {report:?}"
                );
                mutations += 1;
            }
        }
    }
    Ok(format!("100 schemas, 100 record sets, {mutations} mutations rejected"))
}

// ---------------------------------------------------------------- criterion 8

fn cli_smoke() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_uiekit");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let fx = fixtures();
    let p = |rel: &str| out.join(rel).display().to_string();
    let corpus = fx.join("mini_corpus.jsonl").display().to_string();
    let mock = fx.join("mock.json").display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["curate".into(), "--input".into(), corpus, "--out".into(), p("corpus.jsonl")],
        vec![
            "build-reasoning".into(),
            "--corpus".into(),
            p("corpus.jsonl"),
            "--mock".into(),
            mock,
            "--out".into(),
            p("reasoning.jsonl"),
        ],
        vec!["render-sft".into(), "--input".into(), p("reasoning.jsonl"), "--out".into(), p("sft.jsonl")],
        vec!["route".into(), "--input".into(), p("reasoning.jsonl"), "--out".into(), p("routes")],
        vec![
            "grpo".into(),
            "sim".into(),
            "--pool".into(),
            p("routes/rl_pool.jsonl"),
            "--steps".into(),
            "50".into(),
            "--out".into(),
            p("grpo"),
        ],
        vec![
            "score".into(),
            "--pred".into(),
            p("grpo/predictions.jsonl"),
            "--gold".into(),
            p("routes/rl_pool.jsonl"),
            "--out".into(),
            p("score"),
        ],
        vec![
            "report".into(),
            "--reports".into(),
            p("score/report.json"),
            "--reasoning".into(),
            p("reasoning.jsonl"),
            "--dynamics".into(),
            p("grpo/dynamics.jsonl"),
            "--out".into(),
            p("report"),
        ],
    ];
    for args in &steps {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        check!(
            o.status.success(),
            "`uiekit {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for path in uiekit_cli::commands::pipeline_artifacts(out) {
        check!(path.is_file(), "missing artifact {}", path.display());
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        check!(!text.is_empty(), "empty artifact {}", path.display());
        if path.extension().is_some_and(|e| e == "jsonl") {
            let first: Value = serde_json::from_str(text.lines().next().unwrap()).map_err(|e| e.to_string())?;
            check!(first["header"]["config"].is_object(), "{} has no config header", path.display());
        }
    }
    let summary = std::fs::read_to_string(out.join("report/summary.txt")).map_err(|e| e.to_string())?;
    check!(summary.contains("F1") && summary.contains("Reasoning levels"), "report is incomplete");
    Ok(format!("{} stages, {} artifacts", steps.len(), uiekit_cli::commands::pipeline_artifacts(out).len()))
}
