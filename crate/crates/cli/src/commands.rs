//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use uiekit_core::dataset::{
    curate_corpus, inject_strategy_hiding, level_histogram, render_sft, route_instances, subsample_negatives,
    CORPUS_FORMAT, REASONING_FORMAT, SFT_FORMAT,
};
use uiekit_core::forge::build_instances;
use uiekit_core::gateway::{MockScript, MockTransport, SamplingParams};
use uiekit_core::grpo::{
    run_alignment_loop, BanditPolicy, DynamicsLog, GatewayPolicy, PolicyAdapter, BATCH_FORMAT, DYNAMICS_FORMAT,
};
use uiekit_core::jsonl::{read_jsonl, read_jsonl_format, read_values, write_jsonl, Header, JsonlWriter};
use uiekit_core::records::{canonicalize, parse_completion};
use uiekit_core::reward::{handle_request, RewardRequest};
use uiekit_core::schema::{compile_schema, serialize_schema};
use uiekit_core::scorer::{build_report, score_dataset, MetricRow, Report};
use uiekit_core::{
    CanonicalSet, CorpusRecord, ExtractionRecord, Gateway, GenerationRequest, PipelineConfig, PromptTemplates,
    Purpose, ReasoningInstance, Route, TaskKind,
};

use crate::{
    BuildReasoningArgs, Cli, Command, CurateArgs, GlobalArgs, GrpoCommand, GrpoSimArgs, RenderSftArgs, ReportArgs,
    RewardCommand, RewardScoreArgs, RouteArgs, SchemaCommand, SchemaCompileArgs, ScoreArgs, ServeArgs,
};

pub const PREDICTIONS_FORMAT: &str = "uiekit.predictions";

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub records: Vec<ExtractionRecord>,
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Schema(SchemaCommand::Compile(a)) => schema_compile(g, a),
        Command::Curate(a) => curate(g, a),
        Command::BuildReasoning(a) => build_reasoning(g, a),
        Command::RenderSft(a) => render(g, a),
        Command::Route(a) => route(g, a),
        Command::Reward(RewardCommand::Serve(a)) => serve(g, a),
        Command::Reward(RewardCommand::Score(a)) => reward_score(g, a),
        Command::Grpo(GrpoCommand::Sim(a)) => grpo_sim(g, a),
        Command::Score(a) => score(g, a),
        Command::Report(a) => report(g, a),
    }
}

/// File values, then flags, then environment for unset gateway settings.
pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &g.cache_dir {
        cfg.gateway.cache_dir = Some(dir.clone());
    }
    cfg.gateway = cfg.gateway.with_env();
    let cfg = cfg.resolve()?;
    log::info!("resolved config: {}", cfg.to_value());
    Ok(cfg)
}

fn gateway(g: &GlobalArgs, cfg: &PipelineConfig) -> Result<Gateway> {
    match &g.mock {
        Some(path) => {
            let script = MockScript::from_path(path)?;
            Ok(Gateway::from_config_with(&cfg.gateway, Arc::new(MockTransport::new(script)))?)
        }
        None => Ok(Gateway::from_config(&cfg.gateway)?),
    }
}

fn templates(cfg: &PipelineConfig) -> Result<PromptTemplates> {
    match &cfg.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir).with_context(|| format!("loading templates from {}", dir.display())),
        None => Ok(PromptTemplates::default()),
    }
}

fn out_path(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
}

fn header(format: &str, cfg: &PipelineConfig, meta: Value) -> Header {
    Header::new(format).with_config(cfg.to_value()).with_meta(meta)
}

fn parse_task(s: &str) -> Result<TaskKind> {
    TaskKind::parse(s).ok_or_else(|| anyhow!("unknown task `{s}` (expected ner, re or ee)"))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads corpus records from a corpus, reasoning or routed file.
fn read_corpus_like(path: &Path) -> Result<Vec<CorpusRecord>> {
    let (_, values) = read_values(path)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).with_context(|| format!("{}: record {}", path.display(), i + 1)))
        .collect()
}

fn schema_compile(g: &GlobalArgs, a: SchemaCompileArgs) -> Result<()> {
    let raw = read_json(&a.input)?;
    let s = compile_schema(&raw, parse_task(&a.task)?, &a.source)?;
    let text = serialize_schema(&s) + "\n";
    match &g.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn curate(g: &GlobalArgs, a: CurateArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = out_path(g)?;
    let mut rules = cfg.curation.clone();
    if let Some(name) = a.adapter {
        rules.adapter = name;
    }
    let (_, raw) = read_values(&a.input)?;
    let curated = curate_corpus(&raw, &rules)?;
    let before = curated.records.len();
    let records = match a.keep_negatives {
        Some(k) => subsample_negatives(curated.records, k.unwrap_or(cfg.negative_keep), cfg.seed)?,
        None => curated.records,
    };
    let meta = json!({"stats": curated.stats, "negatives_dropped": before - records.len()});
    write_jsonl(out, Some(&header(CORPUS_FORMAT, &cfg, meta.clone())), &records)?;
    println!("{}", serde_json::to_string(&meta)?);
    Ok(())
}

fn build_reasoning(g: &GlobalArgs, a: BuildReasoningArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = out_path(g)?;
    let gw = gateway(g, &cfg)?;
    let templates = templates(&cfg)?;
    let (_, corpus): (_, Vec<CorpusRecord>) = read_jsonl_format(&a.corpus, CORPUS_FORMAT)?;
    let results = build_instances(&corpus, &cfg.forge, &gw, &templates);
    let mut instances = Vec::with_capacity(results.len());
    for (rec, r) in corpus.iter().zip(results) {
        instances.push(r.with_context(|| format!("building instance `{}`", rec.id))?);
    }
    let histogram = level_histogram(&instances);
    let sft = instances.iter().filter(|i| i.route == Route::Sft).count();
    let meta = json!({
        "instances": instances.len(),
        "levels": histogram,
        "routes": {"SFT": sft, "RL": instances.len() - sft},
    });
    write_jsonl(out, Some(&header(REASONING_FORMAT, &cfg, meta.clone())), &instances)?;
    println!("{}", serde_json::to_string(&meta)?);
    Ok(())
}

fn render(g: &GlobalArgs, a: RenderSftArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = out_path(g)?;
    let templates = templates(&cfg)?;
    let (_, instances): (_, Vec<ReasoningInstance>) = read_jsonl_format(&a.input, REASONING_FORMAT)?;
    let sft: Vec<ReasoningInstance> = instances.into_iter().filter(|i| i.route == Route::Sft).collect();
    let samples = render_sft(&sft, &templates)?;
    let fraction = a.hide_fraction.unwrap_or(cfg.hide_fraction);
    let all = inject_strategy_hiding(&samples, fraction, cfg.seed)?;
    let meta = json!({
        "instances": sft.len(),
        "samples": samples.len(),
        "hidden": all.len() - samples.len(),
        "hide_fraction": fraction,
        "lambda_cot": cfg.lambda_cot,
        "lambda_struct": cfg.lambda_struct,
    });
    write_jsonl(out, Some(&header(SFT_FORMAT, &cfg, meta.clone())), &all)?;
    println!("{}", serde_json::to_string(&meta)?);
    Ok(())
}

fn route(g: &GlobalArgs, a: RouteArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let dir = out_path(g)?;
    let (_, instances): (_, Vec<ReasoningInstance>) = read_jsonl_format(&a.input, REASONING_FORMAT)?;
    let o = a.min_level.unwrap_or(cfg.forge.o);
    let (sft, rl) = route_instances(instances, o);
    let meta = json!({"min_level": o, "SFT": sft.len(), "RL": rl.len()});
    write_jsonl(&dir.join("sft_pool.jsonl"), Some(&header(REASONING_FORMAT, &cfg, meta.clone())), &sft)?;
    write_jsonl(&dir.join("rl_pool.jsonl"), Some(&header(REASONING_FORMAT, &cfg, meta.clone())), &rl)?;
    println!("{}", serde_json::to_string(&meta)?);
    Ok(())
}

fn serve(g: &GlobalArgs, a: ServeArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(&a.addr, cfg.reward))
}

fn reward_score(g: &GlobalArgs, a: RewardScoreArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = out_path(g)?;
    let (_, requests): (_, Vec<RewardRequest>) = read_jsonl(&a.input)?;
    let results: Vec<Value> = requests
        .iter()
        .map(|req| match handle_request(req, &cfg.reward) {
            Ok(b) => serde_json::to_value(b).expect("breakdown serializes"),
            Err(e) => json!({"error": e.to_string()}),
        })
        .collect();
    write_jsonl(out, Some(&header("uiekit.rewards", &cfg, json!({"requests": results.len()}))), &results)?;
    Ok(())
}

fn greedy_prediction(text: &str, rec: &CorpusRecord) -> CanonicalSet {
    parse_completion(text, &rec.schema_ref)
        .map(|(o, _)| o.records)
        .unwrap_or_default()
}

fn grpo_sim(g: &GlobalArgs, a: GrpoSimArgs) -> Result<()> {
    let cfg = resolve_config(g)?;
    let dir = out_path(g)?;
    let templates = templates(&cfg)?;
    let mut gcfg = cfg.grpo.clone();
    if let Some(b) = a.batch_size {
        gcfg.batch_size = b;
    }
    if let Some(n) = a.group_size {
        gcfg.group_size = n;
    }
    let pool = read_corpus_like(&a.pool)?;
    if pool.is_empty() {
        bail!("the RL pool {} is empty", a.pool.display());
    }
    let examples: Vec<_> = pool.iter().map(|r| r.to_example()).collect();

    let hdr = |format: &str, meta: Value| {
        let mut h = header(format, &cfg, meta);
        h.config["grpo"]["batch_size"] = json!(gcfg.batch_size);
        h.config["grpo"]["group_size"] = json!(gcfg.group_size);
        h
    };
    let batch_header = hdr(BATCH_FORMAT, json!({"steps": a.steps, "policy": a.policy}));
    let run = |policy: &mut dyn PolicyAdapter| -> Result<(DynamicsLog, usize)> {
        let mut batches = JsonlWriter::create(&dir.join("batches.jsonl"), Some(&batch_header))?;
        let mut write_err = None;
        let log = run_alignment_loop(&examples, policy, a.steps, &gcfg, &templates, &mut |b| {
            if write_err.is_none() {
                write_err = batches.write(&b).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        Ok((log, batches.finish()?))
    };

    let (log, groups, predictions) = match a.policy.as_str() {
        "bandit" => {
            let mut bandit = BanditPolicy::from_gold(&examples, 3, gcfg.eta, cfg.seed);
            let (log, groups) = run(&mut bandit)?;
            let predictions: Vec<Prediction> = pool
                .iter()
                .map(|r| Prediction {
                    id: r.id.clone(),
                    records: greedy_prediction(bandit.greedy(&r.id).unwrap_or_default(), r).records().to_vec(),
                })
                .collect();
            (log, groups, predictions)
        }
        "gateway" => {
            let gw = gateway(g, &cfg)?;
            let (log, groups) = run(&mut GatewayPolicy {
                gateway: &gw,
                temperature: 1.0,
            })?;
            let params = SamplingParams::for_purpose(Purpose::Judge);
            let predictions = pool
                .iter()
                .map(|r| {
                    let prompt = uiekit_core::dataset::instruction_prompt(&templates, &r.x, &r.schema_ref);
                    let text = gw
                        .complete(&GenerationRequest::new(prompt, Purpose::Policy).with_params(params))
                        .map(|resp| resp.completion)
                        .unwrap_or_default();
                    Prediction {
                        id: r.id.clone(),
                        records: greedy_prediction(&text, r).records().to_vec(),
                    }
                })
                .collect();
            (log, groups, predictions)
        }
        other => bail!("unknown policy `{other}` (expected bandit or gateway)"),
    };

    write_jsonl(&dir.join("dynamics.jsonl"), Some(&hdr(DYNAMICS_FORMAT, json!({}))), &log.records)?;
    write_text(&dir.join("dynamics.csv"), &log.to_csv())?;
    write_jsonl(
        &dir.join("predictions.jsonl"),
        Some(&hdr(PREDICTIONS_FORMAT, json!({"policy": a.policy}))),
        &predictions,
    )?;
    let summary = json!({
        "steps": log.records.len(),
        "groups": groups,
        "first_mean_reward": log.records.first().map(|r| r.mean_reward),
        "last_mean_reward": log.records.last().map(|r| r.mean_reward),
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn score(g: &GlobalArgs, a: ScoreArgs) -> Result<()> {
    let dir = out_path(g)?;
    let only = a.task.as_deref().map(parse_task).transpose()?;
    let gold = read_corpus_like(&a.gold)?;
    let (_, preds): (_, Vec<Prediction>) = read_jsonl(&a.pred)?;
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in &preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            bail!("duplicate prediction id `{}`", p.id);
        }
    }
    let mut groups: BTreeMap<(String, TaskKind), Vec<(CanonicalSet, CanonicalSet)>> = BTreeMap::new();
    let mut missing = 0;
    for rec in gold.iter().filter(|r| only.is_none_or(|t| r.task() == t)) {
        let pred = match by_id.remove(rec.id.as_str()) {
            Some(p) => canonicalize(&p.records, &rec.schema_ref),
            None => {
                missing += 1;
                CanonicalSet::default()
            }
        };
        groups
            .entry((rec.source.clone(), rec.task()))
            .or_default()
            .push((pred, rec.gold.clone()));
    }
    if missing > 0 {
        log::warn!("{missing} gold records have no prediction; scored as empty");
    }
    if !by_id.is_empty() && only.is_none() {
        log::warn!("{} predictions have no gold record and were ignored", by_id.len());
    }
    let rows: Vec<MetricRow> = groups
        .iter()
        .flat_map(|((source, task), pairs)| score_dataset(source, *task, pairs))
        .collect();
    let (text, report) = build_report(&rows);
    write_text(&dir.join("report.txt"), &text)?;
    write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
    print!("{text}");
    Ok(())
}

fn report(g: &GlobalArgs, a: ReportArgs) -> Result<()> {
    let dir = out_path(g)?;
    let mut rows = Vec::new();
    for path in &a.reports {
        let r: Report = serde_json::from_value(read_json(path)?).with_context(|| format!("report {}", path.display()))?;
        rows.extend(r.rows);
    }
    let (table, merged) = build_report(&rows);
    let mut text = String::from("# Scores (Micro-F1, %)\n\n");
    text.push_str(&table);
    let mut summary = json!({"rows": merged.rows});
    if let Some(path) = &a.reasoning {
        let (_, instances): (_, Vec<ReasoningInstance>) = read_jsonl_format(path, REASONING_FORMAT)?;
        let histogram = level_histogram(&instances);
        text.push_str("\n# Reasoning levels\n\n");
        for (task, levels) in &histogram {
            let cells: Vec<String> = levels.iter().map(|(l, n)| format!("{l}:{n}")).collect();
            text.push_str(&format!("{task}  {}\n", cells.join(" ")));
        }
        summary["levels"] = serde_json::to_value(&histogram)?;
    }
    if let Some(path) = &a.dynamics {
        let (_, records): (_, Vec<uiekit_core::grpo::DynamicsRecord>) = read_jsonl_format(path, DYNAMICS_FORMAT)?;
        if let (Some(first), Some(last)) = (records.first(), records.last()) {
            text.push_str(&format!(
                "\n# Alignment dynamics\n\nsteps {}  mean reward {:.4} -> {:.4}  mean length {:.1} -> {:.1}\n",
                records.len(),
                first.mean_reward,
                last.mean_reward,
                first.mean_response_length,
                last.mean_response_length
            ));
        }
        summary["dynamics"] = json!({"steps": records.len(), "first": records.first(), "last": records.last()});
    }
    write_text(&dir.join("summary.txt"), &text)?;
    write_text(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    print!("{text}");
    Ok(())
}

/// Paths of every artifact the full pipeline writes under `dir`.
pub fn pipeline_artifacts(dir: &Path) -> Vec<PathBuf> {
    [
        "corpus.jsonl",
        "reasoning.jsonl",
        "sft.jsonl",
        "routes/sft_pool.jsonl",
        "routes/rl_pool.jsonl",
        "grpo/batches.jsonl",
        "grpo/dynamics.jsonl",
        "grpo/dynamics.csv",
        "grpo/predictions.jsonl",
        "score/report.txt",
        "score/report.json",
        "report/summary.txt",
        "report/summary.json",
    ]
    .iter()
    .map(|p| dir.join(p))
    .collect()
}
