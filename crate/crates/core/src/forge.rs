//! Multi-perspective reasoning construction for one labeled example.
//!
//! The steps run in order:
//! 1. divergence: `n_per_dim` strategies for each analytical dimension, one
//!    generator call each (`3 * n_per_dim` in total);
//! 2. convergence: every strategy joins the keyword paradigm it co-occurs with
//!    most; within each cluster the strategy with the lowest mean TF-IDF
//!    cosine to the others (unique) and the one with the highest (generic)
//!    become candidates;
//! 3. `p` candidates are sampled uniformly without replacement;
//! 4. each sampled strategy drives one rationale + prediction call;
//! 5. traces whose prediction differs from the gold set are discarded. The
//!    number kept is the example's level, and `level >= o` routes it to SFT,
//!    otherwise to the RL pool.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{render_target, CorpusRecord, ReasoningInstance, Route};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, Purpose};
use crate::prompts::{render, PromptTemplates};
use crate::records::{parse_completion, records_match, split_reasoning, CanonicalSet};
use crate::schema::{serialize_schema, UnifiedSchema};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("generator failure: {0}")]
    GatewayFailure(#[from] GatewayError),
    #[error("invalid paradigm: {0}")]
    InvalidParadigm(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyticalDimension {
    Cognitive,
    Role,
    Heuristic,
}

impl AnalyticalDimension {
    pub const ALL: [AnalyticalDimension; 3] = [
        AnalyticalDimension::Cognitive,
        AnalyticalDimension::Role,
        AnalyticalDimension::Heuristic,
    ];

    /// Wording used in the strategy prompt.
    pub fn description(self) -> &'static str {
        match self {
            AnalyticalDimension::Cognitive => "cognitive perspective",
            AnalyticalDimension::Role => "professional role",
            AnalyticalDimension::Heuristic => "heuristic rules",
        }
    }
}

/// Paradigm a strategy was assigned to, or the reserved catch-all cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClusterId {
    Paradigm(u32),
    Other,
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterId::Paradigm(id) => write!(f, "{id}"),
            ClusterId::Other => f.write_str("OTHER"),
        }
    }
}

impl Serialize for ClusterId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ClusterId::Paradigm(id) => s.serialize_u32(*id),
            ClusterId::Other => s.serialize_str("OTHER"),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "OTHER" => Ok(ClusterId::Other),
            serde_json::Value::Number(n) => n
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .map(ClusterId::Paradigm)
                .ok_or_else(|| serde::de::Error::custom("paradigm id out of range")),
            other => Err(serde::de::Error::custom(format!("bad cluster id {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub text: String,
    pub dimension: AnalyticalDimension,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paradigm: Option<ClusterId>,
}

impl Strategy {
    pub fn new(text: impl Into<String>, dimension: AnalyticalDimension) -> Self {
        Strategy {
            text: text.into(),
            dimension,
            paradigm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paradigm {
    pub id: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub keywords: Vec<String>,
}

impl Paradigm {
    pub fn new(id: u32, name: &str, keywords: &[&str]) -> Self {
        Paradigm {
            id,
            name: name.into(),
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
        }
    }
}

/// The shipped keyword paradigms. Override with a paradigm file.
pub fn default_paradigms() -> Vec<Paradigm> {
    vec![
        Paradigm::new(1, "entity-focused", &[
            "entity", "type", "span", "mention", "boundary", "name", "noun", "category",
        ]),
        Paradigm::new(2, "relation-focused", &[
            "relation", "subject", "object", "pair", "link", "connect", "dependency", "head",
        ]),
        Paradigm::new(3, "event-temporal", &[
            "event", "trigger", "argument", "time", "temporal", "sequence", "action", "timeline",
        ]),
        Paradigm::new(4, "evidence-verification", &[
            "evidence", "verify", "check", "confirm", "consisten", "cross", "validate", "doubt",
        ]),
        Paradigm::new(5, "role-simulation", &[
            "expert", "analyst", "role", "linguist", "annotator", "journalist", "perspective", "reader",
        ]),
    ]
}

/// Checks ids are unique and each keyword list is non-empty, lowercase and unique.
pub fn validate_paradigms(paradigms: &[Paradigm]) -> Result<(), ForgeError> {
    if paradigms.is_empty() {
        return Err(ForgeError::InvalidParadigm("no paradigms configured".into()));
    }
    let mut ids = HashSet::new();
    for p in paradigms {
        if !ids.insert(p.id) {
            return Err(ForgeError::InvalidParadigm(format!("duplicate paradigm id {}", p.id)));
        }
        if p.keywords.is_empty() {
            return Err(ForgeError::InvalidParadigm(format!("paradigm {} has no keywords", p.id)));
        }
        let mut seen = HashSet::new();
        for k in &p.keywords {
            if k.trim().is_empty() || *k != k.to_lowercase() || tokenize(k).is_empty() {
                return Err(ForgeError::InvalidParadigm(format!(
                    "paradigm {} keyword `{k}` must be non-empty lowercase text",
                    p.id
                )));
            }
            if !seen.insert(k.as_str()) {
                return Err(ForgeError::InvalidParadigm(format!("paradigm {} repeats `{k}`", p.id)));
            }
        }
    }
    Ok(())
}

/// Asks the generator for `n_per_dim` strategies per dimension.
///
/// Blank completions are retried `blank_retries` times with a new variant and
/// then skipped; skipped slots are counted in [`Divergence::deficit`].
pub fn diverge(
    gateway: &Gateway,
    templates: &PromptTemplates,
    x: &str,
    s: &UnifiedSchema,
    n_per_dim: usize,
    blank_retries: u32,
) -> Result<Divergence, ForgeError> {
    if n_per_dim == 0 {
        return Err(ForgeError::InvalidConfig("n_per_dim must be at least 1".into()));
    }
    let schema_text = serialize_schema(s);
    let n_text = n_per_dim.to_string();
    let mut strategies = Vec::with_capacity(3 * n_per_dim);
    let mut deficit = 0;
    for dim in AnalyticalDimension::ALL {
        for i in 1..=n_per_dim {
            let index = i.to_string();
            let prompt = render(
                &templates.strategy,
                &[
                    ("x", x),
                    ("schema", &schema_text),
                    ("dimension", dim.description()),
                    ("index", &index),
                    ("n", &n_text),
                ],
            );
            match request_strategy(gateway, prompt, blank_retries)? {
                Some(text) => strategies.push(Strategy::new(text, dim)),
                None => {
                    log::warn!("{} strategy {i} came back blank; skipping", dim.description());
                    deficit += 1;
                }
            }
        }
    }
    Ok(Divergence { strategies, deficit })
}

fn request_strategy(gateway: &Gateway, prompt: String, blank_retries: u32) -> Result<Option<String>, ForgeError> {
    for variant in 0..=blank_retries {
        let req = GenerationRequest::new(prompt.clone(), Purpose::Strategy).with_variant(variant);
        match gateway.complete(&req) {
            Ok(resp) => {
                // reasoning models may think before answering
                let body = match split_reasoning(&resp.completion) {
                    Ok((_, answer)) => answer,
                    Err(_) => resp.completion,
                };
                let text = body.trim();
                if !text.is_empty() {
                    return Ok(Some(text.to_string()));
                }
            }
            Err(GatewayError::BadResponse(msg)) => log::debug!("blank strategy response: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub strategies: Vec<Strategy>,
    pub deficit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCluster {
    pub id: ClusterId,
    pub members: Vec<Strategy>,
}

/// Number of paradigm keywords present in `text`.
///
/// A keyword is present when its tokens occur contiguously in the text's
/// tokens, the final keyword token matching from the start of a text token
/// (`type` hits `types`, `consisten` hits `consistency`).
pub fn keyword_cooccurrence(text: &str, paradigm: &Paradigm) -> usize {
    let tokens = tokenize(text);
    paradigm
        .keywords
        .iter()
        .filter(|k| keyword_present(&tokens, &tokenize(k)))
        .count()
}

fn keyword_present(tokens: &[String], keyword: &[String]) -> bool {
    let Some((last, head)) = keyword.split_last() else {
        return false;
    };
    if tokens.len() < keyword.len() {
        return false;
    }
    (0..=tokens.len() - keyword.len()).any(|i| {
        head.iter().zip(&tokens[i..]).all(|(k, t)| k == t) && tokens[i + head.len()].starts_with(last.as_str())
    })
}

/// Assigns each strategy to its highest co-occurrence paradigm.
///
/// Ties go to the lowest paradigm id; strategies without any keyword hit go
/// to [`ClusterId::Other`]. Only non-empty clusters are returned, paradigms in
/// ascending id order and `Other` last. Members keep input order.
pub fn cluster_by_paradigm(strats: &[Strategy], paradigms: &[Paradigm]) -> Vec<StrategyCluster> {
    let mut ordered: Vec<&Paradigm> = paradigms.iter().collect();
    ordered.sort_by_key(|p| p.id);
    let mut buckets: BTreeMap<ClusterId, Vec<Strategy>> = BTreeMap::new();
    for strat in strats {
        let mut best: Option<(u32, usize)> = None;
        for p in &ordered {
            let score = keyword_cooccurrence(&strat.text, p);
            if score > 0 && best.is_none_or(|(_, b)| score > b) {
                best = Some((p.id, score));
            }
        }
        let id = best.map_or(ClusterId::Other, |(pid, _)| ClusterId::Paradigm(pid));
        let mut member = strat.clone();
        member.paradigm = Some(id);
        buckets.entry(id).or_default().push(member);
    }
    buckets
        .into_iter()
        .map(|(id, members)| StrategyCluster { id, members })
        .collect()
}

/// TF-IDF vectors over a shared, lexicographically ordered vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfEmbedding {
    pub vocabulary: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

/// `tf = count / doc_length`, `idf = ln(n_docs / (1 + df)) + 1`.
pub fn embed_tfidf<S: AsRef<str>>(texts: &[S]) -> TfidfEmbedding {
    let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &docs {
        let unique: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let vocabulary: Vec<String> = df.keys().map(|s| s.to_string()).collect();
    let n_docs = docs.len() as f64;
    let idf: Vec<f64> = df
        .values()
        .map(|&d| (n_docs / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let vectors = docs
        .iter()
        .map(|doc| {
            let mut v = vec![0.0; vocabulary.len()];
            if doc.is_empty() {
                return v;
            }
            for t in doc {
                let idx = vocabulary.binary_search_by(|w| w.as_str().cmp(t)).expect("token in vocabulary");
                v[idx] += 1.0;
            }
            let len = doc.len() as f64;
            for (w, weight) in v.iter_mut().zip(&idf) {
                *w = *w / len * weight;
            }
            v
        })
        .collect();
    TfidfEmbedding { vocabulary, vectors }
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine of each text to every other text (0 for a single text).
pub fn mean_similarities<S: AsRef<str>>(texts: &[S]) -> Vec<f64> {
    let emb = embed_tfidf(texts);
    let n = emb.vectors.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                return 0.0;
            }
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(&emb.vectors[i], &emb.vectors[j]))
                .sum();
            total / (n - 1) as f64
        })
        .collect()
}

/// Indices of the maximally unique and maximally generic members.
///
/// Ties resolve to the earliest member.
pub fn representative_indices(cluster: &StrategyCluster) -> (usize, usize) {
    assert!(!cluster.members.is_empty(), "representatives of an empty cluster");
    let texts: Vec<&str> = cluster.members.iter().map(|m| m.text.as_str()).collect();
    let means = mean_similarities(&texts);
    let mut unique = 0;
    let mut generic = 0;
    for (i, &m) in means.iter().enumerate() {
        if m < means[unique] {
            unique = i;
        }
        if m > means[generic] {
            generic = i;
        }
    }
    (unique, generic)
}

pub fn pick_representatives(cluster: &StrategyCluster) -> (Strategy, Strategy) {
    let (u, g) = representative_indices(cluster);
    (cluster.members[u].clone(), cluster.members[g].clone())
}

/// Unique then generic representative of each cluster, dropping repeated texts.
pub fn candidate_pool(clusters: &[StrategyCluster]) -> Vec<Strategy> {
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for cluster in clusters.iter().filter(|c| !c.members.is_empty()) {
        let (u, g) = pick_representatives(cluster);
        for s in [u, g] {
            if seen.insert(s.text.clone()) {
                pool.push(s);
            }
        }
    }
    pool
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreSample {
    pub strategies: Vec<Strategy>,
    /// How many fewer than requested were available.
    pub deficit: usize,
}

/// `p` distinct candidates sampled uniformly without replacement.
pub fn sample_core(candidates: &[Strategy], p: usize, seed: u64) -> CoreSample {
    if candidates.len() <= p {
        let deficit = p - candidates.len();
        if deficit > 0 {
            log::warn!("only {} candidate strategies for a core set of {p}", candidates.len());
        }
        return CoreSample {
            strategies: candidates.to_vec(),
            deficit,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), p);
    CoreSample {
        strategies: picked.into_iter().map(|i| candidates[i].clone()).collect(),
        deficit: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub strategy: Strategy,
    pub cot: String,
    pub prediction: CanonicalSet,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One rationale + prediction under a strategy, checked against gold.
pub fn generate_trace(
    gateway: &Gateway,
    templates: &PromptTemplates,
    x: &str,
    s: &UnifiedSchema,
    strat: &Strategy,
    gold: &CanonicalSet,
) -> Result<ReasoningTrace, ForgeError> {
    let schema_text = serialize_schema(s);
    let prompt = render(
        &templates.rationale,
        &[("x", x), ("schema", &schema_text), ("strategy", &strat.text)],
    );
    let resp = gateway.complete(&GenerationRequest::new(prompt, Purpose::Rationale))?;
    Ok(match parse_completion(&resp.completion, s) {
        Ok((out, dropped)) => {
            if !dropped.is_empty() {
                log::debug!("{} predicted records failed validation", dropped.len());
            }
            let correct = records_match(&out.records, gold);
            ReasoningTrace {
                strategy: strat.clone(),
                cot: out.cot,
                prediction: out.records,
                correct,
                error: None,
            }
        }
        Err(e) => ReasoningTrace {
            strategy: strat.clone(),
            cot: split_reasoning(&resp.completion).map(|(c, _)| c).unwrap_or_default(),
            prediction: CanonicalSet::default(),
            correct: false,
            error: Some(format!("{e:?}")),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    /// Strategies per analytical dimension (N).
    pub n_per_dim: usize,
    /// Core set size (P).
    pub p: usize,
    /// Minimum level for the SFT route (O).
    pub o: usize,
    pub paradigms: Vec<Paradigm>,
    pub seed: u64,
    pub blank_retries: u32,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            n_per_dim: 5,
            p: 5,
            o: 3,
            paradigms: default_paradigms(),
            seed: 0,
            blank_retries: 1,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.n_per_dim == 0 {
            return Err(ForgeError::InvalidConfig("n_per_dim must be at least 1".into()));
        }
        if self.p == 0 {
            return Err(ForgeError::InvalidConfig("p must be at least 1".into()));
        }
        validate_paradigms(&self.paradigms)
    }

    /// Sampling seed for one example: the run seed mixed with the example id,
    /// independent of processing order.
    pub fn instance_seed(&self, id: &str) -> u64 {
        let digest = Sha256::digest(id.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        self.seed ^ u64::from_le_bytes(bytes)
    }
}

/// Per-instance bookkeeping from the construction run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeDiagnostics {
    pub raw_strategies: usize,
    pub strategy_deficit: usize,
    pub clusters: Vec<(ClusterId, usize)>,
    pub candidates: usize,
    pub sampled: usize,
    pub sample_deficit: usize,
    pub discarded: usize,
}

/// Runs the whole construction for one example.
pub fn build_instance(
    record: &CorpusRecord,
    cfg: &ForgeConfig,
    gateway: &Gateway,
    templates: &PromptTemplates,
) -> Result<ReasoningInstance, ForgeError> {
    cfg.validate()?;
    let s = &record.schema_ref;
    let divergence = diverge(gateway, templates, &record.x, s, cfg.n_per_dim, cfg.blank_retries)?;
    let clusters = cluster_by_paradigm(&divergence.strategies, &cfg.paradigms);
    let pool = candidate_pool(&clusters);
    let core = if pool.is_empty() {
        CoreSample {
            strategies: Vec::new(),
            deficit: cfg.p,
        }
    } else {
        sample_core(&pool, cfg.p, cfg.instance_seed(&record.id))
    };
    let mut kept = Vec::new();
    let mut discarded = 0;
    for strat in &core.strategies {
        let trace = generate_trace(gateway, templates, &record.x, s, strat, &record.gold)?;
        if trace.correct {
            kept.push(trace);
        } else {
            discarded += 1;
        }
    }
    let level = kept.len();
    let route = if level >= cfg.o { Route::Sft } else { Route::Rl };
    let segments = kept
        .iter()
        .map(|t| render_target(&t.cot, &t.prediction).1)
        .collect();
    Ok(ReasoningInstance {
        record: record.clone(),
        traces: kept,
        level,
        route,
        segments,
        diagnostics: ForgeDiagnostics {
            raw_strategies: divergence.strategies.len(),
            strategy_deficit: divergence.deficit,
            clusters: clusters.iter().map(|c| (c.id, c.members.len())).collect(),
            candidates: pool.len(),
            sampled: core.strategies.len(),
            sample_deficit: core.deficit,
            discarded,
        },
    })
}

/// Runs [`build_instance`] over a corpus in parallel, keeping input order.
pub fn build_instances(
    records: &[CorpusRecord],
    cfg: &ForgeConfig,
    gateway: &Gateway,
    templates: &PromptTemplates,
) -> Vec<Result<ReasoningInstance, ForgeError>> {
    records
        .par_iter()
        .map(|r| build_instance(r, cfg, gateway, templates))
        .collect()
}
