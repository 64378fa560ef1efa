//! Group-relative policy optimization machinery at desk scale.
//!
//! A policy produces `G` completions per instance, each is scored with the
//! total reward, and advantages are the group-standardized rewards. No
//! gradient step happens here: batches are exported for an external trainer,
//! and the bundled bandit policy stands in for a model so the loop can be
//! exercised end to end.

use std::collections::{BTreeMap, HashMap};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::instruction_prompt;
use crate::gateway::{Gateway, GenerationRequest, Purpose, SamplingParams};
use crate::prompts::PromptTemplates;
use crate::records::{CanonicalSet, ExtractionRecord, LabeledExample};
use crate::reward::{score_completion, RewardConfig};

pub const BATCH_FORMAT: &str = "uiekit.grpo-batch";
pub const DYNAMICS_FORMAT: &str = "uiekit.dynamics";
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("policy failure: {0}")]
    PolicyFailure(String),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("the RL pool is empty")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Completions per instance (G).
    pub group_size: usize,
    /// Completion cap, in characters.
    pub max_len: usize,
    pub batch_size: usize,
    /// Carried in exported batches for the trainer; not applied here.
    pub kl_coeff: f64,
    /// Carried in exported batches for the trainer; not applied here.
    pub lr: f64,
    /// Bandit step size for the mock policy.
    pub eta: f64,
    pub seed: u64,
    /// Filled from the pipeline's reward section.
    #[serde(skip)]
    pub reward: RewardConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            max_len: 2048,
            batch_size: 128,
            kl_coeff: 0.01,
            lr: 5e-7,
            eta: 0.1,
            seed: 0,
            reward: RewardConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return Err(GrpoError::InvalidConfig("max_len and batch_size must be positive".into()));
        }
        self.reward
            .validate()
            .map_err(|e| GrpoError::InvalidConfig(e.to_string()))
    }
}

/// Source of completions for a group.
pub trait PolicyAdapter {
    /// Exactly `g` completions for the example.
    fn generate(&mut self, ex: &LabeledExample, prompt: &str, g: usize, max_len: usize) -> Result<Vec<String>, GrpoError>;

    /// Feedback after scoring; only learning mocks use it.
    fn update(&mut self, _instance_id: &str, _advantages: &[f64]) {}
}

/// Samples from the generator service, one request variant per group member.
pub struct GatewayPolicy<'a> {
    pub gateway: &'a Gateway,
    pub temperature: f64,
}

impl PolicyAdapter for GatewayPolicy<'_> {
    fn generate(&mut self, _ex: &LabeledExample, prompt: &str, g: usize, max_len: usize) -> Result<Vec<String>, GrpoError> {
        let params = SamplingParams {
            temperature: self.temperature,
            max_tokens: u32::try_from(max_len).unwrap_or(u32::MAX),
        };
        (0..g)
            .map(|k| {
                let req = GenerationRequest::new(prompt, Purpose::Policy)
                    .with_params(params)
                    .with_variant(k as u32);
                self.gateway
                    .complete(&req)
                    .map(|r| r.completion)
                    .map_err(|e| GrpoError::PolicyFailure(e.to_string()))
            })
            .collect()
    }
}

/// Fixed completions per instance, cycled to fill the group.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub by_instance: HashMap<String, Vec<String>>,
    pub fallback: Vec<String>,
}

impl PolicyAdapter for ScriptedPolicy {
    fn generate(&mut self, ex: &LabeledExample, _prompt: &str, g: usize, _max_len: usize) -> Result<Vec<String>, GrpoError> {
        let script = self.by_instance.get(&ex.id).unwrap_or(&self.fallback);
        if script.is_empty() {
            return Err(GrpoError::PolicyFailure(format!("no scripted completions for `{}`", ex.id)));
        }
        Ok(script.iter().cycle().take(g).cloned().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Arm {
    completions: Vec<String>,
    probs: Vec<f64>,
    last_draw: Vec<usize>,
}

/// A categorical distribution over scripted completions per instance.
///
/// After each group, every completion drawn in it has its probability
/// multiplied by `exp(eta * advantage)` and the distribution is renormalized.
#[derive(Debug, Clone)]
pub struct BanditPolicy {
    arms: BTreeMap<String, Arm>,
    eta: f64,
    rng: ChaCha8Rng,
}

impl BanditPolicy {
    /// Uniform starting distribution over each instance's completions.
    pub fn new(options: BTreeMap<String, Vec<String>>, eta: f64, seed: u64) -> Self {
        let arms = options
            .into_iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(id, completions)| {
                let n = completions.len();
                (
                    id,
                    Arm {
                        completions,
                        probs: vec![1.0 / n as f64; n],
                        last_draw: Vec::new(),
                    },
                )
            })
            .collect();
        BanditPolicy {
            arms,
            eta,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One gold-matching completion followed by `wrong` incorrect ones per instance.
    pub fn from_gold(pool: &[LabeledExample], wrong: usize, eta: f64, seed: u64) -> Self {
        let options = pool
            .iter()
            .map(|ex| (ex.id.clone(), scripted_options(ex, wrong)))
            .collect();
        BanditPolicy::new(options, eta, seed)
    }

    pub fn probabilities(&self, instance_id: &str) -> Option<&[f64]> {
        self.arms.get(instance_id).map(|a| a.probs.as_slice())
    }

    pub fn completions(&self, instance_id: &str) -> Option<&[String]> {
        self.arms.get(instance_id).map(|a| a.completions.as_slice())
    }

    /// The currently most probable completion (earliest on ties).
    pub fn greedy(&self, instance_id: &str) -> Option<&str> {
        let arm = self.arms.get(instance_id)?;
        let mut best = 0;
        for (i, p) in arm.probs.iter().enumerate() {
            if *p > arm.probs[best] {
                best = i;
            }
        }
        Some(&arm.completions[best])
    }
}

impl PolicyAdapter for BanditPolicy {
    fn generate(&mut self, ex: &LabeledExample, _prompt: &str, g: usize, _max_len: usize) -> Result<Vec<String>, GrpoError> {
        let arm = self
            .arms
            .get_mut(&ex.id)
            .ok_or_else(|| GrpoError::PolicyFailure(format!("bandit has no arm for `{}`", ex.id)))?;
        let dist = WeightedIndex::new(&arm.probs).map_err(|e| GrpoError::PolicyFailure(e.to_string()))?;
        arm.last_draw = (0..g).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(arm.last_draw.iter().map(|&i| arm.completions[i].clone()).collect())
    }

    fn update(&mut self, instance_id: &str, advantages: &[f64]) {
        let Some(arm) = self.arms.get_mut(instance_id) else { return };
        let mut sum = vec![0.0; arm.completions.len()];
        let mut count = vec![0usize; arm.completions.len()];
        for (&i, &a) in arm.last_draw.iter().zip(advantages) {
            sum[i] += a;
            count[i] += 1;
        }
        for i in 0..arm.probs.len() {
            if count[i] > 0 {
                arm.probs[i] *= (self.eta * sum[i] / count[i] as f64).exp();
            }
        }
        let total: f64 = arm.probs.iter().sum();
        for p in &mut arm.probs {
            *p /= total;
        }
        // keep every arm reachable
        for p in &mut arm.probs {
            *p = p.max(1e-12);
        }
    }
}

fn scripted_options(ex: &LabeledExample, wrong: usize) -> Vec<String> {
    let s = &ex.schema_ref;
    let labels: Vec<String> = ex.gold.iter().map(|r| format!("[{}]", r.class_id())).collect();
    let cited = if labels.is_empty() {
        "no schema class applies".to_string()
    } else {
        labels.join(", ")
    };
    let gold_json = ex.gold.to_json_string();
    let mut out = vec![format!(
        "<think>Read the input, match each candidate span against the schema classes, and keep only spans stated in the text: {cited}.</think>{gold_json}"
    )];
    let first_word = ex.x.split_whitespace().next().unwrap_or("text").to_string();
    let last_word = ex.x.split_whitespace().last().unwrap_or("text").to_string();
    let first_class = s.classes[0].class_id.clone();
    let fabricated = match s.task {
        crate::schema::TaskKind::Ner => ExtractionRecord::entity(first_word.clone(), first_class),
        crate::schema::TaskKind::Re => ExtractionRecord::relation(first_word.clone(), first_class, last_word),
        crate::schema::TaskKind::Ee => ExtractionRecord::event(first_class, first_word.clone(), Vec::<(String, String)>::new()),
    };
    let mut with_extra: Vec<ExtractionRecord> = ex.gold.records().to_vec();
    with_extra.push(fabricated);
    let over = CanonicalSet::from(with_extra);
    let over = if over == ex.gold {
        // the fabricated record was already gold; fall back to dropping everything
        CanonicalSet::default()
    } else {
        over
    };
    let candidates = [
        format!("<think>Guess.</think>{}", over.to_json_string()),
        "I could not find a reliable answer in this text.".to_string(),
        if ex.gold.is_empty() {
            format!("<think>Quick.</think>{}", over.to_json_string())
        } else {
            "<think>Nothing here.</think>[]".to_string()
        },
    ];
    out.extend(candidates.iter().cycle().take(wrong).cloned());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub instance_id: String,
    pub prompt: String,
    pub completions: Vec<String>,
    #[serde(default)]
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub advantages: Vec<f64>,
}

/// Truncates to `max_len` characters.
pub fn truncate_chars(text: &str, max_len: usize) -> String {
    match text.char_indices().nth(max_len) {
        Some((i, _)) => text[..i].to_string(),
        None => text.to_string(),
    }
}

/// Draws `G` completions; rewards and advantages are left empty.
pub fn sample_group(
    ex: &LabeledExample,
    prompt: &str,
    policy: &mut dyn PolicyAdapter,
    cfg: &GrpoConfig,
) -> Result<GroupSample, GrpoError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(cfg.group_size));
    }
    let completions = policy.generate(ex, prompt, cfg.group_size, cfg.max_len)?;
    if completions.len() != cfg.group_size {
        return Err(GrpoError::PolicyFailure(format!(
            "policy returned {} completions, expected {}",
            completions.len(),
            cfg.group_size
        )));
    }
    Ok(GroupSample {
        instance_id: ex.id.clone(),
        prompt: prompt.to_string(),
        completions: completions.iter().map(|c| truncate_chars(c, cfg.max_len)).collect(),
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

/// Fills `rewards` with the total reward of each completion.
pub fn score_group(mut g: GroupSample, ex: &LabeledExample, reward: &RewardConfig) -> GroupSample {
    g.rewards = g
        .completions
        .iter()
        .map(|c| match score_completion(&ex.x, &ex.schema_ref, None, c, &ex.gold, reward) {
            Ok(b) => {
                if let Some(err) = &b.diagnostics.parse_error {
                    log::debug!("{}: unparseable completion scored 0 ({err})", ex.id);
                }
                b.r_total
            }
            Err(e) => {
                log::warn!("{}: reward failed: {e}", ex.id);
                0.0
            }
        })
        .collect();
    g
}

/// `(r - mean) / std` with the population standard deviation.
///
/// Groups whose standard deviation does not exceed [`ADVANTAGE_EPS`] get all
/// zero advantages, so identical rewards never produce noise.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= ADVANTAGE_EPS {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean completion length in characters.
    pub mean_response_length: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub records: Vec<DynamicsRecord>,
}

impl DynamicsLog {
    /// Appends a record; steps must strictly increase.
    pub fn push(&mut self, record: DynamicsRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "dynamics steps must increase");
        }
        self.records.push(record);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `step,mean_reward,mean_response_length` rows, for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,mean_response_length\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.mean_reward, r.mean_response_length));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    #[serde(rename = "G")]
    pub group_size: usize,
    pub max_len: usize,
    pub kl_coeff: f64,
    pub lr: f64,
    pub batch: usize,
}

/// One exported group, one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub instance_id: String,
    pub prompt: String,
    pub completions: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub config: BatchConfig,
}

/// Runs `steps` rounds of batch sampling, group scoring, advantage
/// computation and policy feedback. Each scored group is passed to `on_batch`.
///
/// Batches draw instances uniformly with replacement. Groups within a step
/// are scored in parallel; policy sampling and updates stay sequential so the
/// run is reproducible for a fixed seed.
pub fn run_alignment_loop(
    pool: &[LabeledExample],
    policy: &mut dyn PolicyAdapter,
    steps: usize,
    cfg: &GrpoConfig,
    templates: &PromptTemplates,
    on_batch: &mut dyn FnMut(BatchRecord),
) -> Result<DynamicsLog, GrpoError> {
    if pool.is_empty() {
        return Err(GrpoError::EmptyPool);
    }
    cfg.validate()?;
    let prompts: Vec<String> = pool
        .iter()
        .map(|ex| instruction_prompt(templates, &ex.x, &ex.schema_ref))
        .collect();
    let batch_cfg = BatchConfig {
        group_size: cfg.group_size,
        max_len: cfg.max_len,
        kl_coeff: cfg.kl_coeff,
        lr: cfg.lr,
        batch: cfg.batch_size,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = DynamicsLog::default();
    for step in 0..steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..pool.len())).collect();
        let mut groups = Vec::with_capacity(picks.len());
        for &i in &picks {
            groups.push((i, sample_group(&pool[i], &prompts[i], policy, cfg)?));
        }
        let scored: Vec<(usize, GroupSample)> = groups
            .into_par_iter()
            .map(|(i, g)| {
                let mut g = score_group(g, &pool[i], &cfg.reward);
                g.advantages = group_advantages(&g.rewards);
                (i, g)
            })
            .collect();
        let mut reward_sum = 0.0;
        let mut len_sum = 0usize;
        let mut n = 0usize;
        for (_, g) in scored {
            policy.update(&g.instance_id, &g.advantages);
            reward_sum += g.rewards.iter().sum::<f64>();
            len_sum += g.completions.iter().map(|c| c.chars().count()).sum::<usize>();
            n += g.completions.len();
            on_batch(BatchRecord {
                step,
                instance_id: g.instance_id,
                prompt: g.prompt,
                completions: g.completions,
                rewards: g.rewards,
                advantages: g.advantages,
                config: batch_cfg,
            });
        }
        log.push(DynamicsRecord {
            step,
            mean_reward: reward_sum / n as f64,
            mean_response_length: len_sum as f64 / n as f64,
        });
    }
    Ok(log)
}
