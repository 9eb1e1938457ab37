//! Group-relative policy optimization over sampler trajectories, with the
//! naive, customized (synergy + dynamic weights) and supervised baselines.

use crate::checkpoint;
use crate::env::{self, Condition, EnvConfig, Example, RewardBreakdown};
use crate::error::{Error, Result};
use crate::flow::{self, logprob_slice, mean_velocity_gain, transition_mean_into, SamplerConfig, SamplingMode, Trajectory};
use crate::nn::{GradientBundle, MlpArch, MlpParams};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::shaping::{self, AdvantagePair, ConflictStats, RewardVector, ShapingConfig};
use crate::tdw::{TdwConfig, TdwTable, WeightPair};
use crate::tensor::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Customized,
    Naive,
    Sft,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Customized => "customized",
            TrainMode::Naive => "naive",
            TrainMode::Sft => "sft",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "customized" => Ok(TrainMode::Customized),
            "naive" => Ok(TrainMode::Naive),
            "sft" => Ok(TrainMode::Sft),
            _ => Err(Error::Config(format!("unknown training mode `{s}`"))),
        }
    }
}

/// Where the per-step channel weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    /// The phase schedule in [`TrainConfig::tdw`].
    Dynamic,
    Static { w_id: f64, w_prompt: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub group_size: usize,
    pub groups_per_iter: usize,
    pub iterations: usize,
    pub subsample_steps: usize,
    pub clip_eps: f64,
    /// All members of a group start from the same `τ = 1` latent, so reward
    /// differences within the group come from the transition noise alone.
    pub shared_start_noise: bool,
    pub schedule: WeightSchedule,
    pub shaping: ShapingConfig,
    pub tdw: TdwConfig,
    pub sampler: SamplerConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Customized,
            group_size: 12,
            groups_per_iter: 8,
            iterations: 200,
            subsample_steps: 6,
            clip_eps: 0.2,
            shared_start_noise: false,
            schedule: WeightSchedule::Dynamic,
            shaping: ShapingConfig::default(),
            tdw: TdwConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: AdamWConfig {
                lr: 5e-4,
                ..AdamWConfig::default()
            },
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trainer: {m}")));
        self.sampler.validate()?;
        self.shaping.validate()?;
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.groups_per_iter == 0 {
            return bad("groups_per_iter must be positive".into());
        }
        if !(1..=self.sampler.steps).contains(&self.subsample_steps) {
            return bad(format!(
                "subsample_steps must lie in [1, {}], got {}",
                self.sampler.steps, self.subsample_steps
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if self.mode != TrainMode::Sft && self.sampler.mode != SamplingMode::Stochastic {
            return bad("policy-gradient modes need the stochastic sampler".into());
        }
        match self.schedule {
            WeightSchedule::Dynamic => {
                self.tdw.validate()?;
                if self.tdw.total_steps != self.sampler.steps {
                    return bad(format!(
                        "tdw.total_steps ({}) must equal sampler.steps ({})",
                        self.tdw.total_steps, self.sampler.steps
                    ));
                }
            }
            WeightSchedule::Static { w_id, w_prompt } => {
                if !(w_id >= 0.0 && w_prompt >= 0.0) {
                    return bad("static weights must be non-negative".into());
                }
            }
        }
        Ok(())
    }

    pub fn advantage_rule(&self) -> Result<AdvantageRule> {
        let weights = match self.schedule {
            WeightSchedule::Dynamic => StepWeights::Table(TdwTable::new(self.tdw)?),
            WeightSchedule::Static { w_id, w_prompt } => StepWeights::Constant(WeightPair { w_id, w_prompt }),
        };
        Ok(AdvantageRule {
            linear_only: self.mode == TrainMode::Naive,
            shaping: self.shaping,
            weights,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepWeights {
    Table(TdwTable),
    Constant(WeightPair),
}

impl StepWeights {
    pub fn at(&self, step: usize) -> Result<WeightPair> {
        match self {
            StepWeights::Table(t) => t.get(step),
            StepWeights::Constant(w) => Ok(*w),
        }
    }
}

/// Maps a member's advantage pair and a sampler step to the scalar advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRule {
    /// Weighted sum only (synergy ignored).
    pub linear_only: bool,
    pub shaping: ShapingConfig,
    pub weights: StepWeights,
}

impl AdvantageRule {
    pub fn at(&self, pair: AdvantagePair, step: usize) -> Result<f64> {
        shaped_advantage_at(pair, step, self)
    }
}

/// Step weights first, then the linear or synergy-shaped aggregate, clamped.
pub fn shaped_advantage_at(pair: AdvantagePair, step: usize, rule: &AdvantageRule) -> Result<f64> {
    let w = rule.weights.at(step)?;
    let cfg = rule.shaping.with_weights(w.w_id, w.w_prompt);
    Ok(if rule.linear_only {
        shaping::naive_aggregate(pair, cfg.w_id, cfg.w_prompt).clamp(-cfg.advantage_clip, cfg.advantage_clip)
    } else {
        shaping::sars_aggregate(pair, &cfg)
    })
}

/// `G` trajectories for one condition sampled under a frozen policy.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub id: u64,
    pub condition: Condition,
    pub cond: Tensor,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<AdvantagePair>,
    /// Fingerprint of the policy that produced the trajectories.
    pub policy_fingerprint: u64,
}

impl RolloutGroup {
    pub fn reward_vectors(&self) -> Vec<RewardVector> {
        self.rewards
            .iter()
            .map(|r| RewardVector {
                r_id: r.r_id,
                r_prompt: r.r_prompt,
            })
            .collect()
    }

    /// Steps at which every member has a log-density (non-zero noise).
    pub fn trainable_steps(&self) -> Vec<usize> {
        let n = self.trajectories[0].steps.len();
        (0..n)
            .filter(|&i| self.trajectories.iter().all(|t| t.steps[i].log_prob.is_some()))
            .collect()
    }
}

/// Options for [`rollout_group`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub group_size: usize,
    pub sampler: SamplerConfig,
    pub eps_std: f64,
    pub shared_start_noise: bool,
}

impl RolloutSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            group_size: cfg.group_size,
            sampler: cfg.sampler,
            eps_std: cfg.shaping.eps_std,
            shared_start_noise: cfg.shared_start_noise,
        }
    }
}

pub fn rollout_group<R: Rng + ?Sized>(
    policy_old: &MlpParams,
    condition: &Condition,
    env_cfg: &EnvConfig,
    spec: &RolloutSpec,
    id: u64,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let group_size = spec.group_size;
    if group_size < 2 {
        return Err(Error::invalid(format!("group size must be at least 2, got {group_size}")));
    }
    let cond = Tensor::from_vec(condition.encode(env_cfg)?);
    let shape = [env_cfg.pixels()];
    let shared = spec.shared_start_noise.then(|| flow::standard_normal(&shape, rng));
    let mut rngs: Vec<ChaCha8Rng> = (0..group_size).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect();
    let starts: Vec<Tensor> = rngs
        .iter_mut()
        .map(|r| shared.clone().unwrap_or_else(|| flow::standard_normal(&shape, r)))
        .collect();
    let conds = vec![cond.clone(); group_size];
    let trajectories = flow::integrate(policy_old, &conds, starts, &spec.sampler, &mut rngs)?;
    let rewards = trajectories
        .iter()
        .map(|t| env::score_latent(t.final_sample().data(), condition, env_cfg))
        .collect::<Result<Vec<_>>>()?;
    let vectors: Vec<RewardVector> = rewards
        .iter()
        .map(|r| RewardVector {
            r_id: r.r_id,
            r_prompt: r.r_prompt,
        })
        .collect();
    let advantages = shaping::group_advantages(&vectors, spec.eps_std)?;
    Ok(RolloutGroup {
        id,
        condition: *condition,
        cond,
        trajectories,
        rewards,
        advantages,
        policy_fingerprint: policy_old.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ObjectiveStats {
    pub terms: usize,
    pub clipped: usize,
    pub mean_ratio: f64,
}

/// Clipped surrogate `J` averaged over members and `steps`, and `∇J`.
///
/// Gradients flow through the transition mean only; the transition std is
/// fixed by the noise schedule.
pub fn grpo_objective(
    policy: &MlpParams,
    old_fingerprint: u64,
    group: &RolloutGroup,
    steps: &[usize],
    rule: &AdvantageRule,
    clip_eps: f64,
) -> Result<(f64, GradientBundle, ObjectiveStats)> {
    if group.policy_fingerprint != old_fingerprint {
        return Err(Error::StaleGroup {
            recorded: group.policy_fingerprint,
            current: old_fingerprint,
        });
    }
    if steps.is_empty() {
        return Err(Error::invalid("no timesteps selected"));
    }
    let d = policy.arch().latent_dim;
    let c = group.cond.len();
    let mut latents = Vec::new();
    let mut conds = Vec::new();
    let mut ts = Vec::new();
    for traj in &group.trajectories {
        for &i in steps {
            let st = traj
                .steps
                .get(i)
                .ok_or_else(|| Error::invalid(format!("step {i} not in trajectory")))?;
            if st.log_prob.is_none() {
                return Err(Error::invalid(format!("step {i} is deterministic and has no log-density")));
            }
            latents.extend_from_slice(st.latent.data());
            conds.extend_from_slice(group.cond.data());
            ts.push(st.tau);
        }
    }
    debug_assert_eq!(conds.len(), ts.len() * c);
    let (v, cache) = policy.forward_batch(&latents, &conds, &ts)?;
    let n = ts.len() as f64;
    let mut upstream = vec![0.0; v.len()];
    let mut mean = vec![0.0; d];
    let mut objective = 0.0;
    let mut stats = ObjectiveStats::default();
    let mut row = 0;
    for (m, traj) in group.trajectories.iter().enumerate() {
        for &i in steps {
            let st = &traj.steps[i];
            let eps = st.std / st.dtau.sqrt();
            let vr = &v[row * d..(row + 1) * d];
            transition_mean_into(st.latent.data(), vr, st.tau, st.dtau, eps, &mut mean);
            let logp = logprob_slice(&mean, st.std, st.action.data())?;
            let old = st.log_prob.expect("checked above");
            let ratio = (logp - old).exp();
            let adv = rule.at(group.advantages[m], i)?;
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
            objective += unclipped.min(clipped);
            stats.mean_ratio += ratio;
            if unclipped <= clipped {
                // ∂/∂v of ρA = ρA · ∂logp/∂μ · ∂μ/∂v
                let k = unclipped * mean_velocity_gain(st.tau, st.dtau, eps) / (st.std * st.std) / n;
                let up = &mut upstream[row * d..(row + 1) * d];
                for ((u, a), mu) in up.iter_mut().zip(st.action.data()).zip(&mean) {
                    *u = k * (a - mu);
                }
            } else {
                stats.clipped += 1;
            }
            row += 1;
        }
    }
    stats.terms = row;
    stats.mean_ratio /= n;
    let grads = policy.backward(&cache, &upstream)?;
    Ok((objective / n, grads, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub mode: String,
    pub mean_r_id: f64,
    pub mean_r_prompt: f64,
    pub conflict_frac: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "iter,mode,mean_r_id,mean_r_prompt,conflict_frac,objective,grad_norm,seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.mode,
            self.mean_r_id,
            self.mean_r_prompt,
            self.conflict_frac,
            self.objective,
            self.grad_norm,
            self.seconds
        )
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Policy-gradient trainer state; one call to [`Trainer::step`] is one
/// iteration (refresh the old policy, roll out, update once per group).
pub struct Trainer {
    pub config: TrainConfig,
    pub env: EnvConfig,
    pub params: MlpParams,
    optimizer: OptimizerState,
    rule: AdvantageRule,
    rng: ChaCha8Rng,
    iteration: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: EnvConfig, init: MlpParams) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        if config.mode == TrainMode::Sft {
            return Err(Error::Config("sft mode is driven by sft_finetune, not the policy-gradient trainer".into()));
        }
        if init.arch().latent_dim != env.pixels() || init.arch().cond_dim != env.cond_dim() {
            return Err(Error::Config(format!(
                "model dims ({}, {}) do not match the environment ({}, {})",
                init.arch().latent_dim,
                init.arch().cond_dim,
                env.pixels(),
                env.cond_dim()
            )));
        }
        let rule = config.advantage_rule()?;
        Ok(Self {
            optimizer: OptimizerState::new(&init, config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: init,
            rule,
            config,
            env,
            iteration: 0,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rollout(&mut self, policy_old: &MlpParams) -> Result<Vec<RolloutGroup>> {
        let spec = RolloutSpec::from_config(&self.config);
        (0..self.config.groups_per_iter)
            .map(|g| {
                let condition = env::sample_condition(&self.env, &mut self.rng);
                let id = (self.iteration * self.config.groups_per_iter + g) as u64;
                rollout_group(policy_old, &condition, &self.env, &spec, id, &mut self.rng)
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        let policy_old = self.params.clone();
        let fingerprint = policy_old.fingerprint();
        let groups = self.rollout(&policy_old)?;
        let mut objective = 0.0;
        let mut grad_norm = 0.0;
        for group in &groups {
            let eligible = group.trainable_steps();
            if eligible.len() < self.config.subsample_steps {
                return Err(Error::Config(format!(
                    "only {} stochastic steps available, {} requested",
                    eligible.len(),
                    self.config.subsample_steps
                )));
            }
            let mut steps: Vec<usize> = index::sample(&mut self.rng, eligible.len(), self.config.subsample_steps)
                .into_iter()
                .map(|k| eligible[k])
                .collect();
            steps.sort_unstable();
            let (j, mut grads, _) =
                grpo_objective(&self.params, fingerprint, group, &steps, &self.rule, self.config.clip_eps)?;
            if !j.is_finite() {
                return Err(Error::Diverged {
                    stage: "train",
                    step: self.iteration,
                    reason: format!("non-finite objective {j} in group {}", group.id),
                });
            }
            objective += j;
            grad_norm += grads.norm();
            grads.scale(-1.0);
            self.optimizer.step(&mut self.params, &grads).map_err(|e| Error::Diverged {
                stage: "train",
                step: self.iteration,
                reason: e.to_string(),
            })?;
        }
        let k = groups.len() as f64;
        let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
        let pairs: Vec<AdvantagePair> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
        let record = MetricsRecord {
            iter: self.iteration,
            mode: self.config.mode.name().into(),
            mean_r_id: all.iter().map(|r| r.r_id).sum::<f64>() / all.len() as f64,
            mean_r_prompt: all.iter().map(|r| r.r_prompt).sum::<f64>() / all.len() as f64,
            conflict_frac: shaping::conflict_stats(&pairs)?.conflict_fraction(),
            objective: objective / k,
            grad_norm: grad_norm / k,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub metrics: Vec<MetricsRecord>,
}

/// Run `config.iterations` iterations from `init`.
pub fn train(config: &TrainConfig, env: &EnvConfig, init: &MlpParams) -> Result<TrainOutcome> {
    train_with(config, env, init, |_, _| Ok(()))
}

/// As [`train`], calling `observe` after every iteration with the record and
/// the current parameters.
pub fn train_with<F>(config: &TrainConfig, env: &EnvConfig, init: &MlpParams, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord, &MlpParams) -> Result<()>,
{
    let mut trainer = Trainer::new(config.clone(), env.clone(), init.clone())?;
    let mut metrics = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let record = trainer.step()?;
        observe(&record, &trainer.params)?;
        metrics.push(record);
    }
    Ok(TrainOutcome {
        params: trainer.params,
        metrics,
    })
}

/// Training run that writes `metrics.csv`, periodic checkpoints and
/// `final.ckpt` into `out_dir`. On divergence the last good parameters are
/// saved as `diagnostic.ckpt` before the error is returned.
pub fn train_to_dir(config: &TrainConfig, env: &EnvConfig, init: &MlpParams, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let mut trainer = Trainer::new(config.clone(), env.clone(), init.clone())?;
    let mut metrics = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let last_good = trainer.params.clone();
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let diag: PathBuf = out_dir.join("diagnostic.ckpt");
                checkpoint::save(&diag, &last_good, trainer.iteration() as u64, config.seed)?;
                csv.flush()?;
                return Err(e);
            }
        };
        writeln!(csv, "{}", record.csv_row())?;
        csv.flush()?;
        let it = record.iter + 1;
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            checkpoint::save(&out_dir.join(format!("iter_{it:05}.ckpt")), &trainer.params, it as u64, config.seed)?;
        }
        metrics.push(record);
    }
    checkpoint::save(&out_dir.join("final.ckpt"), &trainer.params, config.iterations as u64, config.seed)?;
    Ok(TrainOutcome {
        params: trainer.params,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub dataset_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub tau_min: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dataset_size: 4096,
            batch_size: 64,
            steps: 3000,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            tau_min: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain: dataset_size and batch_size must be positive".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(Error::Config(format!("pretrain: tau_min must lie in (0, 1), got {}", self.tau_min)));
        }
        Ok(())
    }
}

/// Flow-matching regression on `dataset`; returns the parameters and the
/// per-step minibatch losses.
pub fn fit_flow_matching(
    config: &PretrainConfig,
    env: &EnvConfig,
    dataset: &[Example],
    init: MlpParams,
    stage: &'static str,
) -> Result<(MlpParams, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("flow-matching dataset is empty"));
    }
    let latents: Vec<Vec<f64>> = dataset.iter().map(|e| e.latent(env)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f10e);
    let mut params = init;
    let mut opt = OptimizerState::new(&params, config.optimizer);
    let mut losses = Vec::with_capacity(config.steps);
    let batch = config.batch_size.min(dataset.len());
    for step in 0..config.steps {
        let picks = index::sample(&mut rng, dataset.len(), batch);
        let examples: Vec<(&[f64], &[f64])> = picks
            .iter()
            .map(|k| (latents[k].as_slice(), dataset[k].encoding.as_slice()))
            .collect();
        let (loss, grads) = flow::flow_matching_loss(&params, &examples, config.tau_min, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage,
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        opt.step(&mut params, &grads).map_err(|e| Error::Diverged {
            stage,
            step,
            reason: e.to_string(),
        })?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Fresh initialization followed by flow matching on a generated dataset.
pub fn pretrain(config: &PretrainConfig, env: &EnvConfig, arch: MlpArch) -> Result<(MlpParams, Vec<f64>)> {
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dataset = env::make_dataset(config.dataset_size, env, &mut rng)?;
    let init = MlpParams::init(arch, &mut rng)?;
    fit_flow_matching(config, env, &dataset, init, "pretrain")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Fraction of the ranked candidate pairs kept.
    pub keep_fraction: f64,
    pub fit: PretrainConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.5,
            fit: PretrainConfig {
                steps: 300,
                optimizer: AdamWConfig {
                    lr: 3e-4,
                    ..AdamWConfig::default()
                },
                dataset_size: 2048,
                ..PretrainConfig::default()
            },
        }
    }
}

/// Keep the top `q` fraction of `examples` by oracle score `r_id + r_prompt`
/// (stable order on ties). `q = 1` keeps everything.
pub fn curate(examples: Vec<Example>, q: f64, env_cfg: &EnvConfig) -> Result<Vec<Example>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("sft keep_fraction must lie in (0, 1], got {q}")));
    }
    let mut scored = examples
        .into_iter()
        .map(|e| {
            let s = env::score(&e.image, &e.condition, env_cfg)?;
            Ok((s.r_id + s.r_prompt, e))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let keep = ((scored.len() as f64 * q).ceil() as usize).max(1);
    Ok(scored.into_iter().take(keep).map(|(_, e)| e).collect())
}

/// Continued flow matching from `init` on a curated oracle dataset.
pub fn sft_finetune(config: &SftConfig, env: &EnvConfig, init: &MlpParams) -> Result<(MlpParams, Vec<f64>)> {
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.fit.seed ^ 0x0005_f7da_7a5e);
    let candidates = env::make_dataset(config.fit.dataset_size, env, &mut rng)?;
    let curated = curate(candidates, config.keep_fraction, env)?;
    fit_flow_matching(&config.fit, env, &curated, init.clone(), "sft")
}

/// Aggregate conflict statistics over groups.
pub fn groups_conflict_stats(groups: &[RolloutGroup]) -> Result<ConflictStats> {
    let pairs: Vec<AdvantagePair> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    shaping::conflict_stats(&pairs)
}
