//! Rectified-flow dynamics: forward interpolation, the flow-matching loss,
//! and the deterministic / stochastic samplers.
//!
//! Time runs from `τ = 1` (pure noise) to `τ = 0` (data). The sampler grid is
//! `τ_i = 1 - i/T` for `i = 0..T`, with the terminal point clamped to
//! `τ_min`. Step `i` integrates from `τ_i` down to `τ_{i+1}`.
//!
//! The stochastic sampler is the marginal-preserving reverse SDE
//!
//! ```text
//! dz = (v - ½ ε_τ² ∇log p_τ(z)) dτ + ε_τ dW,    ∇log p_τ(z) = -(z + (1-τ) v) / τ
//! ```
//!
//! discretized with Euler–Maruyama, so each transition is an isotropic
//! Gaussian `N(μ, s² I)` with `s = ε_τ √Δτ` and an exact log-density.

use crate::error::{Error, Result};
use crate::nn::{GradientBundle, MlpParams};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// A (possibly learned) velocity field `v(z, t, c)` evaluated row-wise.
pub trait VelocityField {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// `latents` is `rows × latent_dim`, `conds` is `rows × cond_dim`,
    /// `rows = ts.len()`.
    fn velocity_batch(&self, latents: &[f64], conds: &[f64], ts: &[f64]) -> Result<Vec<f64>>;
}

impl VelocityField for MlpParams {
    fn latent_dim(&self) -> usize {
        self.arch().latent_dim
    }
    fn cond_dim(&self) -> usize {
        self.arch().cond_dim
    }
    fn velocity_batch(&self, latents: &[f64], conds: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        self.evaluate_batch(latents, conds, ts)
    }
}

/// Exact velocity for data `x0 ~ N(0, I)`: the marginal at time `t` is
/// `N(0, ((1-t)² + t²) I)` and `v*(z, t) = (2t - 1) z / ((1-t)² + t²)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVelocity {
    pub dim: usize,
}

impl GaussianVelocity {
    pub fn marginal_variance(t: f64) -> f64 {
        (1.0 - t).powi(2) + t * t
    }
}

impl VelocityField for GaussianVelocity {
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn cond_dim(&self) -> usize {
        0
    }
    fn velocity_batch(&self, latents: &[f64], _conds: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(latents.len());
        for (r, &t) in ts.iter().enumerate() {
            let k = (2.0 * t - 1.0) / Self::marginal_variance(t);
            out.extend(latents[r * self.dim..(r + 1) * self.dim].iter().map(|z| k * z));
        }
        Ok(out)
    }
}

/// `(1 - t) x0 + t x1`
pub fn interpolate_forward(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    x0.zip_with(x1, |a, b| (1.0 - t) * a + t * b)
}

/// Score of the marginal implied by a rectified-flow velocity:
/// `-(z + (1 - t) v) / t`.
pub fn velocity_to_score(v: &Tensor, z: &Tensor, t: f64, tau_min: f64) -> Result<Tensor> {
    if !(t >= tau_min && t <= 1.0) {
        return Err(Error::invalid(format!(
            "score conversion at t = {t} outside [τ_min = {tau_min}, 1]"
        )));
    }
    z.zip_with(v, |z, v| -(z + (1.0 - t) * v) / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `ε_τ = 0`: the SDE collapses to the probability-flow ODE.
    Zero,
    /// `ε_τ = scale · √τ`
    SqrtTau { scale: f64 },
    Constant { level: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::SqrtTau { scale: 0.7 }
    }
}

impl NoiseSchedule {
    /// Diffusion scale at `tau`; forced to zero below `2 τ_min` where the
    /// score conversion is ill-conditioned.
    pub fn level(&self, tau: f64, tau_min: f64) -> f64 {
        if tau < 2.0 * tau_min {
            return 0.0;
        }
        match *self {
            NoiseSchedule::Zero => 0.0,
            NoiseSchedule::SqrtTau { scale } => scale * tau.sqrt(),
            NoiseSchedule::Constant { level } => level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplingMode,
    pub schedule: NoiseSchedule,
    pub tau_min: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            mode: SamplingMode::Stochastic,
            schedule: NoiseSchedule::default(),
            tau_min: 1e-3,
        }
    }
}

impl SamplerConfig {
    pub fn deterministic(self) -> Self {
        Self {
            mode: SamplingMode::Deterministic,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid("sampler needs at least 2 steps"));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0 / self.steps as f64) {
            return Err(Error::invalid(format!(
                "τ_min = {} must lie in (0, 1/T = {}]",
                self.tau_min,
                1.0 / self.steps as f64
            )));
        }
        Ok(())
    }

    /// `T + 1` grid points from 1 down to `τ_min`.
    pub fn grid(&self) -> Vec<f64> {
        let t = self.steps as f64;
        (0..=self.steps)
            .map(|i| (1.0 - i as f64 / t).max(self.tau_min))
            .collect()
    }

    /// Diffusion scale used at step `i` (zero in deterministic mode).
    pub fn noise_level(&self, tau: f64) -> f64 {
        match self.mode {
            SamplingMode::Deterministic => 0.0,
            SamplingMode::Stochastic => self.schedule.level(tau, self.tau_min),
        }
    }
}

/// One recorded transition `z → z'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub index: usize,
    pub tau: f64,
    pub dtau: f64,
    pub latent: Tensor,
    pub action: Tensor,
    pub mean: Tensor,
    pub std: f64,
    /// `None` when `std == 0` (a point mass).
    pub log_prob: Option<f64>,
    /// Network velocity at `(latent, tau)`.
    pub velocity: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub cond: Tensor,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Tensor {
        &self.steps.last().expect("trajectory has at least one step").action
    }

    /// `z'_i == z_{i+1}` for every step.
    pub fn is_chained(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].action == w[1].latent)
    }
}

/// Coefficient of `v` in the transition mean: `∂μ/∂v = -Δτ (1 + ε²(1-τ)/(2τ))`.
pub fn mean_velocity_gain(tau: f64, dtau: f64, eps: f64) -> f64 {
    -dtau * (1.0 + eps * eps * (1.0 - tau) / (2.0 * tau))
}

/// `μ = z - Δτ (v - ½ ε² score(z, v, τ))`, written into `out`.
pub fn transition_mean_into(z: &[f64], v: &[f64], tau: f64, dtau: f64, eps: f64, out: &mut [f64]) {
    let half_eps2 = 0.5 * eps * eps;
    for ((o, &z), &v) in out.iter_mut().zip(z).zip(v) {
        let score = -(z + (1.0 - tau) * v) / tau;
        let drift = v - half_eps2 * score;
        *o = z + drift * -dtau;
    }
}

/// Exact log-density of `action` under `N(mean, std² I)`.
pub fn transition_logprob(mean: &Tensor, std: f64, action: &Tensor) -> Result<f64> {
    mean.ensure_same_shape(action)?;
    logprob_slice(mean.data(), std, action.data())
}

pub(crate) fn logprob_slice(mean: &[f64], std: f64, action: &[f64]) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::invalid(format!("transition std {std} must be positive")));
    }
    let d = mean.len() as f64;
    let sq: f64 = mean.iter().zip(action).map(|(m, a)| (a - m) * (a - m)).sum();
    Ok(-sq / (2.0 * std * std) - 0.5 * d * (2.0 * std::f64::consts::PI * std * std).ln())
}

/// One Euler–Maruyama step from `τ` to `τ - Δτ` for a single latent.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    z: &Tensor,
    cond: &Tensor,
    tau: f64,
    dtau: f64,
    schedule: &NoiseSchedule,
    tau_min: f64,
    rng: &mut R,
) -> Result<TrajectoryStep> {
    let eps = schedule.level(tau, tau_min);
    let mut steps = step_batch(field, z.data(), cond.data(), 1, tau, dtau, eps, 0, &mut [rng], z.shape())?;
    Ok(steps.pop().expect("one row"))
}

/// Deterministic Euler step (the `ε = 0` case of [`sde_step`]).
pub fn ode_step<F: VelocityField + ?Sized>(
    field: &F,
    z: &Tensor,
    cond: &Tensor,
    tau: f64,
    dtau: f64,
) -> Result<TrajectoryStep> {
    let mut none: [&mut rand_chacha::ChaCha8Rng; 0] = [];
    let mut steps = step_batch(field, z.data(), cond.data(), 1, tau, dtau, 0.0, 0, &mut none, z.shape())?;
    Ok(steps.pop().expect("one row"))
}

/// Step `rows` latents together. With `eps == 0` no randomness is drawn and
/// `rngs` may be empty.
#[allow(clippy::too_many_arguments)]
fn step_batch<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    z: &[f64],
    conds: &[f64],
    rows: usize,
    tau: f64,
    dtau: f64,
    eps: f64,
    index: usize,
    rngs: &mut [&mut R],
    latent_shape: &[usize],
) -> Result<Vec<TrajectoryStep>> {
    if !(dtau > 0.0) || tau - dtau < -1e-12 {
        return Err(Error::invalid(format!("invalid step τ = {tau}, Δτ = {dtau}")));
    }
    let d = field.latent_dim();
    let ts = vec![tau; rows];
    let v = field.velocity_batch(z, conds, &ts)?;
    let std = eps * dtau.sqrt();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let zr = &z[r * d..(r + 1) * d];
        let vr = &v[r * d..(r + 1) * d];
        let mut mean = vec![0.0; d];
        transition_mean_into(zr, vr, tau, dtau, eps, &mut mean);
        if let Some(i) = mean.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("transition mean at step {index} (τ = {tau})"),
                index: i,
            });
        }
        let (action, log_prob) = if std > 0.0 {
            let rng = &mut rngs[r];
            let action: Vec<f64> = mean
                .iter()
                .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lp = logprob_slice(&mean, std, &action)?;
            (action, Some(lp))
        } else {
            (mean.clone(), None)
        };
        out.push(TrajectoryStep {
            index,
            tau,
            dtau,
            latent: Tensor::new(latent_shape.to_vec(), zr.to_vec())?,
            action: Tensor::new(latent_shape.to_vec(), action)?,
            mean: Tensor::new(latent_shape.to_vec(), mean)?,
            std,
            log_prob,
            velocity: Tensor::new(latent_shape.to_vec(), vr.to_vec())?,
        });
    }
    Ok(out)
}

/// Integrate several latents from their given starting points at `τ = 1`.
///
/// `conds` holds one condition row per start. In stochastic mode, member `r`
/// draws its transition noise from `rngs[r]` only, so a member's path does not
/// depend on what else is in the batch.
pub fn integrate<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    conds: &[Tensor],
    starts: Vec<Tensor>,
    config: &SamplerConfig,
    rngs: &mut [R],
) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let rows = starts.len();
    if rows == 0 || conds.len() != rows {
        return Err(Error::invalid("need one condition per start latent"));
    }
    let stochastic = config.mode == SamplingMode::Stochastic;
    if stochastic && rngs.len() != rows {
        return Err(Error::invalid("stochastic sampling needs one rng per member"));
    }
    let shape = starts[0].shape().to_vec();
    let d = field.latent_dim();
    if starts.iter().any(|s| s.len() != d) {
        return Err(Error::Shape {
            expected: vec![d],
            actual: starts.iter().map(Tensor::len).collect(),
        });
    }
    let cond_flat: Vec<f64> = conds.iter().flat_map(|c| c.data().iter().copied()).collect();
    if cond_flat.len() != rows * field.cond_dim() {
        return Err(Error::Shape {
            expected: vec![rows, field.cond_dim()],
            actual: vec![cond_flat.len()],
        });
    }
    let mut z: Vec<f64> = starts.iter().flat_map(|s| s.data().iter().copied()).collect();
    let grid = config.grid();
    let mut trajs: Vec<Trajectory> = conds
        .iter()
        .map(|c| Trajectory {
            cond: c.clone(),
            steps: Vec::with_capacity(config.steps),
        })
        .collect();
    let mut rng_refs: Vec<&mut R> = rngs.iter_mut().collect();
    for i in 0..config.steps {
        let (tau, next) = (grid[i], grid[i + 1]);
        let eps = config.noise_level(tau);
        let steps = step_batch(field, &z, &cond_flat, rows, tau, tau - next, eps, i, &mut rng_refs, &shape)?;
        for (r, step) in steps.into_iter().enumerate() {
            z[r * d..(r + 1) * d].copy_from_slice(step.action.data());
            trajs[r].steps.push(step);
        }
    }
    Ok(trajs)
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Draw `z ~ N(0, I)` at `τ = 1` and integrate to `τ_min`.
pub fn sample_trajectory<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    cond: &Tensor,
    latent_shape: &[usize],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let start = standard_normal(latent_shape, rng);
    let mut out = integrate(field, std::slice::from_ref(cond), vec![start], config, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one trajectory"))
}

/// `G` trajectories under one condition; member `i` uses `rngs[i]` for its
/// start latent and transition noise.
pub fn sample_group<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    cond: &Tensor,
    latent_shape: &[usize],
    config: &SamplerConfig,
    rngs: &mut [R],
) -> Result<Vec<Trajectory>> {
    let starts: Vec<Tensor> = rngs.iter_mut().map(|r| standard_normal(latent_shape, r)).collect();
    let conds = vec![cond.clone(); starts.len()];
    integrate(field, &conds, starts, config, rngs)
}

/// A flow-matching minibatch: interpolated latents with their regression targets.
#[derive(Debug, Clone)]
pub struct FlowMatchingBatch {
    pub latents: Vec<f64>,
    pub conds: Vec<f64>,
    pub ts: Vec<f64>,
    /// `x1 - x0`
    pub targets: Vec<f64>,
}

/// Draw `t ~ U(τ_min, 1)` and `x1 ~ N(0, I)` per example and build
/// `z_t = (1-t) x0 + t x1` with target velocity `x1 - x0`.
pub fn flow_matching_batch<R: Rng + ?Sized>(
    examples: &[(&[f64], &[f64])],
    tau_min: f64,
    rng: &mut R,
) -> Result<FlowMatchingBatch> {
    if examples.is_empty() {
        return Err(Error::invalid("empty flow-matching batch"));
    }
    let mut b = FlowMatchingBatch {
        latents: Vec::new(),
        conds: Vec::new(),
        ts: Vec::with_capacity(examples.len()),
        targets: Vec::new(),
    };
    for (x0, cond) in examples {
        let t = rng.gen_range(tau_min..1.0);
        b.ts.push(t);
        b.conds.extend_from_slice(cond);
        for &x in x0.iter() {
            let x1: f64 = rng.sample(StandardNormal);
            b.latents.push((1.0 - t) * x + t * x1);
            b.targets.push(x1 - x);
        }
    }
    Ok(b)
}

/// `mean_b ‖target_b - v(z_b, t_b, c_b)‖²` for any field.
pub fn flow_matching_value<F: VelocityField + ?Sized>(field: &F, batch: &FlowMatchingBatch) -> Result<f64> {
    let v = field.velocity_batch(&batch.latents, &batch.conds, &batch.ts)?;
    let sq: f64 = v.iter().zip(&batch.targets).map(|(v, u)| (u - v) * (u - v)).sum();
    Ok(sq / batch.ts.len() as f64)
}

/// Flow-matching loss and its gradient for the MLP on a prepared batch.
pub fn flow_matching_grad(params: &MlpParams, batch: &FlowMatchingBatch) -> Result<(f64, GradientBundle)> {
    let (v, cache) = params.forward_batch(&batch.latents, &batch.conds, &batch.ts)?;
    let n = batch.ts.len() as f64;
    let mut sq = 0.0;
    let upstream: Vec<f64> = v
        .iter()
        .zip(&batch.targets)
        .map(|(v, u)| {
            sq += (u - v) * (u - v);
            -2.0 * (u - v) / n
        })
        .collect();
    let grads = params.backward(&cache, &upstream)?;
    Ok((sq / n, grads))
}

/// Sample a batch from `(x0, cond)` examples and return loss and gradient.
pub fn flow_matching_loss<R: Rng + ?Sized>(
    params: &MlpParams,
    examples: &[(&[f64], &[f64])],
    tau_min: f64,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    let batch = flow_matching_batch(examples, tau_min, rng)?;
    flow_matching_grad(params, &batch)
}

fn digest(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in values {
        for byte in x.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Serialize)]
struct StepLine {
    i: usize,
    tau: f64,
    z_digest: String,
    mu_digest: String,
    s: f64,
    logp: Option<f64>,
}

/// One JSON object per step: `{i, tau, z_digest, mu_digest, s, logp}`.
pub fn write_trajectory_jsonl<W: Write>(traj: &Trajectory, mut out: W) -> Result<()> {
    for s in &traj.steps {
        let line = StepLine {
            i: s.index,
            tau: s.tau,
            z_digest: digest(s.latent.data()),
            mu_digest: digest(s.mean.data()),
            s: s.std,
            logp: s.log_prob,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Full per-step latents as consecutive little-endian `f32` blocks
/// (`steps × latent_dim`), followed by the final sample.
pub fn write_latents_f32<W: Write>(traj: &Trajectory, mut out: W) -> Result<()> {
    for s in &traj.steps {
        for &x in s.latent.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    for &x in traj.final_sample().data() {
        out.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}
