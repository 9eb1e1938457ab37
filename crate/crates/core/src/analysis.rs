//! Policy evaluation on held-out conditions and frequency-band analysis of
//! sampler trajectories.

use crate::env::{self, Condition, EnvConfig, RewardBreakdown};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig, Trajectory};
use crate::nn::MlpParams;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use std::io::Write;

/// Anything that maps conditions to images.
pub trait ImagePolicy {
    fn generate(&self, conditions: &[Condition], env: &EnvConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>>;
}

/// Learned velocity field integrated with a given sampler.
pub struct FlowPolicy<'a> {
    pub params: &'a MlpParams,
    pub sampler: SamplerConfig,
}

impl FlowPolicy<'_> {
    pub fn trajectories(
        &self,
        conditions: &[Condition],
        env: &EnvConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>> {
        let conds = conditions
            .iter()
            .map(|c| c.encode(env).map(Tensor::from_vec))
            .collect::<Result<Vec<_>>>()?;
        let starts: Vec<Tensor> = conditions
            .iter()
            .map(|_| flow::standard_normal(&[env.pixels()], rng))
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = conditions.iter().map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect();
        flow::integrate(self.params, &conds, starts, &self.sampler, &mut rngs)
    }
}

impl ImagePolicy for FlowPolicy<'_> {
    fn generate(&self, conditions: &[Condition], env: &EnvConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        self.trajectories(conditions, env, rng)?
            .iter()
            .map(|t| env::latent_to_image(t.final_sample().data(), env))
            .collect()
    }
}

/// Renders the requested subject exactly at the target.
pub struct OraclePolicy;

impl ImagePolicy for OraclePolicy {
    fn generate(&self, conditions: &[Condition], env: &EnvConfig, _rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        conditions
            .iter()
            .map(|c| env::render_subject(&c.subject, c.target, env.height, env.width))
            .collect()
    }
}

/// Fixed evaluation conditions drawn from their own seed stream.
pub fn holdout_conditions(env: &EnvConfig, n: usize, seed: u64) -> Vec<Condition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e7a_1000_0000_0001);
    (0..n).map(|_| env::sample_condition(env, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_r_id: f64,
    pub std_r_id: f64,
    pub mean_r_prompt: f64,
    pub std_r_prompt: f64,
    pub detection_failures: usize,
    /// Per-condition `(r_id, r_prompt)`.
    pub points: Vec<(f64, f64)>,
}

impl EvalSummary {
    pub fn total(&self) -> f64 {
        self.mean_r_id + self.mean_r_prompt
    }

    /// CSV with header `r_id,r_prompt`.
    pub fn write_points_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r_id,r_prompt")?;
        for (a, b) in &self.points {
            writeln!(out, "{a},{b}")?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn eval_policy<P: ImagePolicy + ?Sized>(
    policy: &P,
    conditions: &[Condition],
    env: &EnvConfig,
    seed: u64,
) -> Result<EvalSummary> {
    if conditions.is_empty() {
        return Err(Error::invalid("evaluation needs at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = policy.generate(conditions, env, &mut rng)?;
    let scores = images
        .iter()
        .zip(conditions)
        .map(|(img, c)| env::score(img, c, env))
        .collect::<Result<Vec<RewardBreakdown>>>()?;
    let ids: Vec<f64> = scores.iter().map(|s| s.r_id).collect();
    let prompts: Vec<f64> = scores.iter().map(|s| s.r_prompt).collect();
    let (mean_r_id, std_r_id) = mean_std(&ids);
    let (mean_r_prompt, std_r_prompt) = mean_std(&prompts);
    Ok(EvalSummary {
        n: conditions.len(),
        mean_r_id,
        std_r_id,
        mean_r_prompt,
        std_r_prompt,
        detection_failures: scores.iter().filter(|s| s.centroid.is_none()).count(),
        points: ids.into_iter().zip(prompts).collect(),
    })
}

/// Deterministic-sampler evaluation of a parameter set.
pub fn eval_params(
    params: &MlpParams,
    sampler: &SamplerConfig,
    conditions: &[Condition],
    env: &EnvConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let policy = FlowPolicy {
        params,
        sampler: sampler.deterministic(),
    };
    eval_policy(&policy, conditions, env, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BandEnergy {
    pub dc: f64,
    pub low: f64,
    pub high: f64,
}

impl BandEnergy {
    pub fn total(&self) -> f64 {
        self.dc + self.low + self.high
    }
}

/// Split of the 2-D spectrum of `image` (`h × w`, row-major) at radial
/// frequency `k_c = cutoff_fraction · h / 2`. Energies are normalized so that
/// `dc + low + high` equals the pixel-domain sum of squares.
pub fn band_energies(image: &[f64], h: usize, w: usize, cutoff_fraction: f64, planner: &mut FftPlanner<f64>) -> Result<BandEnergy> {
    if image.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![image.len()],
        });
    }
    if !(cutoff_fraction > 0.0) {
        return Err(Error::invalid(format!("cutoff fraction must be positive, got {cutoff_fraction}")));
    }
    let mut buf: Vec<Complex<f64>> = image.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let k_c = cutoff_fraction * h as f64 / 2.0;
    let norm = (h * w) as f64;
    let mut e = BandEnergy::default();
    for y in 0..h {
        let ky = y.min(h - y) as f64;
        for x in 0..w {
            let kx = x.min(w - x) as f64;
            let p = buf[y * w + x].norm_sqr() / norm;
            if x == 0 && y == 0 {
                e.dc += p;
            } else if (kx * kx + ky * ky).sqrt() <= k_c {
                e.low += p;
            } else {
                e.high += p;
            }
        }
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandPoint {
    pub step: usize,
    pub tau: f64,
    pub dc: f64,
    pub low: f64,
    pub high: f64,
    pub low_frac: f64,
    pub high_frac: f64,
}

/// Mean band energies of the clean-image estimate along a batch of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FftBandCurve {
    pub cutoff_fraction: f64,
    pub trajectories: usize,
    pub points: Vec<BandPoint>,
}

impl FftBandCurve {
    /// First step from which the low-band fraction of final energy stays
    /// within `[level, 2 - level]`.
    pub fn low_convergence_step(&self, level: f64) -> usize {
        settled_from(self.points.iter().map(|p| p.low_frac), level)
    }

    pub fn high_convergence_step(&self, level: f64) -> usize {
        settled_from(self.points.iter().map(|p| p.high_frac), level)
    }

    /// CSV with header `step,tau,dc,low,high,low_frac,high_frac`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,tau,dc,low,high,low_frac,high_frac")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.step, p.tau, p.dc, p.low, p.high, p.low_frac, p.high_frac
            )?;
        }
        Ok(())
    }
}

/// For a curve rising towards 1 this is the first index reaching `level`;
/// curves that start above their final value count once they are back
/// within the same relative band.
fn settled_from(fracs: impl Iterator<Item = f64>, level: f64) -> usize {
    let v: Vec<f64> = fracs.collect();
    let inside = |f: f64| f >= level && f <= 2.0 - level;
    v.iter().rposition(|&f| !inside(f)).map_or(0, |i| (i + 1).min(v.len() - 1))
}

/// Band energies per sampler step of the clean-image estimate
/// `x̂ = z - τ v`, followed by the final sample, averaged over trajectories.
pub fn analyze_fft(trajectories: &[Trajectory], h: usize, w: usize, cutoff_fraction: f64) -> Result<FftBandCurve> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::invalid("FFT analysis needs at least one trajectory"))?;
    let steps = first.steps.len();
    if steps == 0 {
        return Err(Error::invalid("empty trajectory"));
    }
    if first.steps[0].latent.len() != h * w {
        return Err(Error::invalid(format!(
            "latents of length {} are not {h}x{w} images",
            first.steps[0].latent.len()
        )));
    }
    let mut planner = FftPlanner::new();
    let mut sums = vec![BandEnergy::default(); steps + 1];
    let mut taus = vec![0.0; steps + 1];
    for traj in trajectories {
        if traj.steps.len() != steps {
            return Err(Error::invalid("trajectories differ in length"));
        }
        let mut estimate = vec![0.0; h * w];
        for (i, st) in traj.steps.iter().enumerate() {
            for ((e, z), v) in estimate.iter_mut().zip(st.latent.data()).zip(st.velocity.data()) {
                *e = z - st.tau * v;
            }
            let b = band_energies(&estimate, h, w, cutoff_fraction, &mut planner)?;
            sums[i].dc += b.dc;
            sums[i].low += b.low;
            sums[i].high += b.high;
            taus[i] = st.tau;
        }
        let last = &traj.steps[steps - 1];
        let b = band_energies(last.action.data(), h, w, cutoff_fraction, &mut planner)?;
        sums[steps].dc += b.dc;
        sums[steps].low += b.low;
        sums[steps].high += b.high;
        taus[steps] = last.tau - last.dtau;
    }
    let n = trajectories.len() as f64;
    let fin = sums[steps];
    let frac = |x: f64, f: f64| if f > 0.0 { x / f } else { 0.0 };
    let points = sums
        .iter()
        .enumerate()
        .map(|(i, s)| BandPoint {
            step: i,
            tau: taus[i],
            dc: s.dc / n,
            low: s.low / n,
            high: s.high / n,
            low_frac: frac(s.low, fin.low),
            high_frac: frac(s.high, fin.high),
        })
        .collect();
    Ok(FftBandCurve {
        cutoff_fraction,
        trajectories: trajectories.len(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::GaussianVelocity;
    use proptest::prelude::*;

    fn energies(img: &[f64], n: usize) -> BandEnergy {
        band_energies(img, n, n, 0.5, &mut FftPlanner::new()).unwrap()
    }

    #[test]
    fn constant_image_is_all_dc() {
        let e = energies(&[0.7; 64], 8);
        assert!((e.dc - 0.49 * 64.0).abs() < 1e-9);
        assert!(e.low.abs() < 1e-20 && e.high.abs() < 1e-20);
    }

    #[test]
    fn nyquist_checkerboard_is_all_high() {
        let img: Vec<f64> = (0..64).map(|k| if (k / 8 + k % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = energies(&img, 8);
        assert!((e.high - 64.0).abs() < 1e-9);
        assert!(e.dc.abs() < 1e-20 && e.low.abs() < 1e-20);
    }

    #[test]
    fn slow_cosine_is_low_band() {
        let img: Vec<f64> = (0..256)
            .map(|k| (2.0 * std::f64::consts::PI * (k % 16) as f64 / 16.0).cos())
            .collect();
        let e = energies(&img, 16);
        assert!((e.low - 128.0).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(band_energies(&[0.0; 10], 4, 4, 0.5, &mut FftPlanner::new()).is_err());
    }

    #[test]
    fn oracle_policy_is_an_upper_bound() {
        let env = EnvConfig::default();
        let conds = holdout_conditions(&env, 40, 1);
        let s = eval_policy(&OraclePolicy, &conds, &env, 0).unwrap();
        assert!(s.mean_r_id >= 0.99 && s.mean_r_prompt >= 0.99, "{s:?}");
    }

    #[test]
    fn evaluation_is_reproducible() {
        use crate::nn::{MlpArch, MlpParams};
        let env = EnvConfig::default();
        let p = MlpParams::init(MlpArch::new(256, env.cond_dim(), vec![8]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let conds = holdout_conditions(&env, 6, 3);
        let sampler = SamplerConfig {
            steps: 5,
            ..SamplerConfig::default()
        };
        let a = eval_params(&p, &sampler, &conds, &env, 4).unwrap();
        let b = eval_params(&p, &sampler, &conds, &env, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fft_curve_on_gaussian_field() {
        let field = GaussianVelocity { dim: 64 };
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        }
        .deterministic();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trajs: Vec<Trajectory> = (0..4)
            .map(|_| flow::sample_trajectory(&field, &Tensor::from_vec(vec![]), &[64], &cfg, &mut rng).unwrap())
            .collect();
        let curve = analyze_fft(&trajs, 8, 8, 0.5).unwrap();
        assert_eq!(curve.points.len(), 11);
        let last = curve.points.last().unwrap();
        assert!((last.low_frac - 1.0).abs() < 1e-12 && (last.high_frac - 1.0).abs() < 1e-12);
        assert!(curve.points.iter().all(|p| p.dc >= 0.0 && p.low >= 0.0 && p.high >= 0.0));
        assert!(analyze_fft(&trajs, 4, 4, 0.5).is_err());
        assert!(analyze_fft(&[], 8, 8, 0.5).is_err());
    }

    #[test]
    fn convergence_index_settles() {
        assert_eq!(settled_from([0.1, 0.5, 0.95, 0.97, 1.0].into_iter(), 0.9), 2);
        assert_eq!(settled_from([0.1, 0.5, 0.95, 0.8, 1.0].into_iter(), 0.9), 4);
        assert_eq!(settled_from([1.3, 1.05, 1.0].into_iter(), 0.9), 1);
        assert_eq!(settled_from([1.0, 1.0].into_iter(), 0.9), 0);
    }

    proptest! {
        #[test]
        fn parseval_partition(img in proptest::collection::vec(-3.0f64..3.0, 256), cutoff in 0.1f64..1.5) {
            let e = band_energies(&img, 16, 16, cutoff, &mut FftPlanner::new()).unwrap();
            let direct: f64 = img.iter().map(|x| x * x).sum();
            prop_assert!((e.total() - direct).abs() <= 1e-6 * direct.max(1e-12));
            prop_assert!(e.dc >= 0.0 && e.low >= 0.0 && e.high >= 0.0);
        }
    }
}
