//! Three-phase weight curriculum over sampler steps: prompt emphasis early,
//! identity emphasis late, joined by a sigmoid bridge.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdwConfig {
    pub w_max: f64,
    pub w_min: f64,
    pub total_steps: usize,
    pub prompt_phase_end: usize,
    pub id_phase_start: usize,
    pub steepness: f64,
    /// Defaults to the midpoint of the transition phase when absent.
    pub midpoint: Option<f64>,
    pub inverted: bool,
}

impl Default for TdwConfig {
    fn default() -> Self {
        Self {
            w_max: 0.7,
            w_min: 0.3,
            total_steps: 25,
            prompt_phase_end: 6,
            id_phase_start: 22,
            steepness: 0.6,
            midpoint: None,
            inverted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub w_id: f64,
    pub w_prompt: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TdwConfig {
    pub fn midpoint_value(&self) -> f64 {
        self.midpoint
            .unwrap_or((self.prompt_phase_end + self.id_phase_start) as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.w_min && self.w_min < self.w_max && self.w_max < 1.0) {
            return bad(format!("need 0 < w_min < w_max < 1, got w_min={} w_max={}", self.w_min, self.w_max));
        }
        if !(self.prompt_phase_end <= self.id_phase_start && self.id_phase_start <= self.total_steps) {
            return bad(format!(
                "need prompt_phase_end <= id_phase_start <= T, got {} / {} / {}",
                self.prompt_phase_end, self.id_phase_start, self.total_steps
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return bad(format!("steepness must be positive and finite, got {}", self.steepness));
        }
        if !self.midpoint_value().is_finite() {
            return bad("midpoint must be finite".into());
        }
        Ok(())
    }

    fn prompt_weight(&self, step: usize) -> f64 {
        if step < self.prompt_phase_end {
            self.w_max
        } else if step >= self.id_phase_start {
            self.w_min
        } else {
            let s = sigmoid(self.steepness * (step as f64 - self.midpoint_value()));
            (self.w_min + (self.w_max - self.w_min) * (1.0 - s)).clamp(self.w_min, self.w_max)
        }
    }
}

/// Weights for sampler step `step` (0 is the first, noisiest step).
pub fn weights_at(step: usize, config: &TdwConfig) -> Result<WeightPair> {
    if step >= config.total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of length {}",
            config.total_steps
        )));
    }
    let w = config.prompt_weight(step);
    let pair = WeightPair {
        w_id: 1.0 - w,
        w_prompt: w,
    };
    Ok(if config.inverted {
        WeightPair {
            w_id: pair.w_prompt,
            w_prompt: pair.w_id,
        }
    } else {
        pair
    })
}

/// Precomputed schedule of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdwTable {
    pub config: TdwConfig,
    pub weights: Vec<WeightPair>,
}

impl TdwTable {
    pub fn new(config: TdwConfig) -> Result<Self> {
        config.validate()?;
        let weights = (0..config.total_steps)
            .map(|i| weights_at(i, &config))
            .collect::<Result<_>>()?;
        Ok(Self { config, weights })
    }

    pub fn get(&self, step: usize) -> Result<WeightPair> {
        self.weights.get(step).copied().ok_or_else(|| {
            Error::invalid(format!("step {step} outside schedule of length {}", self.weights.len()))
        })
    }

    /// CSV with header `step,w_prompt,w_id`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,w_prompt,w_id")?;
        for (i, w) in self.weights.iter().enumerate() {
            writeln!(out, "{i},{},{}", w.w_prompt, w.w_id)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDiagnostics {
    pub max_adjacent_jump: f64,
    /// `|w_prompt(prompt_phase_end) - w_max|`
    pub entry_gap: f64,
    /// `|w_prompt(id_phase_start - 1) - w_min|`
    pub exit_gap: f64,
    /// Steps `i` where `w_prompt` moves against the curriculum direction between `i` and `i + 1`.
    pub monotonicity_violations: Vec<usize>,
}

impl ScheduleDiagnostics {
    pub fn max_boundary_gap(&self) -> f64 {
        self.entry_gap.max(self.exit_gap)
    }
}

/// Continuity and monotonicity report; gaps are measured on the
/// non-inverted prompt weight.
pub fn validate_schedule(config: &TdwConfig) -> Result<ScheduleDiagnostics> {
    let table = TdwTable::new(*config)?;
    let w: Vec<f64> = table.weights.iter().map(|p| p.w_prompt).collect();
    let max_adjacent_jump = w.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0, f64::max);
    let base = |i: usize| config.prompt_weight(i.min(config.total_steps - 1));
    let entry_gap = if config.prompt_phase_end < config.id_phase_start {
        (base(config.prompt_phase_end) - config.w_max).abs()
    } else {
        0.0
    };
    let exit_gap = if config.id_phase_start > config.prompt_phase_end {
        (base(config.id_phase_start - 1) - config.w_min).abs()
    } else {
        0.0
    };
    let monotonicity_violations = w
        .windows(2)
        .enumerate()
        .filter(|(_, p)| if config.inverted { p[1] < p[0] } else { p[1] > p[0] })
        .map(|(i, _)| i)
        .collect();
    Ok(ScheduleDiagnostics {
        max_adjacent_jump,
        entry_gap,
        exit_gap,
        monotonicity_violations,
    })
}
