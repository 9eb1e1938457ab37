//! Advantage mathematics for two reward channels: intra-group normalization,
//! linear aggregation, synergy-aware shaping and conflict diagnostics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_id: f64,
    pub r_prompt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantagePair {
    pub a_id: f64,
    pub a_prompt: f64,
}

impl AdvantagePair {
    pub fn new(a_id: f64, a_prompt: f64) -> Self {
        Self { a_id, a_prompt }
    }
}

/// Non-linear coupling between the two advantage channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynergyFn {
    TanhProduct,
    MinFn,
    MaxFn,
    HarmonicMean,
    None,
}

impl SynergyFn {
    pub const ALL: [SynergyFn; 5] = [
        SynergyFn::TanhProduct,
        SynergyFn::MinFn,
        SynergyFn::MaxFn,
        SynergyFn::HarmonicMean,
        SynergyFn::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynergyFn::TanhProduct => "tanh_product",
            SynergyFn::MinFn => "min_fn",
            SynergyFn::MaxFn => "max_fn",
            SynergyFn::HarmonicMean => "harmonic_mean",
            SynergyFn::None => "none",
        }
    }
}

impl fmt::Display for SynergyFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynergyFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SynergyFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synergy function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub w_id: f64,
    pub w_prompt: f64,
    pub alpha: f64,
    pub synergy: SynergyFn,
    pub eps_std: f64,
    pub advantage_clip: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            w_id: 1.0,
            w_prompt: 1.0,
            alpha: 0.5,
            synergy: SynergyFn::TanhProduct,
            eps_std: 1e-8,
            advantage_clip: 5.0,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_id >= 0.0
            && self.w_prompt >= 0.0
            && self.alpha >= 0.0
            && self.eps_std > 0.0
            && self.advantage_clip > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid shaping config {self:?}")));
        }
        Ok(())
    }

    pub fn with_weights(self, w_id: f64, w_prompt: f64) -> Self {
        Self { w_id, w_prompt, ..self }
    }
}

/// `(r_i - mean) / (std + eps_std)` with the population standard deviation.
pub fn normalize_group(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "group normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_std;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-channel normalization of a group's reward vectors.
pub fn group_advantages(rewards: &[RewardVector], eps_std: f64) -> Result<Vec<AdvantagePair>> {
    let ids: Vec<f64> = rewards.iter().map(|r| r.r_id).collect();
    let prompts: Vec<f64> = rewards.iter().map(|r| r.r_prompt).collect();
    let a_id = normalize_group(&ids, eps_std)?;
    let a_prompt = normalize_group(&prompts, eps_std)?;
    Ok(a_id.into_iter().zip(a_prompt).map(|(a, b)| AdvantagePair::new(a, b)).collect())
}

pub fn naive_aggregate(pair: AdvantagePair, w_id: f64, w_prompt: f64) -> f64 {
    w_id * pair.a_id + w_prompt * pair.a_prompt
}

pub fn synergy_term(pair: AdvantagePair, f: SynergyFn) -> f64 {
    let (a, b) = (pair.a_id, pair.a_prompt);
    match f {
        SynergyFn::TanhProduct => (a * b).tanh(),
        SynergyFn::MinFn => a.min(b),
        SynergyFn::MaxFn => a.max(b),
        SynergyFn::HarmonicMean => {
            if (a + b).abs() < 1e-9 {
                0.0
            } else {
                2.0 * a * b / (a + b)
            }
        }
        SynergyFn::None => 0.0,
    }
}

/// Whether the pair falls in the `+α·S` branch: either channel strictly positive.
pub fn is_favourable(pair: AdvantagePair) -> bool {
    pair.a_id > 0.0 || pair.a_prompt > 0.0
}

/// Linear part `± α·S`, sign chosen by polarity, clamped to `±advantage_clip`.
pub fn sars_aggregate(pair: AdvantagePair, config: &ShapingConfig) -> f64 {
    let linear = naive_aggregate(pair, config.w_id, config.w_prompt);
    let s = synergy_term(pair, config.synergy);
    let shaped = if is_favourable(pair) {
        linear + config.alpha * s
    } else {
        linear - config.alpha * s
    };
    shaped.clamp(-config.advantage_clip, config.advantage_clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictClass {
    BothPositive,
    Conflict,
    BothNonpositive,
}

impl ConflictClass {
    pub fn of(pair: AdvantagePair) -> Self {
        let (a, b) = (pair.a_id, pair.a_prompt);
        if (a > 0.0 && b < 0.0) || (a < 0.0 && b > 0.0) {
            ConflictClass::Conflict
        } else if a > 0.0 || b > 0.0 {
            // one strictly positive, the other positive or exactly zero
            ConflictClass::BothPositive
        } else {
            ConflictClass::BothNonpositive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ConflictStats {
    pub total: usize,
    pub both_positive: usize,
    pub conflict: usize,
    pub both_nonpositive: usize,
}

impl ConflictStats {
    pub fn fraction(&self, class: ConflictClass) -> f64 {
        let n = match class {
            ConflictClass::BothPositive => self.both_positive,
            ConflictClass::Conflict => self.conflict,
            ConflictClass::BothNonpositive => self.both_nonpositive,
        };
        n as f64 / self.total as f64
    }

    pub fn conflict_fraction(&self) -> f64 {
        self.fraction(ConflictClass::Conflict)
    }

    pub fn merge(&mut self, other: &ConflictStats) {
        self.total += other.total;
        self.both_positive += other.both_positive;
        self.conflict += other.conflict;
        self.both_nonpositive += other.both_nonpositive;
    }

    /// CSV with header `class,fraction`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "class,fraction")?;
        for (name, class) in [
            ("both_positive", ConflictClass::BothPositive),
            ("conflict", ConflictClass::Conflict),
            ("both_nonpositive", ConflictClass::BothNonpositive),
        ] {
            writeln!(out, "{name},{}", self.fraction(class))?;
        }
        Ok(())
    }
}

/// Classify pairs by sign pattern. A pair is a conflict when its channels
/// have strictly opposite signs.
pub fn conflict_stats(pairs: &[AdvantagePair]) -> Result<ConflictStats> {
    if pairs.is_empty() {
        return Err(Error::invalid("conflict statistics of an empty collection"));
    }
    let mut s = ConflictStats {
        total: pairs.len(),
        ..Default::default()
    };
    for &p in pairs {
        match ConflictClass::of(p) {
            ConflictClass::BothPositive => s.both_positive += 1,
            ConflictClass::Conflict => s.conflict += 1,
            ConflictClass::BothNonpositive => s.both_nonpositive += 1,
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossSectionPoint {
    pub a_id: f64,
    pub naive: f64,
    pub sars: f64,
}

/// Final advantage along `a_id` with `a_prompt` held fixed.
pub fn sars_cross_section(a_prompt: f64, a_id_grid: &[f64], config: &ShapingConfig) -> Result<Vec<CrossSectionPoint>> {
    if a_id_grid.is_empty() {
        return Err(Error::invalid("empty cross-section grid"));
    }
    Ok(a_id_grid
        .iter()
        .map(|&a_id| {
            let pair = AdvantagePair::new(a_id, a_prompt);
            CrossSectionPoint {
                a_id,
                naive: naive_aggregate(pair, config.w_id, config.w_prompt),
                sars: sars_aggregate(pair, config),
            }
        })
        .collect())
}

/// `n` evenly spaced points over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// CSV with header `a_id,a_final_naive,a_final_sars`.
pub fn write_cross_section_csv<W: Write>(points: &[CrossSectionPoint], mut out: W) -> Result<()> {
    writeln!(out, "a_id,a_final_naive,a_final_sars")?;
    for p in points {
        writeln!(out, "{},{},{}", p.a_id, p.naive, p.sars)?;
    }
    Ok(())
}
