//! Toy subject-placement task: an analytic glyph renderer, a seeded dataset
//! generator and two independently computed rewards (shape fidelity and
//! placement accuracy).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};

/// Sampling ranges and reward constants for the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    pub sigma_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub ring_range: (f64, f64),
    pub crop: usize,
    pub rho: f64,
    /// Image intensity `[0, 1]` maps to latent values `[0, latent_scale]`.
    pub latent_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            sigma_range: (1.0, 2.0),
            amplitude_range: (0.6, 1.0),
            ring_range: (0.0, 0.5),
            crop: 9,
            rho: 2.0,
            latent_scale: 2.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let (s_lo, s_hi) = self.sigma_range;
        let (a_lo, a_hi) = self.amplitude_range;
        let (m_lo, m_hi) = self.ring_range;
        let quarter = self.width.min(self.height) as f64 / 4.0;
        let checks = [
            (self.height >= 4 && self.width >= 4, "image must be at least 4x4"),
            (0.5 <= s_lo && s_lo <= s_hi && s_hi <= quarter, "sigma range must lie in [0.5, W/4]"),
            (0.0 < a_lo && a_lo <= a_hi && a_hi <= 1.0, "amplitude range must lie in (0, 1]"),
            (0.0 <= m_lo && m_lo <= m_hi && m_hi <= 1.0, "ring range must lie in [0, 1]"),
            (self.crop % 2 == 1 && self.crop <= self.width.min(self.height), "crop must be odd and fit the image"),
            (self.rho > 0.0, "rho must be positive"),
            (self.latent_scale > 0.0, "latent_scale must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("env: {msg}")));
            }
        }
        let (lo, hi) = self.position_range();
        if lo.0 > hi.0 || lo.1 > hi.1 {
            return Err(Error::Config("env: no admissible target positions".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Admissible target box `((x_lo, y_lo), (x_hi, y_hi))`: at least `2σ_max` from every border.
    pub fn position_range(&self) -> ((f64, f64), (f64, f64)) {
        let m = 2.0 * self.sigma_range.1;
        ((m, m), (self.width as f64 - 1.0 - m, self.height as f64 - 1.0 - m))
    }

    pub fn canonical_position(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn cond_dim(&self) -> usize {
        2 + 6 + self.crop * self.crop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub amplitude: f64,
    pub theta: f64,
    pub ring: f64,
}

impl SubjectSpec {
    pub fn isotropic(sigma: f64) -> Self {
        Self {
            sigma_x: sigma,
            sigma_y: sigma,
            amplitude: 1.0,
            theta: 0.0,
            ring: 0.0,
        }
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma_x.max(self.sigma_y)
    }

    pub fn validate(&self, cfg: &EnvConfig) -> Result<()> {
        let quarter = cfg.width.min(cfg.height) as f64 / 4.0;
        let ok = (0.5..=quarter).contains(&self.sigma_x)
            && (0.5..=quarter).contains(&self.sigma_y)
            && self.amplitude > 0.0
            && self.amplitude <= 1.0
            && (0.0..=1.0).contains(&self.ring)
            && self.theta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("subject spec out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub target: (f64, f64),
    pub subject: SubjectSpec,
}

impl Condition {
    /// Normalized target, normalized subject parameters, then the reference
    /// crop rendered at the canonical position.
    pub fn encode(&self, cfg: &EnvConfig) -> Result<Vec<f64>> {
        let ((x_lo, y_lo), (x_hi, y_hi)) = cfg.position_range();
        let unit = |v: f64, lo: f64, hi: f64| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        let s = &self.subject;
        let mut out = vec![
            unit(self.target.0, x_lo, x_hi),
            unit(self.target.1, y_lo, y_hi),
            unit(s.sigma_x, cfg.sigma_range.0, cfg.sigma_range.1),
            unit(s.sigma_y, cfg.sigma_range.0, cfg.sigma_range.1),
            unit(s.amplitude, cfg.amplitude_range.0, cfg.amplitude_range.1),
            (2.0 * s.theta).cos(),
            (2.0 * s.theta).sin(),
            unit(s.ring, cfg.ring_range.0, cfg.ring_range.1),
        ];
        let reference = render_subject(s, cfg.canonical_position(), cfg.height, cfg.width)?;
        let (cx, cy) = cfg.canonical_position();
        out.extend(crop_patch(&reference, cx.round() as i64, cy.round() as i64, cfg.crop));
        Ok(out)
    }
}

/// Analytic raster of the glyph centred at `pos = (x, y)` in pixel coordinates.
pub fn render_subject(spec: &SubjectSpec, pos: (f64, f64), height: usize, width: usize) -> Result<Tensor> {
    let (x0, y0) = pos;
    let r = spec.max_sigma();
    if !(x0 >= r && y0 >= r && x0 <= width as f64 - 1.0 - r && y0 <= height as f64 - 1.0 - r) {
        return Err(Error::invalid(format!(
            "position ({x0}, {y0}) too close to the border for sigma {r} in a {height}x{width} image"
        )));
    }
    let (sin, cos) = spec.theta.sin_cos();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            data.push(glyph_value(spec, sin, cos, x as f64 - x0, y as f64 - y0));
        }
    }
    Tensor::new(vec![height, width], data)
}

pub fn sample_condition<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Condition {
    let ((x_lo, y_lo), (x_hi, y_hi)) = cfg.position_range();
    let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let target = (uniform((x_lo, x_hi)), uniform((y_lo, y_hi)));
    let subject = SubjectSpec {
        sigma_x: uniform(cfg.sigma_range),
        sigma_y: uniform(cfg.sigma_range),
        amplitude: uniform(cfg.amplitude_range),
        theta: uniform((0.0, PI)),
        ring: uniform(cfg.ring_range),
    };
    Condition { target, subject }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub condition: Condition,
    pub encoding: Vec<f64>,
    pub image: Tensor,
}

impl Example {
    pub fn new(condition: Condition, cfg: &EnvConfig) -> Result<Self> {
        Ok(Self {
            encoding: condition.encode(cfg)?,
            image: render_subject(&condition.subject, condition.target, cfg.height, cfg.width)?,
            condition,
        })
    }

    pub fn latent(&self, cfg: &EnvConfig) -> Vec<f64> {
        image_to_latent(&self.image, cfg)
    }
}

pub fn make_dataset<R: Rng + ?Sized>(n: usize, cfg: &EnvConfig, rng: &mut R) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    cfg.validate()?;
    (0..n).map(|_| Example::new(sample_condition(cfg, rng), cfg)).collect()
}

pub fn image_to_latent(image: &Tensor, cfg: &EnvConfig) -> Vec<f64> {
    image.data().iter().map(|v| v * cfg.latent_scale).collect()
}

/// Decode a latent into an image clamped to `[0, 1]`.
pub fn latent_to_image(latent: &[f64], cfg: &EnvConfig) -> Result<Tensor> {
    let data = latent.iter().map(|v| (v / cfg.latent_scale).clamp(0.0, 1.0)).collect();
    Tensor::new(vec![cfg.height, cfg.width], data)
}

/// Intensity-weighted centroid `(x, y)` of the soft half-max mask
/// `max(I - max(I)/2, 0)`.
pub fn detect_centroid(image: &Tensor) -> Result<(f64, f64)> {
    let [h, w] = image.shape() else {
        return Err(Error::invalid(format!("expected a 2-D image, got shape {:?}", image.shape())));
    };
    let (h, w) = (*h, *w);
    if let Some(i) = image.first_non_finite() {
        return Err(Error::NonFinite {
            context: "image".into(),
            index: i,
        });
    }
    let peak = image.max();
    if peak <= 0.0 {
        return Err(Error::Detection("image has no positive intensity".into()));
    }
    let half = peak / 2.0;
    let mut acc = (0.0, 0.0, 0.0);
    for (k, &v) in image.data().iter().enumerate() {
        let wgt = (v - half).max(0.0);
        acc.0 += wgt;
        acc.1 += wgt * (k % w) as f64;
        acc.2 += wgt * (k / w) as f64;
    }
    if acc.0 <= 0.0 {
        // Flat image: every pixel is at the maximum.
        return Ok(((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0));
    }
    Ok((acc.1 / acc.0, acc.2 / acc.0))
}

/// `size x size` window centred on pixel `(cx, cy)`, zero outside the image.
fn crop_patch(image: &Tensor, cx: i64, cy: i64, size: usize) -> Vec<f64> {
    let (h, w) = (image.shape()[0] as i64, image.shape()[1] as i64);
    let half = (size / 2) as i64;
    let mut out = Vec::with_capacity(size * size);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            out.push(if (0..h).contains(&y) && (0..w).contains(&x) {
                image.data()[(y * w + x) as usize]
            } else {
                0.0
            });
        }
    }
    out
}

fn soft_mask(patch: &mut [f64]) {
    let half = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max) / 2.0;
    for v in patch.iter_mut() {
        *v = (*v - half).max(0.0);
    }
}

/// Zero-mean normalized cross-correlation; 0 when either side is constant.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa <= 0.0 || bb <= 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_id: f64,
    pub r_prompt: f64,
    /// `None` when detection failed; both rewards are then 0.
    pub centroid: Option<(f64, f64)>,
}

/// Shape fidelity against a freshly rendered reference. The reference patch
/// is re-rendered over a coarse-to-fine grid of sub-pixel offsets around the
/// sample's detected offset and the best correlation is kept.
pub fn reward_id(image: &Tensor, condition: &Condition, cfg: &EnvConfig) -> Result<f64> {
    match detect_centroid(image) {
        Ok(c) => reward_id_at(image, c, condition, cfg),
        Err(Error::Detection(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

const ALIGN_PASSES: [(f64, i32); 3] = [(0.25, 4), (0.0625, 2), (0.015625, 2)];

fn reward_id_at(image: &Tensor, c: (f64, f64), condition: &Condition, cfg: &EnvConfig) -> Result<f64> {
    let (bx, by) = (c.0.round(), c.1.round());
    let mut a = crop_patch(image, bx as i64, by as i64, cfg.crop);
    soft_mask(&mut a);
    let mut best = (f64::NEG_INFINITY, (c.0 - bx, c.1 - by));
    let mut patch = vec![0.0; cfg.crop * cfg.crop];
    for (step, radius) in ALIGN_PASSES {
        let centre = best.1;
        for i in -radius..=radius {
            for j in -radius..=radius {
                let off = (centre.0 + i as f64 * step, centre.1 + j as f64 * step);
                render_patch(&condition.subject, off, cfg.crop, &mut patch);
                soft_mask(&mut patch);
                let r = ncc(&a, &patch);
                if r > best.0 {
                    best = (r, off);
                }
            }
        }
    }
    Ok(best.0.max(0.0))
}

/// Glyph centred at `offset` relative to the middle pixel of a `size x size` patch.
fn render_patch(spec: &SubjectSpec, offset: (f64, f64), size: usize, out: &mut [f64]) {
    let half = (size / 2) as f64;
    let (sin, cos) = spec.theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - half - offset.0;
            let dy = y as f64 - half - offset.1;
            out[y * size + x] = glyph_value(spec, sin, cos, dx, dy);
        }
    }
}

fn glyph_value(spec: &SubjectSpec, sin: f64, cos: f64, dx: f64, dy: f64) -> f64 {
    let u = (cos * dx + sin * dy) / spec.sigma_x;
    let v = (-sin * dx + cos * dy) / spec.sigma_y;
    let q = u * u + v * v;
    let ring = (PI * q.sqrt() / 2.0).sin();
    spec.amplitude * (-q / 2.0).exp() * (1.0 - spec.ring * ring * ring)
}

pub fn reward_prompt(image: &Tensor, condition: &Condition, cfg: &EnvConfig) -> Result<f64> {
    match detect_centroid(image) {
        Ok(c) => Ok(prompt_score(c, condition, cfg)),
        Err(Error::Detection(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn prompt_score(c: (f64, f64), condition: &Condition, cfg: &EnvConfig) -> f64 {
    let d2 = (c.0 - condition.target.0).powi(2) + (c.1 - condition.target.1).powi(2);
    (-d2 / (2.0 * cfg.rho * cfg.rho)).exp()
}

/// Both rewards from a single detection.
pub fn score(image: &Tensor, condition: &Condition, cfg: &EnvConfig) -> Result<RewardBreakdown> {
    match detect_centroid(image) {
        Ok(c) => Ok(RewardBreakdown {
            r_id: reward_id_at(image, c, condition, cfg)?,
            r_prompt: prompt_score(c, condition, cfg),
            centroid: Some(c),
        }),
        Err(Error::Detection(_)) => Ok(RewardBreakdown {
            r_id: 0.0,
            r_prompt: 0.0,
            centroid: None,
        }),
        Err(e) => Err(e),
    }
}

pub fn score_latent(latent: &[f64], condition: &Condition, cfg: &EnvConfig) -> Result<RewardBreakdown> {
    score(&latent_to_image(latent, cfg)?, condition, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    count: usize,
    seed: Option<u64>,
    height: usize,
    width: usize,
    cond_dim: usize,
    env: EnvConfig,
}

const DATASET_MAGIC: &[u8; 8] = b"MOGRPOD1";
const PARAMS_PER_CONDITION: usize = 7;

fn put_f32s<W: Write>(out: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn get_f32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Magic, `u64` LE header length, JSON header, then per example the raw
/// condition parameters, the encoded condition vector and the image, all `f32` LE.
pub fn write_dataset<W: Write>(examples: &[Example], cfg: &EnvConfig, seed: Option<u64>, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        format: "f32le".into(),
        count: examples.len(),
        seed,
        height: cfg.height,
        width: cfg.width,
        cond_dim: cfg.cond_dim(),
        env: cfg.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for ex in examples {
        let c = &ex.condition;
        let s = &c.subject;
        put_f32s(
            &mut out,
            [c.target.0, c.target.1, s.sigma_x, s.sigma_y, s.amplitude, s.theta, s.ring],
        )?;
        put_f32s(&mut out, ex.encoding.iter().copied())?;
        put_f32s(&mut out, ex.image.data().iter().copied())?;
    }
    Ok(())
}

/// Inverse of [`write_dataset`]; values come back at `f32` precision.
pub fn read_dataset<R: Read>(mut input: R) -> Result<(EnvConfig, Vec<Example>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::invalid("not a dataset file (bad magic)"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    let cfg = header.env;
    if header.cond_dim != cfg.cond_dim() || header.height != cfg.height || header.width != cfg.width {
        return Err(Error::invalid("dataset header inconsistent with its env config"));
    }
    let mut examples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let p = get_f32s(&mut input, PARAMS_PER_CONDITION)?;
        let condition = Condition {
            target: (p[0], p[1]),
            subject: SubjectSpec {
                sigma_x: p[2],
                sigma_y: p[3],
                amplitude: p[4],
                theta: p[5],
                ring: p[6],
            },
        };
        let encoding = get_f32s(&mut input, header.cond_dim)?;
        let image = Tensor::new(vec![cfg.height, cfg.width], get_f32s(&mut input, cfg.pixels())?)?;
        examples.push(Example {
            condition,
            encoding,
            image,
        });
    }
    Ok((cfg, examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn cond(target: (f64, f64), subject: SubjectSpec) -> Condition {
        Condition { target, subject }
    }

    fn render(spec: &SubjectSpec, pos: (f64, f64)) -> Tensor {
        render_subject(spec, pos, 16, 16).unwrap()
    }

    #[test]
    fn isotropic_glyph_has_rotational_symmetry() {
        let img = render(&SubjectSpec::isotropic(2.0), (8.0, 8.0));
        // rotation by 90 degrees about pixel (8, 8): (x, y) -> (16 - y, x)
        for y in 1..16usize {
            for x in 1..16usize {
                let (rx, ry) = (16 - y, x);
                assert!((img.get2(y, x) - img.get2(ry, rx)).abs() < 1e-12);
            }
        }
        let argmax = img.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 8 * 16 + 8);
    }

    #[test]
    fn render_is_linear_in_amplitude() {
        let spec = SubjectSpec {
            sigma_x: 1.3,
            sigma_y: 1.8,
            theta: 0.4,
            ..SubjectSpec::isotropic(1.0)
        };
        let full = render(&spec, (7.3, 8.6));
        let half = render(&SubjectSpec { amplitude: 0.5, ..spec }, (7.3, 8.6));
        for (a, b) in full.data().iter().zip(half.data()) {
            assert!((0.5 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rendered_mass_matches_gaussian_integral() {
        for (sx, sy, a) in [(1.0, 1.0, 1.0), (1.5, 2.0, 0.7), (2.0, 2.0, 0.6), (1.2, 1.7, 0.9)] {
            let spec = SubjectSpec {
                sigma_x: sx,
                sigma_y: sy,
                amplitude: a,
                theta: 0.3,
                ring: 0.0,
            };
            let mass = render(&spec, (7.6, 8.2)).sum();
            let expect = 2.0 * PI * a * sx * sy;
            assert!((mass - expect).abs() / expect < 0.03, "{sx} {sy}: {mass} vs {expect}");
        }
    }

    #[test]
    fn render_rejects_out_of_bounds() {
        assert!(render_subject(&SubjectSpec::isotropic(2.0), (1.0, 8.0), 16, 16).is_err());
        assert!(render_subject(&SubjectSpec::isotropic(2.0), (8.0, 14.5), 16, 16).is_err());
    }

    #[test]
    fn centroid_of_centred_glyph() {
        let (x, y) = detect_centroid(&render(&SubjectSpec::isotropic(1.5), (8.0, 8.0))).unwrap();
        assert!((x - 8.0).abs() < 0.25 && (y - 8.0).abs() < 0.25);
    }

    #[test]
    fn centroid_is_translation_equivariant() {
        let spec = SubjectSpec {
            sigma_x: 1.2,
            sigma_y: 1.9,
            theta: 1.0,
            ring: 0.4,
            amplitude: 0.8,
        };
        for (x0, y0) in [(5.0, 6.0), (6.3, 7.7), (8.8, 5.2)] {
            let a = detect_centroid(&render(&spec, (x0, y0))).unwrap();
            let b = detect_centroid(&render(&spec, (x0 + 2.0, y0))).unwrap();
            assert!((b.0 - a.0 - 2.0).abs() < 0.25 && (b.1 - a.1).abs() < 0.25);
        }
    }

    #[test]
    fn centroid_of_uniform_and_empty_images() {
        let (x, y) = detect_centroid(&Tensor::full(&[16, 16], 0.3)).unwrap();
        assert!((x - 7.5).abs() < 1e-12 && (y - 7.5).abs() < 1e-12);
        assert!(matches!(detect_centroid(&Tensor::zeros(&[16, 16])), Err(Error::Detection(_))));
    }

    #[test]
    fn reference_scores_perfect_identity_anywhere() {
        let c = cfg();
        let spec = SubjectSpec {
            sigma_x: 1.0,
            sigma_y: 1.6,
            theta: 0.7,
            ring: 0.5,
            amplitude: 0.9,
        };
        for pos in [(4.0, 4.0), (11.0, 11.0), (6.37, 9.81), (10.5, 4.5), (7.25, 7.75)] {
            let r = reward_id(&render(&spec, pos), &cond((8.0, 8.0), spec), &c).unwrap();
            assert!(r >= 0.99, "{pos:?}: {r}");
        }
    }

    #[test]
    fn doubled_sigma_scores_low_identity() {
        let c = cfg();
        for s in [1.0, 1.5, 2.0] {
            let spec = SubjectSpec::isotropic(s);
            let wide = render_subject(&SubjectSpec::isotropic(2.0 * s), (8.0, 8.0), 16, 16).unwrap();
            let r = reward_id(&wide, &cond((8.0, 8.0), spec), &c).unwrap();
            assert!(r < 0.9, "sigma {s}: {r}");
        }
    }

    #[test]
    fn empty_image_scores_zero() {
        let c = cfg();
        let k = cond((8.0, 8.0), SubjectSpec::isotropic(1.0));
        let s = score(&Tensor::zeros(&[16, 16]), &k, &c).unwrap();
        assert_eq!((s.r_id, s.r_prompt, s.centroid), (0.0, 0.0, None));
        assert_eq!(reward_id(&Tensor::zeros(&[16, 16]), &k, &c).unwrap(), 0.0);
        assert_eq!(reward_prompt(&Tensor::zeros(&[16, 16]), &k, &c).unwrap(), 0.0);
    }

    #[test]
    fn prompt_reward_values() {
        let c = cfg();
        let spec = SubjectSpec::isotropic(1.5);
        let on_target = reward_prompt(&render(&spec, (8.0, 8.0)), &cond((8.0, 8.0), spec), &c).unwrap();
        assert!((on_target - 1.0).abs() < 1e-6);
        let centroid = detect_centroid(&render(&spec, (8.0, 8.0))).unwrap();
        let at_rho = prompt_score(centroid, &cond((centroid.0 + 2.0, centroid.1), spec), &c);
        assert!((at_rho - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn wrong_corner_is_a_conflict_fixture() {
        let c = cfg();
        let spec = SubjectSpec::isotropic(1.5);
        let img = render(&spec, (4.0, 4.0));
        let s = score(&img, &cond((11.0, 11.0), spec), &c).unwrap();
        assert!(s.r_prompt < 0.01 && s.r_id >= 0.99, "{s:?}");
    }

    #[test]
    fn prompt_reward_ignores_shape() {
        let c = cfg();
        let target = (6.5, 9.0);
        let base = SubjectSpec::isotropic(1.2);
        let r0 = reward_prompt(&render(&base, (7.0, 8.0)), &cond(target, base), &c).unwrap();
        for other in [
            SubjectSpec::isotropic(2.0),
            SubjectSpec { ring: 0.9, ..base },
            SubjectSpec { sigma_y: 1.9, theta: 0.5, ..base },
        ] {
            let r = reward_prompt(&render(&other, (7.0, 8.0)), &cond(target, other), &c).unwrap();
            assert!((r - r0).abs() < 0.02);
        }
    }

    #[test]
    fn dataset_is_seeded_and_valid() {
        let c = cfg();
        let a = make_dataset(1, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_dataset(1, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let ds = make_dataset(200, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for ex in &ds {
            assert_eq!(ex.image.shape(), &[16, 16]);
            assert!(ex.image.is_finite());
            assert!(ex.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(ex.encoding.len(), c.cond_dim());
        }
        assert!(make_dataset(0, &c, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn target_positions_pass_uniformity_test() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let bins = 7;
        let ((x_lo, y_lo), (x_hi, y_hi)) = c.position_range();
        let mut counts = vec![0usize; bins * bins];
        for _ in 0..n {
            let k = sample_condition(&c, &mut rng);
            let bx = (((k.target.0 - x_lo) / (x_hi - x_lo)) * bins as f64) as usize;
            let by = (((k.target.1 - y_lo) / (y_hi - y_lo)) * bins as f64) as usize;
            counts[by.min(bins - 1) * bins + bx.min(bins - 1)] += 1;
        }
        let expect = n as f64 / (bins * bins) as f64;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // 48 degrees of freedom, 99.9th percentile
        assert!(chi2 < 84.0, "chi2 = {chi2}");
    }

    #[test]
    fn encoding_distinguishes_conditions() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sample_condition(&c, &mut rng);
        let b = Condition {
            target: (a.target.0 + 0.5, a.target.1),
            ..a
        };
        assert_ne!(a.encode(&c).unwrap(), b.encode(&c).unwrap());
        let d = Condition {
            subject: SubjectSpec {
                theta: a.subject.theta + 0.3,
                ..a.subject
            },
            ..a
        };
        assert_ne!(a.encode(&c).unwrap()[..8], d.encode(&c).unwrap()[..8]);
    }

    #[test]
    fn dataset_round_trip() {
        let c = cfg();
        let ds = make_dataset(5, &c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &c, Some(9), &mut buf).unwrap();
        let (c2, back) = read_dataset(&buf[..]).unwrap();
        assert_eq!(c2, c);
        assert_eq!(back.len(), 5);
        for (a, b) in ds.iter().zip(&back) {
            assert!((a.condition.target.0 - b.condition.target.0).abs() < 1e-5);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(read_dataset(&b"NOTADATA"[..]).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = SubjectSpec> {
        (1.0f64..2.0, 1.0f64..2.0, 0.6f64..1.0, 0.0f64..PI, 0.0f64..0.5).prop_map(|(sx, sy, a, t, m)| SubjectSpec {
            sigma_x: sx,
            sigma_y: sy,
            amplitude: a,
            theta: t,
            ring: m,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn identity_reward_is_translation_invariant(
            spec in arb_spec(),
            p in (4.0f64..11.0, 4.0f64..11.0),
            q in (4.0f64..11.0, 4.0f64..11.0),
        ) {
            let c = cfg();
            let k = cond((8.0, 8.0), spec);
            let a = reward_id(&render(&spec, p), &k, &c).unwrap();
            let b = reward_id(&render(&spec, q), &k, &c).unwrap();
            prop_assert!((a - b).abs() <= 0.02, "{} vs {}", a, b);
            prop_assert!(a >= 0.99);
        }

        #[test]
        fn rewards_are_bounded(spec in arb_spec(), other in arb_spec(), p in (4.0f64..11.0, 4.0f64..11.0)) {
            let c = cfg();
            let s = score(&render(&other, p), &cond((7.0, 9.0), spec), &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.r_id));
            prop_assert!((0.0..=1.0).contains(&s.r_prompt));
        }

        #[test]
        fn oracle_sample_is_pareto_ideal(spec in arb_spec(), p in (4.0f64..11.0, 4.0f64..11.0)) {
            let c = cfg();
            let s = score(&render(&spec, p), &cond(p, spec), &c).unwrap();
            prop_assert!(s.r_id >= 0.99 && s.r_prompt >= 0.99, "{:?}", s);
        }
    }
}
