//! Synthetic multi-expert datasets with controlled inter-expert disagreement.
//!
//! Every case has one base shape. The image is a blurred, noisy rendering of
//! it among a few smaller unannotated blobs, and each expert's mask is the base shape offset along its signed
//! distance field by a systematic bias plus a smooth angular wobble.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::data::{AnnotatedCase, BinaryMask, ExpertId, ImageGrid, MultiExpertDataset, Spacing, MIN_SIDE};
use crate::error::{Error, Result};
use crate::metrics::squared_distance_field;
use crate::rng::keyed_rng;

const MAX_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertStyle {
    pub expert_id: ExpertId,
    /// Pixels of dilation (positive) or erosion (negative).
    pub bias_radius: i32,
    pub wobble_amplitude: f64,
    pub wobble_frequency: u32,
    pub style_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForegroundKind {
    Ellipse,
    #[default]
    Blob,
}

fn default_noise() -> f64 {
    0.06
}

fn default_blur() -> f64 {
    1.0
}

fn default_contrast() -> f64 {
    0.35
}

fn default_distractors() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub height: usize,
    pub width: usize,
    pub styles: Vec<ExpertStyle>,
    pub base_seed: u64,
    #[serde(default)]
    pub foreground: ForegroundKind,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_blur")]
    pub blur_sigma: f64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Upper bound on unannotated bright blobs per image.
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

impl SynthConfig {
    pub fn new(n_cases: usize, height: usize, width: usize, styles: Vec<ExpertStyle>, base_seed: u64) -> Self {
        SynthConfig {
            n_cases,
            height,
            width,
            styles,
            base_seed,
            foreground: ForegroundKind::default(),
            noise_sigma: default_noise(),
            blur_sigma: default_blur(),
            contrast: default_contrast(),
            distractors: default_distractors(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Config("n_cases must be at least 1".into()));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Config(format!(
                "image size {}x{} below the minimum side {MIN_SIDE}",
                self.height, self.width
            )));
        }
        if self.styles.is_empty() {
            return Err(Error::Config("at least one expert style is required".into()));
        }
        let ids: BTreeSet<ExpertId> = self.styles.iter().map(|s| s.expert_id).collect();
        if ids.len() != self.styles.len() {
            return Err(Error::Config("expert styles must have distinct ids".into()));
        }
        let limit = self.height.min(self.width) as f64 / 8.0;
        for s in &self.styles {
            if s.expert_id.0 == 0 {
                return Err(Error::Config("expert ids start at 1".into()));
            }
            if s.bias_radius.unsigned_abs() as f64 > limit {
                return Err(Error::Config(format!(
                    "{}: |bias_radius| {} exceeds {limit}",
                    s.expert_id, s.bias_radius
                )));
            }
            if !(0.0..=limit).contains(&s.wobble_amplitude) {
                return Err(Error::Config(format!(
                    "{}: wobble amplitude {} outside [0, {limit}]",
                    s.expert_id, s.wobble_amplitude
                )));
            }
            if s.wobble_frequency == 0 {
                return Err(Error::Config(format!("{}: wobble frequency must be positive", s.expert_id)));
            }
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("contrast", self.contrast),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Seven styles: five small distinct biases, a sixth inside their envelope
/// and a strongly eroded, wobbly seventh.
pub fn default_reference_styles() -> Vec<ExpertStyle> {
    let table: [(i32, f64, u32); 7] = [
        (-2, 0.75, 2),
        (-1, 0.75, 3),
        (1, 0.75, 2),
        (2, 0.75, 3),
        (3, 0.75, 4),
        (0, 1.0, 3),
        (-5, 2.5, 2),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(bias, amp, freq))| ExpertStyle {
            expert_id: ExpertId(i as u32 + 1),
            bias_radius: bias,
            wobble_amplitude: amp,
            wobble_frequency: freq,
            style_seed: 101 + i as u64,
        })
        .collect()
}

struct BaseShape {
    center: (f64, f64),
    mask: Vec<bool>,
}

fn draw_base(cfg: &SynthConfig, case_index: usize, attempt: u64) -> BaseShape {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let mut rng = keyed_rng(&[cfg.base_seed, case_index as u64, attempt]);
    let shrink = 0.9f64.powi(attempt as i32);
    let radius = side * rng.random_range(0.17..0.25) * shrink;
    let cy = h as f64 / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * h as f64;
    let cx = w as f64 / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * w as f64;
    let kind = cfg.foreground;
    let (a2, p2) = (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI));
    let (a3, p3) = (rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI));
    let (ecc, tilt) = (rng.random_range(0.0..0.25), rng.random_range(0.0..PI));
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let inside = match kind {
                ForegroundKind::Blob => {
                    let theta = dy.atan2(dx);
                    let rim = radius * (1.0 + a2 * (2.0 * (theta - p2)).cos() + a3 * (3.0 * (theta - p3)).cos());
                    dy.hypot(dx) <= rim
                }
                ForegroundKind::Ellipse => {
                    let (s, co) = tilt.sin_cos();
                    let u = dx * co + dy * s;
                    let v = -dx * s + dy * co;
                    let (ra, rb) = (radius * (1.0 + ecc), radius * (1.0 - ecc));
                    (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
                }
            };
            mask[r * w + c] = inside;
        }
    }
    BaseShape { center: (cy, cx), mask }
}

/// Signed distance to the base boundary: minus the distance to the nearest
/// background pixel inside, plus the distance to the nearest foreground pixel outside.
fn signed_distance(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_bg = squared_distance_field(&background, h, w, Spacing::default());
    let to_fg = squared_distance_field(mask, h, w, Spacing::default());
    mask.iter()
        .enumerate()
        .map(|(i, &m)| if m { -to_bg[i].sqrt() } else { to_fg[i].sqrt() })
        .collect()
}

fn expert_mask(style: &ExpertStyle, base: &BaseShape, sd: &[f64], h: usize, w: usize, case_index: usize) -> Result<BinaryMask> {
    let mut rng = keyed_rng(&[style.style_seed, case_index as u64]);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = base.center;
    BinaryMask::from_fn(h, w, |r, c| {
        let theta = (r as f64 - cy).atan2(c as f64 - cx);
        let t = style.bias_radius as f64
            + style.wobble_amplitude * (style.wobble_frequency as f64 * theta + phase).sin();
        let d = sd[r * w + c];
        if t <= 0.0 {
            d < t
        } else {
            d <= t
        }
    })
}

/// Bright discs clear of the base shape: (row, col, radius, intensity factor).
fn place_distractors(cfg: &SynthConfig, sd: &[f64], case_index: usize) -> Vec<(f64, f64, f64, f64)> {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let mut rng = keyed_rng(&[cfg.base_seed, case_index as u64, u64::MAX - 1]);
    let wanted = rng.random_range(0..=cfg.distractors);
    let mut out = Vec::with_capacity(wanted);
    for _ in 0..wanted * 20 {
        if out.len() == wanted {
            break;
        }
        let radius = side * rng.random_range(0.05..0.1);
        let margin = radius + 1.0;
        if 2.0 * margin >= side {
            break;
        }
        let r = rng.random_range(margin..h as f64 - margin);
        let c = rng.random_range(margin..w as f64 - margin);
        let clear_of_base = sd[r as usize * w + c as usize] > radius + 7.0;
        let clear_of_others = out.iter().all(|&(q, k, rad, _): &(f64, f64, f64, f64)| (r - q).hypot(c - k) > radius + rad + 2.0);
        if clear_of_base && clear_of_others {
            out.push((r, c, radius, rng.random_range(0.85..1.15)));
        }
    }
    out
}

fn render(cfg: &SynthConfig, base: &BaseShape, sd: &[f64], case_index: usize) -> Result<ImageGrid> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = keyed_rng(&[cfg.base_seed, case_index as u64, u64::MAX]);
    let level = rng.random_range(0.2..0.35);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let fg = level + cfg.contrast * rng.random_range(0.8..1.2);
    let discs = place_distractors(cfg, sd, case_index);
    let mut px: Vec<f32> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let ramp = gy * (r as f64 / h as f64 - 0.5) + gx * (c as f64 / w as f64 - 0.5);
            let disc = discs
                .iter()
                .find(|&&(q, k, rad, _)| (r as f64 - q).hypot(c as f64 - k) <= rad)
                .map(|&(_, _, _, f)| level + (fg - level) * f);
            let v = if base.mask[i] { fg } else { disc.unwrap_or(level) };
            (v + ramp) as f32
        })
        .collect();
    if cfg.blur_sigma > 0.0 {
        px = gaussian_blur(&px, h, w, cfg.blur_sigma);
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in &mut px {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    ImageGrid::from_clamped(h, w, px)
}

/// Generates case `case_index` (1-based). The base shape is redrawn, smaller
/// each time, when some expert's mask comes out empty or touching the border.
pub fn generate_case(cfg: &SynthConfig, case_index: usize) -> Result<AnnotatedCase> {
    cfg.validate()?;
    if case_index == 0 || case_index > cfg.n_cases {
        return Err(Error::Range(format!("case index {case_index} outside 1..={}", cfg.n_cases)));
    }
    let (h, w) = (cfg.height, cfg.width);
    'attempt: for attempt in 0..MAX_ATTEMPTS {
        let base = draw_base(cfg, case_index, attempt);
        if !base.mask.iter().any(|&m| m) {
            continue;
        }
        let sd = signed_distance(&base.mask, h, w);
        let mut masks = BTreeMap::new();
        for style in &cfg.styles {
            let m = expert_mask(style, &base, &sd, h, w, case_index)?;
            if m.is_empty() || m.touches_border() {
                continue 'attempt;
            }
            masks.insert(style.expert_id, m);
        }
        let image = render(cfg, &base, &sd, case_index)?;
        return AnnotatedCase::new(case_index, image, masks);
    }
    Err(Error::Data(format!(
        "case {case_index}: no valid shape after {MAX_ATTEMPTS} attempts"
    )))
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<MultiExpertDataset> {
    cfg.validate()?;
    let cases = (1..=cfg.n_cases)
        .map(|k| generate_case(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    MultiExpertDataset::new(cases, Spacing::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice_score;

    fn style(id: u32, bias: i32, amp: f64) -> ExpertStyle {
        ExpertStyle {
            expert_id: ExpertId(id),
            bias_radius: bias,
            wobble_amplitude: amp,
            wobble_frequency: 3,
            style_seed: 7 + id as u64,
        }
    }

    #[test]
    fn identity_style_reproduces_base() {
        let cfg = SynthConfig::new(3, 48, 48, vec![style(1, 0, 0.0), style(2, 2, 0.0)], 5);
        for k in 1..=3 {
            let case = generate_case(&cfg, k).unwrap();
            let mut attempt = 0;
            let base = loop {
                let b = draw_base(&cfg, k, attempt);
                let sd = signed_distance(&b.mask, 48, 48);
                let ok = cfg.styles.iter().all(|s| {
                    let m = expert_mask(s, &b, &sd, 48, 48, k).unwrap();
                    !m.is_empty() && !m.touches_border()
                });
                if ok {
                    break b;
                }
                attempt += 1;
            };
            let m = case.mask(ExpertId(1)).unwrap();
            let expected: Vec<u8> = base.mask.iter().map(|&b| u8::from(b)).collect();
            assert_eq!(m.pixels(), expected.as_slice());
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::new(2, 64, 64, default_reference_styles(), 11);
        let a = generate_case(&cfg, 2).unwrap();
        let b = generate_case(&cfg, 2).unwrap();
        assert_eq!(a.image(), b.image());
        for (e, m) in a.masks() {
            assert_eq!(m, b.mask(e).unwrap());
        }
    }

    #[test]
    fn positive_bias_dilates() {
        let cfg = SynthConfig::new(4, 64, 64, vec![style(1, 0, 0.0), style(2, 2, 0.0)], 3);
        for k in 1..=4 {
            let case = generate_case(&cfg, k).unwrap();
            assert!(case.mask(ExpertId(2)).unwrap().area() > case.mask(ExpertId(1)).unwrap().area());
        }
    }

    #[test]
    fn dataset_shapes() {
        let cfg = SynthConfig::new(39, 64, 64, default_reference_styles(), 1);
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 39);
        assert_eq!(ds.roster().len(), 7);
        let (train, test) = ds.split(34).unwrap();
        assert_eq!((train.len(), test.len()), (34, 5));
        for case in ds.cases() {
            for (_, m) in case.masks() {
                assert!(!m.is_empty() && !m.touches_border());
            }
        }
        let tiny = generate_dataset(&SynthConfig::new(1, 32, 32, vec![style(1, 0, 0.5), style(2, 1, 0.5)], 0)).unwrap();
        assert_eq!(tiny.len(), 1);
        assert_eq!(tiny.cases()[0].masks().count(), 2);
    }

    #[test]
    fn reference_styles_contract() {
        let s = default_reference_styles();
        assert_eq!(s.len(), 7);
        let ids: BTreeSet<_> = s.iter().map(|x| x.expert_id).collect();
        assert_eq!(ids.len(), 7);
        let lo = s[..5].iter().map(|x| x.bias_radius).min().unwrap();
        let hi = s[..5].iter().map(|x| x.bias_radius).max().unwrap();
        assert!((lo..=hi).contains(&s[5].bias_radius));
        assert!(s[..6].iter().all(|x| x.wobble_amplitude < s[6].wobble_amplitude));
    }

    #[test]
    fn outlier_expert_agrees_least() {
        let cfg = SynthConfig::new(10, 64, 64, default_reference_styles(), 2);
        let ds = generate_dataset(&cfg).unwrap();
        let pair = |a: u32, b: u32| -> f64 {
            ds.cases()
                .iter()
                .map(|c| dice_score(c.mask(ExpertId(a)).unwrap(), c.mask(ExpertId(b)).unwrap()).unwrap())
                .sum::<f64>()
                / ds.len() as f64
        };
        let others: Vec<f64> = (1..=6)
            .flat_map(|a| (a + 1..=6).map(move |b| (a, b)))
            .map(|(a, b)| pair(a, b))
            .collect();
        let with7: Vec<f64> = (1..=6).map(|a| pair(a, 7)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&with7) < mean(&others));
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig::new(0, 64, 64, default_reference_styles(), 0).validate().is_err());
        assert!(SynthConfig::new(1, 64, 64, vec![], 0).validate().is_err());
        assert!(SynthConfig::new(1, 64, 64, vec![style(1, 9, 0.0)], 0).validate().is_err());
        assert!(SynthConfig::new(1, 64, 64, vec![style(1, 0, 0.0), style(1, 1, 0.0)], 0).validate().is_err());
        assert!(generate_case(&SynthConfig::new(2, 64, 64, vec![style(1, 0, 0.0)], 0), 3).is_err());
    }
}
