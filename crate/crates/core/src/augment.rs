//! Training-time augmentation applied jointly to an image and all of its
//! masks, plus the center crop used at test time.
//!
//! Geometric transforms (translation, zoom, rotation) are folded into one
//! affine map and resampled once: bilinear for the image, nearest for masks.
//! Intensity transforms touch the image only.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedCase, BinaryMask, ImageGrid};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the crop side.
    pub translation: f64,
    pub zoom: [f64; 2],
    pub rotation_deg: f64,
    pub noise_sigma: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub brightness: f64,
    pub probability: f64,
    pub crop: [usize; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            translation: 0.1,
            zoom: [0.9, 1.1],
            rotation_deg: 15.0,
            noise_sigma: [0.0, 0.05],
            blur_sigma: [0.5, 1.0],
            brightness: 0.1,
            probability: 0.5,
            crop: [192, 192],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled; only the crop remains.
    pub fn identity(crop: [usize; 2]) -> Self {
        AugmentConfig {
            translation: 0.0,
            zoom: [1.0, 1.0],
            rotation_deg: 0.0,
            noise_sigma: [0.0, 0.0],
            blur_sigma: [0.0, 0.0],
            brightness: 0.0,
            probability: 0.0,
            crop,
        }
    }

    pub fn with_crop(mut self, crop: [usize; 2]) -> Self {
        self.crop = crop;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("zoom", self.zoom),
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.zoom[0] <= 0.0 {
            return Err(Error::Config("zoom must be positive".into()));
        }
        for (name, v) in [
            ("translation", self.translation),
            ("rotation_deg", self.rotation_deg),
            ("brightness", self.brightness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config("probability must lie in [0, 1]".into()));
        }
        if self.crop[0] == 0 || self.crop[1] == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse affine map from crop coordinates to input coordinates.
#[derive(Debug, Clone, Copy)]
struct Warp {
    // input = center_in + m * (output - center_out) + shift
    m: [[f64; 2]; 2],
    shift: [f64; 2],
    center_in: [f64; 2],
    center_out: [f64; 2],
}

impl Warp {
    fn new(input: (usize, usize), crop: [usize; 2], zoom: f64, angle: f64, translate: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[c / zoom, -s / zoom], [s / zoom, c / zoom]];
        let center_out = [(crop[0] as f64 - 1.0) / 2.0, (crop[1] as f64 - 1.0) / 2.0];
        let off = [crop_offset(input.0, crop[0]) as f64, crop_offset(input.1, crop[1]) as f64];
        Warp {
            m,
            shift: [-translate[0], -translate[1]],
            center_in: [off[0] + center_out[0], off[1] + center_out[1]],
            center_out,
        }
    }

    fn apply(&self, r: usize, c: usize) -> (f64, f64) {
        let q = [r as f64 - self.center_out[0], c as f64 - self.center_out[1]];
        (
            self.center_in[0] + self.m[0][0] * q[0] + self.m[0][1] * q[1] + self.shift[0],
            self.center_in[1] + self.m[1][0] * q[0] + self.m[1][1] * q[1] + self.shift[1],
        )
    }
}

/// Input row/col of crop pixel 0: negative when the crop pads.
fn crop_offset(input: usize, crop: usize) -> isize {
    (input as isize - crop as isize).div_euclid(2)
}

fn warp_image(img: &ImageGrid, warp: &Warp, crop: [usize; 2]) -> Vec<f32> {
    let (h, w) = img.shape();
    let px = img.pixels();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            px[r as usize * w + c as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(crop[0] * crop[1]);
    for r in 0..crop[0] {
        for c in 0..crop[1] {
            let (y, x) = warp.apply(r, c);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
            if fx > 0.0 {
                v += at(y0, x0 + 1) * (1.0 - fy) * fx;
            }
            if fy > 0.0 {
                v += at(y0 + 1, x0) * fy * (1.0 - fx);
                if fx > 0.0 {
                    v += at(y0 + 1, x0 + 1) * fy * fx;
                }
            }
            out.push(v as f32);
        }
    }
    out
}

fn warp_mask(mask: &BinaryMask, warp: &Warp, crop: [usize; 2]) -> Result<BinaryMask> {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(crop[0], crop[1], |r, c| {
        let (y, x) = warp.apply(r, c);
        let (y, x) = (y.round(), x.round());
        y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(px: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return px.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * px[r * w + clamp(c as isize + j as isize - radius, w)] as f64;
            }
            tmp[r * w + c] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp(r as isize + j as isize - radius, h) * w + c] as f64;
            }
            out[r * w + c] = acc as f32;
        }
    }
    out
}

fn sample_range<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    sample_range(rng, [-bound, bound])
}

/// One randomly drawn augmentation of `case`, cropped to `cfg.crop`.
/// Deterministic in `rng_key`.
pub fn augment_sample(case: &AnnotatedCase, cfg: &AugmentConfig, rng_key: u64) -> Result<AnnotatedCase> {
    cfg.validate()?;
    let mut rng = keyed_rng(&[rng_key]);
    let p = cfg.probability;
    let translate = [
        symmetric(&mut rng, cfg.translation) * cfg.crop[0] as f64,
        symmetric(&mut rng, cfg.translation) * cfg.crop[1] as f64,
    ];
    let zoom = sample_range(&mut rng, cfg.zoom);
    let angle = symmetric(&mut rng, cfg.rotation_deg).to_radians();
    let noise = sample_range(&mut rng, cfg.noise_sigma);
    let blur = sample_range(&mut rng, cfg.blur_sigma);
    let bright = symmetric(&mut rng, cfg.brightness);
    let on: [bool; 6] = std::array::from_fn(|_| rng.random_bool(p));

    let warp = Warp::new(
        case.image().shape(),
        cfg.crop,
        if on[1] { zoom } else { 1.0 },
        if on[2] { angle } else { 0.0 },
        if on[0] { translate } else { [0.0, 0.0] },
    );
    let [ch, cw] = cfg.crop;
    let mut px = warp_image(case.image(), &warp, cfg.crop);
    if on[3] && noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("finite sigma");
        for v in &mut px {
            *v += dist.sample(&mut rng) as f32;
        }
    }
    if on[4] {
        px = gaussian_blur(&px, ch, cw, blur);
    }
    if on[5] {
        for v in &mut px {
            *v += bright as f32;
        }
    }
    let image = ImageGrid::from_clamped(ch, cw, px)?;
    let masks = case
        .masks()
        .map(|(e, m)| Ok((e, warp_mask(m, &warp, cfg.crop)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    AnnotatedCase::new(case.case_index(), image, masks)
}

fn crop_indices(src: (usize, usize), size: [usize; 2]) -> impl Iterator<Item = Option<usize>> {
    let (h, w) = src;
    let (oy, ox) = (crop_offset(h, size[0]), crop_offset(w, size[1]));
    (0..size[0]).flat_map(move |r| {
        (0..size[1]).map(move |c| {
            let (y, x) = (r as isize + oy, c as isize + ox);
            (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize)
        })
    })
}

/// Center crop to `size`, zero-padding symmetrically where the input is smaller.
pub fn center_crop_image(img: &ImageGrid, size: [usize; 2]) -> Result<ImageGrid> {
    let px = img.pixels();
    let out = crop_indices(img.shape(), size).map(|i| i.map_or(0.0, |i| px[i])).collect();
    ImageGrid::new(size[0], size[1], out)
}

pub fn center_crop_mask(mask: &BinaryMask, size: [usize; 2]) -> Result<BinaryMask> {
    let px = mask.pixels();
    let out = crop_indices(mask.shape(), size).map(|i| i.map_or(0, |i| px[i])).collect();
    BinaryMask::new(size[0], size[1], out)
}

/// Test-time pipeline: center crop of the image and every mask.
pub fn center_crop_case(case: &AnnotatedCase, size: [usize; 2]) -> Result<AnnotatedCase> {
    let masks = case
        .masks()
        .map(|(e, m)| Ok((e, center_crop_mask(m, size)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    AnnotatedCase::new(case.case_index(), center_crop_image(case.image(), size)?, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExpertId;

    fn case(h: usize, w: usize, mask: BinaryMask) -> AnnotatedCase {
        let px = (0..h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let image = ImageGrid::new(h, w, px).unwrap();
        AnnotatedCase::new(1, image, BTreeMap::from([(ExpertId(1), mask)])).unwrap()
    }

    fn square(h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (6..20).contains(&r) && (30..44).contains(&c)).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let c = case(48, 64, square(48, 64));
        let out = augment_sample(&c, &AugmentConfig::identity([48, 64]), 9).unwrap();
        assert_eq!(out.image(), c.image());
        assert_eq!(out.mask(ExpertId(1)).unwrap(), c.mask(ExpertId(1)).unwrap());
    }

    #[test]
    fn deterministic_in_key() {
        let c = case(64, 64, square(64, 64));
        let cfg = AugmentConfig::default().with_crop([64, 64]);
        let a = augment_sample(&c, &cfg, 3).unwrap();
        let b = augment_sample(&c, &cfg, 3).unwrap();
        assert_eq!(a.image(), b.image());
        assert_eq!(a.mask(ExpertId(1)).unwrap(), b.mask(ExpertId(1)).unwrap());
        let d = augment_sample(&c, &cfg, 4).unwrap();
        assert!(a.image() != d.image() || a.mask(ExpertId(1)).unwrap() != d.mask(ExpertId(1)).unwrap());
    }

    #[test]
    fn quarter_turn_rotates_mask() {
        let (h, w) = (64, 64);
        let m = square(h, w);
        let warp = Warp::new((h, w), [h, w], 1.0, std::f64::consts::FRAC_PI_2, [0.0, 0.0]);
        let out = warp_mask(&m, &warp, [h, w]).unwrap();
        let area = out.area() as f64;
        assert!((area - m.area() as f64).abs() <= 0.05 * m.area() as f64);
        // direct index rotation about the grid center
        let direct = BinaryMask::from_fn(h, w, |r, c| m.get(h - 1 - c, r)).unwrap();
        let agree = out.pixels().iter().zip(direct.pixels()).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.99 * (h * w) as f64);
    }

    #[test]
    fn outputs_stay_binary_and_bounded() {
        let c = case(64, 64, square(64, 64));
        let cfg = AugmentConfig {
            probability: 1.0,
            ..AugmentConfig::default().with_crop([64, 64])
        };
        for key in 0..20 {
            let out = augment_sample(&c, &cfg, key).unwrap();
            assert!(out.image().pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(out.mask(ExpertId(1)).unwrap().pixels().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn center_crop_examples() {
        let img = ImageGrid::new(256, 256, (0..256 * 256).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let out = center_crop_image(&img, [192, 192]).unwrap();
        assert_eq!(out.shape(), (192, 192));
        assert_eq!(out.get(0, 0), img.get(32, 32));
        assert_eq!(out.get(191, 191), img.get(223, 223));
        let same = center_crop_image(&out, [192, 192]).unwrap();
        assert_eq!(same, out);
        let small = ImageGrid::new(100, 100, vec![1.0; 10000]).unwrap();
        let padded = center_crop_image(&small, [192, 192]).unwrap();
        assert_eq!(padded.get(45, 100), 0.0);
        assert_eq!(padded.get(46, 46), 1.0);
        assert_eq!(padded.get(145, 145), 1.0);
        assert_eq!(padded.get(146, 100), 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = AugmentConfig::default();
        cfg.zoom = [1.2, 0.8];
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.probability = 1.5;
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
