//! Overlap and surface-distance metrics: Dice score, average symmetric
//! surface distance (ASSD) and the 95th-percentile Hausdorff distance (HD95).
//!
//! A surface pixel is a foreground pixel with at least one background
//! 4-neighbour; pixels outside the grid count as background. Nearest-surface
//! distances come from an exact separable Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Spacing};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub points: Vec<(usize, usize)>,
    pub spacing: Spacing,
}

/// Dice, ASSD and HD95 for one prediction/reference pair. Distances are `None`
/// when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub dice: f64,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

impl MetricTriple {
    pub fn is_complete(&self) -> bool {
        self.assd.is_some() && self.hd95.is_some()
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// `2|A and B| / (|A| + |B|)`, defined as 1 when both masks are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        inter += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn extract_surface(mask: &BinaryMask, spacing: Spacing) -> Result<SurfaceSet> {
    let (h, w) = mask.shape();
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r == h - 1
                || c == w - 1
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                points.push((r, c));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Undefined("surface of an empty mask".into()));
    }
    Ok(SurfaceSet { points, spacing })
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// with sample spacing `step`. `f` holds squared distances, `INF` for none.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = (pos(q) - pos(v[k])).abs();
        let p = v[k];
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest pixel flagged in
/// `features` (row-major `h * w`); infinite everywhere when nothing is flagged.
pub(crate) fn squared_distance_field(features: &[bool], h: usize, w: usize, spacing: Spacing) -> Vec<f64> {
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut col = vec![0.0f64; h];
    let mut tmp = vec![0.0f64; n];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, spacing.row, &mut tmp[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = tmp[r];
        }
    }
    for r in 0..h {
        let row: Vec<f64> = grid[r * w..(r + 1) * w].to_vec();
        edt_1d(&row, spacing.col, &mut tmp[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&tmp[..w]);
    }
    grid
}

/// Distances from each point of `from` to the nearest point of `to`.
fn directed_distances(from: &SurfaceSet, to: &SurfaceSet, h: usize, w: usize) -> Vec<f64> {
    let mut features = vec![false; h * w];
    for &(r, c) in &to.points {
        features[r * w + c] = true;
    }
    let map = squared_distance_field(&features, h, w, to.spacing);
    from.points.iter().map(|&(r, c)| map[r * w + c].sqrt()).collect()
}

fn surfaces(a: &BinaryMask, b: &BinaryMask, spacing: Spacing) -> Result<(SurfaceSet, SurfaceSet)> {
    check_shapes(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined("surface distance with an empty mask".into()));
    }
    Ok((extract_surface(a, spacing)?, extract_surface(b, spacing)?))
}

pub fn assd(a: &BinaryMask, b: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (sa, sb) = surfaces(a, b, spacing)?;
    let (h, w) = a.shape();
    let dab = directed_distances(&sa, &sb, h, w);
    let dba = directed_distances(&sb, &sa, h, w);
    let total: f64 = dab.iter().sum::<f64>() + dba.iter().sum::<f64>();
    Ok(total / (dab.len() + dba.len()) as f64)
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn hd95(a: &BinaryMask, b: &BinaryMask, spacing: Spacing) -> Result<f64> {
    let (sa, sb) = surfaces(a, b, spacing)?;
    let (h, w) = a.shape();
    let dab = directed_distances(&sa, &sb, h, w);
    let dba = directed_distances(&sb, &sa, h, w);
    Ok(percentile(&dab, 95.0).max(percentile(&dba, 95.0)))
}

/// All three metrics; empty masks yield flagged (`None`) distances.
pub fn evaluate_case(pred: &BinaryMask, reference: &BinaryMask, spacing: Spacing) -> Result<MetricTriple> {
    let dice = dice_score(pred, reference)?;
    let (assd, hd95) = match (assd(pred, reference, spacing), hd95(pred, reference, spacing)) {
        (Ok(a), Ok(h)) => (Some(a), Some(h)),
        (Err(Error::Undefined(_)), _) | (_, Err(Error::Undefined(_))) => (None, None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(MetricTriple { dice, assd, hd95 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, r0: usize, c0: usize, size: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (r0..r0 + size).contains(&r) && (c0..c0 + size).contains(&c)).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = block(8, 8, 2, 2, 2);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &block(8, 8, 5, 5, 2)).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &block(8, 8, 2, 3, 2)).unwrap(), 0.5);
        let e = BinaryMask::empty(8, 8).unwrap();
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert!(dice_score(&a, &BinaryMask::empty(9, 8).unwrap()).is_err());
    }

    #[test]
    fn surface_examples() {
        let s = extract_surface(&block(8, 8, 3, 3, 1), Spacing::default()).unwrap();
        assert_eq!(s.points, vec![(3, 3)]);
        let s = extract_surface(&block(8, 8, 2, 2, 4), Spacing::default()).unwrap();
        assert_eq!(s.points.len(), 12);
        let full = BinaryMask::from_fn(8, 8, |_, _| true).unwrap();
        let s = extract_surface(&full, Spacing::default()).unwrap();
        assert_eq!(s.points.len(), 28);
        assert!(extract_surface(&BinaryMask::empty(8, 8).unwrap(), Spacing::default()).is_err());
    }

    #[test]
    fn distance_examples() {
        let sp = Spacing::default();
        let a = BinaryMask::from_fn(8, 8, |r, c| (r, c) == (0, 0)).unwrap();
        let b = BinaryMask::from_fn(8, 8, |r, c| (r, c) == (0, 3)).unwrap();
        assert_eq!(assd(&a, &b, sp).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, sp).unwrap(), 3.0);
        assert_eq!(assd(&a, &a, sp).unwrap(), 0.0);
        assert_eq!(hd95(&a, &a, sp).unwrap(), 0.0);
        let aniso = Spacing { row: 2.0, col: 0.5 };
        assert_eq!(assd(&a, &b, aniso).unwrap(), 1.5);
    }

    #[test]
    fn evaluate_case_conventions() {
        let a = block(16, 16, 4, 4, 5);
        let t = evaluate_case(&a, &a, Spacing::default()).unwrap();
        assert_eq!(t, MetricTriple { dice: 1.0, assd: Some(0.0), hd95: Some(0.0) });
        let e = BinaryMask::empty(16, 16).unwrap();
        let t = evaluate_case(&e, &a, Spacing::default()).unwrap();
        assert_eq!(t.dice, 0.0);
        assert!(t.assd.is_none() && t.hd95.is_none());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile(&v, 95.0) - 9.5).abs() < 1e-12);
        assert!((percentile(&[0.0, 1.0], 50.0) - 0.5).abs() < 1e-12);
    }
}
