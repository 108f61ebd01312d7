//! Multi-expert dataset model, on-disk layout and the deterministic
//! subsampling / expert-combination protocols used by the experiments.
//!
//! Case indices are 1-based everywhere in this module. They are converted to
//! 0-based positions only when indexing storage.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/case_<k>/image.png        8- or 16-bit grayscale
//! <root>/case_<k>/expert_<r>.png   8-bit, 0 = background, 255 = foreground
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(pub u32);

impl ExpertId {
    pub fn new(id: u32) -> Result<Self> {
        if id == 0 {
            return Err(Error::Invalid("expert ids start at 1".into()));
        }
        Ok(ExpertId(id))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Exp_{}", self.0)
    }
}

/// Physical size of one pixel along (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { row: 1.0, col: 1.0 }
    }
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_dims(height, width, pixels.len())?;
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, pixels)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Binary segmentation mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(height, width, pixels.len())?;
        if let Some(v) = pixels.iter().find(|v| **v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(u8::from(f(r, c)));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] != 0
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0)
    }

    /// True when any foreground pixel lies on the outermost row or column.
    pub fn touches_border(&self) -> bool {
        let (h, w) = self.shape();
        (0..w).any(|c| self.get(0, c) || self.get(h - 1, c))
            || (0..h).any(|r| self.get(r, 0) || self.get(r, w - 1))
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Invalid(format!(
            "grid {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    if len != height * width {
        return Err(Error::Invalid(format!(
            "buffer of {len} values does not fit a {height}x{width} grid"
        )));
    }
    Ok(())
}

/// One image with the masks drawn for it by each expert.
///
/// Image and masks are reference counted so that restricted views of a
/// dataset share storage with their parent.
#[derive(Debug, Clone)]
pub struct AnnotatedCase {
    case_index: usize,
    image: Arc<ImageGrid>,
    masks: BTreeMap<ExpertId, Arc<BinaryMask>>,
}

impl AnnotatedCase {
    pub fn new(
        case_index: usize,
        image: ImageGrid,
        masks: BTreeMap<ExpertId, BinaryMask>,
    ) -> Result<Self> {
        if case_index == 0 {
            return Err(Error::Invalid("case indices are 1-based".into()));
        }
        for mask in masks.values() {
            if mask.shape() != image.shape() {
                return Err(Error::Shape {
                    expected: image.shape(),
                    got: mask.shape(),
                });
            }
        }
        Ok(AnnotatedCase {
            case_index,
            image: Arc::new(image),
            masks: masks.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }

    pub fn case_index(&self) -> usize {
        self.case_index
    }

    pub fn image(&self) -> &ImageGrid {
        &self.image
    }

    pub fn mask(&self, expert: ExpertId) -> Result<&BinaryMask> {
        self.masks
            .get(&expert)
            .map(|m| m.as_ref())
            .ok_or(Error::UnknownExpert(expert.0))
    }

    pub fn masks(&self) -> impl Iterator<Item = (ExpertId, &BinaryMask)> {
        self.masks.iter().map(|(k, v)| (*k, v.as_ref()))
    }

    pub fn experts(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.masks.keys().copied()
    }

    fn restricted(&self, keep: &BTreeSet<ExpertId>) -> Self {
        AnnotatedCase {
            case_index: self.case_index,
            image: Arc::clone(&self.image),
            masks: self
                .masks
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (*k, Arc::clone(v)))
                .collect(),
        }
    }
}

/// An ordered, immutable collection of annotated cases sharing one roster.
#[derive(Debug, Clone)]
pub struct MultiExpertDataset {
    cases: Vec<AnnotatedCase>,
    roster: BTreeSet<ExpertId>,
    spacing: Spacing,
}

impl MultiExpertDataset {
    pub fn new(mut cases: Vec<AnnotatedCase>, spacing: Spacing) -> Result<Self> {
        cases.sort_by_key(|c| c.case_index);
        if let Some(w) = cases.windows(2).find(|w| w[0].case_index == w[1].case_index) {
            return Err(Error::Invalid(format!(
                "duplicate case index {}",
                w[0].case_index
            )));
        }
        let roster: BTreeSet<ExpertId> = cases
            .first()
            .map(|c| c.experts().collect())
            .unwrap_or_default();
        let shape = cases.first().map(|c| c.image.shape());
        for case in &cases {
            for expert in &roster {
                if !case.masks.contains_key(expert) {
                    return Err(Error::MissingMask {
                        case: case.case_index,
                        expert: expert.0,
                        path: PathBuf::new(),
                    });
                }
            }
            if case.masks.len() != roster.len() {
                return Err(Error::Invalid(format!(
                    "case {} is annotated by experts outside the roster",
                    case.case_index
                )));
            }
            if Some(case.image.shape()) != shape {
                return Err(Error::Shape {
                    expected: shape.unwrap_or_default(),
                    got: case.image.shape(),
                });
            }
        }
        Ok(MultiExpertDataset {
            cases,
            roster,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[AnnotatedCase] {
        &self.cases
    }

    pub fn roster(&self) -> &BTreeSet<ExpertId> {
        &self.roster
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn case_indices(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.case_index).collect()
    }

    /// Looks a case up by its 1-based case index.
    pub fn case(&self, case_index: usize) -> Result<&AnnotatedCase> {
        self.cases
            .binary_search_by_key(&case_index, |c| c.case_index)
            .map(|pos| &self.cases[pos])
            .map_err(|_| Error::Range(format!("unknown case index {case_index}")))
    }

    /// Returns the case at 1-based position `position` in dataset order.
    pub fn nth(&self, position: usize) -> Result<&AnnotatedCase> {
        position
            .checked_sub(1)
            .and_then(|p| self.cases.get(p))
            .ok_or_else(|| {
                Error::Range(format!(
                    "position {position} outside 1..={}",
                    self.cases.len()
                ))
            })
    }

    /// Immutable view holding only `indices` (dataset positions, 1-based, in the
    /// given order) and only the masks of `combo` members.
    pub fn restrict(&self, combo: &ExpertCombination, indices: &[usize]) -> Result<Self> {
        let keep: BTreeSet<ExpertId> = combo.members().iter().copied().collect();
        if let Some(e) = keep.iter().find(|e| !self.roster.contains(e)) {
            return Err(Error::UnknownExpert(e.0));
        }
        let cases = indices
            .iter()
            .map(|&i| self.nth(i).map(|c| c.restricted(&keep)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiExpertDataset {
            cases,
            roster: keep,
            spacing: self.spacing,
        })
    }

    /// Splits into the first `n_train` cases and the remainder.
    pub fn split(&self, n_train: usize) -> Result<(Self, Self)> {
        if n_train > self.len() {
            return Err(Error::Range(format!(
                "cannot take {n_train} training cases from {}",
                self.len()
            )));
        }
        let part = |cases: &[AnnotatedCase]| MultiExpertDataset {
            cases: cases.to_vec(),
            roster: self.roster.clone(),
            spacing: self.spacing,
        };
        Ok((part(&self.cases[..n_train]), part(&self.cases[n_train..])))
    }
}

/// Deterministic consecutive-index subsample with wraparound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    start_index: usize,
    count: usize,
    cardinality: usize,
}

impl SamplingPlan {
    pub fn new(start_index: usize, count: usize, cardinality: usize) -> Result<Self> {
        if cardinality == 0 || start_index == 0 || start_index > cardinality {
            return Err(Error::Range(format!(
                "start index {start_index} outside 1..={cardinality}"
            )));
        }
        if count == 0 || count > cardinality {
            return Err(Error::Range(format!(
                "sample count {count} outside 1..={cardinality}"
            )));
        }
        Ok(SamplingPlan {
            start_index,
            count,
            cardinality,
        })
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }
}

/// `plan.count` consecutive 1-based indices from `plan.start_index`, wrapping
/// past `plan.cardinality` back to 1.
pub fn sample_indices(plan: &SamplingPlan) -> Result<Vec<usize>> {
    let SamplingPlan {
        start_index,
        count,
        cardinality,
    } = *plan;
    if count > cardinality {
        return Err(Error::Range(format!(
            "cannot sample {count} of {cardinality}"
        )));
    }
    Ok((0..count)
        .map(|k| (start_index - 1 + k) % cardinality + 1)
        .collect())
}

/// Evenly spaced 1-based start indices with stride `cardinality / n_ways`.
pub fn starting_indices(cardinality: usize, n_ways: usize) -> Result<Vec<usize>> {
    if n_ways == 0 || cardinality < n_ways {
        return Err(Error::Range(format!(
            "cannot place {n_ways} starts in {cardinality} cases"
        )));
    }
    let stride = cardinality / n_ways;
    Ok((0..n_ways).map(|i| 1 + i * stride).collect())
}

/// A non-empty, duplicate-free, ascending set of experts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<ExpertId>", into = "Vec<ExpertId>")]
pub struct ExpertCombination(Vec<ExpertId>);

impl ExpertCombination {
    pub fn new(mut members: Vec<ExpertId>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("expert combination is empty".into()));
        }
        members.sort();
        let before = members.len();
        members.dedup();
        if members.len() != before {
            return Err(Error::Invalid("expert combination has duplicates".into()));
        }
        Ok(ExpertCombination(members))
    }

    pub fn single(expert: ExpertId) -> Self {
        ExpertCombination(vec![expert])
    }

    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        Self::new(ids.iter().map(|&i| ExpertId::new(i)).collect::<Result<_>>()?)
    }

    pub fn members(&self) -> &[ExpertId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, e: ExpertId) -> bool {
        self.0.binary_search(&e).is_ok()
    }

    /// Compact label such as `1-2-3`.
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(|e| e.0.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl TryFrom<Vec<ExpertId>> for ExpertCombination {
    type Error = Error;

    fn try_from(v: Vec<ExpertId>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ExpertCombination> for Vec<ExpertId> {
    fn from(c: ExpertCombination) -> Self {
        c.0
    }
}

/// All `C(|roster|, k)` subsets in lexicographic order.
pub fn expert_combinations(
    roster: &BTreeSet<ExpertId>,
    k: usize,
) -> Result<Vec<ExpertCombination>> {
    let pool: Vec<ExpertId> = roster.iter().copied().collect();
    if k == 0 || k > pool.len() {
        return Err(Error::Range(format!(
            "combination size {k} outside 1..={}",
            pool.len()
        )));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(ExpertCombination(idx.iter().map(|&i| pool[i]).collect()));
        // advance the rightmost index that still has room
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < pool.len() - k + p) else {
            break;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    cases: Vec<usize>,
    experts: Vec<ExpertId>,
    #[serde(default)]
    spacing: Spacing,
}

const MANIFEST: &str = "manifest.json";

fn case_dir(root: &Path, case_index: usize) -> PathBuf {
    root.join(format!("case_{case_index}"))
}

fn mask_path(root: &Path, case_index: usize, expert: ExpertId) -> PathBuf {
    case_dir(root, case_index).join(format!("expert_{}.png", expert.0))
}

/// Reads a dataset written in the directory layout described at module level.
pub fn load_manifest(root: &Path) -> Result<MultiExpertDataset> {
    let manifest_path = root.join(MANIFEST);
    if !manifest_path.exists() {
        let has_cases = fs::read_dir(root)
            .map(|it| {
                it.flatten()
                    .any(|e| e.file_name().to_string_lossy().starts_with("case_"))
            })
            .unwrap_or(false);
        return Err(if has_cases {
            Error::Data(format!("{} is missing", manifest_path.display()))
        } else {
            Error::NoCases(root.to_path_buf())
        });
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.cases.is_empty() {
        return Err(Error::NoCases(root.to_path_buf()));
    }
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for &k in &manifest.cases {
        let image = read_image(&case_dir(root, k).join("image.png"))?;
        let mut masks = BTreeMap::new();
        for &r in &manifest.experts {
            let path = mask_path(root, k, r);
            if !path.exists() {
                return Err(Error::MissingMask {
                    case: k,
                    expert: r.0,
                    path,
                });
            }
            masks.insert(r, read_mask(&path)?);
        }
        cases.push(AnnotatedCase::new(k, image, masks)?);
    }
    MultiExpertDataset::new(cases, manifest.spacing)
}

/// Writes `dataset` to `root`, creating directories as needed.
///
/// Images are stored as 16-bit PNG, so values that came from a PNG load
/// survive a save/load cycle unchanged.
pub fn save_dataset(dataset: &MultiExpertDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for case in dataset.cases() {
        let dir = case_dir(root, case.case_index);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_image(case.image(), &dir.join("image.png"))?;
        for (r, mask) in case.masks() {
            write_mask(mask, &mask_path(root, case.case_index, r))?;
        }
    }
    let manifest = Manifest {
        version: 1,
        cases: dataset.case_indices(),
        experts: dataset.roster.iter().copied().collect(),
        spacing: dataset.spacing,
    };
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    ImageGrid::new(h, w, pixels).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    BinaryMask::new(h, w, pixels).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_image(img: &ImageGrid, path: &Path) -> Result<()> {
    let raw: Vec<u16> = img
        .pixels()
        .iter()
        .map(|v| (v * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer sized from grid");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.pixels().iter().map(|&v| v * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer sized from grid");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
