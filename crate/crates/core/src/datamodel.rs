//! Canonical in-memory and on-disk representation of grouped image/mask
//! datasets and predictions.
//!
//! Tensors use NCHW layout: images are `[N, 3, H, W]` with values in [0, 1],
//! masks `[N, H, W]` with values in {0, 1}.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A batch of N aligned images from one category.
#[derive(Debug, Clone)]
pub struct ImageGroup<T: Scalar> {
    /// `[N, 3, H, W]`, values in [0, 1].
    pub images: Array4<T>,
    pub category: String,
    pub ids: Vec<String>,
}

impl<T: Scalar> ImageGroup<T> {
    pub fn new(images: Array4<T>, category: impl Into<String>, ids: Vec<String>) -> Result<Self> {
        let (n, c, h, w) = images.dim();
        if n < 2 {
            return Err(Error::Validation(format!("image group needs N >= 2, got {n}")));
        }
        if c != 3 {
            return Err(Error::Shape(format!("image group expects 3 channels, got {c}")));
        }
        if h != w {
            return Err(Error::Shape(format!("image group must be square, got {h}x{w}")));
        }
        if ids.len() != n {
            return Err(Error::Validation(format!("{} ids for {n} images", ids.len())));
        }
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::Validation("duplicate image ids in group".into()));
        }
        for &v in images.iter() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Validation("image values must lie in [0, 1]".into()));
            }
        }
        Ok(ImageGroup { images, category: category.into(), ids })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.dim().2
    }
}

/// Binary masks aligned with an [`ImageGroup`].
#[derive(Debug, Clone)]
pub struct MaskGroup<T: Scalar> {
    /// `[N, H, W]`, values in {0, 1}.
    pub masks: Array3<T>,
    pub ids: Vec<String>,
}

impl<T: Scalar> MaskGroup<T> {
    pub fn new(masks: Array3<T>, ids: Vec<String>) -> Result<Self> {
        let (n, _, _) = masks.dim();
        if ids.len() != n {
            return Err(Error::Validation(format!("{} ids for {n} masks", ids.len())));
        }
        for &v in masks.iter() {
            if !(v == T::zero() || v == T::one()) {
                return Err(Error::Validation("masks must be strictly binary".into()));
            }
        }
        Ok(MaskGroup { masks, ids })
    }

    /// Check elementwise id alignment against the paired image group.
    pub fn aligned_with(&self, images: &ImageGroup<T>) -> bool {
        self.ids == images.ids
    }
}

/// A single predicted saliency map.
#[derive(Debug, Clone)]
pub struct SaliencyMap<T: Scalar> {
    /// `[H, W]`, values in [0, 1].
    pub values: Array2<T>,
    pub id: String,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(values: Array2<T>, id: impl Into<String>) -> Result<Self> {
        for &v in values.iter() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Validation("saliency values must lie in [0, 1]".into()));
            }
        }
        Ok(SaliencyMap { values, id: id.into() })
    }

    /// Write as single-channel 8-bit PNG with value = round(255 * p).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.values.dim();
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for ((y, x), &v) in self.values.indexed_iter() {
            let byte = (v.to_f64_c() * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([byte]));
        }
        buf.save(path).map_err(|e| Error::image(path, e))
    }

    /// Read a prediction PNG (any grayscale-convertible image) as values/255.
    pub fn read_png(path: &Path, id: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
        let (w, h) = img.dimensions();
        let mut values = Array2::zeros((h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            values[[y as usize, x as usize]] = T::from_f64_c(p.0[0] as f64 / 255.0);
        }
        Ok(SaliencyMap { values, id: id.into() })
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Declarative description of a (possibly open-world) grouped dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source_dataset: String,
    pub seed: u64,
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub category: String,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default)]
    pub is_noise: bool,
    /// Category the image was drawn from; equals the group category for
    /// ordinary items.
    #[serde(default)]
    pub source_category: String,
}

/// Stable per-item identifier; prediction files are named `{id}.png`.
pub fn item_id(category: &str, item: &ManifestItem) -> String {
    let stem = item
        .image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into());
    if item.is_noise {
        format!("{}__noise_{}_{}", sanitize(category), sanitize(&item.source_category), stem)
    } else {
        format!("{}__{}", sanitize(category), stem)
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

impl DatasetManifest {
    /// Structural invariants that do not require touching files.
    pub fn validate_structure(&self) -> Result<()> {
        for group in &self.groups {
            if group.category.is_empty() {
                return Err(Error::Validation("empty category name".into()));
            }
            let mut seen = std::collections::HashSet::new();
            for item in &group.items {
                if item.is_noise {
                    if item.source_category.is_empty() || item.source_category == group.category {
                        return Err(Error::Validation(format!(
                            "noise item {} in group `{}` must come from a different category",
                            item.image_path.display(),
                            group.category
                        )));
                    }
                } else if !item.source_category.is_empty()
                    && item.source_category != group.category
                {
                    return Err(Error::Validation(format!(
                        "non-noise item {} claims foreign source `{}`",
                        item.image_path.display(),
                        item.source_category
                    )));
                }
                if !seen.insert(item.image_path.clone()) {
                    return Err(Error::Validation(format!(
                        "duplicate image {} in group `{}`",
                        item.image_path.display(),
                        group.category
                    )));
                }
            }
        }
        let mut cats: Vec<&str> = self.groups.iter().map(|g| g.category.as_str()).collect();
        cats.sort();
        let before = cats.len();
        cats.dedup();
        if cats.len() != before {
            return Err(Error::Validation("duplicate category in manifest".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.category.as_str()).collect()
    }

    pub fn total_items(&self) -> usize {
        self.groups.iter().map(|g| g.items.len()).sum()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::manifest(path, e.to_string()))?;
    manifest.validate_structure()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, out_path: &Path) -> Result<()> {
    manifest.validate_structure()?;
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::manifest(out_path, e.to_string()))?;
    text.push('\n');
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))
}

/// Resolve a manifest-relative path.
pub fn resolve_path(manifest_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

// ---------------------------------------------------------------------------
// Loader
// ---------------------------------------------------------------------------

/// What to do with the final partial group of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingPolicy {
    /// Drop the remainder (training: N must stay fixed).
    DropRemainder,
    /// Pad the remainder by resampling with replacement from the category
    /// (evaluation: every image must be scored).
    PadRemainder,
    /// One group per category containing every item, padded to at least 2.
    WholeCategory,
}

/// Planned group: resolved paths and ids, not yet decoded.
#[derive(Debug, Clone)]
pub struct GroupPlan {
    pub category: String,
    pub ids: Vec<String>,
    pub image_paths: Vec<PathBuf>,
    pub mask_paths: Vec<PathBuf>,
    pub is_noise: Vec<bool>,
}

/// Deterministic loader for a manifest.
pub struct DatasetLoader {
    manifest: DatasetManifest,
    manifest_dir: PathBuf,
    input_size: usize,
}

impl DatasetLoader {
    pub fn open(manifest_path: &Path, input_size: usize) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let manifest_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(DatasetLoader { manifest, manifest_dir, input_size })
    }

    pub fn from_manifest(manifest: DatasetManifest, manifest_dir: PathBuf, input_size: usize) -> Self {
        DatasetLoader { manifest, manifest_dir, input_size }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Partition every category into groups of `group_size` according to the
    /// policy. Deterministic: shuffling is driven by the manifest seed only.
    pub fn plan_groups(&self, group_size: usize, policy: GroupingPolicy) -> Result<Vec<GroupPlan>> {
        if group_size < 2 && policy != GroupingPolicy::WholeCategory {
            return Err(Error::Contract("group_size must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.manifest.seed);
        let mut plans = Vec::new();
        for group in &self.manifest.groups {
            let mut order: Vec<usize> = (0..group.items.len()).collect();
            order.shuffle(&mut rng);
            match policy {
                GroupingPolicy::WholeCategory => {
                    let mut idxs = order.clone();
                    // N >= 2 invariant: tiny categories resample with replacement
                    while idxs.len() < 2 {
                        idxs.push(order[rng.gen_range(0..order.len())]);
                    }
                    plans.push(self.plan_from(group, &idxs));
                }
                GroupingPolicy::DropRemainder | GroupingPolicy::PadRemainder => {
                    if group.items.len() < group_size
                        && policy == GroupingPolicy::DropRemainder
                    {
                        continue;
                    }
                    let mut chunks: Vec<Vec<usize>> =
                        order.chunks(group_size).map(|c| c.to_vec()).collect();
                    if let Some(last) = chunks.last() {
                        if last.len() < group_size {
                            match policy {
                                GroupingPolicy::DropRemainder => {
                                    chunks.pop();
                                }
                                GroupingPolicy::PadRemainder => {
                                    let mut padded = chunks.pop().unwrap();
                                    while padded.len() < group_size {
                                        padded.push(order[rng.gen_range(0..order.len())]);
                                    }
                                    chunks.push(padded);
                                }
                                GroupingPolicy::WholeCategory => unreachable!(),
                            }
                        }
                    }
                    for chunk in chunks {
                        plans.push(self.plan_from(group, &chunk));
                    }
                }
            }
        }
        Ok(plans)
    }

    fn plan_from(&self, group: &GroupEntry, idxs: &[usize]) -> GroupPlan {
        let mut ids = Vec::with_capacity(idxs.len());
        let mut image_paths = Vec::with_capacity(idxs.len());
        let mut mask_paths = Vec::with_capacity(idxs.len());
        let mut is_noise = Vec::with_capacity(idxs.len());
        let mut seen = std::collections::HashMap::<String, usize>::new();
        for &i in idxs {
            let item = &group.items[i];
            let mut id = item_id(&group.category, item);
            // resampling with replacement may duplicate an item; ids must stay unique
            let n = seen.entry(id.clone()).or_insert(0);
            if *n > 0 {
                id = format!("{id}__dup{n}");
            }
            *n += 1;
            ids.push(id);
            image_paths.push(resolve_path(&self.manifest_dir, &item.image_path));
            mask_paths.push(resolve_path(&self.manifest_dir, &item.mask_path));
            is_noise.push(item.is_noise);
        }
        GroupPlan { category: group.category.clone(), ids, image_paths, mask_paths, is_noise }
    }

    /// Decode one planned group into tensors.
    pub fn load_group<T: Scalar>(&self, plan: &GroupPlan) -> Result<(ImageGroup<T>, MaskGroup<T>)> {
        let n = plan.ids.len();
        let s = self.input_size;
        let mut images = Array4::<T>::zeros((n, 3, s, s));
        let mut masks = Array3::<T>::zeros((n, s, s));
        for i in 0..n {
            let img = load_image_rgb(&plan.image_paths[i], s)?;
            images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
            let mask = load_mask_binary(&plan.mask_paths[i], s)?;
            if plan.is_noise[i] && mask.iter().any(|&v| v != T::zero()) {
                return Err(Error::Validation(format!(
                    "noise item {} has a nonzero mask {}",
                    plan.ids[i],
                    plan.mask_paths[i].display()
                )));
            }
            masks.index_axis_mut(ndarray::Axis(0), i).assign(&mask);
        }
        let ig = ImageGroup::new(images, plan.category.clone(), plan.ids.clone())?;
        let mg = MaskGroup::new(masks, plan.ids.clone())?;
        Ok((ig, mg))
    }

    /// Plan and decode everything (convenience for small datasets).
    pub fn load_all<T: Scalar>(
        &self,
        group_size: usize,
        policy: GroupingPolicy,
    ) -> Result<Vec<(ImageGroup<T>, MaskGroup<T>)>> {
        self.plan_groups(group_size, policy)?
            .iter()
            .map(|p| self.load_group(p))
            .collect()
    }
}

/// Decode an RGB image, resize bilinearly, scale by 1/255.
pub fn load_image_rgb<T: Scalar>(path: &Path, size: usize) -> Result<Array3<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    let mut out = Array3::<T>::zeros((3, size, size));
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::from_f64_c(p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Decode a mask, resize nearest-neighbor, threshold at 0.5.
pub fn load_mask_binary<T: Scalar>(path: &Path, size: usize) -> Result<Array2<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    let mut out = Array2::<T>::zeros((size, size));
    for (x, y, p) in resized.enumerate_pixels() {
        out[[y as usize, x as usize]] =
            if p.0[0] >= 128 { T::one() } else { T::zero() };
    }
    Ok(out)
}

/// Decode a mask PNG without resizing, returning the raw 8-bit values.
pub fn load_mask_raw(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    Ok(img.into_raw())
}

/// Write a binary mask as a 0/255 single-channel PNG.
pub fn write_mask_png<T: Scalar>(mask: &Array2<T>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.indexed_iter() {
        let byte = if v > T::from_f64_c(0.5) { 255u8 } else { 0u8 };
        buf.put_pixel(x as u32, y as u32, image::Luma([byte]));
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}
