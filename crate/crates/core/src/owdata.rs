//! Open-world dataset construction: inject noise images with all-zero masks
//! into a clean grouped base dataset, in random proportions kept strictly
//! below the minority threshold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{NoiseMode, RatioSamplerConfig};
use crate::datamodel::{
    item_id, resolve_path, write_mask_png, DatasetManifest, GroupEntry, ManifestItem,
};
use crate::error::{Error, Result};

/// How noise is injected into each group.
#[derive(Debug, Clone)]
pub struct NoisePolicy {
    pub mode: NoiseMode,
    /// Foreign categories drawn per group in multi-foreign mode (1..=3).
    pub foreign_category_count: usize,
    pub ratio: RatioSamplerConfig,
    pub seed: u64,
}

impl NoisePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mode == NoiseMode::MultiForeign && !(1..=3).contains(&self.foreign_category_count)
        {
            return Err(Error::Contract(format!(
                "foreign_category_count {} outside 1..=3",
                self.foreign_category_count
            )));
        }
        let (lo, hi) = self.ratio.bounds();
        if !(0.0..0.5).contains(&lo) || !(0.0..0.5).contains(&hi) || lo > hi {
            return Err(Error::Contract(format!(
                "ratio bounds [{lo}, {hi}] must satisfy 0 <= min <= max < 0.5"
            )));
        }
        Ok(())
    }
}

/// Draw one expansion ratio (noise count / base count) within the bounds.
fn sample_ratio(cfg: &RatioSamplerConfig, rng: &mut ChaCha8Rng) -> f64 {
    match *cfg {
        RatioSamplerConfig::Uniform { min, max } => rng.gen_range(min..=max),
        RatioSamplerConfig::Concentrated { p, sigma, min, max } => {
            truncated_normal(p, sigma, min, max, rng)
        }
        RatioSamplerConfig::Bimodal { p1, p2, sigma, min, max } => {
            let center = if rng.gen_bool(0.5) { p1 } else { p2 };
            truncated_normal(center, sigma, min, max, rng)
        }
    }
}

fn truncated_normal(mean: f64, sigma: f64, min: f64, max: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma <= 0.0 {
        return mean.clamp(min, max);
    }
    let dist = Normal::new(mean, sigma).expect("sigma > 0");
    for _ in 0..1000 {
        let v = dist.sample(rng);
        if (min..=max).contains(&v) {
            return v;
        }
    }
    mean.clamp(min, max)
}

/// Largest-remainder rounding of nonnegative quotas to integers summing to
/// `target`, respecting per-index caps.
fn largest_remainder(quotas: &[f64], target: usize, caps: &[usize]) -> Result<Vec<usize>> {
    let cap_sum: usize = caps.iter().sum();
    if cap_sum < target {
        return Err(Error::Contract(format!(
            "target_total {target} exceeds the {cap_sum} injectable images"
        )));
    }
    let total_quota: f64 = quotas.iter().sum();
    let scaled: Vec<f64> = if total_quota > 0.0 {
        quotas.iter().map(|q| q * target as f64 / total_quota).collect()
    } else {
        vec![target as f64 / quotas.len() as f64; quotas.len()]
    };
    let mut counts: Vec<usize> = scaled
        .iter()
        .zip(caps.iter())
        .map(|(&q, &cap)| (q.floor() as usize).min(cap))
        .collect();
    // hand out the remainder by descending fractional part, skipping capped
    // groups; iterate because capping can free up remainder
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    while assigned < target {
        let mut progressed = false;
        for &i in &order {
            if assigned == target {
                break;
            }
            if counts[i] < caps[i] {
                counts[i] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Contract("cannot reach target_total under caps".into()));
        }
    }
    Ok(counts)
}

/// Build an open-world manifest from a clean base. Zero masks for the
/// injected items are written under `zero_mask_dir`. Deterministic for a
/// fixed `(base, policy)`.
pub fn build_ow_dataset(
    base: &DatasetManifest,
    policy: &NoisePolicy,
    target_total: Option<usize>,
    zero_mask_dir: &Path,
    base_dir: &Path,
) -> Result<DatasetManifest> {
    policy.validate()?;
    base.validate_structure()?;
    if base.groups.iter().any(|g| g.items.iter().any(|i| i.is_noise)) {
        return Err(Error::Contract("base manifest already contains noise items".into()));
    }
    let n_cats = base.groups.len();
    let min_cats = match policy.mode {
        NoiseMode::SingleForeign => 2,
        NoiseMode::MultiForeign => policy.foreign_category_count + 1,
    };
    if n_cats < min_cats {
        return Err(Error::Contract(format!(
            "need at least {min_cats} categories, got {n_cats}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);

    // per-group noise counts
    let sizes: Vec<usize> = base.groups.iter().map(|g| g.items.len()).collect();
    let ratios: Vec<f64> = sizes.iter().map(|_| sample_ratio(&policy.ratio, &mut rng)).collect();
    let quotas: Vec<f64> = ratios.iter().zip(&sizes).map(|(r, &s)| r * s as f64).collect();
    // noise must stay a strict minority of the final group
    let caps: Vec<usize> = sizes.iter().map(|&s| s.saturating_sub(1)).collect();
    let counts: Vec<usize> = match target_total {
        Some(t) => largest_remainder(&quotas, t, &caps)?,
        None => quotas
            .iter()
            .zip(&caps)
            .map(|(&q, &cap)| (q.round() as usize).min(cap))
            .collect(),
    };

    std::fs::create_dir_all(zero_mask_dir)
        .map_err(|e| Error::io(zero_mask_dir, e))?;

    let mut groups = Vec::with_capacity(n_cats);
    for (gi, group) in base.groups.iter().enumerate() {
        let n_noise = counts[gi];
        // base items pass through unchanged except that relative paths are
        // resolved, so the output manifest stays valid wherever it is written
        let mut items: Vec<ManifestItem> = group
            .items
            .iter()
            .map(|it| ManifestItem {
                image_path: resolve_path(base_dir, &it.image_path),
                mask_path: resolve_path(base_dir, &it.mask_path),
                is_noise: it.is_noise,
                source_category: it.source_category.clone(),
            })
            .collect();
        if n_noise > 0 {
            let foreign_cats = draw_foreign_categories(base, gi, policy, n_noise, &mut rng);
            let alloc = allocate(n_noise, foreign_cats.len(), &mut rng);
            let mut running = 0usize;
            for (&fci, &take) in foreign_cats.iter().zip(alloc.iter()) {
                let source = &base.groups[fci];
                if source.items.len() < take {
                    return Err(Error::Contract(format!(
                        "group `{}` needs {take} noise images from `{}` which has only {}",
                        group.category,
                        source.category,
                        source.items.len()
                    )));
                }
                let mut pool: Vec<usize> = (0..source.items.len()).collect();
                pool.shuffle(&mut rng);
                for &pi in pool.iter().take(take) {
                    let src_item = &source.items[pi];
                    let (w, h) = image_size(&resolve_path(base_dir, &src_item.image_path))?;
                    let mask_name = format!(
                        "{}__{}__{running:03}.png",
                        sanitize_file(&group.category),
                        sanitize_file(&source.category)
                    );
                    let mask_path = zero_mask_dir.join(&mask_name);
                    write_mask_png(&Array2::<f64>::zeros((h, w)), &mask_path)?;
                    items.push(ManifestItem {
                        image_path: resolve_path(base_dir, &src_item.image_path),
                        mask_path,
                        is_noise: true,
                        source_category: source.category.clone(),
                    });
                    running += 1;
                }
            }
        }
        groups.push(GroupEntry { category: group.category.clone(), items });
    }

    Ok(DatasetManifest {
        source_dataset: format!("{}-ow", base.source_dataset),
        seed: policy.seed,
        groups,
    })
}

fn sanitize_file(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    Ok((w as usize, h as usize))
}

/// Pick the set of foreign categories for one group.
fn draw_foreign_categories(
    base: &DatasetManifest,
    group_idx: usize,
    policy: &NoisePolicy,
    n_noise: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut others: Vec<usize> =
        (0..base.groups.len()).filter(|&i| i != group_idx).collect();
    others.shuffle(rng);
    let want = match policy.mode {
        NoiseMode::SingleForeign => 1,
        // the items must span the drawn set, so never draw more categories
        // than items
        NoiseMode::MultiForeign => policy.foreign_category_count.min(n_noise).max(1),
    };
    others.truncate(want);
    others
}

/// Split `n` items over `cats` categories, at least one each.
fn allocate(n: usize, cats: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n >= cats && cats >= 1);
    let mut alloc = vec![1usize; cats];
    for _ in cats..n {
        alloc[rng.gen_range(0..cats)] += 1;
    }
    alloc
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupNoiseStats {
    pub category: String,
    pub base_count: usize,
    pub noise_count: usize,
    /// Noise fraction of the final group, `noise / (base + noise)`.
    pub noise_fraction: f64,
    /// Expansion ratio relative to the base, `noise / base`.
    pub expansion_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwReport {
    pub total_items: usize,
    pub total_noise: usize,
    pub groups: Vec<GroupNoiseStats>,
    /// Noise provenance histogram: source category -> count.
    pub foreign_histogram: BTreeMap<String, usize>,
}

/// Verify every open-world invariant: provenance flags, zero masks on disk,
/// minority ratios. Fails naming the offending item.
pub fn validate_ow_dataset(manifest: &DatasetManifest, manifest_dir: &Path) -> Result<OwReport> {
    manifest.validate_structure()?;
    let mut groups = Vec::new();
    let mut total_noise = 0usize;
    let mut histogram = BTreeMap::new();
    for group in &manifest.groups {
        let mut noise = 0usize;
        for item in &group.items {
            if !item.is_noise {
                continue;
            }
            noise += 1;
            *histogram.entry(item.source_category.clone()).or_insert(0) += 1;
            let mask_path = resolve_path(manifest_dir, &item.mask_path);
            let mask = crate::datamodel::load_mask_raw(&mask_path)?;
            if mask.iter().any(|&v| v != 0) {
                return Err(Error::Validation(format!(
                    "noise item {} has a nonzero mask {}",
                    item_id(&group.category, item),
                    mask_path.display()
                )));
            }
        }
        let base = group.items.len() - noise;
        let fraction = noise as f64 / group.items.len().max(1) as f64;
        if fraction >= 0.5 {
            return Err(Error::Validation(format!(
                "group `{}` noise fraction {fraction:.3} is not a minority",
                group.category
            )));
        }
        total_noise += noise;
        groups.push(GroupNoiseStats {
            category: group.category.clone(),
            base_count: base,
            noise_count: noise,
            noise_fraction: fraction,
            expansion_ratio: if base > 0 { noise as f64 / base as f64 } else { 0.0 },
        });
    }
    Ok(OwReport {
        total_items: manifest.total_items(),
        total_noise,
        groups,
        foreign_histogram: histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::write_manifest;

    /// Synthetic base: `cats` categories with `per_cat` tiny images each.
    fn synth_base(dir: &Path, cats: usize, per_cat: usize) -> DatasetManifest {
        let mut groups = Vec::new();
        for ci in 0..cats {
            let category = format!("cat{ci:02}");
            let mut items = Vec::new();
            for ii in 0..per_cat {
                let img = dir.join(format!("{category}_{ii}.png"));
                let msk = dir.join(format!("{category}_{ii}_m.png"));
                let mut buf = image::GrayImage::new(8, 8);
                buf.put_pixel((ii % 8) as u32, (ci % 8) as u32, image::Luma([200]));
                buf.save(&img).unwrap();
                let mut mask = image::GrayImage::new(8, 8);
                mask.put_pixel(2, 2, image::Luma([255]));
                mask.save(&msk).unwrap();
                items.push(ManifestItem {
                    image_path: img,
                    mask_path: msk,
                    is_noise: false,
                    source_category: category.clone(),
                });
            }
            groups.push(GroupEntry { category, items });
        }
        DatasetManifest { source_dataset: "synth".into(), seed: 0, groups }
    }

    fn policy(seed: u64, ratio: RatioSamplerConfig, mode: NoiseMode, fc: usize) -> NoisePolicy {
        NoisePolicy { mode, foreign_category_count: fc, ratio, seed }
    }

    #[test]
    fn fixed_ratio_gives_exact_counts_and_zero_masks() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 2, 100);
        let pol = policy(
            7,
            RatioSamplerConfig::Uniform { min: 0.18, max: 0.18 },
            NoiseMode::SingleForeign,
            1,
        );
        let ow = build_ow_dataset(&base, &pol, None, &tmp.path().join("zm"), tmp.path()).unwrap();
        for g in &ow.groups {
            let noise: Vec<_> = g.items.iter().filter(|i| i.is_noise).collect();
            assert_eq!(noise.len(), 18, "18% of 100");
            for item in &noise {
                let raw = crate::datamodel::load_mask_raw(&item.mask_path).unwrap();
                assert!(raw.iter().all(|&v| v == 0));
            }
        }
        let report = validate_ow_dataset(&ow, tmp.path()).unwrap();
        assert_eq!(report.total_noise, 36);
    }

    #[test]
    fn target_total_is_hit_exactly_and_rebuild_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 10, 20);
        let pol = policy(
            11,
            RatioSamplerConfig::Concentrated { p: 0.18, sigma: 0.06, min: 0.024, max: 0.375 },
            NoiseMode::SingleForeign,
            1,
        );
        let ow1 = build_ow_dataset(&base, &pol, Some(37), &tmp.path().join("zm1"), tmp.path()).unwrap();
        let total: usize =
            ow1.groups.iter().map(|g| g.items.iter().filter(|i| i.is_noise).count()).sum();
        assert_eq!(total, 37);

        let ow2 = build_ow_dataset(&base, &pol, Some(37), &tmp.path().join("zm1"), tmp.path()).unwrap();
        let p1 = tmp.path().join("m1.json");
        let p2 = tmp.path().join("m2.json");
        write_manifest(&ow1, &p1).unwrap();
        write_manifest(&ow2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn conservation_of_base_items() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 3, 6);
        let pol = policy(
            3,
            RatioSamplerConfig::Uniform { min: 0.1, max: 0.4 },
            NoiseMode::SingleForeign,
            1,
        );
        let ow = build_ow_dataset(&base, &pol, None, &tmp.path().join("zm"), tmp.path()).unwrap();
        for (bg, og) in base.groups.iter().zip(ow.groups.iter()) {
            let kept: Vec<_> = og.items.iter().filter(|i| !i.is_noise).collect();
            assert_eq!(kept.len(), bg.items.len());
            for (a, b) in bg.items.iter().zip(kept) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn multi_foreign_spans_the_drawn_category_set() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 6, 12);
        let pol = policy(
            5,
            RatioSamplerConfig::Uniform { min: 0.3, max: 0.4 },
            NoiseMode::MultiForeign,
            3,
        );
        let ow = build_ow_dataset(&base, &pol, None, &tmp.path().join("zm"), tmp.path()).unwrap();
        for g in &ow.groups {
            let mut sources: Vec<&str> =
                g.items.iter().filter(|i| i.is_noise).map(|i| i.source_category.as_str()).collect();
            let n_noise = sources.len();
            sources.sort();
            sources.dedup();
            if n_noise >= 3 {
                assert_eq!(sources.len(), 3, "noise must span exactly 3 foreign categories");
            }
            assert!(!sources.iter().any(|&s| s == g.category));
        }
    }

    #[test]
    fn validation_rejects_nonzero_noise_mask() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 2, 4);
        let pol = policy(
            1,
            RatioSamplerConfig::Uniform { min: 0.3, max: 0.3 },
            NoiseMode::SingleForeign,
            1,
        );
        let mut ow = build_ow_dataset(&base, &pol, None, &tmp.path().join("zm"), tmp.path()).unwrap();
        // sabotage one zero mask
        let bad = ow
            .groups
            .iter_mut()
            .flat_map(|g| g.items.iter_mut())
            .find(|i| i.is_noise)
            .unwrap();
        let mut buf = image::GrayImage::new(8, 8);
        buf.put_pixel(0, 0, image::Luma([255]));
        buf.save(&bad.mask_path).unwrap();
        let err = validate_ow_dataset(&ow, tmp.path()).unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");
    }

    #[test]
    fn clean_base_passes_with_zero_noise() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 2, 3);
        let report = validate_ow_dataset(&base, tmp.path()).unwrap();
        assert_eq!(report.total_noise, 0);
        assert!(report.groups.iter().all(|g| g.noise_count == 0));
    }

    #[test]
    fn bimodal_sampler_concentrates_at_both_ends() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = RatioSamplerConfig::Bimodal { p1: 0.05, p2: 0.40, sigma: 0.02, min: 0.0, max: 0.47 };
        let samples: Vec<f64> = (0..4000).map(|_| sample_ratio(&cfg, &mut rng)).collect();
        let near = |c: f64| samples.iter().filter(|&&v| (v - c).abs() < 0.06).count() as f64;
        let frac_lo = near(0.05) / samples.len() as f64;
        let frac_hi = near(0.40) / samples.len() as f64;
        // each mode holds ~half the mass (3 sigma of binomial ~ 0.024)
        assert!((frac_lo - 0.5).abs() < 0.05, "low mode mass {frac_lo}");
        assert!((frac_hi - 0.5).abs() < 0.05, "high mode mass {frac_hi}");
        let mid = samples.iter().filter(|&&v| (0.15..0.3).contains(&v)).count() as f64
            / samples.len() as f64;
        assert!(mid < 0.02, "valley between modes should be nearly empty, got {mid}");
    }

    #[test]
    fn ratio_bound_keeps_noise_minority() {
        let tmp = tempfile::tempdir().unwrap();
        let base = synth_base(tmp.path(), 4, 5);
        // max ratio pushes against the cap: counts must stay <= base - 1
        let pol = policy(
            9,
            RatioSamplerConfig::Uniform { min: 0.45, max: 0.49 },
            NoiseMode::SingleForeign,
            1,
        );
        let ow = build_ow_dataset(&base, &pol, Some(9), &tmp.path().join("zm"), tmp.path()).unwrap();
        let report = validate_ow_dataset(&ow, tmp.path()).unwrap();
        assert_eq!(report.total_noise, 9);
        for g in &report.groups {
            assert!(g.noise_fraction < 0.5);
        }
    }
}
