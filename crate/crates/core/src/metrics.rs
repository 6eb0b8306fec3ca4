//! CoSOD evaluation metrics: MAE, S-measure, max E-measure, max F-measure,
//! plus PR and ROC curves.
//!
//! Evaluation always runs at f64. Thresholds sweep the 256 integer levels of
//! the 8-bit quantized prediction: a pixel counts as positive at threshold t
//! when round(255 p) >= t.
//!
//! Degenerate ground truths (all-zero, which open-world sets produce by
//! construction) follow explicit conventions:
//! - S = 1 - mean(pred) when gt is empty, S = mean(pred) when gt is full;
//! - E at a threshold = 1 when the thresholded prediction is also empty,
//!   otherwise 1 - foreground fraction of the prediction;
//! - F: empty gt / empty pred -> 1, empty gt / nonempty pred -> 0,
//!   nonempty gt / empty pred -> 0.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{item_id, resolve_path, DatasetManifest, SaliencyMap};
use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Aggregated metrics for a dataset (or a single image).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub f_measure_max: f64,
    /// 256 (precision, recall) pairs, macro-averaged over images.
    pub pr_curve: Vec<(f64, f64)>,
    /// 256 (fpr, tpr) pairs, pixel-pooled over the dataset.
    pub roc_curve: Vec<(f64, f64)>,
}

/// Per-image scalar metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub f_measure_max: f64,
}

/// Quantize a prediction in [0, 1] to 8-bit levels.
pub fn quantize8(pred: &Array2<f64>) -> Array2<u8> {
    pred.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

// Sequential accumulation in iteration order: `mae` and the degenerate
// S-measure branch must see bit-identical means so that MAE + S = 1 exactly
// on all-zero ground truths.
fn shared_mean(pred: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for &p in pred.iter() {
        s += p;
    }
    s / pred.len() as f64
}

/// Mean absolute error.
pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "mae: shape mismatch");
    let mut s = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        s += (p - g).abs();
    }
    s / pred.len() as f64
}

/// Confusion counts at all 256 thresholds, from high threshold to low.
struct Sweep {
    /// tp[t], fp[t] for t = 0..=255 (positive means pred8 >= t)
    tp: [u64; THRESHOLDS],
    fp: [u64; THRESHOLDS],
    pos_gt: u64,
    neg_gt: u64,
}

fn sweep_counts(pred8: &Array2<u8>, gt: &Array2<f64>) -> Sweep {
    let mut hist_fg = [0u64; THRESHOLDS];
    let mut hist_bg = [0u64; THRESHOLDS];
    let mut pos_gt = 0u64;
    for (&p, &g) in pred8.iter().zip(gt.iter()) {
        if g > 0.5 {
            hist_fg[p as usize] += 1;
            pos_gt += 1;
        } else {
            hist_bg[p as usize] += 1;
        }
    }
    let neg_gt = pred8.len() as u64 - pos_gt;
    let mut tp = [0u64; THRESHOLDS];
    let mut fp = [0u64; THRESHOLDS];
    let mut run_tp = 0u64;
    let mut run_fp = 0u64;
    for t in (0..THRESHOLDS).rev() {
        run_tp += hist_fg[t];
        run_fp += hist_bg[t];
        tp[t] = run_tp;
        fp[t] = run_fp;
    }
    Sweep { tp, fp, pos_gt, neg_gt }
}

/// Precision, recall and F at one threshold under the degenerate conventions.
fn prf_at(tp: u64, fp: u64, pos_gt: u64, beta_sq: f64) -> (f64, f64, f64) {
    let pred_empty = tp + fp == 0;
    let gt_empty = pos_gt == 0;
    match (gt_empty, pred_empty) {
        (true, true) => (1.0, 1.0, 1.0),
        (true, false) => (0.0, 1.0, 0.0),
        (false, true) => (1.0, 0.0, 0.0),
        (false, false) => {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / pos_gt as f64;
            let denom = beta_sq * p + r;
            let f = if denom > 0.0 { (1.0 + beta_sq) * p * r / denom } else { 0.0 };
            (p, r, f)
        }
    }
}

/// Max F over 256 thresholds plus the (precision, recall) curve.
pub fn f_measure_max(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    beta_sq: f64,
) -> (f64, Vec<(f64, f64)>) {
    assert_eq!(pred.dim(), gt.dim(), "f_measure: shape mismatch");
    let sweep = sweep_counts(&quantize8(pred), gt);
    let mut best = 0.0f64;
    let mut curve = Vec::with_capacity(THRESHOLDS);
    for t in 0..THRESHOLDS {
        let (p, r, f) = prf_at(sweep.tp[t], sweep.fp[t], sweep.pos_gt, beta_sq);
        best = best.max(f);
        curve.push((p, r));
    }
    (best, curve)
}

/// Structure measure: `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "s_measure: shape mismatch");
    let y = shared_mean(gt);
    if y == 0.0 {
        return 1.0 - shared_mean(pred);
    }
    if y == 1.0 {
        return shared_mean(pred);
    }
    let q = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
    q.max(0.0)
}

fn mean_std_where(pred: &Array2<f64>, gt: &Array2<f64>, fg: bool) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if (g > 0.5) == fg {
            n += 1;
            sum += p;
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0, 1);
    }
    let mut var = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if (g > 0.5) == fg {
            var += (p - mean) * (p - mean);
        }
    }
    (mean, (var / (n - 1) as f64).sqrt(), n)
}

fn object_score(x: f64, sigma: f64) -> f64 {
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    // foreground: prediction inside gt; background: 1 - prediction outside gt
    let (x_fg, sig_fg, _) = mean_std_where(pred, gt, true);
    let inv = pred.mapv(|v| 1.0 - v);
    let (x_bg, sig_bg, _) = mean_std_where(&inv, gt, false);
    let u = shared_mean(gt);
    u * object_score(x_fg, sig_fg) + (1.0 - u) * object_score(x_bg, sig_bg)
}

/// Centroid of the ground truth as 1-based (row, col), rounded to nearest.
fn centroid(gt: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let total = gt.sum();
    let mut row_acc = 0.0;
    let mut col_acc = 0.0;
    for ((y, x), &g) in gt.indexed_iter() {
        if g > 0.5 {
            row_acc += (y + 1) as f64;
            col_acc += (x + 1) as f64;
        }
    }
    let cy = (row_acc / total).round() as usize;
    let cx = (col_acc / total).round() as usize;
    (cy.clamp(1, h), cx.clamp(1, w))
}

fn region_ssim(pred: ndarray::ArrayView2<'_, f64>, gt: ndarray::ArrayView2<'_, f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.sum() / nf;
    let y = gt.sum() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    sx /= denom;
    sy /= denom;
    sxy /= denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (h, w) = gt.dim();
    let (cy, cx) = centroid(gt);
    let area = (h * w) as f64;
    // quadrant split: rows [0, cy) / [cy, h), cols [0, cx) / [cx, w)
    let mut q = 0.0;
    for (rows, cols) in [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ] {
        let weight = (rows.len() * cols.len()) as f64 / area;
        if weight == 0.0 {
            continue;
        }
        let p = pred.slice(ndarray::s![rows.clone(), cols.clone()]);
        let g = gt.slice(ndarray::s![rows, cols]);
        q += weight * region_ssim(p, g);
    }
    q
}

/// Enhanced-alignment value for one binary prediction/gt pair, computed from
/// confusion counts (the alignment matrix takes only four distinct values).
fn e_at(tp: u64, fp: u64, pos_gt: u64, neg_gt: u64) -> f64 {
    let total = (pos_gt + neg_gt) as f64;
    let fn_ = pos_gt - tp;
    let tn = neg_gt - fp;
    if pos_gt == 0 {
        // empty gt convention
        return if tp + fp == 0 { 1.0 } else { 1.0 - (tp + fp) as f64 / total };
    }
    if neg_gt == 0 {
        // full gt: enhanced matrix reduces to the prediction itself
        return tp as f64 / total;
    }
    let mu_g = pos_gt as f64 / total;
    let mu_f = (tp + fp) as f64 / total;
    let d_gt = [1.0 - mu_g, -mu_g]; // fg, bg
    let d_fm = [1.0 - mu_f, -mu_f]; // positive, negative
    let enhance = |a: f64, b: f64| {
        let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        (align + 1.0) * (align + 1.0) / 4.0
    };
    (tp as f64 * enhance(d_gt[0], d_fm[0])
        + fn_ as f64 * enhance(d_gt[0], d_fm[1])
        + fp as f64 * enhance(d_gt[1], d_fm[0])
        + tn as f64 * enhance(d_gt[1], d_fm[1]))
        / total
}

/// Max enhanced-alignment measure over 256 thresholds, plus the per-threshold
/// curve.
pub fn e_measure_max(pred: &Array2<f64>, gt: &Array2<f64>) -> (f64, Vec<f64>) {
    assert_eq!(pred.dim(), gt.dim(), "e_measure: shape mismatch");
    let sweep = sweep_counts(&quantize8(pred), gt);
    let mut best = 0.0f64;
    let mut curve = Vec::with_capacity(THRESHOLDS);
    for t in 0..THRESHOLDS {
        let e = e_at(sweep.tp[t], sweep.fp[t], sweep.pos_gt, sweep.neg_gt);
        best = best.max(e);
        curve.push(e);
    }
    (best, curve)
}

/// Evaluate every prediction in `pred_dir` against the manifest's ground
/// truths. Returns dataset-level metrics plus per-image rows.
pub fn evaluate_dataset(
    pred_dir: &Path,
    manifest: &DatasetManifest,
    manifest_dir: &Path,
) -> Result<(EvalResult, Vec<ImageEval>)> {
    let mut missing = Vec::new();
    let mut jobs = Vec::new();
    for group in &manifest.groups {
        for item in &group.items {
            let id = item_id(&group.category, item);
            let pred_path = pred_dir.join(format!("{id}.png"));
            if !pred_path.exists() {
                missing.push(id.clone());
            } else {
                jobs.push((id, pred_path, resolve_path(manifest_dir, &item.mask_path)));
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingPredictions { ids: missing });
    }
    if jobs.is_empty() {
        return Err(Error::Validation("manifest contains no items".into()));
    }

    let mut rows = Vec::with_capacity(jobs.len());
    let mut pr_acc = vec![(0.0f64, 0.0f64); THRESHOLDS];
    let mut roc_tp = vec![0u64; THRESHOLDS];
    let mut roc_fp = vec![0u64; THRESHOLDS];
    let mut pos_total = 0u64;
    let mut neg_total = 0u64;
    let (mut mae_sum, mut s_sum, mut e_sum, mut f_sum) = (0.0, 0.0, 0.0, 0.0);

    for (id, pred_path, mask_path) in &jobs {
        let pred = SaliencyMap::<f64>::read_png(pred_path, id.clone())?;
        let (h, w) = pred.values.dim();
        // ground truth is brought to the prediction's resolution
        let gt = load_mask_at(mask_path, h, w)?;
        let m = mae(&pred.values, &gt);
        let s = s_measure(&pred.values, &gt, DEFAULT_ALPHA);
        let (e, _) = e_measure_max(&pred.values, &gt);
        let (f, pr) = f_measure_max(&pred.values, &gt, DEFAULT_BETA_SQ);
        mae_sum += m;
        s_sum += s;
        e_sum += e;
        f_sum += f;
        for (acc, (p, r)) in pr_acc.iter_mut().zip(pr.iter()) {
            acc.0 += p;
            acc.1 += r;
        }
        let sweep = sweep_counts(&quantize8(&pred.values), &gt);
        for t in 0..THRESHOLDS {
            roc_tp[t] += sweep.tp[t];
            roc_fp[t] += sweep.fp[t];
        }
        pos_total += sweep.pos_gt;
        neg_total += sweep.neg_gt;
        rows.push(ImageEval {
            id: id.clone(),
            mae: m,
            s_measure: s,
            e_measure_max: e,
            f_measure_max: f,
        });
    }

    let n = rows.len() as f64;
    let pr_curve: Vec<(f64, f64)> = pr_acc.iter().map(|&(p, r)| (p / n, r / n)).collect();
    let roc_curve: Vec<(f64, f64)> = (0..THRESHOLDS)
        .map(|t| {
            let tpr = if pos_total > 0 { roc_tp[t] as f64 / pos_total as f64 } else { 1.0 };
            let fpr = if neg_total > 0 { roc_fp[t] as f64 / neg_total as f64 } else { 0.0 };
            (fpr, tpr)
        })
        .collect();
    let result = EvalResult {
        mae: mae_sum / n,
        s_measure: s_sum / n,
        e_measure_max: e_sum / n,
        f_measure_max: f_sum / n,
        pr_curve,
        roc_curve,
    };
    Ok((result, rows))
}

fn load_mask_at(path: &Path, h: usize, w: usize) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let resized =
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Nearest);
    let mut out = Array2::<f64>::zeros((h, w));
    for (x, y, p) in resized.enumerate_pixels() {
        out[[y as usize, x as usize]] = if p.0[0] >= 128 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Write the per-image CSV: `id, mae, s, e_max, f_max`.
pub fn write_per_image_csv(rows: &[ImageEval], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::Validation(format!("cannot write {}: {e}", path.display()))
    })?;
    wtr.write_record(["id", "mae", "s", "e_max", "f_max"]).ok();
    for r in rows {
        wtr.write_record([
            r.id.clone(),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.s_measure),
            format!("{:.6}", r.e_measure_max),
            format!("{:.6}", r.f_measure_max),
        ])
        .ok();
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Write the curves CSV: `threshold, precision, recall, fpr, tpr`.
pub fn write_curves_csv(result: &EvalResult, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::Validation(format!("cannot write {}: {e}", path.display()))
    })?;
    wtr.write_record(["threshold", "precision", "recall", "fpr", "tpr"]).ok();
    for t in 0..THRESHOLDS {
        let (p, r) = result.pr_curve[t];
        let (fpr, tpr) = result.roc_curve[t];
        wtr.write_record([
            t.to_string(),
            format!("{p:.6}"),
            format!("{r:.6}"),
            format!("{fpr:.6}"),
            format!("{tpr:.6}"),
        ])
        .ok();
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Write the scalar summary as JSON.
pub fn write_summary(result: &EvalResult, path: &Path) -> Result<()> {
    let mut doc = BTreeMap::new();
    doc.insert("mae", result.mae);
    doc.insert("s_measure", result.s_measure);
    doc.insert("e_measure_max", result.e_measure_max);
    doc.insert("f_measure_max", result.f_measure_max);
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{write_manifest, write_mask_png, GroupEntry, ManifestItem};
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // -----------------------------------------------------------------
    // Independent oracle: literal full-matrix implementations of the
    // structure measure and the enhanced-alignment measure.
    // -----------------------------------------------------------------

    fn s_measure_oracle(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
        let y = gt.sum() / gt.len() as f64;
        if y == 0.0 {
            return 1.0 - pred.sum() / pred.len() as f64;
        }
        if y == 1.0 {
            return pred.sum() / pred.len() as f64;
        }
        let s_o = {
            let fg: Vec<f64> = pred
                .iter()
                .zip(gt.iter())
                .filter(|(_, &g)| g > 0.5)
                .map(|(&p, _)| p)
                .collect();
            let bg: Vec<f64> = pred
                .iter()
                .zip(gt.iter())
                .filter(|(_, &g)| g <= 0.5)
                .map(|(&p, _)| 1.0 - p)
                .collect();
            let score = |v: &[f64]| -> f64 {
                if v.is_empty() {
                    return 0.0;
                }
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let sd = if v.len() > 1 {
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
            };
            y * score(&fg) + (1.0 - y) * score(&bg)
        };
        let s_r = {
            let (h, w) = gt.dim();
            let total = gt.sum();
            let mut ry = 0.0;
            let mut rx = 0.0;
            for ((i, j), &g) in gt.indexed_iter() {
                if g > 0.5 {
                    ry += (i + 1) as f64;
                    rx += (j + 1) as f64;
                }
            }
            let cy = ((ry / total).round() as usize).clamp(1, h);
            let cx = ((rx / total).round() as usize).clamp(1, w);
            let ssim = |pp: Vec<f64>, gg: Vec<f64>| -> f64 {
                let n = pp.len();
                if n == 0 {
                    return 0.0;
                }
                let xm = pp.iter().sum::<f64>() / n as f64;
                let ym = gg.iter().sum::<f64>() / n as f64;
                let d = if n > 1 { (n - 1) as f64 } else { 1.0 };
                let sx = pp.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / d;
                let sy = gg.iter().map(|v| (v - ym) * (v - ym)).sum::<f64>() / d;
                let sxy = pp
                    .iter()
                    .zip(gg.iter())
                    .map(|(&a, &b)| (a - xm) * (b - ym))
                    .sum::<f64>()
                    / d;
                let alpha = 4.0 * xm * ym * sxy;
                let beta = (xm * xm + ym * ym) * (sx + sy);
                if alpha != 0.0 {
                    alpha / (beta + f64::EPSILON)
                } else if beta == 0.0 {
                    1.0
                } else {
                    0.0
                }
            };
            let mut acc = 0.0;
            for (r0, r1, c0, c1) in
                [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)]
            {
                let mut pp = Vec::new();
                let mut gg = Vec::new();
                for i in r0..r1 {
                    for j in c0..c1 {
                        pp.push(pred[[i, j]]);
                        gg.push(gt[[i, j]]);
                    }
                }
                let weight = pp.len() as f64 / (h * w) as f64;
                if !pp.is_empty() {
                    acc += weight * ssim(pp, gg);
                }
            }
            acc
        };
        (0.5 * s_o + 0.5 * s_r).max(0.0)
    }

    fn e_max_oracle(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
        let pred8 = quantize8(pred);
        let mut best = 0.0f64;
        for t in 0..=255u16 {
            let fm: Array2<f64> =
                pred8.mapv(|v| if (v as u16) >= t { 1.0 } else { 0.0 });
            let gsum = gt.sum();
            let e = if gsum == 0.0 {
                if fm.sum() == 0.0 { 1.0 } else { 1.0 - fm.sum() / fm.len() as f64 }
            } else if gsum == gt.len() as f64 {
                fm.sum() / fm.len() as f64
            } else {
                let mg = gt.sum() / gt.len() as f64;
                let mf = fm.sum() / fm.len() as f64;
                let mut acc = 0.0;
                for (&g, &f) in gt.iter().zip(fm.iter()) {
                    let dg = g - mg;
                    let df = f - mf;
                    let align = 2.0 * dg * df / (dg * dg + df * df + f64::EPSILON);
                    acc += (align + 1.0) * (align + 1.0) / 4.0;
                }
                acc / gt.len() as f64
            };
            best = best.max(e);
        }
        best
    }

    fn rand_case(seed: u64, side: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = Array2::from_shape_fn((side, side), |_| rng.gen_range(0.0..1.0));
        let gt = Array2::from_shape_fn((side, side), |_| {
            if rng.gen_bool(0.4) { 1.0 } else { 0.0 }
        });
        (pred, gt)
    }

    #[test]
    fn s_and_e_agree_with_dual_implementation_oracle() {
        for seed in 0..50u64 {
            let (pred, gt) = rand_case(seed, 8);
            let s = s_measure(&pred, &gt, 0.5);
            let so = s_measure_oracle(&pred, &gt);
            assert!((s - so).abs() < 1e-6, "seed {seed}: S {s} vs oracle {so}");
            let (e, _) = e_measure_max(&pred, &gt);
            let eo = e_max_oracle(&pred, &gt);
            assert!((e - eo).abs() < 1e-6, "seed {seed}: E {e} vs oracle {eo}");
        }
    }

    #[test]
    fn mae_hand_values() {
        let pred = arr2(&[[0.2, 0.8], [0.5, 0.0]]);
        let gt = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!((mae(&pred, &gt) - 0.225).abs() < 1e-12);
        assert_eq!(mae(&gt, &gt), 0.0);
        let inv = gt.mapv(|v| 1.0 - v);
        assert_eq!(mae(&inv, &gt), 1.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = arr2(&[
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(mae(&gt, &gt), 0.0);
        let (f, _) = f_measure_max(&gt, &gt, DEFAULT_BETA_SQ);
        assert!((f - 1.0).abs() < 1e-9);
        let (e, _) = e_measure_max(&gt, &gt);
        assert!((e - 1.0).abs() < 1e-6);
        let s = s_measure(&gt, &gt, 0.5);
        assert!((s - 1.0).abs() < 1e-6, "S = {s}");
    }

    #[test]
    fn f_at_half_precision_full_recall_matches_formula() {
        // pred marks two pixels at 1.0; gt covers one of them: at every
        // nonzero threshold P = 0.5, R = 1.0
        let pred = arr2(&[[1.0, 1.0], [0.0, 0.0]]);
        let gt = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let (f, curve) = f_measure_max(&pred, &gt, 0.3);
        let expect = 1.3 * 0.5 * 1.0 / (0.3 * 0.5 + 1.0);
        assert!((f - expect).abs() < 1e-4, "F {f} vs {expect}");
        assert!((expect - 0.5652).abs() < 1e-4);
        // the curve at threshold 255 reads exactly (0.5, 1.0)
        assert_eq!(curve[255], (0.5, 1.0));
    }

    #[test]
    fn empty_gt_conventions() {
        let zero = Array2::<f64>::zeros((4, 4));
        // empty/empty -> 1 for F and E, S = 1, MAE = 0
        let (f, _) = f_measure_max(&zero, &zero, 0.3);
        assert_eq!(f, 1.0);
        let (e, _) = e_measure_max(&zero, &zero);
        assert_eq!(e, 1.0);
        assert_eq!(s_measure(&zero, &zero, 0.5), 1.0);
        // nonempty pred on empty gt -> F = 0
        let mut pred = zero.clone();
        pred[[1, 1]] = 1.0;
        let (f, _) = f_measure_max(&pred, &zero, 0.3);
        assert_eq!(f, 0.0);
        // MAE + S = 1 exactly on empty gt
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
            let m = mae(&p, &zero);
            let s = s_measure(&p, &zero, 0.5);
            assert_eq!(m + s, 1.0, "MAE + S must be exactly 1 on empty gt");
        }
    }

    #[test]
    fn inverted_prediction_is_the_worst_alignment() {
        // balanced gt: half foreground
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        let inv = gt.mapv(|v| 1.0 - v);
        let (_, curve) = e_measure_max(&inv, &gt);
        // threshold 128 binarizes to exactly the complement
        let e_complement = curve[128];
        assert!(e_complement < 1e-9, "E at the complement: {e_complement}");
        assert!(curve.iter().all(|&e| e >= e_complement - 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn metric_ranges_and_monotonicity(seed in 0u64..10_000) {
            let (pred, gt) = rand_case(seed, 6);
            let m = mae(&pred, &gt);
            let s = s_measure(&pred, &gt, 0.5);
            let (e, _) = e_measure_max(&pred, &gt);
            let (f, curve) = f_measure_max(&pred, &gt, 0.3);
            for v in [m, s, e, f] {
                prop_assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
            }
            // recall non-increasing in threshold; F never beats f_max
            let mut last_r = f64::INFINITY;
            for &(p, r) in &curve {
                prop_assert!(r <= last_r + 1e-12);
                last_r = r;
                let denom = 0.3 * p + r;
                let f_t = if denom > 0.0 { 1.3 * p * r / denom } else { 0.0 };
                prop_assert!(f_t <= f + 1e-12);
            }
        }
    }

    // -----------------------------------------------------------------
    // dataset-level evaluation
    // -----------------------------------------------------------------

    fn write_gray(path: &std::path::Path, values: &Array2<f64>) {
        SaliencyMap::new(values.clone(), "x").unwrap().write_png(path).unwrap();
    }

    fn tiny_manifest(
        dir: &std::path::Path,
        entries: &[(&str, Vec<(&str, Array2<f64>)>)],
    ) -> DatasetManifest {
        let mut groups = Vec::new();
        for (cat, items) in entries {
            let mut list = Vec::new();
            for (name, gt) in items {
                let img_path = dir.join(format!("{cat}_{name}_img.png"));
                let mask_path = dir.join(format!("{cat}_{name}_mask.png"));
                write_gray(&img_path, gt); // image content irrelevant here
                write_mask_png(gt, &mask_path).unwrap();
                list.push(ManifestItem {
                    image_path: img_path,
                    mask_path,
                    is_noise: false,
                    source_category: cat.to_string(),
                });
            }
            groups.push(GroupEntry { category: cat.to_string(), items: list });
        }
        DatasetManifest { source_dataset: "tiny".into(), seed: 0, groups }
    }

    #[test]
    fn dataset_macro_average_and_missing_predictions() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let gt = Array2::from_shape_fn((4, 4), |(y, x)| if y == x { 1.0 } else { 0.0 });
        let manifest = tiny_manifest(dir, &[("cats", vec![("a", gt.clone()), ("b", gt.clone())])]);
        write_manifest(&manifest, &dir.join("manifest.json")).unwrap();

        let pred_dir = dir.join("preds");
        std::fs::create_dir_all(&pred_dir).unwrap();
        // one perfect, one off-by-constant: mae 0 and mae 0.25
        write_gray(&pred_dir.join(format!("{}.png", item_id("cats", &manifest.groups[0].items[0]))), &gt);
        let off = gt.mapv(|v| (v - 0.25f64).abs());
        write_gray(&pred_dir.join(format!("{}.png", item_id("cats", &manifest.groups[0].items[1]))), &off);

        let (res, rows) = evaluate_dataset(&pred_dir, &manifest, dir).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mae - 0.0).abs() < 1e-6);
        assert!((rows[1].mae - 0.25).abs() < 2e-3); // 8-bit quantized write/read
        assert!((res.mae - (rows[0].mae + rows[1].mae) / 2.0).abs() < 1e-12);

        // remove one prediction -> error naming the absent id
        let missing_id = item_id("cats", &manifest.groups[0].items[1]);
        std::fs::remove_file(pred_dir.join(format!("{missing_id}.png"))).unwrap();
        let err = evaluate_dataset(&pred_dir, &manifest, dir).unwrap_err();
        match err {
            Error::MissingPredictions { ids } => assert_eq!(ids, vec![missing_id]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ow_scenario_noise_suppression_scores_strictly_better() {
        // two relevant images + one noise image with empty gt; compare
        // noise predicted empty vs noise predicted full
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { 1.0 } else { 0.0 });
        let zero = Array2::<f64>::zeros((4, 4));

        let img = dir.join("n_img.png");
        write_gray(&img, &zero);
        let zmask = dir.join("n_mask.png");
        write_mask_png(&zero, &zmask).unwrap();
        let mut manifest = tiny_manifest(dir, &[("dogs", vec![("a", gt.clone()), ("b", gt.clone())])]);
        manifest.groups[0].items.push(ManifestItem {
            image_path: img,
            mask_path: zmask,
            is_noise: true,
            source_category: "cats".into(),
        });

        let run = |noise_pred: &Array2<f64>| {
            let pred_dir = tmp.path().join(format!("p{}", noise_pred.sum() as usize));
            std::fs::create_dir_all(&pred_dir).unwrap();
            for item in &manifest.groups[0].items {
                let id = item_id("dogs", item);
                let p = if item.is_noise { noise_pred } else { &gt };
                write_gray(&pred_dir.join(format!("{id}.png")), p);
            }
            evaluate_dataset(&pred_dir, &manifest, dir).unwrap().0
        };
        let good = run(&zero);
        let ones = Array2::<f64>::ones((4, 4));
        let bad = run(&ones);
        assert!(good.mae < bad.mae);
        assert!(good.s_measure > bad.s_measure);
        assert!(good.e_measure_max > bad.e_measure_max);
        assert!(good.f_measure_max > bad.f_measure_max);
    }
}
