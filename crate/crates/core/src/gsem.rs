//! Group selective exchange-masking: difficulty scoring through Brownian
//! distance covariance plus a binary overlap measure, and the swap of the
//! hardest images between two groups with all-zero replacement labels.
//!
//! Everything here is pure array math outside the autodiff tape: difficulty
//! is a discrete, non-differentiated selection step.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::config::HardnessOrder;
use crate::datamodel::{ImageGroup, MaskGroup};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where a feature sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Backbone token grid `[N, c, h, w]`.
    Backbone,
    /// Channel-reduced single-plane features `[N, 1, h, w]`.
    BinaryReduced,
}

/// Spatially gridded features for a group, NCHW.
#[derive(Debug, Clone)]
pub struct FeatureSequence<T: Scalar> {
    pub values: Array4<T>,
    pub source: FeatureSource,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(values: Array4<T>, source: FeatureSource) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(FeatureSequence { values, source })
    }
}

/// Group consensus feature `[1, c, h, w]`.
#[derive(Debug, Clone)]
pub struct GroupConsensusFeature<T: Scalar> {
    pub values: Array4<T>,
}

/// Per-image difficulty scores for one group.
#[derive(Debug, Clone)]
pub struct DifficultyReport<T: Scalar> {
    /// Raw BDC dependence on the group consensus.
    pub bdc_scores: Vec<T>,
    /// Raw feature/ground-truth overlap.
    pub bin_scores: Vec<T>,
    /// Combined score actually used for selection.
    pub mixed: Vec<T>,
    pub mu: T,
}

/// Outcome of the exchange: both rewritten groups plus the swapped id pairs.
#[derive(Debug, Clone)]
pub struct ExchangeResult<T: Scalar> {
    pub group1: (ImageGroup<T>, MaskGroup<T>),
    pub group2: (ImageGroup<T>, MaskGroup<T>),
    /// `(id moved into group 1, id moved into group 2)` per swap.
    pub exchanged_ids: Vec<(String, String)>,
}

/// Mean over the group axis: `[N, c, h, w] -> [1, c, h, w]`.
pub fn group_consensus<T: Scalar>(features: &FeatureSequence<T>) -> Result<GroupConsensusFeature<T>> {
    let n = features.values.dim().0;
    if n == 0 {
        return Err(Error::Contract("group consensus of an empty group".into()));
    }
    let mean = features.values.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    Ok(GroupConsensusFeature { values: mean })
}

/// Pairwise Euclidean distance matrix between the rows of `[c, p]`.
fn distance_matrix<T: Scalar>(obs: &Array2<T>) -> Array2<T> {
    let c = obs.nrows();
    let mut d = Array2::<T>::zeros((c, c));
    for k in 0..c {
        for l in (k + 1)..c {
            let mut s = T::zero();
            for (a, b) in obs.row(k).iter().zip(obs.row(l).iter()) {
                let diff = *a - *b;
                s += diff * diff;
            }
            let dist = s.sqrt();
            d[[k, l]] = dist;
            d[[l, k]] = dist;
        }
    }
    d
}

/// Double-center a distance matrix: `a_kl = d_kl - rowmean_k - colmean_l +
/// grandmean`.
fn double_center<T: Scalar>(d: &Array2<T>) -> Array2<T> {
    let c = d.nrows();
    let cn = T::from_f64_c(c as f64);
    let row_means: Array1<T> = d.mean_axis(Axis(1)).unwrap();
    let col_means: Array1<T> = d.mean_axis(Axis(0)).unwrap();
    let grand = d.sum() / (cn * cn);
    let mut a = Array2::<T>::zeros((c, c));
    for k in 0..c {
        for l in 0..c {
            a[[k, l]] = d[[k, l]] - row_means[k] - col_means[l] + grand;
        }
    }
    a
}

/// BDC matrix of a set of observations plus its vectorized form.
///
/// The vector takes the upper triangle including the diagonal, scaling
/// off-diagonal entries by sqrt(2) so that the inner product of two such
/// vectors reproduces `tr(A^T B)`.
pub fn bdc_matrix<T: Scalar>(observations: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
    let c = observations.nrows();
    if c < 2 {
        return Err(Error::Contract(format!("bdc_matrix needs c >= 2 observations, got {c}")));
    }
    if observations.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bdc_matrix observations".into()));
    }
    let a = double_center(&distance_matrix(observations));
    let sqrt2 = T::from_f64_c(std::f64::consts::SQRT_2);
    let mut vec = Array1::<T>::zeros(c * (c + 1) / 2);
    let mut idx = 0;
    for k in 0..c {
        for l in k..c {
            vec[idx] = if k == l { a[[k, l]] } else { sqrt2 * a[[k, l]] };
            idx += 1;
        }
    }
    Ok((a, vec))
}

/// BDC dependence between two observation sets: `tr(A^T B)`.
pub fn bdc<T: Scalar>(value_x: &Array2<T>, value_y: &Array2<T>) -> Result<T> {
    if value_x.nrows() != value_y.nrows() {
        return Err(Error::Shape(format!(
            "bdc observation counts differ: {} vs {}",
            value_x.nrows(),
            value_y.nrows()
        )));
    }
    let (a, _) = bdc_matrix(value_x)?;
    let (b, _) = bdc_matrix(value_y)?;
    let mut rho = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        rho += *x * *y;
    }
    Ok(rho)
}

/// Reshape one image's `[c, h, w]` feature block into `[c, h*w]` channel
/// observations.
fn channels_of<T: Scalar>(block: ndarray::ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = block.dim();
    block.to_owned().into_shape_with_order((c, h * w)).unwrap()
}

/// Per-image BDC dependence on the group consensus (high = strong alignment).
pub fn bdc_scores<T: Scalar>(
    group_features: &FeatureSequence<T>,
    consensus: &GroupConsensusFeature<T>,
) -> Result<Vec<T>> {
    let (n, c, h, w) = group_features.values.dim();
    let (cn, cc, ch, cw) = consensus.values.dim();
    if cn != 1 || cc != c || ch != h || cw != w {
        return Err(Error::Shape("consensus shape does not match features".into()));
    }
    let cons_obs = channels_of(consensus.values.index_axis(Axis(0), 0));
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let obs = channels_of(group_features.values.index_axis(Axis(0), i));
        scores.push(bdc(&cons_obs, &obs)?);
    }
    Ok(scores)
}

/// Min-max normalize to [0, 1]; an all-equal vector maps to all zeros.
pub fn minmax_normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(hi > lo) {
        return vec![T::zero(); v.len()];
    }
    let span = hi - lo;
    v.iter().map(|&x| (x - lo) / span).collect()
}

/// Per-image overlap between channel-reduced features and the downsampled
/// ground truth (Hadamard product, summed over pixels).
///
/// Features are reduced by a channel mean followed by a per-image min-max to
/// [0, 1]; masks are average-pooled to the feature grid, keeping soft
/// coverage fractions.
pub fn binary_scores<T: Scalar>(
    group_features: &FeatureSequence<T>,
    masks: &MaskGroup<T>,
) -> Result<Vec<T>> {
    let (n, _c, h, w) = group_features.values.dim();
    let (mn, mh, mw) = masks.masks.dim();
    if mn != n {
        return Err(Error::Shape(format!("{mn} masks for {n} feature maps")));
    }
    if mh % h != 0 || mw % w != 0 {
        return Err(Error::Shape(format!(
            "mask size {mh}x{mw} is not a multiple of the feature grid {h}x{w}"
        )));
    }
    let (fy, fx) = (mh / h, mw / w);
    let pool_inv = T::one() / T::from_f64_c((fy * fx) as f64);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let reduced_raw = group_features
            .values
            .index_axis(Axis(0), i)
            .mean_axis(Axis(0))
            .unwrap();
        let flat: Vec<T> = reduced_raw.iter().copied().collect();
        let norm = minmax_normalize(&flat);
        let mask = masks.masks.index_axis(Axis(0), i);
        let mut score = T::zero();
        for y in 0..h {
            for x in 0..w {
                let mut pooled = T::zero();
                for dy in 0..fy {
                    for dx in 0..fx {
                        pooled += mask[[y * fy + dy, x * fx + dx]];
                    }
                }
                score += norm[y * w + x] * pooled * pool_inv;
            }
        }
        scores.push(score);
    }
    Ok(scores)
}

/// Combine the two raw score vectors into the mixed difficulty index.
pub fn mixed_difficulty<T: Scalar>(
    bdc_scores: &[T],
    bin_scores: &[T],
    mu: T,
    normalize: bool,
) -> Result<DifficultyReport<T>> {
    if bdc_scores.is_empty() {
        return Err(Error::Contract("mixed_difficulty on an empty group".into()));
    }
    if bdc_scores.len() != bin_scores.len() {
        return Err(Error::Shape(format!(
            "score length mismatch: {} vs {}",
            bdc_scores.len(),
            bin_scores.len()
        )));
    }
    let (nb, nn): (Vec<T>, Vec<T>) = if normalize {
        (minmax_normalize(bdc_scores), minmax_normalize(bin_scores))
    } else {
        (bdc_scores.to_vec(), bin_scores.to_vec())
    };
    let mixed: Vec<T> = nb.iter().zip(nn.iter()).map(|(&a, &b)| a + mu * b).collect();
    Ok(DifficultyReport {
        bdc_scores: bdc_scores.to_vec(),
        bin_scores: bin_scores.to_vec(),
        mixed,
        mu,
    })
}

/// Indices of the k hardest images under the configured ordering, stable
/// tie-break by index.
pub fn select_hardest<T: Scalar>(mixed: &[T], k: usize, order: HardnessOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mixed.len()).collect();
    idx.sort_by(|&a, &b| {
        let cmp = mixed[a].partial_cmp(&mixed[b]).expect("finite scores");
        match order {
            HardnessOrder::Low => cmp.then(a.cmp(&b)),
            HardnessOrder::High => cmp.reverse().then(a.cmp(&b)),
        }
    });
    idx.truncate(k);
    idx
}

/// Swap the k hardest images between two groups, giving every transplanted
/// image an all-zero mask. All non-exchanged pairs remain bit-identical.
pub fn select_exchange_mask<T: Scalar>(
    g1: (&ImageGroup<T>, &MaskGroup<T>),
    g2: (&ImageGroup<T>, &MaskGroup<T>),
    reports: (&DifficultyReport<T>, &DifficultyReport<T>),
    k: usize,
    order: HardnessOrder,
) -> Result<ExchangeResult<T>> {
    let n = g1.0.len();
    if g2.0.len() != n {
        return Err(Error::Contract(format!(
            "group sizes differ: {} vs {}",
            n,
            g2.0.len()
        )));
    }
    if k < 1 {
        return Err(Error::Contract("exchange needs k >= 1".into()));
    }
    if 2 * k >= n {
        return Err(Error::Contract(format!(
            "k = {k} violates k < N/2 with N = {n}: noise must stay a minority"
        )));
    }
    if g1.0.category == g2.0.category {
        return Err(Error::Contract(format!(
            "exchange requires distinct categories, both are `{}`",
            g1.0.category
        )));
    }
    if reports.0.mixed.len() != n || reports.1.mixed.len() != n {
        return Err(Error::Shape("difficulty report length mismatch".into()));
    }
    if !g1.1.aligned_with(g1.0) || !g2.1.aligned_with(g2.0) {
        return Err(Error::Validation("mask ids are not aligned with image ids".into()));
    }

    let sel1 = select_hardest(&reports.0.mixed, k, order);
    let sel2 = select_hardest(&reports.1.mixed, k, order);

    let mut out1_img = g1.0.clone();
    let mut out1_msk = g1.1.clone();
    let mut out2_img = g2.0.clone();
    let mut out2_msk = g2.1.clone();
    let mut exchanged = Vec::with_capacity(k);
    for j in 0..k {
        let (s1, s2) = (sel1[j], sel2[j]);
        // image from group 2 takes the selected slot of group 1
        out1_img
            .images
            .index_axis_mut(Axis(0), s1)
            .assign(&g2.0.images.index_axis(Axis(0), s2));
        out1_img.ids[s1] = g2.0.ids[s2].clone();
        out1_msk.masks.index_axis_mut(Axis(0), s1).fill(T::zero());
        out1_msk.ids[s1] = g2.0.ids[s2].clone();
        // and vice versa
        out2_img
            .images
            .index_axis_mut(Axis(0), s2)
            .assign(&g1.0.images.index_axis(Axis(0), s1));
        out2_img.ids[s2] = g1.0.ids[s1].clone();
        out2_msk.masks.index_axis_mut(Axis(0), s2).fill(T::zero());
        out2_msk.ids[s2] = g1.0.ids[s1].clone();
        exchanged.push((g2.0.ids[s2].clone(), g1.0.ids[s1].clone()));
    }

    Ok(ExchangeResult {
        group1: (out1_img, out1_msk),
        group2: (out2_img, out2_msk),
        exchanged_ids: exchanged,
    })
}

// ---------------------------------------------------------------------------
// Difficulty sidecar (score-difficulty CLI output)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DifficultySidecarEntry {
    pub id: String,
    pub bdc: f64,
    pub bin: f64,
    pub mixed: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DifficultySidecar {
    pub category: String,
    pub mu: f64,
    pub entries: Vec<DifficultySidecarEntry>,
}

impl DifficultySidecar {
    pub fn from_report<T: Scalar>(
        category: &str,
        ids: &[String],
        report: &DifficultyReport<T>,
    ) -> Self {
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, id)| DifficultySidecarEntry {
                id: id.clone(),
                bdc: report.bdc_scores[i].to_f64_c(),
                bin: report.bin_scores[i].to_f64_c(),
                mixed: report.mixed[i].to_f64_c(),
            })
            .collect();
        DifficultySidecar {
            category: category.to_string(),
            mu: report.mu.to_f64_c(),
            entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array4};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(values: Array4<f64>) -> FeatureSequence<f64> {
        FeatureSequence::new(values, FeatureSource::Backbone).unwrap()
    }

    fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Array4::from_shape_vec(shape, data).unwrap()
    }

    fn group(n: usize, h: usize, category: &str, seed: u64) -> (ImageGroup<f64>, MaskGroup<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = Array4::from_shape_fn((n, 3, h, h), |_| rng.gen_range(0.0..1.0));
        let masks = Array3::from_shape_fn((n, h, h), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let ids: Vec<String> = (0..n).map(|i| format!("{category}-{i}")).collect();
        (
            ImageGroup::new(imgs, category, ids.clone()).unwrap(),
            MaskGroup::new(masks, ids).unwrap(),
        )
    }

    #[test]
    fn consensus_identity_for_single_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feat(rand4(&mut rng, (1, 3, 2, 2)));
        let cons = group_consensus(&f).unwrap();
        assert_eq!(cons.values, f.values);
    }

    #[test]
    fn consensus_of_constant_maps_is_their_mean() {
        let a = Array4::from_elem((1, 2, 2, 2), 0.0);
        let b = Array4::from_elem((1, 2, 2, 2), 2.0);
        let stacked = ndarray::concatenate![Axis(0), a, b];
        let cons = group_consensus(&feat(stacked)).unwrap();
        assert!(cons.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn consensus_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = feat(rand4(&mut rng, (4, 3, 2, 2)));
        let cons = group_consensus(&f).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let mut s = 0.0;
                    for n in 0..4 {
                        s += f.values[[n, c, y, x]];
                    }
                    assert!((cons.values[[0, c, y, x]] - s / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bdc_matrix_of_constant_observations_is_zero() {
        let obs = Array2::from_elem((4, 3), 0.7);
        let (a, v) = bdc_matrix(&obs).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bdc_matrix_hand_example() {
        // observations {0, 1, 3} in 1-D: distance matrix [[0,1,3],[1,0,2],[3,2,0]]
        let obs = arr2(&[[0.0], [1.0], [3.0]]);
        let (a, v) = bdc_matrix(&obs).unwrap();
        // hand-applied double centering: row means [4/3, 1, 5/3], grand 12/9
        let d: [[f64; 3]; 3] = [[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]];
        let rm = [4.0 / 3.0, 1.0, 5.0 / 3.0];
        let grand = 12.0 / 9.0;
        for k in 0..3 {
            for l in 0..3 {
                let expect = d[k][l] - rm[k] - rm[l] + grand;
                assert!((a[[k, l]] - expect).abs() < 1e-12, "a[{k}{l}]");
            }
        }
        // tr(A^T A) must equal <vec, vec>
        let tr: f64 = a.iter().map(|&x| x * x).sum();
        let dot: f64 = v.iter().map(|&x| x * x).sum();
        assert!((tr - dot).abs() <= 1e-9 * tr.abs().max(1.0));
    }

    #[test]
    fn bdc_of_constant_with_itself_is_zero() {
        let x = Array2::from_elem((3, 2), 1.5);
        assert_eq!(bdc(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn bdc_mismatched_observation_count_is_shape_error() {
        let x = Array2::<f64>::zeros((3, 2));
        let y = Array2::<f64>::zeros((4, 2));
        assert!(matches!(bdc(&x, &y), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bdc_trace_equals_vectorized_inner_product(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..=8);
            let p = rng.gen_range(1..=16);
            let x: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let y: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let (a, va) = bdc_matrix(&x).unwrap();
            let (b, vb) = bdc_matrix(&y).unwrap();
            let tr: f64 = a.iter().zip(b.iter()).map(|(&u, &w)| u * w).sum();
            let dot: f64 = va.iter().zip(vb.iter()).map(|(&u, &w)| u * w).sum();
            prop_assert!((tr - dot).abs() <= 1e-6 * tr.abs().max(1.0));
            // estimator nonnegativity on (X, X)
            let self_rho = bdc(&x, &x).unwrap();
            prop_assert!(self_rho >= -1e-9);
        }

        #[test]
        fn bdc_translation_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..=6);
            let p = rng.gen_range(1..=8);
            let x: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let y: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let shift: Array2<f64> = Array2::from_shape_fn((1, p), |_| rng.gen_range(-3.0..3.0));
            let xs = &x + &shift;
            let r0 = bdc(&x, &y).unwrap();
            let r1 = bdc(&xs, &y).unwrap();
            prop_assert!((r0 - r1).abs() <= 1e-6 * r0.abs().max(1.0));
        }

        #[test]
        fn bdc_homogeneity_and_symmetry(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..=6);
            let p = rng.gen_range(1..=8);
            let x: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let y: Array2<f64> = Array2::from_shape_fn((c, p), |_| rng.gen_range(-2.0..2.0));
            let a = rng.gen_range(-3.0..3.0f64);
            let r = bdc(&x, &y).unwrap();
            let ra = bdc(&x.mapv(|v| a * v), &y).unwrap();
            prop_assert!((ra - a.abs() * r).abs() <= 1e-6 * ra.abs().max(1.0));
            let rs = bdc(&y, &x).unwrap();
            prop_assert!((r - rs).abs() <= 1e-12 * r.abs().max(1.0));
        }

        #[test]
        fn selection_invariant_under_monotone_transform(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..=9);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let k = rng.gen_range(1..=(n - 1) / 2).max(1);
            let transformed: Vec<f64> = scores.iter().map(|&s| (0.3 * s).exp() + 2.0 * s).collect();
            for order in [HardnessOrder::Low, HardnessOrder::High] {
                let s0 = select_hardest(&scores, k, order);
                let s1 = select_hardest(&transformed, k, order);
                let mut a = s0.clone();
                let mut b = s1.clone();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn bdc_scores_equal_for_identical_images() {
        let one = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| (c + 2 * y + x) as f64 * 0.1);
        let stacked = ndarray::concatenate![Axis(0), one, one, one];
        let f = feat(stacked);
        let cons = group_consensus(&f).unwrap();
        let scores = bdc_scores(&f, &cons).unwrap();
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn bdc_score_of_self_dependence_is_positive() {
        // N=1: consensus equals the single feature; non-constant features
        // have strictly positive self-dependence.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = feat(rand4(&mut rng, (1, 4, 2, 2)));
        let cons = group_consensus(&f).unwrap();
        let scores = bdc_scores(&f, &cons).unwrap();
        assert!(scores[0] > 0.0);
    }

    #[test]
    fn bdc_scores_match_per_image_bdc_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = feat(rand4(&mut rng, (3, 4, 2, 2)));
        let cons = group_consensus(&f).unwrap();
        let scores = bdc_scores(&f, &cons).unwrap();
        let cons_obs = cons.values.index_axis(Axis(0), 0).to_owned().into_shape_with_order((4, 4)).unwrap();
        for i in 0..3 {
            let obs = f.values.index_axis(Axis(0), i).to_owned().into_shape_with_order((4, 4)).unwrap();
            let expect = bdc(&cons_obs, &obs).unwrap();
            assert_eq!(scores[i], expect);
        }
    }

    #[test]
    fn binary_score_is_zero_for_all_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = feat(rand4(&mut rng, (2, 3, 2, 2)));
        let masks = MaskGroup::new(
            Array3::zeros((2, 8, 8)),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let scores = binary_scores(&f, &masks).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    #[test]
    fn binary_score_counts_normalized_ones_under_full_mask() {
        // channel-reduced feature is binary {0, 1}; min-max keeps it, so the
        // score under an all-ones mask is the number of 1-pixels.
        let mut vals = Array4::<f64>::zeros((1, 1, 2, 2));
        vals[[0, 0, 0, 1]] = 1.0;
        vals[[0, 0, 1, 1]] = 1.0;
        let f = FeatureSequence::new(vals, FeatureSource::BinaryReduced).unwrap();
        let masks = MaskGroup::new(Array3::ones((1, 4, 4)), vec!["a".into()]).unwrap();
        let scores = binary_scores(&f, &masks).unwrap();
        assert!((scores[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn binary_scores_match_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = feat(rand4(&mut rng, (2, 3, 4, 4)));
        // half-ones mask at full resolution 8x8
        let masks = MaskGroup::new(
            Array3::from_shape_fn((2, 8, 8), |(_, _, x)| if x < 4 { 1.0 } else { 0.0 }),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let scores = binary_scores(&f, &masks).unwrap();
        for i in 0..2 {
            // oracle: explicit loops, independent normalization
            let mut reduced = vec![0.0f64; 16];
            for y in 0..4 {
                for x in 0..4 {
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += f.values[[i, c, y, x]];
                    }
                    reduced[y * 4 + x] = s / 3.0;
                }
            }
            let lo = reduced.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = reduced.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut expect = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    let nv = if hi > lo { (reduced[y * 4 + x] - lo) / (hi - lo) } else { 0.0 };
                    let mut pooled = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            pooled += masks.masks[[i, y * 2 + dy, x * 2 + dx]];
                        }
                    }
                    expect += nv * pooled / 4.0;
                }
            }
            assert!((scores[i] - expect).abs() < 1e-9, "{} vs {expect}", scores[i]);
        }
    }

    #[test]
    fn mixed_difficulty_arithmetic() {
        // already-normalized inputs pass through min-max unchanged
        let r = mixed_difficulty(&[0.0, 1.0], &[1.0, 0.0], 0.5, true).unwrap();
        assert_eq!(r.mixed, vec![0.5, 1.0]);
        let r = mixed_difficulty(&[0.0, 1.0], &[1.0, 0.0], 0.0, true).unwrap();
        assert_eq!(r.mixed, vec![0.0, 1.0]);
    }

    #[test]
    fn mixed_difficulty_tie_rule_yields_zeros() {
        let r = mixed_difficulty(&[0.7, 0.7, 0.7], &[2.0, 2.0, 2.0], 0.5, true).unwrap();
        assert_eq!(r.mixed, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mixed_difficulty_empty_is_error() {
        assert!(matches!(
            mixed_difficulty::<f64>(&[], &[], 0.5, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn select_hardest_is_argmin_under_low_order() {
        assert_eq!(select_hardest(&[0.9, 0.1, 0.5], 1, HardnessOrder::Low), vec![1]);
        assert_eq!(select_hardest(&[0.9, 0.1, 0.5], 1, HardnessOrder::High), vec![0]);
    }

    fn reports_for(n: usize, seed: u64) -> DifficultyReport<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bdc: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let bin: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        mixed_difficulty(&bdc, &bin, 0.5, true).unwrap()
    }

    #[test]
    fn exchange_structural_invariants() {
        for n in 4..=8 {
            for k in 1..=(n - 1) / 2 {
                let (i1, m1) = group(n, 8, "squares", 100 + n as u64);
                let (i2, m2) = group(n, 8, "circles", 200 + n as u64);
                let r1 = reports_for(n, 300 + n as u64);
                let r2 = reports_for(n, 400 + n as u64);
                let res = select_exchange_mask(
                    (&i1, &m1),
                    (&i2, &m2),
                    (&r1, &r2),
                    k,
                    HardnessOrder::Low,
                )
                .unwrap();
                // conservation of the id multiset
                let mut before: Vec<&String> = i1.ids.iter().chain(i2.ids.iter()).collect();
                let mut after: Vec<&String> = res
                    .group1
                    .0
                    .ids
                    .iter()
                    .chain(res.group2.0.ids.iter())
                    .collect();
                before.sort();
                after.sort();
                assert_eq!(before, after, "n={n} k={k}");
                assert_eq!(res.exchanged_ids.len(), k);
                // exactly k foreign items per group, with all-zero masks
                for (out, orig_ids, src) in [
                    (&res.group1, &i1.ids, &i2.ids),
                    (&res.group2, &i2.ids, &i1.ids),
                ] {
                    let foreign: Vec<usize> = (0..n)
                        .filter(|&i| !orig_ids.contains(&out.0.ids[i]))
                        .collect();
                    assert_eq!(foreign.len(), k);
                    for &i in &foreign {
                        assert!(src.contains(&out.0.ids[i]));
                        assert!(out.1.masks.index_axis(Axis(0), i).iter().all(|&v| v == 0.0));
                    }
                }
                // non-exchanged pairs bit-identical
                for i in 0..n {
                    if i1.ids.contains(&res.group1.0.ids[i]) {
                        assert_eq!(
                            res.group1.0.images.index_axis(Axis(0), i),
                            i1.images.index_axis(Axis(0), i)
                        );
                        assert_eq!(
                            res.group1.1.masks.index_axis(Axis(0), i),
                            m1.masks.index_axis(Axis(0), i)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn exchange_contract_errors() {
        let (i1, m1) = group(5, 8, "squares", 1);
        let (i2, m2) = group(5, 8, "circles", 2);
        let r1 = reports_for(5, 3);
        let r2 = reports_for(5, 4);
        // k >= N/2
        assert!(matches!(
            select_exchange_mask((&i1, &m1), (&i2, &m2), (&r1, &r2), 3, HardnessOrder::Low),
            Err(Error::Contract(_))
        ));
        // same category
        let (i3, m3) = group(5, 8, "squares", 5);
        assert!(matches!(
            select_exchange_mask((&i1, &m1), (&i3, &m3), (&r1, &r2), 1, HardnessOrder::Low),
            Err(Error::Contract(_))
        ));
        // k = 0
        assert!(matches!(
            select_exchange_mask((&i1, &m1), (&i2, &m2), (&r1, &r2), 0, HardnessOrder::Low),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn paper_setting_n5_k1() {
        let (i1, m1) = group(5, 8, "squares", 7);
        let (i2, m2) = group(5, 8, "circles", 8);
        let r1 = reports_for(5, 9);
        let r2 = reports_for(5, 10);
        let res =
            select_exchange_mask((&i1, &m1), (&i2, &m2), (&r1, &r2), 1, HardnessOrder::Low)
                .unwrap();
        let foreign1 = res.group1.0.ids.iter().filter(|id| i2.ids.contains(id)).count();
        let foreign2 = res.group2.0.ids.iter().filter(|id| i1.ids.contains(id)).count();
        assert_eq!((foreign1, foreign2), (1, 1));
    }
}
