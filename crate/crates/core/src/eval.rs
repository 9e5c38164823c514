//! Quantitative evaluation: amodal part IoU under optimal matching, flow
//! end-point error, and k-means classification of capsule embeddings.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, ShapeKind, StoredSample};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::model::CapsuleModel;
use crate::raster::{stack_frames, Mask};

/// Masks whose maximum is at or below this are treated as empty.
pub const BINARIZE_EPS: f64 = 1e-8;
pub const KMEANS_MAX_ITER: usize = 100;

/// Normalizes `values` by their maximum and thresholds at 0.5.
pub fn binarize(values: &[f64], height: usize, width: usize) -> Mask {
    assert_eq!(values.len(), height * width, "mask size does not match {height}x{width}");
    let max = values.iter().cloned().fold(0.0, f64::max);
    let data = if max > BINARIZE_EPS {
        values.iter().map(|v| v / max >= 0.5).collect()
    } else {
        vec![false; values.len()]
    };
    Mask {
        height,
        width,
        data,
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "masks differ in shape: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Minimum-cost assignment of rows to distinct columns (`rows ≤ cols`),
/// returning the column chosen for each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs at least as many columns as rows");
    // Potentials-based Hungarian method, 1-indexed with column 0 as a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Result of matching ground-truth parts to predicted masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMatch {
    /// Predicted index per ground-truth part; `None` when there were fewer
    /// predictions than parts.
    pub assignment: Vec<Option<usize>>,
    pub ious: Vec<f64>,
}

impl PartMatch {
    pub fn total(&self) -> f64 {
        self.ious.iter().sum()
    }
}

/// One-to-one matching of `gt` parts to binarized predictions that
/// maximizes the summed IoU.
pub fn match_parts(pred: &[Mask], gt: &[Mask]) -> Result<PartMatch> {
    let Some(first) = gt.first().or(pred.first()) else {
        return Ok(PartMatch {
            assignment: Vec::new(),
            ious: Vec::new(),
        });
    };
    let empty = Mask::empty(first.height, first.width);
    let cols = pred.len().max(gt.len());
    let table = gt
        .iter()
        .map(|g| {
            (0..cols)
                .map(|j| iou(pred.get(j).unwrap_or(&empty), g))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cost: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let cols_of = min_cost_assignment(&cost);
    Ok(PartMatch {
        assignment: cols_of
            .iter()
            .map(|&j| (j < pred.len()).then_some(j))
            .collect(),
        ious: cols_of.iter().zip(&table).map(|(&j, row)| row[j]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_class: BTreeMap<String, f64>,
    /// Mean over all ground-truth parts.
    pub overall: f64,
    pub n_samples: usize,
}

/// Running per-class IoU means.
#[derive(Debug, Clone, Default)]
pub struct IoUAccumulator {
    sums: BTreeMap<ShapeKind, (f64, usize)>,
    n_samples: usize,
}

impl IoUAccumulator {
    pub fn add(&mut self, labels: &[ShapeKind], ious: &[f64]) {
        for (kind, v) in labels.iter().zip(ious) {
            let e = self.sums.entry(*kind).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        self.n_samples += 1;
    }

    pub fn report(&self) -> IoUReport {
        let (sum, n) = self
            .sums
            .values()
            .fold((0.0, 0), |(s, n), (vs, vn)| (s + vs, n + vn));
        IoUReport {
            per_class: self
                .sums
                .iter()
                .map(|(k, (s, n))| (k.name().to_string(), s / *n as f64))
                .collect(),
            overall: if n == 0 { 0.0 } else { sum / n as f64 },
            n_samples: self.n_samples,
        }
    }
}

/// Mean Euclidean end-point error over the pixels of `region`.
pub fn flow_epe(pred: &FlowField, gt: &FlowField, region: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width)
        || (gt.height, gt.width) != (region.height, region.width)
    {
        return Err(Error::Shape(format!(
            "flow/region sizes differ: {}x{}, {}x{}, {}x{}",
            pred.height, pred.width, gt.height, gt.width, region.height, region.width
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &inside) in pred.data.iter().zip(&gt.data).zip(&region.data) {
        if inside {
            let dx = (p[0] - g[0]) as f64;
            let dy = (p[1] - g[1]) as f64;
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedRegion("end-point error over an empty region".into()));
    }
    Ok(sum / n as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns fewer than `k` centers when the remaining
/// points all coincide with chosen centers.
pub fn kmeans_pp_init(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if features.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut centers = vec![features[rng.random_range(0..features.len())].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = features.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && *d > 0.0 {
                pick = i;
                break;
            }
        }
        if d2[pick] == 0.0 {
            // rounding pushed us past the end onto an already covered point
            pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(pick);
        }
        let c = features[pick].clone();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &c));
        }
        centers.push(c);
    }
    centers
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Lloyd iterations from the given centers. Ties go to the lowest center
/// index; a center that loses all its points stays where it was.
pub fn lloyd(features: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        features
            .iter()
            .map(|f| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(f, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut assignments = assign(&centers);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let dim = centers.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(f) {
                *s += x;
            }
        }
        for ((c, s), n) in centers.iter_mut().zip(sums).zip(&counts) {
            if *n > 0 {
                *c = s.into_iter().map(|v| v / *n as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    KMeans {
        centers,
        assignments,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_clusters: usize,
    /// Fraction of points whose label equals their cluster's majority label.
    pub accuracy: f64,
    pub cluster_sizes: Vec<usize>,
    pub nonempty_clusters: usize,
    /// Accuracy of always predicting the most common label.
    pub majority_baseline: f64,
    pub iterations: usize,
}

fn majority(labels: impl Iterator<Item = u32>) -> (u32, usize) {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    // BTreeMap order makes the smallest label win ties.
    counts
        .into_iter()
        .fold((0, 0), |best, (l, n)| if n > best.1 { (l, n) } else { best })
}

/// Clusters `features` and scores clusters by majority-label purity.
pub fn kmeans_classify(
    features: &[Vec<f64>],
    labels: &[u32],
    n_clusters: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if n_clusters == 0 || features.len() < n_clusters {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ clusters ≤ points, got {n_clusters} clusters for {} points",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(features, n_clusters, &mut rng);
    let km = lloyd(features, init, KMEANS_MAX_ITER);
    let mut cluster_sizes = vec![0usize; n_clusters];
    let mut correct = 0usize;
    for c in 0..km.centers.len() {
        let members = km.assignments.iter().zip(labels).filter(|(a, _)| **a == c);
        let (_, hits) = majority(members.clone().map(|(_, l)| *l));
        cluster_sizes[c] = members.count();
        correct += hits;
    }
    let n = features.len() as f64;
    Ok(ClusterReport {
        n_clusters,
        accuracy: correct as f64 / n,
        nonempty_clusters: cluster_sizes.iter().filter(|s| **s > 0).count(),
        cluster_sizes,
        majority_baseline: majority(labels.iter().copied()).1 as f64 / n,
        iterations: km.iterations,
    })
}

/// How a sample's class label is derived from its shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelExtractor {
    /// The set of shape kinds present, as a bit set.
    #[default]
    ShapeSet,
    /// The number of shapes.
    ShapeCount,
}

impl LabelExtractor {
    pub fn label(&self, shapes: &[ShapeKind]) -> u32 {
        match self {
            LabelExtractor::ShapeSet => shapes.iter().fold(0, |acc, k| {
                acc | 1 << ShapeKind::ALL.iter().position(|a| a == k).unwrap()
            }),
            LabelExtractor::ShapeCount => shapes.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: String,
    pub batch_size: usize,
    /// Evaluate only the first `n` samples of the split.
    pub max_samples: Option<usize>,
    /// Run the k-means protocol with this many clusters.
    pub clusters: Option<usize>,
    pub labels: LabelExtractor,
    pub kmeans_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: "test".into(),
            batch_size: 32,
            max_samples: None,
            clusters: None,
            labels: LabelExtractor::default(),
            kmeans_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub checkpoint: Option<String>,
    pub split: String,
    /// Amodal IoU: raw part masks against full ground-truth shapes.
    #[serde(flatten)]
    pub amodal: IoUReport,
    /// Visibility-weighted masks against visible ground truth.
    pub visible: IoUReport,
    /// Mean foreground end-point error in pixels, over samples with foreground.
    pub epe: Option<f64>,
    pub cluster: Option<ClusterReport>,
}

/// Per-sample evaluation of precomputed predictions.
#[derive(Debug, Clone)]
pub struct SampleScores {
    pub amodal: PartMatch,
    pub visible: PartMatch,
    pub epe: Option<f64>,
}

/// Scores one sample given the model's raw and visible masks (each `K`
/// row-major `H×W` fields) and predicted flow.
pub fn score_sample(
    raw: &[Vec<f64>],
    visible: &[Vec<f64>],
    flow: &FlowField,
    sample: &StoredSample,
) -> Result<SampleScores> {
    let (h, w) = (flow.height, flow.width);
    let bin = |fields: &[Vec<f64>]| -> Vec<Mask> { fields.iter().map(|f| binarize(f, h, w)).collect() };
    let amodal = match_parts(&bin(raw), &sample.amodal_masks)?;
    let vis = match_parts(&bin(visible), &sample.visible_masks)?;
    let mut fg = Mask::empty(h, w);
    for m in &sample.visible_masks {
        for (f, v) in fg.data.iter_mut().zip(&m.data) {
            *f |= *v;
        }
    }
    let epe = match flow_epe(flow, &sample.gt_flow, &fg) {
        Ok(v) => Some(v),
        Err(Error::UndefinedRegion(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleScores {
        amodal,
        visible: vis,
        epe,
    })
}

fn split_fields(t: &candle_core::Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    let (b, k, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| {
            (0..k)
                .map(|j| flat[(i * k + j) * h * w..(i * k + j + 1) * h * w].to_vec())
                .collect()
        })
        .collect())
}

/// Runs the model over a dataset split and aggregates all metrics.
pub fn evaluate(model: &CapsuleModel, dataset: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    let cfg = model.config();
    if dataset.resolution() != (cfg.height, cfg.width) {
        return Err(Error::Incompatible(format!(
            "dataset resolution {:?} differs from model resolution {:?}",
            dataset.resolution(),
            (cfg.height, cfg.width)
        )));
    }
    let mut entries = dataset.entries(&options.split)?;
    if let Some(n) = options.max_samples {
        entries = &entries[..n.min(entries.len())];
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", options.split)));
    }
    let batch = options.batch_size.max(1);
    let mut amodal = IoUAccumulator::default();
    let mut visible = IoUAccumulator::default();
    let mut epe = (0.0, 0usize);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for chunk in entries.chunks(batch) {
        let samples = chunk
            .par_iter()
            .map(|e| dataset.load_sample(&options.split, e))
            .collect::<Result<Vec<_>>>()?;
        let a = stack_frames(samples.iter().map(|s| &s.image_a), model.device(), model.dtype())?;
        let b = stack_frames(samples.iter().map(|s| &s.image_b), model.device(), model.dtype())?;
        let out = model.forward_pair(&a, &b)?;
        let raw = split_fields(&out.raw_masks)?;
        let vis = split_fields(&out.visible)?;
        let sets = out.caps_a.to_sets()?;
        for (i, (sample, entry)) in samples.iter().zip(chunk).enumerate() {
            let flow = FlowField::from_tensor(&out.flow.narrow(0, i, 1)?)?;
            let scores = score_sample(&raw[i], &vis[i], &flow, sample)?;
            amodal.add(&sample.labels, &scores.amodal.ious);
            visible.add(&sample.labels, &scores.visible.ious);
            if let Some(e) = scores.epe {
                epe.0 += e;
                epe.1 += 1;
            }
            features.push(sets[i].features());
            labels.push(options.labels.label(&entry.shapes));
        }
    }
    let cluster = match options.clusters {
        Some(n) => Some(kmeans_classify(&features, &labels, n.min(features.len()), options.kmeans_seed)?),
        None => None,
    };
    Ok(EvalReport {
        dataset: dataset.root.display().to_string(),
        checkpoint: None,
        split: options.split.clone(),
        amodal: amodal.report(),
        visible: visible.report(),
        epe: (epe.1 > 0).then(|| epe.0 / epe.1 as f64),
        cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let mut m = Mask::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.0; 4], 2, 2).count(), 0);
        assert_eq!(binarize(&[0.3; 4], 2, 2).count(), 4);
        assert_eq!(binarize(&[0.2, 0.8, 0.8, 0.2], 2, 2).data, vec![false, true, true, false]);
        // exactly half the maximum counts as inside
        assert_eq!(binarize(&[0.4, 0.8], 1, 2).data, vec![true, true]);
    }

    #[test]
    fn iou_examples() {
        let a = mask(4, 4, |_, j| j < 2);
        let b = mask(4, 4, |_, j| j >= 2);
        let c = mask(4, 4, |_, j| (1..3).contains(&j));
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // half-overlapping equal areas: 4 / 12
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(iou(&a, &Mask::empty(3, 4)).is_err());
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |data| Mask {
            height: h,
            width: w,
            data,
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_mask(5, 6), b in arb_mask(5, 6)) {
            let x = iou(&a, &b).unwrap();
            prop_assert_eq!(x, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn matching_is_permutation_invariant(
            preds in proptest::collection::vec(arb_mask(4, 4), 4),
            gt in proptest::collection::vec(arb_mask(4, 4), 3),
            rot in 0usize..4,
        ) {
            let base = match_parts(&preds, &gt).unwrap();
            let mut shuffled = preds.clone();
            shuffled.rotate_left(rot);
            let other = match_parts(&shuffled, &gt).unwrap();
            prop_assert!((base.total() - other.total()).abs() < 1e-12);
        }
    }

    #[test]
    fn match_identical_and_swapped() {
        let g = vec![mask(6, 6, |i, _| i < 3), mask(6, 6, |i, j| i >= 3 && j < 2)];
        let mut preds = g.clone();
        preds.push(Mask::empty(6, 6));
        let m = match_parts(&preds, &g).unwrap();
        assert_eq!(m.ious, vec![1.0, 1.0]);
        let swapped = vec![g[1].clone(), g[0].clone()];
        let m = match_parts(&swapped, &g).unwrap();
        assert_eq!(m.ious, vec![1.0, 1.0]);
        assert_eq!(m.assignment, vec![Some(1), Some(0)]);
    }

    #[test]
    fn more_parts_than_predictions() {
        let g = vec![mask(4, 4, |i, _| i < 2), mask(4, 4, |i, _| i >= 2)];
        let m = match_parts(&g[..1], &g).unwrap();
        assert_eq!(m.ious, vec![1.0, 0.0]);
        assert_eq!(m.assignment, vec![Some(0), None]);
    }

    fn brute_best(table: &[Vec<f64>]) -> f64 {
        fn rec(table: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == table.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(table[row][j] + rec(table, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(table, 0, &mut vec![false; table[0].len()])
    }

    #[test]
    fn matching_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.random_range(3..6);
            let n = rng.random_range(1..=3);
            let rand_mask = |rng: &mut ChaCha8Rng| Mask {
                height: 8,
                width: 8,
                data: (0..64).map(|_| rng.random_bool(0.4)).collect(),
            };
            let preds: Vec<Mask> = (0..k).map(|_| rand_mask(&mut rng)).collect();
            let gt: Vec<Mask> = (0..n).map(|_| rand_mask(&mut rng)).collect();
            let table: Vec<Vec<f64>> = gt
                .iter()
                .map(|g| preds.iter().map(|p| iou(p, g).unwrap()).collect())
                .collect();
            let m = match_parts(&preds, &gt).unwrap();
            assert!((m.total() - brute_best(&table)).abs() < 1e-12);
            let mut seen: Vec<usize> = m.assignment.iter().map(|a| a.unwrap()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), n);
        }
    }

    #[test]
    fn assignment_on_rectangular_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let m = rng.random_range(n..7);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let a = min_cost_assignment(&cost);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let neg: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            assert!((got + brute_best(&neg)).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulator_means() {
        let mut acc = IoUAccumulator::default();
        acc.add(&[ShapeKind::Circle, ShapeKind::Square], &[1.0, 0.5]);
        acc.add(&[ShapeKind::Circle], &[0.0]);
        let r = acc.report();
        assert_eq!(r.n_samples, 2);
        assert_eq!(r.per_class["circle"], 0.5);
        assert_eq!(r.per_class["square"], 0.5);
        assert!((r.overall - 0.5).abs() < 1e-12);
    }

    fn field(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> FlowField {
        let mut out = FlowField::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                out.set(i, j, f(i, j));
            }
        }
        out
    }

    #[test]
    fn epe_examples() {
        let gt = field(5, 5, |i, j| [i as f32 * 0.3, j as f32 - 2.0]);
        let all = mask(5, 5, |_, _| true);
        assert_eq!(flow_epe(&gt, &gt, &all).unwrap(), 0.0);
        let shifted = field(5, 5, |i, j| {
            let g = gt.get(i, j);
            [g[0] + 1.0, g[1]]
        });
        assert!((flow_epe(&shifted, &gt, &all).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(
            flow_epe(&gt, &gt, &Mask::empty(5, 5)),
            Err(Error::UndefinedRegion(_))
        ));
    }

    #[test]
    fn epe_matches_per_pixel_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = || rng.random_range(-4.0f32..4.0);
        let a = field(7, 9, |_, _| [r(), r()]);
        let b = field(7, 9, |_, _| [r(), r()]);
        let region = mask(7, 9, |i, j| (i * 9 + j) % 3 != 0);
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..7 {
            for j in 0..9 {
                if region.get(i, j) {
                    let (p, g) = (a.get(i, j), b.get(i, j));
                    sum += ((p[0] - g[0]) as f64).hypot((p[1] - g[1]) as f64);
                    n += 1.0;
                }
            }
        }
        assert!((flow_epe(&a, &b, &region).unwrap() - sum / n).abs() < 1e-9);
    }

    #[test]
    fn kmeans_one_hot_and_singletons() {
        let labels: Vec<u32> = (0..30).map(|i| i % 3).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|d| (d == l as usize) as u8 as f64).collect())
            .collect();
        let r = kmeans_classify(&feats, &labels, 3, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.nonempty_clusters, 3);
        assert!((r.majority_baseline - 1.0 / 3.0).abs() < 1e-12);

        let feats: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let labels: Vec<u32> = (0..12).map(|i| (i * 7 % 5) as u32).collect();
        let r = kmeans_classify(&feats, &labels, 12, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.cluster_sizes, vec![1; 12]);
    }

    #[test]
    fn kmeans_degenerate_features() {
        let feats = vec![vec![1.0, 2.0]; 10];
        let labels: Vec<u32> = (0..10).map(|i| (i < 7) as u32).collect();
        let r = kmeans_classify(&feats, &labels, 4, 0).unwrap();
        assert_eq!(r.nonempty_clusters, 1);
        assert!((r.accuracy - 0.7).abs() < 1e-12);
        assert!(kmeans_classify(&feats, &labels, 11, 0).is_err());
    }

    /// Textbook Lloyd: nearest center by full distance scan, centroid update,
    /// stop when assignments repeat.
    fn reference_lloyd(x: &[Vec<f64>], mut c: Vec<Vec<f64>>) -> Vec<usize> {
        let mut prev: Option<Vec<usize>> = None;
        for _ in 0..=KMEANS_MAX_ITER {
            let a: Vec<usize> = x
                .iter()
                .map(|p| {
                    let d: Vec<f64> = c
                        .iter()
                        .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                        .collect();
                    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
                    d.iter().position(|v| *v == m).unwrap()
                })
                .collect();
            if prev.as_ref() == Some(&a) {
                return a;
            }
            for (j, cj) in c.iter_mut().enumerate() {
                let pts: Vec<&Vec<f64>> = x.iter().zip(&a).filter(|(_, k)| **k == j).map(|(p, _)| p).collect();
                if !pts.is_empty() {
                    let n = pts.len() as f64;
                    *cj = vec![
                        pts.iter().map(|p| p[0]).sum::<f64>() / n,
                        pts.iter().map(|p| p[1]).sum::<f64>() / n,
                    ];
                }
            }
            prev = Some(a);
        }
        prev.unwrap()
    }

    #[test]
    fn kmeans_matches_reference_on_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = [[0.0, 0.0], [4.0, 1.0], [1.5, 4.0]];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..150 {
            let l = i % 3;
            let c = centers[l];
            // Box-Muller
            let (u1, u2): (f64, f64) = (rng.random_range(1e-9..1.0), rng.random());
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            feats.push(vec![c[0] + 0.8 * r * th.cos(), c[1] + 0.8 * r * th.sin()]);
            labels.push(l as u32);
        }
        let seed = 21;
        let init = kmeans_pp_init(&feats, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let reference = reference_lloyd(&feats, init.clone());
        let ours = lloyd(&feats, init, KMEANS_MAX_ITER);
        assert_eq!(ours.assignments, reference);

        let mut correct = 0;
        for c in 0..3 {
            let mut counts = [0usize; 3];
            for (a, l) in reference.iter().zip(&labels) {
                if *a == c {
                    counts[*l as usize] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        let r = kmeans_classify(&feats, &labels, 3, seed).unwrap();
        assert!((r.accuracy - correct as f64 / 150.0).abs() < 1e-12);
        assert!(r.accuracy > 0.85);
    }

    #[test]
    fn label_extractors() {
        use ShapeKind::*;
        let e = LabelExtractor::ShapeSet;
        assert_eq!(e.label(&[Circle]), 1);
        assert_eq!(e.label(&[Square, Circle]), e.label(&[Circle, Square]));
        assert_eq!(e.label(&[Triangle, Triangle]), 4);
        assert_eq!(LabelExtractor::ShapeCount.label(&[Circle, Circle, Square]), 3);
    }
}
