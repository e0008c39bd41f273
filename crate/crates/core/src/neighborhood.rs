//! Embedding bank, k-means, exact kNN and center-wise local positive selection.
//!
//! For an anchor `a` with cluster centre `c`, the positive set is every sample
//! that is both in `a`'s cluster and among `a`'s `k` nearest neighbours, and
//! that lies at least as close to `c` as `a` does. Distances are L2 on
//! unit-norm key-encoder embeddings; every tie is broken by lower index.

use serde::{Deserialize, Serialize};

use crate::augmentation::AugParams;
use crate::dataset::Dataset;
use crate::encoder::{embed, EncoderParams};
use crate::error::{ClimError, Result};
use crate::linalg::Matrix;
use crate::numerics::{ensure_unit, sq_dist_raw, Rng};
use crate::parallel::{chunk_ranges, map_indexed, ExecMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborhoodConfig {
    /// Number of k-means clusters; `None` means `max(2, n/128)`.
    pub clusters: Option<usize>,
    pub knn_k: usize,
    /// Positives kept per anchor after selection.
    pub positives: usize,
    pub refresh_every: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            clusters: None,
            knn_k: 40,
            positives: 10,
            refresh_every: 5,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
        }
    }
}

impl NeighborhoodConfig {
    pub fn cluster_count(&self, n: usize) -> usize {
        self.clusters.unwrap_or_else(|| (n / 128).max(2)).min(n.max(1))
    }

    /// kNN size clamped so that it stays below the dataset size.
    pub fn effective_k(&self, n: usize) -> usize {
        self.knn_k.min(n.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| ClimError::Config {
            key: format!("neighborhood.{key}"),
            reason: reason.into(),
        };
        if self.clusters == Some(0) {
            return Err(bad("clusters", "must be >= 1"));
        }
        if self.knn_k == 0 {
            return Err(bad("knn_k", "must be >= 1"));
        }
        if self.positives == 0 {
            return Err(bad("positives", "must be >= 1"));
        }
        if self.refresh_every == 0 {
            return Err(bad("refresh_every", "must be >= 1"));
        }
        if self.kmeans_max_iters == 0 {
            return Err(bad("kmeans_max_iters", "must be >= 1"));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(bad("kmeans_tol", "must be >= 0"));
        }
        Ok(())
    }
}

/// Unit-norm embeddings of every dataset sample, stamped with the epoch they
/// were computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    vectors: Matrix,
    epoch_stamp: u64,
}

impl EmbeddingBank {
    pub fn new(vectors: Matrix, epoch_stamp: u64) -> Result<Self> {
        for r in 0..vectors.rows() {
            ensure_unit(vectors.row(r), 1e-6)?;
        }
        Ok(Self {
            vectors,
            epoch_stamp,
        })
    }

    /// Bank over arbitrary points (no unit-norm requirement); for inspection
    /// and tests on hand-made geometry.
    pub fn from_points(vectors: Matrix, epoch_stamp: u64) -> Self {
        Self {
            vectors,
            epoch_stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        sq_dist_raw(self.row(a), self.row(b)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first to last.
    pub inertia_history: Vec<f64>,
    pub epoch_stamp: u64,
}

impl ClusterModel {
    pub fn center(&self, cluster: usize) -> &[f64] {
        self.centers.row(cluster)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }
}

/// Index of the nearest center and its squared distance; ties go to the lower index.
fn nearest_center(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist_raw(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(rng: &mut Rng, bank: &EmbeddingBank, m: usize) -> Matrix {
    let n = bank.len();
    let d = bank.dim();
    let mut centers = Matrix::zeros(m, d);
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    centers.row_mut(0).copy_from_slice(bank.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_raw(bank.row(i), bank.row(first))).collect();
    for c in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can leave the target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.row_mut(c).copy_from_slice(bank.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist_raw(bank.row(i), bank.row(pick)));
        }
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds.
///
/// Stops after `max_iters` assignment steps or once the relative inertia
/// improvement drops to `tol` or below. Empty clusters are re-seeded at the
/// point farthest from its current center. The returned assignments are the
/// argmin for the returned centers.
pub fn kmeans_fit(rng: &mut Rng, bank: &EmbeddingBank, m: usize, max_iters: usize, tol: f64) -> Result<ClusterModel> {
    let n = bank.len();
    if m < 1 {
        return Err(ClimError::invalid("k-means needs at least one cluster"));
    }
    if m > n {
        return Err(ClimError::invalid(format!("{m} clusters for {n} points")));
    }
    let d = bank.dim();
    let mut centers = kmeans_plus_plus(rng, bank, m);
    let mut assignments = vec![0usize; n];
    let mut point_d2 = vec![0.0; n];
    let mut history = Vec::new();
    let max_iters = max_iters.max(1);
    loop {
        for i in 0..n {
            let (c, dist) = nearest_center(bank.row(i), &centers);
            assignments[i] = c;
            point_d2[i] = dist;
        }
        let inertia: f64 = point_d2.iter().sum();
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            debug_assert!(inertia <= prev * (1.0 + 1e-9) + 1e-12, "inertia rose: {prev} -> {inertia}");
        }
        let converged = match history.last() {
            Some(&prev) => prev - inertia <= tol * prev,
            None => inertia == 0.0,
        };
        history.push(inertia);
        if converged || history.len() >= max_iters {
            break;
        }

        let mut sums = Matrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(bank.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..m {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if point_d2[b] >= point_d2[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("m <= n leaves a point to reseed from");
                taken[far] = true;
                centers.row_mut(c).copy_from_slice(bank.row(far));
            }
        }
    }
    Ok(ClusterModel {
        centers,
        assignments,
        inertia: *history.last().expect("at least one step"),
        inertia_history: history,
        epoch_stamp: bank.epoch_stamp(),
    })
}

/// The `k` nearest samples to `anchor` (excluding it) with their L2 distances,
/// nearest first, ties broken by lower index.
pub fn knn_with_distances(bank: &EmbeddingBank, anchor: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let n = bank.len();
    if anchor >= n {
        return Err(ClimError::invalid(format!("anchor {anchor} out of range for {n} samples")));
    }
    if k >= n {
        return Err(ClimError::invalid(format!("k = {k} must be smaller than n = {n}")));
    }
    let a = bank.row(anchor);
    let mut cands: Vec<(usize, f64)> = (0..n)
        .filter(|&i| i != anchor)
        .map(|i| (i, sq_dist_raw(a, bank.row(i)).sqrt()))
        .collect();
    let cmp = |x: &(usize, f64), y: &(usize, f64)| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0));
    if k < cands.len() {
        cands.select_nth_unstable_by(k, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    Ok(cands)
}

pub fn knn_search(bank: &EmbeddingBank, anchor: usize, k: usize) -> Result<Vec<usize>> {
    Ok(knn_with_distances(bank, anchor, k)?.into_iter().map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub anchor: usize,
    pub cluster: usize,
    /// Same-cluster samples, including the anchor, ascending index.
    pub omega1: Vec<usize>,
    /// kNN of the anchor, nearest first.
    pub omega2: Vec<usize>,
    pub omega2_distances: Vec<f64>,
    /// Positives in `omega2` order.
    pub omega_p: Vec<usize>,
    /// Distance of the anchor to its center.
    pub anchor_center_distance: f64,
}

pub fn select_positives(bank: &EmbeddingBank, model: &ClusterModel, anchor: usize, k: usize) -> Result<SelectionResult> {
    if model.epoch_stamp != bank.epoch_stamp() {
        return Err(ClimError::StaleModel {
            model: model.epoch_stamp,
            bank: bank.epoch_stamp(),
        });
    }
    if model.assignments.len() != bank.len() {
        return Err(ClimError::DimensionMismatch {
            left: bank.len(),
            right: model.assignments.len(),
        });
    }
    let knn = knn_with_distances(bank, anchor, k)?;
    let cluster = model.assignments[anchor];
    let center = model.center(cluster);
    let to_center = |i: usize| sq_dist_raw(bank.row(i), center).sqrt();
    let anchor_center_distance = to_center(anchor);
    let omega1 = model.members(cluster);
    let omega_p = knn
        .iter()
        .filter(|(i, _)| model.assignments[*i] == cluster && to_center(*i) <= anchor_center_distance)
        .map(|(i, _)| *i)
        .collect();
    Ok(SelectionResult {
        anchor,
        cluster,
        omega1,
        omega2: knn.iter().map(|(i, _)| *i).collect(),
        omega2_distances: knn.iter().map(|(_, d)| *d).collect(),
        omega_p,
        anchor_center_distance,
    })
}

/// Draws up to `count` positives: a uniform sample of the selected set when it
/// is large enough, otherwise all of it topped up with the nearest remaining
/// neighbours, then neighbours resampled with replacement.
pub fn sample_positives(rng: &mut Rng, sel: &SelectionResult, count: usize) -> Result<Vec<usize>> {
    if sel.omega2.is_empty() {
        return Err(ClimError::invalid("no nearest neighbours to draw positives from"));
    }
    let omega_p = &sel.omega_p;
    if omega_p.len() >= count {
        return Ok(rng
            .sample_without_replacement(omega_p.len(), count)
            .into_iter()
            .map(|i| omega_p[i])
            .collect());
    }
    let mut out = omega_p.clone();
    for &i in &sel.omega2 {
        if out.len() >= count {
            break;
        }
        if !omega_p.contains(&i) {
            out.push(i);
        }
    }
    while out.len() < count {
        out.push(sel.omega2[rng.below(sel.omega2.len())]);
    }
    debug_assert!(!out.contains(&sel.anchor));
    Ok(out)
}

/// Bank and cluster model valid between two refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub bank: EmbeddingBank,
    pub model: ClusterModel,
}

/// Whether `epoch` triggers a refresh when selection starts at `first_epoch`.
pub fn is_refresh_epoch(epoch: usize, first_epoch: usize, cfg: &NeighborhoodConfig) -> bool {
    epoch >= first_epoch && (epoch - first_epoch).is_multiple_of(cfg.refresh_every.max(1))
}

/// Embeds every sample with `key` on the deterministic whole-image view.
pub fn compute_bank(key: &EncoderParams, dataset: &Dataset, epoch: u64, exec: ExecMode) -> Result<EmbeddingBank> {
    let n = dataset.len();
    let side = key.dims().input_side;
    let chunks = chunk_ranges(n, 64);
    let parts = map_indexed(exec, chunks.len(), |c| -> Result<Matrix> {
        let views = chunks[c]
            .clone()
            .map(|i| {
                let img = dataset.image(i);
                AugParams::center(img.height(), img.width(), side).apply(img, side)
            })
            .collect::<Result<Vec<_>>>()?;
        embed(key, &views)
    });
    let mut rows = Vec::with_capacity(n);
    for p in parts {
        rows.extend(p?.to_rows());
    }
    let dim = key.dims().embed;
    let vectors = if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    EmbeddingBank::new(vectors, epoch)
}

/// Recomputes the bank and refits k-means on refresh epochs; `Ok(None)` on
/// every other epoch, meaning the current snapshot stays in force.
pub fn refresh(
    key: &EncoderParams,
    dataset: &Dataset,
    epoch: usize,
    first_epoch: usize,
    cfg: &NeighborhoodConfig,
    seed: u64,
    exec: ExecMode,
) -> Result<Option<Neighborhood>> {
    if !is_refresh_epoch(epoch, first_epoch, cfg) {
        return Ok(None);
    }
    let bank = compute_bank(key, dataset, epoch as u64, exec)?;
    let m = cfg.cluster_count(bank.len());
    let mut rng = Rng::new(seed).split(0x6b6d_6561_6e73).split(epoch as u64);
    let model = kmeans_fit(&mut rng, &bank, m, cfg.kmeans_max_iters, cfg.kmeans_tol)?;
    Ok(Some(Neighborhood { bank, model }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[&[f64]]) -> EmbeddingBank {
        EmbeddingBank::from_points(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(), 0)
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let bank = points(&[&[0.0], &[1.0], &[10.0], &[11.0]]);
        for seed in 0..20 {
            let model = kmeans_fit(&mut Rng::new(seed), &bank, 2, 100, 1e-6).unwrap();
            let mut cs: Vec<f64> = (0..2).map(|c| model.center(c)[0]).collect();
            cs.sort_by(f64::total_cmp);
            assert_eq!(cs, vec![0.5, 10.5], "seed {seed}");
            assert_eq!(model.inertia, 1.0);
        }
    }

    #[test]
    fn kmeans_boundaries() {
        let bank = points(&[&[0.0, 1.0], &[2.0, 3.0], &[5.0, -1.0]]);
        let all = kmeans_fit(&mut Rng::new(1), &bank, 3, 100, 1e-6).unwrap();
        assert_eq!(all.inertia, 0.0);
        let mut a = all.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);

        let one = kmeans_fit(&mut Rng::new(1), &bank, 1, 100, 1e-6).unwrap();
        assert!((one.center(0)[0] - 7.0 / 3.0).abs() < 1e-12);
        assert!((one.center(0)[1] - 1.0).abs() < 1e-12);

        assert!(kmeans_fit(&mut Rng::new(1), &bank, 4, 100, 1e-6).is_err());
        assert!(kmeans_fit(&mut Rng::new(1), &bank, 0, 100, 1e-6).is_err());
    }

    #[test]
    fn kmeans_with_duplicate_points() {
        let bank = points(&[&[1.0], &[1.0], &[1.0], &[4.0]]);
        let model = kmeans_fit(&mut Rng::new(2), &bank, 3, 50, 1e-6).unwrap();
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn knn_examples() {
        let bank = points(&[&[1.0, 0.0], &[0.9, 0.1], &[0.5, 0.0], &[2.0, 0.0]]);
        assert_eq!(knn_search(&bank, 0, 2).unwrap(), vec![1, 2]);
        assert!(knn_search(&bank, 0, 4).is_err());

        let dup = points(&[&[0.3, 0.4], &[1.0, 1.0], &[0.3, 0.4]]);
        assert_eq!(knn_search(&dup, 0, 1).unwrap(), vec![2]);

        let ring = points(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        assert_eq!(knn_search(&ring, 0, 3).unwrap(), vec![1, 2, 3]);
    }

    fn worked_model(bank: &EmbeddingBank) -> ClusterModel {
        ClusterModel {
            centers: Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap(),
            assignments: vec![0; bank.len()],
            inertia: 0.0,
            inertia_history: vec![],
            epoch_stamp: bank.epoch_stamp(),
        }
    }

    #[test]
    fn worked_selection_example() {
        // A anchor, B, C, D around a center at the origin.
        let bank = points(&[&[1.0, 0.0], &[0.5, 0.0], &[2.0, 0.0], &[0.9, 0.1]]);
        let model = worked_model(&bank);
        let sel = select_positives(&bank, &model, 0, 3).unwrap();
        assert_eq!(sel.omega2, vec![3, 1, 2]);
        assert_eq!(sel.anchor_center_distance, 1.0);
        let mut p = sel.omega_p.clone();
        p.sort_unstable();
        assert_eq!(p, vec![1, 3]);
        assert_eq!(sel.omega1, vec![0, 1, 2, 3]);
    }

    #[test]
    fn anchor_nearest_center_has_no_positives() {
        let bank = points(&[&[0.1, 0.0], &[0.5, 0.0], &[2.0, 0.0], &[0.9, 0.1]]);
        let sel = select_positives(&bank, &worked_model(&bank), 0, 3).unwrap();
        assert!(sel.omega_p.is_empty());
    }

    #[test]
    fn identical_members_all_pass() {
        let bank = points(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let mut model = worked_model(&bank);
        model.centers = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let sel = select_positives(&bank, &model, 0, 2).unwrap();
        assert_eq!(sel.omega_p, vec![1, 2]);
    }

    #[test]
    fn stale_model_rejected() {
        let bank = points(&[&[1.0, 0.0], &[0.5, 0.0]]);
        let mut model = worked_model(&bank);
        model.epoch_stamp = 5;
        assert!(matches!(select_positives(&bank, &model, 0, 1), Err(ClimError::StaleModel { .. })));
    }

    fn synthetic_selection(omega_p: usize, omega2: usize) -> SelectionResult {
        let omega2_ids: Vec<usize> = (1..=omega2).collect();
        SelectionResult {
            anchor: 0,
            cluster: 0,
            omega1: (0..=omega2).collect(),
            omega2: omega2_ids.clone(),
            omega2_distances: (1..=omega2).map(|d| d as f64).collect(),
            // positives chosen from the far end so the top-up is observable
            omega_p: omega2_ids.iter().rev().take(omega_p).copied().collect(),
            anchor_center_distance: 1.0,
        }
    }

    #[test]
    fn sample_positive_fallbacks() {
        let mut rng = Rng::new(4);
        let none = synthetic_selection(0, 40);
        assert_eq!(sample_positives(&mut rng, &none, 10).unwrap(), (1..=10).collect::<Vec<_>>());

        let exact = synthetic_selection(10, 40);
        let mut got = sample_positives(&mut rng, &exact, 10).unwrap();
        got.sort_unstable();
        let mut want = exact.omega_p.clone();
        want.sort_unstable();
        assert_eq!(got, want);

        let four = synthetic_selection(4, 40);
        let got = sample_positives(&mut rng, &four, 10).unwrap();
        assert_eq!(&got[..4], &four.omega_p[..]);
        assert_eq!(&got[4..], &[1, 2, 3, 4, 5, 6]);

        let short = synthetic_selection(0, 3);
        let got = sample_positives(&mut rng, &short, 10).unwrap();
        assert_eq!(got.len(), 10);
        assert!(got.iter().all(|i| (1..=3).contains(i)));

        let empty = synthetic_selection(0, 0);
        assert!(sample_positives(&mut rng, &empty, 10).is_err());
    }

    fn bank_strategy() -> impl proptest::strategy::Strategy<Value = EmbeddingBank> {
        use proptest::prelude::*;
        (6usize..40, 1usize..5).prop_flat_map(|(n, d)| {
            proptest::collection::vec(proptest::collection::vec(-2i32..=2, d), n).prop_map(|rows| {
                let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
                EmbeddingBank::from_points(Matrix::from_rows(&rows).unwrap(), 0)
            })
        })
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn selection_invariants(bank in bank_strategy(), seed in 0u64..1000, m in 1usize..5, k in 1usize..6) {
            let model = kmeans_fit(&mut Rng::new(seed), &bank, m.min(bank.len()), 100, 1e-6).unwrap();
            proptest::prop_assert!(model.inertia_history.windows(2).all(|w| w[1] <= w[0]));
            let anchor = seed as usize % bank.len();
            let sel = select_positives(&bank, &model, anchor, k).unwrap();
            proptest::prop_assert!(!sel.omega_p.contains(&anchor));
            for &i in &sel.omega_p {
                proptest::prop_assert!(sel.omega1.contains(&i) && sel.omega2.contains(&i));
                let d = sq_dist_raw(bank.row(i), model.center(sel.cluster)).sqrt();
                proptest::prop_assert!(d <= sel.anchor_center_distance);
            }
            for (i, &c) in model.assignments.iter().enumerate() {
                let (best, d) = nearest_center(bank.row(i), &model.centers);
                proptest::prop_assert!(c == best || sq_dist_raw(bank.row(i), model.center(c)) == d);
            }
        }

        #[test]
        fn knn_matches_full_sort(bank in bank_strategy(), anchor in 0usize..6, k in 1usize..6) {
            let got = knn_with_distances(&bank, anchor, k).unwrap();
            let mut all: Vec<(usize, f64)> = (0..bank.len())
                .filter(|&i| i != anchor)
                .map(|i| (i, bank.distance(anchor, i)))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            proptest::prop_assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), all.iter().map(|p| p.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn refresh_cadence() {
        let cfg = NeighborhoodConfig::default();
        assert!(is_refresh_epoch(2, 2, &cfg));
        assert!(!is_refresh_epoch(3, 2, &cfg));
        assert!(is_refresh_epoch(7, 2, &cfg));
        assert!(!is_refresh_epoch(1, 2, &cfg));
    }
}
