//! K-means gating: per-task centroid summaries under the distortion-aware
//! bank, min-distance relevance, softmin weighting and stage averaging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{invalid, Error, Result};
use crate::normbank::BankRegistry;
use crate::numerics::Tensor;
use crate::seed::{derive_seed, rng_from};
use crate::synthdata::{batch_of, TaskDataset};

/// Lloyd iteration cap.
pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    /// Centroids per task and stage.
    pub k: usize,
    /// Softmin temperature.
    pub tau: f64,
    /// 1-based stage indices whose pooled features drive the gate.
    pub stages: Vec<usize>,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            k: 8,
            tau: 32.0,
            stages: vec![3, 4],
        }
    }
}

impl GatingConfig {
    pub fn validate(&self, stage_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(invalid(format!(
                "temperature {} must be finite and non-negative",
                self.tau
            )));
        }
        if self.stages.is_empty() || self.stages.iter().any(|&s| s == 0 || s > stage_count) {
            return Err(invalid(format!(
                "gating stages {:?} must lie in 1..={stage_count}",
                self.stages
            )));
        }
        let mut sorted = self.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return Err(invalid("gating stages repeat"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Soft,
    Hard,
}

/// Result of clustering one point set.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `[K, C]`; K may be smaller than requested when there are fewer points.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the rows of `points`.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    let (n, c) = points.dims2()?;
    if n == 0 || k == 0 {
        return Err(invalid("kmeans needs at least one point and one cluster"));
    }
    if !points.all_finite() {
        return Err(invalid("kmeans points must be finite"));
    }
    let k = k.min(n);
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = rng_from(seed);

    let mut centroids = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(pts[pick].clone());
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            changed |= assignments[i] != j;
            assignments[i] = j;
            sse += d;
        }
        sse_history.push(sse);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in pts.iter().zip(&assignments) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters move onto the point worst served by its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&pts[a], &centroids[assignments[a]]);
                        let db = sq_dist(&pts[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centroids[j] = pts[far].clone();
                assignments[far] = j;
                counts[j] = 1;
            }
        }
    }

    let data = centroids
        .iter()
        .flat_map(|r| r.iter().map(|&v| v as f32))
        .collect();
    Ok(KMeans {
        centroids: Tensor::new(vec![k, c], data)?,
        assignments,
        sse_history,
    })
}

/// Centroid summaries of every task at every gating stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidStore {
    config: GatingConfig,
    /// Insertion-ordered `(task_id, one [K, C_s] matrix per gating stage)`.
    entries: Vec<(String, Vec<Tensor>)>,
}

impl CentroidStore {
    pub fn new(config: GatingConfig) -> Self {
        Self {
            config,
            entries: Vec::new(),
        }
    }

    pub fn config(&self) -> &GatingConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    /// Centroid matrices of `task_id`, ordered like the configured stages.
    pub fn get(&self, task_id: &str) -> Option<&[Tensor]> {
        self.entries
            .iter()
            .find(|(id, _)| id == task_id)
            .map(|(_, m)| m.as_slice())
    }

    /// Number of `(task, stage)` entries.
    pub fn entry_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn insert(&mut self, task_id: impl Into<String>, centroids: Vec<Tensor>) -> Result<()> {
        let task_id = task_id.into();
        if self.get(&task_id).is_some() {
            return Err(Error::State(format!(
                "task `{task_id}` is already summarized"
            )));
        }
        if centroids.len() != self.config.stages.len() {
            return Err(invalid("one centroid matrix per gating stage is required"));
        }
        for (i, m) in centroids.iter().enumerate() {
            let (k, dim) = m.dims2()?;
            if k == 0 || k > self.config.k || !m.all_finite() {
                return Err(invalid(format!(
                    "stage {} centroids are empty, too many or non-finite",
                    self.config.stages[i]
                )));
            }
            if let Some((_, first)) = self.entries.first() {
                if first[i].shape()[1] != dim {
                    return Err(invalid("centroid width differs from earlier tasks"));
                }
            }
        }
        self.entries.push((task_id, centroids));
        Ok(())
    }

    /// Fails unless the store summarizes exactly the registry's tasks.
    pub fn check_covers(&self, registry: &BankRegistry) -> Result<()> {
        let ids = registry.task_ids();
        if ids.len() != self.entries.len() || ids.iter().any(|id| self.get(id).is_none()) {
            return Err(Error::State(format!(
                "centroid store covers {:?}, registry holds {:?}",
                self.task_ids(),
                ids
            )));
        }
        Ok(())
    }
}

/// Clusters the gating-bank features of a task's training images at every
/// gating stage and records the centroids in `store`.
pub fn summarize_task(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    dataset: &TaskDataset,
    store: &mut CentroidStore,
    seed: u64,
) -> Result<()> {
    let bank = registry
        .gating_bank()
        .ok_or_else(|| Error::State("no distortion-aware bank installed".into()))?;
    store.config.validate(backbone.config().stage_count())?;
    if dataset.train.is_empty() {
        return Err(invalid("task has no training images"));
    }
    let feats = backbone.features(bank, &batch_of(&dataset.train)?)?;
    let mut mats = Vec::with_capacity(store.config.stages.len());
    for &s in &store.config.stages {
        let label = format!("kmeans/{}/stage{s}", dataset.task_id);
        mats.push(
            kmeans(
                &feats.pooled[s - 1],
                store.config.k,
                derive_seed(seed, &label),
            )?
            .centroids,
        );
    }
    store.insert(dataset.task_id.clone(), mats)
}

/// `min_k ‖feature − c_k‖₂` over the rows of `centroids`.
pub fn min_distance(feature: &[f32], centroids: &Tensor) -> Result<f64> {
    let (k, c) = centroids.dims2()?;
    if c != feature.len() {
        return Err(invalid(format!(
            "feature has {} entries, centroids have {c}",
            feature.len()
        )));
    }
    let mut best = f64::INFINITY;
    for j in 0..k {
        let d: f64 = feature
            .iter()
            .zip(centroids.row(j))
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        best = best.min(d);
    }
    Ok(best.sqrt())
}

/// `exp(−τ·d_t) / Σ_u exp(−τ·d_u)`, shifted by the minimum distance.
pub fn softmin_weights(distances: &[f64], tau: f64) -> Vec<f64> {
    if distances.is_empty() {
        return Vec::new();
    }
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances
        .iter()
        .map(|&d| (-tau * (d - dmin)).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Elementwise mean of per-stage weight vectors.
pub fn stage_average(per_stage: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_stage
        .first()
        .ok_or_else(|| invalid("no stage weights"))?;
    let t = first.len();
    if per_stage.iter().any(|w| w.len() != t) {
        return Err(invalid("stage weight vectors differ in length"));
    }
    let s = per_stage.len() as f64;
    Ok((0..t)
        .map(|i| per_stage.iter().map(|w| w[i]).sum::<f64>() / s)
        .collect())
}

/// Index of the smallest value, ties resolved toward the lower index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Gate decision for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub weights: Vec<f64>,
    /// `[stage][task]` minimal distances.
    pub distances: Vec<Vec<f64>>,
    /// Selected task index in hard mode.
    pub selected: Option<usize>,
}

/// Turns per-stage distance vectors into task weights.
pub fn weights_from_distances(
    distances: Vec<Vec<f64>>,
    tau: f64,
    mode: GateMode,
) -> Result<GateOutput> {
    match mode {
        GateMode::Soft => {
            let per_stage: Vec<Vec<f64>> =
                distances.iter().map(|d| softmin_weights(d, tau)).collect();
            let weights = stage_average(&per_stage)?;
            Ok(GateOutput {
                weights,
                distances,
                selected: None,
            })
        }
        GateMode::Hard => {
            let mean = stage_average(&distances)?;
            let sel = argmin(&mean).ok_or_else(|| invalid("no tasks to gate over"))?;
            let mut weights = vec![0.0; mean.len()];
            weights[sel] = 1.0;
            Ok(GateOutput {
                weights,
                distances,
                selected: Some(sel),
            })
        }
    }
}

/// Gates every image of `batch` over the registry's tasks, in registry order.
/// Gating features are extracted once per image under the distortion-aware bank.
pub fn gate_batch(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    store: &CentroidStore,
    batch: &Tensor,
    mode: GateMode,
) -> Result<Vec<GateOutput>> {
    store.check_covers(registry)?;
    if registry.is_empty() {
        return Err(Error::State("registry holds no tasks".into()));
    }
    let bank = registry
        .gating_bank()
        .ok_or_else(|| Error::State("no distortion-aware bank installed".into()))?;
    let feats = backbone.features(bank, batch)?;
    let ids = registry.task_ids();
    let n = batch.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut distances = Vec::with_capacity(store.config.stages.len());
        for (si, &s) in store.config.stages.iter().enumerate() {
            let f = feats.pooled[s - 1].row(i);
            let row = ids
                .iter()
                .map(|id| min_distance(f, &store.get(id).expect("coverage checked")[si]))
                .collect::<Result<Vec<_>>>()?;
            distances.push(row);
        }
        out.push(weights_from_distances(distances, store.config.tau, mode)?);
    }
    Ok(out)
}

/// Single-image convenience wrapper over [`gate_batch`].
pub fn gate(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    store: &CentroidStore,
    image: &Tensor,
    mode: GateMode,
) -> Result<GateOutput> {
    let batch = Tensor::stack(&[image])?;
    Ok(gate_batch(backbone, registry, store, &batch, mode)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(rows: &[[f32; 2]]) -> Tensor {
        Tensor::new(
            vec![rows.len(), 2],
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    fn sorted_rows(t: &Tensor) -> Vec<Vec<f32>> {
        let mut rows: Vec<Vec<f32>> = (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    /// Best 2-partition by exhaustive search; returns its sorted centroids.
    fn brute_force_two_means(p: &[[f32; 2]]) -> Vec<Vec<f32>> {
        let n = p.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let mut cents = vec![];
            let mut sse = 0.0;
            for side in [true, false] {
                let members: Vec<&[f32; 2]> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| &p[i])
                    .collect();
                let m = members.len() as f64;
                let cx = members.iter().map(|q| q[0] as f64).sum::<f64>() / m;
                let cy = members.iter().map(|q| q[1] as f64).sum::<f64>() / m;
                sse += members
                    .iter()
                    .map(|q| (q[0] as f64 - cx).powi(2) + (q[1] as f64 - cy).powi(2))
                    .sum::<f64>();
                cents.push(vec![cx as f32, cy as f32]);
            }
            if sse < best.0 {
                cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
                best = (sse, cents);
            }
        }
        best.1
    }

    #[test]
    fn two_clusters_match_exhaustive_partition() {
        let p = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let oracle = brute_force_two_means(&p);
        for seed in 0..10 {
            let km = kmeans(&pts(&p), 2, seed).unwrap();
            assert_eq!(sorted_rows(&km.centroids), oracle);
        }
        assert_eq!(oracle, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn k_equal_n_returns_the_points() {
        let p = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let km = kmeans(&pts(&p), 3, 4).unwrap();
        assert_eq!(sorted_rows(&km.centroids), sorted_rows(&pts(&p)));
        assert_eq!(*km.sse_history.last().unwrap(), 0.0);
    }

    #[test]
    fn k_is_reduced_to_n() {
        let km = kmeans(&pts(&[[1.0, 1.0], [2.0, 2.0]]), 5, 0).unwrap();
        assert_eq!(km.centroids.shape(), &[2, 2]);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let km = kmeans(&pts(&[[1.0, 1.0]; 6]), 3, 9).unwrap();
        assert!(km.centroids.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kmeans_rejects_bad_input() {
        assert!(kmeans(&pts(&[[f32::NAN, 0.0]]), 1, 0).is_err());
        assert!(kmeans(&pts(&[[0.0, 0.0]]), 0, 0).is_err());
        assert!(kmeans(&Tensor::zeros(&[0, 2]), 1, 0).is_err());
    }

    #[test]
    fn min_distance_examples() {
        let c = pts(&[[0.0, 0.0]]);
        assert_eq!(min_distance(&[3.0, 4.0], &c).unwrap(), 5.0);
        let c = pts(&[[1.0, 1.0], [2.0, -3.0]]);
        assert_eq!(min_distance(&[2.0, -3.0], &c).unwrap(), 0.0);
        assert!(min_distance(&[1.0], &c).is_err());
    }

    #[test]
    fn softmin_examples() {
        assert_eq!(softmin_weights(&[2.0, 2.0, 2.0, 2.0], 32.0), vec![0.25; 4]);
        assert_eq!(softmin_weights(&[0.1, 5.0, 9.0], 0.0), vec![1.0 / 3.0; 3]);
        let w = softmin_weights(&[0.0, 10.0], 32.0);
        assert!((w[0] - 1.0).abs() < 1e-9 && w[1].abs() < 1e-9);
        let w = softmin_weights(&[1e6, 1e6 + 1.0], 1e3);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stage_average_examples() {
        assert_eq!(
            stage_average(&[vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap(),
            vec![0.2, 0.8]
        );
        assert_eq!(
            stage_average(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(stage_average(&[vec![1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn hard_mode_ties_go_to_lower_index() {
        let g = weights_from_distances(vec![vec![2.0, 1.0, 1.0]], 32.0, GateMode::Hard).unwrap();
        assert_eq!(g.weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(g.selected, Some(1));
        let g = weights_from_distances(vec![vec![1.0], vec![3.0]], 32.0, GateMode::Soft).unwrap();
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(GatingConfig::default().validate(4).is_ok());
        assert!(GatingConfig {
            stages: vec![0],
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GatingConfig {
            stages: vec![5],
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GatingConfig {
            stages: vec![3, 3],
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GatingConfig {
            tau: -1.0,
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GatingConfig {
            k: 0,
            ..Default::default()
        }
        .validate(4)
        .is_err());
    }

    fn distances() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..4).prop_flat_map(|(t, s)| {
            prop::collection::vec(prop::collection::vec(0.0f64..50.0, t), s)
        })
    }

    proptest! {
        #[test]
        fn soft_weights_form_a_distribution(d in distances(), tau in 0.0f64..100.0) {
            let g = weights_from_distances(d, tau, GateMode::Soft).unwrap();
            prop_assert!(g.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn hard_weights_are_one_hot_at_argmin(d in distances()) {
            let g = weights_from_distances(d.clone(), 32.0, GateMode::Hard).unwrap();
            prop_assert_eq!(g.weights.iter().filter(|&&w| w == 1.0).count(), 1);
            prop_assert_eq!(g.weights.iter().filter(|&&w| w == 0.0).count(), g.weights.len() - 1);
            let mean = stage_average(&d).unwrap();
            let sel = g.selected.unwrap();
            prop_assert!(mean.iter().all(|&m| m >= mean[sel]));
        }

        #[test]
        fn shrinking_a_distance_never_lowers_its_weight(
            d in prop::collection::vec(0.0f64..20.0, 2..6),
            idx in 0usize..6,
            cut in 0.0f64..1.0,
            tau in 0.0f64..64.0,
        ) {
            let i = idx % d.len();
            let before = softmin_weights(&d, tau)[i];
            let mut e = d.clone();
            e[i] *= cut;
            prop_assert!(softmin_weights(&e, tau)[i] >= before - 1e-12);
        }

        #[test]
        fn hard_argmin_ignores_increasing_transforms(d in prop::collection::vec(0.0f64..20.0, 1..8)) {
            let base = argmin(&d);
            for f in [|x: f64| x * x, |x: f64| (x + 1.0).ln(), |x: f64| 3.0 * x + 7.0, |x: f64| x.exp()] {
                let t: Vec<f64> = d.iter().map(|&x| f(x)).collect();
                prop_assert_eq!(argmin(&t), base);
            }
        }

        #[test]
        fn lloyd_sse_never_increases(
            raw in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..40),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let p: Vec<[f32; 2]> = raw.iter().map(|&(a, b)| [a, b]).collect();
            let km = kmeans(&pts(&p), k, seed).unwrap();
            for w in km.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn min_distance_matches_exhaustive_scan(
            c in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..10),
            f in (-3.0f32..3.0, -3.0f32..3.0),
        ) {
            let rows: Vec<[f32; 2]> = c.iter().map(|&(a, b)| [a, b]).collect();
            let scan = rows
                .iter()
                .map(|r| ((f.0 as f64 - r[0] as f64).powi(2) + (f.1 as f64 - r[1] as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((min_distance(&[f.0, f.1], &pts(&rows)).unwrap() - scan).abs() < 1e-12);
        }
    }
}
