//! Zero-shot scoring of frozen embeddings and subject-level vote aggregation.
//!
//! Embeddings of classes the model never trained on are split per class into a
//! fit half and an evaluation half. A one-vs-rest linear SVM and a KNN vote are
//! fit on the first half; k-means clusters the second half and is scored under
//! the cluster-to-class assignment that agrees best with the labels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bfm::EmbeddingBatch;
use crate::error::{EadError, Result};
use crate::matrix::{dot, Matrix};
use crate::train::{MetricsReport, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// Initial step size; steps decay as `eta0 / (1 + lambda * eta0 * t)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-3,
            epochs: 100,
            eta0: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotProtocol {
    pub held_out_classes: Vec<usize>,
    pub fit_fraction: f64,
    pub knn_k: usize,
    pub seed: u64,
    pub svm: SvmConfig,
}

impl ZeroShotProtocol {
    pub fn new(held_out_classes: Vec<usize>, seed: u64) -> Self {
        ZeroShotProtocol {
            held_out_classes,
            fit_fraction: 0.5,
            knn_k: 5,
            seed,
            svm: SvmConfig {
                seed,
                ..SvmConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<_> = self.held_out_classes.iter().collect();
        if unique.len() < 2 || unique.len() != self.held_out_classes.len() {
            return Err(EadError::Protocol(
                "zero-shot needs at least two distinct held-out classes".into(),
            ));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(EadError::Protocol(format!(
                "fit fraction must lie in (0, 1), got {}",
                self.fit_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotAccuracy {
    pub svm: f64,
    pub knn: f64,
    pub kmeans: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub held_out_classes: Vec<usize>,
    pub fit_samples: usize,
    pub eval_samples: usize,
    pub knn_k: usize,
    pub seed: u64,
    pub accuracy: ZeroShotAccuracy,
}

impl ZeroShotReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// Per-class seeded split into `(fit, eval)` row indices.
pub fn stratified_split(labels: &[usize], fit_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut eval) = (Vec::new(), Vec::new());
    for (class, mut rows) in by_class {
        rows.shuffle(&mut rng);
        let n_fit = ((rows.len() as f64) * fit_fraction).round() as usize;
        let n_fit = n_fit.min(rows.len().saturating_sub(1));
        if n_fit < 2 {
            return Err(EadError::Protocol(format!(
                "class {class} has {} samples; needs at least 2 to fit and 1 to evaluate",
                rows.len()
            )));
        }
        fit.extend_from_slice(&rows[..n_fit]);
        eval.extend_from_slice(&rows[n_fit..]);
    }
    fit.sort_unstable();
    eval.sort_unstable();
    Ok((fit, eval))
}

fn select_rows(x: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), x.cols(), |r, c| x.get(rows[r], c))
}

fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// One-vs-rest linear SVM on standardised features, trained by stochastic
/// subgradient descent on `lambda/2 |w|² + hinge`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    classes: Vec<usize>,
    weights: Matrix,
    bias: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearSvm {
    pub fn fit(x: &Matrix, labels: &[usize], cfg: &SvmConfig) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(EadError::Dimension("features and labels differ in length".into()));
        }
        let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(EadError::Domain("SVM needs at least two classes".into()));
        }
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        x.accumulate_col_sums(&mut mean);
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; d];
        for row in x.iter_rows() {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2);
            }
        }
        for s in &mut scale {
            let std = (*s / n as f64).sqrt();
            *s = if std > 1e-12 { 1.0 / std } else { 1.0 };
        }
        let z = Matrix::from_fn(n, d, |r, c| (x.get(r, c) - mean[c]) * scale[c]);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut weights = Matrix::zeros(classes.len(), d);
        let mut bias = vec![0.0; classes.len()];
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let eta = cfg.eta0 / (1.0 + cfg.lambda * cfg.eta0 * t as f64);
                t += 1;
                let xi = z.row(i);
                for (c, &class) in classes.iter().enumerate() {
                    let y = if labels[i] == class { 1.0 } else { -1.0 };
                    let w = weights.row_mut(c);
                    let margin = y * (dot(w, xi) + bias[c]);
                    let shrink = 1.0 - eta * cfg.lambda;
                    for v in w.iter_mut() {
                        *v *= shrink;
                    }
                    if margin < 1.0 {
                        for (v, xv) in w.iter_mut().zip(xi) {
                            *v += eta * y * xv;
                        }
                        bias[c] += eta * y;
                    }
                }
            }
        }
        Ok(LinearSvm {
            classes,
            weights,
            bias,
            mean,
            scale,
        })
    }

    /// One-vs-rest margins for a raw feature row.
    pub fn margins(&self, row: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect();
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &z) + b)
            .collect()
    }

    /// Class with the largest margin; ties go to the lower class index.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        x.iter_rows()
            .map(|row| self.classes[crate::train::argmax(&self.margins(row))])
            .collect()
    }
}

pub fn linear_svm(fit_x: &Matrix, fit_y: &[usize], eval_x: &Matrix, cfg: &SvmConfig) -> Result<Vec<usize>> {
    Ok(LinearSvm::fit(fit_x, fit_y, cfg)?.predict(eval_x))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote of the `k` nearest fit rows (Euclidean); vote ties go to the
/// smallest class index, distance ties to the earlier fit row.
pub fn knn(fit_x: &Matrix, fit_y: &[usize], eval_x: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > fit_x.rows() {
        return Err(EadError::Domain(format!(
            "k = {k} is invalid for {} fit samples",
            fit_x.rows()
        )));
    }
    let mut out = Vec::with_capacity(eval_x.rows());
    for q in eval_x.iter_rows() {
        let mut d: Vec<(f64, usize)> = fit_x
            .iter_rows()
            .enumerate()
            .map(|(i, r)| (sq_dist(q, r), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, i) in &d[..k] {
            *votes.entry(fit_y[i]).or_default() += 1;
        }
        let best = votes
            .iter()
            .fold((usize::MAX, 0), |acc, (&class, &n)| if n > acc.1 { (class, n) } else { acc });
        out.push(best.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-8;

fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    centroids
        .iter_rows()
        .enumerate()
        .map(|(c, cent)| (c, sq_dist(row, cent)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(x: &Matrix, k: usize, seed: u64) -> Result<KMeansFit> {
    let (n, d) = x.shape();
    if k == 0 || k > n {
        return Err(EadError::Domain(format!("k = {k} is invalid for {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(k, d);
    centroids.row_mut(0).copy_from_slice(x.row(rng.gen_range(0..n)));
    let mut closest: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.iter_rows().enumerate() {
            closest[i] = closest[i].min(sq_dist(r, centroids.row(c)));
        }
    }

    let mut assignments = vec![0; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for (i, r) in x.iter_rows().enumerate() {
            let (c, dd) = nearest(r, &centroids);
            assignments[i] = c;
            dist[i] = dd;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, r) in x.iter_rows().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] == 0 {
                // reseed from the point farthest from its centroid
                let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                dist[far] = 0.0;
                x.row(far).to_vec()
            } else {
                sums.row(c).iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, r) in x.iter_rows().enumerate() {
        assignments[i] = nearest(r, &centroids).0;
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

/// Minimum-cost perfect matching on a square cost matrix; `result[row] = column`.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials and matching with a 1-based sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            result[matched_row[j] - 1] = j - 1;
        }
    }
    result
}

/// Cluster-to-class assignment maximising total agreement over a
/// `clusters × classes` contingency table. Unmatched clusters map to `None`.
pub fn match_clusters(contingency: &[Vec<u64>]) -> Vec<Option<usize>> {
    let rows = contingency.len();
    let cols = contingency.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    let max = contingency.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    let v = if r < rows && c < cols { contingency[r][c] as f64 } else { 0.0 };
                    max - v
                })
                .collect()
        })
        .collect();
    hungarian_min(&cost)
        .into_iter()
        .take(rows)
        .map(|c| (c < cols).then_some(c))
        .collect()
}

/// k-means accuracy under the best one-to-one cluster/class matching.
pub fn kmeans_accuracy(x: &Matrix, labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(EadError::Dimension("features and labels differ in length".into()));
    }
    let fit = kmeans(x, k, seed)?;
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let class_pos = |l: usize| classes.binary_search(&l).expect("known class");
    let mut table = vec![vec![0u64; classes.len()]; k];
    for (&a, &l) in fit.assignments.iter().zip(labels) {
        table[a][class_pos(l)] += 1;
    }
    let matching = match_clusters(&table);
    let agree: u64 = matching
        .iter()
        .enumerate()
        .filter_map(|(c, m)| m.map(|col| table[c][col]))
        .sum();
    Ok(agree as f64 / labels.len() as f64)
}

/// Fits SVM and KNN on the fit half of each held-out class, scores them and
/// k-means on the evaluation half.
pub fn run_zeroshot(batch: &EmbeddingBatch, protocol: &ZeroShotProtocol) -> Result<ZeroShotReport> {
    protocol.validate()?;
    let held: BTreeSet<usize> = protocol.held_out_classes.iter().copied().collect();
    let batch = batch.filter_labels(|l| held.contains(&l));
    for class in &held {
        if !batch.labels.contains(class) {
            return Err(EadError::Protocol(format!("held-out class {class} has no samples")));
        }
    }
    let (fit, eval) = stratified_split(&batch.labels, protocol.fit_fraction, protocol.seed)?;
    let fit_x = select_rows(&batch.embeddings, &fit);
    let eval_x = select_rows(&batch.embeddings, &eval);
    let fit_y: Vec<usize> = fit.iter().map(|&i| batch.labels[i]).collect();
    let eval_y: Vec<usize> = eval.iter().map(|&i| batch.labels[i]).collect();

    let svm = accuracy(&eval_y, &linear_svm(&fit_x, &fit_y, &eval_x, &protocol.svm)?);
    let k = protocol.knn_k.min(fit.len());
    let knn_acc = accuracy(&eval_y, &knn(&fit_x, &fit_y, &eval_x, k)?);
    let kmeans_acc = kmeans_accuracy(&eval_x, &eval_y, held.len(), protocol.seed)?;
    Ok(ZeroShotReport {
        held_out_classes: held.into_iter().collect(),
        fit_samples: fit.len(),
        eval_samples: eval.len(),
        knn_k: k,
        seed: protocol.seed,
        accuracy: ZeroShotAccuracy {
            svm,
            knn: knn_acc,
            kmeans: kmeans_acc,
        },
    })
}

/// One sample's vote for subject-level aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVote {
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub predicted: Vec<usize>,
    pub aggregated: usize,
    pub label: usize,
    /// `votes[class]` = number of samples predicted as `class`.
    pub votes: Vec<usize>,
}

/// Groups per-sample predictions by subject for [`subject_aggregate`].
pub fn votes_by_subject(predictions: &[Prediction]) -> BTreeMap<String, Vec<SampleVote>> {
    let mut groups: BTreeMap<String, Vec<SampleVote>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.subject_id.clone()).or_default().push(SampleVote {
            predicted: p.predicted,
            probabilities: p.probabilities.clone(),
            label: p.label,
        });
    }
    groups
}

fn mean_probability(samples: &[SampleVote], class: usize) -> f64 {
    samples
        .iter()
        .map(|s| s.probabilities.get(class).copied().unwrap_or(0.0))
        .sum::<f64>()
        / samples.len() as f64
}

/// Majority vote per subject; tied classes are separated by their mean softmax
/// probability over the subject's samples, then by lower index.
pub fn subject_aggregate(
    groups: &BTreeMap<String, Vec<SampleVote>>,
    num_classes: usize,
) -> Result<(Vec<SubjectPrediction>, MetricsReport)> {
    let mut out = Vec::new();
    for (subject, samples) in groups {
        if samples.is_empty() {
            log::warn!("subject {subject} has no samples; excluded from subject-level metrics");
            continue;
        }
        let mut votes = vec![0usize; num_classes];
        let mut truth = vec![0usize; num_classes];
        for s in samples {
            if s.predicted >= num_classes || s.label >= num_classes {
                return Err(EadError::Domain(format!(
                    "subject {subject}: class index out of range"
                )));
            }
            votes[s.predicted] += 1;
            truth[s.label] += 1;
        }
        let top = *votes.iter().max().expect("nonempty");
        let aggregated = (0..num_classes)
            .filter(|&c| votes[c] == top)
            .map(|c| (c, mean_probability(samples, c)))
            .fold(None::<(usize, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("at least one top class")
            .0;
        let label = crate::train::argmax(&truth.iter().map(|&n| n as f64).collect::<Vec<_>>());
        out.push(SubjectPrediction {
            subject_id: subject.clone(),
            predicted: samples.iter().map(|s| s.predicted).collect(),
            aggregated,
            label,
            votes,
        });
    }
    if out.is_empty() {
        return Err(EadError::Config("no subject has any samples".into()));
    }
    let truth: Vec<usize> = out.iter().map(|s| s.label).collect();
    let pred: Vec<usize> = out.iter().map(|s| s.aggregated).collect();
    let report = MetricsReport::from_predictions(&truth, &pred, num_classes)?;
    Ok((out, report))
}
