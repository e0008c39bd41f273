//! Frozen-feature linear probe, kNN probe, label-fraction fine-tuning and
//! intra-class similarity.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Image};
use crate::encoder::{backward_features, embed, features, forward_features, EncoderParams};
use crate::error::{ClimError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::numerics::{dot_raw, Rng};
use crate::parallel::{chunk_ranges, map_indexed, ExecMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Learning rate of the linear head.
    pub lr: f64,
    /// Learning rate of the encoder layers during fine-tuning.
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_fraction: f64,
    pub test_fraction: f64,
    pub knn_k: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            lr_backbone: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            label_fraction: 1.0,
            test_fraction: 0.2,
            knn_k: 20,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| ClimError::Config {
            key: format!("eval.{key}"),
            reason: reason.into(),
        };
        if !(self.lr > 0.0) {
            return Err(bad("lr", "must be > 0"));
        }
        if !(self.lr_backbone > 0.0) {
            return Err(bad("lr_backbone", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(bad("label_fraction", "must be in (0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(bad("test_fraction", "must be in (0, 1)"));
        }
        if self.knn_k == 0 {
            return Err(bad("knn_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Class-stratified split: about `test_fraction` of every class (at least one
/// sample when the class has two or more) goes to the test side. Both index
/// lists are ascending.
pub fn stratified_split(labels: &[u32], test_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        rng.shuffle(&mut members);
        let n = members.len();
        let mut n_test = (test_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        } else {
            n_test = 0;
        }
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn gather(images: &[Image], idx: &[usize]) -> Vec<Image> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

fn batched<F>(images: &[Image], cols: usize, exec: ExecMode, f: F) -> Result<Matrix>
where
    F: Fn(&[Image]) -> Result<Matrix> + Sync + Send,
{
    let chunks = chunk_ranges(images.len(), 128);
    let parts = map_indexed(exec, chunks.len(), |c| f(&images[chunks[c].clone()]));
    let mut out = Vec::with_capacity(images.len() * cols);
    for p in parts {
        out.extend_from_slice(p?.as_slice());
    }
    Matrix::from_vec(images.len(), cols, out)
}

/// Trunk features of every image.
pub fn dataset_features(params: &EncoderParams, images: &[Image], exec: ExecMode) -> Result<Matrix> {
    batched(images, params.dims().feat, exec, |b| features(params, b))
}

/// Unit-norm head embeddings of every image.
pub fn dataset_embeddings(params: &EncoderParams, images: &[Image], exec: ExecMode) -> Result<Matrix> {
    batched(images, params.dims().embed, exec, |b| embed(params, b))
}

/// Per-column mean and standard deviation (1 where a column is constant).
fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in sd.iter_mut().zip(x.row(r)).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut sd {
        *s = (*s / n.max(1) as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    (mu, sd)
}

fn standardize(x: &Matrix, mu: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mu).zip(sd) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Row-wise softmax cross-entropy: mean loss and `dL/dlogits` (already divided
/// by the row count).
fn softmax_xent(logits: &Matrix, labels: &[u32]) -> (f64, Matrix) {
    let (n, c) = logits.shape();
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let y = labels[r] as usize;
        loss += z.ln() + m - row[y];
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[k] - m).exp() / z;
            *g = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n.max(1) as f64, grad)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax regression on fixed (already standardized) inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut l = matmul(x, &self.weight);
        for r in 0..l.rows() {
            for (v, b) in l.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        l
    }

    pub fn predict(&self, x: &Matrix) -> Vec<u32> {
        let l = self.logits(x);
        (0..l.rows()).map(|r| argmax(l.row(r)) as u32).collect()
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[u32]) -> f64 {
        accuracy(&self.predict(x), labels)
    }
}

pub fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn rows_of(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).copy_from_slice(x.row(i));
    }
    out
}

/// Minibatch SGD with momentum on the softmax cross-entropy.
pub fn fit_linear(x: &Matrix, labels: &[u32], classes: usize, cfg: &ProbeConfig, rng: &mut Rng) -> Result<LinearClassifier> {
    if x.rows() != labels.len() {
        return Err(ClimError::DimensionMismatch {
            left: x.rows(),
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(ClimError::invalid(format!("label {bad} outside {classes} classes")));
    }
    let mut clf = LinearClassifier::zeros(x.cols(), classes);
    let mut vw = Matrix::zeros(x.cols(), classes);
    let mut vb = vec![0.0; classes];
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = rows_of(x, chunk);
            let yb: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, g) = softmax_xent(&clf.logits(&xb), &yb);
            let gw = matmul_tn(&xb, &g);
            for ((v, gv), w) in vw.as_mut_slice().iter_mut().zip(gw.as_slice()).zip(clf.weight.as_mut_slice()) {
                *v = cfg.momentum * *v + gv + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
            for (k, (v, b)) in vb.iter_mut().zip(clf.bias.iter_mut()).enumerate() {
                let gb: f64 = (0..g.rows()).map(|r| g.get(r, k)).sum();
                *v = cfg.momentum * *v + gb;
                *b -= cfg.lr * *v;
            }
        }
    }
    Ok(clf)
}

/// Linear probe on precomputed features: standardizes with train statistics,
/// fits on `train`, scores on `test`.
pub fn linear_probe_features(
    feats: &Matrix,
    labels: &[u32],
    classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let xtr = rows_of(feats, train);
    let (mu, sd) = column_stats(&xtr);
    let xtr = standardize(&xtr, &mu, &sd);
    let ytr: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
    let clf = fit_linear(&xtr, &ytr, classes, cfg, rng)?;
    let xte = standardize(&rows_of(feats, test), &mu, &sd);
    let yte: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    Ok(clf.accuracy(&xte, &yte))
}

fn split_for(dataset: &Dataset, cfg: &ProbeConfig) -> Result<(Vec<usize>, Vec<usize>, Rng)> {
    let labels = dataset.require_labels()?;
    let root = Rng::new(cfg.seed);
    let (train, test) = stratified_split(labels, cfg.test_fraction, &mut root.split(1));
    if train.is_empty() || test.is_empty() {
        return Err(ClimError::invalid("dataset too small for a train/test split"));
    }
    Ok((train, test, root.split(2)))
}

/// Top-1 accuracy of a softmax layer trained on frozen trunk features.
pub fn linear_probe(params: &EncoderParams, dataset: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    let (train, test, mut rng) = split_for(dataset, cfg)?;
    let labels = dataset.require_labels()?;
    let classes = dataset.class_count().unwrap_or(0) as usize;
    let feats = dataset_features(params, dataset.images(), cfg.exec)?;
    linear_probe_features(&feats, labels, classes, &train, &test, cfg, &mut rng)
}

/// Cosine-similarity kNN vote of every `query` row against the `reference`
/// rows. Every reference tied with the k-th most similar one also votes;
/// vote ties go to the lowest class id.
pub fn knn_classify(reference: &Matrix, ref_labels: &[u32], queries: &Matrix, k: usize, classes: usize) -> Result<Vec<u32>> {
    if reference.rows() == 0 {
        return Err(ClimError::invalid("kNN probe needs a non-empty reference set"));
    }
    if reference.cols() != queries.cols() {
        return Err(ClimError::DimensionMismatch {
            left: reference.cols(),
            right: queries.cols(),
        });
    }
    let k = k.min(reference.rows());
    let unit = |m: &Matrix| -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = dot_raw(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    };
    let sims = matmul_nt(&unit(queries), &unit(reference));
    let mut out = Vec::with_capacity(queries.rows());
    for r in 0..sims.rows() {
        let row = sims.row(r);
        let mut sorted: Vec<f64> = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[k - 1];
        let mut votes = vec![0usize; classes];
        for (j, &s) in row.iter().enumerate() {
            if s >= cutoff {
                votes[ref_labels[j] as usize] += 1;
            }
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// kNN accuracy in embedding space: held-out samples vote among the training
/// split, so no sample ever sees itself.
pub fn knn_probe(params: &EncoderParams, dataset: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    let (train, test, _) = split_for(dataset, cfg)?;
    let labels = dataset.require_labels()?;
    let classes = dataset.class_count().unwrap_or(0) as usize;
    let emb = dataset_embeddings(params, dataset.images(), cfg.exec)?;
    knn_probe_embeddings(&emb, labels, classes, &train, &test, cfg.knn_k)
}

pub fn knn_probe_embeddings(emb: &Matrix, labels: &[u32], classes: usize, train: &[usize], test: &[usize], k: usize) -> Result<f64> {
    let ref_labels: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
    let pred = knn_classify(&rows_of(emb, train), &ref_labels, &rows_of(emb, test), k, classes)?;
    let truth: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(&pred, &truth))
}

/// Class-balanced subset of `train` keeping `floor(fraction·count)` samples of
/// every class.
pub fn label_subset(labels: &[u32], train: &[usize], fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for &i in train {
        by_class[labels[i] as usize].push(i);
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let keep = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if keep == 0 {
            return Err(ClimError::invalid(format!(
                "label fraction {fraction} leaves class {c} ({} training samples) without a labeled sample",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tunes stem, trunk and a fresh zero-initialized linear head on a
/// class-balanced label fraction, with separate learning rates for the
/// encoder and the head. Head inputs are standardized with statistics of the
/// initial features. Returns held-out top-1.
pub fn finetune_fraction(params: &EncoderParams, dataset: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    let (train, test, mut rng) = split_for(dataset, cfg)?;
    let labels = dataset.require_labels()?;
    let classes = dataset.class_count().unwrap_or(0) as usize;
    let subset = label_subset(labels, &train, cfg.label_fraction, &mut rng)?;

    let mut enc = params.clone();
    let images = dataset.images();
    let init = dataset_features(&enc, &gather(images, &subset), cfg.exec)?;
    let (mu, sd) = column_stats(&init);
    let mut head = LinearClassifier::zeros(enc.dims().feat, classes);
    let mut v_head_w = Matrix::zeros(enc.dims().feat, classes);
    let mut v_head_b = vec![0.0; classes];
    let mut v_enc = EncoderParams::zeros(enc.dims());

    let mut order = subset.clone();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather(images, chunk);
            let yb: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (h, acts) = forward_features(&enc, &batch)?;
            let x = standardize(&h, &mu, &sd);
            let (loss, g) = softmax_xent(&head.logits(&x), &yb);
            if !loss.is_finite() {
                return Err(ClimError::NonFinite("fine-tuning loss".into()));
            }
            let mut dh = matmul_nt(&g, &head.weight);
            for r in 0..dh.rows() {
                for (v, s) in dh.row_mut(r).iter_mut().zip(&sd) {
                    *v /= s;
                }
            }
            let genc = backward_features(&enc, &acts, &dh)?;
            let gw = matmul_tn(&x, &g);
            for ((v, gv), w) in v_head_w.as_mut_slice().iter_mut().zip(gw.as_slice()).zip(head.weight.as_mut_slice()) {
                *v = cfg.momentum * *v + gv + cfg.weight_decay * *w;
                *w -= cfg.lr * *v;
            }
            for (k, (v, b)) in v_head_b.iter_mut().zip(head.bias.iter_mut()).enumerate() {
                let gb: f64 = (0..g.rows()).map(|r| g.get(r, k)).sum();
                *v = cfg.momentum * *v + gb;
                *b -= cfg.lr * *v;
            }
            crate::trainer::sgd_step(&mut enc, &genc, &mut v_enc, cfg.lr_backbone, cfg.momentum, cfg.weight_decay)?;
        }
    }
    let xte = standardize(&dataset_features(&enc, &gather(images, &test), cfg.exec)?, &mu, &sd);
    let yte: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    Ok(head.accuracy(&xte, &yte))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraClassSimilarity {
    /// `None` for classes with fewer than two samples.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the classes that have a value.
    pub mean: f64,
}

/// Mean cosine similarity over all unordered same-class pairs, per class.
pub fn intra_class_similarity_of(emb: &Matrix, labels: &[u32]) -> Result<IntraClassSimilarity> {
    if emb.rows() != labels.len() {
        return Err(ClimError::DimensionMismatch {
            left: emb.rows(),
            right: labels.len(),
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let unit: Vec<Vec<f64>> = (0..emb.rows())
        .map(|r| {
            let row = emb.row(r);
            let n = dot_raw(row, row).sqrt();
            row.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let mut per_class = Vec::with_capacity(classes);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            if !members.is_empty() {
                log::warn!("class {c} has a single sample; skipped in intra-class similarity");
            }
            per_class.push(None);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += dot_raw(&unit[i], &unit[j]);
                pairs += 1;
            }
        }
        per_class.push(Some(sum / pairs as f64));
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(ClimError::invalid("no class has two or more samples"));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(IntraClassSimilarity { per_class, mean })
}

pub fn intra_class_similarity(params: &EncoderParams, dataset: &Dataset, exec: ExecMode) -> Result<IntraClassSimilarity> {
    let labels = dataset.require_labels()?;
    let emb = dataset_embeddings(params, dataset.images(), exec)?;
    intra_class_similarity_of(&emb, labels)
}
