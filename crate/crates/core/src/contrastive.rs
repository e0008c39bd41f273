//! Negative-key queue and the InfoNCE, mixed and multi-resolution losses.
//!
//! Keys come from the momentum encoder and are treated as constants; every
//! gradient here is with respect to the query embedding only. All three losses
//! share one evaluation path (a per-query summary of the queue logits), which
//! is what makes the endpoint identities hold bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{ClimError, Result};
use crate::numerics::{dot_raw, ensure_unit, random_unit_vector, Rng};

/// Tolerance on unit-norm preconditions.
pub const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyView {
    /// Keys from an independently augmented view of each source image.
    #[default]
    Augmented,
    /// Keys from the un-augmented whole image.
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    /// Start full of random unit vectors.
    Random,
    /// Start full of initial key-encoder embeddings of augmented training samples.
    #[default]
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub queue_capacity: usize,
    pub key_view: KeyView,
    /// Enqueue keys from every resolution instead of only the base one.
    pub queue_all_resolutions: bool,
    pub queue_init: QueueInit,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            queue_capacity: 4096,
            key_view: KeyView::Augmented,
            queue_all_resolutions: false,
            queue_init: QueueInit::Encoded,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ClimError::Config {
                key: "contrastive.tau".into(),
                reason: "must be > 0".into(),
            });
        }
        if self.queue_capacity == 0 {
            return Err(ClimError::Config {
                key: "contrastive.queue_capacity".into(),
                reason: "must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// FIFO ring of unit-norm keys.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    len: usize,
    head: usize,
    trained: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(ClimError::invalid("queue capacity and key dim must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            keys: vec![0.0; capacity * dim],
            len: 0,
            head: 0,
            trained: 0,
        })
    }

    /// Full queue of random unit keys. These placeholders are not counted by
    /// [`NegativeQueue::trained_len`].
    pub fn with_random_keys(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for slot in q.keys.chunks_exact_mut(dim) {
            slot.copy_from_slice(&random_unit_vector(rng, dim));
        }
        q.len = capacity;
        Ok(q)
    }

    /// Full queue holding the given keys as placeholders (not counted by
    /// [`NegativeQueue::trained_len`]).
    pub fn with_placeholder_keys<K: AsRef<[f64]>>(capacity: usize, dim: usize, keys: &[K]) -> Result<Self> {
        if keys.len() != capacity {
            return Err(ClimError::DimensionMismatch {
                left: capacity,
                right: keys.len(),
            });
        }
        let mut q = Self::new(capacity, dim)?;
        q.enqueue(keys)?;
        q.trained = 0;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of slots holding keys pushed by [`NegativeQueue::enqueue`].
    pub fn trained_len(&self) -> usize {
        self.trained
    }

    /// Stored keys, oldest first.
    pub fn keys(&self) -> Vec<&[f64]> {
        let start = (self.head + self.capacity - self.len) % self.capacity;
        (0..self.len)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.keys[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    /// Storage-order iteration. Until the ring wraps, the filled slots are
    /// exactly `0..len`.
    fn raw_keys(&self) -> impl Iterator<Item = &[f64]> {
        self.keys[..self.len * self.dim].chunks_exact(self.dim)
    }

    pub fn enqueue<K: AsRef<[f64]>>(&mut self, keys: &[K]) -> Result<()> {
        for k in keys {
            let k = k.as_ref();
            if k.len() != self.dim {
                return Err(ClimError::DimensionMismatch {
                    left: self.dim,
                    right: k.len(),
                });
            }
            ensure_unit(k, UNIT_TOL)?;
        }
        for k in keys {
            let slot = self.head;
            self.keys[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k.as_ref());
            self.head = (self.head + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
            self.trained = (self.trained + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Summary of a query against every queued negative:
/// `m = max_j l_j`, `Z = Σ_j e^{l_j−m}`, `U = Σ_j e^{l_j−m} k_j` with
/// `l_j = q·k_j/τ`.
#[derive(Debug, Clone)]
pub struct NegativeSummary {
    max_logit: f64,
    z: f64,
    weighted_keys: Vec<f64>,
}

pub fn summarize_negatives(q: &[f64], queue: &NegativeQueue, tau: f64) -> Result<NegativeSummary> {
    if queue.is_empty() {
        return Err(ClimError::EmptyQueue);
    }
    if q.len() != queue.dim {
        return Err(ClimError::DimensionMismatch {
            left: queue.dim,
            right: q.len(),
        });
    }
    let logits: Vec<f64> = queue.raw_keys().map(|k| dot_raw(q, k) / tau).collect();
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted_keys = vec![0.0; q.len()];
    for (l, k) in logits.iter().zip(queue.raw_keys()) {
        let w = (l - max_logit).exp();
        z += w;
        for (u, kv) in weighted_keys.iter_mut().zip(k) {
            *u += w * kv;
        }
    }
    Ok(NegativeSummary {
        max_logit,
        z,
        weighted_keys,
    })
}

fn nce_from_summary(q: &[f64], k_pos: &[f64], neg: &NegativeSummary, tau: f64) -> (f64, Vec<f64>) {
    let pos = dot_raw(q, k_pos) / tau;
    let m = pos.max(neg.max_logit);
    let e_pos = (pos - m).exp();
    let scale_neg = (neg.max_logit - m).exp();
    let s = e_pos + neg.z * scale_neg;
    let loss = s.ln() + m - pos;
    let p_pos = e_pos / s;
    let neg_coef = scale_neg / s;
    let grad = neg
        .weighted_keys
        .iter()
        .zip(k_pos)
        .map(|(u, kp)| (neg_coef * u + (p_pos - 1.0) * kp) / tau)
        .collect();
    (loss, grad)
}

fn check_inputs(vs: &[&[f64]], queue: &NegativeQueue, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(ClimError::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if queue.is_empty() {
        return Err(ClimError::EmptyQueue);
    }
    for v in vs {
        if v.len() != queue.dim {
            return Err(ClimError::DimensionMismatch {
                left: queue.dim,
                right: v.len(),
            });
        }
        ensure_unit(v, UNIT_TOL)?;
    }
    Ok(())
}

/// InfoNCE of `q` against one positive key and the queued negatives.
pub fn nce_loss(q: &[f64], k_pos: &[f64], queue: &NegativeQueue, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_inputs(&[q, k_pos], queue, tau)?;
    let neg = summarize_negatives(q, queue, tau)?;
    Ok(nce_from_summary(q, k_pos, &neg, tau))
}

fn mixed_from_summary(
    q: &[f64],
    k_anchor: &[f64],
    k_pos: &[f64],
    lam: f64,
    neg: &NegativeSummary,
    tau: f64,
) -> (f64, Vec<f64>) {
    let (la, ga) = nce_from_summary(q, k_anchor, neg, tau);
    let (lp, gp) = nce_from_summary(q, k_pos, neg, tau);
    let loss = lam * la + (1.0 - lam) * lp;
    let grad = ga
        .iter()
        .zip(&gp)
        .map(|(a, p)| lam * a + (1.0 - lam) * p)
        .collect();
    (loss, grad)
}

fn check_lambda(lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(ClimError::invalid(format!("lambda must be in [0, 1], got {lam}")));
    }
    Ok(())
}

/// `λ·L(q, k_anchor) + (1−λ)·L(q, k_pos)`.
pub fn mixed_nce_loss(
    q_mix: &[f64],
    k_anchor: &[f64],
    k_pos: &[f64],
    lam: f64,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lam)?;
    check_inputs(&[q_mix, k_anchor, k_pos], queue, tau)?;
    let neg = summarize_negatives(q_mix, queue, tau)?;
    Ok(mixed_from_summary(q_mix, k_anchor, k_pos, lam, &neg, tau))
}

/// Result of [`multi_res_loss`]: the summed loss and one gradient per query view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub pairs: usize,
}

/// Sum of the mixed loss over every ordered (query resolution, key resolution)
/// pair. `lambdas[r]` weights the anchor term for query view `r`.
pub fn multi_res_loss<Q, K>(
    queries: &[Q],
    anchor_keys: &[K],
    positive_keys: &[K],
    lambdas: &[f64],
    queue: &NegativeQueue,
    tau: f64,
) -> Result<MultiResLoss>
where
    Q: AsRef<[f64]>,
    K: AsRef<[f64]>,
{
    if queries.is_empty() || anchor_keys.is_empty() {
        return Err(ClimError::invalid("resolution set is empty"));
    }
    if anchor_keys.len() != positive_keys.len() {
        return Err(ClimError::DimensionMismatch {
            left: anchor_keys.len(),
            right: positive_keys.len(),
        });
    }
    if lambdas.len() != queries.len() {
        return Err(ClimError::DimensionMismatch {
            left: queries.len(),
            right: lambdas.len(),
        });
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    let mut all: Vec<&[f64]> = queries.iter().map(AsRef::as_ref).collect();
    all.extend(anchor_keys.iter().map(AsRef::as_ref));
    all.extend(positive_keys.iter().map(AsRef::as_ref));
    check_inputs(&all, queue, tau)?;

    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(queries.len());
    for (q, &lam) in queries.iter().zip(lambdas) {
        let q = q.as_ref();
        let neg = summarize_negatives(q, queue, tau)?;
        let mut g = vec![0.0; q.len()];
        for (ka, kp) in anchor_keys.iter().zip(positive_keys) {
            let (l, gl) = mixed_from_summary(q, ka.as_ref(), kp.as_ref(), lam, &neg, tau);
            loss += l;
            for (a, b) in g.iter_mut().zip(&gl) {
                *a += b;
            }
        }
        grads.push(g);
    }
    Ok(MultiResLoss {
        loss,
        grads,
        pairs: queries.len() * anchor_keys.len(),
    })
}
