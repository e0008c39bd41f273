//! Pre-training loop: view generation, mixed multi-resolution contrastive loss,
//! SGD with momentum and weight decay, cosine schedule, momentum key encoder,
//! negative queue and periodic neighbourhood refresh.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::{make_views, plain_views, AugConfig, AugParams, Mixing};
use crate::contrastive::{multi_res_loss, ContrastiveConfig, KeyView, NegativeQueue, QueueInit};
use crate::dataset::{Dataset, Image};
use crate::encoder::{backward, embed, forward, init_params, momentum_update, EncoderDims, EncoderParams, KeyEncoder};
use crate::error::{ClimError, Result};
use crate::evaluation::intra_class_similarity;
use crate::linalg::Matrix;
use crate::neighborhood::{refresh, sample_positives, Neighborhood, NeighborhoodConfig, SelectionResult};
use crate::numerics::Rng;
use crate::parallel::{chunk_ranges, map_indexed, ExecMode};

/// Anchors per work unit. Fixed so the gradient reduction order never depends
/// on the number of threads.
const ANCHOR_CHUNK: usize = 8;
const NO_MIX_ANCHOR_WEIGHT: f64 = 0.5;

const RNG_INIT: u64 = 1;
const RNG_QUEUE: u64 = 2;
const RNG_SHUFFLE: u64 = 3;
const RNG_STEP: u64 = 4;
const RNG_POOLS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Instance,
    Random,
    Knn,
    Kmeans,
    KnnAndKmeans,
    CenterWise,
    /// Same selection rule as `CenterWise`.
    #[default]
    Clim,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Instance,
        Strategy::Random,
        Strategy::Knn,
        Strategy::Kmeans,
        Strategy::KnnAndKmeans,
        Strategy::CenterWise,
        Strategy::Clim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Instance => "instance",
            Strategy::Random => "random",
            Strategy::Knn => "knn",
            Strategy::Kmeans => "kmeans",
            Strategy::KnnAndKmeans => "knn_and_kmeans",
            Strategy::CenterWise => "center_wise",
            Strategy::Clim => "clim",
        }
    }

    /// Whether positives come from the embedding bank.
    pub fn uses_neighborhood(self) -> bool {
        !matches!(self, Strategy::Instance | Strategy::Random)
    }

    /// Candidate positives for one anchor under this strategy.
    fn candidates(self, sel: &SelectionResult, assignments: &[usize]) -> Vec<usize> {
        match self {
            Strategy::Knn => sel.omega2.clone(),
            Strategy::Kmeans => sel.omega1.iter().copied().filter(|&i| i != sel.anchor).collect(),
            Strategy::KnnAndKmeans => sel
                .omega2
                .iter()
                .copied()
                .filter(|&i| assignments[i] == sel.cluster)
                .collect(),
            Strategy::CenterWise | Strategy::Clim => sel.omega_p.clone(),
            Strategy::Instance | Strategy::Random => Vec::new(),
        }
    }
}

impl FromStr for Strategy {
    type Err = ClimError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s || (s == "center-wise" && *st == Strategy::CenterWise))
            .ok_or_else(|| {
                ClimError::invalid(format!(
                    "unknown strategy {s:?} (expected instance|random|knn|kmeans|knn_and_kmeans|center_wise|clim)"
                ))
            })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub key_momentum: f64,
    /// Instance-discrimination epochs before selection starts; `None` means
    /// 20% of `epochs`, rounded. Capped at `epochs`.
    pub warmup_epochs: Option<usize>,
    pub strategy: Strategy,
    pub mixing: Mixing,
    pub seed: u64,
    pub exec: ExecMode,
    pub encoder: EncoderDims,
    /// Record intra-class similarity of the query encoder after every epoch
    /// when labels are present.
    pub track_intra_sim: bool,
    #[serde(skip)]
    pub augment: AugConfig,
    #[serde(skip)]
    pub contrastive: ContrastiveConfig,
    #[serde(skip)]
    pub neighborhood: NeighborhoodConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr0: 0.06,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            key_momentum: 0.99,
            warmup_epochs: None,
            strategy: Strategy::Clim,
            mixing: Mixing::Cutmix,
            seed: 1,
            exec: ExecMode::default(),
            encoder: EncoderDims::default(),
            track_intra_sim: false,
            augment: AugConfig::default(),
            contrastive: ContrastiveConfig::default(),
            neighborhood: NeighborhoodConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (0.2 * self.epochs as f64).round() as usize)
            .min(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| ClimError::Config {
            key: format!("train.{key}"),
            reason: reason.into(),
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(bad("lr0", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(bad("sgd_momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.key_momentum) {
            return Err(bad("key_momentum", "must be in [0, 1)"));
        }
        self.encoder.validate()?;
        self.augment.validate()?;
        self.contrastive.validate()?;
        self.neighborhood.validate()?;
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(lr0: f64, epoch: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch / total).cos())
}

/// `v ← μv + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    velocity: &mut EncoderParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(ClimError::ShapeMismatch("parameters, gradients and velocity differ in shape".into()));
    }
    for ((p, g), v) in params.blocks_mut().into_iter().zip(grads.blocks()).zip(velocity.blocks_mut()) {
        for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub query: EncoderParams,
    pub key: KeyEncoder,
    pub velocity: EncoderParams,
    pub queue: NegativeQueue,
    pub neighborhood: Option<Neighborhood>,
    /// Positive pool per sample, regenerated on every refresh.
    pub pools: Vec<Vec<usize>>,
    /// Candidate-set size per sample at the last refresh.
    pub pool_sizes: Vec<usize>,
    root: Rng,
}

impl TrainState {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(ClimError::invalid("cannot train on an empty dataset"));
        }
        let root = Rng::new(cfg.seed);
        let query = init_params(&mut root.split(RNG_INIT), &cfg.encoder)?;
        let key = KeyEncoder::from_query(&query, cfg.key_momentum)?;
        let velocity = EncoderParams::zeros(&cfg.encoder);
        let cap = cfg.contrastive.queue_capacity;
        let dim = cfg.encoder.embed;
        let queue = match cfg.contrastive.queue_init {
            QueueInit::Random => NegativeQueue::with_random_keys(cap, dim, &mut root.split(RNG_QUEUE))?,
            QueueInit::Encoded => {
                let keys = encoded_queue_keys(&key.params, dataset, cfg, &root.split(RNG_QUEUE))?;
                NegativeQueue::with_placeholder_keys(cap, dim, &keys)?
            }
        };
        Ok(Self {
            step: 0,
            epoch: 0,
            query,
            key,
            velocity,
            queue,
            neighborhood: None,
            pools: Vec::new(),
            pool_sizes: Vec::new(),
            root,
        })
    }
}

/// Base-resolution keys of `capacity` randomly drawn, independently augmented samples.
fn encoded_queue_keys(key: &EncoderParams, dataset: &Dataset, cfg: &TrainConfig, rng: &Rng) -> Result<Vec<Vec<f64>>> {
    let cap = cfg.contrastive.queue_capacity;
    let base = cfg.augment.base_resolution();
    let chunks = chunk_ranges(cap, 64);
    let parts = map_indexed(cfg.exec, chunks.len(), |c| -> Result<Vec<Vec<f64>>> {
        let mut views = Vec::with_capacity(chunks[c].len());
        for slot in chunks[c].clone() {
            let mut r = rng.split(slot as u64);
            let img = dataset.image(r.below(dataset.len()));
            let p = AugParams::sample(&mut r, img.height(), img.width(), &cfg.augment, img.channels());
            views.push(p.apply(img, base)?);
        }
        Ok(embed(key, &views)?.to_rows())
    });
    let mut keys = Vec::with_capacity(cap);
    for p in parts {
        keys.extend(p?);
    }
    Ok(keys)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub queue_size: usize,
    pub mean_omega_p: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.lr, self.loss, self.queue_size, self.mean_omega_p
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub strategy: Strategy,
    pub intra_sim: Option<f64>,
}

/// Everything one anchor contributes to a step.
struct AnchorViews {
    queries: Vec<Image>,
    lambdas: Vec<f64>,
    anchor_keys: Vec<Vec<f64>>,
    positive_keys: Vec<Vec<f64>>,
    pool_size: usize,
}

fn key_views(rng: &mut Rng, img: &Image, cfg: &TrainConfig) -> Result<Vec<Image>> {
    match cfg.contrastive.key_view {
        KeyView::Augmented => plain_views(rng, img, &cfg.augment),
        KeyView::Clean => cfg
            .augment
            .resolutions
            .iter()
            .map(|&r| AugParams::center(img.height(), img.width(), r).apply(img, r))
            .collect(),
    }
}

fn choose_positive(rng: &mut Rng, strategy: Strategy, anchor: usize, n: usize, state: &TrainState) -> (usize, usize) {
    match strategy {
        Strategy::Instance => (anchor, 0),
        Strategy::Random => {
            if n < 2 {
                return (anchor, 0);
            }
            let p = rng.below(n - 1);
            (if p >= anchor { p + 1 } else { p }, 0)
        }
        _ => {
            let pool = &state.pools[anchor];
            (pool[rng.below(pool.len())], state.pool_sizes[anchor])
        }
    }
}

fn prepare_anchor(
    rng: &mut Rng,
    state: &TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    strategy: Strategy,
    anchor: usize,
) -> Result<(Vec<Image>, Vec<f64>, Vec<Image>, Option<Vec<Image>>, usize)> {
    let (positive, pool_size) = choose_positive(rng, strategy, anchor, dataset.len(), state);
    let a_img = dataset.image(anchor);
    let p_img = dataset.image(positive);
    let views = make_views(rng, a_img, p_img, &cfg.augment, cfg.mixing, (anchor, positive))?;
    let lambdas = views
        .iter()
        .map(|v| match cfg.mixing {
            Mixing::None if positive == anchor => 1.0,
            // Unmixed query with two positive keys, weighted equally.
            Mixing::None => NO_MIX_ANCHOR_WEIGHT,
            _ => v.lambda,
        })
        .collect();
    let queries = views.into_iter().map(|v| v.image).collect();
    let a_keys = key_views(rng, a_img, cfg)?;
    let p_keys = (positive != anchor).then(|| key_views(rng, p_img, cfg)).transpose()?;
    Ok((queries, lambdas, a_keys, p_keys, pool_size))
}

struct ChunkResult {
    loss: f64,
    grads: EncoderParams,
    enqueue: Vec<Vec<f64>>,
    pool_sizes: Vec<usize>,
}

fn run_chunk(
    state: &TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    strategy: Strategy,
    step_rng: &Rng,
    batch: &[usize],
    offset: usize,
    batch_total: usize,
) -> Result<ChunkResult> {
    let res = cfg.augment.resolutions.len();
    let mut anchors = Vec::with_capacity(batch.len());
    let mut key_imgs = Vec::new();
    let mut key_slots = Vec::with_capacity(batch.len());
    for (j, &a) in batch.iter().enumerate() {
        let mut rng = step_rng.split((offset + j) as u64);
        let (queries, lambdas, a_keys, p_keys, pool_size) = prepare_anchor(&mut rng, state, dataset, cfg, strategy, a)?;
        let a_start = key_imgs.len();
        key_imgs.extend(a_keys);
        let p_start = match p_keys {
            Some(p) => {
                let s = key_imgs.len();
                key_imgs.extend(p);
                s
            }
            None => a_start,
        };
        key_slots.push((a_start, p_start));
        anchors.push(AnchorViews {
            queries,
            lambdas,
            anchor_keys: Vec::new(),
            positive_keys: Vec::new(),
            pool_size,
        });
    }
    let keys = embed(&state.key.params, &key_imgs)?;
    for (av, &(a_start, p_start)) in anchors.iter_mut().zip(&key_slots) {
        av.anchor_keys = (0..res).map(|r| keys.row(a_start + r).to_vec()).collect();
        av.positive_keys = (0..res).map(|r| keys.row(p_start + r).to_vec()).collect();
    }

    let query_imgs: Vec<Image> = anchors.iter().flat_map(|a| a.queries.iter().cloned()).collect();
    let (q_emb, acts) = forward(&state.query, &query_imgs)?;
    let scale = 1.0 / (res * res) as f64;
    let batch_inv = 1.0 / batch_total as f64;
    let mut grad_emb = Matrix::zeros(q_emb.rows(), q_emb.cols());
    let mut loss = 0.0;
    for (j, av) in anchors.iter().enumerate() {
        let qs: Vec<&[f64]> = (0..res).map(|r| q_emb.row(j * res + r)).collect();
        let out = multi_res_loss(
            &qs,
            &av.anchor_keys,
            &av.positive_keys,
            &av.lambdas,
            &state.queue,
            cfg.contrastive.tau,
        )?;
        loss += out.loss * scale;
        for (r, g) in out.grads.iter().enumerate() {
            for (d, v) in grad_emb.row_mut(j * res + r).iter_mut().zip(g) {
                *d = v * scale * batch_inv;
            }
        }
    }
    let grads = backward(&state.query, &acts, &grad_emb)?;
    let enqueue = anchors
        .iter()
        .flat_map(|av| {
            let n = if cfg.contrastive.queue_all_resolutions { res } else { 1 };
            av.anchor_keys[..n].to_vec()
        })
        .collect();
    Ok(ChunkResult {
        loss,
        grads,
        enqueue,
        pool_sizes: anchors.iter().map(|a| a.pool_size).collect(),
    })
}

/// Per-pair mean loss of every anchor in `batch` under the current state,
/// without updating anything.
pub fn evaluate_loss(state: &TrainState, dataset: &Dataset, cfg: &TrainConfig, strategy: Strategy, batch: &[usize]) -> Result<f64> {
    let step_rng = state.root.split(RNG_STEP).split(state.step);
    let r = run_chunk(state, dataset, cfg, strategy, &step_rng, batch, 0, batch.len())?;
    Ok(r.loss / batch.len() as f64)
}

/// One optimizer step over `batch` (dataset indices). Returns the batch-mean
/// loss, where each anchor's loss is its mean over resolution pairs.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    strategy: Strategy,
    batch: &[usize],
    lr: f64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(ClimError::invalid("empty batch"));
    }
    if strategy.uses_neighborhood() && state.pools.len() != dataset.len() {
        return Err(ClimError::invalid(format!("strategy {strategy} needs a neighbourhood refresh first")));
    }
    let step_rng = state.root.split(RNG_STEP).split(state.step);
    let chunks = chunk_ranges(batch.len(), ANCHOR_CHUNK);
    let st: &TrainState = state;
    let results = map_indexed(cfg.exec, chunks.len(), |c| {
        let range = chunks[c].clone();
        run_chunk(st, dataset, cfg, strategy, &step_rng, &batch[range.clone()], range.start, batch.len())
    });

    let mut loss = 0.0;
    let mut grads = EncoderParams::zeros(&cfg.encoder);
    let mut enqueue = Vec::with_capacity(batch.len());
    let mut pool_total = 0usize;
    for r in results {
        let r = r?;
        loss += r.loss;
        grads.add_scaled(&r.grads, 1.0)?;
        enqueue.extend(r.enqueue);
        pool_total += r.pool_sizes.iter().sum::<usize>();
    }
    let loss = loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(ClimError::NonFinite(format!(
            "loss {loss} at step {} (epoch {}, lr {lr}, strategy {strategy})",
            state.step, state.epoch
        )));
    }
    sgd_step(&mut state.query, &grads, &mut state.velocity, lr, cfg.sgd_momentum, cfg.weight_decay)?;
    if !state.query.is_finite() {
        return Err(ClimError::NonFinite(format!("parameters after step {}", state.step)));
    }
    momentum_update(&mut state.key, &state.query)?;
    state.queue.enqueue(&enqueue)?;
    let record = StepRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        loss,
        queue_size: state.queue.trained_len(),
        mean_omega_p: pool_total as f64 / batch.len() as f64,
    };
    state.step += 1;
    Ok(record)
}

/// Recomputes the bank, clusters and positive pools when `epoch` is a refresh epoch.
pub fn refresh_neighborhood(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig, strategy: Strategy, epoch: usize) -> Result<bool> {
    let Some(nb) = refresh(&state.key.params, dataset, epoch, cfg.warmup(), &cfg.neighborhood, cfg.seed, cfg.exec)? else {
        return Ok(false);
    };
    let n = dataset.len();
    let k = cfg.neighborhood.effective_k(n);
    if k == 0 {
        return Err(ClimError::invalid("neighbourhood selection needs at least two samples"));
    }
    let pool_rng = state.root.split(RNG_POOLS).split(epoch as u64);
    let chunks = chunk_ranges(n, 64);
    let parts = map_indexed(cfg.exec, chunks.len(), |c| -> Result<Vec<(Vec<usize>, usize)>> {
        chunks[c]
            .clone()
            .map(|a| {
                let mut sel = crate::neighborhood::select_positives(&nb.bank, &nb.model, a, k)?;
                sel.omega_p = strategy.candidates(&sel, &nb.model.assignments);
                let size = sel.omega_p.len();
                let pool = sample_positives(&mut pool_rng.split(a as u64), &sel, cfg.neighborhood.positives)?;
                Ok((pool, size))
            })
            .collect()
    });
    state.pools.clear();
    state.pool_sizes.clear();
    for p in parts {
        for (pool, size) in p? {
            state.pools.push(pool);
            state.pool_sizes.push(size);
        }
    }
    state.neighborhood = Some(nb);
    Ok(true)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl PretrainOutput {
    pub fn params(&self) -> &EncoderParams {
        &self.state.query
    }

    /// The metrics log: one tab-separated line per step.
    pub fn metrics_log(&self) -> String {
        self.steps.iter().map(|r| format!("{r}\n")).collect()
    }
}

pub fn pretrain(dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainOutput> {
    pretrain_with(dataset, cfg, |_, _| Ok(()))
}

/// Full pre-training run. `on_epoch(epoch, state)` runs after every finished
/// epoch (numbered from 1) and once with epoch 0 before training starts.
pub fn pretrain_with<F>(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<PretrainOutput>
where
    F: FnMut(usize, &TrainState) -> Result<()>,
{
    let mut state = TrainState::new(dataset, cfg)?;
    on_epoch(0, &state)?;
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let warmup = cfg.warmup();
    let mut steps = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let strategy = if epoch < warmup { Strategy::Instance } else { cfg.strategy };
        if strategy.uses_neighborhood() {
            refresh_neighborhood(&mut state, dataset, cfg, strategy, epoch)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        state.root.split(RNG_SHUFFLE).split(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let t = epoch as f64 + b as f64 / steps_per_epoch as f64;
            let lr = cosine_lr(cfg.lr0, t, cfg.epochs as f64);
            let rec = train_step(&mut state, dataset, cfg, strategy, batch, lr)?;
            log::debug!("{rec}");
            loss_sum += rec.loss;
            steps.push(rec);
        }
        let intra_sim = if cfg.track_intra_sim && dataset.labels().is_some() {
            Some(intra_class_similarity(&state.query, dataset, cfg.exec)?.mean)
        } else {
            None
        };
        let mean_loss = loss_sum / steps_per_epoch as f64;
        log::info!("epoch {epoch} strategy {strategy} loss {mean_loss:.4}");
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            strategy,
            intra_sim,
        });
        on_epoch(epoch + 1, &state)?;
    }
    Ok(PretrainOutput { state, steps, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::nce_loss;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            encoder: EncoderDims {
                input_side: 8,
                channels: 3,
                hidden: 16,
                feat: 12,
                mlp_hidden: 12,
                embed: 8,
                ..Default::default()
            },
            augment: AugConfig {
                resolutions: vec![8, 6],
                ..Default::default()
            },
            contrastive: ContrastiveConfig {
                queue_capacity: 64,
                ..Default::default()
            },
            neighborhood: NeighborhoodConfig {
                knn_k: 5,
                positives: 3,
                refresh_every: 1,
                ..Default::default()
            },
            warmup_epochs: Some(1),
            ..Default::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            class_count: 3,
            per_class: 8,
            image_side: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0.06, 0.0, 10.0), 0.06);
        assert!(cosine_lr(0.06, 10.0, 10.0).abs() < 1e-18);
        assert!((cosine_lr(0.06, 5.0, 10.0) - 0.03).abs() < 1e-15);
    }

    fn single_value_params(v: f64) -> EncoderParams {
        let dims = EncoderDims {
            input_side: 1,
            channels: 1,
            hidden: 1,
            feat: 1,
            mlp_hidden: 1,
            embed: 1,
            ..Default::default()
        };
        let mut p = EncoderParams::zeros(&dims);
        for b in p.blocks_mut() {
            b.iter_mut().for_each(|x| *x = v);
        }
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = single_value_params(1.0);
        let zero = single_value_params(0.0);
        let mut v = single_value_params(0.0);
        sgd_step(&mut p, &zero, &mut v, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(p.blocks()[0], &[1.0]);

        let g = single_value_params(2.0);
        let mut v = single_value_params(0.0);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.blocks()[0][0] - 0.8).abs() < 1e-15);

        let mut p = single_value_params(1.0);
        let mut v = single_value_params(0.0);
        sgd_step(&mut p, &zero, &mut v, 1.0, 0.0, 0.1).unwrap();
        assert!((p.blocks()[0][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = single_value_params(1.0);
        let other = EncoderParams::zeros(&EncoderDims::default());
        let mut v = single_value_params(0.0);
        assert!(sgd_step(&mut p, &other, &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = tiny_data();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = pretrain(&ds, &cfg).unwrap();
        assert!(out.steps.is_empty());
        let init = init_params(&mut Rng::new(cfg.seed).split(RNG_INIT), &cfg.encoder).unwrap();
        assert_eq!(out.params().blocks(), init.blocks());
    }

    #[test]
    fn replay_is_bit_identical_across_exec_modes() {
        let ds = tiny_data();
        let a = pretrain(&ds, &tiny_cfg()).unwrap();
        let b = pretrain(&ds, &tiny_cfg()).unwrap();
        assert_eq!(a.metrics_log(), b.metrics_log());
        let seq = pretrain(&ds, &TrainConfig { exec: ExecMode::Sequential, ..tiny_cfg() }).unwrap();
        assert_eq!(a.metrics_log(), seq.metrics_log());
        assert_eq!(a.params().blocks(), seq.params().blocks());
    }

    #[test]
    fn queue_fill_tracks_steps() {
        let ds = tiny_data();
        let out = pretrain(&ds, &tiny_cfg()).unwrap();
        for (i, r) in out.steps.iter().enumerate() {
            assert_eq!(r.queue_size, ((i + 1) * 8).min(64));
        }
    }

    #[test]
    fn log_line_format() {
        let r = StepRecord {
            step: 3,
            epoch: 1,
            lr: 0.05,
            loss: 2.5,
            queue_size: 24,
            mean_omega_p: 1.5,
        };
        assert_eq!(r.to_string(), "3\t1\t0.05\t2.5\t24\t1.5");
    }

    #[test]
    fn selection_epochs_report_pool_sizes() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            strategy: Strategy::Knn,
            ..tiny_cfg()
        };
        let out = pretrain(&ds, &cfg).unwrap();
        assert!(out.steps.iter().filter(|r| r.epoch == 0).all(|r| r.mean_omega_p == 0.0));
        assert!(out.steps.iter().filter(|r| r.epoch == 1).all(|r| r.mean_omega_p == 5.0));
    }

    #[test]
    fn instance_single_resolution_matches_reference_infonce() {
        let ds = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.mixing = Mixing::None;
        cfg.augment.resolutions = vec![8];
        let state = TrainState::new(&ds, &cfg).unwrap();
        let batch = [4usize];
        let got = evaluate_loss(&state, &ds, &cfg, Strategy::Instance, &batch).unwrap();

        // replay the anchor's random stream by hand
        let mut rng = state.root.split(RNG_STEP).split(0).split(0);
        let img = ds.image(4);
        let views = make_views(&mut rng, img, img, &cfg.augment, Mixing::None, (4, 4)).unwrap();
        let key_img = plain_views(&mut rng, img, &cfg.augment).unwrap();
        let q = embed(&state.query, &[views[0].image.clone()]).unwrap();
        let k = embed(&state.key.params, &key_img).unwrap();
        let (want, _) = nce_loss(q.row(0), k.row(0), &state.queue, cfg.contrastive.tau).unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("nearest".parse::<Strategy>().is_err());
    }
}
