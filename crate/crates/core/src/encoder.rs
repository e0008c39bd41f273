//! Query/key encoders: a dense (or optional 3x3 conv + global-average-pool)
//! stem, a dense trunk, and a two-layer projection head, all with ReLU, and an
//! L2-normalized output. Forward and backward passes are written out by hand.
//!
//! Dense-stem encoders see every view bilinearly resized to `input_side`, so
//! lower-resolution views reach the stem with their detail already lost. The
//! conv stem consumes views at their native resolution.

use serde::{Deserialize, Serialize};

use crate::augmentation::resize_image;
use crate::dataset::Image;
use crate::error::{ClimError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    #[default]
    Dense,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    /// Canonical side every view is resized to before a dense stem.
    pub input_side: usize,
    pub channels: usize,
    pub hidden: usize,
    pub feat: usize,
    pub mlp_hidden: usize,
    pub embed: usize,
    pub stem: StemKind,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input_side: 32,
            channels: 3,
            hidden: 256,
            feat: 128,
            mlp_hidden: 128,
            embed: 32,
            stem: StemKind::Dense,
        }
    }
}

impl EncoderDims {
    pub fn input_dim(&self) -> usize {
        self.input_side * self.input_side * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("input_side", self.input_side),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("feat", self.feat),
            ("mlp_hidden", self.mlp_hidden),
            ("embed", self.embed),
        ] {
            if v == 0 {
                return Err(ClimError::Config {
                    key: format!("encoder.{key}"),
                    reason: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    fn init(rng: &mut Rng, input: usize, output: usize) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_vec(input, output, data).expect("shape"),
            bias: vec![0.0; output],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul(x, &self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates `dW = xᵀ·dy`, `db = Σ dy` and returns `dy·Wᵀ`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear, need_input: bool) -> Option<Matrix> {
        let dw = matmul_tn(x, dy);
        for (g, d) in grad.weight.as_mut_slice().iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        for r in 0..dy.rows() {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        need_input.then(|| matmul_nt(dy, &self.weight))
    }
}

/// 3x3, stride 1, zero-padded convolution followed by ReLU and global average
/// pooling. Weights are laid out `(ky, kx, in_channel) × out_channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStem {
    pub kernel: Linear,
    pub in_channels: usize,
}

impl ConvStem {
    fn patches(&self, img: &Image) -> Matrix {
        let (h, w, c) = img.shape();
        let mut m = Matrix::zeros(h * w, 9 * c);
        for y in 0..h {
            for x in 0..w {
                let row = m.row_mut(y * w + x);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let yy = y as i64 + ky as i64 - 1;
                        let xx = x as i64 + kx as i64 - 1;
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        for k in 0..c {
                            row[(ky * 3 + kx) * c + k] = img.get(yy as usize, xx as usize, k) - 0.5;
                        }
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stem {
    Dense(Linear),
    Conv(ConvStem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    pub stem: Stem,
    pub trunk: Linear,
    pub head_hidden: Linear,
    pub head_out: Linear,
    version: u64,
}

/// Gradients share the parameter layout.
pub type ParamGrads = EncoderParams;

pub const BLOCK_NAMES: [&str; 8] = [
    "stem.weight",
    "stem.bias",
    "trunk.weight",
    "trunk.bias",
    "head_hidden.weight",
    "head_hidden.bias",
    "head_out.weight",
    "head_out.bias",
];

impl EncoderParams {
    pub fn zeros(dims: &EncoderDims) -> Self {
        let stem = match dims.stem {
            StemKind::Dense => Stem::Dense(Linear::zeros(dims.input_dim(), dims.hidden)),
            StemKind::Conv => Stem::Conv(ConvStem {
                kernel: Linear::zeros(9 * dims.channels, dims.hidden),
                in_channels: dims.channels,
            }),
        };
        Self {
            dims: dims.clone(),
            stem,
            trunk: Linear::zeros(dims.hidden, dims.feat),
            head_hidden: Linear::zeros(dims.feat, dims.mlp_hidden),
            head_out: Linear::zeros(dims.mlp_hidden, dims.embed),
            version: 0,
        }
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    /// Changes whenever parameters are borrowed mutably.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn stem_linear(&self) -> &Linear {
        match &self.stem {
            Stem::Dense(l) => l,
            Stem::Conv(c) => &c.kernel,
        }
    }

    fn stem_linear_mut(&mut self) -> &mut Linear {
        match &mut self.stem {
            Stem::Dense(l) => l,
            Stem::Conv(c) => &mut c.kernel,
        }
    }

    /// Parameter blocks in [`BLOCK_NAMES`] order.
    pub fn blocks(&self) -> [&[f64]; 8] {
        let s = self.stem_linear();
        [
            s.weight.as_slice(),
            &s.bias,
            self.trunk.weight.as_slice(),
            &self.trunk.bias,
            self.head_hidden.weight.as_slice(),
            &self.head_hidden.bias,
            self.head_out.weight.as_slice(),
            &self.head_out.bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 8] {
        self.version = self.version.wrapping_add(1);
        let Self {
            stem,
            trunk,
            head_hidden,
            head_out,
            ..
        } = self;
        let s = match stem {
            Stem::Dense(l) => l,
            Stem::Conv(c) => &mut c.kernel,
        };
        [
            s.weight.as_mut_slice(),
            &mut s.bias,
            trunk.weight.as_mut_slice(),
            &mut trunk.bias,
            head_hidden.weight.as_mut_slice(),
            &mut head_hidden.bias,
            head_out.weight.as_mut_slice(),
            &mut head_out.bias,
        ]
    }

    pub fn block_shapes(&self) -> [(usize, usize); 8] {
        let s = self.stem_linear();
        let lin = |l: &Linear| [l.weight.shape(), (1, l.bias.len())];
        let [a, b] = lin(s);
        let [c, d] = lin(&self.trunk);
        let [e, f] = lin(&self.head_hidden);
        let [g, h] = lin(&self.head_out);
        [a, b, c, d, e, f, g, h]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.dims == other.dims && self.block_shapes() == other.block_shapes()
    }

    fn require_same_shape(&self, other: &EncoderParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(ClimError::ShapeMismatch("encoder parameter shapes differ".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += scale·other`.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) -> Result<()> {
        self.require_same_shape(other)?;
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_distance(&self, other: &EncoderParams) -> Result<f64> {
        self.require_same_shape(other)?;
        Ok(self
            .blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| crate::numerics::sq_dist_raw(a, b))
            .sum())
    }

    /// Rebuilds parameters from flat blocks in [`BLOCK_NAMES`] order.
    pub fn from_blocks(dims: &EncoderDims, blocks: &[Vec<f64>]) -> Result<Self> {
        let mut p = Self::zeros(dims);
        if blocks.len() != 8 {
            return Err(ClimError::ShapeMismatch(format!("{} parameter blocks, need 8", blocks.len())));
        }
        for (dst, src) in p.blocks_mut().into_iter().zip(blocks) {
            if dst.len() != src.len() {
                return Err(ClimError::DimensionMismatch {
                    left: dst.len(),
                    right: src.len(),
                });
            }
            dst.copy_from_slice(src);
        }
        p.version = 0;
        Ok(p)
    }
}

/// Fan-in scaled uniform weights, zero biases.
pub fn init_params(rng: &mut Rng, dims: &EncoderDims) -> Result<EncoderParams> {
    dims.validate()?;
    let stem = match dims.stem {
        StemKind::Dense => Stem::Dense(Linear::init(rng, dims.input_dim(), dims.hidden)),
        StemKind::Conv => Stem::Conv(ConvStem {
            kernel: Linear::init(rng, 9 * dims.channels, dims.hidden),
            in_channels: dims.channels,
        }),
    };
    Ok(EncoderParams {
        dims: dims.clone(),
        stem,
        trunk: Linear::init(rng, dims.hidden, dims.feat),
        head_hidden: Linear::init(rng, dims.feat, dims.mlp_hidden),
        head_out: Linear::init(rng, dims.mlp_hidden, dims.embed),
        version: 0,
    })
}

#[derive(Debug, Clone)]
enum StemCache {
    Dense(Matrix),
    /// Per sample: im2col patches and post-ReLU conv map.
    Conv(Vec<(Matrix, Matrix)>),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    version: u64,
    stem: StemCache,
    h1: Matrix,
    h2: Matrix,
    h3: Matrix,
    norms: Vec<f64>,
    out: Matrix,
}

impl Activations {
    pub fn batch_size(&self) -> usize {
        self.h2.rows()
    }

    /// Trunk features (input to the projection head).
    pub fn features(&self) -> &Matrix {
        &self.h2
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.out
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_mask(grad: &mut Matrix, post: &Matrix) {
    for (g, p) in grad.as_mut_slice().iter_mut().zip(post.as_slice()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Flattened, centred dense-stem input for a batch.
fn dense_input(dims: &EncoderDims, batch: &[Image]) -> Result<Matrix> {
    let d = dims.input_dim();
    let mut x = Matrix::zeros(batch.len(), d);
    for (r, img) in batch.iter().enumerate() {
        if img.channels() != dims.channels || img.height() != img.width() {
            return Err(ClimError::ShapeMismatch(format!(
                "encoder expects square {}-channel images, got {:?}",
                dims.channels,
                img.shape()
            )));
        }
        let resized;
        let src = if img.height() == dims.input_side {
            img
        } else {
            resized = resize_image(img, dims.input_side);
            &resized
        };
        for (o, p) in x.row_mut(r).iter_mut().zip(src.pixels()) {
            *o = p - 0.5;
        }
    }
    Ok(x)
}

fn stem_forward(params: &EncoderParams, batch: &[Image]) -> Result<(StemCache, Matrix)> {
    match &params.stem {
        Stem::Dense(lin) => {
            let x = dense_input(&params.dims, batch)?;
            let mut h = lin.forward(&x);
            relu_in_place(&mut h);
            Ok((StemCache::Dense(x), h))
        }
        Stem::Conv(conv) => {
            let hidden = params.dims.hidden;
            let mut h1 = Matrix::zeros(batch.len(), hidden);
            let mut cache = Vec::with_capacity(batch.len());
            for (r, img) in batch.iter().enumerate() {
                if img.channels() != conv.in_channels || img.is_empty() {
                    return Err(ClimError::ShapeMismatch(format!(
                        "conv stem expects {} channels, got {:?}",
                        conv.in_channels,
                        img.shape()
                    )));
                }
                let patches = conv.patches(img);
                let mut map = conv.kernel.forward(&patches);
                relu_in_place(&mut map);
                let inv = 1.0 / map.rows() as f64;
                let row = h1.row_mut(r);
                for p in 0..map.rows() {
                    for (o, v) in row.iter_mut().zip(map.row(p)) {
                        *o += v;
                    }
                }
                row.iter_mut().for_each(|v| *v *= inv);
                cache.push((patches, map));
            }
            Ok((StemCache::Conv(cache), h1))
        }
    }
}

/// Runs the encoder on a batch, returning unit-norm embeddings (one row per
/// image) and the cache for [`backward`].
pub fn forward(params: &EncoderParams, batch: &[Image]) -> Result<(Matrix, Activations)> {
    let (stem, h1) = stem_forward(params, batch)?;
    let mut h2 = params.trunk.forward(&h1);
    relu_in_place(&mut h2);
    let mut h3 = params.head_hidden.forward(&h2);
    relu_in_place(&mut h3);
    let mut out = params.head_out.forward(&h3);
    let mut norms = Vec::with_capacity(out.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = crate::numerics::norm(row);
        if n == 0.0 {
            return Err(ClimError::DegenerateEmbedding);
        }
        if !n.is_finite() {
            return Err(ClimError::NonFinite("encoder output".into()));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    let acts = Activations {
        version: params.version,
        stem,
        h1,
        h2,
        h3,
        norms,
        out: out.clone(),
    };
    Ok((out, acts))
}

/// Unit-norm embeddings without keeping a backward cache.
pub fn embed(params: &EncoderParams, batch: &[Image]) -> Result<Matrix> {
    forward(params, batch).map(|(e, _)| e)
}

/// Trunk features plus a cache for [`backward_features`]; the projection
/// head is not evaluated.
pub fn forward_features(params: &EncoderParams, batch: &[Image]) -> Result<(Matrix, Activations)> {
    let (stem, h1) = stem_forward(params, batch)?;
    let mut h2 = params.trunk.forward(&h1);
    relu_in_place(&mut h2);
    let acts = Activations {
        version: params.version,
        stem,
        h1,
        h2: h2.clone(),
        h3: Matrix::zeros(0, params.dims.mlp_hidden),
        norms: Vec::new(),
        out: Matrix::zeros(0, params.dims.embed),
    };
    Ok((h2, acts))
}

/// Trunk features (the representation used by the probes).
pub fn features(params: &EncoderParams, batch: &[Image]) -> Result<Matrix> {
    let (_, h1) = stem_forward(params, batch)?;
    let mut h2 = params.trunk.forward(&h1);
    relu_in_place(&mut h2);
    Ok(h2)
}

fn check_cache(params: &EncoderParams, acts: &Activations, rows: usize, cols: usize, what: &str) -> Result<()> {
    if acts.version != params.version {
        return Err(ClimError::StaleCache(format!(
            "activations from parameter version {}, parameters are at {}",
            acts.version, params.version
        )));
    }
    if rows != acts.batch_size() {
        return Err(ClimError::StaleCache(format!(
            "{what} has {rows} rows for a batch of {}",
            acts.batch_size()
        )));
    }
    let _ = cols;
    Ok(())
}

fn stem_and_trunk_backward(params: &EncoderParams, acts: &Activations, mut dh2: Matrix, grads: &mut ParamGrads) {
    relu_mask(&mut dh2, &acts.h2);
    let mut dh1 = params
        .trunk
        .backward(&acts.h1, &dh2, &mut grads.trunk, true)
        .expect("input grad");
    relu_mask(&mut dh1, &acts.h1);
    match (&acts.stem, &params.stem) {
        (StemCache::Dense(x), Stem::Dense(lin)) => {
            lin.backward(x, &dh1, grads.stem_linear_mut(), false);
        }
        (StemCache::Conv(cache), Stem::Conv(conv)) => {
            for (r, (patches, map)) in cache.iter().enumerate() {
                let inv = 1.0 / map.rows() as f64;
                let mut dmap = Matrix::zeros(map.rows(), map.cols());
                for p in 0..map.rows() {
                    for ((d, g), m) in dmap.row_mut(p).iter_mut().zip(dh1.row(r)).zip(map.row(p)) {
                        *d = if *m > 0.0 { g * inv } else { 0.0 };
                    }
                }
                conv.kernel.backward(patches, &dmap, grads.stem_linear_mut(), false);
            }
        }
        _ => unreachable!("activation cache built by this parameter set"),
    }
}

/// Exact parameter gradients given `dL/d(embedding)` for every batch row,
/// including the Jacobian of the L2 normalization.
pub fn backward(params: &EncoderParams, acts: &Activations, grad_embeddings: &Matrix) -> Result<ParamGrads> {
    check_cache(params, acts, grad_embeddings.rows(), grad_embeddings.cols(), "embedding gradient")?;
    if grad_embeddings.cols() != params.dims.embed {
        return Err(ClimError::DimensionMismatch {
            left: params.dims.embed,
            right: grad_embeddings.cols(),
        });
    }
    if acts.out.rows() != grad_embeddings.rows() {
        return Err(ClimError::StaleCache("activations were computed without the projection head".into()));
    }
    let mut grads = EncoderParams::zeros(&params.dims);
    let mut dz = Matrix::zeros(grad_embeddings.rows(), grad_embeddings.cols());
    for r in 0..dz.rows() {
        let v = acts.out.row(r);
        let g = grad_embeddings.row(r);
        let proj = crate::numerics::dot_raw(v, g);
        let n = acts.norms[r];
        for ((d, gv), vv) in dz.row_mut(r).iter_mut().zip(g).zip(v) {
            *d = (gv - vv * proj) / n;
        }
    }
    let mut dh3 = params
        .head_out
        .backward(&acts.h3, &dz, &mut grads.head_out, true)
        .expect("input grad");
    relu_mask(&mut dh3, &acts.h3);
    let dh2 = params
        .head_hidden
        .backward(&acts.h2, &dh3, &mut grads.head_hidden, true)
        .expect("input grad");
    stem_and_trunk_backward(params, acts, dh2, &mut grads);
    Ok(grads)
}

/// Gradients of the stem and trunk given `dL/d(trunk features)`; head
/// gradients are zero.
pub fn backward_features(params: &EncoderParams, acts: &Activations, grad_features: &Matrix) -> Result<ParamGrads> {
    check_cache(params, acts, grad_features.rows(), grad_features.cols(), "feature gradient")?;
    if grad_features.cols() != params.dims.feat {
        return Err(ClimError::DimensionMismatch {
            left: params.dims.feat,
            right: grad_features.cols(),
        });
    }
    let mut grads = EncoderParams::zeros(&params.dims);
    stem_and_trunk_backward(params, acts, grad_features.clone(), &mut grads);
    Ok(grads)
}

/// Slowly moving copy of the query encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEncoder {
    pub params: EncoderParams,
    pub momentum: f64,
}

impl KeyEncoder {
    /// Starts as an exact copy of the query encoder.
    pub fn from_query(query: &EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(ClimError::invalid(format!("key momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            params: query.clone(),
            momentum,
        })
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q`, evaluated as `θ_k + (1−m)(θ_q − θ_k)` so
/// matching parameters are a fixed point.
pub fn momentum_update(key: &mut KeyEncoder, query: &EncoderParams) -> Result<()> {
    key.params.require_same_shape(query)?;
    let m = key.momentum;
    let step = 1.0 - m;
    for (k, q) in key.params.blocks_mut().into_iter().zip(query.blocks()) {
        if m == 0.0 {
            k.copy_from_slice(q);
        } else {
            for (kv, qv) in k.iter_mut().zip(q) {
                *kv += step * (qv - *kv);
            }
        }
    }
    Ok(())
}
