//! Semantic codec.
//!
//! Holds the synthetic classification task, the frozen reference embedder
//! used as the distortion yardstick, the single-layer encoder/decoder pair,
//! the embedding-space distortion and the slow-loop gradient step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::CodecConfig;
use crate::linalg::{add_outer, axpy, dot, matvec, matvec_t, norm, orthonormalize_rows, sq_dist};
use crate::rng::SimRng;

/// Norm below which a projected vector counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Distortion reported for degenerate embeddings.
pub const MAX_DISTORTION: f64 = 2.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEMCODEC";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient; update rejected")]
    NonFiniteGradient,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), CodecError> {
    if expected == got {
        Ok(())
    } else {
        Err(CodecError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// A raw task input with its ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSample {
    pub x: Vec<f64>,
    pub label: usize,
    pub task_id: u64,
}

/// A semantic token vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub z: Vec<f64>,
    /// True when `z` has unit average power.
    pub normalized: bool,
}

impl Embedding {
    pub fn mean_power(&self) -> f64 {
        if self.z.is_empty() {
            return 0.0;
        }
        dot(&self.z, &self.z) / self.z.len() as f64
    }
}

/// Frozen projection `ℰ` with the embedded class means of the task oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedder {
    input_dim: usize,
    dim: usize,
    projection: Vec<f64>,
    class_means_embedded: Vec<Vec<f64>>,
}

impl ReferenceEmbedder {
    /// Random `dim × input_dim` projection with orthonormal rows.
    pub fn random_projection(dim: usize, input_dim: usize, rng: &mut SimRng) -> Vec<f64> {
        loop {
            let mut m = rng.normal_vec(dim * input_dim);
            if orthonormalize_rows(&mut m, dim, input_dim) {
                return m;
            }
        }
    }

    pub fn new(
        projection: Vec<f64>,
        dim: usize,
        input_dim: usize,
        class_means_embedded: Vec<Vec<f64>>,
    ) -> Result<Self, CodecError> {
        check_dim("projection", dim * input_dim, projection.len())?;
        for m in &class_means_embedded {
            check_dim("class mean", dim, m.len())?;
        }
        Ok(Self {
            input_dim,
            dim,
            projection,
            class_means_embedded,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_means_embedded.len()
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn class_means_embedded(&self) -> &[Vec<f64>] {
        &self.class_means_embedded
    }

    /// `ℰ(x)`.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.projection, self.dim, self.input_dim, x)
    }

    /// SHA-256 over the projection and class means, hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.input_dim as u64).to_le_bytes());
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        for m in &self.class_means_embedded {
            for v in m {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gaussian-mixture classification task.
///
/// Class means are `Pᵀu_c + (I − PᵀP)w_c` where `P` is the reference
/// projection, every `u_c` has norm `class_radius` and `w_c` is nuisance
/// spread outside the reference subspace. All embedded means share one norm,
/// so nearest-mean decisions depend only on embedding direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    class_means: Vec<Vec<f64>>,
    sigma: f64,
}

impl TaskModel {
    /// Draw a task and its matching reference embedder.
    pub fn generate(
        cfg: &CodecConfig,
        projection: Vec<f64>,
        rng: &mut SimRng,
    ) -> Result<(Self, ReferenceEmbedder), CodecError> {
        let (de, dd) = (cfg.reference_dim, cfg.input_dim);
        check_dim("projection", de * dd, projection.len())?;
        let min_dist = 2.0 * cfg.sample_sigma;
        let mut class_means: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
        let mut embedded: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
        while class_means.len() < cfg.n_classes {
            let mut u = rng.normal_vec(de);
            let nu = norm(&u);
            if nu < 1e-9 {
                continue;
            }
            u.iter_mut().for_each(|v| *v *= cfg.class_radius / nu);
            let w: Vec<f64> = (0..dd).map(|_| cfg.nuisance_std * rng.normal()).collect();
            // (I − PᵀP) w + Pᵀ u
            let pw = matvec(&projection, de, dd, &w);
            let mut mu = w;
            axpy(&mut mu, -1.0, &matvec_t(&projection, de, dd, &pw));
            axpy(&mut mu, 1.0, &matvec_t(&projection, de, dd, &u));
            if class_means
                .iter()
                .all(|m| sq_dist(m, &mu).sqrt() >= min_dist)
            {
                embedded.push(matvec(&projection, de, dd, &mu));
                class_means.push(mu);
            }
        }
        let reference = ReferenceEmbedder::new(projection, de, dd, embedded)?;
        Ok((
            Self {
                class_means,
                sigma: cfg.sample_sigma,
            },
            reference,
        ))
    }

    pub fn from_means(class_means: Vec<Vec<f64>>, sigma: f64) -> Self {
        Self { class_means, sigma }
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn sample(&self, rng: &mut SimRng, task_id: u64) -> SemanticSample {
        let label = rng.below(self.class_means.len());
        let x = self.class_means[label]
            .iter()
            .map(|m| m + self.sigma * rng.normal())
            .collect();
        SemanticSample { x, label, task_id }
    }

    /// The same task with every class mean translated by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        let class_means = self
            .class_means
            .iter()
            .map(|m| m.iter().zip(delta).map(|(a, b)| a + b).collect())
            .collect();
        Self {
            class_means,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    /// Linear encoder, for identity test harnesses.
    Identity,
}

/// Encoder `z = norm(act(θx + b))`, decoder `x̂ = φz + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// `embed_dim × input_dim`, row-major.
    pub theta: Vec<f64>,
    pub theta_bias: Vec<f64>,
    /// `input_dim × embed_dim`, row-major.
    pub phi: Vec<f64>,
    pub phi_bias: Vec<f64>,
    pub version: u64,
    pub parent_version: u64,
    pub activation: Activation,
    pub power_normalize: bool,
}

/// Encoder pre-normalization state kept for backpropagation.
struct Forward {
    h: Vec<f64>,
    z: Vec<f64>,
    rms: f64,
    normalized: bool,
}

impl CodecParams {
    /// Random initialization with variance-preserving scales.
    pub fn init(input_dim: usize, embed_dim: usize, rng: &mut SimRng) -> Self {
        let st = 1.0 / (input_dim as f64).sqrt();
        let sp = 1.0 / (embed_dim as f64).sqrt();
        Self {
            input_dim,
            embed_dim,
            theta: (0..embed_dim * input_dim)
                .map(|_| st * rng.normal())
                .collect(),
            theta_bias: vec![0.0; embed_dim],
            phi: (0..input_dim * embed_dim)
                .map(|_| sp * rng.normal())
                .collect(),
            phi_bias: vec![0.0; input_dim],
            version: 1,
            parent_version: 0,
            activation: Activation::Tanh,
            power_normalize: true,
        }
    }

    /// `θ = φ = I`, zero biases, linear and unnormalized.
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            input_dim: dim,
            embed_dim: dim,
            theta: eye.clone(),
            theta_bias: vec![0.0; dim],
            phi: eye,
            phi_bias: vec![0.0; dim],
            version: 1,
            parent_version: 0,
            activation: Activation::Identity,
            power_normalize: false,
        }
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let mut h = matvec(&self.theta, self.embed_dim, self.input_dim, x);
        for (hi, bi) in h.iter_mut().zip(&self.theta_bias) {
            *hi += bi;
            if self.activation == Activation::Tanh {
                *hi = hi.tanh();
            }
        }
        if !self.power_normalize {
            return Forward {
                z: h.clone(),
                h,
                rms: 1.0,
                normalized: false,
            };
        }
        let rms = (dot(&h, &h) / h.len() as f64).sqrt();
        if rms < DEGENERATE_NORM {
            return Forward {
                z: h.clone(),
                h,
                rms,
                normalized: false,
            };
        }
        let z = h.iter().map(|v| v / rms).collect();
        Forward {
            h,
            z,
            rms,
            normalized: true,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Embedding, CodecError> {
        check_dim("encoder input", self.input_dim, x.len())?;
        let f = self.forward(x);
        Ok(Embedding {
            z: f.z,
            normalized: f.normalized,
        })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, CodecError> {
        check_dim("decoder input", self.embed_dim, z.len())?;
        let mut x = matvec(&self.phi, self.input_dim, self.embed_dim, z);
        axpy(&mut x, 1.0, &self.phi_bias);
        Ok(x)
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.theta_bias)
            .chain(&self.phi)
            .chain(&self.phi_bias)
            .all(|v| v.is_finite())
    }

    /// Rescale `θ` and `φ` so neither Frobenius norm exceeds `max_norm`.
    pub fn project_max_norm(&mut self, max_norm: f64) {
        for m in [&mut self.theta, &mut self.phi] {
            let n = norm(m);
            if n > max_norm {
                let s = max_norm / n;
                m.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Binary checkpoint; see the README for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.theta.len() + self.theta_bias.len() + self.phi.len() + self.phi_bias.len();
        let mut out = Vec::with_capacity(8 + 4 + 16 + 8 + 2 + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.parent_version.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.push(match self.activation {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        });
        out.push(self.power_normalize as u8);
        for v in self
            .theta
            .iter()
            .chain(&self.theta_bias)
            .chain(&self.phi)
            .chain(&self.phi_bias)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let bad = |m: &str| CodecError::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], CodecError> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let format = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if format != CHECKPOINT_FORMAT {
            return Err(bad("unsupported format version"));
        }
        let version = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let parent_version = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let input_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let embed_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let activation = match take(1)?[0] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            _ => return Err(bad("unknown activation")),
        };
        let power_normalize = match take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad normalization flag")),
        };
        let mut read_vec = |n: usize| -> Result<Vec<f64>, CodecError> {
            let raw = take(8 * n)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let theta = read_vec(embed_dim * input_dim)?;
        let theta_bias = read_vec(embed_dim)?;
        let phi = read_vec(input_dim * embed_dim)?;
        let phi_bias = read_vec(input_dim)?;
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            input_dim,
            embed_dim,
            theta,
            theta_bias,
            phi,
            phi_bias,
            version,
            parent_version,
            activation,
            power_normalize,
        })
    }

    /// SHA-256 of the checkpoint bytes, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// A distortion value with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion {
    pub value: f64,
    pub degenerate: bool,
}

/// `1 − cos(a, b)`, exact at the identical and antipodal cases.
pub fn cosine_distortion(a: &[f64], b: &[f64]) -> Distortion {
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Distortion {
            value: MAX_DISTORTION,
            degenerate: true,
        };
    }
    let value = if a == b {
        0.0
    } else if a.iter().zip(b).all(|(x, y)| *x == -*y) {
        2.0
    } else {
        let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
        1.0 - cos
    };
    Distortion {
        value,
        degenerate: false,
    }
}

/// Embedding-space distortion `1 − cos(ℰ(x), ℰ(x̂))`.
pub fn semantic_distortion(x: &[f64], x_hat: &[f64], reference: &ReferenceEmbedder) -> Distortion {
    cosine_distortion(&reference.embed(x), &reference.embed(x_hat))
}

/// Index of the nearest class mean; ties go to the lowest index.
pub fn nearest_class(e: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in means.iter().enumerate() {
        let d = sq_dist(e, m);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskOutcome {
    pub predicted: usize,
    pub success: bool,
}

pub fn task_outcome(x_hat: &[f64], reference: &ReferenceEmbedder, label: usize) -> TaskOutcome {
    let predicted = nearest_class(&reference.embed(x_hat), reference.class_means_embedded());
    TaskOutcome {
        predicted,
        success: predicted == label,
    }
}

/// Largest softmax probability over negative distances (temperature 1).
pub fn softmax_confidence(distances: &[f64]) -> f64 {
    let dmin = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let total: f64 = distances.iter().map(|d| (dmin - d).exp()).sum();
    1.0 / total
}

pub fn semantic_confidence(x_hat: &[f64], reference: &ReferenceEmbedder) -> f64 {
    let e = reference.embed(x_hat);
    let d: Vec<f64> = reference
        .class_means_embedded()
        .iter()
        .map(|m| sq_dist(&e, m).sqrt())
        .collect();
    softmax_confidence(&d)
}

/// A transmitted/reconstructed training pair collected by the slow loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: Vec<f64>,
    pub z_received: Vec<f64>,
    /// Number of leading token components that were sent.
    pub active_dims: usize,
}

/// Training item with the channel perturbation made explicit:
/// `z_received = mask ⊙ encode(x) + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowItem {
    pub x: Vec<f64>,
    pub noise: Vec<f64>,
    pub active_dims: usize,
}

impl SlowItem {
    /// Recover the perturbation relative to `params`, the codec that
    /// produced `pair`.
    pub fn from_pair(params: &CodecParams, pair: &TrainingPair) -> Result<Self, CodecError> {
        check_dim("received token", params.embed_dim, pair.z_received.len())?;
        let z = params.encode(&pair.x)?.z;
        let noise = z
            .iter()
            .zip(&pair.z_received)
            .enumerate()
            .map(|(k, (zk, rk))| if k < pair.active_dims { rk - zk } else { *rk })
            .collect();
        Ok(Self {
            x: pair.x.clone(),
            noise,
            active_dims: pair.active_dims,
        })
    }
}

/// Gradient of the mean surrogate loss with respect to all codec parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecGradient {
    pub theta: Vec<f64>,
    pub theta_bias: Vec<f64>,
    pub phi: Vec<f64>,
    pub phi_bias: Vec<f64>,
}

impl CodecGradient {
    fn zeros(p: &CodecParams) -> Self {
        Self {
            theta: vec![0.0; p.theta.len()],
            theta_bias: vec![0.0; p.theta_bias.len()],
            phi: vec![0.0; p.phi.len()],
            phi_bias: vec![0.0; p.phi_bias.len()],
        }
    }

    /// Rescale so the Euclidean norm is at most `max`.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm_sq().sqrt();
        if n > max && n > 0.0 {
            let f = max / n;
            for v in [&mut self.theta, &mut self.theta_bias, &mut self.phi, &mut self.phi_bias] {
                v.iter_mut().for_each(|x| *x *= f);
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        [&self.theta, &self.theta_bias, &self.phi, &self.phi_bias]
            .iter()
            .map(|v| dot(v, v))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.theta_bias)
            .chain(&self.phi)
            .chain(&self.phi_bias)
            .all(|v| v.is_finite())
    }
}

/// Mean surrogate loss `½‖â − b̂‖²` with `a = ℰ(x)`, `b = ℰ(x̂)`, and its
/// gradient. Degenerate samples contribute zero loss and gradient.
pub fn loss_and_gradient(
    params: &CodecParams,
    items: &[SlowItem],
    reference: &ReferenceEmbedder,
) -> Result<(f64, CodecGradient), CodecError> {
    if items.is_empty() {
        return Err(CodecError::EmptyBatch);
    }
    let (dd, d) = (params.input_dim, params.embed_dim);
    check_dim("reference input", reference.input_dim(), dd)?;
    let mut grad = CodecGradient::zeros(params);
    let mut loss = 0.0;
    let scale = 1.0 / items.len() as f64;
    for item in items {
        check_dim("sample", dd, item.x.len())?;
        check_dim("noise", d, item.noise.len())?;
        let f = params.forward(&item.x);
        let zr: Vec<f64> = (0..d)
            .map(|k| {
                let s = if k < item.active_dims { f.z[k] } else { 0.0 };
                s + item.noise[k]
            })
            .collect();
        let x_hat = params.decode(&zr)?;
        let a = reference.embed(&item.x);
        let b = reference.embed(&x_hat);
        let (na, nb) = (norm(&a), norm(&b));
        if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
            continue;
        }
        let cos = dot(&a, &b) / (na * nb);
        loss += scale * (1.0 - cos);
        // ∂L/∂b = −(â − cos·b̂)/‖b‖
        let g_b: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(ai, bi)| -(ai / na - cos * bi / nb) / nb)
            .collect();
        let g_xhat = matvec_t(reference.projection(), reference.dim(), dd, &g_b);
        axpy(&mut grad.phi_bias, scale, &g_xhat);
        add_outer(&mut grad.phi, d, scale, &g_xhat, &zr);
        let mut g_z = matvec_t(&params.phi, dd, d, &g_xhat);
        for (k, g) in g_z.iter_mut().enumerate() {
            if k >= item.active_dims {
                *g = 0.0;
            }
        }
        let g_h: Vec<f64> = if !params.power_normalize {
            g_z
        } else if !f.normalized {
            continue;
        } else {
            let zg = dot(&f.z, &g_z) / d as f64;
            g_z.iter()
                .zip(&f.z)
                .map(|(g, z)| (g - z * zg) / f.rms)
                .collect()
        };
        let g_pre: Vec<f64> = match params.activation {
            Activation::Tanh => g_h.iter().zip(&f.h).map(|(g, h)| g * (1.0 - h * h)).collect(),
            Activation::Identity => g_h,
        };
        axpy(&mut grad.theta_bias, scale, &g_pre);
        add_outer(&mut grad.theta, dd, scale, &g_pre, &item.x);
    }
    Ok((loss, grad))
}

/// Mean surrogate loss only.
pub fn surrogate_loss(
    params: &CodecParams,
    items: &[SlowItem],
    reference: &ReferenceEmbedder,
) -> Result<f64, CodecError> {
    loss_and_gradient(params, items, reference).map(|(l, _)| l)
}

/// Apply `params − step · grad` and return the successor snapshot.
/// `max_norm` optionally bounds the matrix norms afterwards.
pub fn apply_gradient(
    params: &CodecParams,
    grad: &CodecGradient,
    step: f64,
    max_norm: Option<f64>,
) -> Result<CodecParams, CodecError> {
    if !grad.is_finite() || !step.is_finite() {
        return Err(CodecError::NonFiniteGradient);
    }
    if step == 0.0 {
        return Ok(params.clone());
    }
    let mut next = params.clone();
    axpy(&mut next.theta, -step, &grad.theta);
    axpy(&mut next.theta_bias, -step, &grad.theta_bias);
    axpy(&mut next.phi, -step, &grad.phi);
    axpy(&mut next.phi_bias, -step, &grad.phi_bias);
    if let Some(m) = max_norm {
        next.project_max_norm(m);
    }
    if !next.is_finite() {
        return Err(CodecError::NonFiniteGradient);
    }
    next.parent_version = params.version;
    next.version = params.version + 1;
    Ok(next)
}

/// One slow-loop gradient step on the batch, with the gradient norm
/// clipped to `grad_clip` when given. A zero step returns the input
/// unchanged, version included; a non-finite gradient is rejected.
pub fn slow_train_step(
    params: &CodecParams,
    batch: &[TrainingPair],
    gamma: f64,
    reference: &ReferenceEmbedder,
    max_norm: Option<f64>,
    grad_clip: Option<f64>,
) -> Result<CodecParams, CodecError> {
    if batch.is_empty() {
        return Err(CodecError::EmptyBatch);
    }
    if gamma == 0.0 {
        return Ok(params.clone());
    }
    let items = batch
        .iter()
        .map(|p| SlowItem::from_pair(params, p))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, mut grad) = loss_and_gradient(params, &items, reference)?;
    if let Some(c) = grad_clip {
        if grad.is_finite() {
            grad.clip_norm(c);
        }
    }
    apply_gradient(params, &grad, gamma, max_norm)
}

/// Offline codec training before deployment: SGD on fresh task samples
/// through an AWGN channel at `pretrain_snr_db`. The result carries
/// version 1.
pub fn pretrain(
    init: CodecParams,
    task: &TaskModel,
    reference: &ReferenceEmbedder,
    cfg: &CodecConfig,
    rng: &mut SimRng,
) -> Result<CodecParams, CodecError> {
    let noise_std = 10f64.powf(-cfg.pretrain_snr_db / 20.0);
    let mut params = init;
    for _ in 0..cfg.pretrain_steps {
        let mut items = Vec::with_capacity(cfg.pretrain_batch);
        for _ in 0..cfg.pretrain_batch {
            let s = task.sample(rng, 0);
            let noise = (0..params.embed_dim)
                .map(|_| noise_std * rng.normal())
                .collect();
            items.push(SlowItem {
                x: s.x,
                noise,
                active_dims: params.embed_dim,
            });
        }
        let (_, grad) = loss_and_gradient(&params, &items, reference)?;
        params = apply_gradient(&params, &grad, cfg.pretrain_lr, Some(cfg.max_norm))?;
    }
    params.version = 1;
    params.parent_version = 0;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    fn small_world(seed: u64) -> (TaskModel, ReferenceEmbedder, CodecConfig) {
        let cfg = CodecConfig::default();
        let mut r = SimRng::new(seed, streams::REFERENCE);
        let proj = ReferenceEmbedder::random_projection(cfg.reference_dim, cfg.input_dim, &mut r);
        let mut t = SimRng::new(seed, streams::TASK_MODEL);
        let (task, reference) = TaskModel::generate(&cfg, proj, &mut t).unwrap();
        (task, reference, cfg)
    }

    #[test]
    fn zero_input_is_degenerate() {
        let mut rng = SimRng::new(1, 1);
        let p = CodecParams::init(32, 8, &mut rng);
        let e = p.encode(&[0.0; 32]).unwrap();
        assert!(!e.normalized);
        assert!(e.z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoding_has_unit_power() {
        let mut rng = SimRng::new(2, 1);
        let p = CodecParams::init(32, 8, &mut rng);
        for _ in 0..50 {
            let x = rng.normal_vec(32);
            let e = p.encode(&x).unwrap();
            assert!(e.normalized);
            assert!((e.mean_power() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let mut rng = SimRng::new(3, 1);
        let p = CodecParams::init(32, 8, &mut rng);
        assert!(matches!(
            p.encode(&[1.0; 5]),
            Err(CodecError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            p.decode(&[1.0; 5]),
            Err(CodecError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn decode_zero_gives_bias() {
        let mut rng = SimRng::new(4, 1);
        let mut p = CodecParams::init(32, 8, &mut rng);
        p.phi_bias = rng.normal_vec(32);
        assert_eq!(p.decode(&[0.0; 8]).unwrap(), p.phi_bias);
    }

    #[test]
    fn identity_codec_round_trips() {
        let p = CodecParams::identity(6);
        let x = [0.5, -1.0, 2.0, 0.0, 3.5, -0.25];
        let z = p.encode(&x).unwrap();
        assert_eq!(p.decode(&z.z).unwrap(), x.to_vec());
    }

    #[test]
    fn distortion_exact_cases() {
        let a = [1.0, 2.0, -0.5];
        assert_eq!(cosine_distortion(&a, &a).value, 0.0);
        assert_eq!(cosine_distortion(&[1.0, 0.0], &[0.0, 3.0]).value, 1.0);
        assert_eq!(cosine_distortion(&a, &[-1.0, -2.0, 0.5]).value, 2.0);
        let d = cosine_distortion(&a, &[0.0; 3]);
        assert!(d.degenerate && d.value == MAX_DISTORTION);
    }

    #[test]
    fn confidence_closed_forms() {
        assert!((softmax_confidence(&[2.0; 8]) - 0.125).abs() < 1e-15);
        let d = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let expected = 1.0 / (1.0 + 7.0 * (-1.0f64).exp());
        assert!((softmax_confidence(&d) - expected).abs() < 1e-15);
        assert!((expected - 0.2797).abs() < 1e-4);
        assert!(softmax_confidence(&[0.0, 1e3, 1e3]) > 1.0 - 1e-12);
    }

    #[test]
    fn nearest_class_tie_goes_low() {
        let means = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(nearest_class(&[0.0, 0.0], &means), 0);
        assert_eq!(nearest_class(&[-1.0, 0.0], &means), 1);
    }

    #[test]
    fn task_means_are_separated_and_equal_norm() {
        let (task, reference, cfg) = small_world(11);
        for (i, a) in task.class_means().iter().enumerate() {
            for b in &task.class_means()[i + 1..] {
                assert!(sq_dist(a, b).sqrt() >= 2.0 * cfg.sample_sigma);
            }
        }
        for (m, e) in task.class_means().iter().zip(reference.class_means_embedded()) {
            assert!((norm(e) - cfg.class_radius).abs() < 1e-9);
            let pe = reference.embed(m);
            assert!(sq_dist(&pe, e) < 1e-20);
        }
    }

    #[test]
    fn class_mean_is_classified_as_itself() {
        let (task, reference, _) = small_world(12);
        for (c, m) in task.class_means().iter().enumerate() {
            assert_eq!(task_outcome(m, &reference, c).predicted, c);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = SimRng::new(5, 1);
        let mut p = CodecParams::init(32, 8, &mut rng);
        p.version = 17;
        p.parent_version = 9;
        let q = CodecParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.hash(), q.hash());
        let mut bytes = p.to_bytes();
        bytes[0] = b'X';
        assert!(CodecParams::from_bytes(&bytes).is_err());
        assert!(CodecParams::from_bytes(&p.to_bytes()[..40]).is_err());
    }

    #[test]
    fn zero_step_keeps_version() {
        let (task, reference, _) = small_world(13);
        let mut rng = SimRng::new(6, 1);
        let p = CodecParams::init(32, 8, &mut rng);
        let batch: Vec<TrainingPair> = (0..4)
            .map(|_| {
                let s = task.sample(&mut rng, 0);
                let z = p.encode(&s.x).unwrap().z;
                TrainingPair {
                    x: s.x,
                    z_received: z,
                    active_dims: 8,
                }
            })
            .collect();
        let q = slow_train_step(&p, &batch, 0.0, &reference, None, None).unwrap();
        assert_eq!(p, q);
        let r = slow_train_step(&p, &batch, 0.1, &reference, None, None).unwrap();
        assert_eq!(r.version, p.version + 1);
        assert_eq!(r.parent_version, p.version);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut rng = SimRng::new(7, 1);
        let p = CodecParams::init(4, 4, &mut rng);
        let mut g = CodecGradient::zeros(&p);
        g.phi[0] = f64::NAN;
        assert_eq!(
            apply_gradient(&p, &g, 0.1, None),
            Err(CodecError::NonFiniteGradient)
        );
    }

    #[test]
    fn from_pair_recovers_noise() {
        let mut rng = SimRng::new(8, 1);
        let p = CodecParams::init(32, 8, &mut rng);
        let x = rng.normal_vec(32);
        let z = p.encode(&x).unwrap().z;
        let noise = rng.normal_vec(8);
        let mut zr: Vec<f64> = z.iter().zip(&noise).map(|(a, b)| a + b).collect();
        zr[6] = noise[6];
        zr[7] = noise[7];
        let item = SlowItem::from_pair(
            &p,
            &TrainingPair {
                x,
                z_received: zr,
                active_dims: 6,
            },
        )
        .unwrap();
        for (a, b) in item.noise.iter().zip(&noise) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
