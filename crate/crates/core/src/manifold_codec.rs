//! Maps between latent coordinates and joint configurations.
//!
//! Three [`Decoder`]s are provided: the closed-form [`AnalyticChart`] of the
//! planar testbed, the learned [`VaeParams`] decoder with its training
//! pipeline, and [`IdentityChart`], which lets the planner run directly in
//! joint space.

use crate::kinematics::{
    constraint_norm, forward_kinematics, planar_chart, project_to_manifold, ChainModel,
    Configuration, KinematicsError, ModelKind,
};
use crate::geometry::Transform;
use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Widest hidden layer accepted by the allocation-free decode path.
pub const MAX_LAYER_WIDTH: usize = 256;

/// Residual bound for every stored dataset sample.
pub const DATASET_TOL: f64 = 1e-8;

const PARAMS_MAGIC: &[u8; 8] = b"MCMPPIVA";
const DATASET_MAGIC: &[u8; 8] = b"MCMPPIDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("dataset generation accepted {accepted} of {attempts} attempts")]
    LowAcceptance { accepted: usize, attempts: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file: {0}")]
    Format(String),
    #[error("empty dataset")]
    EmptyDataset,
}

/// A map `ψ: R^m → R^n` with an approximate inverse.
pub trait Decoder: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Writes `ψ(z)` into `out` (length `n`).
    fn decode_into(&self, z: &[f64], out: &mut [f64]);
    /// Latent coordinates of a configuration.
    fn encode(&self, q: &[f64]) -> Vec<f64>;

    fn decode(&self, z: &[f64]) -> Configuration {
        let mut out = vec![0.0; self.output_dim()];
        self.decode_into(z, &mut out);
        Configuration(out)
    }

    /// Decodes `count` latent points stored back to back in `zs` into
    /// consecutive `n`-blocks of `out`.
    fn decode_many(&self, zs: &[f64], count: usize, out: &mut [f64]) {
        let (m, n) = (self.latent_dim(), self.output_dim());
        for i in 0..count {
            self.decode_into(&zs[i * m..(i + 1) * m], &mut out[i * n..(i + 1) * n]);
        }
    }

    /// Decodes each row of `zs`.
    fn decode_batch(&self, zs: &[Vec<f64>]) -> Vec<Configuration> {
        zs.iter().map(|z| self.decode(z)).collect()
    }
}

// --------------------------------------------------------------- analytic

/// Closed-form chart of the planar dual-3R model: `z = (x, y, θ)` tray pose.
#[derive(Debug, Clone)]
pub struct AnalyticChart {
    model: ChainModel,
}

impl AnalyticChart {
    pub fn new(model: &ChainModel) -> Result<Self, CodecError> {
        if model.kind != ModelKind::Planar || model.joint_count() != 6 {
            return Err(CodecError::Architecture(
                "the analytic chart exists only for the planar dual-3R model".into(),
            ));
        }
        Ok(Self {
            model: model.clone(),
        })
    }
}

/// Exact inverse kinematics of the planar testbed at tray pose `z`.
pub fn analytic_decode(model: &ChainModel, z: &[f64]) -> Result<Configuration, CodecError> {
    Ok(planar_chart(model, z[0], z[1], z[2])?)
}

impl Decoder for AnalyticChart {
    fn latent_dim(&self) -> usize {
        3
    }

    fn output_dim(&self) -> usize {
        6
    }

    /// Out-of-reach poses are decoded to the nearest stretched elbow, which
    /// leaves a non-zero residual instead of failing inside a rollout.
    fn decode_into(&self, z: &[f64], out: &mut [f64]) {
        match planar_chart(&self.model, z[0], z[1], z[2]) {
            Ok(q) => out.copy_from_slice(&q),
            Err(_) => {
                // shrink the pose towards the workspace centre until reachable
                let mut s = 1.0;
                for _ in 0..60 {
                    s *= 0.9;
                    let (x, y) = (z[0] * s, 0.5 + (z[1] - 0.5) * s);
                    if let Ok(q) = planar_chart(&self.model, x, y, z[2] * s) {
                        out.copy_from_slice(&q);
                        return;
                    }
                }
                out.copy_from_slice(&self.model.neutral);
            }
        }
    }

    fn encode(&self, q: &[f64]) -> Vec<f64> {
        match forward_kinematics(&self.model, q).tray {
            Transform::Se2(t) => vec![t.translation.x, t.translation.y, t.angle()],
            Transform::Se3(_) => unreachable!(),
        }
    }
}

/// Joint space itself, used by the penalty baseline.
#[derive(Debug, Clone, Copy)]
pub struct IdentityChart {
    pub dim: usize,
}

impl Decoder for IdentityChart {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn decode_into(&self, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
    }

    fn encode(&self, q: &[f64]) -> Vec<f64> {
        q.to_vec()
    }
}

// ---------------------------------------------------------------- dataset

/// On-manifold configurations used to train the VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldDataset {
    pub model_id: String,
    pub seed: u64,
    pub samples: Vec<Configuration>,
}

impl ManifoldDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let id = self.model_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let n = self.samples.first().map_or(0, |q| q.len());
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for q in &self.samples {
            for v in q.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// SHA-256 of the serialized samples, recorded in trained parameters.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.payload()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        let payload = self.payload();
        let mut f = std::fs::File::create(path)?;
        f.write_all(DATASET_MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(payload.len() as u64).to_le_bytes())?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        r.header(DATASET_MAGIC)?;
        let len = r.u64()? as usize;
        if r.remaining() != len {
            return Err(CodecError::Format(format!(
                "payload is {} bytes, header declares {len}",
                r.remaining()
            )));
        }
        let id_len = r.u32()? as usize;
        let model_id = String::from_utf8(r.bytes(id_len)?.to_vec())
            .map_err(|_| CodecError::Format("model id is not utf-8".into()))?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            samples.push(Configuration(r.f64s(n)?));
        }
        Ok(Self {
            model_id,
            seed,
            samples,
        })
    }
}

/// Samples `count` configurations by projecting uniform joint-space seeds
/// onto the manifold; failed projections are discarded and resampled.
pub fn generate_dataset(model: &ChainModel, count: usize, seed: u64) -> Result<ManifoldDataset, CodecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let max_attempts = 100 * count.max(1);
    let mut attempts = 0;
    while samples.len() < count {
        if attempts == max_attempts {
            return Err(CodecError::LowAcceptance {
                accepted: samples.len(),
                attempts,
            });
        }
        attempts += 1;
        let q0: Vec<f64> = model
            .lower
            .iter()
            .zip(&model.upper)
            .map(|(l, u)| rng.gen_range(*l..*u))
            .collect();
        if let Ok(out) = project_to_manifold(model, &q0, 1e-10, 50) {
            if out.residual <= DATASET_TOL && model.within_bounds(&out.q) {
                samples.push(out.q);
            }
        }
    }
    Ok(ManifoldDataset {
        model_id: model.name.clone(),
        seed,
        samples,
    })
}

/// Mean `‖h(ψ(z))‖` over a set of latent points.
pub fn mean_mismatch(model: &ChainModel, decoder: &dyn Decoder, zs: &[Vec<f64>]) -> f64 {
    let mut q = vec![0.0; decoder.output_dim()];
    let total: f64 = zs
        .iter()
        .map(|z| {
            decoder.decode_into(z, &mut q);
            constraint_norm(model, &q)
        })
        .sum();
    total / zs.len() as f64
}

// -------------------------------------------------------------------- VAE

/// `tanh` through a single `expm1`; accurate to a few ulp and cheaper than
/// the libm routine.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let t = (2.0 * x).exp_m1();
    t / (t + 2.0)
}

/// Shapes of a dense tanh network stored in a flat parameter vector.
///
/// Layer `l` owns a column-major `out × in` weight block followed by `out`
/// biases. Hidden layers use tanh, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
struct MlpLayout {
    sizes: Vec<usize>,
    offset: usize,
}

impl MlpLayout {
    fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = self.offset;
        self.sizes.windows(2).map(move |w| {
            let start = off;
            off += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Single-sample forward pass with stack buffers.
    fn forward_one(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let mut a = [0.0f64; MAX_LAYER_WIDTH];
        let mut b = [0.0f64; MAX_LAYER_WIDTH];
        a[..x.len()].copy_from_slice(x);
        let last = self.sizes.len() - 2;
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w = &theta[off..off + fan_in * fan_out];
            let bias = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let acc = &mut b[..fan_out];
            acc.copy_from_slice(bias);
            for (j, xj) in a[..fan_in].iter().enumerate() {
                let col = &w[j * fan_out..(j + 1) * fan_out];
                for (o, c) in acc.iter_mut().zip(col) {
                    *o += c * xj;
                }
            }
            if l < last {
                for v in acc.iter_mut() {
                    *v = fast_tanh(*v);
                }
            }
            std::mem::swap(&mut a, &mut b);
        }
        out.copy_from_slice(&a[..out.len()]);
    }

    /// Batch forward pass; returns the activations of every layer, input first.
    fn forward_batch(&self, theta: &[f64], x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.sizes.len() - 2;
        let mut acts = vec![x];
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w = DMatrixView::from_slice(&theta[off..off + fan_in * fan_out], fan_out, fan_in);
            let bias = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut a = w * acts.last().unwrap();
            for mut col in a.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if l < last {
                a.apply(|v| *v = fast_tanh(*v));
            }
            acts.push(a);
        }
        acts
    }

    /// Backpropagates `d_out` (gradient w.r.t. the last activation) and
    /// accumulates parameter gradients into `grad`; returns the input gradient.
    fn backward_batch(
        &self,
        theta: &[f64],
        acts: &[DMatrix<f64>],
        d_out: DMatrix<f64>,
        grad: &mut [f64],
    ) -> DMatrix<f64> {
        let layers: Vec<_> = self.layers().collect();
        let mut delta = d_out;
        for (l, &(off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                let mut gw = DMatrixViewMut::from_slice(gw, fan_out, fan_in);
                gw.gemm(1.0, &delta, &input.transpose(), 1.0);
                for col in delta.column_iter() {
                    for (g, d) in gb.iter_mut().zip(col.iter()) {
                        *g += d;
                    }
                }
            }
            let w = DMatrixView::from_slice(&theta[off..off + fan_in * fan_out], fan_out, fan_in);
            let mut d_in = w.transpose() * &delta;
            if l > 0 {
                // input is a tanh activation
                d_in.zip_apply(input, |d, h| *d *= 1.0 - h * h);
            }
            delta = d_in;
        }
        delta
    }
}

/// Training-run metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub final_elbo: f64,
    /// Largest `‖q − ψ(μ(q))‖∞` over the training set, in radians.
    pub recon_bound: f64,
    pub dataset_hash: [u8; 32],
    pub seed: u64,
}

/// Parameters of the VAE: encoder `n → … → 2m` (mean, log-variance) and
/// decoder `m → … → n`, both acting on joint angles normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    encoder: MlpLayout,
    decoder: MlpLayout,
    theta: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Options for [`train_vae`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch (cosine schedule).
    pub final_learning_rate: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 64,
            learning_rate: 3e-3,
            final_learning_rate: 1e-4,
            beta: 1e-3,
            seed: 0,
        }
    }
}

/// Loss terms of one ELBO evaluation, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub loss: f64,
}

impl VaeParams {
    /// Xavier-uniform initialization with zero biases.
    pub fn init(model: &ChainModel, hidden: &[usize], seed: u64) -> Result<Self, CodecError> {
        let n = model.joint_count();
        let m = model.manifold_dim();
        if hidden.is_empty() || hidden.iter().any(|&h| h == 0 || h > MAX_LAYER_WIDTH) {
            return Err(CodecError::Architecture(format!(
                "hidden widths must be in 1..={MAX_LAYER_WIDTH}, got {hidden:?}"
            )));
        }
        if n > MAX_LAYER_WIDTH || 2 * m > MAX_LAYER_WIDTH {
            return Err(CodecError::Architecture("model too large".into()));
        }
        let mut enc = vec![n];
        enc.extend_from_slice(hidden);
        enc.push(2 * m);
        let mut dec = vec![m];
        dec.extend_from_slice(hidden);
        dec.push(n);
        Self::from_sizes(enc, dec, model.lower.clone(), model.upper.clone(), seed)
    }

    fn from_sizes(enc: Vec<usize>, dec: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>, seed: u64) -> Result<Self, CodecError> {
        let ne = MlpLayout::param_count(&enc);
        let nd = MlpLayout::param_count(&dec);
        let encoder = MlpLayout { sizes: enc, offset: 0 };
        let decoder = MlpLayout { sizes: dec, offset: ne };
        let mut theta = vec![0.0; ne + nd];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layout in [&encoder, &decoder] {
            for (off, fan_in, fan_out) in layout.layers() {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut theta[off..off + fan_in * fan_out] {
                    *w = rng.gen_range(-a..a);
                }
            }
        }
        Ok(Self {
            encoder,
            decoder,
            theta,
            lower,
            upper,
            meta: TrainingMeta {
                epochs: 0,
                final_elbo: f64::INFINITY,
                recon_bound: f64::INFINITY,
                dataset_hash: [0; 32],
                seed,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.theta
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn encoder_sizes(&self) -> &[usize] {
        &self.encoder.sizes
    }

    pub fn decoder_sizes(&self) -> &[usize] {
        &self.decoder.sizes
    }

    fn n(&self) -> usize {
        self.lower.len()
    }

    fn m(&self) -> usize {
        self.decoder.sizes[0]
    }

    pub fn normalize(&self, q: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = 2.0 * (q[i] - self.lower[i]) / (self.upper[i] - self.lower[i]) - 1.0;
        }
    }

    pub fn denormalize(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.lower[i] + 0.5 * (x[i] + 1.0) * (self.upper[i] - self.lower[i]);
        }
    }

    /// Encoder mean and log-variance for one configuration.
    pub fn encode_full(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let mut x = vec![0.0; self.n()];
        self.normalize(q, &mut x);
        let mut out = vec![0.0; 2 * m];
        self.encoder.forward_one(&self.theta, &x, &mut out);
        let lv = out.split_off(m);
        (out, lv)
    }

    /// Batch ELBO with fixed reparameterization noise `eps` (m × B) on
    /// normalized inputs `x` (n × B). Accumulates the gradient of the batch
    /// mean loss into `grad` when given.
    pub fn elbo(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>, beta: f64, grad: Option<&mut [f64]>) -> ElboTerms {
        let m = self.m();
        let n = self.n();
        let batch = x.ncols() as f64;
        let enc_acts = self.encoder.forward_batch(&self.theta, x.clone());
        let head = enc_acts.last().unwrap();
        let mu = head.rows(0, m).into_owned();
        let lv = head.rows(m, m).into_owned();
        let std = lv.map(|v| (0.5 * v).exp());
        let z = &mu + std.component_mul(eps);
        let dec_acts = self.decoder.forward_batch(&self.theta, z);
        let diff = dec_acts.last().unwrap() - x;
        let recon = diff.norm_squared() / (n as f64 * batch);
        let kl = 0.5
            * mu
                .iter()
                .zip(lv.iter())
                .map(|(u, l)| u * u + l.exp() - l - 1.0)
                .sum::<f64>()
            / batch;
        let terms = ElboTerms {
            recon,
            kl,
            loss: recon + beta * kl,
        };
        if let Some(grad) = grad {
            let d_xhat = diff * (2.0 / (n as f64 * batch));
            let d_z = self.decoder.backward_batch(&self.theta, &dec_acts, d_xhat, grad);
            let mut d_head = DMatrix::zeros(2 * m, x.ncols());
            for c in 0..x.ncols() {
                for r in 0..m {
                    let (u, l, e, s) = (mu[(r, c)], lv[(r, c)], eps[(r, c)], std[(r, c)]);
                    d_head[(r, c)] = d_z[(r, c)] + beta * u / batch;
                    d_head[(m + r, c)] =
                        d_z[(r, c)] * e * 0.5 * s + 0.5 * beta * (l.exp() - 1.0) / batch;
                }
            }
            self.encoder.backward_batch(&self.theta, &enc_acts, d_head, grad);
        }
        terms
    }

    fn normalized_matrix(&self, qs: &[&Configuration]) -> DMatrix<f64> {
        let n = self.n();
        let mut x = DMatrix::zeros(n, qs.len());
        for (c, q) in qs.iter().enumerate() {
            let mut col = vec![0.0; n];
            self.normalize(q, &mut col);
            x.set_column(c, &DVector::from_vec(col));
        }
        x
    }

    // ------------------------------------------------------------ file I/O

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for layout in [&self.encoder, &self.decoder] {
            for (off, fan_in, fan_out) in layout.layers() {
                // weights row-major (out × in), then biases
                for r in 0..fan_out {
                    for c in 0..fan_in {
                        buf.extend_from_slice(&self.theta[off + c * fan_out + r].to_le_bytes());
                    }
                }
                for b in &self.theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out] {
                    buf.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        for v in self.lower.iter().chain(&self.upper) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.meta.epochs.to_le_bytes());
        buf.extend_from_slice(&self.meta.final_elbo.to_le_bytes());
        buf.extend_from_slice(&self.meta.recon_bound.to_le_bytes());
        buf.extend_from_slice(&self.meta.dataset_hash);
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());
        buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for sizes in [&self.encoder.sizes, &self.decoder.sizes] {
            buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
            for s in sizes.iter() {
                buf.extend_from_slice(&(*s as u32).to_le_bytes());
            }
        }
        let payload = self.payload();
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(&payload);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.header(PARAMS_MAGIC)?;
        let mut sizes = Vec::new();
        for _ in 0..2 {
            let count = r.u32()? as usize;
            if !(2..=16).contains(&count) {
                return Err(CodecError::Format(format!("bad layer count {count}")));
            }
            let mut s = Vec::with_capacity(count);
            for _ in 0..count {
                let w = r.u32()? as usize;
                if w == 0 || w > MAX_LAYER_WIDTH {
                    return Err(CodecError::Format(format!("bad layer width {w}")));
                }
                s.push(w);
            }
            sizes.push(s);
        }
        let dec = sizes.pop().unwrap();
        let enc = sizes.pop().unwrap();
        let (n, m) = (enc[0], dec[0]);
        if *dec.last().unwrap() != n || *enc.last().unwrap() != 2 * m {
            return Err(CodecError::Format("encoder and decoder shapes disagree".into()));
        }
        let declared = r.u64()? as usize;
        let ne = MlpLayout::param_count(&enc);
        let nd = MlpLayout::param_count(&dec);
        let expected = 8 * (ne + nd + 2 * n) + 4 + 8 + 8 + 32 + 8;
        if declared != expected || r.remaining() != declared {
            return Err(CodecError::Format(format!(
                "payload is {} bytes, header declares {declared}, layout needs {expected}",
                r.remaining()
            )));
        }
        let encoder = MlpLayout { sizes: enc, offset: 0 };
        let decoder = MlpLayout { sizes: dec, offset: ne };
        let mut theta = vec![0.0; ne + nd];
        for layout in [&encoder, &decoder] {
            for (off, fan_in, fan_out) in layout.layers() {
                for row in 0..fan_out {
                    for c in 0..fan_in {
                        theta[off + c * fan_out + row] = r.f64()?;
                    }
                }
                for b in &mut theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out] {
                    *b = r.f64()?;
                }
            }
        }
        let lower = r.f64s(n)?;
        let upper = r.f64s(n)?;
        let epochs = r.u32()?;
        let final_elbo = r.f64()?;
        let recon_bound = r.f64()?;
        let mut dataset_hash = [0u8; 32];
        dataset_hash.copy_from_slice(r.bytes(32)?);
        let seed = r.u64()?;
        Ok(Self {
            encoder,
            decoder,
            theta,
            lower,
            upper,
            meta: TrainingMeta {
                epochs,
                final_elbo,
                recon_bound,
                dataset_hash,
                seed,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Decoder for VaeParams {
    fn latent_dim(&self) -> usize {
        self.m()
    }

    fn output_dim(&self) -> usize {
        self.n()
    }

    fn decode_into(&self, z: &[f64], out: &mut [f64]) {
        let mut x = [0.0; MAX_LAYER_WIDTH];
        let n = self.n();
        self.decoder.forward_one(&self.theta, z, &mut x[..n]);
        self.denormalize(&x[..n], out);
    }

    fn encode(&self, q: &[f64]) -> Vec<f64> {
        self.encode_full(q).0
    }

    fn decode_many(&self, zs: &[f64], count: usize, out: &mut [f64]) {
        let m = self.m();
        let n = self.n();
        let acts = self
            .decoder
            .forward_batch(&self.theta, DMatrix::from_column_slice(m, count, &zs[..m * count]));
        let x = acts.last().unwrap();
        for (c, col) in x.column_iter().enumerate() {
            self.denormalize(col.as_slice(), &mut out[c * n..(c + 1) * n]);
        }
    }
}

/// Mean-path reconstruction `ψ(μ(q))`.
pub fn reconstruct(params: &VaeParams, q: &[f64]) -> Configuration {
    params.decode(&params.encode(q))
}

/// Trains the VAE with Adam on shuffled minibatches.
///
/// The learning rate follows a cosine schedule from `learning_rate` to
/// `final_learning_rate`. Everything is single-threaded and determined by
/// `cfg.seed`.
pub fn train_vae(model: &ChainModel, dataset: &ManifoldDataset, cfg: &TrainConfig) -> Result<VaeParams, CodecError> {
    if dataset.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    if dataset.samples[0].len() != model.joint_count() {
        return Err(CodecError::Architecture("dataset does not match model".into()));
    }
    let mut params = VaeParams::init(model, &cfg.hidden, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let m = params.m();
    let p = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let (b1, b2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut last_elbo = f64::NAN;
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
        let lr = cfg.final_learning_rate
            + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos());
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let qs: Vec<&Configuration> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let x = params.normalized_matrix(&qs);
            let eps = DMatrix::from_fn(m, chunk.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            grad.iter_mut().for_each(|g| *g = 0.0);
            let terms = params.elbo(&x, &eps, cfg.beta, Some(&mut grad));
            if !terms.loss.is_finite() {
                return Err(CodecError::Diverged { epoch });
            }
            epoch_loss += terms.loss * chunk.len() as f64;
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for i in 0..p {
                m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                params.theta[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + adam_eps);
            }
        }
        last_elbo = epoch_loss / dataset.len() as f64;
        if !last_elbo.is_finite() {
            return Err(CodecError::Diverged { epoch });
        }
    }
    let recon_bound = dataset
        .samples
        .iter()
        .map(|q| {
            let r = reconstruct(&params, q);
            q.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    params.meta = TrainingMeta {
        epochs: cfg.epochs as u32,
        final_elbo: last_elbo,
        recon_bound,
        dataset_hash: dataset.hash(),
        seed: cfg.seed,
    };
    Ok(params)
}

// ------------------------------------------------------------- byte reader

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn bytes(&mut self, len: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < len {
            return Err(CodecError::Format("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<(), CodecError> {
        if self.bytes(8)? != magic {
            return Err(CodecError::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(CodecError::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        (0..n).map(|_| self.f64()).collect()
    }
}
