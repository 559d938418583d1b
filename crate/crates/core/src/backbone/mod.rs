//! Binary real/fake classifier shared by the teacher and the student.
//!
//! The reference network is a stack of ReLU convolutions over a 128x128x3
//! HWC input, global average pooling, one ReLU hidden layer whose activations
//! are the model's *features*, and a two-way linear head producing logits.

pub mod checkpoint;
mod layers;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use layers::ConvSpec;
use layers::{col2im, im2col, matmul, matmul_a_bt, matmul_at_b_acc, ConvGeom};

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};

pub const INPUT_SIZE: usize = 128;
pub const INPUT_CHANNELS: usize = 3;

/// Samples per rayon work unit when reducing gradients. Fixed so that the
/// summation order, and therefore the result, does not depend on the number
/// of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv: Vec<ConvSpec>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            input_channels: INPUT_CHANNELS,
            conv: vec![
                ConvSpec { out_channels: 12, kernel: 4, stride: 4, padding: 0 },
                ConvSpec { out_channels: 24, kernel: 3, stride: 2, padding: 1 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2, padding: 1 },
            ],
            feature_dim: 32,
            num_classes: NUM_CLASSES,
        }
    }
}

impl Architecture {
    pub fn with_feature_dim(mut self, feature_dim: usize) -> Self {
        self.feature_dim = feature_dim;
        self
    }

    fn geoms(&self) -> Result<Vec<ConvGeom>> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "classifier must have {NUM_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.conv.is_empty() || self.feature_dim == 0 || self.input_channels == 0 {
            return Err(Error::Config("architecture needs at least one conv block and a positive feature dimension".into()));
        }
        let (mut h, mut w, mut c) = (self.input_size, self.input_size, self.input_channels);
        let mut geoms = Vec::with_capacity(self.conv.len());
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.out_channels == 0 {
                return Err(Error::Config(format!("conv{i} has zero output channels")));
            }
            let g = ConvGeom::new(h, w, c, spec)
                .ok_or_else(|| Error::Config(format!("conv{i} does not fit a {h}x{w} input")))?;
            (h, w, c) = (g.out_h, g.out_w, g.out_c);
            geoms.push(g);
        }
        Ok(geoms)
    }

    fn last_channels(&self) -> usize {
        self.conv.last().map(|c| c.out_channels).unwrap_or(0)
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let geoms = self.geoms()?;
        let mut shapes = Vec::new();
        for (i, g) in geoms.iter().enumerate() {
            shapes.push((format!("conv{i}.weight"), vec![g.patch_len(), g.out_c]));
            shapes.push((format!("conv{i}.bias"), vec![g.out_c]));
        }
        shapes.push(("hidden.weight".into(), vec![self.last_channels(), self.feature_dim]));
        shapes.push(("hidden.bias".into(), vec![self.feature_dim]));
        shapes.push(("head.weight".into(), vec![self.feature_dim, self.num_classes]));
        shapes.push(("head.bias".into(), vec![self.num_classes]));
        Ok(shapes)
    }

    /// Stable identifier of the architecture; equal fingerprints mean
    /// parameter sets are interchangeable.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("architecture serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..12])
    }

    /// Multiply-accumulates for one forward pass.
    pub fn forward_macs(&self) -> Result<usize> {
        let geoms = self.geoms()?;
        Ok(geoms.iter().map(ConvGeom::macs).sum::<usize>()
            + self.last_channels() * self.feature_dim
            + self.feature_dim * self.num_classes)
    }
}

/// A normalized HWC image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        Self { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Penultimate-layer activations (input to the classification head).
    pub features: Vec<f32>,
    pub logits: [f32; NUM_CLASSES],
}

impl ModelOutput {
    pub fn logits_f64(&self) -> [f64; NUM_CLASSES] {
        [self.logits[0] as f64, self.logits[1] as f64]
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    /// Largest class probability at temperature 1.
    pub fn confidence(&self) -> f64 {
        let [a, b] = self.logits_f64();
        let d = (a - b).abs();
        1.0 / (1.0 + (-d).exp())
    }

    /// Argmax class; ties go to real.
    pub fn predicted(&self) -> Label {
        if self.logits[1] > self.logits[0] {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

/// Upstream gradient of a scalar loss with respect to one sample's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub d_logits: [f32; NUM_CLASSES],
    pub d_features: Option<Vec<f32>>,
}

impl OutputGrad {
    pub fn logits_only(d_logits: [f32; NUM_CLASSES]) -> Self {
        Self { d_logits, d_features: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Per-parameter gradient buffers aligned with [`ModelHandle::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    pub fn zeros_like(model: &ModelHandle) -> Self {
        Self(model.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
    }
}

struct ForwardCache {
    /// im2col buffer of each conv layer's input.
    cols: Vec<Vec<f32>>,
    /// Post-ReLU output of each conv layer.
    acts: Vec<Vec<f32>>,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
}

#[derive(Clone)]
pub struct ModelHandle {
    arch: Architecture,
    geoms: Vec<ConvGeom>,
    params: Vec<Param>,
    trainable: bool,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("fingerprint", &self.arch.fingerprint())
            .field("feature_dim", &self.arch.feature_dim)
            .field("trainable", &self.trainable)
            .finish()
    }
}

impl ModelHandle {
    /// Randomly initialized, trainable model (He-normal weights, zero biases).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let geoms = arch.geoms()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; len]
                } else {
                    let fan_in = shape[0] as f32;
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self { arch, geoms, params, trainable: true })
    }

    pub(crate) fn from_parts(arch: Architecture, params: Vec<Param>, trainable: bool) -> Result<Self> {
        let geoms = arch.geoms()?;
        let expected = arch.param_shapes()?;
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|((n, s), p)| *n != p.name || *s != p.shape || p.data.len() != s.iter().product::<usize>())
        {
            return Err(Error::IncompatibleArchitecture("parameter set does not match the architecture".into()));
        }
        Ok(Self { arch, geoms, params, trainable })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Marks the model untrainable. Idempotent.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    /// A trainable duplicate, e.g. to seed a student from a frozen teacher.
    pub fn trainable_clone(&self) -> Self {
        Self { trainable: true, ..self.clone() }
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn parameter_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.arch.fingerprint().as_bytes());
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Largest absolute element-wise parameter difference.
    pub fn max_abs_diff(&self, other: &ModelHandle) -> Result<f32> {
        check_compatible(self, other)?;
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max))
    }

    fn check_input(&self, index: usize, image: &ImageTensor) -> Result<()> {
        let (s, c) = (self.arch.input_size, self.arch.input_channels);
        if image.height != s || image.width != s || image.channels != c {
            return Err(Error::InputContract {
                index,
                reason: format!(
                    "expected {s}x{s}x{c} image, got {}x{}x{}",
                    image.height, image.width, image.channels
                ),
            });
        }
        if image.data.len() != s * s * c {
            return Err(Error::InputContract {
                index,
                reason: format!("buffer holds {} values, expected {}", image.data.len(), s * s * c),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[ImageTensor]) -> Result<()> {
        batch.iter().enumerate().try_for_each(|(i, img)| self.check_input(i, img))
    }

    /// Deterministic inference over a batch; one output per input.
    pub fn forward(&self, batch: &[ImageTensor]) -> Result<Vec<ModelOutput>> {
        self.check_batch(batch)?;
        Ok(batch.par_iter().map(|img| self.forward_cached(&img.data).0).collect())
    }

    /// Forward pass, loss-gradient callback, and backward pass over a batch.
    ///
    /// `grad_fn` receives every output and returns one [`OutputGrad`] per
    /// sample. The returned gradients are summed over the batch, so any batch
    /// averaging belongs in `grad_fn`.
    pub fn forward_backward<F>(&self, batch: &[ImageTensor], grad_fn: F) -> Result<(Vec<ModelOutput>, Gradients)>
    where
        F: FnOnce(&[ModelOutput]) -> Result<Vec<OutputGrad>>,
    {
        self.check_batch(batch)?;
        let (outputs, caches): (Vec<_>, Vec<_>) = batch.par_iter().map(|img| self.forward_cached(&img.data)).unzip();
        let upstream = grad_fn(&outputs)?;
        if upstream.len() != outputs.len() {
            return Err(Error::BatchContract(format!(
                "{} output gradients for {} samples",
                upstream.len(),
                outputs.len()
            )));
        }
        let work: Vec<(&ForwardCache, &OutputGrad)> = caches.iter().zip(&upstream).collect();
        let partials: Vec<Gradients> = work
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = Gradients::zeros_like(self);
                for (cache, g) in chunk {
                    self.backward(cache, g, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        for p in &partials {
            total.add_assign(p);
        }
        Ok((outputs, total))
    }

    fn forward_cached(&self, input: &[f32]) -> (ModelOutput, ForwardCache) {
        let n_conv = self.geoms.len();
        let mut cols = Vec::with_capacity(n_conv);
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(n_conv);
        for (i, g) in self.geoms.iter().enumerate() {
            let src: &[f32] = if i == 0 { input } else { &acts[i - 1] };
            let mut col = vec![0.0; g.positions() * g.patch_len()];
            im2col(g, src, &mut col);
            let mut out = vec![0.0; g.positions() * g.out_c];
            matmul(g.positions(), g.patch_len(), g.out_c, &col, &self.params[2 * i].data, &mut out);
            let bias = &self.params[2 * i + 1].data;
            for row in out.chunks_exact_mut(g.out_c) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v = (*v + b).max(0.0);
                }
            }
            cols.push(col);
            acts.push(out);
        }

        let last = self.geoms[n_conv - 1];
        let mut pooled = vec![0.0f32; last.out_c];
        for row in acts[n_conv - 1].chunks_exact(last.out_c) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += *v;
            }
        }
        let inv = 1.0 / last.positions() as f32;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let fdim = self.arch.feature_dim;
        let (hw, hb) = (&self.params[2 * n_conv].data, &self.params[2 * n_conv + 1].data);
        let mut hidden = hb.clone();
        for (c, &x) in pooled.iter().enumerate() {
            let row = &hw[c * fdim..][..fdim];
            for (h, w) in hidden.iter_mut().zip(row) {
                *h += x * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));

        let (ow, ob) = (&self.params[2 * n_conv + 2].data, &self.params[2 * n_conv + 3].data);
        let mut logits = [ob[0], ob[1]];
        for (f, &h) in hidden.iter().enumerate() {
            logits[0] += h * ow[f * NUM_CLASSES];
            logits[1] += h * ow[f * NUM_CLASSES + 1];
        }

        let output = ModelOutput { features: hidden.clone(), logits };
        (output, ForwardCache { cols, acts, pooled, hidden })
    }

    fn backward(&self, cache: &ForwardCache, grad: &OutputGrad, acc: &mut Gradients) {
        let n_conv = self.geoms.len();
        let fdim = self.arch.feature_dim;
        let g = &mut acc.0;

        // head
        let ow = &self.params[2 * n_conv + 2].data;
        let mut d_hidden = match &grad.d_features {
            Some(df) => df.clone(),
            None => vec![0.0; fdim],
        };
        for f in 0..fdim {
            let h = cache.hidden[f];
            for k in 0..NUM_CLASSES {
                g[2 * n_conv + 2][f * NUM_CLASSES + k] += h * grad.d_logits[k];
                d_hidden[f] += ow[f * NUM_CLASSES + k] * grad.d_logits[k];
            }
        }
        for k in 0..NUM_CLASSES {
            g[2 * n_conv + 3][k] += grad.d_logits[k];
        }

        // hidden (ReLU)
        for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        let hw = &self.params[2 * n_conv].data;
        let channels = cache.pooled.len();
        let mut d_pooled = vec![0.0f32; channels];
        for c in 0..channels {
            let x = cache.pooled[c];
            let row = &hw[c * fdim..][..fdim];
            let grow = &mut g[2 * n_conv][c * fdim..][..fdim];
            let mut s = 0.0;
            for f in 0..fdim {
                grow[f] += x * d_hidden[f];
                s += row[f] * d_hidden[f];
            }
            d_pooled[c] = s;
        }
        for (b, d) in g[2 * n_conv + 1].iter_mut().zip(&d_hidden) {
            *b += *d;
        }

        // global average pool
        let last = self.geoms[n_conv - 1];
        let inv = 1.0 / last.positions() as f32;
        let mut d_act: Vec<f32> = Vec::with_capacity(last.positions() * last.out_c);
        for _ in 0..last.positions() {
            d_act.extend(d_pooled.iter().map(|d| d * inv));
        }

        // conv stack
        for i in (0..n_conv).rev() {
            let geo = self.geoms[i];
            for (d, a) in d_act.iter_mut().zip(&cache.acts[i]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            matmul_at_b_acc(geo.positions(), geo.patch_len(), geo.out_c, &cache.cols[i], &d_act, &mut g[2 * i]);
            let gb = &mut g[2 * i + 1];
            for row in d_act.chunks_exact(geo.out_c) {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += *d;
                }
            }
            if i == 0 {
                break;
            }
            let mut d_cols = vec![0.0; geo.positions() * geo.patch_len()];
            matmul_a_bt(geo.positions(), geo.out_c, geo.patch_len(), &d_act, &self.params[2 * i].data, &mut d_cols);
            let mut d_in = vec![0.0; geo.in_h * geo.in_w * geo.in_c];
            col2im(&geo, &d_cols, &mut d_in);
            d_act = d_in;
        }
    }
}

fn check_compatible(a: &ModelHandle, b: &ModelHandle) -> Result<()> {
    if a.arch != b.arch {
        return Err(Error::IncompatibleArchitecture(format!(
            "fingerprint {} (feature dim {}) vs {} (feature dim {})",
            a.arch.fingerprint(),
            a.arch.feature_dim,
            b.arch.fingerprint(),
            b.arch.feature_dim
        )));
    }
    Ok(())
}

/// Overwrites `dst`'s parameters with `src`'s. `dst.trainable` is kept.
pub fn copy_weights(src: &ModelHandle, dst: &mut ModelHandle) -> Result<()> {
    check_compatible(src, dst)?;
    for (d, s) in dst.params.iter_mut().zip(&src.params) {
        d.data.copy_from_slice(&s.data);
    }
    Ok(())
}

pub fn freeze(model: &mut ModelHandle) {
    model.freeze();
}
