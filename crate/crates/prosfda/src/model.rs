//! Pixel-wise tanh MLP classifier: the differentiable model whose penultimate
//! activations feed the prototype machinery and whose logits feed the
//! self-training losses.
//!
//! The model is deliberately pixel-local (no spatial mixing): per pixel,
//! `input_dim` features pass through the hidden stack, each layer ending in
//! tanh; the activations after the last tanh are the returned features, and a
//! single linear head maps them to class logits. A convolutional variant
//! would slot behind the same forward/backward contract.
//!
//! Parameter layout (fixed; checkpoints depend on it): layers in order, each
//! as the weight matrix in row-major `[out][in]` followed by the bias vector
//! `[out]`. The head is the final layer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{check_count, BinReader, BinWriter};
use crate::numerics::{argmax_slice, RealArray};
use crate::rng::SeedRng;

/// Per-pixel feature image, shape `[H, W, D]`.
pub type FeatureMap = RealArray;
/// Per-pixel class scores, shape `[H, W, C]`.
pub type LogitMap = RealArray;
/// Per-pixel class probabilities, shape `[H, W, C]`.
pub type ProbMap = RealArray;

/// Per-pixel class indices, used both for ground truth and pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> usize {
        self.labels[h * self.width + w]
    }

    /// Row-major flat view.
    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Architecture of the pixel classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input channels per pixel.
    pub input_dim: usize,
    /// Widths of the hidden tanh layers, outermost first. Must be non-empty;
    /// the last width is the feature dimension.
    pub hidden_dims: Vec<usize>,
    /// Penultimate width D, kept explicit so files are self-describing.
    pub feature_dim: usize,
    /// Number of classes C.
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden_dims must be a non-empty list of positive widths".into(),
            ));
        }
        if self.feature_dim != *self.hidden_dims.last().unwrap() {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} must equal the last hidden width {}",
                self.feature_dim,
                self.hidden_dims.last().unwrap()
            )));
        }
        Ok(())
    }

    /// Layer widths from input to logits: `[input_dim, hidden..., num_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    /// Total parameter count; a pure function of the spec.
    pub fn param_len(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// (weight_offset, bias_offset, in_dim, out_dim) per layer, head last.
    pub fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push((off, off + fan_in * fan_out, fan_in, fan_out));
            off += fan_in * fan_out + fan_out;
        }
        out
    }
}

/// Flat model parameters in the documented layout. Shared by the student,
/// the teacher, and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_image(spec: &ModelSpec, image: &RealArray) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "image shape {s:?} does not match input_dim {}",
            spec.input_dim
        )));
    }
    Ok((s[0], s[1]))
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector length {} does not match spec ({} expected)",
            params.len(),
            spec.param_len()
        )));
    }
    Ok(())
}

/// Evaluates the model on one image. Returns the post-tanh penultimate
/// features and the head logits, both per pixel. Deterministic.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    image: &RealArray,
) -> Result<(FeatureMap, LogitMap)> {
    spec.validate()?;
    check_params(spec, params)?;
    let (h, w) = check_image(spec, image)?;

    let dims = spec.layer_dims();
    let offsets = spec.layer_offsets();
    let num_layers = offsets.len();
    let d = spec.feature_dim;
    let c = spec.num_classes;

    let mut acts: Vec<Vec<f64>> = dims.iter().map(|&n| vec![0.0; n]).collect();
    let mut features = vec![0.0; h * w * d];
    let mut logits = vec![0.0; h * w * c];

    let pixels = image.as_slice();
    for px in 0..h * w {
        acts[0].copy_from_slice(&pixels[px * spec.input_dim..(px + 1) * spec.input_dim]);
        for l in 0..num_layers {
            let (w_off, b_off, fan_in, fan_out) = offsets[l];
            let (lo, hi) = acts.split_at_mut(l + 1);
            let input = &lo[l];
            let output = &mut hi[0];
            for o in 0..fan_out {
                let row = &params.values[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut s = params.values[b_off + o];
                for (wi, ai) in row.iter().zip(input.iter()) {
                    s += wi * ai;
                }
                // tanh on hidden layers only; the head stays linear.
                output[o] = if l + 1 < num_layers { s.tanh() } else { s };
            }
        }
        features[px * d..(px + 1) * d].copy_from_slice(&acts[num_layers - 1]);
        logits[px * c..(px + 1) * c].copy_from_slice(&acts[num_layers]);
    }

    let features = RealArray::from_vec(vec![h, w, d], features)?;
    let logits = RealArray::from_vec(vec![h, w, c], logits)?;
    Ok((features, logits))
}

/// Exact reverse-mode gradient of any scalar loss whose partials with respect
/// to the features and the logits are `upstream_features` and
/// `upstream_logits`. Either upstream may be all-zero.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    image: &RealArray,
    upstream_features: &RealArray,
    upstream_logits: &RealArray,
) -> Result<ParamVector> {
    spec.validate()?;
    check_params(spec, params)?;
    let (h, w) = check_image(spec, image)?;
    let d = spec.feature_dim;
    let c = spec.num_classes;
    if upstream_features.shape() != [h, w, d] {
        return Err(Error::ShapeMismatch(format!(
            "upstream feature grad shape {:?}, expected [{h}, {w}, {d}]",
            upstream_features.shape()
        )));
    }
    if upstream_logits.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch(format!(
            "upstream logit grad shape {:?}, expected [{h}, {w}, {c}]",
            upstream_logits.shape()
        )));
    }

    let dims = spec.layer_dims();
    let offsets = spec.layer_offsets();
    let num_layers = offsets.len();
    let hidden_layers = num_layers - 1;

    let mut grad = vec![0.0; params.len()];
    let mut acts: Vec<Vec<f64>> = dims.iter().map(|&n| vec![0.0; n]).collect();
    // Two ping-pong buffers for the backpropagated activation gradient.
    let max_dim = *dims.iter().max().unwrap();
    let mut dcur = vec![0.0; max_dim];
    let mut dnext = vec![0.0; max_dim];

    let pixels = image.as_slice();
    let gfs = upstream_features.as_slice();
    let gls = upstream_logits.as_slice();

    for px in 0..h * w {
        // Forward pass, keeping every activation for this pixel.
        acts[0].copy_from_slice(&pixels[px * spec.input_dim..(px + 1) * spec.input_dim]);
        for l in 0..num_layers {
            let (w_off, b_off, fan_in, fan_out) = offsets[l];
            let (lo, hi) = acts.split_at_mut(l + 1);
            let input = &lo[l];
            let output = &mut hi[0];
            for o in 0..fan_out {
                let row = &params.values[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut s = params.values[b_off + o];
                for (wi, ai) in row.iter().zip(input.iter()) {
                    s += wi * ai;
                }
                output[o] = if l + 1 < num_layers { s.tanh() } else { s };
            }
        }

        // Head: linear, so its upstream is the logit grad directly.
        let (w_off, b_off, fan_in, fan_out) = offsets[num_layers - 1];
        let gl = &gls[px * c..(px + 1) * c];
        let feat = &acts[hidden_layers];
        for o in 0..fan_out {
            let g = gl[o];
            grad[b_off + o] += g;
            let wrow = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            for (gw, ai) in wrow.iter_mut().zip(feat.iter()) {
                *gw += g * ai;
            }
        }
        // Gradient reaching the features: head backprop plus the direct
        // upstream feature grad (the prototype losses touch features).
        let gf = &gfs[px * d..(px + 1) * d];
        for i in 0..d {
            let mut s = gf[i];
            for o in 0..fan_out {
                s += params.values[w_off + o * fan_in + i] * gl[o];
            }
            dcur[i] = s;
        }

        // Hidden stack in reverse, through each tanh.
        for l in (0..hidden_layers).rev() {
            let (w_off, b_off, fan_in, fan_out) = offsets[l];
            let post = &acts[l + 1];
            let input = &acts[l];
            for o in 0..fan_out {
                let dz = dcur[o] * (1.0 - post[o] * post[o]);
                grad[b_off + o] += dz;
                let wrow = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (gw, ai) in wrow.iter_mut().zip(input.iter()) {
                    *gw += dz * ai;
                }
                dcur[o] = dz; // reuse slot: dcur now holds dz for this layer
            }
            if l > 0 {
                for i in 0..fan_in {
                    let mut s = 0.0;
                    for o in 0..fan_out {
                        s += params.values[w_off + o * fan_in + i] * dcur[o];
                    }
                    dnext[i] = s;
                }
                std::mem::swap(&mut dcur, &mut dnext);
            }
        }
    }

    Ok(ParamVector { values: grad })
}

/// Samples initial parameters: each weight uniform in
/// `(-scale, +scale) / sqrt(fan_in)`, biases zero. Draw order is layer
/// order, weights row-major, so a seed pins the result exactly.
pub fn init_params(spec: &ModelSpec, rng: &mut SeedRng, scale: f64) -> Result<ParamVector> {
    spec.validate()?;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    let mut values = vec![0.0; spec.param_len()];
    for (w_off, _, fan_in, fan_out) in spec.layer_offsets() {
        let norm = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[w_off..w_off + fan_in * fan_out] {
            *v = rng.uniform(-scale, scale) * norm;
        }
        // biases stay zero
    }
    Ok(ParamVector { values })
}

/// Convenience: per-pixel argmax over logits with lowest-index tie-breaking.
pub fn argmax_labels(logits: &LogitMap) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("logit map must be rank 3, got {s:?}")));
    }
    let labels = logits.rows().map(argmax_slice).collect();
    LabelMap::new(s[0], s[1], labels)
}

const MODEL_MAGIC: &[u8; 4] = b"PSM1";

/// Writes a self-describing model checkpoint (spec + parameters). The
/// payload stores every f64 as little-endian bits, so round-trips are
/// bit-exact.
pub fn save_model(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    spec.validate()?;
    check_params(spec, params)?;
    let mut w = BinWriter::create(path)?;
    w.magic(MODEL_MAGIC)?;
    w.u32(1)?;
    w.u32(spec.input_dim as u32)?;
    w.u32(spec.hidden_dims.len() as u32)?;
    for &hd in &spec.hidden_dims {
        w.u32(hd as u32)?;
    }
    w.u32(spec.feature_dim as u32)?;
    w.u32(spec.num_classes as u32)?;
    w.u64(params.len() as u64)?;
    w.f64_slice(&params.values)?;
    w.finish()
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ParamVector)> {
    let mut r = BinReader::open(path)?;
    let out = read_model(&mut r, path)?;
    r.expect_eof()?;
    Ok(out)
}

pub(crate) fn read_model<R: std::io::Read>(
    r: &mut BinReader<R>,
    path: &Path,
) -> Result<(ModelSpec, ParamVector)> {
    r.expect_magic(MODEL_MAGIC, "model checkpoint")?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported model checkpoint version {version}",
            path.display()
        )));
    }
    let input_dim = r.u32("input_dim")? as usize;
    let n_hidden = check_count(r.u32("hidden count")? as u64, 1 << 16, "hidden layer", "model")?;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(r.u32("hidden width")? as usize);
    }
    let feature_dim = r.u32("feature_dim")? as usize;
    let num_classes = r.u32("num_classes")? as usize;
    let spec = ModelSpec { input_dim, hidden_dims, feature_dim, num_classes };
    spec.validate()
        .map_err(|e| Error::Format(format!("{}: invalid stored spec: {e}", path.display())))?;
    let len = check_count(r.u64("param length")?, 1 << 32, "parameter", "model")?;
    if len != spec.param_len() {
        return Err(Error::Format(format!(
            "{}: stored parameter count {len} does not match spec ({} expected)",
            path.display(),
            spec.param_len()
        )));
    }
    let values = r.f64_vec(len, "parameters")?;
    Ok((spec, ParamVector { values }))
}

pub(crate) fn write_model_into<W: std::io::Write>(
    w: &mut BinWriter<W>,
    spec: &ModelSpec,
    params: &ParamVector,
) -> Result<()> {
    w.magic(MODEL_MAGIC)?;
    w.u32(1)?;
    w.u32(spec.input_dim as u32)?;
    w.u32(spec.hidden_dims.len() as u32)?;
    for &hd in &spec.hidden_dims {
        w.u32(hd as u32)?;
    }
    w.u32(spec.feature_dim as u32)?;
    w.u32(spec.num_classes as u32)?;
    w.u64(params.len() as u64)?;
    w.f64_slice(&params.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn small_spec() -> ModelSpec {
        ModelSpec { input_dim: 2, hidden_dims: vec![2], feature_dim: 2, num_classes: 2 }
    }

    fn image_1x1(x: &[f64]) -> RealArray {
        RealArray::from_vec(vec![1, 1, x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits_and_uniform_probs() {
        let spec = ModelSpec { input_dim: 3, hidden_dims: vec![4], feature_dim: 4, num_classes: 5 };
        let params = ParamVector::zeros(spec.param_len());
        let image = RealArray::from_vec(vec![2, 2, 3], vec![0.5; 12]).unwrap();
        let (_, logits) = forward(&spec, &params, &image).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let probs = softmax(&logits, 1.0).unwrap();
        assert!(probs.as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn identity_setup_matches_hand_computation() {
        // One hidden layer with the 2x2 identity, identity head:
        // features = tanh(x), logits = features.
        let spec = small_spec();
        let mut params = ParamVector::zeros(spec.param_len());
        // hidden W = I
        params.values[0] = 1.0;
        params.values[3] = 1.0;
        // head W = I (offset: 2*2 weights + 2 biases = 6)
        params.values[6] = 1.0;
        params.values[9] = 1.0;
        let x = [0.3, -0.2];
        let (feat, logits) = forward(&spec, &params, &image_1x1(&x)).unwrap();
        let expect = [0.3f64.tanh(), (-0.2f64).tanh()];
        assert_eq!(feat.as_slice(), &expect);
        assert_eq!(logits.as_slice(), &expect);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec { input_dim: 4, hidden_dims: vec![6, 5], feature_dim: 5, num_classes: 3 };
        let mut rng = SeedRng::new(99);
        let params = init_params(&spec, &mut rng, 1.0).unwrap();
        let image =
            RealArray::from_vec(vec![3, 2, 4], (0..24).map(|i| (i as f64) * 0.11 - 1.0).collect())
                .unwrap();
        let (f1, l1) = forward(&spec, &params, &image).unwrap();
        let (f2, l2) = forward(&spec, &params, &image).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn forward_is_pixel_local() {
        let spec = ModelSpec { input_dim: 3, hidden_dims: vec![4], feature_dim: 4, num_classes: 2 };
        let mut rng = SeedRng::new(5);
        let params = init_params(&spec, &mut rng, 1.0).unwrap();
        let base: Vec<f64> = (0..2 * 2 * 3).map(|i| (i as f64) * 0.37 - 1.1).collect();
        let image = RealArray::from_vec(vec![2, 2, 3], base.clone()).unwrap();
        // Swap pixels (0,0) and (1,1).
        let mut swapped = base.clone();
        for k in 0..3 {
            swapped.swap(k, 9 + k);
        }
        let swapped = RealArray::from_vec(vec![2, 2, 3], swapped).unwrap();
        let (f, l) = forward(&spec, &params, &image).unwrap();
        let (fs, ls) = forward(&spec, &params, &swapped).unwrap();
        for k in 0..4 {
            assert_eq!(f.at3(0, 0, k), fs.at3(1, 1, k));
            assert_eq!(f.at3(1, 1, k), fs.at3(0, 0, k));
        }
        for k in 0..2 {
            assert_eq!(l.at3(0, 0, k), ls.at3(1, 1, k));
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec { input_dim: 9, hidden_dims: vec![7], feature_dim: 7, num_classes: 4 };
        let a = init_params(&spec, &mut SeedRng::new(1), 0.8).unwrap();
        let b = init_params(&spec, &mut SeedRng::new(1), 0.8).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, &mut SeedRng::new(2), 0.8).unwrap();
        assert_ne!(a, c);
        for (w_off, b_off, fan_in, fan_out) in spec.layer_offsets() {
            let bound = 0.8 / (fan_in as f64).sqrt();
            for &v in &a.values[w_off..w_off + fan_in * fan_out] {
                assert!(v.abs() <= bound);
            }
            for &v in &a.values[b_off..b_off + fan_out] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let spec = small_spec();
        let mut rng = SeedRng::new(3);
        let params = init_params(&spec, &mut rng, 1.0).unwrap();
        let image = image_1x1(&[0.4, 0.9]);
        let gf = RealArray::zeros(vec![1, 1, 2]);
        let gl = RealArray::zeros(vec![1, 1, 2]);
        let g = backward(&spec, &params, &image, &gf, &gl).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let spec = small_spec();
        let params = ParamVector::zeros(spec.param_len());
        let bad_image = RealArray::zeros(vec![1, 1, 3]);
        assert!(forward(&spec, &params, &bad_image).is_err());
        let image = image_1x1(&[0.0, 0.0]);
        let bad_gf = RealArray::zeros(vec![1, 1, 5]);
        let gl = RealArray::zeros(vec![1, 1, 2]);
        assert!(backward(&spec, &params, &image, &bad_gf, &gl).is_err());
        let short = ParamVector::zeros(3);
        assert!(forward(&spec, &short, &image).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec { input_dim: 5, hidden_dims: vec![8, 6], feature_dim: 6, num_classes: 3 };
        let mut rng = SeedRng::new(17);
        let params = init_params(&spec, &mut rng, 1.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &spec, &params).unwrap();
        let (spec2, params2) = load_model(&path).unwrap();
        assert_eq!(spec, spec2);
        assert!(params
            .values
            .iter()
            .zip(&params2.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let spec = small_spec();
        let params = ParamVector::zeros(spec.param_len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &spec, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
