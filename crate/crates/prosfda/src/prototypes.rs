//! Class-prototype bank: per-class running mean features, initialized from a
//! full pass of the source model over the target set, refreshed each step by
//! EMA from the current mini-batch, and queried as cosine-similarity weight
//! maps and prototype-derived labels.
//!
//! Accumulation order is fixed (per-image partial sums folded in image
//! order) so the parallel and sequential paths agree bitwise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{check_count, BinReader, BinWriter};
use crate::model::{argmax_labels, forward, FeatureMap, LabelMap, ModelSpec, ParamVector};
use crate::numerics::{argmax_slice, RealArray};
use crate::parallel;
use crate::teacher::check_alpha;

/// C prototypes of dimension D with per-class validity. A class becomes
/// valid the first time any pixel is attributed to it; invalid rows are
/// never read.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    protos: Vec<f64>, // C x D, row-major
    valid: Vec<bool>,
    pub alpha: f64,
}

/// Masked per-class means over one mini-batch plus the pixel counts that
/// produced them; a zero count marks the class absent from the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrototypes {
    pub means: Vec<f64>, // C x D, zero rows where count == 0
    pub counts: Vec<u64>,
}

/// Per-pixel, per-class cosine similarity to the prototypes, in `[-1, 1]`.
/// Entries for invalid classes are pinned to -1. Carries the validity mask
/// so downstream consumers can skip constant entries.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub values: RealArray, // H x W x C
    pub valid: Vec<bool>,
}

impl WeightMap {
    /// Debug construction: every weight 1, every class valid. Used by the
    /// identity-bank ablation mode to reduce the pipeline to plain
    /// self-training.
    pub fn all_ones(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            values: RealArray::filled(vec![height, width, num_classes], 1.0),
            valid: vec![true; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }
}

impl PrototypeBank {
    /// Bank with every class invalid; rows are zero placeholders.
    pub fn new_empty(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("prototype bank dims must be positive".into()));
        }
        Ok(Self { dim, protos: vec![0.0; num_classes * dim], valid: vec![false; num_classes], alpha })
    }

    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn proto(&self, class: usize) -> &[f64] {
        &self.protos[class * self.dim..(class + 1) * self.dim]
    }

    pub fn is_valid(&self, class: usize) -> bool {
        self.valid[class]
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// EMA refresh from one batch: present classes move by
    /// `z <- alpha * z + (1 - alpha) * z_batch`; absent classes are left
    /// bit-identical; a class seen for the first time adopts the batch mean
    /// outright and becomes valid.
    pub fn ema_refresh(&mut self, batch: &BatchPrototypes) -> Result<()> {
        let c = self.num_classes();
        if batch.counts.len() != c || batch.means.len() != c * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "batch prototypes sized for {} classes, bank has {c}",
                batch.counts.len()
            )));
        }
        let a = self.alpha;
        for class in 0..c {
            if batch.counts[class] == 0 {
                continue;
            }
            let row = &mut self.protos[class * self.dim..(class + 1) * self.dim];
            let bm = &batch.means[class * self.dim..(class + 1) * self.dim];
            if self.valid[class] {
                for (z, &b) in row.iter_mut().zip(bm) {
                    *z = a * *z + (1.0 - a) * b;
                }
            } else {
                row.copy_from_slice(bm);
                self.valid[class] = true;
            }
        }
        Ok(())
    }
}

/// Per-image masked sums: `sums[c] += f(px)` and `counts[c] += 1` for every
/// pixel labeled `c`, pixels in row-major order. The shared accumulation
/// primitive behind both prototype initialization and batch refresh.
pub fn class_sums(
    features: &FeatureMap,
    labels: &LabelMap,
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let s = features.shape();
    if s.len() != 3 || s[0] != labels.height() || s[1] != labels.width() {
        return Err(Error::ShapeMismatch(format!(
            "features {s:?} do not match {}x{} labels",
            labels.height(),
            labels.width()
        )));
    }
    let d = s[2];
    let mut sums = vec![0.0; num_classes * d];
    let mut counts = vec![0u64; num_classes];
    for (row, &label) in features.rows().zip(labels.as_slice()) {
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        counts[label] += 1;
        let dst = &mut sums[label * d..(label + 1) * d];
        for (acc, &f) in dst.iter_mut().zip(row) {
            *acc += f;
        }
    }
    Ok((sums, counts))
}

/// Masked per-class means over a mini-batch of feature maps under their
/// pseudo-labels.
pub fn batch_prototypes(
    features: &[&FeatureMap],
    pseudo: &[&LabelMap],
    num_classes: usize,
    dim: usize,
) -> Result<BatchPrototypes> {
    if features.len() != pseudo.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps vs {} label maps",
            features.len(),
            pseudo.len()
        )));
    }
    let mut sums = vec![0.0; num_classes * dim];
    let mut counts = vec![0u64; num_classes];
    for (f, l) in features.iter().zip(pseudo) {
        if f.shape()[2] != dim {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} does not match bank dim {dim}",
                f.shape()[2]
            )));
        }
        let (s, c) = class_sums(f, l, num_classes)?;
        fold_sums(&mut sums, &mut counts, &s, &c);
    }
    Ok(finish_means(sums, counts, dim))
}

/// Adds one image's partial sums into the batch accumulator.
pub fn fold_sums(sums: &mut [f64], counts: &mut [u64], part_sums: &[f64], part_counts: &[u64]) {
    for (a, &b) in sums.iter_mut().zip(part_sums) {
        *a += b;
    }
    for (a, &b) in counts.iter_mut().zip(part_counts) {
        *a += b;
    }
}

/// Divides accumulated sums into means; absent classes keep zero rows.
pub fn finish_means(mut sums: Vec<f64>, counts: Vec<u64>, dim: usize) -> BatchPrototypes {
    for (class, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in &mut sums[class * dim..(class + 1) * dim] {
                *v /= n as f64;
            }
        }
    }
    BatchPrototypes { means: sums, counts }
}

/// Initializes the bank from a full pass of the source model over the target
/// images: per class, the mean feature over every pixel the source model
/// pseudo-labels with that class. Classes that receive no pixel stay
/// invalid.
pub fn init_prototypes(
    spec: &ModelSpec,
    source_params: &ParamVector,
    images: &[RealArray],
    alpha: f64,
) -> Result<PrototypeBank> {
    check_alpha(alpha)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("prototype initialization needs at least one image".into()));
    }
    let c = spec.num_classes;
    let d = spec.feature_dim;

    let partials: Vec<Result<(Vec<f64>, Vec<u64>)>> = parallel::map_ordered(images, |image| {
        let (features, logits) = forward(spec, source_params, image)?;
        let labels = argmax_labels(&logits)?;
        class_sums(&features, &labels, c)
    });

    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0u64; c];
    for part in partials {
        let (s, n) = part?;
        fold_sums(&mut sums, &mut counts, &s, &n);
    }
    let batch = finish_means(sums, counts, d);

    let mut bank = PrototypeBank::new_empty(c, d, alpha)?;
    for class in 0..c {
        if batch.counts[class] > 0 {
            bank.protos[class * d..(class + 1) * d]
                .copy_from_slice(&batch.means[class * d..(class + 1) * d]);
            bank.valid[class] = true;
        }
    }
    Ok(bank)
}

/// Cosine similarity between every pixel feature and every class prototype.
/// A zero-norm feature or prototype contributes a neutral 0; invalid classes
/// are pinned to -1.
pub fn cosine_weights(features: &FeatureMap, bank: &PrototypeBank) -> Result<WeightMap> {
    let s = features.shape();
    if s.len() != 3 || s[2] != bank.dim {
        return Err(Error::ShapeMismatch(format!(
            "features {s:?} do not match prototype dim {}",
            bank.dim
        )));
    }
    let (h, w) = (s[0], s[1]);
    let c = bank.num_classes();

    let proto_norms: Vec<f64> = (0..c)
        .map(|class| bank.proto(class).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut values = vec![0.0; h * w * c];
    for (px, f) in features.rows().enumerate() {
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = &mut values[px * c..(px + 1) * c];
        for class in 0..c {
            out[class] = if !bank.valid[class] {
                -1.0
            } else if fnorm == 0.0 || proto_norms[class] == 0.0 {
                0.0
            } else {
                let dot: f64 = f.iter().zip(bank.proto(class)).map(|(a, b)| a * b).sum();
                dot / (fnorm * proto_norms[class])
            };
        }
    }
    Ok(WeightMap {
        values: RealArray::from_vec(vec![h, w, c], values)?,
        valid: bank.valid.clone(),
    })
}

/// Label each pixel with the class of highest prototype similarity
/// (lowest-index tie-break). Errors when no class is valid.
pub fn prototype_labels(weights: &WeightMap) -> Result<LabelMap> {
    if !weights.valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument(
            "prototype labels need at least one valid class".into(),
        ));
    }
    let s = weights.values.shape();
    let labels = weights.values.rows().map(argmax_slice).collect();
    LabelMap::new(s[0], s[1], labels)
}

const BANK_MAGIC: &[u8; 4] = b"PSB1";

pub fn save_bank(path: &Path, bank: &PrototypeBank) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    write_bank_into(&mut w, bank)?;
    w.finish()
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank> {
    let mut r = BinReader::open(path)?;
    let bank = read_bank(&mut r)?;
    r.expect_eof()?;
    Ok(bank)
}

pub(crate) fn write_bank_into<W: std::io::Write>(
    w: &mut BinWriter<W>,
    bank: &PrototypeBank,
) -> Result<()> {
    w.magic(BANK_MAGIC)?;
    w.u32(1)?;
    w.u32(bank.num_classes() as u32)?;
    w.u32(bank.dim as u32)?;
    w.f64(bank.alpha)?;
    let mask: Vec<u8> = bank.valid.iter().map(|&v| v as u8).collect();
    w.bytes(&mask)?;
    w.f64_slice(&bank.protos)
}

pub(crate) fn read_bank<R: std::io::Read>(r: &mut BinReader<R>) -> Result<PrototypeBank> {
    r.expect_magic(BANK_MAGIC, "prototype bank")?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported prototype bank version {version}")));
    }
    let c = check_count(r.u32("class count")? as u64, 1 << 20, "class", "bank")?;
    let d = check_count(r.u32("prototype dim")? as u64, 1 << 20, "dim", "bank")?;
    let alpha = r.f64("alpha")?;
    check_alpha(alpha).map_err(|e| Error::Format(format!("stored bank alpha: {e}")))?;
    let mask = r.bytes(c, "validity mask")?;
    let valid: Vec<bool> = mask.iter().map(|&b| b != 0).collect();
    let protos = r.f64_vec(c * d, "prototype rows")?;
    for (class, &v) in valid.iter().enumerate() {
        if v && protos[class * d..(class + 1) * d].iter().any(|p| !p.is_finite()) {
            return Err(Error::Format(format!(
                "stored prototype bank has a non-finite valid row (class {class})"
            )));
        }
    }
    Ok(PrototypeBank { dim: d, protos, valid, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::SeedRng;

    fn feature_map(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap {
        RealArray::from_vec(vec![h, w, d], data).unwrap()
    }

    #[test]
    fn two_pixel_mean_prototype() {
        let f = feature_map(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = LabelMap::new(1, 2, vec![1, 1]).unwrap();
        let bp = batch_prototypes(&[&f], &[&l], 3, 2).unwrap();
        assert_eq!(bp.counts, vec![0, 2, 0]);
        assert_eq!(&bp.means[2..4], &[0.5, 0.5]);
        assert_eq!(&bp.means[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn single_pixel_batch_copies_the_feature() {
        let f = feature_map(1, 1, 3, vec![0.3, -0.7, 2.0]);
        let l = LabelMap::new(1, 1, vec![2]).unwrap();
        let bp = batch_prototypes(&[&f], &[&l], 4, 3).unwrap();
        assert_eq!(bp.counts, vec![0, 0, 1, 0]);
        assert_eq!(&bp.means[6..9], &[0.3, -0.7, 2.0]);
    }

    #[test]
    fn batch_prototypes_match_loop_oracle() {
        let mut rng = SeedRng::new(41);
        let d = 3;
        let c = 3;
        let data: Vec<f64> = (0..4 * 4 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..16).map(|_| rng.index(c)).collect();
        let f = feature_map(4, 4, d, data.clone());
        let l = LabelMap::new(4, 4, labels.clone()).unwrap();
        let bp = batch_prototypes(&[&f], &[&l], c, d).unwrap();

        // Explicit per-class masked-mean loops.
        for class in 0..c {
            let mut sum = vec![0.0; d];
            let mut n = 0u64;
            for px in 0..16 {
                if labels[px] == class {
                    n += 1;
                    for k in 0..d {
                        sum[k] += data[px * d + k];
                    }
                }
            }
            assert_eq!(bp.counts[class], n);
            if n > 0 {
                for k in 0..d {
                    assert!((bp.means[class * d + k] - sum[k] / n as f64).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn init_marks_unseen_classes_invalid() {
        // Head bias forces every pseudo-label to class 0.
        let spec = ModelSpec { input_dim: 2, hidden_dims: vec![3], feature_dim: 3, num_classes: 3 };
        let mut rng = SeedRng::new(9);
        let mut params = init_params(&spec, &mut rng, 1.0).unwrap();
        let (_, b_off, _, _) = *spec.layer_offsets().last().unwrap();
        params.values[b_off] = 10.0;
        let image = RealArray::from_vec(
            vec![3, 3, 2],
            (0..18).map(|i| (i as f64) * 0.17 - 1.4).collect(),
        )
        .unwrap();
        let bank = init_prototypes(&spec, &params, std::slice::from_ref(&image), 0.99).unwrap();
        assert!(bank.is_valid(0));
        assert!(!bank.is_valid(1));
        assert!(!bank.is_valid(2));

        // z0 equals the plain mean of all features.
        let (features, _) = forward(&spec, &params, &image).unwrap();
        let mut mean = [0.0; 3];
        for row in features.rows() {
            for k in 0..3 {
                mean[k] += row[k];
            }
        }
        for k in 0..3 {
            assert!((bank.proto(0)[k] - mean[k] / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_requires_images_and_valid_alpha() {
        let spec = ModelSpec { input_dim: 2, hidden_dims: vec![2], feature_dim: 2, num_classes: 2 };
        let params = ParamVector::zeros(spec.param_len());
        assert!(init_prototypes(&spec, &params, &[], 0.5).is_err());
        let img = RealArray::zeros(vec![1, 1, 2]);
        assert!(init_prototypes(&spec, &params, &[img], 1.5).is_err());
    }

    #[test]
    fn refresh_endpoints_and_skip_rule() {
        let mut bank = PrototypeBank::new_empty(2, 2, 1.0).unwrap();
        bank.protos = vec![1.0, 1.0, 2.0, 2.0];
        bank.valid = vec![true, true];
        let batch = BatchPrototypes { means: vec![0.0, 0.0, 5.0, 5.0], counts: vec![3, 4] };
        // alpha = 1: nothing moves.
        bank.ema_refresh(&batch).unwrap();
        assert_eq!(bank.protos, vec![1.0, 1.0, 2.0, 2.0]);

        // Absent class is untouched bit for bit.
        bank.alpha = 0.5;
        let batch = BatchPrototypes { means: vec![0.0, 0.0, 5.0, 5.0], counts: vec![0, 4] };
        bank.ema_refresh(&batch).unwrap();
        assert_eq!(&bank.protos[0..2], &[1.0, 1.0]);
        assert_eq!(&bank.protos[2..4], &[3.5, 3.5]);
    }

    #[test]
    fn refresh_formula_and_first_seen_adoption() {
        let mut bank = PrototypeBank::new_empty(2, 2, 0.99).unwrap();
        bank.protos = vec![1.0, 1.0, 0.0, 0.0];
        bank.valid = vec![true, false];
        let batch = BatchPrototypes { means: vec![0.0, 0.0, 7.0, -7.0], counts: vec![5, 2] };
        bank.ema_refresh(&batch).unwrap();
        assert!((bank.proto(0)[0] - 0.99).abs() < 1e-15);
        assert!((bank.proto(0)[1] - 0.99).abs() < 1e-15);
        // Previously invalid class adopts the batch mean directly.
        assert_eq!(bank.proto(1), &[7.0, -7.0]);
        assert!(bank.is_valid(1));
    }

    #[test]
    fn repeated_refresh_converges_to_constant_batch() {
        let mut bank = PrototypeBank::new_empty(1, 1, 0.9).unwrap();
        bank.protos = vec![10.0];
        bank.valid = vec![true];
        let batch = BatchPrototypes { means: vec![2.0], counts: vec![1] };
        let mut prev = (bank.proto(0)[0] - 2.0f64).abs();
        for _ in 0..50 {
            bank.ema_refresh(&batch).unwrap();
            let cur = (bank.proto(0)[0] - 2.0f64).abs();
            assert!((cur / prev - 0.9).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn cosine_self_orthogonal_invalid_and_zero_norm() {
        let mut bank = PrototypeBank::new_empty(3, 2, 0.5).unwrap();
        bank.protos = vec![3.0, 4.0, 0.0, 2.0, 0.0, 0.0];
        bank.valid = vec![true, true, false];
        // Pixel 0: equal to prototype 0. Pixel 1: orthogonal to prototype 0.
        // Pixel 2: zero feature.
        let f = feature_map(1, 3, 2, vec![3.0, 4.0, -4.0, 3.0, 0.0, 0.0]);
        let wm = cosine_weights(&f, &bank).unwrap();
        assert!((wm.values.at3(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!(wm.values.at3(0, 1, 0).abs() < 1e-12);
        assert_eq!(wm.values.at3(0, 0, 2), -1.0);
        assert_eq!(wm.values.at3(0, 2, 0), 0.0);
        assert_eq!(wm.values.at3(0, 2, 1), 0.0);
    }

    #[test]
    fn cosine_matches_loop_oracle_and_stays_bounded() {
        let mut rng = SeedRng::new(23);
        let (d, c) = (4, 3);
        let mut bank = PrototypeBank::new_empty(c, d, 0.5).unwrap();
        bank.protos = (0..c * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        bank.valid = vec![true; c];
        let data: Vec<f64> = (0..5 * 5 * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let f = feature_map(5, 5, d, data.clone());
        let wm = cosine_weights(&f, &bank).unwrap();
        for px in 0..25 {
            let fv = &data[px * d..(px + 1) * d];
            let fn2: f64 = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
            for class in 0..c {
                let zv = bank.proto(class);
                let zn: f64 = zv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = fv.iter().zip(zv).map(|(a, b)| a * b).sum();
                let expect = dot / (fn2 * zn);
                let got = wm.values.as_slice()[px * c + class];
                assert!((got - expect).abs() < 1e-12);
                assert!(got.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn prototype_label_rules() {
        let wm = WeightMap {
            values: RealArray::from_vec(
                vec![1, 2, 3],
                vec![0.1, 0.9, 0.2, 0.4, 0.4, 0.4],
            )
            .unwrap(),
            valid: vec![true, true, true],
        };
        let labels = prototype_labels(&wm).unwrap();
        assert_eq!(labels.as_slice(), &[1, 0]); // second pixel: uniform, tie to 0

        let invalid = WeightMap {
            values: RealArray::filled(vec![1, 1, 2], -1.0),
            valid: vec![false, false],
        };
        assert!(prototype_labels(&invalid).is_err());
    }

    #[test]
    fn prototype_labels_invariant_to_positive_rescaling() {
        let mut rng = SeedRng::new(99);
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wm = WeightMap {
            values: RealArray::from_vec(vec![2, 3, 4], data.clone()).unwrap(),
            valid: vec![true; 4],
        };
        let base = prototype_labels(&wm).unwrap();
        let scaled = WeightMap {
            values: RealArray::from_vec(vec![2, 3, 4], data.iter().map(|v| v * 7.25).collect())
                .unwrap(),
            valid: vec![true; 4],
        };
        assert_eq!(base, prototype_labels(&scaled).unwrap());
    }

    #[test]
    fn prototype_labels_match_scan_oracle() {
        let mut rng = SeedRng::new(120);
        let (h, w, c) = (5, 4, 6);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wm = WeightMap {
            values: RealArray::from_vec(vec![h, w, c], data.clone()).unwrap(),
            valid: vec![true; c],
        };
        let labels = prototype_labels(&wm).unwrap();
        for px in 0..h * w {
            let row = &data[px * c..(px + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            assert_eq!(labels.as_slice()[px], best);
        }
    }

    #[test]
    fn init_equals_refresh_in_degenerate_single_batch_case() {
        // With alpha = 0 and one batch, EMA refresh of an empty bank must
        // reproduce initialization exactly.
        let spec = ModelSpec { input_dim: 3, hidden_dims: vec![4], feature_dim: 4, num_classes: 3 };
        let mut rng = SeedRng::new(31);
        let params = init_params(&spec, &mut rng, 1.2).unwrap();
        let image = RealArray::from_vec(
            vec![4, 4, 3],
            (0..48).map(|_| rng.uniform(-1.5, 1.5)).collect(),
        )
        .unwrap();

        let init = init_prototypes(&spec, &params, std::slice::from_ref(&image), 0.0).unwrap();

        let (features, logits) = forward(&spec, &params, &image).unwrap();
        let labels = argmax_labels(&logits).unwrap();
        let bp = batch_prototypes(&[&features], &[&labels], 3, 4).unwrap();
        let mut composed = PrototypeBank::new_empty(3, 4, 0.0).unwrap();
        composed.ema_refresh(&bp).unwrap();

        assert_eq!(init.valid, composed.valid);
        assert!(init
            .protos
            .iter()
            .zip(&composed.protos)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bank_round_trip_is_bit_exact() {
        let mut rng = SeedRng::new(77);
        let mut bank = PrototypeBank::new_empty(4, 5, 0.99).unwrap();
        bank.protos = (0..20).map(|_| rng.uniform(-3.0, 3.0)).collect();
        bank.valid = vec![true, false, true, true];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        save_bank(&path, &bank).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(bank.valid, loaded.valid);
        assert_eq!(bank.alpha, loaded.alpha);
        assert!(bank.protos.iter().zip(&loaded.protos).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
