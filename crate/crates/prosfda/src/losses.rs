//! Adaptation losses and their analytic gradients.
//!
//! Stage 1 uses plain supervised cross-entropy. Stage 2 combines two terms:
//!
//! - prototype-weighted self-training CE: per pixel, the teacher
//!   pseudo-label's CE scaled by that pixel's cosine similarity to the
//!   label's prototype (clamped at zero by default so anti-aligned pixels
//!   are silenced rather than rewarded for being wrong);
//! - confidence-guided prototype contrast: per pixel, cross-entropy of the
//!   prototype-similarity softmax against a target label arbitrated between
//!   the teacher label and the prototype label by their top1/top2 confidence
//!   ratios. Gradients flow into the features through the cosine
//!   similarities; prototypes and both label maps are treated as constants.
//!
//! All CE terms are computed through log-sum-exp, so extreme logits yield
//! large-but-finite losses instead of infinities.

use crate::error::{Error, Result};
use crate::model::{FeatureMap, LabelMap, LogitMap, ProbMap};
use crate::numerics::{top2_slice, RealArray};
use crate::prototypes::{PrototypeBank, WeightMap};

/// Scalar loss plus the upstream gradients it induces. `None` gradients are
/// identically zero (the loss does not touch that input).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Option<RealArray>,
    pub grad_features: Option<RealArray>,
}

impl LossOutput {
    pub fn grad_logits_or_zeros(&self, h: usize, w: usize, c: usize) -> RealArray {
        self.grad_logits.clone().unwrap_or_else(|| RealArray::zeros(vec![h, w, c]))
    }

    pub fn grad_features_or_zeros(&self, h: usize, w: usize, d: usize) -> RealArray {
        self.grad_features.clone().unwrap_or_else(|| RealArray::zeros(vec![h, w, d]))
    }
}

/// Per-pixel top1/top2 confidence ratios for the teacher distribution and
/// the prototype-similarity distribution. Every entry is >= 1.
#[derive(Debug, Clone)]
pub struct ConfidenceMaps {
    height: usize,
    width: usize,
    pub teacher: Vec<f64>,
    pub proto: Vec<f64>,
}

impl ConfidenceMaps {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn teacher_at(&self, px: usize) -> f64 {
        self.teacher[px]
    }

    #[inline]
    pub fn proto_at(&self, px: usize) -> f64 {
        self.proto[px]
    }
}

/// Which arm of the label-arbitration split a pixel fell into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgreementCase {
    /// Teacher and prototype labels agree.
    Agree,
    /// Disagree, teacher more confident: train toward the teacher label.
    TrustTeacher,
    /// Disagree, prototype more confident: train toward the prototype label.
    TrustPrototype,
    /// Disagree with exactly equal confidences: train toward the prototype
    /// label.
    Tie,
}

/// Arbitrates one pixel's contrast target between the teacher pseudo-label
/// and the prototype label. Exactly one case applies.
#[inline]
pub fn select_target(
    pseudo: usize,
    proto: usize,
    teacher_conf: f64,
    proto_conf: f64,
) -> (AgreementCase, usize) {
    if pseudo == proto {
        (AgreementCase::Agree, proto)
    } else if teacher_conf > proto_conf {
        (AgreementCase::TrustTeacher, pseudo)
    } else if teacher_conf < proto_conf {
        (AgreementCase::TrustPrototype, proto)
    } else {
        (AgreementCase::Tie, proto)
    }
}

/// Pixel tallies of the arbitration cases; one increment per pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaseCounts {
    pub agree: u64,
    pub trust_teacher: u64,
    pub trust_proto: u64,
    pub tie: u64,
}

impl CaseCounts {
    pub fn add(&mut self, case: AgreementCase) {
        match case {
            AgreementCase::Agree => self.agree += 1,
            AgreementCase::TrustTeacher => self.trust_teacher += 1,
            AgreementCase::TrustPrototype => self.trust_proto += 1,
            AgreementCase::Tie => self.tie += 1,
        }
    }

    pub fn merge(&mut self, other: &CaseCounts) {
        self.agree += other.agree;
        self.trust_teacher += other.trust_teacher;
        self.trust_proto += other.trust_proto;
        self.tie += other.tie;
    }

    pub fn total(&self) -> u64 {
        self.agree + self.trust_teacher + self.trust_proto + self.tie
    }

    /// (agree, trust_teacher, trust_prototype, tie) as fractions of all
    /// pixels.
    pub fn fractions(&self) -> (f64, f64, f64, f64) {
        let n = self.total().max(1) as f64;
        (
            self.agree as f64 / n,
            self.trust_teacher as f64 / n,
            self.trust_proto as f64 / n,
            self.tie as f64 / n,
        )
    }
}

/// Tallies the arbitration outcome over a full image.
pub fn case_counts(
    pseudo: &LabelMap,
    proto_labels: &LabelMap,
    conf: &ConfidenceMaps,
) -> Result<CaseCounts> {
    let n = pseudo.as_slice().len();
    if proto_labels.as_slice().len() != n || conf.teacher.len() != n {
        return Err(Error::ShapeMismatch("case split inputs disagree on pixel count".into()));
    }
    let mut counts = CaseCounts::default();
    for px in 0..n {
        let (case, _) = select_target(
            pseudo.as_slice()[px],
            proto_labels.as_slice()[px],
            conf.teacher[px],
            conf.proto[px],
        );
        counts.add(case);
    }
    Ok(counts)
}

fn rank3(a: &RealArray, name: &str) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("{name} must be rank 3, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_labels(labels: &LabelMap, h: usize, w: usize, c: usize, name: &str) -> Result<()> {
    if labels.height() != h || labels.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "{name} is {}x{}, expected {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    if labels.max_label() >= c {
        return Err(Error::InvalidArgument(format!(
            "{name} contains label {} but there are only {c} classes",
            labels.max_label()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the logits against hard labels. Gradient is
/// `(softmax - onehot) / (H * W)` per pixel; no feature gradient.
pub fn supervised_ce(logits: &LogitMap, labels: &LabelMap) -> Result<LossOutput> {
    let (h, w, c) = rank3(logits, "logits")?;
    check_labels(labels, h, w, c, "labels")?;
    let hw = (h * w) as f64;
    let xs = logits.as_slice();
    let mut grad = vec![0.0; h * w * c];
    let mut total = 0.0;
    for px in 0..h * w {
        let row = &xs[px * c..(px + 1) * c];
        let label = labels.as_slice()[px];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sumexp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let ln_z = max + sumexp.ln();
        let logp = row[label] - ln_z;
        total += -logp;
        let g = &mut grad[px * c..(px + 1) * c];
        for k in 0..c {
            let s = (row[k] - ln_z).exp();
            let y = if k == label { 1.0 } else { 0.0 };
            g[k] = (s - y) / hw;
        }
    }
    Ok(LossOutput {
        value: total / hw,
        grad_logits: Some(RealArray::from_vec(vec![h, w, c], grad)?),
        grad_features: None,
    })
}

/// Prototype-weighted self-training CE: each pixel's pseudo-label CE scaled
/// by the cosine weight of its pseudo-label class. Weights are constants
/// here (no gradient flows into prototypes or features); with
/// `clamp_negative` the weight is floored at zero first.
pub fn weighted_st_ce(
    student_logits: &LogitMap,
    pseudo: &LabelMap,
    weights: &WeightMap,
    clamp_negative: bool,
) -> Result<LossOutput> {
    let (h, w, c) = rank3(student_logits, "student logits")?;
    check_labels(pseudo, h, w, c, "pseudo-labels")?;
    if weights.values.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch(format!(
            "weight map {:?} does not match logits [{h}, {w}, {c}]",
            weights.values.shape()
        )));
    }
    let hw = (h * w) as f64;
    let xs = student_logits.as_slice();
    let ws = weights.values.as_slice();
    let mut grad = vec![0.0; h * w * c];
    let mut total = 0.0;
    for px in 0..h * w {
        let row = &xs[px * c..(px + 1) * c];
        let label = pseudo.as_slice()[px];
        let raw = ws[px * c + label];
        let wgt = if clamp_negative { raw.max(0.0) } else { raw };
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sumexp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let ln_z = max + sumexp.ln();
        let logp = row[label] - ln_z;
        total += wgt * -logp;
        let g = &mut grad[px * c..(px + 1) * c];
        for k in 0..c {
            let s = (row[k] - ln_z).exp();
            let y = if k == label { 1.0 } else { 0.0 };
            g[k] = wgt * (s - y) / hw;
        }
    }
    Ok(LossOutput {
        value: total / hw,
        grad_logits: Some(RealArray::from_vec(vec![h, w, c], grad)?),
        grad_features: None,
    })
}

/// Per-pixel top1/top2 ratios: the teacher's from its probabilities, the
/// prototype side from a softmax over similarities at temperature `tau_c`.
/// Softmax outputs are strictly positive, so both ratios are finite and
/// >= 1 (a denormal-underflow guard keeps the corner case finite too).
pub fn confidence_maps(
    teacher_probs: &ProbMap,
    weights: &WeightMap,
    tau_c: f64,
) -> Result<ConfidenceMaps> {
    let (h, w, c) = rank3(teacher_probs, "teacher probs")?;
    if c < 2 {
        return Err(Error::InvalidArgument("confidence ratios need at least 2 classes".into()));
    }
    if weights.values.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch(format!(
            "weight map {:?} does not match probs [{h}, {w}, {c}]",
            weights.values.shape()
        )));
    }
    if tau_c <= 0.0 || !tau_c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "confidence temperature must be positive, got {tau_c}"
        )));
    }
    let proto_probs = crate::numerics::softmax(&weights.values, tau_c)?;
    let ratio = |row: &[f64]| -> f64 {
        let (top1, top2) = top2_slice(row);
        top1 / top2.max(f64::MIN_POSITIVE)
    };
    let teacher: Vec<f64> = teacher_probs.rows().map(ratio).collect();
    let proto: Vec<f64> = proto_probs.rows().map(ratio).collect();
    Ok(ConfidenceMaps { height: h, width: w, teacher, proto })
}

/// Confidence-guided prototype-contrast loss. Per pixel the target label is
/// arbitrated by [`select_target`]; the loss is the cross-entropy of the
/// similarity softmax (temperature `tau`) against that target. The gradient
/// flows into the features through the cosine similarities; prototypes and
/// label maps are constants, so `weights` must be the cosine map computed
/// from exactly these `features` and `bank`.
pub fn prototype_contrast_loss(
    features: &FeatureMap,
    weights: &WeightMap,
    pseudo: &LabelMap,
    proto_labels: &LabelMap,
    conf: &ConfidenceMaps,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<LossOutput> {
    let (h, w, d) = rank3(features, "features")?;
    let c = bank.num_classes();
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "contrast temperature must be positive, got {tau}"
        )));
    }
    if !bank.any_valid() {
        return Err(Error::InvalidArgument(
            "prototype-contrast loss needs at least one valid prototype".into(),
        ));
    }
    if d != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {d} does not match prototype dim {}",
            bank.dim()
        )));
    }
    if weights.values.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch(format!(
            "weight map {:?} does not match [{h}, {w}, {c}]",
            weights.values.shape()
        )));
    }
    check_labels(pseudo, h, w, c, "pseudo-labels")?;
    check_labels(proto_labels, h, w, c, "prototype labels")?;
    if conf.height != h || conf.width != w {
        return Err(Error::ShapeMismatch("confidence maps do not match image size".into()));
    }

    let hw = (h * w) as f64;
    let proto_norms: Vec<f64> = (0..c)
        .map(|class| bank.proto(class).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let ws = weights.values.as_slice();
    let fs = features.as_slice();
    let mut grad_f = vec![0.0; h * w * d];
    let mut total = 0.0;
    let mut probs = vec![0.0; c];

    for px in 0..h * w {
        let row = &ws[px * c..(px + 1) * c];
        let (_, target) = select_target(
            pseudo.as_slice()[px],
            proto_labels.as_slice()[px],
            conf.teacher[px],
            conf.proto[px],
        );

        // Stable softmax over similarities / tau.
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sumexp = 0.0;
        for k in 0..c {
            probs[k] = ((row[k] - max) / tau).exp();
            sumexp += probs[k];
        }
        let ln_z = max / tau + sumexp.ln();
        total += -(row[target] / tau - ln_z);
        for p in probs.iter_mut() {
            *p /= sumexp;
        }

        // dL/dw_k, then chain through w_k = cos(f, z_k).
        let f = &fs[px * d..(px + 1) * d];
        let fnorm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if fnorm == 0.0 {
            continue; // cosine guard: constant weights, no gradient
        }
        let g = &mut grad_f[px * d..(px + 1) * d];
        for k in 0..c {
            if !bank.is_valid(k) || proto_norms[k] == 0.0 {
                continue; // entry pinned constant, derivative zero
            }
            let y = if k == target { 1.0 } else { 0.0 };
            let coef = (probs[k] - y) / tau / hw;
            let z = bank.proto(k);
            let wk = row[k];
            let inv_fz = 1.0 / (fnorm * proto_norms[k]);
            let inv_ff = 1.0 / (fnorm * fnorm);
            for i in 0..d {
                g[i] += coef * (z[i] * inv_fz - wk * f[i] * inv_ff);
            }
        }
    }

    Ok(LossOutput {
        value: total / hw,
        grad_logits: None,
        grad_features: Some(RealArray::from_vec(vec![h, w, d], grad_f)?),
    })
}

/// Weighted sum of the two stage-2 losses:
/// `value = ce.value + lambda * pce.value`, gradients combined the same way.
pub fn total_adaptation_loss(ce: &LossOutput, pce: &LossOutput, lambda: f64) -> Result<LossOutput> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss combination weight must be >= 0, got {lambda}"
        )));
    }
    let combine = |a: &Option<RealArray>, b: &Option<RealArray>| -> Result<Option<RealArray>> {
        match (a, b) {
            (None, None) => Ok(None),
            (Some(a), None) => Ok(Some(a.clone())),
            (None, Some(b)) => {
                let scaled: Vec<f64> = b.as_slice().iter().map(|&v| lambda * v).collect();
                Ok(Some(RealArray::from_vec(b.shape().to_vec(), scaled)?))
            }
            (Some(a), Some(b)) => {
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "cannot combine gradients of shapes {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let sum: Vec<f64> =
                    a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x + lambda * y).collect();
                Ok(Some(RealArray::from_vec(a.shape().to_vec(), sum)?))
            }
        }
    };
    Ok(LossOutput {
        value: ce.value + lambda * pce.value,
        grad_logits: combine(&ce.grad_logits, &pce.grad_logits)?,
        grad_features: combine(&ce.grad_features, &pce.grad_features)?,
    })
}
