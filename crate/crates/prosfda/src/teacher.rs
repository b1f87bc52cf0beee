//! EMA teacher: a slow copy of the student's parameters that produces the
//! online pseudo-labels each step. Pseudo-labels are recomputed from the
//! current teacher every step rather than cached, so supervision tracks the
//! evolving model.

use crate::error::{Error, Result};
use crate::model::{argmax_labels, forward, LabelMap, ModelSpec, ParamVector, ProbMap};
use crate::numerics::{softmax, RealArray};

/// Teacher parameters plus the EMA coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamVector,
    pub alpha: f64,
}

/// Starts the teacher as an exact value copy of the student.
pub fn init_teacher(student: &ParamVector, alpha: f64) -> Result<TeacherState> {
    check_alpha(alpha)?;
    Ok(TeacherState { params: student.clone(), alpha })
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("EMA alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Teacher forward pass on one image: per-pixel argmax labels (ties to the
/// lowest class index) plus the temperature-1 probabilities the confidence
/// ratios are built from.
pub fn pseudo_labels(
    spec: &ModelSpec,
    teacher: &TeacherState,
    image: &RealArray,
) -> Result<(LabelMap, ProbMap)> {
    let (_, logits) = forward(spec, &teacher.params, image)?;
    let labels = argmax_labels(&logits)?;
    let probs = softmax(&logits, 1.0)?;
    Ok((labels, probs))
}

impl TeacherState {
    /// One EMA step: `params <- alpha * params + (1 - alpha) * student`.
    pub fn ema_update(&mut self, student: &ParamVector) -> Result<()> {
        if student.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "teacher has {} parameters, student has {}",
                self.params.len(),
                student.len()
            )));
        }
        let a = self.alpha;
        for (t, &s) in self.params.values.iter_mut().zip(&student.values) {
            *t = a * *t + (1.0 - a) * s;
        }
        Ok(())
    }
}
