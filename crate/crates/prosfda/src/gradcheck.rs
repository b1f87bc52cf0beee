//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Central differences with step 1e-6 against seeded random instances. The
//! checks evaluate loss *values* only, so they stay independent of the
//! gradient code they verify. Exposed as a library module because the
//! `gradcheck` CLI subcommand and the acceptance suite both run it.

use crate::error::Result;
use crate::losses::{
    confidence_maps, prototype_contrast_loss, supervised_ce, weighted_st_ce,
};
use crate::model::{backward, forward, init_params, LabelMap, ModelSpec};
use crate::numerics::{softmax, RealArray};
use crate::prototypes::{cosine_weights, prototype_labels, BatchPrototypes, PrototypeBank};
use crate::rng::SeedRng;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

/// Outcome of one check family, aggregated over its instances.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst per-component relative error between an analytic and a numeric
/// gradient, with a scale-aware floor so near-zero components compare
/// against the gradient's overall magnitude instead of dividing by noise.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| a.abs() + n.abs())
        .fold(0.0f64, f64::max);
    let floor = (1e-2 * scale).max(1e-9);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn check_spec() -> ModelSpec {
    ModelSpec { input_dim: 3, hidden_dims: vec![5, 4], feature_dim: 4, num_classes: 3 }
}

fn rand_array(rng: &mut SeedRng, shape: Vec<usize>, lo: f64, hi: f64) -> RealArray {
    let n: usize = shape.iter().product();
    RealArray::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn rand_labels(rng: &mut SeedRng, h: usize, w: usize, c: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.index(c)).collect()).unwrap()
}

/// Model backward vs finite differences over the parameters, for the scalar
/// `L(params) = sum(gf . features) + sum(gl . logits)`.
fn model_backward_instance(rng: &mut SeedRng, logit_only: bool) -> Result<f64> {
    let spec = check_spec();
    let (h, w) = (3, 3);
    let params = init_params(&spec, rng, 1.0)?;
    let image = rand_array(rng, vec![h, w, spec.input_dim], -1.5, 1.5);
    let gf = if logit_only {
        RealArray::zeros(vec![h, w, spec.feature_dim])
    } else {
        rand_array(rng, vec![h, w, spec.feature_dim], -1.0, 1.0)
    };
    let gl = rand_array(rng, vec![h, w, spec.num_classes], -1.0, 1.0);

    let analytic = backward(&spec, &params, &image, &gf, &gl)?;

    let scalar = |p: &[f64]| -> f64 {
        let pv = crate::model::ParamVector { values: p.to_vec() };
        let (features, logits) = forward(&spec, &pv, &image).unwrap();
        let a: f64 = features.as_slice().iter().zip(gf.as_slice()).map(|(x, g)| x * g).sum();
        let b: f64 = logits.as_slice().iter().zip(gl.as_slice()).map(|(x, g)| x * g).sum();
        a + b
    };
    let numeric = central_difference(scalar, &params.values, FD_STEP);
    Ok(max_rel_error(&analytic.values, &numeric))
}

fn supervised_ce_instance(rng: &mut SeedRng) -> Result<f64> {
    let (h, w, c) = (3, 3, 3);
    let logits = rand_array(rng, vec![h, w, c], -2.0, 2.0);
    let labels = rand_labels(rng, h, w, c);
    let out = supervised_ce(&logits, &labels)?;
    let analytic = out.grad_logits.unwrap();
    let numeric = central_difference(
        |x| {
            let l = RealArray::from_vec(vec![h, w, c], x.to_vec()).unwrap();
            supervised_ce(&l, &labels).unwrap().value
        },
        logits.as_slice(),
        FD_STEP,
    );
    Ok(max_rel_error(analytic.as_slice(), &numeric))
}

fn weighted_st_ce_instance(rng: &mut SeedRng) -> Result<f64> {
    let (h, w, c) = (3, 3, 3);
    let logits = rand_array(rng, vec![h, w, c], -2.0, 2.0);
    let pseudo = rand_labels(rng, h, w, c);
    let weights = crate::prototypes::WeightMap {
        values: rand_array(rng, vec![h, w, c], -1.0, 1.0),
        valid: vec![true; c],
    };
    let out = weighted_st_ce(&logits, &pseudo, &weights, true)?;
    let analytic = out.grad_logits.unwrap();
    let numeric = central_difference(
        |x| {
            let l = RealArray::from_vec(vec![h, w, c], x.to_vec()).unwrap();
            weighted_st_ce(&l, &pseudo, &weights, true).unwrap().value
        },
        logits.as_slice(),
        FD_STEP,
    );
    Ok(max_rel_error(analytic.as_slice(), &numeric))
}

/// Contrast loss vs finite differences over the features. The arbitration
/// inputs (pseudo/prototype labels, confidence ratios) are frozen at the
/// base point, matching the stop-gradient contract; cosine weights are
/// recomputed from the perturbed features.
fn prototype_contrast_instance(rng: &mut SeedRng) -> Result<f64> {
    let (h, w, c, d) = (3, 3, 3, 4);
    let tau = 0.1;
    let mut bank = PrototypeBank::new_empty(c, d, 0.9)?;
    bank.ema_refresh(&BatchPrototypes {
        means: (0..c * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        counts: vec![1; c],
    })?;
    let features = rand_array(rng, vec![h, w, d], -1.0, 1.0);
    let pseudo = rand_labels(rng, h, w, c);
    let teacher_probs = softmax(&rand_array(rng, vec![h, w, c], -2.0, 2.0), 1.0)?;

    let weights = cosine_weights(&features, &bank)?;
    let proto_lbl = prototype_labels(&weights)?;
    let conf = confidence_maps(&teacher_probs, &weights, 0.1)?;

    let out =
        prototype_contrast_loss(&features, &weights, &pseudo, &proto_lbl, &conf, &bank, tau)?;
    let analytic = out.grad_features.unwrap();

    let numeric = central_difference(
        |x| {
            let f = RealArray::from_vec(vec![h, w, d], x.to_vec()).unwrap();
            let wm = cosine_weights(&f, &bank).unwrap();
            prototype_contrast_loss(&f, &wm, &pseudo, &proto_lbl, &conf, &bank, tau)
                .unwrap()
                .value
        },
        features.as_slice(),
        FD_STEP,
    );
    Ok(max_rel_error(analytic.as_slice(), &numeric))
}

/// Runs every check family on `instances` seeded random instances each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    type Family = (&'static str, fn(&mut SeedRng) -> Result<f64>);
    fn backward_full(rng: &mut SeedRng) -> Result<f64> {
        model_backward_instance(rng, false)
    }
    fn backward_logits_only(rng: &mut SeedRng) -> Result<f64> {
        model_backward_instance(rng, true)
    }
    let families: [Family; 5] = [
        ("model_backward", backward_full),
        ("model_backward_logit_path", backward_logits_only),
        ("supervised_ce", supervised_ce_instance),
        ("weighted_st_ce", weighted_st_ce_instance),
        ("prototype_contrast_loss", prototype_contrast_instance),
    ];
    let root = SeedRng::new(seed);
    let mut results = Vec::new();
    for (fi, (name, run)) in families.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = root.fork((fi as u64) << 32 | i as u64);
            worst = worst.max(run(&mut rng)?);
        }
        results.push(CheckResult { name, instances, max_rel_err: worst, tolerance: TOLERANCE });
    }
    Ok(results)
}
