//! Two-stage orchestration: supervised source pretraining, then source-free
//! adaptation on unlabeled target images.
//!
//! One adaptation step, in fixed order: sample a batch; teacher
//! pseudo-labels and probabilities; student forward; cosine weights,
//! prototype labels, confidence ratios; the two losses and their gradients;
//! optimizer step; teacher EMA; prototype EMA from this step's student
//! features under the teacher labels. Per-image work runs through
//! [`crate::parallel::map_ordered`] and is folded in image order, so runs
//! are bit-reproducible regardless of thread count.
//!
//! Adaptation receives an [`UnlabeledSet`]; target labels are only ever
//! touched by [`evaluate`].
//!
//! Run-RNG stream allocation (fixed): 1 = parameter init, 2 = pretraining
//! batch sampling, 3 = adaptation batch sampling.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::io::{check_count, BinReader, BinWriter};
use crate::losses::{
    case_counts, confidence_maps, prototype_contrast_loss, supervised_ce, total_adaptation_loss,
    weighted_st_ce, CaseCounts,
};
use crate::metrics::{iou_report, ConfusionMatrix, IouReport};
use crate::model::{
    argmax_labels, backward, forward, init_params, load_model, read_model, save_model,
    write_model_into, ModelSpec, ParamVector,
};
use crate::numerics::RealArray;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::parallel;
use crate::prototypes::{
    class_sums, cosine_weights, finish_means, fold_sums, init_prototypes, prototype_labels,
    read_bank, write_bank_into, BatchPrototypes, PrototypeBank, WeightMap,
};
use crate::rng::{sample_batch_indices, RngState, SeedRng};
use crate::teacher::{init_teacher, pseudo_labels, TeacherState};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_PRETRAIN: u64 = 2;
pub const STREAM_ADAPT: u64 = 3;

/// One adaptation step's diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRecord {
    pub step: u64,
    /// Batch-mean prototype-weighted self-training CE.
    pub loss_st: f64,
    /// Batch-mean prototype-contrast loss (before the lambda weighting).
    pub loss_contrast: f64,
    pub frac_agree: f64,
    pub frac_trust_teacher: f64,
    pub frac_trust_proto: f64,
    pub frac_tie: f64,
    /// Batch-mean clamped cosine weight at the pseudo-label.
    pub mean_clamped_weight: f64,
}

/// Per-step adaptation diagnostics, one record per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunLogRecord>,
}

const RUNLOG_MAGIC: &[u8; 4] = b"PSL1";

impl RunLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.magic(RUNLOG_MAGIC)?;
        w.u32(1)?;
        w.u64(self.records.len() as u64)?;
        for r in &self.records {
            w.u64(r.step)?;
            for v in [
                r.loss_st,
                r.loss_contrast,
                r.frac_agree,
                r.frac_trust_teacher,
                r.frac_trust_proto,
                r.frac_tie,
                r.mean_clamped_weight,
            ] {
                w.f64(v)?;
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.expect_magic(RUNLOG_MAGIC, "run log")?;
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported run log version {version}")));
        }
        let n = check_count(r.u64("record count")?, 1 << 32, "record", "run log")?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            records.push(RunLogRecord {
                step: r.u64("step")?,
                loss_st: r.f64("loss_st")?,
                loss_contrast: r.f64("loss_contrast")?,
                frac_agree: r.f64("frac_agree")?,
                frac_trust_teacher: r.f64("frac_trust_teacher")?,
                frac_trust_proto: r.f64("frac_trust_proto")?,
                frac_tie: r.f64("frac_tie")?,
                mean_clamped_weight: r.f64("mean_clamped_weight")?,
            });
        }
        r.expect_eof()?;
        Ok(Self { records })
    }

    /// Loss and case-fraction curves as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,loss_st,loss_contrast,frac_agree,frac_trust_teacher,frac_trust_proto,frac_tie,mean_clamped_weight\n",
        );
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.loss_st,
                r.loss_contrast,
                r.frac_agree,
                r.frac_trust_teacher,
                r.frac_trust_proto,
                r.frac_tie,
                r.mean_clamped_weight
            ));
        }
        s
    }
}

fn check_dataset_matches(spec: &ModelSpec, dataset: &Dataset) -> Result<()> {
    let (_, _, dim) = dataset.image_shape()?;
    if dim != spec.input_dim {
        return Err(Error::Format(format!(
            "dataset has {dim} channels, model expects {}",
            spec.input_dim
        )));
    }
    if dataset.num_classes != spec.num_classes {
        return Err(Error::Format(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

/// Stage 1: supervised training on labeled source images, starting from a
/// seeded random initialization. Returns the trained parameters.
pub fn pretrain_source(config: &RunConfig, source: &Dataset) -> Result<ParamVector> {
    config.validate()?;
    check_dataset_matches(&config.model, source)?;
    let spec = &config.model;
    let root = SeedRng::new(config.seed);
    let mut params = init_params(spec, &mut root.fork(STREAM_INIT), config.init_scale)?;
    let mut opt = OptimizerState::new(params.len(), config.optimizer)?;
    let mut rng = root.fork(STREAM_PRETRAIN);
    let batch = config.batch_size.min(source.len());

    for _ in 0..config.steps_pretrain {
        let indices = sample_batch_indices(&mut rng, source.len(), batch);
        let grads: Vec<Result<ParamVector>> = parallel::map_ordered(&indices, |&i| {
            let img = &source.images[i];
            let (features, logits) = forward(spec, &params, &img.pixels)?;
            let loss = supervised_ce(&logits, img.labels())?;
            let s = features.shape();
            let gf = RealArray::zeros(vec![s[0], s[1], s[2]]);
            let gl = loss.grad_logits_or_zeros(s[0], s[1], spec.num_classes);
            backward(spec, &params, &img.pixels, &gf, &gl)
        });
        let grad = average_grads(grads, params.len())?;
        opt.apply_step(&mut params, &grad)?;
    }
    Ok(params)
}

/// Folds per-image gradients in image order and divides by the batch size.
fn average_grads(grads: Vec<Result<ParamVector>>, len: usize) -> Result<ParamVector> {
    let batch = grads.len();
    let mut total = ParamVector::zeros(len);
    for g in grads {
        let g = g?;
        for (a, &b) in total.values.iter_mut().zip(&g.values) {
            *a += b;
        }
    }
    let inv = 1.0 / batch as f64;
    for v in &mut total.values {
        *v *= inv;
    }
    Ok(total)
}

/// Full mutable state of an adaptation run; checkpointing this resumes the
/// run bit-exactly.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub spec: ModelSpec,
    pub student: ParamVector,
    pub teacher: TeacherState,
    pub bank: PrototypeBank,
    pub optimizer: OptimizerState,
    pub rng: SeedRng,
    /// Completed adaptation steps.
    pub step: u64,
}

/// Everything one image contributes to a step, computed independently per
/// image and folded in batch order.
struct ImagePass {
    grad: ParamVector,
    proto_sums: Vec<f64>,
    proto_counts: Vec<u64>,
    loss_st: f64,
    loss_contrast: f64,
    cases: CaseCounts,
    clamped_weight_sum: f64,
    pixels: u64,
}

fn image_pass(
    config: &RunConfig,
    spec: &ModelSpec,
    student: &ParamVector,
    teacher: &TeacherState,
    bank: &PrototypeBank,
    image: &RealArray,
) -> Result<ImagePass> {
    let (pseudo, probs) = pseudo_labels(spec, teacher, image)?;
    let (features, logits) = forward(spec, student, image)?;
    let s = features.shape();
    let (h, w, d) = (s[0], s[1], s[2]);
    let c = spec.num_classes;

    let weights = if config.identity_bank {
        WeightMap::all_ones(h, w, c)
    } else {
        cosine_weights(&features, bank)?
    };
    let proto_lbl = prototype_labels(&weights)?;
    let conf = confidence_maps(&probs, &weights, config.tau_c)?;

    let loss_st = weighted_st_ce(&logits, &pseudo, &weights, config.clamp_weights)?;
    let loss_contrast =
        prototype_contrast_loss(&features, &weights, &pseudo, &proto_lbl, &conf, bank, config.tau)?;
    let total = total_adaptation_loss(&loss_st, &loss_contrast, config.lambda_pce)?;

    let gl = total.grad_logits_or_zeros(h, w, c);
    let gf = total.grad_features_or_zeros(h, w, d);
    let grad = backward(spec, student, image, &gf, &gl)?;

    let (proto_sums, proto_counts) = class_sums(&features, &pseudo, c)?;
    let cases = case_counts(&pseudo, &proto_lbl, &conf)?;
    let clamped_weight_sum: f64 = pseudo
        .as_slice()
        .iter()
        .enumerate()
        .map(|(px, &label)| weights.values.as_slice()[px * c + label].max(0.0))
        .sum();

    Ok(ImagePass {
        grad,
        proto_sums,
        proto_counts,
        loss_st: loss_st.value,
        loss_contrast: loss_contrast.value,
        cases,
        clamped_weight_sum,
        pixels: (h * w) as u64,
    })
}

/// Sets up stage 2 from a source checkpoint: student and teacher start as
/// copies of the source model and the prototype bank is initialized by a
/// full pass of the source model over the target images.
pub fn init_adaptation(
    config: &RunConfig,
    spec: &ModelSpec,
    source_params: &ParamVector,
    target: &UnlabeledSet,
) -> Result<AdaptState> {
    config.validate()?;
    if *spec != config.model {
        return Err(Error::Format(format!(
            "checkpoint model {:?} does not match configured model {:?}",
            spec, config.model
        )));
    }
    if target.images.is_empty() {
        return Err(Error::Format("target set contains no images".into()));
    }
    for img in &target.images {
        let s = img.shape();
        if s.len() != 3 || s[2] != spec.input_dim {
            return Err(Error::Format(format!(
                "target image shape {s:?} does not match input_dim {}",
                spec.input_dim
            )));
        }
    }
    let student = source_params.clone();
    let teacher = init_teacher(&student, config.alpha_teacher)?;
    let bank = init_prototypes(spec, &student, &target.images, config.alpha_proto)?;
    let optimizer = OptimizerState::new(student.len(), config.optimizer)?;
    let rng = SeedRng::new(config.seed).fork(STREAM_ADAPT);
    Ok(AdaptState {
        spec: spec.clone(),
        student,
        teacher,
        bank,
        optimizer,
        rng,
        step: 0,
    })
}

/// One adaptation step over a sampled batch. Order: optimizer step, then
/// teacher EMA, then prototype EMA (batch prototypes use this step's
/// pre-update student features under the teacher labels).
pub fn adapt_step(
    state: &mut AdaptState,
    config: &RunConfig,
    target: &UnlabeledSet,
) -> Result<RunLogRecord> {
    let batch = config.batch_size.min(target.images.len());
    let indices = sample_batch_indices(&mut state.rng, target.images.len(), batch);

    let spec = &state.spec;
    let student = &state.student;
    let teacher = &state.teacher;
    let bank = &state.bank;
    let passes: Vec<Result<ImagePass>> = parallel::map_ordered(&indices, |&i| {
        image_pass(config, spec, student, teacher, bank, &target.images[i])
    });

    let c = state.spec.num_classes;
    let d = state.spec.feature_dim;
    let mut grad = ParamVector::zeros(state.student.len());
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0u64; c];
    let mut cases = CaseCounts::default();
    let mut loss_st = 0.0;
    let mut loss_contrast = 0.0;
    let mut clamped = 0.0;
    let mut pixels = 0u64;
    for pass in passes {
        let pass = pass?;
        for (a, &b) in grad.values.iter_mut().zip(&pass.grad.values) {
            *a += b;
        }
        fold_sums(&mut sums, &mut counts, &pass.proto_sums, &pass.proto_counts);
        cases.merge(&pass.cases);
        loss_st += pass.loss_st;
        loss_contrast += pass.loss_contrast;
        clamped += pass.clamped_weight_sum;
        pixels += pass.pixels;
    }
    let inv_batch = 1.0 / batch as f64;
    for v in &mut grad.values {
        *v *= inv_batch;
    }
    let batch_protos: BatchPrototypes = finish_means(sums, counts, d);

    state.optimizer.apply_step(&mut state.student, &grad)?;
    state.teacher.ema_update(&state.student)?;
    state.bank.ema_refresh(&batch_protos)?;
    state.step += 1;

    let (fa, ft, fp, fx) = cases.fractions();
    Ok(RunLogRecord {
        step: state.step - 1,
        loss_st: loss_st * inv_batch,
        loss_contrast: loss_contrast * inv_batch,
        frac_agree: fa,
        frac_trust_teacher: ft,
        frac_trust_proto: fp,
        frac_tie: fx,
        mean_clamped_weight: clamped / pixels.max(1) as f64,
    })
}

/// Stage 2 end to end: initialize from the source model and run
/// `steps_adapt` steps. Never sees a target label.
pub fn adapt(
    config: &RunConfig,
    spec: &ModelSpec,
    source_params: &ParamVector,
    target: &UnlabeledSet,
) -> Result<(AdaptState, RunLog)> {
    let mut state = init_adaptation(config, spec, source_params, target)?;
    let mut log = RunLog::default();
    while state.step < config.steps_adapt {
        log.records.push(adapt_step(&mut state, config, target)?);
    }
    Ok((state, log))
}

/// Continues a checkpointed run until `config.steps_adapt`, extending its
/// log. A resumed run is bit-identical to an uninterrupted one.
pub fn resume_adapt(
    mut state: AdaptState,
    config: &RunConfig,
    target: &UnlabeledSet,
    mut log: RunLog,
) -> Result<(AdaptState, RunLog)> {
    config.validate()?;
    if state.spec != config.model {
        return Err(Error::Format("resume state model does not match configured model".into()));
    }
    while state.step < config.steps_adapt {
        log.records.push(adapt_step(&mut state, config, target)?);
    }
    Ok((state, log))
}

/// Full-dataset evaluation: argmax predictions against ground truth,
/// accumulated into one confusion matrix. The only code path that reads
/// target labels.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
) -> Result<(ConfusionMatrix, IouReport)> {
    check_dataset_matches(spec, dataset)?;
    let parts: Vec<Result<ConfusionMatrix>> = parallel::map_ordered(&dataset.images, |img| {
        let (_, logits) = forward(spec, params, &img.pixels)?;
        let pred = argmax_labels(&logits)?;
        let mut cm = ConfusionMatrix::new(spec.num_classes);
        cm.accumulate(&pred, img.labels())?;
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new(spec.num_classes);
    for part in parts {
        cm.merge(&part?)?;
    }
    let report = iou_report(&cm);
    Ok((cm, report))
}

const STATE_MAGIC: &[u8; 4] = b"PSR1";

/// Writes the resumable run-state bundle: student model, teacher, prototype
/// bank, optimizer moments, RNG position, and the step counter.
pub fn save_state(path: &Path, state: &AdaptState) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.magic(STATE_MAGIC)?;
    w.u32(1)?;
    write_model_into(&mut w, &state.spec, &state.student)?;
    w.f64(state.teacher.alpha)?;
    w.f64_slice(&state.teacher.params.values)?;
    write_bank_into(&mut w, &state.bank)?;
    let oc = state.optimizer.config;
    w.u64(state.optimizer.step_count)?;
    for v in [oc.lr, oc.beta1, oc.beta2, oc.weight_decay, oc.epsilon] {
        w.f64(v)?;
    }
    w.f64_slice(&state.optimizer.m)?;
    w.f64_slice(&state.optimizer.v)?;
    let rs = state.rng.state();
    w.bytes(&rs.seed)?;
    w.u64(rs.stream)?;
    w.u128(rs.word_pos)?;
    w.u64(state.step)?;
    w.finish()
}

pub fn load_state(path: &Path) -> Result<AdaptState> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(STATE_MAGIC, "run state")?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported run state version {version}",
            path.display()
        )));
    }
    let (spec, student) = read_model(&mut r, path)?;
    let alpha = r.f64("teacher alpha")?;
    let tvals = r.f64_vec(student.len(), "teacher params")?;
    let mut teacher = init_teacher(&ParamVector { values: tvals }, alpha)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    teacher.alpha = alpha;
    let bank = read_bank(&mut r)?;
    if bank.num_classes() != spec.num_classes || bank.dim() != spec.feature_dim {
        return Err(Error::Format(format!(
            "{}: stored bank {}x{} does not match model",
            path.display(),
            bank.num_classes(),
            bank.dim()
        )));
    }
    let step_count = r.u64("optimizer step count")?;
    let config = AdamWConfig {
        lr: r.f64("lr")?,
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        weight_decay: r.f64("weight_decay")?,
        epsilon: r.f64("epsilon")?,
    };
    let m = r.f64_vec(student.len(), "optimizer m")?;
    let v = r.f64_vec(student.len(), "optimizer v")?;
    let mut optimizer = OptimizerState::new(student.len(), config)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    optimizer.m = m;
    optimizer.v = v;
    optimizer.step_count = step_count;
    let seed_bytes = r.bytes(32, "rng seed")?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&seed_bytes);
    let rng = SeedRng::restore(&RngState {
        seed,
        stream: r.u64("rng stream")?,
        word_pos: r.u128("rng word position")?,
    })?;
    let step = r.u64("step")?;
    r.expect_eof()?;
    Ok(AdaptState { spec, student, teacher, bank, optimizer, rng, step })
}

/// CLI entry: loads the source dataset, trains stage 1, writes the source
/// checkpoint, and reports training-set IoU.
pub fn run_pretrain(config: &RunConfig) -> Result<IouReport> {
    let source = load_dataset(&config.source_data)?;
    let params = pretrain_source(config, &source)?;
    save_model(&config.source_checkpoint, &config.model, &params)?;
    let (_, report) = evaluate(&config.model, &params, &source)?;
    Ok(report)
}

/// CLI entry: loads the source checkpoint and unlabeled target pixels, runs
/// stage 2 (optionally resuming from a saved state), and writes the adapted
/// checkpoint, the resumable state bundle, and the run log.
pub fn run_adapt(config: &RunConfig, resume_from: Option<&Path>) -> Result<(AdaptState, RunLog)> {
    let target_dataset = load_dataset(&config.target_data)?;
    let target = target_dataset.strip_labels();
    drop(target_dataset);

    let (state, log) = match resume_from {
        Some(state_path) => {
            let state = load_state(state_path)?;
            let log = RunLog::load(&config.runlog)?;
            if log.records.len() as u64 != state.step {
                return Err(Error::Format(format!(
                    "run log has {} records but state is at step {}",
                    log.records.len(),
                    state.step
                )));
            }
            resume_adapt(state, config, &target, log)?
        }
        None => {
            let (spec, params) = load_model(&config.source_checkpoint)?;
            adapt(config, &spec, &params, &target)?
        }
    };

    save_model(&config.adapted_checkpoint, &state.spec, &state.student)?;
    save_state(&state_path_for(&config.adapted_checkpoint), &state)?;
    log.save(&config.runlog)?;
    Ok((state, log))
}

/// The resumable bundle sits next to the adapted checkpoint.
pub fn state_path_for(adapted_checkpoint: &Path) -> std::path::PathBuf {
    let mut os = adapted_checkpoint.as_os_str().to_os_string();
    os.push(".state");
    std::path::PathBuf::from(os)
}

/// CLI entry: evaluates a model checkpoint on a dataset file.
pub fn run_eval(checkpoint: &Path, dataset_path: &Path) -> Result<IouReport> {
    let (spec, params) = load_model(checkpoint)?;
    let dataset = load_dataset(dataset_path)?;
    let (_, report) = evaluate(&spec, &params, &dataset)?;
    Ok(report)
}
