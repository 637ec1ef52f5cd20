//! Training loop: method registry, single training step, `fit` with
//! checkpointing, metrics and resume.
//!
//! Every random draw is a pure function of `(seed, step)` so a run resumed
//! from a checkpoint replays exactly the batches and mixes of an
//! uninterrupted one.

use crate::checkpoint::{Archive, ArchiveKind, ADAM_M_PREFIX, ADAM_V_PREFIX, TEACHER_PREFIX};
use crate::config::TrainConfig;
use crate::data_synth::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, IoUReport};
use crate::guider::Guider;
use crate::losses::{beta, ce_loss, guidance_loss, stack_labels, total_loss, LossBreakdown, LossConfig};
use crate::mixing::class_mix;
use crate::nn::{warmup_factor, AdamW, Grads, ParamStore};
use crate::seeding::{self, STREAM_GUIDER_INIT, STREAM_MIX, STREAM_MODEL_INIT, STREAM_SOURCE_ORDER, STREAM_TARGET_ORDER};
use crate::segmodel::{stack_images, SegModel, DECODER_PREFIX, ENCODER_PREFIX};
use crate::selftrain::{pixel_weights, pseudo_label, TeacherState};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One training batch. Target labels are never part of it.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_s: Array4<f64>,
    pub y_s: Array3<u8>,
    pub x_t: Array4<f64>,
}

impl Batch {
    pub fn new(source: &[&LabeledImage], target: &[&LabeledImage]) -> Result<Self> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::Shape(format!(
                "{} source vs {} target images",
                source.len(),
                target.len()
            )));
        }
        Ok(Batch {
            x_s: stack_images(source.iter().map(|i| &i.pixels)),
            y_s: stack_labels(source.iter().map(|i| &i.labels)),
            x_t: stack_images(target.iter().map(|i| &i.pixels)),
        })
    }

    pub fn len(&self) -> usize {
        self.x_s.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a method may read or accumulate into during one step.
pub struct StepContext<'a> {
    pub model: &'a SegModel,
    pub student: &'a ParamStore,
    pub teacher: &'a ParamStore,
    pub guider: Option<(&'a Guider, &'a ParamStore)>,
    pub grads: &'a mut Grads,
    pub guider_grads: &'a mut Grads,
    pub loss: &'a LossConfig,
    pub mix_rng: &'a mut ChaCha8Rng,
}

/// A training recipe: computes the step's losses and accumulates their
/// gradients. The trainer owns the optimizer step and the EMA update.
pub trait UdaMethod: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn uses_guider(&self) -> bool {
        false
    }

    fn compute(&self, ctx: &mut StepContext<'_>, batch: &Batch) -> Result<LossBreakdown>;
}

/// Supervised cross-entropy on the source batch.
pub fn supervised_pass(ctx: &mut StepContext<'_>, batch: &Batch) -> Result<f64> {
    let (f, enc) = ctx.model.encode(ctx.student, &batch.x_s)?;
    let (logits, dec) = ctx.model.decode(ctx.student, &f)?;
    let out = ce_loss(&logits, &batch.y_s, None, ctx.loss.ignore_index)?;
    let df = ctx.model.decode_backward(ctx.student, &dec, &out.grad, ctx.grads);
    ctx.model.encode_backward(ctx.student, &enc, &df, ctx.grads);
    Ok(out.loss)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MixedStats {
    pub l_mix: f64,
    pub l_gt: f64,
    pub q: f64,
    pub r: f64,
    pub beta: f64,
}

/// Teacher pseudo-labels, ClassMix, the weighted mixed loss and, with
/// `guidance`, the guidance loss on the guider's reconstruction of the
/// same mixed features. The mixed batch is encoded once.
pub fn mixed_pass(ctx: &mut StepContext<'_>, batch: &Batch, guidance: bool) -> Result<MixedStats> {
    let n = batch.len();
    let stride = ctx.model.config().output_stride();
    let pseudo = pseudo_label(ctx.model, ctx.teacher, &batch.x_t, ctx.loss.tau)?;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    for (i, p) in pseudo.iter().enumerate() {
        let mixed = class_mix(
            &batch.x_s.index_axis(Axis(0), i).to_owned(),
            &batch.y_s.index_axis(Axis(0), i).to_owned(),
            &batch.x_t.index_axis(Axis(0), i).to_owned(),
            &p.labels,
            stride,
            ctx.mix_rng,
        )?;
        weights.push(pixel_weights(&mixed.mask.mask, p.quality));
        ratios.push(mixed.source_ratio);
        masks.push(mixed.mask_scale);
        labels.push(mixed.labels);
        images.push(mixed.image);
    }
    let x_m = stack_images(&images);
    let y_m = stack_labels(&labels);
    let w = ndarray::stack(Axis(0), &weights.iter().map(|w| w.view()).collect::<Vec<_>>())
        .expect("weights share a shape");

    let (f_m, enc) = ctx.model.encode(ctx.student, &x_m)?;
    let (logits, dec) = ctx.model.decode(ctx.student, &f_m)?;
    let mix = ce_loss(&logits, &y_m, Some(&w), ctx.loss.ignore_index)?;
    let mut df = ctx.model.decode_backward(ctx.student, &dec, &mix.grad, ctx.grads);

    let q = pseudo.iter().map(|p| p.quality).sum::<f64>() / n as f64;
    let r = ratios.iter().sum::<f64>() / n as f64;
    let mut stats = MixedStats {
        l_mix: mix.loss,
        q,
        r,
        ..MixedStats::default()
    };
    if guidance {
        let (guider, gparams) = ctx
            .guider
            .ok_or_else(|| Error::Config("guidance requested without a guider".into()))?;
        let mask = ndarray::stack(Axis(0), &masks.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("masks share a shape");
        let (f_g, gcache) = guider.reconstruct(gparams, &f_m, &mask)?;
        let (logits_g, dec_g) = ctx.model.decode(ctx.student, &f_g)?;
        let gt = guidance_loss(&logits_g, &pseudo, &ratios, ctx.loss)?;
        stats.l_gt = gt.loss;
        stats.beta = if ctx.loss.uncertainty {
            ratios.iter().map(|&r| beta(r, ctx.loss.d)).sum::<f64>() / n as f64
        } else {
            1.0
        };
        // With a zero weight the gradient is exactly zero; skipping it keeps
        // the parameter trajectory bit-identical to plain mixing.
        if ctx.loss.lambda_gt != 0.0 {
            let d_logits = gt.grad * ctx.loss.lambda_gt;
            let df_g = ctx.model.decode_backward(ctx.student, &dec_g, &d_logits, ctx.grads);
            df += &guider.backward(gparams, &gcache, &df_g, ctx.guider_grads);
        }
    }
    ctx.model.encode_backward(ctx.student, &enc, &df, ctx.grads);
    Ok(stats)
}

/// Supervised loss only.
#[derive(Debug, Default)]
pub struct SourceOnly;

impl UdaMethod for SourceOnly {
    fn name(&self) -> &'static str {
        "source_only"
    }

    fn compute(&self, ctx: &mut StepContext<'_>, batch: &Batch) -> Result<LossBreakdown> {
        let l_sup = supervised_pass(ctx, batch)?;
        total_loss(l_sup, 0.0, 0.0, 0.0, 0.0, 0.0, ctx.loss)
    }
}

/// Mean-teacher self-training on ClassMix batches.
#[derive(Debug, Default)]
pub struct Dacs;

impl UdaMethod for Dacs {
    fn name(&self) -> &'static str {
        "dacs"
    }

    fn compute(&self, ctx: &mut StepContext<'_>, batch: &Batch) -> Result<LossBreakdown> {
        let l_sup = supervised_pass(ctx, batch)?;
        let m = mixed_pass(ctx, batch, false)?;
        total_loss(l_sup, m.l_mix, 0.0, m.q, m.r, 0.0, ctx.loss)
    }
}

/// Mixing plus the guidance loss on guider-reconstructed target features.
#[derive(Debug, Default)]
pub struct DacsGuidance;

impl UdaMethod for DacsGuidance {
    fn name(&self) -> &'static str {
        "dacs_guidance"
    }

    fn uses_guider(&self) -> bool {
        true
    }

    fn compute(&self, ctx: &mut StepContext<'_>, batch: &Batch) -> Result<LossBreakdown> {
        let l_sup = supervised_pass(ctx, batch)?;
        let m = mixed_pass(ctx, batch, true)?;
        total_loss(l_sup, m.l_mix, m.l_gt, m.q, m.r, m.beta, ctx.loss)
    }
}

type MethodCtor = fn() -> Box<dyn UdaMethod>;

/// Training methods by name.
#[derive(Clone, Debug, Default)]
pub struct MethodRegistry {
    entries: BTreeMap<String, MethodCtor>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("source_only", || Box::new(SourceOnly));
        r.register("dacs", || Box::new(Dacs));
        r.register("dacs_guidance", || Box::new(DacsGuidance));
        r
    }

    pub fn register(&mut self, name: &str, ctor: MethodCtor) {
        self.entries.insert(name.to_string(), ctor);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn UdaMethod>> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Index into a dataset of length `len` for slot `slot` of the batch at
/// `step`: each pass over the data uses a fresh permutation.
pub fn sample_index(seed: u64, stream: u64, len: usize, batch_size: usize, step: u64, slot: usize) -> usize {
    let pos = step as usize * batch_size + slot;
    let epoch = (pos / len) as u64;
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut seeding::stream(seed, &[stream, epoch]));
    perm[pos % len]
}

/// Files written by [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn final_report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub history: Vec<LossBreakdown>,
    pub evals: Vec<(u64, f64)>,
    pub final_report: Option<IoUReport>,
    pub seconds_per_step: f64,
}

#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    method: Box<dyn UdaMethod>,
    model: SegModel,
    student: ParamStore,
    teacher: TeacherState,
    guider: Option<Guider>,
    guider_params: ParamStore,
    optimizer: AdamW,
    guider_optimizer: Option<AdamW>,
    grads: Grads,
    guider_grads: Grads,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::with_registry(cfg, &MethodRegistry::with_builtin())
    }

    pub fn with_registry(cfg: TrainConfig, registry: &MethodRegistry) -> Result<Self> {
        cfg.validate()?;
        let method = registry.create(&cfg.method)?;
        let mut student = ParamStore::new();
        let model = SegModel::new(
            cfg.model.clone(),
            &mut student,
            &mut seeding::stream(cfg.seed, &[STREAM_MODEL_INIT]),
        )?;
        let mut guider_params = ParamStore::new();
        let guider = if method.uses_guider() {
            Some(Guider::new(
                cfg.guider.clone(),
                &mut guider_params,
                &mut seeding::stream(cfg.seed, &[STREAM_GUIDER_INIT]),
            )?)
        } else {
            None
        };
        let (lr_enc, lr_dec) = (cfg.lr_encoder, cfg.lr_decoder);
        let optimizer = AdamW::new(&student, cfg.weight_decay, |name| {
            if name.starts_with(ENCODER_PREFIX) {
                Some(lr_enc)
            } else if name.starts_with(DECODER_PREFIX) {
                Some(lr_dec)
            } else {
                None
            }
        });
        let guider_optimizer = (guider.is_some() && cfg.optimize_guider)
            .then(|| AdamW::new(&guider_params, cfg.weight_decay, |_| Some(cfg.lr_guider)));
        let teacher = TeacherState::from_student(&student, cfg.alpha);
        Ok(Trainer {
            grads: student.zeros_like(),
            guider_grads: guider_params.zeros_like(),
            cfg,
            method,
            model,
            student,
            teacher,
            guider,
            guider_params,
            optimizer,
            guider_optimizer,
            step: 0,
        })
    }

    /// Rebuilds a trainer from a training archive written by
    /// [`Trainer::checkpoint`].
    pub fn resume(archive: &Archive) -> Result<Self> {
        Self::resume_with(archive, &MethodRegistry::with_builtin())
    }

    pub fn resume_with(archive: &Archive, registry: &MethodRegistry) -> Result<Self> {
        if archive.kind != ArchiveKind::Training {
            return Err(Error::Param("inference archives cannot be resumed".into()));
        }
        let cfg: TrainConfig = serde_json::from_value(archive.metadata["config"].clone())
            .map_err(|e| Error::Param(format!("archive config: {e}")))?;
        let mut t = Self::with_registry(cfg, registry)?;
        archive.load_store("", &mut t.student)?;
        archive.load_store(TEACHER_PREFIX, &mut t.teacher.params)?;
        archive.load_store("", &mut t.guider_params)?;
        let opt_steps = archive.metadata["optimizer_steps"].as_u64().unwrap_or(0);
        restore_moments(archive, &t.student, &mut t.optimizer, opt_steps)?;
        if let Some(opt) = t.guider_optimizer.as_mut() {
            let steps = archive.metadata["guider_optimizer_steps"].as_u64().unwrap_or(0);
            restore_moments(archive, &t.guider_params, opt, steps)?;
        }
        t.step = archive.step;
        Ok(t)
    }

    /// Changes the schedule length, e.g. to continue a finished run. The
    /// warmup length is pinned first so earlier learning rates stay valid.
    pub fn set_total_steps(&mut self, total_steps: u64) -> Result<()> {
        if total_steps < self.step {
            return Err(Error::Config(format!(
                "total_steps {total_steps} is before the current step {}",
                self.step
            )));
        }
        self.cfg.warmup_steps = Some(self.cfg.warmup());
        self.cfg.total_steps = total_steps;
        self.cfg.validate()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn method(&self) -> &dyn UdaMethod {
        self.method.as_ref()
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn student(&self) -> &ParamStore {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut ParamStore {
        &mut self.student
    }

    pub fn teacher(&self) -> &ParamStore {
        &self.teacher.params
    }

    pub fn guider(&self) -> Option<(&Guider, &ParamStore)> {
        self.guider.as_ref().map(|g| (g, &self.guider_params))
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn guider_optimizer(&self) -> Option<&AdamW> {
        self.guider_optimizer.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Gradients accumulated by the most recent step.
    pub fn last_grads(&self) -> &Grads {
        &self.grads
    }

    pub fn last_guider_grads(&self) -> &Grads {
        &self.guider_grads
    }

    /// Batch of the current step.
    pub fn batch_for_step(&self, source: &[LabeledImage], target: &[LabeledImage]) -> Result<Batch> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config("source and target datasets must be non-empty".into()));
        }
        let b = self.cfg.batch_size;
        let s: Vec<_> = (0..b)
            .map(|i| &source[sample_index(self.cfg.seed, STREAM_SOURCE_ORDER, source.len(), b, self.step, i)])
            .collect();
        let t: Vec<_> = (0..b)
            .map(|i| &target[sample_index(self.cfg.seed, STREAM_TARGET_ORDER, target.len(), b, self.step, i)])
            .collect();
        Batch::new(&s, &t)
    }

    /// Losses and gradients, one optimizer step, then the EMA update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.grads.zero();
        self.guider_grads.zero();
        let mut mix_rng = seeding::stream(self.cfg.seed, &[STREAM_MIX, self.step]);
        let mut ctx = StepContext {
            model: &self.model,
            student: &self.student,
            teacher: &self.teacher.params,
            guider: self.guider.as_ref().map(|g| (g, &self.guider_params)),
            grads: &mut self.grads,
            guider_grads: &mut self.guider_grads,
            loss: &self.cfg.loss,
            mix_rng: &mut mix_rng,
        };
        let losses = self.method.compute(&mut ctx, batch).map_err(|e| match e {
            Error::NonFinite { component, value } => Error::Diverged {
                step: self.step,
                breakdown: format!("{component}={value}"),
            },
            other => other,
        })?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                breakdown: losses.to_string(),
            });
        }
        let scale = warmup_factor(self.step, self.cfg.warmup());
        self.optimizer.step(&mut self.student, &self.grads, scale);
        if let Some(opt) = self.guider_optimizer.as_mut() {
            opt.step(&mut self.guider_params, &self.guider_grads, scale);
        }
        self.teacher.update(&self.student)?;
        self.step += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Archive {
        let meta = serde_json::json!({
            "config": self.cfg,
            "method": self.method.name(),
            "optimizer_steps": self.optimizer.steps(),
            "guider_optimizer_steps": self.guider_optimizer.as_ref().map(|o| o.steps()),
        });
        let mut ar = Archive::new(ArchiveKind::Training, self.step, meta);
        ar.push_store("", &self.student);
        ar.push_store(TEACHER_PREFIX, &self.teacher.params);
        ar.push_store("", &self.guider_params);
        push_moments(&mut ar, &self.student, &self.optimizer);
        if let Some(opt) = &self.guider_optimizer {
            push_moments(&mut ar, &self.guider_params, opt);
        }
        ar
    }

    /// Student parameters only: what inference needs.
    pub fn inference_archive(&self) -> Archive {
        export_inference(&self.checkpoint())
    }

    /// Runs until `total_steps`, writing metrics, periodic evaluations and
    /// checkpoints under `out` when given.
    pub fn fit(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        val: Option<&Dataset>,
        out: Option<&RunPaths>,
        mut progress: impl FnMut(u64, &LossBreakdown),
    ) -> Result<FitSummary> {
        if source.is_empty() {
            return Err(Error::Config("source dataset is empty".into()));
        }
        if target.is_empty() {
            return Err(Error::Config("target dataset is empty".into()));
        }
        let mut metrics = match out {
            Some(paths) => {
                std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
                self.cfg.save(&paths.config())?;
                Some(open_csv(&paths.metrics(), LossBreakdown::CSV_HEADER, self.step)?)
            }
            None => None,
        };
        let mut evals_csv = match out {
            Some(paths) => Some(open_csv(&paths.eval(), "step,miou", self.step)?),
            None => None,
        };
        let mut summary = FitSummary {
            history: Vec::new(),
            evals: Vec::new(),
            final_report: None,
            seconds_per_step: 0.0,
        };
        let start = std::time::Instant::now();
        let first = self.step;
        while self.step < self.cfg.total_steps {
            let batch = self.batch_for_step(&source.images, &target.images)?;
            let step = self.step;
            let losses = self.train_step(&batch)?;
            if let Some((path, f)) = metrics.as_mut() {
                writeln!(f, "{}", losses.csv_row(step)).map_err(|e| Error::io(path.as_path(), e))?;
            }
            progress(step, &losses);
            summary.history.push(losses);
            let done = self.step;
            if let (Some(v), true) = (val, self.cfg.eval_interval > 0 && done % self.cfg.eval_interval == 0 && done < self.cfg.total_steps) {
                let report = evaluate(&self.model, &self.student, &v.images, 8)?;
                summary.evals.push((done, report.miou));
                if let Some((path, f)) = evals_csv.as_mut() {
                    writeln!(f, "{done},{}", report.miou).map_err(|e| Error::io(path.as_path(), e))?;
                }
            }
            if let Some(paths) = out {
                if self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0 {
                    self.checkpoint().write(&paths.checkpoint(done))?;
                }
            }
        }
        let ran = self.step - first;
        if ran > 0 {
            summary.seconds_per_step = start.elapsed().as_secs_f64() / ran as f64;
        }
        if let Some(v) = val {
            let mut report = evaluate(&self.model, &self.student, &v.images, 8)?;
            report.class_names = v.meta.class_names.clone();
            summary.evals.push((self.step, report.miou));
            if let Some((path, f)) = evals_csv.as_mut() {
                writeln!(f, "{},{}", self.step, report.miou).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(paths) = out {
                report.save(&paths.final_report())?;
            }
            summary.final_report = Some(report);
        }
        if let Some(paths) = out {
            self.checkpoint().write(&paths.final_checkpoint())?;
        }
        Ok(summary)
    }
}

/// Copies only the unprefixed student tensors of a training archive.
pub fn export_inference(training: &Archive) -> Archive {
    let mut meta = training.metadata.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.remove("optimizer_steps");
        obj.remove("guider_optimizer_steps");
    }
    let mut out = Archive::new(ArchiveKind::Inference, training.step, meta);
    for name in training.names() {
        let is_student = name.starts_with(ENCODER_PREFIX) || name.starts_with(DECODER_PREFIX);
        if is_student {
            out.push(name, training.get(name).expect("listed name").clone());
        }
    }
    out
}

fn push_moments(ar: &mut Archive, store: &ParamStore, opt: &AdamW) {
    for (name, m, v) in opt.state(store) {
        ar.push(format!("{ADAM_M_PREFIX}{name}"), m.clone());
        ar.push(format!("{ADAM_V_PREFIX}{name}"), v.clone());
    }
}

fn restore_moments(ar: &Archive, store: &ParamStore, opt: &mut AdamW, steps: u64) -> Result<()> {
    let mut moments = Vec::with_capacity(store.len());
    for (id, name, _) in store.iter() {
        let get = |prefix: &str| {
            ar.get(&format!("{prefix}{name}"))
                .cloned()
                .ok_or_else(|| Error::Param(format!("archive has no optimizer state for {name}")))
        };
        moments.push((id.index(), get(ADAM_M_PREFIX)?, get(ADAM_V_PREFIX)?));
    }
    opt.restore(steps, moments.into_iter())
}

/// Opens a CSV for appending, keeping only rows for steps before `from`.
fn open_csv(path: &Path, header: &str, from: u64) -> Result<(PathBuf, std::fs::File)> {
    let mut kept = vec![header.to_string()];
    if from > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < from))
                    .map(str::to_string),
            );
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok((path.to_path_buf(), f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_builtin_methods() {
        let r = MethodRegistry::with_builtin();
        assert_eq!(r.names().collect::<Vec<_>>(), ["dacs", "dacs_guidance", "source_only"]);
        assert!(r.create("dacs_guidance").unwrap().uses_guider());
        assert!(!r.create("dacs").unwrap().uses_guider());
        assert!(matches!(r.create("mae"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn sampling_covers_each_epoch_once() {
        let len = 7;
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..7u64)
                .map(|k| {
                    let pos = epoch * 7 + k;
                    sample_index(3, STREAM_SOURCE_ORDER, len, 1, pos, 0)
                })
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        assert_eq!(
            sample_index(3, STREAM_SOURCE_ORDER, 10, 2, 4, 1),
            sample_index(3, STREAM_SOURCE_ORDER, 10, 2, 4, 1)
        );
    }
}
