use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::voxel_accuracy;
use super::optim::OptimState;
use super::rule::{fuse_weights, AlphaMode, FuseMode};
use crate::data::{sample_batch, stitch_inference, Modality, Subject};
use crate::error::{Error, Result};
use crate::metrics::{DiceReport, ModelDice};
use crate::nn::{forward, Ctx, ModelConfig, NamedWeights};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor};

pub const CSV_HEADER: &str = "epoch,iter,model,loss,accuracy,alpha_raw,alpha,dice_csf,dice_gm,dice_wm,seed";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Forward, cross-entropy, backward and one optimizer update on a batch.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    weights: &mut NamedWeights<T>,
    optim: &mut OptimState<T>,
    config: &ModelConfig,
    inputs: &Tensor<T>,
    labels: &[usize],
    rng: &mut R,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::train(&mut tape, weights, Mode::Train, config.dropout_p, rng);
    let x = ctx.tape.constant(inputs.clone());
    let logits = forward(&mut ctx, config, x)?;
    let loss = ctx.tape.cross_entropy(logits, labels)?;
    ctx.tape.backward(loss)?;
    let bound = ctx.into_bound();
    let stats = StepStats {
        loss: tape.value(loss).item().as_f64(),
        accuracy: voxel_accuracy(tape.value(logits), labels)?,
    };
    let grads: IndexMap<String, Tensor<T>> = bound
        .into_iter()
        .filter_map(|(n, v)| tape.grad(v).map(|g| (n, g.clone())))
        .collect();
    optim.apply(weights, &grads)?;
    Ok(stats)
}

/// How the teachers behave during a fuse run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TeacherMode {
    /// Each teacher takes one step on its own modality before every fuse iteration.
    #[default]
    Joint,
    /// Teachers are fixed, previously trained weights.
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha_mode: AlphaMode,
    pub fuse_mode: FuseMode,
    pub teachers: TeacherMode,
    /// Validate every this many epochs; the last epoch is always validated.
    pub val_every: usize,
    pub val_step: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            patches_per_epoch: 2000,
            patch_size: 32,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            alpha_mode: AlphaMode::Dynamic,
            fuse_mode: FuseMode::Sum,
            teachers: TeacherMode::Joint,
            val_every: 1,
            val_step: 32,
        }
    }
}

impl TrainOptions {
    /// Batch sizes of one epoch; the last may be short.
    pub fn epoch_batches(&self) -> Vec<usize> {
        let full = self.patches_per_epoch / self.batch;
        let mut v = vec![self.batch; full];
        if !self.patches_per_epoch.is_multiple_of(self.batch) {
            v.push(self.patches_per_epoch % self.batch);
        }
        v
    }

    /// Validation tiling step, never larger than the patch.
    pub fn stitch_step(&self) -> usize {
        self.val_step.min(self.patch_size)
    }

    fn validates(&self, epoch: usize) -> bool {
        epoch + 1 == self.epochs || (self.val_every > 0 && (epoch + 1).is_multiple_of(self.val_every))
    }

    fn check(&self) -> Result<()> {
        if self.batch == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Config("batch and patches per epoch must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub iter: usize,
    pub model: String,
    pub loss: f64,
    pub accuracy: f64,
    pub alpha_raw: Option<f64>,
    pub alpha: Option<f64>,
    pub dice: Option<[f64; 3]>,
    pub seed: u64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let d = r.dice.map(|d| d.map(Some)).unwrap_or([None; 3]);
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
            r.epoch,
            r.iter,
            r.model,
            r.loss,
            r.accuracy,
            cell(r.alpha_raw),
            cell(r.alpha),
            cell(d[0]),
            cell(d[1]),
            cell(d[2]),
            r.seed
        );
    }
    out
}

/// Per-iteration record of the fuse model's blend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionState {
    pub epoch: usize,
    pub iteration: usize,
    pub alpha: f64,
    pub alpha_raw: Option<f64>,
    /// Voxel accuracy of this iteration's fuse batch.
    pub p: f64,
    /// Cross-entropy of this iteration's fuse batch.
    pub l: f64,
    pub n: usize,
}

/// Mean stitched Dice of `weights` over `subjects` on the given modalities.
pub fn evaluate(
    weights: &NamedWeights<f32>,
    config: &ModelConfig,
    subjects: &[Subject],
    modalities: &[Modality],
    patch: usize,
    step: usize,
) -> Result<[f64; 3]> {
    let mut reports = Vec::new();
    for s in subjects {
        for &m in modalities {
            let pred = stitch_inference(weights, config, s.modality(m), patch, step)?;
            reports.push(DiceReport::compute(&s.labels.labels, &pred.labels)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyDataset("no validation subjects".into()));
    }
    Ok(DiceReport::average(&reports))
}

struct Learner<'a> {
    name: &'a str,
    weights: NamedWeights<f32>,
    optim: OptimState<f32>,
}

impl<'a> Learner<'a> {
    fn new(name: &'a str, weights: NamedWeights<f32>, lr: f64) -> Self {
        let optim = OptimState::new(&weights, lr);
        Self { name, weights, optim }
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        config: &ModelConfig,
        subjects: &[Subject],
        modality: Modality,
        opts: &TrainOptions,
        n: usize,
        rng: &mut R,
    ) -> Result<StepStats> {
        let b = sample_batch(subjects, modality, opts.patch_size, n, rng)?;
        train_step(&mut self.weights, &mut self.optim, config, &b.inputs, &b.labels_usize(), rng)
    }

    fn row(&self, epoch: usize, iter: usize, s: StepStats, seed: u64) -> MetricRow {
        MetricRow {
            epoch,
            iter,
            model: self.name.to_string(),
            loss: s.loss,
            accuracy: s.accuracy,
            alpha_raw: None,
            alpha: None,
            dice: None,
            seed,
        }
    }
}

fn last_row_of<'r>(log: &'r mut [MetricRow], model: &str) -> Option<&'r mut MetricRow> {
    log.iter_mut().rev().find(|r| r.model == model)
}

/// Supervised training of one model on one modality.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher<R: Rng + ?Sized>(
    name: &str,
    weights: NamedWeights<f32>,
    config: &ModelConfig,
    train: &[Subject],
    val: &[Subject],
    modality: Modality,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(NamedWeights<f32>, Vec<MetricRow>)> {
    opts.check()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("no {} training subjects", modality.name())));
    }
    let mut model = Learner::new(name, weights, opts.lr);
    let mut log = Vec::new();
    let mut iter = 0;
    for epoch in 0..opts.epochs {
        for n in opts.epoch_batches() {
            let s = model.step(config, train, modality, opts, n, rng)?;
            log.push(model.row(epoch, iter, s, opts.seed));
            iter += 1;
        }
        if !val.is_empty() && opts.validates(epoch) {
            let d = evaluate(&model.weights, config, val, &[modality], opts.patch_size, opts.stitch_step())?;
            if let Some(r) = last_row_of(&mut log, name) {
                r.dice = Some(d);
            }
        }
    }
    Ok((model.weights, log))
}

/// Result of a fuse run.
#[derive(Clone, Debug)]
pub struct FuseRun {
    pub fuse: NamedWeights<f32>,
    pub tm1: NamedWeights<f32>,
    pub tm2: NamedWeights<f32>,
    pub log: Vec<MetricRow>,
    pub states: Vec<FusionState>,
}

impl FuseRun {
    /// Validation Dice of the last validated epoch, per model.
    pub fn final_dice(&self) -> Vec<ModelDice> {
        ["tm1", "tm2", "fuse"]
            .iter()
            .filter_map(|m| {
                self.log
                    .iter()
                    .rev()
                    .find(|r| r.model == *m && r.dice.is_some())
                    .map(|r| ModelDice {
                        model: m.to_string(),
                        dice: r.dice.unwrap_or_default(),
                    })
            })
            .collect()
    }
}

/// Trains the fuse model: each iteration blends in the teachers' weights,
/// then takes its own gradient step on a batch whose modality alternates
/// T1/T2 with the iteration parity.
#[allow(clippy::too_many_arguments)]
pub fn train_fuse<R: Rng + ?Sized>(
    fuse: NamedWeights<f32>,
    tm1: NamedWeights<f32>,
    tm2: NamedWeights<f32>,
    config: &ModelConfig,
    train: &[Subject],
    val: &[Subject],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<FuseRun> {
    opts.check()?;
    fuse.check_compatible(&tm1)?;
    fuse.check_compatible(&tm2)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training subjects".into()));
    }
    let joint = opts.teachers == TeacherMode::Joint;
    let mut f = Learner::new("fuse", fuse, opts.lr);
    let mut t1 = Learner::new("tm1", tm1, opts.lr);
    let mut t2 = Learner::new("tm2", tm2, opts.lr);
    let per_epoch = opts.epoch_batches();
    let total = per_epoch.len() * opts.epochs;
    let mut log = Vec::new();
    let mut states = Vec::with_capacity(total);
    let mut previous = None;
    let mut iter = 0;
    for epoch in 0..opts.epochs {
        for &n in &per_epoch {
            if joint {
                let s = t1.step(config, train, Modality::T1, opts, n, rng)?;
                log.push(t1.row(epoch, iter, s, opts.seed));
                let s = t2.step(config, train, Modality::T2, opts, n, rng)?;
                log.push(t2.row(epoch, iter, s, opts.seed));
            }
            let alpha = opts.alpha_mode.alpha(iter, total, previous, n)?;
            f.weights = fuse_weights(&f.weights, &t1.weights, &t2.weights, alpha.value, opts.fuse_mode)?;
            let modality = if iter % 2 == 0 { Modality::T1 } else { Modality::T2 };
            let s = f.step(config, train, modality, opts, n, rng)?;
            previous = Some((s.accuracy, s.loss));
            states.push(FusionState {
                epoch,
                iteration: iter,
                alpha: alpha.value,
                alpha_raw: alpha.raw,
                p: s.accuracy,
                l: s.loss,
                n,
            });
            let mut row = f.row(epoch, iter, s, opts.seed);
            row.alpha = Some(alpha.value);
            row.alpha_raw = alpha.raw;
            log.push(row);
            iter += 1;
        }
        if !val.is_empty() && opts.validates(epoch) {
            let p = opts.patch_size;
            let d = evaluate(&f.weights, config, val, &[Modality::T1, Modality::T2], p, opts.stitch_step())?;
            if let Some(r) = last_row_of(&mut log, "fuse") {
                r.dice = Some(d);
            }
            if joint {
                for (t, m) in [(&t1, Modality::T1), (&t2, Modality::T2)] {
                    let d = evaluate(&t.weights, config, val, &[m], p, opts.stitch_step())?;
                    if let Some(r) = last_row_of(&mut log, t.name) {
                        r.dice = Some(d);
                    }
                }
            }
        }
    }
    Ok(FuseRun {
        fuse: f.weights,
        tm1: t1.weights,
        tm2: t2.weights,
        log,
        states,
    })
}

/// One fuse run per α setting, every run from the same seed and initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub alpha: AlphaMode,
    pub dice: [f64; 3],
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

/// Constant α = 0.1, 0.2, …, 0.9 followed by the accuracy/loss-driven mode.
pub fn default_ablation_alphas() -> Vec<AlphaMode> {
    (1..=9)
        .map(|i| AlphaMode::Constant(i as f64 / 10.0))
        .chain([AlphaMode::Dynamic])
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn ablation_alpha(
    fuse_init: &NamedWeights<f32>,
    tm1: &NamedWeights<f32>,
    tm2: &NamedWeights<f32>,
    config: &ModelConfig,
    train: &[Subject],
    val: &[Subject],
    alphas: &[AlphaMode],
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("ablation needs validation subjects".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let run_opts = TrainOptions {
                alpha_mode: alpha,
                val_every: 0,
                ..opts.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let run = train_fuse(fuse_init.clone(), tm1.clone(), tm2.clone(), config, train, val, &run_opts, &mut rng)?;
            let dice = run
                .final_dice()
                .into_iter()
                .find(|m| m.model == "fuse")
                .map(|m| m.dice)
                .ok_or_else(|| Error::EmptyDataset("fuse run produced no validation".into()))?;
            Ok(AblationRow { alpha, dice })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("alpha,dice_csf,dice_gm,dice_wm,mean\n");
    for r in rows {
        let label = match r.alpha {
            AlphaMode::Constant(v) => format!("{v}"),
            other => other.to_string(),
        };
        let _ = writeln!(
            out,
            "{label},{:.6},{:.6},{:.6},{:.6}",
            r.dice[0],
            r.dice[1],
            r.dice[2],
            r.mean()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batching() {
        let o = TrainOptions {
            patches_per_epoch: 2000,
            batch: 8,
            ..Default::default()
        };
        assert_eq!(o.epoch_batches().len(), 250);
        let o = TrainOptions {
            patches_per_epoch: 10,
            batch: 4,
            ..Default::default()
        };
        assert_eq!(o.epoch_batches(), vec![4, 4, 2]);
    }

    #[test]
    fn csv_header_and_blanks() {
        let row = MetricRow {
            epoch: 0,
            iter: 3,
            model: "tm1".into(),
            loss: 0.5,
            accuracy: 0.25,
            alpha_raw: None,
            alpha: None,
            dice: None,
            seed: 7,
        };
        let csv = metrics_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("0,3,tm1,0.500000,0.250000,,,,,,7"));
    }

    #[test]
    fn default_alphas_cover_table() {
        let a = default_ablation_alphas();
        assert_eq!(a.len(), 10);
        assert_eq!(a[5], AlphaMode::Constant(0.6));
        assert_eq!(a[9], AlphaMode::Dynamic);
    }
}
