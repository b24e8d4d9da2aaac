//! Training targets, the Adam training loop and dataset evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{downsample_labels, Flip, LabelGrid};
use crate::io::{check_params_match, write_checkpoint, Checkpoint, RunConfig, TrainSettings};
use crate::loss::{bev_loss, completion_loss, semantic_loss, total_loss, LossReport, OccupancyTargets, Targets};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::network::{init_model, predict, ssc_rs_forward, ForwardOutput, Mode, ModelConfig, SceneInput};
use crate::sparse::SparseVoxelTensor;
use crate::synth::SceneSample;
use crate::tensor::{adam_step, AdamState, ParamRegistry, Tape, Tensor, Var};
use crate::Real;

pub const LOG_FILE: &str = "train.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_HEADER: &str = "epoch steps l_total l_bev l_s l_c l_s1 l_s2 l_s3 l_c1 l_c2 l_c3";

/// Full-resolution targets in `(b, z, x, y)` order.
pub fn bev_targets(gts: &[&LabelGrid]) -> Result<Targets> {
    let mut classes = Vec::new();
    let mut keep = Vec::new();
    for g in gts {
        let [l, w, h] = g.dims();
        for z in 0..h {
            for x in 0..l {
                for y in 0..w {
                    classes.push(g.get(x, y, z) as usize);
                    keep.push(!g.is_invalid(x, y, z));
                }
            }
        }
    }
    Targets::new(classes, keep)
}

fn downsampled(gts: &[&LabelGrid], factor: usize) -> Result<Vec<LabelGrid>> {
    gts.iter().map(|g| downsample_labels(g, factor)).collect()
}

/// Targets for the rows of a sparse semantic head: the downsampled label of
/// each active voxel, shifted to `0..C_n`. Empty and invalid voxels are
/// masked.
pub fn semantic_targets(gts: &[&LabelGrid], stage: &SparseVoxelTensor) -> Result<Targets> {
    let dims = gts[0].dims();
    let factor = dims[0] / stage.spatial_shape()[0];
    let grids = downsampled(gts, factor)?;
    let mut classes = Vec::with_capacity(stage.len());
    let mut keep = Vec::with_capacity(stage.len());
    for &[b, x, y, z] in stage.coords().iter() {
        let g = &grids[b];
        let l = g.get(x, y, z);
        let ok = l > 0 && !g.is_invalid(x, y, z);
        classes.push(if ok { l as usize - 1 } else { 0 });
        keep.push(ok);
    }
    Targets::new(classes, keep)
}

/// Occupancy of the downsampled labels in `(b, z, x, y)` order, matching a
/// `B×1×Z×X×Y` logit tensor.
pub fn completion_targets(gts: &[&LabelGrid], factor: usize) -> Result<OccupancyTargets> {
    let grids = downsampled(gts, factor)?;
    let refs: Vec<&LabelGrid> = grids.iter().collect();
    let t = bev_targets(&refs)?;
    Ok(OccupancyTargets {
        occupied: t.classes.iter().map(|&c| c > 0).collect(),
        keep: t.keep.to_vec(),
    })
}

/// Weighted training objective of one forward pass. Auxiliary terms are
/// zero when the corresponding heads were not built.
pub fn training_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    gts: &[&LabelGrid],
    bev_weight: f64,
) -> Result<(Var, LossReport)> {
    let dims = gts[0].dims();
    let bev = bev_loss(tape, out.ssc_logits, &bev_targets(gts)?)?;

    let mut report = LossReport::default();
    let sem = if out.sem_aux_logits.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let targets = out
            .sem_aux_logits
            .iter()
            .map(|s| semantic_targets(gts, s))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<Var> = out.sem_aux_logits.iter().map(|s| s.features()).collect();
        let (sem, stages) = semantic_loss(tape, &logits, &targets)?;
        for (r, v) in report.l_s_stages.iter_mut().zip(stages) {
            *r = tape.value(v).item().to_f64_lossy();
        }
        sem
    };
    let com = if out.com_aux_logits.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let targets = out
            .com_aux_logits
            .iter()
            .map(|&v| completion_targets(gts, dims[0] / tape.shape(v)[3]))
            .collect::<Result<Vec<_>>>()?;
        let (com, stages) = completion_loss(tape, &out.com_aux_logits, &targets)?;
        for (r, v) in report.l_c_stages.iter_mut().zip(stages) {
            *r = tape.value(v).item().to_f64_lossy();
        }
        com
    };
    let total = total_loss(tape, bev, sem, com, bev_weight)?;
    report.l_bev = tape.value(bev).item().to_f64_lossy();
    report.l_s = tape.value(sem).item().to_f64_lossy();
    report.l_c = tape.value(com).item().to_f64_lossy();
    report.l_total = tape.value(total).item().to_f64_lossy();
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {report:?}")));
    }
    Ok((total, report))
}

/// Mean loss terms over the steps of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub report: LossReport,
}

impl EpochLog {
    fn from_steps(epoch: usize, steps: &[LossReport], bev_weight: f64) -> Self {
        let n = steps.len().max(1) as f64;
        let mut r = LossReport::default();
        for s in steps {
            r.l_bev += s.l_bev / n;
            r.l_s += s.l_s / n;
            r.l_c += s.l_c / n;
            for i in 0..3 {
                r.l_s_stages[i] += s.l_s_stages[i] / n;
                r.l_c_stages[i] += s.l_c_stages[i] / n;
            }
        }
        r.l_total = bev_weight * r.l_bev + r.l_s + r.l_c;
        Self {
            epoch,
            steps: steps.len(),
            report: r,
        }
    }

    /// One line in [`LOG_HEADER`] column order.
    pub fn line(&self) -> String {
        let r = &self.report;
        let mut cols = vec![self.epoch.to_string(), self.steps.to_string()];
        cols.extend(
            [r.l_total, r.l_bev, r.l_s, r.l_c]
                .iter()
                .chain(&r.l_s_stages)
                .chain(&r.l_c_stages)
                .map(|v| v.to_string()),
        );
        cols.join(" ")
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Model parameters and optimizer state under training.
pub struct Trainer {
    pub model: ModelConfig,
    pub settings: TrainSettings,
    pub params: ParamRegistry<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, settings: TrainSettings) -> Result<Self> {
        model.validate()?;
        let params = init_model(&model, settings.seed)?;
        Ok(Self {
            model,
            settings,
            params,
            adam: AdamState::new(),
            epoch: 0,
        })
    }

    /// Continues from `ckpt`; its tensors must match the configured model.
    pub fn resume(model: ModelConfig, settings: TrainSettings, ckpt: Checkpoint, steps_per_epoch: usize) -> Result<Self> {
        let mut t = Self::new(model, settings)?;
        check_params_match(&t.params, &ckpt.params)?;
        t.params = ckpt.params;
        t.adam = ckpt.adam.unwrap_or_default();
        t.epoch = (t.adam.step as usize).checked_div(steps_per_epoch).unwrap_or(0);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn step(&mut self, batch: &[&SceneSample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let mut tape = Tape::new();
        let inputs: Vec<SceneInput> = batch
            .iter()
            .map(|s| SceneInput {
                points: &s.points,
                occupancy: &s.input_occupancy,
            })
            .collect();
        let out = ssc_rs_forward(&mut tape, &self.params, &self.model, &inputs, Mode::Train)?;
        let gts: Vec<&LabelGrid> = batch.iter().map(|s| &s.gt).collect();
        let (loss, report) = training_loss(&mut tape, &out, &gts, self.settings.bev_weight)?;
        let grads = tape.backward(loss)?.params();
        adam_step(&mut self.params, &grads, &mut self.adam, &self.settings.adam)?;
        Ok(report)
    }

    /// One pass over `samples` in a seeded order, with seeded flips when
    /// enabled.
    pub fn run_epoch(&mut self, samples: &[SceneSample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let mut rng = epoch_rng(self.settings.seed, self.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.settings.batch_size) {
            let batch: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let flip = if self.settings.flip {
                        Flip::sample(&mut rng)
                    } else {
                        Flip::NONE
                    };
                    if flip.is_identity() {
                        s.clone()
                    } else {
                        flip_sample(s, flip, &self.model)
                    }
                })
                .collect();
            let refs: Vec<&SceneSample> = batch.iter().collect();
            reports.push(self.step(&refs)?);
        }
        self.epoch += 1;
        Ok(EpochLog::from_steps(self.epoch, &reports, self.settings.bev_weight))
    }
}

fn flip_sample(s: &SceneSample, flip: Flip, model: &ModelConfig) -> SceneSample {
    SceneSample {
        id: s.id.clone(),
        points: flip.apply_points(&s.points, &model.grid),
        input_occupancy: flip.apply_occupancy(&s.input_occupancy),
        gt: flip.apply_labels(&s.gt),
    }
}

/// Checks that samples agree with the configured grid and class count.
pub fn check_samples(model: &ModelConfig, samples: &[SceneSample]) -> Result<()> {
    for s in samples {
        if s.gt.dims() != model.grid.dims || s.input_occupancy.dims() != model.grid.dims {
            return Err(Error::Config(format!(
                "scene {}: grid {:?} does not match configured {:?}",
                s.id,
                s.gt.dims(),
                model.grid.dims
            )));
        }
        if s.gt.max_label() as usize > model.num_classes {
            return Err(Error::Config(format!(
                "scene {}: label {} exceeds model.num_classes {}",
                s.id,
                s.gt.max_label(),
                model.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains for `cfg.train.epochs` epochs beyond any resumed ones. The log,
/// config and a checkpoint after every epoch go to `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    samples: &[SceneSample],
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<(Trainer, Vec<EpochLog>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_samples(&cfg.model, samples)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch_size);
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg.model.clone(), cfg.train.clone(), c, steps_per_epoch)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let log_path = out_dir.join(LOG_FILE);
    let fresh = !log_path.exists();
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let mut logs = Vec::new();
    for _ in 0..cfg.train.epochs {
        let entry = trainer.run_epoch(samples)?;
        writeln!(log, "{}", entry.line())?;
        log.flush()?;
        write_checkpoint(out_dir.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
        logs.push(entry);
    }
    Ok((trainer, logs))
}

/// Inference-mode predictions, `batch_size` scenes per forward pass.
pub fn predict_samples<T: Real>(
    params: &ParamRegistry<T>,
    model: &ModelConfig,
    samples: &[SceneSample],
    batch_size: usize,
) -> Result<Vec<LabelGrid>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::inference();
        let inputs: Vec<SceneInput> = chunk
            .iter()
            .map(|s| SceneInput {
                points: &s.points,
                occupancy: &s.input_occupancy,
            })
            .collect();
        let fwd = ssc_rs_forward(&mut tape, params, model, &inputs, Mode::Infer)?;
        out.extend(predict(tape.value(fwd.ssc_logits))?);
    }
    Ok(out)
}

/// Confusion matrix of `predictions` against the samples' ground truth.
pub fn confusion(model: &ModelConfig, predictions: &[LabelGrid], samples: &[SceneSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.output_classes());
    for (p, s) in predictions.iter().zip(samples) {
        cm.accumulate(p, &s.gt)?;
    }
    Ok(cm)
}

pub fn evaluate_samples<T: Real>(
    params: &ParamRegistry<T>,
    model: &ModelConfig,
    samples: &[SceneSample],
) -> Result<(Metrics, Vec<LabelGrid>)> {
    let preds = predict_samples(params, model, samples, 1)?;
    Ok((confusion(model, &preds, samples)?.metrics(), preds))
}
