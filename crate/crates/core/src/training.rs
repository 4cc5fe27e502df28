//! Total objective, λ warmup and the optimization loop.
//!
//! Each step draws a mixed base/novel batch of RoIs, runs the model, and
//! combines three losses: classification cross-entropy over every proposal,
//! per-pixel mask BCE over base proposals only, and the four-term contrastive
//! loss over the proposals admitted by `supervision`. Base proposals (and
//! novel ones in oracle mode) are partitioned by their GT mask and mined by
//! boundary distance; the rest are partitioned by their CAM and mined at
//! random.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerKind, QueryGradient, TrainConfig};
use crate::contrast::{batch_loss, FourKeys, LossBreakdown};
use crate::data::{
    derive_seed, extract_split, rng_from_seed, AccessAudit, Dataset, DataRng, Mask, RoiSample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::heads::{Model, ModelConfig, OutputGrads};
use crate::nn::{bce_with_logits, softmax_cross_entropy, Module, Optimizer, Tensor};
use crate::partition::{extract_boundary, partition_from_cam, partition_from_mask, Lattice, Partition};
use crate::sampling::{
    compute_shared_queries, mine_keys_base, mine_keys_novel, KeySets, ProjectedMap,
};

const TAG_INIT: u64 = 0x1001;
const TAG_EPOCH: u64 = 0x1002;
const TAG_MINING: u64 = 0x1003;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_box: f64,
    pub loss_mask: f64,
    pub loss_con: f64,
    pub lambda: f64,
    pub n_base: usize,
    pub n_novel: usize,
    pub n_skipped: usize,
}

impl StepRecord {
    /// Relative deviation of `loss_total` from its three components.
    pub fn identity_error(&self) -> f64 {
        let expect = self.loss_box + self.loss_mask + self.lambda * self.loss_con;
        (self.loss_total - expect).abs() / expect.abs().max(f64::MIN_POSITIVE)
    }
}

/// Contrastive weight at `step`: linear from `lambda_start` to `lambda_end`
/// over the first `warmup_fraction · total_steps` steps, constant after.
pub fn lambda_schedule(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_fraction * total_steps as f64;
    if warmup <= 0.0 || step as f64 >= warmup {
        return cfg.lambda_end;
    }
    let t = step as f64 / warmup;
    cfg.lambda_start + t * (cfg.lambda_end - cfg.lambda_start)
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub box_loss: f64,
    pub mask_loss: f64,
    pub con_loss: f64,
}

/// `L = L_box + L_mask + λ·L_con` and the record describing the step.
pub fn total_loss(
    parts: LossParts,
    lambda: f64,
    step: u64,
    epoch: u64,
    counts: (usize, usize, usize),
) -> (f64, StepRecord) {
    let total = parts.box_loss + parts.mask_loss + lambda * parts.con_loss;
    let (n_base, n_novel, n_skipped) = counts;
    (
        total,
        StepRecord {
            step,
            epoch,
            loss_total: total,
            loss_box: parts.box_loss,
            loss_mask: parts.mask_loss,
            loss_con: parts.con_loss,
            lambda,
            n_base,
            n_novel,
            n_skipped,
        },
    )
}

/// Where a proposal's contrastive partition comes from.
#[derive(Debug, Clone, Copy)]
pub enum PartitionInput<'a> {
    Mask(&'a Mask),
    Cam(&'a [f32]),
}

/// A proposal taking part in the contrastive loss: its index within the
/// batch and the partition source.
#[derive(Debug, Clone, Copy)]
pub struct ContrastTarget<'a> {
    pub index: usize,
    pub input: PartitionInput<'a>,
}

#[derive(Debug, Clone)]
pub struct ContrastOutcome {
    pub breakdown: LossBreakdown,
    /// Gradient of the (unweighted) contrastive loss w.r.t. the projected
    /// map of the whole batch.
    pub d_projected: Tensor,
    pub n_skipped: usize,
    /// Batch indices of proposals that contributed keys.
    pub used: Vec<usize>,
    pub keysets: Vec<KeySets>,
    pub partitions: Vec<Partition>,
}

/// Partition, mine and evaluate the contrastive loss over `targets`, with
/// its gradient w.r.t. `z` (the batch's projected maps, `N × R × R × C`).
pub fn contrastive_step<R: Rng + ?Sized>(
    z: &Tensor,
    targets: &[ContrastTarget<'_>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ContrastOutcome> {
    let lattice = Lattice::new(z.h, z.w)?;
    let mut d_projected = Tensor::zeros(z.n, z.h, z.w, z.c);
    let mut maps = Vec::new();
    let mut partitions = Vec::new();
    let mut keysets = Vec::new();
    let mut used = Vec::new();
    let mut n_skipped = 0;

    for t in targets {
        let map = ProjectedMap::new(lattice, z.c, z.sample(t.index).to_vec())?;
        let mined = match t.input {
            PartitionInput::Mask(m) => partition_from_mask(m).and_then(|p| {
                let b = extract_boundary(m)?;
                let k = mine_keys_base(&map, &p, &b, cfg.sigma, rng)?;
                Ok((p, k))
            }),
            PartitionInput::Cam(a) => partition_from_cam(a, lattice, cfg.delta).and_then(|p| {
                let k = mine_keys_novel(&map, &p, cfg.sigma, rng)?;
                Ok((p, k))
            }),
        };
        match mined {
            Ok((p, k)) => {
                maps.push(map);
                partitions.push(p);
                keysets.push(k);
                used.push(t.index);
            }
            Err(Error::EmptyPartitionSide { .. }) | Err(Error::SingleValuedMask) => n_skipped += 1,
            Err(e) => return Err(e),
        }
    }

    if used.is_empty() {
        return Ok(ContrastOutcome {
            breakdown: LossBreakdown::default(),
            d_projected,
            n_skipped,
            used,
            keysets,
            partitions,
        });
    }

    let query_sets: Vec<_> = if cfg.query_sharing {
        let pairs: Vec<_> = maps.iter().zip(&partitions).collect();
        vec![compute_shared_queries(&pairs)?]
    } else {
        maps.iter()
            .zip(&partitions)
            .map(|(m, p)| compute_shared_queries(&[(m, p)]))
            .collect::<Result<_>>()?
    };
    let queries: Vec<_> = query_sets
        .iter()
        .map(|q| (q.q_fg.as_slice(), q.q_bg.as_slice()))
        .collect();
    let views: Vec<FourKeys<'_, f32>> = keysets.iter().map(KeySets::view).collect();
    let loss = batch_loss(
        &queries,
        &views,
        cfg.tau_easy as f32,
        cfg.tau_hard as f32,
        true,
    )?;
    let grad = loss.grad.as_ref().expect("gradient requested");

    let c = z.c;
    for (slot, (&idx, ks)) in used.iter().zip(&keysets).enumerate() {
        let out = d_projected.sample_mut(idx);
        let lists = [&ks.fg_easy, &ks.fg_hard, &ks.bg_easy, &ks.bg_hard];
        for (list, grads) in lists.iter().zip(&grad.d_keys[slot]) {
            for (&loc, g) in list.locs.iter().zip(grads) {
                let o = lattice.index(loc) * c;
                for (d, v) in out[o..o + c].iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }

    if cfg.query_gradient == QueryGradient::Flow {
        // each query is the mean over its proposals of per-side means
        let n_shared = used.len() as f32;
        for (slot, (&idx, p)) in used.iter().zip(&partitions).enumerate() {
            let (qi, share) = if cfg.query_sharing { (0, n_shared) } else { (slot, 1.0) };
            let (dq_fg, dq_bg) = &grad.d_queries[qi];
            let out = d_projected.sample_mut(idx);
            for (side, dq) in [(&p.fg, dq_fg), (&p.bg, dq_bg)] {
                let scale = 1.0 / (share * side.len() as f32);
                for &loc in side {
                    let o = lattice.index(loc) * c;
                    for (d, v) in out[o..o + c].iter_mut().zip(dq) {
                        *d += v * scale;
                    }
                }
            }
        }
    }

    Ok(ContrastOutcome {
        breakdown: loss.breakdown(),
        d_projected,
        n_skipped,
        used,
        keysets,
        partitions,
    })
}

/// Everything a training step produced, before the optimizer update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub contrast: Option<ContrastOutcome>,
}

/// Stack RoI crops into an `N × R × R × 3` tensor.
pub fn crops_tensor(samples: &[&RoiSample]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let r = first.resolution;
    let mut data = Vec::with_capacity(samples.len() * r * r * 3);
    for s in samples {
        if s.resolution != r {
            return Err(Error::Shape("mixed RoI resolutions in batch".into()));
        }
        data.extend_from_slice(&s.crop);
    }
    Tensor::from_vec(samples.len(), r, r, 3, data)
}

/// Forward, losses and backward for one batch; gradients are left in the
/// model's parameters.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    batch: &[&RoiSample],
    cfg: &TrainConfig,
    lambda: f64,
    step: u64,
    epoch: u64,
    rng: &mut R,
) -> Result<StepOutput> {
    let crops = crops_tensor(batch)?;
    let classes: Vec<usize> = batch.iter().map(|s| s.category_id).collect();
    let fwd = model.forward_train(crops, &classes)?;

    let (box_loss, d_class_logits) =
        softmax_cross_entropy(&fwd.class_logits, model.cfg.num_classes, &classes);

    let r = batch[0].resolution;
    let pixels = r * r;
    let n_base = batch.iter().filter(|s| s.is_base).count();
    let n_novel = batch.len() - n_base;
    let mut d_mask_logits = Tensor::zeros(batch.len(), r, r, 1);
    let mut mask_loss = 0.0;
    if n_base > 0 {
        let scale = 1.0 / n_base as f64;
        for (i, s) in batch.iter().enumerate().filter(|(_, s)| s.is_base) {
            let gt = s
                .gt_mask()
                .ok_or_else(|| Error::MissingMask(format!("base RoI {}/{}", s.scene_id, s.instance)))?;
            let (l, g) = bce_with_logits(fwd.mask_logits.0.sample(i), &gt.data, scale);
            mask_loss += l * scale;
            d_mask_logits.sample_mut(i).copy_from_slice(&g);
        }
    }
    debug_assert_eq!(d_mask_logits.sample(0).len(), pixels);

    let mut contrast = None;
    let mut con_loss = 0.0;
    let mut d_projected = None;
    let mut n_skipped = 0;
    if model.cfg.use_cl {
        let z = fwd.projected().expect("contrastive head enabled");
        let mut targets = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            if !cfg.supervision.admits(s.is_base) {
                continue;
            }
            // novel masks are only consulted when the gate allows it
            let input = if s.mask_available() {
                match s.gt_mask() {
                    Some(m) => PartitionInput::Mask(m),
                    None => PartitionInput::Cam(fwd.cam_map.sample(i)),
                }
            } else {
                PartitionInput::Cam(fwd.cam_map.sample(i))
            };
            targets.push(ContrastTarget { index: i, input });
        }
        let outcome = contrastive_step(z, &targets, cfg, rng)?;
        con_loss = outcome.breakdown.total;
        n_skipped = outcome.n_skipped;
        let mut dz = outcome.d_projected.clone();
        let w = lambda as f32;
        dz.data.iter_mut().for_each(|v| *v *= w);
        d_projected = Some(dz);
        contrast = Some(outcome);
    }

    let (total, record) = total_loss(
        LossParts {
            box_loss,
            mask_loss,
            con_loss,
        },
        lambda,
        step,
        epoch,
        (n_base, n_novel, n_skipped),
    );
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "box {box_loss} mask {mask_loss} con {con_loss}; RoIs {:?}",
                batch.iter().map(|s| (s.scene_id, s.instance)).collect::<Vec<_>>()
            ),
        });
    }

    model.zero_grad();
    model.backward(
        &fwd,
        OutputGrads {
            d_class_logits,
            d_mask_logits,
            d_projected,
        },
    )?;
    Ok(StepOutput { record, contrast })
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalReport>,
    pub audit_trips: usize,
    pub final_checkpoint: Option<PathBuf>,
}

/// Options that do not change the optimization itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory for metrics, evaluations and checkpoints.
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint (its config must match `cfg`'s model).
    pub resume: Option<Checkpoint>,
    /// Print a progress line per epoch.
    pub verbose: bool,
}

pub fn build_optimizer(cfg: &TrainConfig) -> Optimizer {
    match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay),
        OptimizerKind::Adam => Optimizer::adam(cfg.learning_rate, cfg.weight_decay),
    }
}

/// RoIs of the training split for one epoch: fresh box jitter, random
/// horizontal flips, shuffled, and gated so novel masks stay hidden.
pub fn epoch_samples(
    dataset: &Dataset,
    cfg: &TrainConfig,
    epoch: u64,
    audit: &AccessAudit,
) -> Result<Vec<RoiSample>> {
    let mut rng: DataRng = rng_from_seed(derive_seed(cfg.seed, TAG_EPOCH, epoch));
    let samples = extract_split(&dataset.train, cfg.roi_jitter, cfg, &mut rng)?;
    let mut out: Vec<RoiSample> = samples
        .into_iter()
        .map(|s| {
            let s = if cfg.hflip && rng.gen_bool(0.5) {
                s.flipped_horizontal()
            } else {
                s
            };
            s.into_training(audit, cfg.oracle_novel_masks)
        })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size) as u64
}

fn write_diagnostic(out: &Path, step: u64, batch: &[&RoiSample], err: &Error) {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: u64,
        error: String,
        rois: Vec<(usize, usize, &'a str, bool)>,
    }
    let dump = Dump {
        step,
        error: err.to_string(),
        rois: batch
            .iter()
            .map(|s| (s.scene_id, s.instance, s.category.name(), s.is_base))
            .collect(),
    };
    let path = out.join(format!("nonfinite_step_{step}.json"));
    if let Ok(json) = serde_json::to_string_pretty(&dump) {
        let _ = fs::write(path, json);
    }
}

/// Train a model on `dataset.train`, evaluating on `dataset.val` after each
/// epoch when configured.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let audit = AccessAudit::new();
    let model_cfg = ModelConfig::from(cfg);
    let (mut model, mut optimizer, start_step) = match &opts.resume {
        Some(ck) => {
            if ModelConfig::from(&ck.config) != model_cfg {
                return Err(Error::Config("checkpoint architecture differs from config".into()));
            }
            let opt = ck.optimizer.clone().unwrap_or_else(|| build_optimizer(cfg));
            (ck.model()?, opt, ck.step)
        }
        None => (
            Model::new(model_cfg, &mut rng_from_seed(derive_seed(cfg.seed, TAG_INIT, 0))),
            build_optimizer(cfg),
            0,
        ),
    };

    let mut metrics: Option<BufWriter<File>> = None;
    let mut eval_log: Option<BufWriter<File>> = None;
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(out.join("config.toml"), cfg.to_toml_string())
            .map_err(|e| Error::io(out.join("config.toml"), e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = out.join(name);
            let f = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        metrics = Some(open("metrics.jsonl")?);
        eval_log = Some(open("eval.jsonl")?);
    }

    let first = epoch_samples(dataset, cfg, 0, &audit)?;
    if first.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_epoch = steps_per_epoch(first.len(), cfg.batch_size);
    let mut total_steps = per_epoch * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps as u64).max(1);
    }

    let val = if cfg.eval_every_epoch {
        extract_split(&dataset.val, 0.0, cfg, &mut rng_from_seed(0))?
    } else {
        Vec::new()
    };

    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut step = start_step;
    let mut epoch = step / per_epoch;
    let mut samples = first;
    while step < total_steps {
        if epoch > 0 {
            samples = epoch_samples(dataset, cfg, epoch, &audit)?;
        }
        let skip = (step - epoch * per_epoch) as usize * cfg.batch_size;
        for chunk in samples[skip.min(samples.len())..].chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let batch: Vec<&RoiSample> = chunk.iter().collect();
            let lambda = lambda_schedule(step, total_steps, cfg);
            let mut rng = rng_from_seed(derive_seed(cfg.seed, TAG_MINING, step));
            let out = match train_step(&mut model, &batch, cfg, lambda, step, epoch, &mut rng) {
                Ok(o) => o,
                Err(e) => {
                    if let (Error::NonFinite { .. }, Some(dir)) = (&e, &opts.out) {
                        write_diagnostic(dir, step, &batch, &e);
                    }
                    return Err(e);
                }
            };
            let grads_finite = model.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
            if !grads_finite {
                let e = Error::NonFinite {
                    step,
                    detail: "non-finite parameter gradient".into(),
                };
                if let Some(dir) = &opts.out {
                    write_diagnostic(dir, step, &batch, &e);
                }
                return Err(e);
            }
            optimizer.step(&mut model.params_mut());
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &out.record)?;
                w.write_all(b"\n").map_err(|e| Error::io("metrics.jsonl", e))?;
            }
            records.push(out.record);
            step += 1;
            if let (Some(dir), true) = (&opts.out, cfg.checkpoint_every > 0) {
                if step % cfg.checkpoint_every as u64 == 0 {
                    Checkpoint::capture(&model, cfg, step, Some(&optimizer))
                        .save(&dir.join(format!("checkpoint_step_{step}.json")))?;
                }
            }
        }
        let epoch_done = step == (epoch + 1) * per_epoch || step >= total_steps;
        if epoch_done && cfg.eval_every_epoch && !val.is_empty() {
            let report = evaluate_model(&model, &val, cfg)?;
            if opts.verbose {
                eprintln!(
                    "epoch {epoch}: step {step} novel mIoU {:.2} base mIoU {:.2}",
                    report.novel.miou, report.base.miou
                );
            }
            if let Some(w) = eval_log.as_mut() {
                #[derive(Serialize)]
                struct EpochEval<'a> {
                    epoch: u64,
                    step: u64,
                    report: &'a EvalReport,
                }
                serde_json::to_writer(
                    &mut *w,
                    &EpochEval {
                        epoch,
                        step,
                        report: &report,
                    },
                )?;
                w.write_all(b"\n").map_err(|e| Error::io("eval.jsonl", e))?;
            }
            evals.push(report);
        }
        epoch += 1;
    }

    for w in [metrics.as_mut(), eval_log.as_mut()].into_iter().flatten() {
        w.flush().map_err(|e| Error::io("metrics", e))?;
    }
    let final_checkpoint = match &opts.out {
        Some(dir) => {
            let p = dir.join("checkpoint_final.json");
            Checkpoint::capture(&model, cfg, step, Some(&optimizer)).save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        records,
        evals,
        audit_trips: audit.trips(),
        final_checkpoint,
    })
}
