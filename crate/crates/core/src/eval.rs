//! Mask metrics over ground-truth-box RoIs, ablation sweeps and figures.
//!
//! Detection is out of scope, so every GT instance yields exactly one
//! prediction (its RoI) and AP measures segmentation quality alone: a
//! prediction is a true positive at threshold `t` iff its mask IoU is at
//! least `t`. Predictions are ranked by mean foreground confidence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{extract_split, generate_dataset, rng_from_seed, Dataset, Mask, RoiSample};
use crate::error::{Error, Result};
use crate::heads::Model;
use crate::nn::sigmoid;
use crate::partition::{partition_from_cam, Lattice};
use crate::training::{crops_tensor, train, RunOptions};

pub const MASK_THRESHOLD: f32 = 0.5;
/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const EVAL_BATCH: usize = 32;

pub const REPORT_NOTE: &str = "AP is computed over ground-truth-box RoIs (one prediction per \
instance, no detector), so it measures mask quality only.";

/// Binarize mask logits at `sigmoid(x) ≥ threshold`.
pub fn binarize(logits: &[f32], threshold: f32) -> Vec<bool> {
    logits.iter().map(|&x| sigmoid(x) >= threshold).collect()
}

/// IoU of two binary masks; two empty masks have IoU 1.
pub fn binary_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU between thresholded mask logits and a GT mask.
pub fn mask_iou(pred: &[f32], gt: &Mask, threshold: f32) -> Result<f64> {
    if pred.len() != gt.data.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, mask {}",
            pred.len(),
            gt.data.len()
        )));
    }
    Ok(binary_iou(&binarize(pred, threshold), &gt.data))
}

/// Ranking score: mean probability over predicted-foreground pixels.
pub fn mask_score(pred: &[f32]) -> f64 {
    let probs: Vec<f64> = pred
        .iter()
        .map(|&x| sigmoid(x) as f64)
        .filter(|&p| p >= MASK_THRESHOLD as f64)
        .collect();
    if probs.is_empty() {
        0.0
    } else {
        probs.iter().sum::<f64>() / probs.len() as f64
    }
}

/// Average precision with 101-point interpolated precision, for
/// predictions `(score, is_true_positive)` against `n_gt` instances.
pub fn average_precision(preds: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable: ties keep input order
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(preds.len());
    let mut precision = Vec::with_capacity(preds.len());
    for (rank, &i) in order.iter().enumerate() {
        tp += preds[i].1 as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub is_base: bool,
    pub count: usize,
    pub miou: f64,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Averages over the categories of one split (percent scale).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub miou: f64,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub categories: Vec<CategoryReport>,
    pub base: SplitSummary,
    pub novel: SplitSummary,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", REPORT_NOTE);
        let _ = writeln!(s, "# seed {}", self.seed);
        let _ = writeln!(
            s,
            "{:<10} {:<6} {:>6} {:>7} {:>7} {:>7} {:>7}",
            "category", "split", "count", "mIoU", "mAP", "AP50", "AP75"
        );
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{:<10} {:<6} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                c.name,
                if c.is_base { "base" } else { "novel" },
                c.count,
                c.miou,
                c.map,
                c.ap50,
                c.ap75
            );
        }
        for (label, b) in [("base", &self.base), ("novel", &self.novel)] {
            let _ = writeln!(
                s,
                "{:<10} {:<6} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                "[mean]", label, b.count, b.miou, b.map, b.ap50, b.ap75
            );
        }
        s
    }
}

/// Per-RoI outcome used by the report and the figures.
#[derive(Debug, Clone)]
pub struct RoiPrediction {
    pub category_id: usize,
    pub iou: f64,
    pub score: f64,
    pub logits: Vec<f32>,
    pub cam: Vec<f32>,
}

/// Run the model over `samples` (CAM from the predicted class).
pub fn predict_rois(model: &Model, samples: &[RoiSample]) -> Result<Vec<RoiPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&RoiSample> = chunk.iter().collect();
        let crops = crops_tensor(&refs)?;
        let (_, cam, mask) = model.predict(&crops, None)?;
        for (i, s) in chunk.iter().enumerate() {
            let gt = s.gt_mask().ok_or_else(|| {
                Error::MissingMask(format!("scene {} instance {}", s.scene_id, s.instance))
            })?;
            let logits = mask.0.sample(i).to_vec();
            out.push(RoiPrediction {
                category_id: s.category_id,
                iou: mask_iou(&logits, gt, MASK_THRESHOLD)?,
                score: mask_score(&logits),
                logits,
                cam: cam.sample(i).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Aggregate per-RoI IoUs and scores into an [`EvalReport`].
pub fn report_from_predictions(preds: &[RoiPrediction], cfg: &TrainConfig) -> EvalReport {
    let cats = cfg.categories();
    let mut categories = Vec::new();
    for (id, kind) in cats.iter().enumerate() {
        let mine: Vec<&RoiPrediction> = preds.iter().filter(|p| p.category_id == id).collect();
        let ap_at = |t: f64| {
            let pairs: Vec<(f64, bool)> = mine.iter().map(|p| (p.score, p.iou >= t)).collect();
            100.0 * average_precision(&pairs, mine.len())
        };
        let aps: Vec<f64> = IOU_THRESHOLDS.iter().map(|&t| ap_at(t)).collect();
        let miou = if mine.is_empty() {
            0.0
        } else {
            100.0 * mine.iter().map(|p| p.iou).sum::<f64>() / mine.len() as f64
        };
        categories.push(CategoryReport {
            name: kind.name().to_string(),
            is_base: cfg.is_base(*kind),
            count: mine.len(),
            miou,
            map: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
        });
    }
    let summarize = |base: bool| {
        let sel: Vec<&CategoryReport> = categories
            .iter()
            .filter(|c| c.is_base == base && c.count > 0)
            .collect();
        if sel.is_empty() {
            return SplitSummary::default();
        }
        let n = sel.len() as f64;
        SplitSummary {
            count: sel.iter().map(|c| c.count).sum(),
            miou: sel.iter().map(|c| c.miou).sum::<f64>() / n,
            map: sel.iter().map(|c| c.map).sum::<f64>() / n,
            ap50: sel.iter().map(|c| c.ap50).sum::<f64>() / n,
            ap75: sel.iter().map(|c| c.ap75).sum::<f64>() / n,
        }
    };
    let base = summarize(true);
    let novel = summarize(false);
    EvalReport {
        note: REPORT_NOTE.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        categories,
        base,
        novel,
    }
}

/// Evaluate an in-memory model on prepared (open-gated) RoIs.
pub fn evaluate_model(model: &Model, samples: &[RoiSample], cfg: &TrainConfig) -> Result<EvalReport> {
    let preds = predict_rois(model, samples)?;
    Ok(report_from_predictions(&preds, cfg))
}

/// Evaluate a checkpoint on the validation split of `dataset`.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<EvalReport> {
    let cfg = &checkpoint.config;
    let model = checkpoint.model()?;
    let samples = extract_split(&dataset.val, 0.0, cfg, &mut rng_from_seed(0))?;
    evaluate_model(&model, &samples, cfg)
}

/// Axes a sweep may vary.
pub const ABLATION_AXES: [&str; 8] = [
    "use_cl",
    "use_cam",
    "supervision",
    "query_sharing",
    "sigma",
    "tau_easy",
    "encoder_blocks",
    "oracle_novel_masks",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub seed: u64,
    pub report: EvalReport,
    pub audit_trips: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub axis: String,
    pub runs: Vec<AblationRun>,
}

/// Mean metrics of one value of the swept axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub value: String,
    pub seeds: Vec<u64>,
    pub novel_miou: Vec<f64>,
    pub mean_novel_miou: f64,
    pub mean_novel_map: f64,
    pub mean_base_miou: f64,
}

impl AblationMatrix {
    /// One summary per value, in first-seen order.
    pub fn summaries(&self) -> Vec<AblationSummary> {
        let mut values: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.value == v).collect();
                let n = runs.len() as f64;
                AblationSummary {
                    value: v.to_string(),
                    seeds: runs.iter().map(|r| r.seed).collect(),
                    novel_miou: runs.iter().map(|r| r.report.novel.miou).collect(),
                    mean_novel_miou: runs.iter().map(|r| r.report.novel.miou).sum::<f64>() / n,
                    mean_novel_map: runs.iter().map(|r| r.report.novel.map).sum::<f64>() / n,
                    mean_base_miou: runs.iter().map(|r| r.report.base.miou).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", REPORT_NOTE);
        let _ = writeln!(s, "# axis: {}", self.axis);
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>11} {:>11} {:>10}  per-seed novel mIoU",
            "value", "seeds", "novel mIoU", "novel mAP", "base mIoU"
        );
        for sm in self.summaries() {
            let per: Vec<String> = sm.novel_miou.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>11.2} {:>11.2} {:>10.2}  {}",
                sm.value,
                sm.seeds.len(),
                sm.mean_novel_miou,
                sm.mean_novel_map,
                sm.mean_base_miou,
                per.join(" ")
            );
        }
        s
    }
}

/// Config for one cell of a sweep.
pub fn ablation_config(base: &TrainConfig, axis: &str, value: &str, seed: u64) -> Result<TrainConfig> {
    if !ABLATION_AXES.contains(&axis) {
        return Err(Error::Config(format!(
            "unknown ablation axis '{axis}' (expected one of {})",
            ABLATION_AXES.join(", ")
        )));
    }
    let mut cfg = base.clone();
    cfg.set(axis, value)?;
    cfg.seed = seed;
    Ok(cfg)
}

/// Train and evaluate every `(value, seed)` combination on one dataset.
/// With `out`, each run writes into `<out>/<axis>=<value>/seed_<seed>` and
/// the matrix is saved as `ablation.json` and `ablation.txt`.
pub fn run_ablation(
    base: &TrainConfig,
    axis: &str,
    values: &[String],
    seeds: &[u64],
    out: Option<&Path>,
    verbose: bool,
) -> Result<AblationMatrix> {
    // validate every cell before spending time on training
    for v in values {
        for &s in seeds {
            ablation_config(base, axis, v, s)?.validate()?;
        }
    }
    let dataset = generate_dataset(base, base.data_seed)?;
    let mut runs = Vec::new();
    for v in values {
        for &seed in seeds {
            let cfg = ablation_config(base, axis, v, seed)?;
            let run_cfg = TrainConfig {
                eval_every_epoch: false,
                ..cfg.clone()
            };
            let dir = out.map(|o| o.join(format!("{axis}={v}")).join(format!("seed_{seed}")));
            let outcome = train(
                &run_cfg,
                &dataset,
                &RunOptions {
                    out: dir.clone(),
                    resume: None,
                    verbose,
                },
            )?;
            let val = extract_split(&dataset.val, 0.0, &cfg, &mut rng_from_seed(0))?;
            let report = evaluate_model(&outcome.model, &val, &cfg)?;
            if let Some(d) = &dir {
                write_report(&report, d)?;
            }
            if verbose {
                eprintln!("{axis}={v} seed {seed}: novel mIoU {:.2}", report.novel.miou);
            }
            runs.push(AblationRun {
                value: v.clone(),
                seed,
                report,
                audit_trips: outcome.audit_trips,
            });
        }
    }
    let matrix = AblationMatrix {
        axis: axis.to_string(),
        runs,
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let json = o.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(&matrix)?).map_err(|e| Error::io(&json, e))?;
        let txt = o.join("ablation.txt");
        fs::write(&txt, matrix.to_text()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(matrix)
}

/// Write `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))
}

// ---------------------------------------------------------------------------
// Figures

const CELL_SCALE: u32 = 4;
const PAD: u32 = 2;
const GRID_ROWS: usize = 8;

fn gray(v: f32) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn heat(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([
        (255.0 * (1.5 * v).min(1.0)) as u8,
        (255.0 * (2.0 * v - 0.5).clamp(0.0, 1.0)) as u8,
        (255.0 * (4.0 * v - 3.0).clamp(0.0, 1.0)) as u8,
    ])
}

fn blit(canvas: &mut RgbImage, x0: u32, y0: u32, r: usize, pixel: impl Fn(usize, usize) -> Rgb<u8>) {
    for i in 0..r {
        for j in 0..r {
            let p = pixel(i, j);
            for dy in 0..CELL_SCALE {
                for dx in 0..CELL_SCALE {
                    canvas.put_pixel(
                        x0 + j as u32 * CELL_SCALE + dx,
                        y0 + i as u32 * CELL_SCALE + dy,
                        p,
                    );
                }
            }
        }
    }
}

/// Grid with one row per RoI and columns: input crop, CAM, CAM partition
/// (black background, gray unassigned, white foreground), predicted mask,
/// GT mask.
pub fn render_grid(samples: &[&RoiSample], preds: &[&RoiPrediction], delta: f64) -> Result<RgbImage> {
    let r = samples.first().map_or(1, |s| s.resolution);
    let cell = r as u32 * CELL_SCALE;
    let cols = 5u32;
    let rows = samples.len().max(1) as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * (cell + PAD) + PAD,
        rows * (cell + PAD) + PAD,
        Rgb([40, 40, 60]),
    );
    let lattice = Lattice::new(r, r)?;
    for (row, (s, p)) in samples.iter().zip(preds).enumerate() {
        let y0 = PAD + row as u32 * (cell + PAD);
        let x = |col: u32| PAD + col * (cell + PAD);
        blit(&mut canvas, x(0), y0, r, |i, j| {
            let o = (i * r + j) * 3;
            Rgb([
                (s.crop[o] * 255.0) as u8,
                (s.crop[o + 1] * 255.0) as u8,
                (s.crop[o + 2] * 255.0) as u8,
            ])
        });
        blit(&mut canvas, x(1), y0, r, |i, j| heat(p.cam[i * r + j]));
        let levels = match partition_from_cam(&p.cam, lattice, delta) {
            Ok(part) => part.render(),
            Err(_) => vec![128u8; r * r],
        };
        blit(&mut canvas, x(2), y0, r, |i, j| gray(levels[i * r + j] as f32 / 255.0));
        blit(&mut canvas, x(3), y0, r, |i, j| gray(sigmoid(p.logits[i * r + j])));
        if let Some(gt) = s.gt_mask() {
            blit(&mut canvas, x(4), y0, r, |i, j| gray(gt.get(i, j) as u8 as f32));
        }
    }
    Ok(canvas)
}

/// Horizontal bars of novel mIoU (dark) and novel mAP (light) per config,
/// ordered by mAP, highest first. Returns the image and the row labels.
pub fn render_ablation_chart(matrix: &AblationMatrix) -> (RgbImage, Vec<String>) {
    let mut rows = matrix.summaries();
    rows.sort_by(|a, b| b.mean_novel_map.total_cmp(&a.mean_novel_map));
    let bar_h = 14u32;
    let width = 420u32;
    let height = rows.len().max(1) as u32 * (2 * bar_h + 8) + 8;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut labels = Vec::new();
    for (i, sm) in rows.iter().enumerate() {
        let y = 8 + i as u32 * (2 * bar_h + 8);
        for (k, (v, color)) in [
            (sm.mean_novel_miou, Rgb([40, 90, 160])),
            (sm.mean_novel_map, Rgb([140, 190, 230])),
        ]
        .into_iter()
        .enumerate()
        {
            let len = ((v.clamp(0.0, 100.0) / 100.0) * (width - 16) as f64) as u32;
            for yy in 0..bar_h {
                for xx in 0..len {
                    img.put_pixel(8 + xx, y + k as u32 * bar_h + yy, color);
                }
            }
        }
        labels.push(format!(
            "{}={}: novel mIoU {:.2}, novel mAP {:.2}",
            matrix.axis, sm.value, sm.mean_novel_miou, sm.mean_novel_map
        ));
    }
    (img, labels)
}

/// Write figures for whatever `input` holds: a training directory with
/// `checkpoint_final.json` gives one grid per split (base / novel); a
/// sweep directory with `ablation.json` gives a bar chart. Missing inputs
/// are skipped with a warning. Returns the files written.
pub fn emit_plots(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();

    let ck_path = input.join("checkpoint_final.json");
    if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let cfg = &ck.config;
        let model = ck.model()?;
        let dataset = generate_dataset(cfg, cfg.data_seed)?;
        let samples = extract_split(&dataset.val, 0.0, cfg, &mut rng_from_seed(0))?;
        let preds = predict_rois(&model, &samples)?;
        for (label, base) in [("base", true), ("novel", false)] {
            let pick: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].is_base == base)
                .take(GRID_ROWS)
                .collect();
            if pick.is_empty() {
                eprintln!("warning: no {label} RoIs to plot");
                continue;
            }
            let s: Vec<&RoiSample> = pick.iter().map(|&i| &samples[i]).collect();
            let p: Vec<&RoiPrediction> = pick.iter().map(|&i| &preds[i]).collect();
            let path = out.join(format!("grid_{label}.png"));
            render_grid(&s, &p, cfg.delta)?.save(&path)?;
            written.push(path);
        }
    } else {
        eprintln!("warning: {} not found, skipping mask grids", ck_path.display());
    }

    let ab_path = input.join("ablation.json");
    if ab_path.exists() {
        let text = fs::read_to_string(&ab_path).map_err(|e| Error::io(&ab_path, e))?;
        let matrix: AblationMatrix = serde_json::from_str(&text)?;
        let (img, labels) = render_ablation_chart(&matrix);
        let path = out.join(format!("ablation_{}.png", matrix.axis));
        img.save(&path)?;
        written.push(path);
        let legend = out.join(format!("ablation_{}.txt", matrix.axis));
        fs::write(&legend, labels.join("\n") + "\n").map_err(|e| Error::io(&legend, e))?;
        written.push(legend);
    } else {
        eprintln!("warning: {} not found, skipping ablation chart", ab_path.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(r: usize, r0: usize, c0: usize, side: usize) -> Mask {
        Mask::from_fn(r, r, |i, j| (r0..r0 + side).contains(&i) && (c0..c0 + side).contains(&j))
    }

    fn logits_of(m: &Mask) -> Vec<f32> {
        m.data.iter().map(|&b| if b { f32::INFINITY } else { f32::NEG_INFINITY }).collect()
    }

    #[test]
    fn iou_examples() {
        let gt = square(8, 2, 2, 4);
        assert_eq!(mask_iou(&logits_of(&gt), &gt, 0.5).unwrap(), 1.0);
        assert_eq!(mask_iou(&[f32::NEG_INFINITY; 64], &gt, 0.5).unwrap(), 0.0);
        // shifted by half a side: overlap 8, union 24
        let shifted = square(8, 2, 4, 4);
        let iou = mask_iou(&logits_of(&shifted), &gt, 0.5).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        let empty = Mask::new(8, 8);
        assert_eq!(mask_iou(&[-5.0; 64], &empty, 0.5).unwrap(), 1.0);
        assert!(mask_iou(&[0.0; 63], &gt, 0.5).is_err());
    }

    #[test]
    fn ap_of_perfect_and_useless_predictions() {
        let all_tp: Vec<(f64, bool)> = (0..5).map(|i| (i as f64, true)).collect();
        assert!((average_precision(&all_tp, 5) - 1.0).abs() < 1e-12);
        let none: Vec<(f64, bool)> = (0..5).map(|i| (i as f64, false)).collect();
        assert_eq!(average_precision(&none, 5), 0.0);
        // one TP ranked first of two: precision 1 up to recall 0.5
        let half = [(0.9, true), (0.1, false)];
        assert!((average_precision(&half, 2) - 51.0 / 101.0).abs() < 1e-12);
    }

    fn pred(cat: usize, iou: f64, score: f64) -> RoiPrediction {
        RoiPrediction {
            category_id: cat,
            iou,
            score,
            logits: Vec::new(),
            cam: Vec::new(),
        }
    }

    #[test]
    fn perfect_masks_score_one_hundred() {
        let cfg = TrainConfig::default();
        let preds: Vec<RoiPrediction> = (0..8).flat_map(|c| (0..3).map(move |_| pred(c, 1.0, 0.9))).collect();
        let r = report_from_predictions(&preds, &cfg);
        for b in [&r.base, &r.novel] {
            assert_eq!((b.miou, b.map, b.ap50, b.ap75), (100.0, 100.0, 100.0, 100.0));
        }
        assert_eq!(r.categories.iter().filter(|c| c.is_base).count(), 4);
    }

    #[test]
    fn novel_block_only_sees_novel_categories() {
        let cfg = TrainConfig::default();
        let mut preds = vec![pred(0, 1.0, 0.5), pred(1, 1.0, 0.5)];
        preds.push(pred(5, 0.2, 0.5));
        let r = report_from_predictions(&preds, &cfg);
        assert_eq!(r.novel.count, 1);
        assert!((r.novel.miou - 20.0).abs() < 1e-9);
        assert_eq!(r.base.miou, 100.0);
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            ablation_config(&cfg, "learning_rate", "0.1", 0),
            Err(Error::Config(_))
        ));
        let c = ablation_config(&cfg, "supervision", "base", 3).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.supervision, crate::config::Supervision::Base);
    }

    #[test]
    fn chart_orders_by_map() {
        let cfg = TrainConfig::default();
        let mk = |v: &str, m: f64| {
            let mut report = report_from_predictions(&[pred(5, 0.5, 0.5)], &cfg);
            report.novel.map = m;
            AblationRun {
                value: v.into(),
                seed: 0,
                report,
                audit_trips: 0,
            }
        };
        let matrix = AblationMatrix {
            axis: "sigma".into(),
            runs: vec![mk("0.1", 10.0), mk("0.3", 30.0), mk("0.6", 20.0)],
        };
        let (_, labels) = render_ablation_chart(&matrix);
        assert!(labels[0].contains("=0.3"));
        assert!(labels[1].contains("=0.6"));
        assert!(labels[2].contains("=0.1"));
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in proptest::collection::vec(any::<bool>(), 36),
                            b in proptest::collection::vec(any::<bool>(), 36)) {
            prop_assert_eq!(binary_iou(&a, &b), binary_iou(&b, &a));
        }

        #[test]
        fn map_bounded_by_ap50(ious in proptest::collection::vec(0.0f64..=1.0, 1..30),
                               scores in proptest::collection::vec(0.0f64..=1.0, 30)) {
            let cfg = TrainConfig::default();
            let preds: Vec<RoiPrediction> = ious
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (&iou, &s))| pred(i % 8, iou, s))
                .collect();
            let r = report_from_predictions(&preds, &cfg);
            for c in &r.categories {
                prop_assert!(c.map <= c.ap50 + 1e-9);
                prop_assert!(c.ap75 <= c.ap50 + 1e-9);
                prop_assert!((0.0..=100.0).contains(&c.map));
            }
        }
    }
}
