//! Video-level evaluation, the component-toggle study, the radius
//! sensitivity sweep, and embedding export.
//!
//! A video's prediction is the argmax of its clips' averaged probability
//! vectors. Reports carry the confusion matrix so the headline accuracy is
//! always recomputable as `trace / total`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::model::{ActionModel, ModelConfig};
use crate::synthdata::ClipFile;
use crate::trainer::{eval_clip_offsets, sample_clip_eval, train, LoadedDataset, TrainConfig};
use crate::{Error, Real, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"PTVE";

/// Mean the clip probability vectors, then argmax; ties go to the lowest
/// class index. Each vector must sum to 1 within 1e-5.
pub fn aggregate_video(clip_probs: &[Vec<Real>]) -> Result<usize> {
    let first = clip_probs
        .first()
        .ok_or_else(|| Error::Geometry("aggregate_video: no clip probabilities".into()))?;
    let classes = first.len();
    let mut mean = vec![0.0; classes];
    for probs in clip_probs {
        if probs.len() != classes {
            return Err(Error::Geometry(format!(
                "aggregate_video: clip vector length {} != {classes}",
                probs.len()
            )));
        }
        let sum: Real = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Geometry(format!(
                "aggregate_video: clip probabilities sum to {sum}, not 1"
            )));
        }
        for (m, &p) in mean.iter_mut().zip(probs) {
            *m += p;
        }
    }
    let n = clip_probs.len() as Real;
    let mut best = 0;
    let mut best_v = Real::NEG_INFINITY;
    for (i, m) in mean.iter().enumerate() {
        let v = m / n;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    Ok(best)
}

/// Evaluation result over one split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Fraction of videos classified correctly.
    pub accuracy: Real,
    pub per_class_accuracy: Vec<Real>,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<(usize, usize)>, num_classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for &(label, pred) in &predictions {
            confusion[label][pred] += 1;
        }
        let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        let trace: usize = (0..num_classes).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 { 0.0 } else { confusion[i][i] as Real / n as Real }
            })
            .collect();
        EvalReport {
            accuracy: if total == 0 { 0.0 } else { trace as Real / total as Real },
            per_class_accuracy,
            confusion,
            predictions,
        }
    }

    /// `trace(confusion) / sum(confusion)`; must equal `accuracy`.
    pub fn accuracy_from_confusion(&self) -> Real {
        let total: usize = self.confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        let trace: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        if total == 0 { 0.0 } else { trace as Real / total as Real }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "overall_accuracy\t{:.4}", self.accuracy).map_err(|e| Error::io(path, e))?;
        for (i, acc) in self.per_class_accuracy.iter().enumerate() {
            writeln!(w, "class_{i}_accuracy\t{acc:.4}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "confusion").map_err(|e| Error::io(path, e))?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", cells.join("\t")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Evaluate a model over `(clip, label)` videos: deterministic clip crops,
/// averaged probabilities, one prediction per video.
pub fn evaluate(
    model: &ActionModel,
    videos: &[(ClipFile, usize)],
    frames: usize,
    points: usize,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(videos.len());
    for (clip, label) in videos {
        let probs = video_probabilities(model, clip, frames, points)?;
        predictions.push((*label, aggregate_video(&probs)?));
    }
    Ok(EvalReport::from_predictions(predictions, model.cfg.num_classes))
}

/// Per-clip fused probability vectors for one video.
pub fn video_probabilities(
    model: &ActionModel,
    clip: &ClipFile,
    frames: usize,
    points: usize,
) -> Result<Vec<Vec<Real>>> {
    eval_clip_offsets(clip.frames.len(), frames)
        .into_iter()
        .map(|offset| {
            let sampled = sample_clip_eval(clip, frames, points, offset)?;
            model.clip_probabilities(&sampled)
        })
        .collect()
}

/// One row of the component study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub layered: bool,
    pub mns: bool,
    pub eeq: bool,
    pub accuracy: Option<Real>,
    /// Present when the variant failed to train.
    pub failure: Option<String>,
    pub seed: u64,
}

/// The five canonical toggle combinations, weakest to strongest.
pub const ABLATION_GRID: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

/// Train and evaluate each toggle combination under the same seed and
/// budget. A variant that fails to train is reported, not dropped.
pub fn run_ablation(
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &LoadedDataset,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let cells: Vec<(bool, bool, bool)> = ABLATION_GRID.to_vec();
    let run_cell = |&(layered, mns, eeq): &(bool, bool, bool)| -> AblationRow {
        let cfg = ModelConfig { layered, mns, eeq, ..base_model.clone() };
        match train_variant(&cfg, train_cfg, data) {
            Ok(acc) => AblationRow { layered, mns, eeq, accuracy: Some(acc), failure: None, seed: train_cfg.seed },
            Err(e) => AblationRow { layered, mns, eeq, accuracy: None, failure: Some(e.to_string()), seed: train_cfg.seed },
        }
    };
    Ok(run_parallel(&cells, workers, run_cell))
}

/// One cell of the radius sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub radius_scale: Real,
    pub eeq: bool,
    pub accuracy: Option<Real>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub variance_eeq_on: Real,
    pub variance_eeq_off: Real,
}

pub const SWEEP_RADII: [Real; 6] = [0.1, 0.2, 0.5, 1.0, 1.5, 2.0];

/// Train one model per (radius, eeq) cell with matched seeds; report
/// accuracies and the population variance per row. Radii scale every
/// level's default radius by `r / 0.2`.
pub fn radius_sweep(
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &LoadedDataset,
    workers: usize,
) -> Result<SweepReport> {
    let mut cells_spec = Vec::new();
    for &eeq in &[false, true] {
        for &r in &SWEEP_RADII {
            cells_spec.push((r, eeq));
        }
    }
    let run_cell = |&(r, eeq): &(Real, bool)| -> SweepCell {
        let scale = r / 0.2;
        let mut cfg = ModelConfig { eeq, ..base_model.clone() };
        cfg.radii = [
            base_model.radii[0] * scale,
            base_model.radii[1] * scale,
            base_model.radii[2] * scale,
        ];
        match train_variant(&cfg, train_cfg, data) {
            Ok(acc) => SweepCell { radius_scale: r, eeq, accuracy: Some(acc), failure: None },
            Err(e) => SweepCell { radius_scale: r, eeq, accuracy: None, failure: Some(e.to_string()) },
        }
    };
    let cells = run_parallel(&cells_spec, workers, run_cell);

    let variance = |eeq: bool| -> Real {
        let accs: Vec<Real> = cells
            .iter()
            .filter(|c| c.eeq == eeq)
            .filter_map(|c| c.accuracy)
            .collect();
        population_variance(&accs)
    };
    Ok(SweepReport { variance_eeq_on: variance(true), variance_eeq_off: variance(false), cells })
}

/// Population variance (the per-row dispersion figure of the sweep).
pub fn population_variance(values: &[Real]) -> Real {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n
}

fn train_variant(cfg: &ModelConfig, train_cfg: &TrainConfig, data: &LoadedDataset) -> Result<Real> {
    let mut model = ActionModel::new(cfg.clone(), train_cfg.seed)?;
    let outcome = train(&mut model, data, train_cfg, None)?;
    Ok(outcome.smoothed_accuracy)
}

fn run_parallel<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build();
        match pool {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(&f).collect(),
        }
    } else {
        items.iter().map(&f).collect()
    }
}

/// Write per-video pooled pre-head features with labels: magic `PTVE`,
/// version u32, row count u32, feature width u32, then per row a label u32
/// and `width` little-endian f32 values. Returns the row count.
pub fn export_embeddings(
    model: &ActionModel,
    videos: &[(ClipFile, usize)],
    frames: usize,
    points: usize,
    path: &Path,
) -> Result<usize> {
    let width = model.embedding_width();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&EMBEDDING_MAGIC).map_err(|e| Error::io(path, e))?;
    for v in [1u32, videos.len() as u32, width as u32] {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    for (clip, label) in videos {
        // Mean of per-clip pooled features across the eval crops.
        let offsets = eval_clip_offsets(clip.frames.len(), frames);
        let mut mean = vec![0.0 as Real; width];
        for &offset in &offsets {
            let sampled = sample_clip_eval(clip, frames, points, offset)?;
            let emb = model.clip_embedding(&sampled)?;
            for (m, e) in mean.iter_mut().zip(&emb) {
                *m += e;
            }
        }
        for m in &mut mean {
            *m /= offsets.len() as Real;
        }
        w.write_all(&(*label as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        for v in &mean {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(videos.len())
}

/// Read back an embedding dump: `(label, features)` rows.
pub fn read_embeddings(path: &Path) -> Result<Vec<(u32, Vec<f32>)>> {
    use std::io::Read;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::data(path, format!("bad embedding magic {magic:?}")));
    }
    let mut buf = [0u8; 4];
    let mut next_u32 = |r: &mut std::io::BufReader<File>| -> Result<u32> {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(buf))
    };
    let version = next_u32(&mut r)?;
    if version != 1 {
        return Err(Error::data(path, format!("unsupported embedding version {version}")));
    }
    let rows = next_u32(&mut r)? as usize;
    let width = next_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let label = next_u32(&mut r)?;
        let mut features = vec![0f32; width];
        let mut raw = vec![0u8; width * 4];
        r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        for (f, c) in features.iter_mut().zip(raw.chunks_exact(4)) {
            *f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        out.push((label, features));
    }
    Ok(out)
}

/// Checkpoint a trained model's parameters (convenience used by drivers).
pub fn save_model(model: &ActionModel, path: &Path) -> Result<()> {
    model.params.save(path)
}

/// Write a machine-readable `key=value` summary file.
pub fn write_summary(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (k, v) in pairs {
        writeln!(w, "{k}={v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
