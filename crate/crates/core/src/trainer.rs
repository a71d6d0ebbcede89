//! Clip sampling, SGD with a stepped learning-rate schedule, and the
//! training loop with per-epoch metrics logging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{evaluate, EvalReport};
use crate::model::ActionModel;
use crate::sampling::FrameCloud;
use crate::synthdata::{read_clip, ClipFile, Manifest, Split};
use crate::tensor::{ParamId, ParamStore, Tape};
use crate::{Error, Real, Result};

/// Optimization schedule. The learning rate follows
/// `base_lr * decay^(number of milestones <= epoch)`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: Real,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: Real,
    pub momentum: Real,
    pub batch_size: usize,
    /// Frames per training clip (T).
    pub clip_frames: usize,
    /// Points per frame after subsampling (N).
    pub points_per_frame: usize,
    pub seed: u64,
    /// Stop once test accuracy reaches this value, if set.
    pub target_accuracy: Option<Real>,
    /// Evaluate every this many epochs (and always on the last).
    pub eval_every: usize,
    /// Learning-rate multiplier for the metric log-scales. They receive
    /// gradients only through the soft neighbor weights, a far weaker
    /// signal than the dense weights see, so their group runs hotter.
    pub omega_lr_scale: Real,
    /// The reported final accuracy averages this many trailing
    /// evaluations; smooths single-epoch endpoint noise in studies that
    /// compare runs.
    pub final_eval_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            base_lr: 0.01,
            lr_milestones: vec![20, 30],
            lr_decay: 0.1,
            momentum: 0.9,
            batch_size: 8,
            clip_frames: 8,
            points_per_frame: 512,
            seed: 0,
            target_accuracy: None,
            eval_every: 1,
            omega_lr_scale: 6.0,
            final_eval_window: 1,
        }
    }
}

impl TrainConfig {
    /// Closed-form learning rate at an epoch.
    pub fn lr_at(&self, epoch: usize) -> Real {
        let hits = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.lr_decay.powi(hits as i32)
    }
}

/// Symmetric bound on the metric log-scales: scales stay within
/// `[1/16, 16]`, a generous envelope around any plausible anisotropy.
pub const OMEGA_LOG_BOUND: Real = 2.772589; // ln 16

/// SGD with momentum; one velocity buffer per parameter, with optional
/// per-parameter learning-rate multipliers and projection bounds
/// (parameter groups).
pub struct Sgd {
    pub momentum: Real,
    velocity: Vec<Vec<Real>>,
    lr_scale: Vec<Real>,
    clamp: Vec<Option<Real>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: Real) -> Self {
        let velocity = params.iter().map(|(_, e)| vec![0.0; e.numel()]).collect();
        let lr_scale = vec![1.0; params.len()];
        let clamp = vec![None; params.len()];
        Sgd { momentum, velocity, lr_scale, clamp }
    }

    /// Scale the learning rate of one parameter relative to the global rate.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: Real) {
        self.lr_scale[id.index()] = scale;
    }

    /// Project one parameter into `[-bound, bound]` after each step.
    pub fn set_clamp(&mut self, id: ParamId, bound: Real) {
        self.clamp[id.index()] = Some(bound);
    }

    /// `v = mu v + g; p -= lr v` for every provided gradient, followed by
    /// the configured projections.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Vec<Real>)], lr: Real) {
        for (id, grad) in grads {
            let v = &mut self.velocity[id.index()];
            let rate = lr * self.lr_scale[id.index()];
            let bound = self.clamp[id.index()];
            let data = params.values_mut(*id);
            for ((p, v), &g) in data.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                *v = self.momentum * *v + g;
                *p -= rate * *v;
                if let Some(b) = bound {
                    *p = p.clamp(-b, b);
                }
            }
        }
    }
}

/// Training-time clip sampling: a random temporal crop of `frames`
/// consecutive frames (wrapping when the video is shorter) and a random
/// point subsample per frame.
pub fn sample_clip_train(
    clip: &ClipFile,
    frames: usize,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameCloud>> {
    let len = clip.frames.len();
    if len == 0 {
        return Err(Error::Geometry("sample_clip: empty video".into()));
    }
    let start = if len > frames { rng.gen_range(0..=(len - frames)) } else { 0 };
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let src = &clip.frames[(start + t) % len];
        let chosen = subsample_random(src.len(), points, rng);
        out.push(frame_from(src, &chosen, t)?);
    }
    Ok(out)
}

/// Deterministic eval-time crops: non-overlapping offsets covering the
/// video, with a final overlapping window when the length is not a
/// multiple of `frames`.
pub fn eval_clip_offsets(video_len: usize, frames: usize) -> Vec<usize> {
    if video_len <= frames {
        return vec![0];
    }
    let mut offsets: Vec<usize> = (0..).map(|i| i * frames).take_while(|o| o + frames <= video_len).collect();
    let last = video_len - frames;
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    offsets
}

/// Eval-time clip at a fixed offset with an evenly strided point subsample.
pub fn sample_clip_eval(
    clip: &ClipFile,
    frames: usize,
    points: usize,
    offset: usize,
) -> Result<Vec<FrameCloud>> {
    let len = clip.frames.len();
    if len == 0 {
        return Err(Error::Geometry("sample_clip: empty video".into()));
    }
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let src = &clip.frames[(offset + t) % len];
        let chosen = subsample_even(src.len(), points);
        out.push(frame_from(src, &chosen, t)?);
    }
    Ok(out)
}

fn frame_from(src: &[[f32; 3]], idx: &[usize], t: usize) -> Result<FrameCloud> {
    FrameCloud::new(
        idx.iter().map(|&i| [src[i][0] as Real, src[i][1] as Real, src[i][2] as Real]).collect(),
        t,
    )
}

/// `count` distinct indices without replacement when possible, repeating
/// uniformly otherwise.
fn subsample_random(available: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if available == count {
        return (0..available).collect();
    }
    if available > count {
        let mut idx: Vec<usize> = (0..available).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        return idx;
    }
    (0..count).map(|_| rng.gen_range(0..available)).collect()
}

fn subsample_even(available: usize, count: usize) -> Vec<usize> {
    if available == count {
        return (0..available).collect();
    }
    (0..count).map(|i| (i * available) / count).collect()
}

/// In-memory dataset: manifests resolved and clip payloads loaded once.
pub struct LoadedDataset {
    pub train: Vec<(ClipFile, usize)>,
    pub test: Vec<(ClipFile, usize)>,
    pub num_classes: usize,
}

impl LoadedDataset {
    pub fn load(root: &Path, manifest: &Manifest) -> Result<Self> {
        let load_split = |split: Split| -> Result<Vec<(ClipFile, usize)>> {
            manifest
                .split_entries(split)
                .map(|e| {
                    let clip = read_clip(&root.join(&e.path))?;
                    Ok((clip, e.class_id as usize))
                })
                .collect()
        };
        let train = load_split(Split::Train)?;
        let test = load_split(Split::Test)?;
        let num_classes = manifest
            .entries
            .iter()
            .map(|e| e.class_id as usize + 1)
            .max()
            .unwrap_or(0);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("dataset has an empty split".into()));
        }
        Ok(LoadedDataset { train, test, num_classes })
    }
}

/// One optimization step over a batch of sampled clips. Returns the batch
/// loss (softmax cross-entropy on the fused logits).
pub fn train_step(
    model: &mut ActionModel,
    sgd: &mut Sgd,
    batch: &[(&ClipFile, usize, Vec<FrameCloud>)],
    lr: Real,
) -> Result<Real> {
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for (_, label, clip) in batch {
        let out = model.forward(&mut tape, clip)?;
        let log_probs = tape.log_softmax_rows(out.fused)?;
        let picked = tape.pick_per_row(log_probs, &[*label])?;
        let neg = tape.scale(picked, -1.0)?;
        losses.push(tape.reshape(neg, &[1, 1])?);
    }
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.mean_all(stacked)?;
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        let ids: Vec<String> = batch
            .iter()
            .map(|(c, label, _)| format!("class {} subject {}", label, c.subject_id))
            .collect();
        return Err(Error::Training(format!(
            "non-finite loss {loss_value} on batch [{}]",
            ids.join(", ")
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<(ParamId, Vec<Real>)> =
        tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    sgd.step(&mut model.params, &grads, lr);
    Ok(loss_value)
}

/// One line of the metrics log.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub test_accuracy: Option<Real>,
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub final_report: EvalReport,
    /// Mean of the trailing `final_eval_window` test accuracies.
    pub smoothed_accuracy: Real,
    pub epochs_run: usize,
}

/// Full training loop. Writes `epoch\tlr\ttrain_loss\ttest_acc` per epoch
/// when a log path is given; evaluation runs every `eval_every` epochs and
/// after the final epoch.
pub fn train(
    model: &mut ActionModel,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    log_path: Option<&PathBuf>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261696e));
    let mut sgd = Sgd::new(&model.params, cfg.momentum);
    sgd.set_lr_scale(model.omega_param(), cfg.omega_lr_scale);
    // Projected step for the metric scales: momentum on the hot group can
    // otherwise integrate small one-sided gradients into runaway
    // anisotropy once neighborhoods thin out and the loss goes flat.
    sgd.set_clamp(model.omega_param(), OMEGA_LOG_BOUND);
    let mut metrics = Vec::new();
    let mut log = match log_path {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0;
    let mut last_report = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (clip, label) = &data.train[i];
                let sampled =
                    sample_clip_train(clip, cfg.clip_frames, cfg.points_per_frame, &mut rng)?;
                batch.push((clip, *label, sampled));
            }
            let batch_ref: Vec<(&ClipFile, usize, Vec<FrameCloud>)> =
                batch.into_iter().map(|(c, l, s)| (&*c, l, s)).collect();
            epoch_loss += train_step(model, &mut sgd, &batch_ref, lr)?;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as Real;
        epochs_run = epoch + 1;

        let evaluate_now =
            (epoch + 1) % cfg.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs;
        let test_accuracy = if evaluate_now {
            let report = evaluate(model, &data.test, cfg.clip_frames, cfg.points_per_frame)?;
            let acc = report.accuracy;
            last_report = Some(report);
            Some(acc)
        } else {
            None
        };

        let entry = EpochMetrics { epoch, lr, train_loss, test_accuracy };
        if let Some(w) = log.as_mut() {
            let acc = entry.test_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            writeln!(w, "{}\t{:.6}\t{:.6}\t{}", entry.epoch, entry.lr, entry.train_loss, acc)
                .map_err(|e| Error::io(log_path.expect("log path present"), e))?;
        }
        metrics.push(entry);

        if let (Some(target), Some(acc)) = (cfg.target_accuracy, test_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(log_path.expect("log path present"), e))?;
    }

    let final_report = match last_report {
        Some(r) => r,
        None => evaluate(model, &data.test, cfg.clip_frames, cfg.points_per_frame)?,
    };
    let evals: Vec<Real> = metrics.iter().filter_map(|m| m.test_accuracy).collect();
    let window = cfg.final_eval_window.max(1).min(evals.len().max(1));
    let smoothed_accuracy = if evals.is_empty() {
        final_report.accuracy
    } else {
        evals[evals.len() - window..].iter().sum::<Real>() / window as Real
    };
    Ok(TrainOutcome { metrics, final_report, smoothed_accuracy, epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_closed_form() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(19), 0.01);
        assert!((cfg.lr_at(20) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at(25) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at(30) - 0.0001).abs() < 1e-9);
        assert!((cfg.lr_at(35) - 0.0001).abs() < 1e-9);
        for e in 0..50 {
            let hits = [20usize, 30].iter().filter(|&&m| m <= e).count();
            let want = 0.01 * (0.1 as Real).powi(hits as i32);
            assert!((cfg.lr_at(e) - want).abs() < 1e-12, "epoch {e}");
        }
    }

    #[test]
    fn eval_offsets_cover_the_video() {
        assert_eq!(eval_clip_offsets(32, 8), vec![0, 8, 16, 24]);
        assert_eq!(eval_clip_offsets(30, 8), vec![0, 8, 16, 22]);
        assert_eq!(eval_clip_offsets(8, 8), vec![0]);
        assert_eq!(eval_clip_offsets(5, 8), vec![0]);
    }

    #[test]
    fn exact_fit_sampling_is_identity() {
        let clip = ClipFile {
            class_id: 0,
            subject_id: 0,
            frames: (0..4)
                .map(|t| (0..6).map(|i| [t as f32, i as f32, 0.0]).collect())
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = sample_clip_train(&clip, 4, 6, &mut rng).unwrap();
        for (t, frame) in frames.iter().enumerate() {
            let want: Vec<[Real; 3]> =
                (0..6).map(|i| [t as Real, i as Real, 0.0]).collect();
            assert_eq!(frame.points, want);
        }
    }

    #[test]
    fn sgd_without_momentum_is_plain_gradient_descent() {
        let mut params = ParamStore::new();
        let id = params.add("w", &[1], vec![2.0], true);
        let mut sgd = Sgd::new(&params, 0.0);

        // loss = w^2, grad = 2w; two hand-computed steps at lr 0.1.
        for _ in 0..2 {
            let w = params.values(id)[0];
            sgd.step(&mut params, &[(id, vec![2.0 * w])], 0.1);
        }
        // w0 = 2.0 -> w1 = 2.0 - 0.1*4.0 = 1.6 -> w2 = 1.6 - 0.1*3.2 = 1.28
        let w = params.values(id)[0];
        assert!((w - 1.28).abs() < 1e-6, "{w}");
    }

    #[test]
    fn zero_gradient_batch_leaves_parameters_unchanged() {
        let mut params = ParamStore::new();
        let id = params.add("w", &[3], vec![1.0, -2.0, 0.5], true);
        let before = params.values(id).to_vec();
        let mut sgd = Sgd::new(&params, 0.9);
        sgd.step(&mut params, &[(id, vec![0.0; 3])], 0.5);
        assert_eq!(params.values(id), &before[..]);
    }
}
