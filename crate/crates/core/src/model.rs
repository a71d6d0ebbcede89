//! Dual-branch action recognizer over multilevel point tubes.
//!
//! Per level: anchors are grouped into spatiotemporal tubes, embedded by a
//! shared pointwise MLP with max-pooling over neighbor slots, enriched with
//! a learned linear positional term, then run through a pre-norm
//! transformer encoder. The dense level feeds the human-action branch
//! (global max pooling); the two sparse levels feed the kinematic branch
//! (global average pooling, averaged across levels). Branch logits fuse by
//! arithmetic mean.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::neighborhood::{group_tube, EllipseParams, SourceFrame, TubeGroup};
use crate::sampling::{default_layer_specs, mns, mns_global, FrameCloud, LayerSpec, MnsOutput};
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};
use crate::{Error, Real, Result};

/// Architecture and component toggles. The three toggles implement the
/// component study: `layered` off collapses to the dense-level max-pool
/// head alone, `mns` off samples every level by independent global FPS,
/// `eeq` off freezes the metric scales at their initial values.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Token widths per level; must be non-decreasing.
    pub widths: [usize; 3],
    /// Encoder depth per level.
    pub depth: usize,
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Neighbor slots per tube.
    pub k_max: usize,
    /// Temporal window half-width, in source-sequence steps.
    pub temporal_radius: usize,
    /// Per-level query/sampling radii in meters.
    pub radii: [Real; 3],
    /// Max candidates per parent anchor during multilevel sampling.
    pub candidate_k: usize,
    pub temporal_stride: usize,
    pub layered: bool,
    pub mns: bool,
    pub eeq: bool,
    pub omega_init: [Real; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            widths: [64, 128, 256],
            depth: 2,
            heads: 4,
            ff_mult: 2,
            k_max: 32,
            temporal_radius: 1,
            radii: [0.2, 0.4, 0.8],
            candidate_k: 32,
            temporal_stride: 2,
            layered: true,
            mns: true,
            eeq: true,
            omega_init: [1.0, 1.0, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("model: need at least 2 classes".into()));
        }
        if self.widths[0] > self.widths[1] || self.widths[1] > self.widths[2] {
            return Err(Error::Config(format!(
                "model: widths must be non-decreasing, got {:?}",
                self.widths
            )));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if self.heads == 0 || w % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model: width {w} of level {} not divisible by {} heads",
                    i + 1,
                    self.heads
                )));
            }
        }
        if self.k_max == 0 {
            return Err(Error::Config("model: k_max must be at least 1".into()));
        }
        if self.omega_init.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config(format!(
                "model: omega_init must be positive, got {:?}",
                self.omega_init
            )));
        }
        Ok(())
    }

    pub fn layer_specs(&self, points_per_frame: usize) -> [LayerSpec; 3] {
        default_layer_specs(points_per_frame, self.radii, self.candidate_k, self.temporal_stride)
    }
}

/// Which branch a score vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Human,
    Kinematic,
    Fused,
}

/// Class scores (logits or probabilities) tagged with their branch.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub values: Vec<Real>,
    pub branch: Branch,
}

impl ScoreVector {
    pub fn new(values: Vec<Real>, branch: Branch) -> Self {
        ScoreVector { values, branch }
    }

    /// Predicted class: argmax, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = Real::NEG_INFINITY;
        for (i, &v) in self.values.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }
}

/// Elementwise mean of the two branch score vectors.
pub fn fuse(human: &ScoreVector, kinematic: &ScoreVector) -> Result<ScoreVector> {
    if human.values.len() != kinematic.values.len() {
        return Err(Error::Geometry(format!(
            "fuse: branch lengths differ ({} vs {})",
            human.values.len(),
            kinematic.values.len()
        )));
    }
    let values = human
        .values
        .iter()
        .zip(&kinematic.values)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    Ok(ScoreVector::new(values, Branch::Fused))
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct TubeIds {
    lin1: LinearIds,
    lin2: LinearIds,
    pos: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnHeadIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    heads: Vec<AttnHeadIds>,
    out: LinearIds,
    ln2: (ParamId, ParamId),
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    hidden: LinearIds,
    out: LinearIds,
}

/// Fixed geometry for one clip: the sampled hierarchy, the per-level tube
/// groups, and the per-group soft-weight kernel references, ready for the
/// differentiable phase.
pub struct PreparedClip {
    pub hierarchy: MnsOutput,
    pub level_groups: Vec<Vec<TubeGroup>>,
    /// Per level, one `-1/ref^2` kernel coefficient per group.
    pub level_kernel_inv: Vec<Vec<Real>>,
    pub pos_ref: [Real; 3],
}

/// Everything the forward pass produces for one clip. Logit tensors have
/// shape `[1, num_classes]`; `pooled` holds the concatenated pre-head
/// pooled features.
pub struct ForwardOutput {
    pub fused: TensorId,
    pub human: TensorId,
    pub kinematic: Option<TensorId>,
    pub pooled: TensorId,
}

/// The recognizer: configuration plus the parameter store that owns all
/// trainable weights, including the metric log-scales.
#[derive(Clone)]
pub struct ActionModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    tubes: [TubeIds; 3],
    encoders: [Vec<BlockIds>; 3],
    head_human: HeadIds,
    head_kin: [HeadIds; 2],
    log_omega: ParamId,
}

pub const OMEGA_PARAM: &str = "eeq.log_omega";

impl ActionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let tube_inputs = [
            4 + 1,
            4 + 1 + cfg.widths[0],
            4 + 1 + cfg.widths[1],
        ];
        let tubes = [0, 1, 2].map(|l| {
            let c = cfg.widths[l];
            TubeIds {
                lin1: linear(&mut params, &mut rng, &format!("tube{}.lin1", l + 1), tube_inputs[l], c),
                lin2: linear(&mut params, &mut rng, &format!("tube{}.lin2", l + 1), c, c),
                pos: {
                    let data = init_normal(&mut rng, 4 * c, 0.02);
                    params.add(&format!("tube{}.pos.w", l + 1), &[4, c], data, true)
                },
            }
        });

        let encoders = [0, 1, 2].map(|l| {
            let c = cfg.widths[l];
            let dh = c / cfg.heads;
            (0..cfg.depth)
                .map(|b| {
                    let p = format!("enc{}.b{b}", l + 1);
                    BlockIds {
                        ln1: layer_norm_params(&mut params, &format!("{p}.ln1"), c),
                        heads: (0..cfg.heads)
                            .map(|h| AttnHeadIds {
                                wq: matrix(&mut params, &mut rng, &format!("{p}.h{h}.wq"), c, dh),
                                wk: matrix(&mut params, &mut rng, &format!("{p}.h{h}.wk"), c, dh),
                                wv: matrix(&mut params, &mut rng, &format!("{p}.h{h}.wv"), c, dh),
                            })
                            .collect(),
                        out: linear(&mut params, &mut rng, &format!("{p}.attn_out"), c, c),
                        ln2: layer_norm_params(&mut params, &format!("{p}.ln2"), c),
                        ff1: linear(&mut params, &mut rng, &format!("{p}.ff1"), c, c * cfg.ff_mult),
                        ff2: linear(&mut params, &mut rng, &format!("{p}.ff2"), c * cfg.ff_mult, c),
                    }
                })
                .collect::<Vec<_>>()
        });

        let head_human = head(&mut params, &mut rng, "head.human", cfg.widths[0], cfg.num_classes);
        let head_kin = [
            head(&mut params, &mut rng, "head.kin2", cfg.widths[1], cfg.num_classes),
            head(&mut params, &mut rng, "head.kin3", cfg.widths[2], cfg.num_classes),
        ];

        let log_init: Vec<Real> = cfg.omega_init.iter().map(|v| v.ln()).collect();
        let log_omega = params.add(OMEGA_PARAM, &[3], log_init, cfg.eeq);

        Ok(ActionModel { cfg, params, tubes, encoders, head_human, head_kin, log_omega })
    }

    /// Snapshot of the metric scales currently held by the parameter store.
    pub fn omega(&self) -> EllipseParams {
        let v = self.params.values(self.log_omega);
        EllipseParams::from_log(v[0], v[1], v[2], self.cfg.eeq)
    }

    pub fn omega_param(&self) -> ParamId {
        self.log_omega
    }

    /// Run the hierarchy for a clip under the configured sampling mode.
    pub fn sample_hierarchy(&self, clip: &[FrameCloud]) -> Result<MnsOutput> {
        let n = clip.iter().map(|f| f.len()).min().unwrap_or(0);
        let specs = self.cfg.layer_specs(n);
        if self.cfg.mns {
            mns(clip, &specs)
        } else {
            mns_global(clip, &specs)
        }
    }

    /// Full forward pass for one clip. Tube embeddings cascade through the
    /// hierarchy (each level gathers the previous level's features); the
    /// per-level transformers and pooling live inside the two branches.
    pub fn forward(&self, tape: &mut Tape, clip: &[FrameCloud]) -> Result<ForwardOutput> {
        let prepared = self.prepare(clip)?;
        self.forward_prepared(tape, &prepared)
    }

    /// Geometry phase: hierarchy sampling plus tube grouping under the
    /// current metric snapshot. Discrete by construction; the gradient
    /// path to the metric scales runs through the soft weights in
    /// [`ActionModel::forward_prepared`], never through these sets.
    pub fn prepare(&self, clip: &[FrameCloud]) -> Result<PreparedClip> {
        let hierarchy = self.sample_hierarchy(clip)?;
        let omega = self.omega();

        // Level 1 gathers raw points; deeper levels gather the previous
        // level's anchors.
        let mut source: Vec<SourceFrame> = clip
            .iter()
            .map(|f| SourceFrame { frame_index: f.frame_index, points: f.points.clone() })
            .collect();

        let deepest = if self.cfg.layered { 3 } else { 1 };
        let mut level_groups = Vec::with_capacity(deepest);
        let mut level_kernel_inv = Vec::with_capacity(deepest);
        for level in 0..deepest {
            let anchors = &hierarchy.levels[level];
            let groups = group_tube(
                anchors,
                &source,
                self.cfg.radii[level],
                self.cfg.temporal_radius,
                self.cfg.k_max,
                &omega,
            )?;
            level_kernel_inv.push(self.kernel_references(&groups, self.cfg.radii[level], &omega));
            level_groups.push(groups);
            source = anchors
                .frames
                .iter()
                .map(|f| SourceFrame {
                    frame_index: f.frame_index,
                    points: f.anchors.iter().map(|a| a.coords).collect(),
                })
                .collect();
        }

        // Positional inputs are centered on the first frame's centroid;
        // a per-clip rigid shift that keeps all relative motion intact
        // while bounding the magnitudes the positional map sees.
        Ok(PreparedClip { hierarchy, level_groups, level_kernel_inv, pos_ref: clip_reference(clip) })
    }

    /// Differentiable phase over a fixed grouping.
    pub fn forward_prepared(&self, tape: &mut Tape, prepared: &PreparedClip) -> Result<ForwardOutput> {
        let deepest = if self.cfg.layered { 3 } else { 1 };
        let mut features: Vec<TensorId> = Vec::with_capacity(deepest);
        for level in 0..deepest {
            let prev = (level > 0).then(|| {
                let stride = prepared.hierarchy.levels[level - 1].frames[0].anchors.len();
                (features[level - 1], stride)
            });
            features.push(self.embed_tubes(
                tape,
                level,
                &prepared.level_groups[level],
                &prepared.level_kernel_inv[level],
                prev,
                prepared.pos_ref,
            )?);
        }

        let (human, gmp) = self.human_branch(tape, features[0])?;
        if !self.cfg.layered {
            return Ok(ForwardOutput { fused: human, human, kinematic: None, pooled: gmp });
        }

        let (kinematic, gap2, gap3) = self.kinematic_branch(tape, features[1], features[2])?;
        let fused_sum = tape.add(human, kinematic)?;
        let fused = tape.scale(fused_sum, 0.5)?;
        let pooled = tape.concat_cols(&[gmp, gap2, gap3])?;

        Ok(ForwardOutput { fused, human, kinematic: Some(kinematic), pooled })
    }

    /// Human-action branch: encoder, global max pooling over tokens, MLP
    /// head. Returns `(logits, pooled)`.
    pub fn human_branch(&self, tape: &mut Tape, f1: TensorId) -> Result<(TensorId, TensorId)> {
        let encoded = self.encode_level(tape, 0, f1)?;
        let gmp = tape.max_rows(encoded)?;
        let gmp = tape.reshape(gmp, &[1, self.cfg.widths[0]])?;
        let logits = self.mlp_head(tape, self.head_human, gmp)?;
        Ok((logits, gmp))
    }

    /// Kinematic branch: per-level encoder, global average pooling, MLP
    /// heads, averaged across the two sparse levels. Returns
    /// `(logits, pooled_level2, pooled_level3)`.
    pub fn kinematic_branch(
        &self,
        tape: &mut Tape,
        f2: TensorId,
        f3: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let enc2 = self.encode_level(tape, 1, f2)?;
        let gap2 = tape.mean_rows(enc2)?;
        let gap2 = tape.reshape(gap2, &[1, self.cfg.widths[1]])?;
        let score2 = self.mlp_head(tape, self.head_kin[0], gap2)?;

        let enc3 = self.encode_level(tape, 2, f3)?;
        let gap3 = tape.mean_rows(enc3)?;
        let gap3 = tape.reshape(gap3, &[1, self.cfg.widths[2]])?;
        let score3 = self.mlp_head(tape, self.head_kin[1], gap3)?;

        let sum = tape.add(score2, score3)?;
        let logits = tape.scale(sum, 0.5)?;
        Ok((logits, gap2, gap3))
    }

    /// Pointwise MLP over tube slots, max-pooled per anchor, plus the
    /// learned positional term. Soft neighbor weights `exp(-d^2/r^2)` under
    /// the current metric carry the gradient path to the log-scales; the
    /// discrete membership itself is a gradient stop.
    ///
    /// Per-group soft-weight kernel coefficients `-1/ref^2`. The reference
    /// is the query radius, tightened to the group's own extent under the
    /// given metric snapshot when the radius is far larger than the data,
    /// so the weights stay discriminative (and the metric scales
    /// trainable) at oversized radii. Gradient-stopped, like the
    /// membership itself.
    pub fn kernel_references(&self, groups: &[TubeGroup], r: Real, omega: &EllipseParams) -> Vec<Real> {
        groups
            .iter()
            .map(|g| {
                let mut extent: Real = 0.0;
                for n in &g.neighbors {
                    if n.valid {
                        let d2 = omega.alpha() * n.offset[0] * n.offset[0]
                            + omega.beta() * n.offset[1] * n.offset[1]
                            + omega.gamma() * n.offset[2] * n.offset[2];
                        extent = extent.max(d2);
                    }
                }
                -1.0 / (r * r).min(extent).max(1e-12)
            })
            .collect()
    }

    /// `prev` supplies the previous level's token matrix together with its
    /// per-frame anchor count, so neighbor `(frame, index)` pairs can be
    /// mapped to token rows. `group_kernel_inv` comes from
    /// [`ActionModel::kernel_references`]; `pos_ref` is subtracted from
    /// anchor positions before the positional map (time is scaled to a
    /// ~unit range).
    pub fn embed_tubes(
        &self,
        tape: &mut Tape,
        level: usize,
        groups: &[TubeGroup],
        group_kernel_inv: &[Real],
        prev: Option<(TensorId, usize)>,
        pos_ref: [Real; 3],
    ) -> Result<TensorId> {
        let k = self.cfg.k_max;
        let rows = groups.len() * k;
        let _ = self.cfg.radii[level];

        let mut offsets = Vec::with_capacity(rows * 4);
        let mut sq_spatial = Vec::with_capacity(rows * 3);
        let mut anchor_coords = Vec::with_capacity(groups.len() * 4);
        let mut kernel_inv = Vec::with_capacity(rows);
        for (g, &inv) in groups.iter().zip(group_kernel_inv) {
            debug_assert_eq!(g.neighbors.len(), k);
            anchor_coords.extend_from_slice(&[
                g.anchor[0] - pos_ref[0],
                g.anchor[1] - pos_ref[1],
                g.anchor[2] - pos_ref[2],
                g.anchor[3] * 0.1,
            ]);
            for n in &g.neighbors {
                offsets.extend_from_slice(&n.offset);
                sq_spatial.extend_from_slice(&[
                    n.offset[0] * n.offset[0],
                    n.offset[1] * n.offset[1],
                    n.offset[2] * n.offset[2],
                ]);
                kernel_inv.push(inv);
            }
        }

        let offsets = tape.constant(&[rows, 4], offsets);
        let sq_spatial = tape.constant(&[rows, 3], sq_spatial);
        let kernel_inv = tape.constant(&[rows], kernel_inv);

        // w = exp(-(alpha dx^2 + beta dy^2 + gamma dz^2) / ref^2)
        let log_omega = tape.param(&self.params, self.log_omega);
        let omega_col = tape.exp(log_omega)?;
        let omega_col = tape.reshape(omega_col, &[3, 1])?;
        let sq_dist = tape.matmul(sq_spatial, omega_col)?;
        let neg = tape.scale_rows(sq_dist, kernel_inv)?;
        let weights = tape.exp(neg)?;

        let input = match prev {
            None => tape.concat_cols(&[offsets, weights])?,
            Some((feats, frame_stride)) => {
                let idx: Vec<usize> = groups
                    .iter()
                    .flat_map(|g| {
                        g.neighbors.iter().map(move |n| n.source_pos * frame_stride + n.index)
                    })
                    .collect();
                let gathered = tape.gather_rows(feats, &idx)?;
                let w_flat = tape.reshape(weights, &[rows])?;
                let weighted = tape.scale_rows(gathered, w_flat)?;
                tape.concat_cols(&[offsets, weights, weighted])?
            }
        };

        let h = self.linear(tape, self.tubes[level].lin1, input)?;
        let h = tape.relu(h)?;
        let h = self.linear(tape, self.tubes[level].lin2, h)?;
        let pooled = tape.max_pool_groups(h, k)?;

        let anchors = tape.constant(&[groups.len(), 4], anchor_coords);
        let pos_w = tape.param(&self.params, self.tubes[level].pos);
        let pos = tape.matmul(anchors, pos_w)?;
        Ok(tape.add(pooled, pos)?)
    }

    /// Pre-norm transformer encoder for one level; depth 0 is the identity.
    pub fn encode_level(&self, tape: &mut Tape, level: usize, tokens: TensorId) -> Result<TensorId> {
        let c = self.cfg.widths[level];
        if tape.shape(tokens)[1] != c {
            return Err(Error::Config(format!(
                "encode_level: token width {} does not match configured width {c}",
                tape.shape(tokens)[1]
            )));
        }
        let dh = c / self.cfg.heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut x = tokens;
        for block in &self.encoders[level] {
            let g1 = tape.param(&self.params, block.ln1.0);
            let b1 = tape.param(&self.params, block.ln1.1);
            let normed = tape.layer_norm(x, g1, b1, 1e-5)?;

            let mut head_outputs = Vec::with_capacity(block.heads.len());
            for h in &block.heads {
                let wq = tape.param(&self.params, h.wq);
                let wk = tape.param(&self.params, h.wk);
                let wv = tape.param(&self.params, h.wv);
                let q = tape.matmul(normed, wq)?;
                let kk = tape.matmul(normed, wk)?;
                let v = tape.matmul(normed, wv)?;
                let scores = tape.matmul_tb(q, kk)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax_rows(scores)?;
                head_outputs.push(tape.matmul(attn, v)?);
            }
            let ctx = if head_outputs.len() == 1 {
                head_outputs[0]
            } else {
                tape.concat_cols(&head_outputs)?
            };
            let proj = self.linear(tape, block.out, ctx)?;
            x = tape.add(x, proj)?;

            let g2 = tape.param(&self.params, block.ln2.0);
            let b2 = tape.param(&self.params, block.ln2.1);
            let normed = tape.layer_norm(x, g2, b2, 1e-5)?;
            let ff = self.linear(tape, block.ff1, normed)?;
            let ff = tape.relu(ff)?;
            let ff = self.linear(tape, block.ff2, ff)?;
            x = tape.add(x, ff)?;
        }
        Ok(x)
    }

    fn linear(&self, tape: &mut Tape, ids: LinearIds, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.params, ids.w);
        let b = tape.param(&self.params, ids.b);
        let prod = tape.matmul(x, w)?;
        Ok(tape.add_bias(prod, b)?)
    }

    fn mlp_head(&self, tape: &mut Tape, ids: HeadIds, x: TensorId) -> Result<TensorId> {
        let h = self.linear(tape, ids.hidden, x)?;
        let h = tape.relu(h)?;
        self.linear(tape, ids.out, h)
    }

    /// Inference: fused softmax probabilities for one clip.
    pub fn clip_probabilities(&self, clip: &[FrameCloud]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, clip)?;
        let probs = tape.softmax_rows(out.fused)?;
        Ok(tape.value(probs).to_vec())
    }

    /// Inference: fused logits for one clip.
    pub fn clip_logits(&self, clip: &[FrameCloud]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, clip)?;
        Ok(tape.value(out.fused).to_vec())
    }

    /// Pooled pre-head features for one clip.
    pub fn clip_embedding(&self, clip: &[FrameCloud]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, clip)?;
        Ok(tape.value(out.pooled).to_vec())
    }

    /// Width of the pooled pre-head feature vector.
    pub fn embedding_width(&self) -> usize {
        if self.cfg.layered {
            self.cfg.widths.iter().sum()
        } else {
            self.cfg.widths[0]
        }
    }
}

/// Centroid of the clip's first frame; the positional reference point.
pub fn clip_reference(clip: &[FrameCloud]) -> [Real; 3] {
    let first = &clip[0];
    let n = first.len() as Real;
    let mut c = [0.0; 3];
    for p in &first.points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

fn init_normal(rng: &mut ChaCha8Rng, n: usize, std: Real) -> Vec<Real> {
    (0..n).map(|_| normal_sample(rng) * std).collect()
}

/// Box-Muller standard normal; deterministic under a seeded generator.
fn normal_sample(rng: &mut ChaCha8Rng) -> Real {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (((-2.0 * u1.ln()).sqrt()) * (std::f64::consts::TAU * u2).cos()) as Real
}

fn matrix(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> ParamId {
    let std = (2.0 / rows as Real).sqrt();
    let data = init_normal(rng, rows * cols, std);
    params.add(name, &[rows, cols], data, true)
}

fn linear(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, output: usize) -> LinearIds {
    LinearIds {
        w: matrix(params, rng, &format!("{prefix}.w"), input, output),
        b: params.add(&format!("{prefix}.b"), &[output], vec![0.0; output], true),
    }
}

fn layer_norm_params(params: &mut ParamStore, prefix: &str, width: usize) -> (ParamId, ParamId) {
    (
        params.add(&format!("{prefix}.g"), &[width], vec![1.0; width], true),
        params.add(&format!("{prefix}.b"), &[width], vec![0.0; width], true),
    )
}

fn head(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, classes: usize) -> HeadIds {
    // Cold output layer: initial logits near zero, so training starts at
    // the uniform-prediction loss.
    let out_w = init_normal(rng, input * classes, 0.01);
    HeadIds {
        hidden: linear(params, rng, &format!("{prefix}.hidden"), input, input),
        out: LinearIds {
            w: params.add(&format!("{prefix}.out.w"), &[input, classes], out_w, true),
            b: params.add(&format!("{prefix}.out.b"), &[classes], vec![0.0; classes], true),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighborhood::TubeNeighbor;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            widths: [8, 8, 8],
            depth: 1,
            heads: 2,
            ff_mult: 1,
            k_max: 4,
            temporal_radius: 1,
            radii: [0.6, 1.2, 2.4],
            candidate_k: 16,
            temporal_stride: 2,
            ..ModelConfig::default()
        }
    }

    fn toy_clip(frames: usize, points: usize, seed: u64) -> Vec<FrameCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames)
            .map(|t| {
                let pts = (0..points)
                    .map(|_| {
                        [
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(0.0..1.8),
                        ]
                    })
                    .collect();
                FrameCloud::new(pts, t).unwrap()
            })
            .collect()
    }

    #[test]
    fn widths_must_be_non_decreasing() {
        let cfg = ModelConfig { widths: [16, 8, 8], ..tiny_cfg() };
        assert!(ActionModel::new(cfg, 0).is_err());
    }

    #[test]
    fn token_counts_follow_the_shape_contract() {
        let model = ActionModel::new(tiny_cfg(), 1).unwrap();
        let clip = toy_clip(8, 64, 2);
        let hierarchy = model.sample_hierarchy(&clip).unwrap();
        // T/2 frames of n/4, n/16, n/32 anchors.
        assert_eq!(hierarchy.levels[0].anchor_count(), 4 * 16);
        assert_eq!(hierarchy.levels[1].anchor_count(), 4 * 4);
        assert_eq!(hierarchy.levels[2].anchor_count(), 4 * 2);

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &clip).unwrap();
        assert_eq!(tape.shape(out.fused), &[1, 4]);
        assert_eq!(tape.shape(out.pooled), &[1, 24]);
    }

    #[test]
    fn depth_zero_encoder_is_identity() {
        let cfg = ModelConfig { depth: 0, ..tiny_cfg() };
        let model = ActionModel::new(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let tokens = tape.constant(&[5, 8], (0..40).map(|v| v as Real * 0.1).collect());
        let out = model.encode_level(&mut tape, 0, tokens).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn single_token_encoding_is_finite_and_deterministic() {
        let model = ActionModel::new(tiny_cfg(), 4).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let tokens = tape.constant(&[1, 8], (0..8).map(|v| v as Real * 0.3 - 1.0).collect());
            let out = model.encode_level(&mut tape, 0, tokens).unwrap();
            tape.value(out).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    /// Depth-1 encoder against an attention computation assembled by hand
    /// from tape primitives, reading the same weights by name.
    #[test]
    fn encoder_matches_hand_composed_attention() {
        let cfg = ModelConfig { widths: [16, 16, 16], depth: 1, heads: 2, ..tiny_cfg() };
        let model = ActionModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Real> = (0..8 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let tokens = tape.constant(&[8, 16], data.clone());
        let got = model.encode_level(&mut tape, 0, tokens).unwrap();
        let got = tape.value(got).to_vec();

        // Reference pass, written out step by step.
        let p = &model.params;
        let by = |name: &str| p.lookup(name).unwrap();
        let mut t = Tape::new();
        let x = t.constant(&[8, 16], data);
        let g1 = t.param(p, by("enc1.b0.ln1.g"));
        let b1 = t.param(p, by("enc1.b0.ln1.b"));
        let n1 = t.layer_norm(x, g1, b1, 1e-5).unwrap();
        let mut ctxs = Vec::new();
        for h in 0..2 {
            let wq = t.param(p, by(&format!("enc1.b0.h{h}.wq")));
            let wk = t.param(p, by(&format!("enc1.b0.h{h}.wk")));
            let wv = t.param(p, by(&format!("enc1.b0.h{h}.wv")));
            let q = t.matmul(n1, wq).unwrap();
            let k = t.matmul(n1, wk).unwrap();
            let v = t.matmul(n1, wv).unwrap();
            let s = t.matmul_tb(q, k).unwrap();
            let s = t.scale(s, 1.0 / (8.0 as Real).sqrt()).unwrap();
            let a = t.softmax_rows(s).unwrap();
            ctxs.push(t.matmul(a, v).unwrap());
        }
        let ctx = t.concat_cols(&ctxs).unwrap();
        let wo = t.param(p, by("enc1.b0.attn_out.w"));
        let bo = t.param(p, by("enc1.b0.attn_out.b"));
        let proj = t.matmul(ctx, wo).unwrap();
        let proj = t.add_bias(proj, bo).unwrap();
        let x = t.add(x, proj).unwrap();
        let g2 = t.param(p, by("enc1.b0.ln2.g"));
        let b2 = t.param(p, by("enc1.b0.ln2.b"));
        let n2 = t.layer_norm(x, g2, b2, 1e-5).unwrap();
        let w1 = t.param(p, by("enc1.b0.ff1.w"));
        let bb1 = t.param(p, by("enc1.b0.ff1.b"));
        let h = t.matmul(n2, w1).unwrap();
        let h = t.add_bias(h, bb1).unwrap();
        let h = t.relu(h).unwrap();
        let w2 = t.param(p, by("enc1.b0.ff2.w"));
        let bb2 = t.param(p, by("enc1.b0.ff2.b"));
        let h = t.matmul(h, w2).unwrap();
        let h = t.add_bias(h, bb2).unwrap();
        let want = t.add(x, h).unwrap();

        assert_eq!(got, t.value(want));
    }

    fn group_of(anchor: [Real; 4], neighbors: Vec<TubeNeighbor>) -> TubeGroup {
        TubeGroup { anchor, anchor_source_pos: 0, neighbors }
    }

    fn nb(offset: [Real; 4], index: usize, valid: bool) -> TubeNeighbor {
        TubeNeighbor { offset, source_pos: 0, index, valid }
    }

    #[test]
    fn tube_token_invariant_under_slot_permutation() {
        let model = ActionModel::new(tiny_cfg(), 7).unwrap();
        let slots = vec![
            nb([0.1, 0.0, 0.0, 0.0], 0, true),
            nb([0.0, 0.2, 0.0, 1.0], 1, true),
            nb([0.0, 0.0, 0.3, -1.0], 2, true),
            nb([0.05, 0.05, 0.0, 0.0], 3, true),
        ];
        let mut permuted = slots.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 2);

        let mut tape = Tape::new();
        let ga = [group_of([0.0, 0.0, 1.0, 2.0], slots)];
        let gb = [group_of([0.0, 0.0, 1.0, 2.0], permuted)];
        let ka = model.kernel_references(&ga, model.cfg.radii[0], &model.omega());
        let kb = model.kernel_references(&gb, model.cfg.radii[0], &model.omega());
        let a = model.embed_tubes(&mut tape, 0, &ga, &ka, None, [0.0; 3]).unwrap();
        let b = model.embed_tubes(&mut tape, 0, &gb, &kb, None, [0.0; 3]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn tube_token_invariant_under_duplicated_slots() {
        // Same seed, same weights; only k_max differs between the builds.
        let model4 = ActionModel::new(tiny_cfg(), 8).unwrap();
        let model8 = ActionModel::new(ModelConfig { k_max: 8, ..tiny_cfg() }, 8).unwrap();

        let slots: Vec<TubeNeighbor> = (0..4)
            .map(|i| nb([0.1 * i as Real, 0.02, 0.0, 0.0], i, true))
            .collect();
        let doubled: Vec<TubeNeighbor> =
            slots.iter().flat_map(|&n| [n, n]).collect();

        let mut tape = Tape::new();
        let ga = [group_of([0.3, 0.0, 0.9, 4.0], slots)];
        let gb = [group_of([0.3, 0.0, 0.9, 4.0], doubled)];
        let ka = model4.kernel_references(&ga, model4.cfg.radii[0], &model4.omega());
        let kb = model8.kernel_references(&gb, model8.cfg.radii[0], &model8.omega());
        let a = model4.embed_tubes(&mut tape, 0, &ga, &ka, None, [0.0; 3]).unwrap();
        let b = model8.embed_tubes(&mut tape, 0, &gb, &kb, None, [0.0; 3]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn degenerate_padded_group_is_finite() {
        let model = ActionModel::new(tiny_cfg(), 9).unwrap();
        let first = nb([0.05, -0.02, 0.01, 0.0], 2, true);
        let mut slots = vec![first];
        for _ in 0..3 {
            let mut pad = first;
            pad.valid = false;
            slots.push(pad);
        }
        let mut tape = Tape::new();
        let groups = [group_of([0.0, 0.0, 0.5, 0.0], slots)];
        let kernel = model.kernel_references(&groups, model.cfg.radii[0], &model.omega());
        let token = model.embed_tubes(&mut tape, 0, &groups, &kernel, None, [0.0; 3]).unwrap();
        assert!(tape.value(token).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gmp_and_gap_differ_on_an_outlier_token() {
        // One token dominates every channel; max pooling returns it exactly,
        // average pooling does not.
        let mut data = vec![0.0; 4 * 8];
        for c in 0..8 {
            data[2 * 8 + c] = 5.0 + c as Real;
        }
        let mut tape = Tape::new();
        let tokens = tape.constant(&[4, 8], data);
        let gmp = tape.max_rows(tokens).unwrap();
        let gap = tape.mean_rows(tokens).unwrap();
        let gmp_v = tape.value(gmp).to_vec();
        let gap_v = tape.value(gap).to_vec();
        assert_eq!(gmp_v, (0..8).map(|c| 5.0 + c as Real).collect::<Vec<_>>());
        assert_ne!(gmp_v, gap_v);
    }

    #[test]
    fn constant_tokens_make_gap_the_constant() {
        let c: Vec<Real> = (0..8).map(|i| 0.1 * i as Real).collect();
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&c);
        }
        let cfg0 = ModelConfig { depth: 0, ..tiny_cfg() };
        let model0 = ActionModel::new(cfg0, 11).unwrap();
        let mut tape = Tape::new();
        let f2 = tape.constant(&[6, 8], data.clone());
        let f3 = tape.constant(&[6, 8], data);
        let (kin, gap2, _gap3) = model0.kinematic_branch(&mut tape, f2, f3).unwrap();
        for (got, want) in tape.value(gap2).iter().zip(&c) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(tape.value(kin).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kinematic_of_identical_level_scores_is_that_score() {
        let mut tape = Tape::new();
        let s = tape.constant(&[1, 4], vec![0.3, -0.2, 1.1, 0.0]);
        let sum = tape.add(s, s).unwrap();
        let kin = tape.scale(sum, 0.5).unwrap();
        assert_eq!(tape.value(kin), tape.value(s));
    }

    #[test]
    fn human_branch_invariant_under_token_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tokens: Vec<Real> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut doubled = tokens.clone();
        doubled.extend_from_slice(&tokens);

        // Depth 0 so duplication cannot shift attention statistics.
        let cfg0 = ModelConfig { depth: 0, ..tiny_cfg() };
        let model0 = ActionModel::new(cfg0, 12).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(&[3, 8], tokens);
        let f2 = tape.constant(&[6, 8], doubled);
        let (a, _) = model0.human_branch(&mut tape, f).unwrap();
        let (b, _) = model0.human_branch(&mut tape, f2).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn fuse_is_the_arithmetic_mean() {
        let hum = ScoreVector::new(vec![0.2, 0.8], Branch::Human);
        let kin = ScoreVector::new(vec![0.6, 0.4], Branch::Kinematic);
        let fused = fuse(&hum, &kin).unwrap();
        assert_eq!(fused.values, vec![0.4, 0.6]);
        assert_eq!(fused.argmax(), 1);

        let same = fuse(&hum, &hum).unwrap();
        assert_eq!(same.values, hum.values);

        // Adding a constant to both inputs shifts the mean by it.
        let shift = |v: &[Real]| v.iter().map(|x| x + 2.5).collect::<Vec<_>>();
        let shifted = fuse(
            &ScoreVector::new(shift(&hum.values), Branch::Human),
            &ScoreVector::new(shift(&kin.values), Branch::Kinematic),
        )
        .unwrap();
        for (s, f) in shifted.values.iter().zip(&fused.values) {
            assert!((s - (f + 2.5)).abs() < 1e-6);
        }
        assert_eq!(shifted.argmax(), fused.argmax());

        let short = ScoreVector::new(vec![1.0], Branch::Kinematic);
        assert!(fuse(&hum, &short).is_err());
    }

    #[test]
    fn forward_fuses_branches_by_mean() {
        let model = ActionModel::new(tiny_cfg(), 14).unwrap();
        let clip = toy_clip(4, 64, 15);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &clip).unwrap();
        let hum = tape.value(out.human);
        let kin = tape.value(out.kinematic.unwrap());
        let fused = tape.value(out.fused);
        for ((&f, &h), &k) in fused.iter().zip(hum).zip(kin) {
            assert!((f - 0.5 * (h + k)).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let model = ActionModel::new(tiny_cfg(), 16).unwrap();
        let clip = toy_clip(4, 64, 17);
        let a = model.clip_logits(&clip).unwrap();
        let b = model.clip_logits(&clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unlayered_model_uses_the_dense_head_alone() {
        let cfg = ModelConfig { layered: false, ..tiny_cfg() };
        let model = ActionModel::new(cfg, 18).unwrap();
        let clip = toy_clip(4, 64, 19);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &clip).unwrap();
        assert!(out.kinematic.is_none());
        assert_eq!(tape.value(out.fused), tape.value(out.human));
        assert_eq!(tape.shape(out.pooled), &[1, 8]);
    }
}

#[cfg(test)]
mod omega_checkpoint_tests {
    use super::*;

    /// A checkpoint carrying the converged metric scales restores them
    /// exactly and the distance metric reflects them.
    #[test]
    fn converged_scales_load_from_checkpoint() {
        use crate::neighborhood::scaled_distance;

        let dir = std::env::temp_dir().join(format!("ptv-omega-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("converged.ptvw");

        let cfg = ModelConfig {
            num_classes: 4,
            widths: [8, 8, 8],
            depth: 0,
            heads: 1,
            ff_mult: 1,
            k_max: 4,
            ..ModelConfig::default()
        };
        let mut donor = ActionModel::new(cfg.clone(), 1).unwrap();
        let target: [Real; 3] = [3.5632, 3.6789, 2.8038];
        let logs: Vec<Real> = target.iter().map(|v| v.ln()).collect();
        let id = donor.params.lookup(OMEGA_PARAM).unwrap();
        *donor.params.values_mut(id) = logs;
        donor.params.save(&path).unwrap();

        let mut restored = ActionModel::new(cfg, 99).unwrap();
        restored.params.restore(&path).unwrap();
        let omega = restored.omega();
        for (got, want) in omega.scales().iter().zip(&target) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }

        // d((1,1,1), 0) = sqrt(3.5632 + 3.6789 + 2.8038)
        let d = scaled_distance([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], &omega);
        let want = (target.iter().sum::<Real>()).sqrt();
        assert!((d - want).abs() < 1e-4, "{d} vs {want}");

        std::fs::remove_dir_all(&dir).ok();
    }
}
