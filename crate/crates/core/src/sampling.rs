//! Farthest point sampling and the multilevel neighborhood hierarchy.
//!
//! Level 1 anchors come from global FPS over each retained frame. Every
//! deeper level restricts its candidates to closed spherical neighborhoods
//! (radius `r`, at most `k` members each) around the previous level's
//! anchors, unions and deduplicates them by point index, then FPS-selects
//! the level's anchor budget from that candidate set.

use crate::{Error, Real, Result};

/// One frame of a point-cloud video, in meters.
#[derive(Debug, Clone)]
pub struct FrameCloud {
    pub points: Vec<[Real; 3]>,
    pub frame_index: usize,
}

impl FrameCloud {
    pub fn new(points: Vec<[Real; 3]>, frame_index: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Geometry(format!("frame {frame_index} has no points")));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!(
                "frame {frame_index} contains non-finite coordinates"
            )));
        }
        Ok(FrameCloud { points, frame_index })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub type PointCloudVideo = Vec<FrameCloud>;

/// Per-level sampling parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub level: usize,
    /// Anchor budget per retained frame.
    pub n_points: usize,
    /// Neighborhood radius in meters (levels >= 2).
    pub radius: Real,
    /// Max candidates contributed per parent anchor.
    pub candidate_k: usize,
    /// Applied once, before level 1: keep every `temporal_stride`-th frame.
    pub temporal_stride: usize,
}

/// Default three-level pyramid: `n/4`, `n/16`, `n/32` anchors per frame.
pub fn default_layer_specs(
    points_per_frame: usize,
    radii: [Real; 3],
    candidate_k: usize,
    temporal_stride: usize,
) -> [LayerSpec; 3] {
    let budgets = [points_per_frame / 4, points_per_frame / 16, points_per_frame / 32];
    [0, 1, 2].map(|i| LayerSpec {
        level: i + 1,
        n_points: budgets[i].max(1),
        radius: radii[i],
        candidate_k,
        temporal_stride,
    })
}

/// One selected anchor: which source point it is and where its parent sits
/// in the previous level's anchor list for the same frame.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub point_index: usize,
    pub coords: [Real; 3],
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AnchorFrame {
    pub frame_index: usize,
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub level: usize,
    pub frames: Vec<AnchorFrame>,
}

impl LevelAnchors {
    pub fn anchor_count(&self) -> usize {
        self.frames.iter().map(|f| f.anchors.len()).sum()
    }
}

/// Hierarchy output: anchors for all three levels plus a flag per level
/// noting whether the relaxed-radius fallback fired anywhere.
#[derive(Debug, Clone)]
pub struct MnsOutput {
    pub levels: [LevelAnchors; 3],
    pub relaxed: [bool; 3],
}

pub(crate) fn squared_distance(a: [Real; 3], b: [Real; 3]) -> Real {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the point nearest the centroid; the default FPS seed.
pub fn centroid_seed(points: &[[Real; 3]]) -> usize {
    let n = points.len() as Real;
    let mut c = [0.0; 3];
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    c = [c[0] / n, c[1] / n, c[2] / n];
    let mut best = 0;
    let mut best_d = Real::INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Greedy farthest point sampling. Each successive pick maximizes the
/// minimum distance to everything already selected; ties break to the
/// lowest index.
pub fn fps(points: &[[Real; 3]], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if count == 0 || count > m {
        return Err(Error::Geometry(format!(
            "fps: requested {count} samples from {m} points"
        )));
    }
    if seed_index >= m {
        return Err(Error::Geometry(format!(
            "fps: seed index {seed_index} out of bounds for {m} points"
        )));
    }
    let mut selected = Vec::with_capacity(count);
    selected.push(seed_index);
    let mut min_dist: Vec<Real> = points
        .iter()
        .map(|&p| squared_distance(p, points[seed_index]))
        .collect();
    while selected.len() < count {
        let mut best = 0;
        let mut best_d = Real::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = squared_distance(points[i], points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Closed-ball neighbors of `center`, nearest-first (ties to the lower
/// index), truncated to `k_max`.
fn ball_members(points: &[[Real; 3]], center: [Real; 3], radius: Real, k_max: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut hits: Vec<(Real, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let d = squared_distance(p, center);
            (d <= r2).then_some((d, i))
        })
        .collect();
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(k_max);
    hits.into_iter().map(|(_, i)| i).collect()
}

/// Run the full multilevel hierarchy over a video.
pub fn mns(video: &[FrameCloud], specs: &[LayerSpec; 3]) -> Result<MnsOutput> {
    mns_impl(video, specs, true)
}

/// Ablation variant: every level sampled by independent global FPS over the
/// retained frame, with no neighborhood restriction and no parent links.
pub fn mns_global(video: &[FrameCloud], specs: &[LayerSpec; 3]) -> Result<MnsOutput> {
    mns_impl(video, specs, false)
}

fn mns_impl(
    video: &[FrameCloud],
    specs: &[LayerSpec; 3],
    neighborhood_constrained: bool,
) -> Result<MnsOutput> {
    if video.is_empty() {
        return Err(Error::Geometry("mns: empty video".into()));
    }
    let stride = specs[0].temporal_stride.max(1);
    let retained: Vec<&FrameCloud> = video.iter().step_by(stride).collect();

    for frame in &retained {
        if frame.len() < specs[0].n_points {
            return Err(Error::Geometry(format!(
                "mns: frame {} has {} points, fewer than the level-1 budget {}",
                frame.frame_index,
                frame.len(),
                specs[0].n_points
            )));
        }
    }

    let mut levels: Vec<LevelAnchors> = Vec::with_capacity(3);
    let mut relaxed = [false; 3];

    // Level 1: global FPS per retained frame.
    let mut frames = Vec::with_capacity(retained.len());
    for frame in &retained {
        let seed = centroid_seed(&frame.points);
        let picked = fps(&frame.points, specs[0].n_points, seed)?;
        frames.push(AnchorFrame {
            frame_index: frame.frame_index,
            anchors: picked
                .into_iter()
                .map(|i| Anchor { point_index: i, coords: frame.points[i], parent: None })
                .collect(),
        });
    }
    levels.push(LevelAnchors { level: 1, frames });

    for level in 1..3 {
        let spec = specs[level];
        let mut frames = Vec::with_capacity(retained.len());
        for (fi, frame) in retained.iter().enumerate() {
            let parents = &levels[level - 1].frames[fi].anchors;
            let (candidates, fired) = if neighborhood_constrained {
                candidate_set(&frame.points, parents, spec, frame.frame_index)?
            } else {
                ((0..frame.len()).collect::<Vec<_>>(), false)
            };
            relaxed[level] |= fired;

            let coords: Vec<[Real; 3]> = candidates.iter().map(|&i| frame.points[i]).collect();
            let seed = centroid_seed(&coords);
            let picked = fps(&coords, spec.n_points, seed)?;
            let anchors: Vec<Anchor> = picked
                .into_iter()
                .map(|ci| {
                    let point_index = candidates[ci];
                    let coords = frame.points[point_index];
                    let parent = neighborhood_constrained.then(|| nearest_parent(coords, parents));
                    Anchor { point_index, coords, parent }
                })
                .collect();
            frames.push(AnchorFrame { frame_index: frame.frame_index, anchors });
        }
        levels.push(LevelAnchors { level: level + 1, frames });
    }

    let [l1, l2, l3]: [LevelAnchors; 3] = levels.try_into().expect("three levels");
    Ok(MnsOutput { levels: [l1, l2, l3], relaxed })
}

/// Union of the parents' closed-ball neighborhoods, deduplicated by point
/// index in ascending order. Falls back to a doubled radius once if the
/// candidate set cannot cover the anchor budget.
fn candidate_set(
    points: &[[Real; 3]],
    parents: &[Anchor],
    spec: LayerSpec,
    frame_index: usize,
) -> Result<(Vec<usize>, bool)> {
    let gather = |radius: Real| -> Vec<usize> {
        let mut mask = vec![false; points.len()];
        for parent in parents {
            for i in ball_members(points, parent.coords, radius, spec.candidate_k) {
                mask[i] = true;
            }
        }
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    };

    let candidates = gather(spec.radius);
    if candidates.len() >= spec.n_points {
        return Ok((candidates, false));
    }
    let relaxed_radius = spec.radius * 2.0;
    let relaxed = gather(relaxed_radius);
    if relaxed.len() >= spec.n_points {
        return Ok((relaxed, true));
    }
    Err(Error::CandidateExhausted {
        level: spec.level,
        frame: frame_index,
        candidates: relaxed.len(),
        requested: spec.n_points,
        radius: spec.radius as f64,
        relaxed_radius: relaxed_radius as f64,
    })
}

fn nearest_parent(coords: [Real; 3], parents: &[Anchor]) -> usize {
    let mut best = 0;
    let mut best_d = Real::INFINITY;
    for (i, parent) in parents.iter().enumerate() {
        let d = squared_distance(coords, parent.coords);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
