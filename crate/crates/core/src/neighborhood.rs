//! Radius neighborhood queries and spatiotemporal point-tube grouping.
//!
//! [`ball_query`] is the isotropic closed-ball search. [`ellipse_query`]
//! generalizes it with a diagonal metric whose per-axis scales live in
//! [`EllipseParams`]; with unit scales the two are identical, result order
//! included. [`group_tube`] merges per-frame queries across a small temporal
//! window into fixed-width neighbor groups around each anchor.

use crate::sampling::{squared_distance, LevelAnchors};
use crate::{Error, Real, Result};

/// Trainable per-axis scales of the anisotropic metric, stored as
/// log-values so the scales stay strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    log_alpha: Real,
    log_beta: Real,
    log_gamma: Real,
    pub trainable: bool,
}

impl EllipseParams {
    /// Unit scales: the metric reduces to the Euclidean distance.
    pub fn unit() -> Self {
        EllipseParams { log_alpha: 0.0, log_beta: 0.0, log_gamma: 0.0, trainable: false }
    }

    pub fn from_scales(alpha: Real, beta: Real, gamma: Real, trainable: bool) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) {
            return Err(Error::Geometry(format!(
                "ellipse scales must be positive, got ({alpha}, {beta}, {gamma})"
            )));
        }
        Ok(EllipseParams {
            log_alpha: alpha.ln(),
            log_beta: beta.ln(),
            log_gamma: gamma.ln(),
            trainable,
        })
    }

    pub fn from_log(log_alpha: Real, log_beta: Real, log_gamma: Real, trainable: bool) -> Self {
        EllipseParams { log_alpha, log_beta, log_gamma, trainable }
    }

    pub fn alpha(&self) -> Real {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> Real {
        self.log_beta.exp()
    }

    pub fn gamma(&self) -> Real {
        self.log_gamma.exp()
    }

    pub fn log_values(&self) -> [Real; 3] {
        [self.log_alpha, self.log_beta, self.log_gamma]
    }

    pub fn scales(&self) -> [Real; 3] {
        [self.alpha(), self.beta(), self.gamma()]
    }

    pub fn is_unit(&self) -> bool {
        self.log_alpha == 0.0 && self.log_beta == 0.0 && self.log_gamma == 0.0
    }
}

/// Squared anisotropic distance; keeping the square around avoids a sqrt in
/// the membership tests.
pub fn scaled_sq_distance(p: [Real; 3], q: [Real; 3], omega: &EllipseParams) -> Real {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    omega.alpha() * dx * dx + omega.beta() * dy * dy + omega.gamma() * dz * dz
}

/// Anisotropic distance `sqrt(alpha dx^2 + beta dy^2 + gamma dz^2)`.
/// With unit scales this is exactly the Euclidean distance.
pub fn scaled_distance(p: [Real; 3], q: [Real; 3], omega: &EllipseParams) -> Real {
    scaled_sq_distance(p, q, omega).sqrt()
}

/// All indices with Euclidean distance `<= r` from `query`, sorted by
/// ascending distance (ties to the lower index), truncated to `k_max`.
/// An empty result is not an error.
pub fn ball_query(query: [Real; 3], points: &[[Real; 3]], r: Real, k_max: usize) -> Vec<usize> {
    metric_query(query, points, r, k_max, |p, q| squared_distance(p, q))
}

/// [`ball_query`] under the anisotropic metric. With unit scales the result
/// equals `ball_query` elementwise.
pub fn ellipse_query(
    query: [Real; 3],
    points: &[[Real; 3]],
    r: Real,
    k_max: usize,
    omega: &EllipseParams,
) -> Vec<usize> {
    metric_query(query, points, r, k_max, |p, q| scaled_sq_distance(p, q, omega))
}

fn metric_query(
    query: [Real; 3],
    points: &[[Real; 3]],
    r: Real,
    k_max: usize,
    sq_metric: impl Fn([Real; 3], [Real; 3]) -> Real,
) -> Vec<usize> {
    let r2 = r * r;
    let mut hits: Vec<(Real, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let d = sq_metric(p, query);
            (d <= r2).then_some((d, i))
        })
        .collect();
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(k_max);
    hits.into_iter().map(|(_, i)| i).collect()
}

/// A queryable frame of the source cloud a tube gathers from: raw video
/// frames for level 1, the previous level's anchors for deeper levels.
#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub frame_index: usize,
    pub points: Vec<[Real; 3]>,
}

/// One neighbor slot of a tube: relative offset, provenance, validity.
/// Invalid slots repeat the first valid neighbor rather than faking a
/// point at the anchor.
#[derive(Debug, Clone, Copy)]
pub struct TubeNeighbor {
    /// (dx, dy, dz, dt) relative to the anchor; dt in frame units.
    pub offset: [Real; 4],
    /// Position of the source frame in the source sequence.
    pub source_pos: usize,
    /// Point index within that source frame.
    pub index: usize,
    pub valid: bool,
}

/// Fixed-width spatiotemporal neighborhood around one anchor.
#[derive(Debug, Clone)]
pub struct TubeGroup {
    /// Anchor (x, y, z, t); t is the originating frame index.
    pub anchor: [Real; 4],
    /// Position of the anchor's own frame in the source sequence.
    pub anchor_source_pos: usize,
    pub neighbors: Vec<TubeNeighbor>,
}

/// Group neighbors for every anchor of a level across a temporal window of
/// `temporal_radius` source-sequence steps. Per-frame queries run under the
/// anisotropic metric; merged results are distance-sorted (ties: earlier
/// frame, then lower index) and padded or truncated to `k_max`.
pub fn group_tube(
    anchors: &LevelAnchors,
    source: &[SourceFrame],
    r: Real,
    temporal_radius: usize,
    k_max: usize,
    omega: &EllipseParams,
) -> Result<Vec<TubeGroup>> {
    if k_max == 0 {
        return Err(Error::Geometry("group_tube: k_max must be at least 1".into()));
    }
    let source_pos_of = |frame_index: usize| -> Option<usize> {
        source.iter().position(|f| f.frame_index == frame_index)
    };

    let mut groups = Vec::with_capacity(anchors.anchor_count());
    for frame in &anchors.frames {
        let center_pos = source_pos_of(frame.frame_index).ok_or_else(|| {
            Error::Geometry(format!(
                "group_tube: anchor frame {} not present in the source sequence",
                frame.frame_index
            ))
        })?;
        if source[center_pos].points.is_empty() {
            return Err(Error::Geometry(format!(
                "group_tube: source frame {} is empty",
                frame.frame_index
            )));
        }
        let lo = center_pos.saturating_sub(temporal_radius);
        let hi = (center_pos + temporal_radius).min(source.len() - 1);

        for anchor in &frame.anchors {
            let a = anchor.coords;
            let t = frame.frame_index as Real;

            // (squared distance, source position, point index)
            let mut merged: Vec<(Real, usize, usize)> = Vec::new();
            for pos in lo..=hi {
                let pts = &source[pos].points;
                for idx in ellipse_query(a, pts, r, k_max, omega) {
                    merged.push((scaled_sq_distance(pts[idx], a, omega), pos, idx));
                }
            }
            merged.sort_by(|x, y| {
                x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
            });
            merged.truncate(k_max);

            let mut neighbors: Vec<TubeNeighbor> = merged
                .iter()
                .map(|&(_, pos, idx)| {
                    let p = source[pos].points[idx];
                    TubeNeighbor {
                        offset: [
                            p[0] - a[0],
                            p[1] - a[1],
                            p[2] - a[2],
                            source[pos].frame_index as Real - t,
                        ],
                        source_pos: pos,
                        index: idx,
                        valid: true,
                    }
                })
                .collect();

            if neighbors.is_empty() {
                // Nothing in range anywhere in the window: fall back to the
                // nearest point of the anchor's own frame.
                let pts = &source[center_pos].points;
                let mut best = 0;
                let mut best_d = Real::INFINITY;
                for (i, &p) in pts.iter().enumerate() {
                    let d = scaled_sq_distance(p, a, omega);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                let p = pts[best];
                neighbors.push(TubeNeighbor {
                    offset: [p[0] - a[0], p[1] - a[1], p[2] - a[2], 0.0],
                    source_pos: center_pos,
                    index: best,
                    valid: true,
                });
            }
            while neighbors.len() < k_max {
                let mut pad = neighbors[0];
                pad.valid = false;
                neighbors.push(pad);
            }

            groups.push(TubeGroup {
                anchor: [a[0], a[1], a[2], t],
                anchor_source_pos: center_pos,
                neighbors,
            });
        }
    }
    Ok(groups)
}
