//! Spinning-scanner simulation over a capsule-skinned humanoid.
//!
//! Rays are cast on a fixed angular grid (0.1 deg horizontal, 0.2 deg
//! vertical over a 120 x 25.4 deg field of view by default) from a sensor
//! whose per-frame pose carries the platform disturbance: height jitter,
//! pitch jitter, and an optional constant forward velocity. First hits only,
//! with Gaussian range noise. Returned clouds live in the sensor frame, so
//! platform motion shows up as apparent motion of the subject.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::skeleton::{Joint, Pose, SceneSpec};
use crate::sampling::FrameCloud;
use crate::{Error, Real, Result};

/// Scanner geometry and noise model.
#[derive(Debug, Clone)]
pub struct LidarConfig {
    pub horizontal_fov_deg: Real,
    pub horizontal_res_deg: Real,
    pub vertical_fov_deg: Real,
    pub vertical_res_deg: Real,
    /// 1-sigma range noise in meters.
    pub range_noise_std: Real,
    /// Sensor height above ground, before jitter.
    pub sensor_height: Real,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            horizontal_fov_deg: 120.0,
            horizontal_res_deg: 0.1,
            vertical_fov_deg: 25.4,
            vertical_res_deg: 0.2,
            range_noise_std: 0.02,
            sensor_height: 0.8,
        }
    }
}

/// Per-frame platform disturbance model.
#[derive(Debug, Clone, Copy)]
pub struct PlatformSpec {
    /// 1-sigma sensor height perturbation, meters.
    pub height_jitter_std: Real,
    /// 1-sigma pitch perturbation, radians.
    pub pitch_jitter_std: Real,
    /// Constant forward velocity of the platform, m/s.
    pub forward_velocity: Real,
}

impl Default for PlatformSpec {
    fn default() -> Self {
        PlatformSpec {
            height_jitter_std: 0.02,
            pitch_jitter_std: 0.5 * std::f64::consts::PI as Real / 180.0,
            forward_velocity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [Real; 3],
    b: [Real; 3],
    radius: Real,
}

/// Nine capsules: head, torso, pelvis, two arms, two thighs, two shins.
fn skin(pose: &Pose, scale: Real) -> [Capsule; 9] {
    let j = |joint: Joint| pose[joint as usize];
    let lerp = |a: [Real; 3], b: [Real; 3], t: Real| {
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
    };
    let head = j(Joint::Head);
    let neck = j(Joint::Neck);
    let pelvis = lerp(j(Joint::HipL), j(Joint::HipR), 0.5);
    [
        Capsule { a: head, b: lerp(head, neck, 0.5), radius: 0.10 * scale },
        Capsule { a: neck, b: pelvis, radius: 0.14 * scale },
        Capsule { a: j(Joint::HipL), b: j(Joint::HipR), radius: 0.10 * scale },
        Capsule { a: j(Joint::ShoulderL), b: j(Joint::WristL), radius: 0.05 * scale },
        Capsule { a: j(Joint::ShoulderR), b: j(Joint::WristR), radius: 0.05 * scale },
        Capsule { a: j(Joint::HipL), b: j(Joint::KneeL), radius: 0.07 * scale },
        Capsule { a: j(Joint::HipR), b: j(Joint::KneeR), radius: 0.07 * scale },
        Capsule { a: j(Joint::KneeL), b: j(Joint::AnkleL), radius: 0.055 * scale },
        Capsule { a: j(Joint::KneeR), b: j(Joint::AnkleR), radius: 0.055 * scale },
    ]
}

fn dot(a: [Real; 3], b: [Real; 3]) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Smallest positive ray parameter hitting the capsule, if any. Ray origin
/// is the coordinate origin; `dir` must be a unit vector.
fn ray_capsule(dir: [Real; 3], capsule: &Capsule) -> Option<Real> {
    let axis = sub3(capsule.b, capsule.a);
    let len2 = dot(axis, axis);
    let mut best: Option<Real> = None;
    let mut consider = |t: Real| {
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };

    // Infinite cylinder around the axis, accepted only within the segment.
    if len2 > 1e-12 {
        let inv = 1.0 / len2;
        let ao = sub3([0.0; 3], capsule.a);
        let d_axis = dot(dir, axis);
        let ao_axis = dot(ao, axis);
        let d_perp = [
            dir[0] - d_axis * inv * axis[0],
            dir[1] - d_axis * inv * axis[1],
            dir[2] - d_axis * inv * axis[2],
        ];
        let ao_perp = [
            ao[0] - ao_axis * inv * axis[0],
            ao[1] - ao_axis * inv * axis[1],
            ao[2] - ao_axis * inv * axis[2],
        ];
        let a = dot(d_perp, d_perp);
        let b = 2.0 * dot(d_perp, ao_perp);
        let c = dot(ao_perp, ao_perp) - capsule.radius * capsule.radius;
        if a > 1e-12 {
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if t > 0.0 {
                        let s = (ao_axis + t * d_axis) * inv;
                        if (0.0..=1.0).contains(&s) {
                            consider(t);
                        }
                    }
                }
            }
        }
    }

    // Sphere caps.
    for center in [capsule.a, capsule.b] {
        let oc = sub3([0.0; 3], center);
        let b = 2.0 * dot(dir, oc);
        let c = dot(oc, oc) - capsule.radius * capsule.radius;
        let disc = b * b - 4.0 * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            consider((-b - sq) / 2.0);
            consider((-b + sq) / 2.0);
        }
    }
    best
}

/// Scan one pose from a given sensor pose. `sensor_x` is the platform's
/// forward displacement, `sensor_z` its (jittered) height, `pitch` the
/// jittered pitch angle.
fn scan_frame(
    pose: &Pose,
    scale: Real,
    config: &LidarConfig,
    sensor_x: Real,
    sensor_z: Real,
    pitch: Real,
    range_noise: &mut impl FnMut() -> Real,
) -> Vec<[Real; 3]> {
    // Move the world into the sensor frame: translate, then un-pitch.
    let (sp, cp) = (pitch.sin(), pitch.cos());
    let transform = |p: [Real; 3]| -> [Real; 3] {
        let q = [p[0] - sensor_x, p[1], p[2] - sensor_z];
        // Rotation about y by -pitch.
        [cp * q[0] + sp * q[2], q[1], -sp * q[0] + cp * q[2]]
    };
    let mut local: Pose = *pose;
    for p in &mut local {
        *p = transform(*p);
    }
    let capsules = skin(&local, scale);

    // Angular window of the whole body, with a radius margin, so only the
    // relevant slice of the grid is traced.
    let mut az_min = Real::INFINITY;
    let mut az_max = Real::NEG_INFINITY;
    let mut el_min = Real::INFINITY;
    let mut el_max = Real::NEG_INFINITY;
    let mut min_range = Real::INFINITY;
    let mut max_radius: Real = 0.0;
    for c in &capsules {
        for p in [c.a, c.b] {
            let range = (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-6);
            az_min = az_min.min(p[1].atan2(p[0]));
            az_max = az_max.max(p[1].atan2(p[0]));
            let horiz = (p[0] * p[0] + p[1] * p[1]).sqrt();
            el_min = el_min.min(p[2].atan2(horiz));
            el_max = el_max.max(p[2].atan2(horiz));
            min_range = min_range.min(range);
        }
        max_radius = max_radius.max(c.radius);
    }
    let margin = ((max_radius + 0.05) / min_range.max(0.5)).atan();
    az_min -= margin;
    az_max += margin;
    el_min -= margin;
    el_max += margin;

    let deg = std::f64::consts::PI as Real / 180.0;
    let h_half = 0.5 * config.horizontal_fov_deg * deg;
    let v_half = 0.5 * config.vertical_fov_deg * deg;
    let h_step = config.horizontal_res_deg * deg;
    let v_step = config.vertical_res_deg * deg;

    let az_lo = (((az_min + h_half) / h_step).floor().max(0.0)) as usize;
    let az_hi_f = ((az_max + h_half) / h_step).ceil();
    let az_hi = (az_hi_f.max(0.0) as usize).min((2.0 * h_half / h_step) as usize);
    let el_lo = (((el_min + v_half) / v_step).floor().max(0.0)) as usize;
    let el_hi_f = ((el_max + v_half) / v_step).ceil();
    let el_hi = (el_hi_f.max(0.0) as usize).min((2.0 * v_half / v_step) as usize);

    let mut points = Vec::new();
    for ei in el_lo..=el_hi {
        let el = -v_half + ei as Real * v_step;
        let (se, ce) = (el.sin(), el.cos());
        for ai in az_lo..=az_hi {
            let az = -h_half + ai as Real * h_step;
            let dir = [ce * az.cos(), ce * az.sin(), se];
            let mut hit: Option<Real> = None;
            for c in &capsules {
                if let Some(t) = ray_capsule(dir, c) {
                    if hit.map_or(true, |h| t < h) {
                        hit = Some(t);
                    }
                }
            }
            if let Some(t) = hit {
                let t = t + range_noise();
                points.push([dir[0] * t, dir[1] * t, dir[2] * t]);
            }
        }
    }
    points
}

/// Sample a whole pose sequence into a point-cloud video. Fails if the
/// subject leaves the horizontal field of view or returns no points in
/// some frame.
pub fn lidar_sample(
    poses: &[Pose],
    spec: &SceneSpec,
    config: &LidarConfig,
    platform: &PlatformSpec,
    seed: u64,
) -> Result<Vec<FrameCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = spec.subject.height / 1.75;
    let dt = 1.0 / spec.frame_hz;
    let deg = std::f64::consts::PI as Real / 180.0;
    let h_half = 0.5 * config.horizontal_fov_deg * deg;

    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let height_jitter = gaussian(&mut rng) * platform.height_jitter_std;
        let pitch = gaussian(&mut rng) * platform.pitch_jitter_std;
        let sensor_x = platform.forward_velocity * i as Real * dt;
        let sensor_z = config.sensor_height + height_jitter;

        // Field-of-view precondition on the horizontal plane.
        for p in pose.iter() {
            let az = (p[1]).atan2(p[0] - sensor_x);
            if az.abs() > h_half {
                return Err(Error::Generation(format!(
                    "frame {i}: subject at azimuth {:.1} deg leaves the {:.0} deg field of view",
                    az / deg,
                    config.horizontal_fov_deg
                )));
            }
        }

        let mut noise = || gaussian(&mut rng) * config.range_noise_std;
        let points = scan_frame(pose, scale, config, sensor_x, sensor_z, pitch, &mut noise);
        if points.is_empty() {
            return Err(Error::Generation(format!(
                "frame {i}: no returns from the subject (distance {:.1} m)",
                spec.distance
            )));
        }
        frames.push(FrameCloud::new(points, i)?);
    }
    Ok(frames)
}

/// Box-Muller standard normal.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> Real {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (((-2.0 * u1.ln()).sqrt()) * (std::f64::consts::TAU * u2).cos()) as Real
}
