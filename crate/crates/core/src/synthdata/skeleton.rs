//! Procedural 15-joint humanoid animation.
//!
//! Base motion drives the root trajectory and gait; the gesture moves the
//! right arm chain only. All quantities are meters and the frame rate is
//! fixed by the caller (10 Hz throughout this crate). The figure faces the
//! sensor (the -x direction); lateral walking strafes along y.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Real;

pub const JOINT_COUNT: usize = 15;

/// Joint order inside a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Joint {
    Head = 0,
    Neck = 1,
    Spine = 2,
    ShoulderL = 3,
    ShoulderR = 4,
    ElbowL = 5,
    ElbowR = 6,
    WristL = 7,
    WristR = 8,
    HipL = 9,
    HipR = 10,
    KneeL = 11,
    KneeR = 12,
    AnkleL = 13,
    AnkleR = 14,
}

pub type Pose = [[Real; 3]; JOINT_COUNT];

/// Locomotion component of a composite class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseMotion {
    Stand,
    WalkToward,
    WalkLateral,
}

/// Gesture component of a composite class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gesture {
    None,
    Wave,
}

/// Per-subject body parameters; derived deterministically from the subject
/// id so the cross-subject split carries real appearance variation.
#[derive(Debug, Clone, Copy)]
pub struct SubjectParams {
    pub height: Real,
    pub gait_frequency: Real,
    pub shoulder_width: Real,
}

impl SubjectParams {
    pub fn for_subject(subject_id: u32) -> Self {
        // Cheap splitmix-style hash into [0, 1).
        let h = |salt: u64| -> Real {
            let mut x = (subject_id as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt);
            x ^= x >> 30;
            x = x.wrapping_mul(0xbf58476d1ce4e5b9);
            x ^= x >> 27;
            ((x >> 11) as f64 / (1u64 << 53) as f64) as Real
        };
        SubjectParams {
            height: 1.55 + 0.30 * h(1),
            gait_frequency: 1.5 + 0.5 * h(2),
            shoulder_width: 0.36 + 0.06 * h(3),
        }
    }
}

/// Everything that defines one generated scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub base: BaseMotion,
    pub gesture: Gesture,
    /// Nominal human-sensor distance in meters at the end of the clip.
    pub distance: Real,
    /// Initial lateral offset of the figure.
    pub lateral_offset: Real,
    pub walk_speed: Real,
    pub wave_frequency: Real,
    pub wave_amplitude: Real,
    pub gait_phase: Real,
    pub duration_frames: usize,
    pub frame_hz: Real,
    pub subject: SubjectParams,
}

impl SceneSpec {
    /// Deterministic scene for a class/subject pair; per-clip variation is
    /// drawn from the provided generator.
    pub fn sample(
        base: BaseMotion,
        gesture: Gesture,
        subject: SubjectParams,
        distance_range: (Real, Real),
        duration_frames: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SceneSpec {
            base,
            gesture,
            distance: rng.gen_range(distance_range.0..=distance_range.1),
            lateral_offset: rng.gen_range(-0.4..0.4),
            walk_speed: rng.gen_range(0.9..1.4),
            wave_frequency: rng.gen_range(1.2..1.8),
            wave_amplitude: 0.3,
            gait_phase: rng.gen_range(0.0..std::f64::consts::TAU as Real),
            duration_frames,
            frame_hz: 10.0,
            subject,
        }
    }
}

/// Bound used by tests and the generator: idle joints move less than this
/// per frame.
pub const IDLE_SWAY_BOUND: Real = 0.02;

/// Generate the world-frame pose sequence for a scene.
pub fn animate(spec: &SceneSpec) -> Vec<Pose> {
    let s = spec.subject.height / 1.75;
    let dt = 1.0 / spec.frame_hz;
    let duration = spec.duration_frames as Real * dt;

    // Root path. Walking toward ends at the nominal distance; lateral
    // walking is centered on the configured offset.
    let (start, velocity): ([Real; 2], [Real; 2]) = match spec.base {
        BaseMotion::Stand => ([spec.distance, spec.lateral_offset], [0.0, 0.0]),
        BaseMotion::WalkToward => (
            [spec.distance + spec.walk_speed * duration, spec.lateral_offset],
            [-spec.walk_speed, 0.0],
        ),
        BaseMotion::WalkLateral => (
            [spec.distance, spec.lateral_offset - 0.5 * spec.walk_speed * duration],
            [0.0, spec.walk_speed],
        ),
    };

    let walking = !matches!(spec.base, BaseMotion::Stand);
    let gait_omega = std::f64::consts::TAU as Real * spec.subject.gait_frequency;
    let wave_omega = std::f64::consts::TAU as Real * spec.wave_frequency;

    let hip_z = 0.92 * s;
    let ankle_z = 0.08 * s;
    let spine_z = 1.15 * s;
    let neck_z = 1.45 * s;
    let head_z = 1.62 * s;
    let shoulder_z = 1.42 * s;
    let half_shoulder = 0.5 * spec.subject.shoulder_width * s;
    let half_hip = 0.09 * s;
    let upper_arm = 0.30 * s;
    let forearm = 0.27 * s;

    let mut poses = Vec::with_capacity(spec.duration_frames);
    for frame in 0..spec.duration_frames {
        let t = frame as Real * dt;
        let root = [start[0] + velocity[0] * t, start[1] + velocity[1] * t];
        let phase = gait_omega * t + spec.gait_phase;

        // Idle breathing: well under the sway bound per frame.
        let breathe = 0.004 * (std::f64::consts::TAU as Real * 0.25 * t).sin();

        // Gait: legs swing along the motion direction, the torso bobs.
        let swing = if walking { phase.sin() } else { 0.0 };
        let bob = if walking { 0.02 * (2.0 * phase).sin() } else { 0.0 };
        // Motion direction in the ground plane.
        let dir = match spec.base {
            BaseMotion::WalkToward => [-1.0, 0.0],
            BaseMotion::WalkLateral => [0.0, 1.0],
            BaseMotion::Stand => [0.0, 0.0],
        };

        let mut pose: Pose = [[0.0; 3]; JOINT_COUNT];
        let place = |p: &mut Pose, j: Joint, x: Real, y: Real, z: Real| {
            p[j as usize] = [x, y, z];
        };

        let zoff = bob + breathe;
        place(&mut pose, Joint::Head, root[0], root[1], head_z + zoff);
        place(&mut pose, Joint::Neck, root[0], root[1], neck_z + zoff);
        place(&mut pose, Joint::Spine, root[0], root[1], spine_z + zoff);
        place(&mut pose, Joint::ShoulderL, root[0], root[1] - half_shoulder, shoulder_z + zoff);
        place(&mut pose, Joint::ShoulderR, root[0], root[1] + half_shoulder, shoulder_z + zoff);
        place(&mut pose, Joint::HipL, root[0], root[1] - half_hip, hip_z + bob);
        place(&mut pose, Joint::HipR, root[0], root[1] + half_hip, hip_z + bob);

        // Legs: straight-leg pendulum about the hip, so thigh and shin
        // lengths stay constant; the foot arcs above the ground as it
        // swings. Knee sits at its canonical fraction of the hip-ankle line.
        let leg_len = hip_z - ankle_z;
        let theta_max = if walking { 0.35 } else { 0.0 };
        for (hip, knee, ankle, sign) in [
            (Joint::HipL, Joint::KneeL, Joint::AnkleL, 1.0),
            (Joint::HipR, Joint::KneeR, Joint::AnkleR, -1.0),
        ] {
            let theta: Real = theta_max * sign * swing;
            let hip_p = pose[hip as usize];
            let along = leg_len * theta.sin();
            let down = leg_len * theta.cos();
            let ankle_p = [
                hip_p[0] + along * dir[0],
                hip_p[1] + along * dir[1],
                hip_p[2] - down,
            ];
            place(&mut pose, ankle, ankle_p[0], ankle_p[1], ankle_p[2]);
            place(
                &mut pose,
                knee,
                hip_p[0] + 0.5 * (ankle_p[0] - hip_p[0]),
                hip_p[1] + 0.5 * (ankle_p[1] - hip_p[1]),
                hip_p[2] + 0.5 * (ankle_p[2] - hip_p[2]),
            );
        }

        // Arms: straight pendulum about the shoulder, counter-phase to the
        // legs while walking. The elbow splits the segment at the canonical
        // upper-arm fraction.
        let arm_len = upper_arm + forearm;
        let elbow_frac = upper_arm / arm_len;
        let psi_max = if walking { 0.25 } else { 0.0 };
        let hang_arm = |p: &mut Pose, shoulder: Joint, elbow: Joint, wrist: Joint, sign: Real| {
            let psi: Real = -psi_max * sign * swing;
            let sp = p[shoulder as usize];
            let along = arm_len * psi.sin();
            let down = arm_len * psi.cos();
            let wrist_p = [sp[0] + along * dir[0], sp[1] + along * dir[1], sp[2] - down];
            p[elbow as usize] = [
                sp[0] + elbow_frac * (wrist_p[0] - sp[0]),
                sp[1] + elbow_frac * (wrist_p[1] - sp[1]),
                sp[2] + elbow_frac * (wrist_p[2] - sp[2]),
            ];
            p[wrist as usize] = wrist_p;
        };

        hang_arm(&mut pose, Joint::ShoulderL, Joint::ElbowL, Joint::WristL, 1.0);
        match spec.gesture {
            Gesture::None => {
                hang_arm(&mut pose, Joint::ShoulderR, Joint::ElbowR, Joint::WristR, -1.0);
            }
            Gesture::Wave => {
                // Whole arm raised, rotating about the shoulder in the
                // lateral plane; the wrist sweeps `wave_amplitude` meters.
                let chi_max = (spec.wave_amplitude / arm_len).min(0.95).asin();
                let chi: Real = chi_max * (wave_omega * t).sin();
                let sr = pose[Joint::ShoulderR as usize];
                let wrist_p = [
                    sr[0],
                    sr[1] + arm_len * chi.sin(),
                    sr[2] + arm_len * chi.cos(),
                ];
                place(
                    &mut pose,
                    Joint::ElbowR,
                    sr[0] + elbow_frac * (wrist_p[0] - sr[0]),
                    sr[1] + elbow_frac * (wrist_p[1] - sr[1]),
                    sr[2] + elbow_frac * (wrist_p[2] - sr[2]),
                );
                place(&mut pose, Joint::WristR, wrist_p[0], wrist_p[1], wrist_p[2]);
            }
        }

        poses.push(pose);
    }
    poses
}
