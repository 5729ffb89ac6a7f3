//! Planar contact-rich tasks: a chamfered peg-in-hole and a surface wipe,
//! with penalty contact, multi-rate sensing and scripted demonstrators.

mod env;
mod expert;
pub mod geometry;
mod physics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use env::{
    force_norm, Env, ForceSpike, StepOutcome, ACTION_TICKS, CAMERAS, FORCE_TICKS, PHYSICS_HZ,
    VISION_DIM,
};
pub use expert::ScriptedExpert;
pub use physics::{check_success, physics_step, Scene, SimState, Status, Wrench};

/// Seed stream for demonstration episodes.
pub const DATA_STREAM: u64 = 0x64617461;
/// Seed stream for evaluation episodes, disjoint from [`DATA_STREAM`].
pub const EVAL_STREAM: u64 = 0x6576616c;

/// Per-episode seed: a splitmix64 mix of `(base, stream, index)`.
pub fn episode_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Peg,
    Wipe,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Peg, TaskKind::Wipe];

    /// Instruction id fed to the policy.
    pub fn id(self) -> usize {
        match self {
            TaskKind::Peg => 0,
            TaskKind::Wipe => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Peg => "peg",
            TaskKind::Wipe => "wipe",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peg" => Ok(TaskKind::Peg),
            "wipe" => Ok(TaskKind::Wipe),
            other => Err(Error::Config(format!("unknown task '{other}' (peg | wipe)"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    /// N/m.
    pub stiffness: f64,
    /// N s/m.
    pub damping: f64,
    pub friction: f64,
    /// Velocity scale (m/s) of the smoothed friction sign.
    pub slip_velocity: f64,
    pub chamfer_width: f64,
    pub chamfer_angle_deg: f64,
    pub force_noise: f64,
    pub torque_noise: f64,
    /// Per-contact normal force clip, N.
    pub force_clip: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            stiffness: 2000.0,
            damping: 20.0,
            friction: 0.4,
            slip_velocity: 1e-3,
            chamfer_width: 0.0025,
            chamfer_angle_deg: 45.0,
            force_noise: 0.05,
            torque_noise: 0.005,
            force_clip: 60.0,
        }
    }
}

/// Point-mass end effector tracking its commanded pose through PD gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerParams {
    pub mass: f64,
    pub inertia: f64,
    pub kp: f64,
    pub kd: f64,
    pub kp_rot: f64,
    pub kd_rot: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            mass: 0.5,
            inertia: 5e-4,
            kp: 2000.0,
            kd: 63.0,
            kp_rot: 2.0,
            kd_rot: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PegParams {
    pub peg_half_width: f64,
    pub peg_length: f64,
    pub hole_half_width: f64,
    pub hole_depth: f64,
    pub hole_offset_range: f64,
    pub rotation_range_deg: f64,
    /// Lateral start distance from the hole `[min, max]`, random side.
    pub start_lateral: [f64; 2],
    /// Start height of the peg tip above the hole mouth, `[min, max]`.
    pub start_height: [f64; 2],
    pub insertion_depth: f64,
}

impl Default for PegParams {
    fn default() -> Self {
        PegParams {
            peg_half_width: 0.005,
            peg_length: 0.04,
            hole_half_width: 0.0056,
            hole_depth: 0.02,
            hole_offset_range: 0.006,
            rotation_range_deg: 10.0,
            start_lateral: [0.05, 0.09],
            start_height: [0.04, 0.06],
            insertion_depth: 0.012,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WipeParams {
    pub surface_offset_range: f64,
    pub tilt_range_deg: f64,
    /// Strip start along the board, board frame.
    pub strip_start: f64,
    pub strip_length: f64,
    pub start_height: [f64; 2],
    pub wiped_fraction: f64,
    /// A cell only counts as wiped under a normal force inside this band.
    pub force_band: [f64; 2],
    pub target_force: f64,
}

impl Default for WipeParams {
    fn default() -> Self {
        WipeParams {
            surface_offset_range: 0.005,
            tilt_range_deg: 3.0,
            strip_start: -0.04,
            strip_length: 0.08,
            start_height: [0.008, 0.015],
            wiped_fraction: 0.9,
            force_band: [2.0, 6.0],
            target_force: 4.0,
        }
    }
}

/// Randomization, success and safety parameters shared by both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub contact: ContactParams,
    pub controller: ControllerParams,
    pub peg: PegParams,
    pub wipe: WipeParams,
    /// Per-frame feature noise std, m.
    pub vision_noise: f64,
    /// Per-episode bias of the perceived target position, uniform in `±bias`.
    pub vision_bias: f64,
    /// Per-episode bias of the perceived target angle, rad.
    pub vision_rot_bias: f64,
    pub step_budget: usize,
    /// Safety stop threshold on the contact force norm, N.
    pub f_max: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            contact: ContactParams::default(),
            controller: ControllerParams::default(),
            peg: PegParams::default(),
            wipe: WipeParams::default(),
            vision_noise: 3e-4,
            vision_bias: 0.002,
            vision_rot_bias: 0.01,
            step_budget: 300,
            f_max: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, params: TaskParams) -> Result<Self> {
        let spec = TaskSpec { kind, params };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            params: TaskParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let c = &p.contact;
        let bad = |what: &str| Err(Error::Config(format!("task {}: {what}", self.kind)));
        if !(c.stiffness > 0.0 && c.damping > 0.0) {
            return bad("contact stiffness and damping must be positive");
        }
        if !(c.friction >= 0.0 && c.slip_velocity > 0.0 && c.force_clip > 0.0) {
            return bad("friction must be non-negative, slip velocity and clip positive");
        }
        if !(c.force_noise >= 0.0 && c.torque_noise >= 0.0 && p.vision_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(c.chamfer_width >= 0.0 && c.chamfer_angle_deg > 0.0 && c.chamfer_angle_deg < 90.0) {
            return bad("chamfer angle must lie in (0, 90) degrees");
        }
        let k = &p.controller;
        if [k.mass, k.inertia, k.kp, k.kd, k.kp_rot, k.kd_rot]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return bad("controller parameters must be positive");
        }
        let g = &p.peg;
        if !(g.peg_half_width > 0.0
            && g.hole_half_width > g.peg_half_width
            && g.hole_depth > g.insertion_depth
            && g.insertion_depth > 0.0
            && g.peg_length > g.hole_depth)
        {
            return bad("peg geometry needs 0 < peg width < hole width and depth > threshold");
        }
        let w = &p.wipe;
        if !(w.strip_length > 0.0
            && w.wiped_fraction > 0.0
            && w.wiped_fraction <= 1.0
            && w.force_band[0] > 0.0
            && w.force_band[1] > w.force_band[0])
        {
            return bad("wipe thresholds must be positive with a nonempty force band");
        }
        let ranges = [
            g.hole_offset_range,
            g.rotation_range_deg,
            w.surface_offset_range,
            w.tilt_range_deg,
            p.vision_bias,
            p.vision_rot_bias,
        ];
        if ranges.iter().any(|r| !(*r >= 0.0)) {
            return bad("randomization ranges must be non-negative");
        }
        if !(g.start_lateral[0] >= 0.0 && g.start_lateral[1] >= g.start_lateral[0])
            || !(g.start_height[0] > 0.0 && g.start_height[1] >= g.start_height[0])
            || !(w.start_height[0] > 0.0 && w.start_height[1] >= w.start_height[0])
        {
            return bad("start height ranges must be positive and ordered");
        }
        if p.step_budget == 0 || !(p.f_max > 0.0) {
            return bad("step budget and force limit must be positive");
        }
        Ok(())
    }
}
