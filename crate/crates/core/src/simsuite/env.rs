use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{rotate, Pose2, Vec2};
use super::physics::{check_success, physics_step, Scene, SimState, Status};
use super::{TaskKind, TaskSpec};
use crate::error::Result;
use crate::fast_expert::ACTION_DIM;
use crate::force_features::{ForceSample, ForceWindow, WindowKind, FORCE_AXES};
use crate::slow_context::{ObservationBundle, STATE_DIM};

pub const PHYSICS_HZ: f64 = 600.0;
/// Physics ticks between force samples (200 Hz).
pub const FORCE_TICKS: u64 = 3;
/// Physics ticks per action step and vision frame (30 Hz).
pub const ACTION_TICKS: u64 = 20;
pub const VISION_DIM: usize = 16;
pub const CAMERAS: usize = 2;
const GRIPPER_HOLD: f64 = 0.02;

/// Additive wrench on the sensed stream over `[start_tick, start_tick + ticks)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceSpike {
    pub start_tick: u64,
    pub ticks: u64,
    pub wrench: [f64; FORCE_AXES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Largest-norm force sample sensed during the step.
    pub force: [f64; FORCE_AXES],
    /// Whether any substep of the step touched the scene.
    pub contact: bool,
    pub status: Status,
}

/// One seeded episode: simulator state, sensor log and perception model.
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: TaskSpec,
    pub state: SimState,
    log: Vec<ForceSample>,
    force_rng: ChaCha8Rng,
    vision_rng: ChaCha8Rng,
    perceived: Pose2,
    spikes: Vec<ForceSpike>,
    tau: usize,
}

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

fn between(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl Env {
    /// `tau` is the force window length handed to the policy.
    pub fn new(spec: &TaskSpec, seed: u64, tau: usize) -> Result<Env> {
        spec.validate()?;
        let p = &spec.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, pose) = match spec.kind {
            TaskKind::Peg => {
                let hole_x = uniform(&mut rng, p.peg.hole_offset_range);
                let rot = uniform(&mut rng, p.peg.rotation_range_deg.to_radians());
                let scene = Scene::peg(p, hole_x, rot);
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let lx = side * between(&mut rng, p.peg.start_lateral);
                let lz = between(&mut rng, p.peg.start_height);
                let start = scene.frame.to_world([lx, lz]);
                (scene, [start[0], start[1], 0.0])
            }
            TaskKind::Wipe => {
                let z = uniform(&mut rng, p.wipe.surface_offset_range);
                let tilt = uniform(&mut rng, p.wipe.tilt_range_deg.to_radians());
                let scene = Scene::wipe(p, z, tilt);
                let lx = p.wipe.strip_start - between(&mut rng, [0.008, 0.015]);
                let lz = between(&mut rng, p.wipe.start_height);
                let start = scene.frame.to_world([lx, lz]);
                (scene, [start[0], start[1], 0.0])
            }
        };
        let bias = [
            uniform(&mut rng, p.vision_bias),
            uniform(&mut rng, 0.25 * p.vision_bias),
        ];
        let perceived = Pose2 {
            origin: [scene.frame.origin[0] + bias[0], scene.frame.origin[1] + bias[1]],
            theta: scene.frame.theta + uniform(&mut rng, p.vision_rot_bias),
        };
        let mut force_rng = ChaCha8Rng::seed_from_u64(seed);
        force_rng.set_stream(1);
        let mut vision_rng = ChaCha8Rng::seed_from_u64(seed);
        vision_rng.set_stream(2);
        let mut env = Env {
            spec: spec.clone(),
            state: SimState::new(scene, pose, GRIPPER_HOLD),
            log: Vec::new(),
            force_rng,
            vision_rng,
            perceived,
            spikes: Vec::new(),
            tau,
        };
        env.sample_force();
        Ok(env)
    }

    pub fn inject_spike(&mut self, spike: ForceSpike) {
        self.spikes.push(spike);
    }

    fn sample_force(&mut self) {
        let c = &self.spec.params.contact;
        let mut f = self.state.contact.to_axes();
        let fnoise = Normal::new(0.0, c.force_noise.max(0.0)).expect("valid std");
        let tnoise = Normal::new(0.0, c.torque_noise.max(0.0)).expect("valid std");
        for (i, v) in f.iter_mut().enumerate() {
            *v += if i < 3 {
                fnoise.sample(&mut self.force_rng)
            } else {
                tnoise.sample(&mut self.force_rng)
            };
        }
        let tick = self.state.tick;
        for s in &self.spikes {
            if tick >= s.start_tick && tick < s.start_tick + s.ticks {
                for i in 0..FORCE_AXES {
                    f[i] += s.wrench[i];
                }
            }
        }
        self.log.push(ForceSample {
            t: tick as f64 / PHYSICS_HZ,
            f,
        });
    }

    /// Physics tick of 200 Hz sample `j`.
    pub fn sample_tick(j: usize) -> u64 {
        j as u64 * FORCE_TICKS
    }

    /// Raw 200 Hz log; sample `j` was taken at tick `3 j`.
    pub fn force_log(&self) -> &[ForceSample] {
        &self.log
    }

    /// Completed action steps, equal to the current vision frame index.
    pub fn frame(&self) -> u64 {
        self.state.action_steps as u64
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn status(&self) -> Status {
        check_success(&self.state, &self.spec)
    }

    /// Index into the 200 Hz log of the 30 Hz stream sample for `frame`:
    /// the newest sample not after the frame's tick.
    pub fn history_index(frame: u64) -> usize {
        (frame * ACTION_TICKS / FORCE_TICKS) as usize
    }

    /// The 30 Hz force stream, one sample per frame up to now.
    pub fn history_stream(&self) -> Vec<ForceSample> {
        (0..=self.frame())
            .map(|f| self.log[Self::history_index(f)])
            .collect()
    }

    pub fn history_window(&self) -> ForceWindow {
        let f = self.frame() as i64;
        let samples = (f - self.tau as i64 + 1..=f)
            .map(|g| self.log[Self::history_index(g.max(0) as u64)])
            .collect();
        ForceWindow::new(WindowKind::History, samples, self.tau).expect("window invariants")
    }

    pub fn latest_window(&self) -> ForceWindow {
        let n = self.log.len() as i64;
        let samples = (n - self.tau as i64..n)
            .map(|j| self.log[j.max(0) as usize])
            .collect();
        ForceWindow::new(WindowKind::Latest, samples, self.tau).expect("window invariants")
    }

    /// Mean of the newest `n` force samples.
    pub fn recent_force(&self, n: usize) -> [f64; FORCE_AXES] {
        let k = n.min(self.log.len()).max(1);
        let mut out = [0.0; FORCE_AXES];
        for s in &self.log[self.log.len() - k..] {
            for i in 0..FORCE_AXES {
                out[i] += s.f[i] / k as f64;
            }
        }
        out
    }

    pub fn robot_state(&self) -> [f64; STATE_DIM] {
        let s = &self.state;
        [s.pose[0], 0.0, s.pose[1], 0.0, s.pose[2], 0.0, s.gripper]
    }

    /// The biased scene frame the perception stack believes in.
    pub fn perceived_frame(&self) -> Pose2 {
        self.perceived
    }

    fn camera_features(&mut self) -> Vec<f64> {
        let noise = Normal::new(0.0, self.spec.params.vision_noise.max(1e-12)).expect("valid std");
        let mut n = || noise.sample(&mut self.vision_rng);
        let s = &self.state;
        let f = self.perceived;
        let target = [f.origin[0] + n(), f.origin[1] + n()];
        let target_rot = f.theta + 10.0 * n();
        let tool = [s.pose[0] + n(), s.pose[1] + n()];
        let tool_rot = s.pose[2] + 10.0 * n();
        let est = Pose2 {
            origin: target,
            theta: target_rot,
        };
        let rel: Vec2 = est.to_local(tool);
        let mut v = vec![
            target[0],
            target[1],
            target_rot,
            tool[0],
            tool[1],
            tool_rot,
            tool[0] - target[0],
            tool[1] - target[1],
            tool_rot - target_rot,
            s.gripper,
            rel[0],
            rel[1],
            0.0,
            0.0,
            0.0,
            0.0,
        ];
        match self.spec.kind {
            TaskKind::Peg => v[12] = 1.0,
            TaskKind::Wipe => {
                v[13] = 1.0;
                let w = &self.spec.params.wipe;
                v[14] = rel[0] - w.strip_start;
                v[15] = w.strip_start + w.strip_length - rel[0];
            }
        }
        debug_assert_eq!(v.len(), VISION_DIM);
        v
    }

    /// Vision features of both cameras at the current frame.
    pub fn vision(&mut self) -> Vec<Vec<f64>> {
        (0..CAMERAS).map(|_| self.camera_features()).collect()
    }

    pub fn observe(&mut self) -> ObservationBundle {
        ObservationBundle {
            vision: self.vision(),
            instruction: self.spec.kind.id(),
            state: self.robot_state(),
            history_force: self.history_window(),
            latest_force: self.latest_window(),
            slow_tick: self.frame(),
            fast_tick: 0,
        }
    }

    /// Executes one 30 Hz action: the commanded pose moves linearly over
    /// the step's physics ticks; forces are sensed every third tick.
    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> StepOutcome {
        let per_tick = 1.0 / ACTION_TICKS as f64;
        let delta = [action[0] * per_tick, action[2] * per_tick, action[4] * per_tick];
        self.state.gripper = action[6];
        let dt = 1.0 / PHYSICS_HZ;
        let first = self.log.len();
        let mut fault = None;
        let mut contact = false;
        for _ in 0..ACTION_TICKS {
            if let Err(e) = physics_step(&mut self.state, &self.spec.params, delta, dt) {
                fault = Some(e.to_string());
                break;
            }
            contact |= self.state.in_contact;
            if self.state.tick % FORCE_TICKS == 0 {
                self.sample_force();
            }
        }
        self.state.action_steps += 1;
        let force = self.log[first.min(self.log.len() - 1)..]
            .iter()
            .map(|s| s.f)
            .max_by(|a, b| force_norm(a).total_cmp(&force_norm(b)))
            .unwrap_or([0.0; FORCE_AXES]);
        let status = match fault {
            Some(f) => Status::Failed(format!("fault: {f}")),
            None => self.status(),
        };
        StepOutcome { force, contact, status }
    }

    /// Sensed force expressed in the perceived scene frame `(lateral, normal)`.
    pub fn perceived_force(&self, f: &[f64; FORCE_AXES]) -> Vec2 {
        rotate([f[0], f[2]], -self.perceived.theta)
    }
}

pub fn force_norm(f: &[f64; FORCE_AXES]) -> f64 {
    (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensing_rates_over_one_second() {
        let spec = TaskSpec::default_for(TaskKind::Peg);
        let mut env = Env::new(&spec, 1, 10).unwrap();
        for _ in 0..30 {
            env.step(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, GRIPPER_HOLD]);
        }
        // The tick-0 sample belongs to the previous second.
        assert_eq!(env.force_log().len() - 1, 200);
        assert_eq!(env.history_stream().len() - 1, 30);
        assert_eq!(env.tick(), 600);
    }

    #[test]
    fn same_seed_same_episode() {
        let spec = TaskSpec::default_for(TaskKind::Wipe);
        let run = || {
            let mut env = Env::new(&spec, 9, 10).unwrap();
            let mut out = Vec::new();
            for _ in 0..20 {
                out.push(env.step(&[0.0, 0.0, -0.002, 0.0, 0.0, 0.0, GRIPPER_HOLD]).force);
            }
            (out, env.observe().vision)
        };
        assert_eq!(run(), run());
    }
}
