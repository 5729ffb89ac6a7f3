use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::env::Env;
use super::geometry::rotate;
use super::TaskKind;
use crate::fast_expert::ACTION_DIM;

const CONTACT_FORCE: f64 = 0.8;
const PEG_AXIAL_FORCE: f64 = 2.5;
const GRIPPER: f64 = 0.02;
/// Free-space speed per action step, m.
const TRANSIT: f64 = 6e-4;

/// Force-reactive demonstrator. It perceives the target through the same
/// biased vision model as the policy and corrects with the sensed force.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    kind: TaskKind,
    rng: ChaCha8Rng,
    tracking: bool,
    best_depth: f64,
    stall: usize,
    lift: usize,
    lift_dir: f64,
    integral: f64,
}

impl ScriptedExpert {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        ScriptedExpert {
            kind,
            rng,
            tracking: false,
            best_depth: f64::NEG_INFINITY,
            stall: 0,
            lift: 0,
            lift_dir: 1.0,
            integral: 0.0,
        }
    }

    pub fn act(&mut self, env: &Env) -> [f64; ACTION_DIM] {
        let (d, dtheta) = match self.kind {
            TaskKind::Peg => self.peg(env),
            TaskKind::Wipe => self.wipe(env),
        };
        let frame = env.perceived_frame();
        let w = rotate(d, frame.theta);
        let mut a = [w[0], 0.0, w[1], 0.0, dtheta, 0.0, GRIPPER];
        let bounds = crate::fast_expert::ActionBounds::default();
        bounds.clamp(&mut a);
        a
    }

    fn jitter(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std).expect("valid std").sample(&mut self.rng)
    }

    fn align(env: &Env) -> f64 {
        let frame = env.perceived_frame();
        (frame.theta - env.state.setpoint[2]).clamp(-0.02, 0.02)
    }

    fn peg(&mut self, env: &Env) -> ([f64; 2], f64) {
        let frame = env.perceived_frame();
        let s = &env.state;
        let sp = frame.to_local([s.setpoint[0], s.setpoint[1]]);
        let pos = frame.to_local([s.pose[0], s.pose[1]]);
        let f = env.recent_force(3);
        let fl = env.perceived_force(&f);
        let contact = fl[0].hypot(fl[1]) > CONTACT_FORCE;
        let dtheta = Self::align(env);
        if self.lift > 0 {
            self.lift -= 1;
            return ([self.lift_dir * 6e-4, 1e-3], dtheta);
        }
        let depth = -pos[1];
        let (mut dx, mut dz);
        if !contact && !self.tracking {
            dx = (-sp[0]).clamp(-TRANSIT, TRANSIT);
            dz = if sp[0].abs() < 1e-3 {
                if pos[1] > 0.006 {
                    -TRANSIT
                } else {
                    -8e-4
                }
            } else if pos[1] > 0.008 {
                -TRANSIT
            } else {
                0.0
            };
        } else {
            self.tracking = true;
            dx = (6e-4 * fl[0]).clamp(-1e-3, 1e-3) + self.jitter(1.5e-4);
            dz = (-7e-4 + 3e-4 * (fl[1] - PEG_AXIAL_FORCE)).clamp(-7e-4, 7e-4);
            if depth > self.best_depth + 3e-4 {
                self.best_depth = depth;
                self.stall = 0;
            } else {
                self.stall += 1;
            }
            if self.stall > 12 && fl[1] > 2.0 {
                self.stall = 0;
                self.lift = 3;
                self.lift_dir = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }
        dx += self.jitter(5e-5);
        dz += self.jitter(5e-5);
        ([dx, dz], dtheta)
    }

    fn wipe(&mut self, env: &Env) -> ([f64; 2], f64) {
        let frame = env.perceived_frame();
        let s = &env.state;
        let w = &env.spec.params.wipe;
        let sp = frame.to_local([s.setpoint[0], s.setpoint[1]]);
        let pos = frame.to_local([s.pose[0], s.pose[1]]);
        let fl = env.perceived_force(&env.recent_force(3));
        let normal = fl[1];
        let dtheta = Self::align(env);
        if !self.tracking && normal > 1.0 {
            self.tracking = true;
        }
        let (mut dx, mut dz);
        if !self.tracking {
            dx = (w.strip_start - 0.003 - sp[0]).clamp(-0.0025, 0.0025);
            dz = if pos[1] > 0.003 { -1e-3 } else { -5e-4 };
        } else {
            let err = w.target_force - normal;
            self.integral = (self.integral + err).clamp(-20.0, 20.0);
            dz = (-(2e-4 * err + 1e-5 * self.integral)).clamp(-6e-4, 6e-4);
            dx = if pos[0] < w.strip_start + w.strip_length + 0.005 {
                1.2e-3
            } else {
                0.0
            };
        }
        dx += self.jitter(5e-5);
        dz += self.jitter(3e-5);
        ([dx, dz], dtheta)
    }
}
