use serde::{Deserialize, Serialize};

use super::geometry::{add, dot, scale, sub, Polygon, Pose2, Vec2};
use super::{TaskKind, TaskParams, TaskSpec};
use crate::error::{Error, Result};

/// Width of one wipe cell along the strip, m.
pub const WIPE_CELL: f64 = 1e-3;

/// Contact force on the tool (N) and torque about the tool origin (N m).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub fx: f64,
    pub fz: f64,
    pub ty: f64,
}

impl Wrench {
    pub fn force_norm(&self) -> f64 {
        self.fx.hypot(self.fz)
    }

    /// Embedding into the `(Fx, Fy, Fz, Tx, Ty, Tz)` sensor layout.
    pub fn to_axes(&self) -> [f64; 6] {
        [self.fx, 0.0, self.fz, 0.0, self.ty, 0.0]
    }
}

/// Static geometry of one episode, world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub kind: TaskKind,
    /// Hole mouth centre (peg) or board surface centre (wipe).
    pub frame: Pose2,
    pub obstacles: Vec<Polygon>,
    /// Obstacle vertices that can poke into the tool.
    pub corners: Vec<Vec2>,
    /// Tool rectangle and its boundary sample points, tool frame (origin at
    /// the bottom centre, +z along the tool axis).
    pub tool: Polygon,
    pub tool_points: Vec<Vec2>,
    pub cells: usize,
}

fn tool_shape(half_width: f64, length: f64, side_extent: f64) -> (Polygon, Vec<Vec2>) {
    let tool = Polygon::new(vec![
        [-half_width, 0.0],
        [half_width, 0.0],
        [half_width, length],
        [-half_width, length],
    ]);
    let mut points = Vec::new();
    let n = 10;
    for i in 0..=n {
        points.push([-half_width + 2.0 * half_width * i as f64 / n as f64, 0.0]);
    }
    let mut y = 1e-3;
    while y <= side_extent + 1e-12 {
        points.push([-half_width, y]);
        points.push([half_width, y]);
        y += 1e-3;
    }
    (tool, points)
}

impl Scene {
    pub fn peg(params: &TaskParams, hole_x: f64, rotation: f64) -> Scene {
        let g = &params.peg;
        let c = &params.contact;
        let (w, d) = (g.hole_half_width, g.hole_depth);
        let cw = c.chamfer_width;
        let ch = cw * c.chamfer_angle_deg.to_radians().tan();
        let (x_out, bottom) = (0.2, d + 0.01);
        let mut left = vec![[-x_out, -bottom], [-w, -bottom]];
        let mut right = vec![[w, -bottom], [x_out, -bottom], [x_out, 0.0]];
        let mut corners = Vec::new();
        if cw > 1e-9 {
            left.extend([[-w, -ch], [-w - cw, 0.0]]);
            right.extend([[w + cw, 0.0], [w, -ch]]);
            corners.extend([[-w, -ch], [-w - cw, 0.0], [w, -ch], [w + cw, 0.0]]);
        } else {
            left.push([-w, 0.0]);
            right.push([w, 0.0]);
            corners.extend([[-w, 0.0], [w, 0.0]]);
        }
        left.push([-x_out, 0.0]);
        let floor = vec![[-w, -bottom], [w, -bottom], [w, -d], [-w, -d]];
        let frame = Pose2 {
            origin: [hole_x, 0.0],
            theta: rotation,
        };
        let (tool, tool_points) = tool_shape(g.peg_half_width, g.peg_length, 0.025);
        Scene {
            kind: TaskKind::Peg,
            frame,
            obstacles: [left, right, floor]
                .into_iter()
                .map(|v| Polygon::new(v).transformed(&frame))
                .collect(),
            corners: corners.into_iter().map(|p| frame.to_world(p)).collect(),
            tool,
            tool_points,
            cells: 0,
        }
    }

    pub fn wipe(params: &TaskParams, surface_z: f64, tilt: f64) -> Scene {
        let frame = Pose2 {
            origin: [0.0, surface_z],
            theta: tilt,
        };
        let board = Polygon::new(vec![[-0.15, -0.02], [0.15, -0.02], [0.15, 0.0], [-0.15, 0.0]]);
        let (tool, tool_points) = tool_shape(params.peg.peg_half_width, params.peg.peg_length, 0.005);
        Scene {
            kind: TaskKind::Wipe,
            frame,
            obstacles: vec![board.transformed(&frame)],
            corners: Vec::new(),
            tool,
            tool_points,
            cells: (params.wipe.strip_length / WIPE_CELL).round().max(1.0) as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    /// Tool origin `(x, z, theta)`.
    pub pose: [f64; 3],
    pub vel: [f64; 3],
    /// Commanded pose tracked by the PD coupling.
    pub setpoint: [f64; 3],
    pub gripper: f64,
    pub scene: Scene,
    pub contact: Wrench,
    /// Summed contact normal force magnitude, N.
    pub normal_force: f64,
    pub in_contact: bool,
    pub tick: u64,
    pub action_steps: usize,
    pub peak_force: f64,
    pub wiped: Vec<bool>,
    pub fault: Option<String>,
}

impl SimState {
    pub fn new(scene: Scene, pose: [f64; 3], gripper: f64) -> SimState {
        let cells = scene.cells;
        SimState {
            pose,
            vel: [0.0; 3],
            setpoint: pose,
            gripper,
            scene,
            contact: Wrench::default(),
            normal_force: 0.0,
            in_contact: false,
            tick: 0,
            action_steps: 0,
            peak_force: 0.0,
            wiped: vec![false; cells],
            fault: None,
        }
    }

    pub fn tool_pose(&self) -> Pose2 {
        Pose2 {
            origin: [self.pose[0], self.pose[1]],
            theta: self.pose[2],
        }
    }

    /// Tool origin in the scene frame.
    pub fn local_position(&self) -> Vec2 {
        self.scene.frame.to_local([self.pose[0], self.pose[1]])
    }

    pub fn insertion_depth(&self) -> f64 {
        -self.local_position()[1]
    }

    pub fn wiped_fraction(&self) -> f64 {
        if self.wiped.is_empty() {
            return 0.0;
        }
        self.wiped.iter().filter(|&&w| w).count() as f64 / self.wiped.len() as f64
    }

    pub fn kinetic_energy(&self, params: &TaskParams) -> f64 {
        let k = &params.controller;
        0.5 * k.mass * (self.vel[0].powi(2) + self.vel[1].powi(2)) + 0.5 * k.inertia * self.vel[2].powi(2)
    }
}

struct ContactEval {
    wrench: Wrench,
    normal: f64,
    /// Scene-frame x range of penetrating tool points and their normal force.
    patches: Vec<(f64, f64, f64)>,
}

fn point_force(
    state: &SimState,
    params: &TaskParams,
    at: Vec2,
    depth: f64,
    normal: Vec2,
) -> (Vec2, f64) {
    let c = &params.contact;
    let r = sub(at, [state.pose[0], state.pose[1]]);
    let v = add([state.vel[0], state.vel[1]], scale([-r[1], r[0]], state.vel[2]));
    let vn = dot(v, normal);
    let fn_ = (c.stiffness * depth - c.damping * vn).clamp(0.0, c.force_clip);
    let tangent = [-normal[1], normal[0]];
    let vt = dot(v, tangent);
    let ft = -c.friction * fn_ * (vt / c.slip_velocity).tanh();
    (add(scale(normal, fn_), scale(tangent, ft)), fn_)
}

fn evaluate_contacts(state: &SimState, params: &TaskParams) -> ContactEval {
    let scene = &state.scene;
    let pose = state.tool_pose();
    let origin = [state.pose[0], state.pose[1]];
    let world_points: Vec<Vec2> = scene.tool_points.iter().map(|&p| pose.to_world(p)).collect();
    let mut wrench = Wrench::default();
    let mut total_normal = 0.0;
    let mut patches = Vec::new();
    let apply = |at: Vec2, f: Vec2, wrench: &mut Wrench| {
        let r = sub(at, origin);
        wrench.fx += f[0];
        wrench.fz += f[1];
        wrench.ty += r[0] * f[1] - r[1] * f[0];
    };
    for poly in &scene.obstacles {
        let mut deepest: Option<(f64, Vec2)> = None;
        let (mut cx, mut cz, mut wsum) = (0.0, 0.0, 0.0);
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &p in &world_points {
            if let Some((depth, n)) = poly.penetration(p) {
                if deepest.map_or(true, |(d, _)| depth > d) {
                    deepest = Some((depth, n));
                }
                cx += depth * p[0];
                cz += depth * p[1];
                wsum += depth;
                let lx = scene.frame.to_local(p)[0];
                xmin = xmin.min(lx);
                xmax = xmax.max(lx);
            }
        }
        if let Some((depth, n)) = deepest {
            let at = [cx / wsum, cz / wsum];
            let (f, fn_) = point_force(state, params, at, depth, n);
            apply(at, f, &mut wrench);
            total_normal += fn_;
            patches.push((xmin, xmax, fn_));
        }
    }
    for &corner in &scene.corners {
        let local = pose.to_local(corner);
        if let Some((depth, n_tool)) = scene.tool.penetration(local) {
            let n = scale(pose.dir_to_world(n_tool), -1.0);
            let (f, fn_) = point_force(state, params, corner, depth, n);
            apply(corner, f, &mut wrench);
            total_normal += fn_;
        }
    }
    ContactEval {
        wrench,
        normal: total_normal,
        patches,
    }
}

/// Advances one physics tick: shifts the commanded pose by `delta`, then
/// integrates the PD-coupled rigid body with semi-implicit Euler under the
/// penalty contact wrench, which is returned.
pub fn physics_step(
    state: &mut SimState,
    params: &TaskParams,
    delta: [f64; 3],
    dt: f64,
) -> Result<Wrench> {
    if let Some(f) = &state.fault {
        return Err(Error::EnvFault(f.clone()));
    }
    for i in 0..3 {
        state.setpoint[i] += delta[i];
    }
    let eval = evaluate_contacts(state, params);
    let k = &params.controller;
    let w = eval.wrench;
    let forces = [w.fx, w.fz];
    for i in 0..2 {
        let f = k.kp * (state.setpoint[i] - state.pose[i]) - k.kd * state.vel[i] + forces[i];
        state.vel[i] += dt * f / k.mass;
    }
    let tau = k.kp_rot * (state.setpoint[2] - state.pose[2]) - k.kd_rot * state.vel[2] + w.ty;
    state.vel[2] += dt * tau / k.inertia;
    for i in 0..3 {
        state.pose[i] += dt * state.vel[i];
    }
    state.tick += 1;
    state.contact = w;
    state.normal_force = eval.normal;
    state.in_contact = eval.normal > 0.0;
    state.peak_force = state.peak_force.max(w.force_norm());
    if state.scene.kind == TaskKind::Wipe {
        let band = params.wipe.force_band;
        for (xmin, xmax, fn_) in eval.patches {
            if fn_ >= band[0] && fn_ <= band[1] {
                mark_wiped(state, params, xmin, xmax);
            }
        }
    }
    let finite = state.pose.iter().chain(&state.vel).all(|v| v.is_finite());
    if !finite {
        let msg = format!("non-finite state at tick {}", state.tick);
        state.fault = Some(msg.clone());
        return Err(Error::EnvFault(msg));
    }
    Ok(w)
}

fn mark_wiped(state: &mut SimState, params: &TaskParams, xmin: f64, xmax: f64) {
    let start = params.wipe.strip_start;
    let n = state.wiped.len();
    for (i, cell) in state.wiped.iter_mut().enumerate().take(n) {
        let lo = start + i as f64 * WIPE_CELL;
        let hi = lo + WIPE_CELL;
        if hi > xmin && lo < xmax {
            *cell = true;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum Status {
    Running,
    Success,
    Failed(String),
}

impl Status {
    pub fn is_done(&self) -> bool {
        !matches!(self, Status::Running)
    }
}

pub fn check_success(state: &SimState, spec: &TaskSpec) -> Status {
    let p = &spec.params;
    if let Some(f) = &state.fault {
        return Status::Failed(format!("fault: {f}"));
    }
    if state.peak_force > p.f_max {
        return Status::Failed(format!(
            "safety: contact force {:.2} N exceeded {:.2} N",
            state.peak_force, p.f_max
        ));
    }
    let done = match spec.kind {
        TaskKind::Peg => {
            let local = state.local_position();
            state.insertion_depth() >= p.peg.insertion_depth && local[0].abs() < p.peg.hole_half_width
        }
        TaskKind::Wipe => state.wiped_fraction() >= p.wipe.wiped_fraction,
    };
    if done {
        Status::Success
    } else if state.action_steps >= p.step_budget {
        Status::Failed(format!("budget: {} steps exhausted", p.step_budget))
    } else {
        Status::Running
    }
}
