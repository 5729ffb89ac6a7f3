//! Fast-slow closed loop in virtual time: one slow pass per cycle, `n_t`
//! expert calls scheduled from the predicted force variance, fixed noise
//! and state within a cycle, and temporal ensembling across cycles.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fast_expert::{ActionChunk, ACTION_DIM};
use crate::force_features::FORCE_AXES;
use crate::model::Policy;
use crate::numerics::Tensor;
use crate::simsuite::{force_norm, Env, Status, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScheduleMode {
    Adaptive,
    Fixed(usize),
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleMode::Adaptive => f.write_str("adaptive"),
            ScheduleMode::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(ScheduleMode::Adaptive);
        }
        s.strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n >= 1)
            .map(ScheduleMode::Fixed)
            .ok_or_else(|| Error::Config(format!("invalid mode '{s}' (adaptive | fixed:<n>)")))
    }
}

impl Serialize for ScheduleMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScheduleMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Compute delays in action steps; zero means both passes are instantaneous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub slow_steps: usize,
    pub fast_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub n_max: usize,
    /// Executed action steps per slow cycle (`E`).
    pub executed_steps: usize,
    pub ensemble_decay: f64,
    pub mode: ScheduleMode,
    pub latency: LatencyModel,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            n_max: 4,
            executed_steps: 16,
            ensemble_decay: 0.1,
            mode: ScheduleMode::Adaptive,
            latency: LatencyModel::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("schedule.n_max must be at least 1".into()));
        }
        if self.executed_steps == 0 || self.executed_steps > horizon {
            return Err(Error::Config(format!(
                "schedule.executed_steps must lie in [1, {horizon}]"
            )));
        }
        if !(self.ensemble_decay >= 0.0) {
            return Err(Error::Config("schedule.ensemble_decay must be >= 0".into()));
        }
        if let ScheduleMode::Fixed(n) = self.mode {
            if n == 0 || n > self.n_max {
                return Err(Error::Config(format!(
                    "mode fixed:{n} needs 1 <= n <= n_max = {}",
                    self.n_max
                )));
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: ScheduleMode) -> Self {
        ScheduleConfig {
            mode,
            ..self.clone()
        }
    }
}

/// `n_t = max(1, ceil(nu * N_max))` (or the fixed count) and evenly spaced
/// offsets `floor(k * E / n_t)`.
pub fn schedule_invocations(nu_hat: f64, cfg: &ScheduleConfig) -> Result<(usize, Vec<usize>)> {
    if !(0.0..1.0).contains(&nu_hat) {
        return Err(Error::Invalid(format!(
            "predicted variance {nu_hat} outside [0, 1)"
        )));
    }
    let n = match cfg.mode {
        ScheduleMode::Adaptive => ((nu_hat * cfg.n_max as f64).ceil() as usize).max(1),
        ScheduleMode::Fixed(n) => n,
    };
    let e = cfg.executed_steps;
    Ok((n, (0..n).map(|k| k * e / n).collect()))
}

/// Buffered chunks sorted by origin tick.
#[derive(Clone, Debug, Default)]
pub struct ChunkBuffer {
    entries: Vec<ActionChunk>,
    capacity: usize,
}

impl ChunkBuffer {
    pub fn new(capacity: usize) -> Self {
        ChunkBuffer {
            entries: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    /// A chunk with an already buffered origin replaces the older one.
    pub fn push(&mut self, chunk: ActionChunk) {
        match self
            .entries
            .binary_search_by_key(&chunk.origin_tick, |c| c.origin_tick)
        {
            Ok(i) => self.entries[i] = chunk,
            Err(i) => self.entries.insert(i, chunk),
        }
        while self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
    }

    /// Drops chunks that end before `tick`.
    pub fn prune(&mut self, tick: u64) {
        self.entries
            .retain(|c| c.origin_tick + c.actions.len() as u64 > tick);
    }

    pub fn entries(&self) -> &[ActionChunk] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Weighted mean over covering chunks with `w = exp(-m * rank)`, newest
/// chunk rank 0.
pub fn temporal_ensemble(buffer: &ChunkBuffer, tick: u64, decay: f64) -> Result<[f64; ACTION_DIM]> {
    let mut out = [0.0; ACTION_DIM];
    let mut total = 0.0;
    for (rank, chunk) in buffer
        .entries()
        .iter()
        .rev()
        .filter(|c| c.covers(tick))
        .enumerate()
    {
        let w = (-decay * rank as f64).exp();
        let a = chunk.at(tick).expect("covering chunk");
        for i in 0..ACTION_DIM {
            out[i] += w * a[i];
        }
        total += w;
    }
    if total == 0.0 {
        return Err(Error::Invalid(format!("no buffered chunk covers tick {tick}")));
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Seeded source of cycle noise `eps ~ N(0, I)` of shape `[H, 7]`.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    horizon: usize,
    next_id: u64,
}

impl NoiseSource {
    pub fn new(seed: u64, horizon: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        NoiseSource {
            rng,
            horizon,
            next_id: 0,
        }
    }

    pub fn draw(&mut self) -> (u64, Tensor) {
        let data = (0..self.horizon * ACTION_DIM)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        let id = self.next_id;
        self.next_id += 1;
        (id, Tensor::matrix(self.horizon, ACTION_DIM, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub tick: u64,
    pub action: [f64; ACTION_DIM],
    pub force: [f64; FORCE_AXES],
    /// Physical contact at any point during the step.
    pub contact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub slow_tick: u64,
    pub nu_hat: f64,
    pub n_t: usize,
    pub offsets: Vec<usize>,
    /// Action-step ticks at which the expert ran.
    pub invocations: Vec<u64>,
    pub noise_id: u64,
    pub steps: Vec<StepTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

/// Everything that varies per cycle besides the environment.
pub struct CycleContext<'a> {
    pub policy: &'a Policy,
    pub cfg: &'a ScheduleConfig,
    pub noise: &'a mut NoiseSource,
    pub buffer: &'a mut ChunkBuffer,
    pub cycle: u64,
}

fn hold_action(env: &Env) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    a[ACTION_DIM - 1] = env.state.gripper;
    a
}

/// One slow cycle: slow pass, scheduling, `n_t` expert calls under one
/// noise draw and the cycle-start state, then `E` executed steps.
pub fn run_cycle(env: &mut Env, ctx: CycleContext<'_>) -> Result<CycleTrace> {
    let CycleContext {
        policy,
        cfg,
        noise,
        buffer,
        cycle,
    } = ctx;
    let steps = policy.model.cfg.fast.euler_steps;
    let mut obs = env.observe();
    obs.slow_tick = cycle;
    let origin = env.frame();
    let slow = policy.slow_pass(&obs, cycle)?;
    let (n_t, offsets) = schedule_invocations(slow.nu_hat, cfg)?;
    let (noise_id, eps) = noise.draw();
    let state = policy.normalized_state(&obs.state);
    let e = cfg.executed_steps;
    let lat = cfg.latency;
    // (compute step, availability step) per invocation.
    let plan: Vec<(usize, usize)> = offsets
        .iter()
        .map(|&o| {
            let run = (o + lat.slow_steps).min(e - 1);
            (run, run + lat.fast_steps)
        })
        .collect();
    let mut pending: Vec<(usize, ActionChunk)> = Vec::new();
    let mut trace = CycleTrace {
        slow_tick: cycle,
        nu_hat: slow.nu_hat,
        n_t,
        offsets,
        invocations: Vec::with_capacity(n_t),
        noise_id,
        steps: Vec::with_capacity(e),
        failed: None,
    };
    for k in 0..e {
        for &(run, ready) in plan.iter().filter(|p| p.0 == k) {
            let z = policy.encode_force(&env.latest_window())?;
            let chunk = policy.sample_chunk(&state, &slow.cache, &z, &eps, steps, origin, noise_id)?;
            trace.invocations.push(origin + run as u64);
            pending.push((ready, chunk));
        }
        let (ready, waiting): (Vec<_>, Vec<_>) = pending.into_iter().partition(|p| p.0 <= k);
        pending = waiting;
        for (_, chunk) in ready {
            buffer.push(chunk);
        }
        let tick = env.frame();
        let action = temporal_ensemble(buffer, tick, cfg.ensemble_decay).unwrap_or_else(|_| hold_action(env));
        let outcome = env.step(&action);
        trace.steps.push(StepTrace {
            tick,
            action,
            force: outcome.force,
            contact: outcome.contact,
        });
        if let Status::Failed(reason) = &outcome.status {
            if reason.starts_with("fault") {
                trace.failed = Some(reason.clone());
            }
        }
        if outcome.status.is_done() {
            break;
        }
    }
    // Late chunks still belong to this cycle's noise and origin.
    for (_, chunk) in pending {
        buffer.push(chunk);
    }
    buffer.prune(env.frame());
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub status: Status,
    pub peak_force: f64,
    pub mean_force: f64,
    pub steps: usize,
    pub ae_calls: usize,
    pub first_contact_step: Option<usize>,
    pub cycles: Vec<CycleTrace>,
}

impl EpisodeResult {
    pub fn step_forces(&self) -> impl Iterator<Item = &[f64; FORCE_AXES]> {
        self.cycles.iter().flat_map(|c| c.steps.iter().map(|s| &s.force))
    }
}

/// Summary statistics recomputed from cycle traces alone.
pub fn summarize(cycles: &[CycleTrace]) -> (f64, f64, usize, usize, Option<usize>) {
    let norms: Vec<f64> = cycles
        .iter()
        .flat_map(|c| c.steps.iter().map(|s| force_norm(&s.force)))
        .collect();
    let peak = norms.iter().cloned().fold(0.0, f64::max);
    let mean = if norms.is_empty() {
        0.0
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let calls = cycles.iter().map(|c| c.n_t).sum();
    let first = cycles.iter().flat_map(|c| &c.steps).position(|s| s.contact);
    (peak, mean, norms.len(), calls, first)
}

/// Runs cycles until success, failure or the step budget.
pub fn run_episode(
    spec: &TaskSpec,
    policy: &Policy,
    cfg: &ScheduleConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    let horizon = policy.model.horizon();
    cfg.validate(horizon)?;
    let tau = policy.model.cfg.slow.tcn.window;
    let mut env = Env::new(spec, seed, tau)?;
    let mut noise = NoiseSource::new(seed, horizon);
    let mut buffer = ChunkBuffer::new(horizon.div_ceil(cfg.executed_steps) + 1);
    let mut cycles = Vec::new();
    let mut status = env.status();
    let mut cycle = 0;
    while !status.is_done() {
        let trace = run_cycle(
            &mut env,
            CycleContext {
                policy,
                cfg,
                noise: &mut noise,
                buffer: &mut buffer,
                cycle,
            },
        )?;
        let failed = trace.failed.clone();
        cycles.push(trace);
        cycle += 1;
        status = match failed {
            Some(f) => Status::Failed(f),
            None => env.status(),
        };
    }
    let (peak_force, mean_force, steps, ae_calls, first_contact_step) = summarize(&cycles);
    Ok(EpisodeResult {
        seed,
        success: status == Status::Success,
        status,
        peak_force,
        mean_force,
        steps,
        ae_calls,
        first_contact_step,
        cycles,
    })
}

/// Runs one episode per seed on up to `threads` workers; results come back
/// in seed order regardless of scheduling.
pub fn run_episodes(
    spec: &TaskSpec,
    policy: &Policy,
    cfg: &ScheduleConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<EpisodeResult>> {
    let workers = threads.clamp(1, seeds.len().max(1));
    let mut results: Vec<EpisodeResult> = if workers == 1 {
        seeds
            .iter()
            .map(|&s| run_episode(spec, policy, cfg, s))
            .collect::<Result<_>>()?
    } else {
        let chunk = seeds.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&s| run_episode(spec, policy, cfg, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(seeds.len());
            for h in handles {
                all.extend(h.join().expect("episode worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    results.sort_by_key(|r| r.seed);
    Ok(results)
}
