use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AugmentConfig;
use crate::error::{Error, Result};
use crate::fast_expert::ACTION_DIM;
use crate::force_features::{
    label_episode, median_sqrt_above, smoothed_variance_series, ForceSample, ForceWindow,
    VarianceLabelConfig, WindowKind, FORCE_AXES,
};
use crate::io::dataset::{
    episode_file_name, write_episode, write_manifest, Dataset, DatasetManifest, DroppedEpisode,
    EpisodeEntry, EpisodeRecord, DATASET_FORMAT,
};
use crate::model::{Batch, NormStats, Policy, Standardizer};
use crate::numerics::Tensor;
use crate::simsuite::{
    episode_seed, Env, ScriptedExpert, Status, TaskSpec, CAMERAS, DATA_STREAM, PHYSICS_HZ,
    VISION_DIM,
};
use crate::slow_context::{ObservationBundle, STATE_DIM};

/// Label settings before the dataset-level scale is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    /// Future window in frames.
    pub window: usize,
    pub weights: [f64; FORCE_AXES],
    pub alpha: f64,
    /// Fixed normalization scale; estimated from the data when absent.
    pub sigma: Option<f64>,
    /// Frames whose smoothed std is below this multiple of the sensor
    /// noise std are ignored when estimating sigma.
    pub noise_floor_factor: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        let d = VarianceLabelConfig::default();
        LabelingConfig {
            window: d.window,
            weights: d.weights,
            alpha: d.alpha,
            sigma: None,
            noise_floor_factor: 4.0,
        }
    }
}

impl LabelingConfig {
    pub fn with_sigma(&self, sigma: f64) -> VarianceLabelConfig {
        VarianceLabelConfig {
            window: self.window,
            weights: self.weights,
            alpha: self.alpha,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.with_sigma(self.sigma.unwrap_or(1.0)).validate()?;
        if !(self.noise_floor_factor >= 0.0) {
            return Err(Error::Config("labeling.noise_floor_factor must be >= 0".into()));
        }
        Ok(())
    }

    /// Std of the label statistic for a sensor producing pure noise.
    pub fn noise_floor(&self, spec: &TaskSpec) -> f64 {
        let c = &spec.params.contact;
        let var: f64 = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let s = if i < 3 { c.force_noise } else { c.torque_noise };
                w * s * s
            })
            .sum();
        self.noise_floor_factor * var.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub frames: usize,
    pub dropped: usize,
    pub sigma: f64,
    pub label_deciles: Vec<f64>,
}

/// The 30 Hz force series used for labels: one sample per frame `0..=frames`.
pub fn history_stream(force_log: &[[f64; FORCE_AXES]], frames: usize) -> Vec<[f64; FORCE_AXES]> {
    (0..=frames as u64)
        .map(|f| force_log[Env::history_index(f).min(force_log.len() - 1)])
        .collect()
}

/// Newest `tau` rows of the 200 Hz log as seen at `frame`, front-padded
/// with the earliest sample.
pub fn latest_window_rows(
    force_log: &[[f64; FORCE_AXES]],
    frame: usize,
    tau: usize,
) -> Vec<[f64; FORCE_AXES]> {
    let last = Env::history_index(frame as u64).min(force_log.len() - 1) as i64;
    (last - tau as i64 + 1..=last)
        .map(|j| force_log[j.max(0) as usize])
        .collect()
}

fn record_episode(spec: &TaskSpec, seed: u64, tau: usize) -> Result<std::result::Result<EpisodeRecord, String>> {
    let mut env = Env::new(spec, seed, tau)?;
    let mut expert = ScriptedExpert::new(spec.kind, seed);
    let mut rec = EpisodeRecord {
        task: spec.kind,
        seed,
        vision: Vec::new(),
        state: Vec::new(),
        history: Vec::new(),
        actions: Vec::new(),
        labels: Vec::new(),
        force_log: Vec::new(),
    };
    let mut status = env.status();
    while !status.is_done() {
        let obs = env.observe();
        rec.vision.push(obs.vision.concat());
        rec.state.push(obs.state);
        rec.history.push(obs.history_force.rows().copied().collect());
        let a = expert.act(&env);
        rec.actions.push(a);
        status = env.step(&a).status;
    }
    if let Status::Failed(reason) = status {
        return Ok(Err(reason));
    }
    rec.force_log = env.force_log().iter().map(|s| s.f).collect();
    Ok(Ok(rec))
}

fn deciles(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return Vec::new();
    }
    (0..=10)
        .map(|d| v[((v.len() - 1) * d + 5) / 10])
        .collect()
}

fn fit_norm(episodes: &[EpisodeRecord]) -> NormStats {
    let frames = episodes.iter().flat_map(|e| e.vision.iter());
    let vision = Standardizer::fit(
        VISION_DIM,
        frames.flat_map(|v| v.chunks_exact(VISION_DIM)),
    );
    let state = Standardizer::fit(
        STATE_DIM,
        episodes.iter().flat_map(|e| e.state.iter().map(|s| &s[..])),
    );
    let force = Standardizer::fit(
        FORCE_AXES,
        episodes.iter().flat_map(|e| e.force_log.iter().map(|s| &s[..])),
    );
    let action = Standardizer::fit(
        ACTION_DIM,
        episodes.iter().flat_map(|e| e.actions.iter().map(|s| &s[..])),
    );
    NormStats {
        vision,
        state,
        force,
        action,
    }
}

/// Rolls out the scripted demonstrator until `episodes` successful
/// demonstrations are recorded, labels them and writes the dataset to `out`.
pub fn generate_dataset(
    spec: &TaskSpec,
    episodes: usize,
    seed: u64,
    labeling: &LabelingConfig,
    tau: usize,
    out: &Path,
) -> Result<DatasetSummary> {
    if episodes == 0 {
        return Err(Error::Config("episode count must be >= 1".into()));
    }
    if tau == 0 {
        return Err(Error::Config("force window length must be >= 1".into()));
    }
    spec.validate()?;
    labeling.validate()?;
    let max_attempts = 4 * episodes + 16;
    let mut kept = Vec::with_capacity(episodes);
    let mut dropped = Vec::new();
    let mut attempt = 0u64;
    while kept.len() < episodes {
        if attempt as usize >= max_attempts {
            return Err(Error::Invalid(format!(
                "demonstrator succeeded on only {} of {attempt} episodes",
                kept.len()
            )));
        }
        let s = episode_seed(seed, DATA_STREAM, attempt);
        attempt += 1;
        match record_episode(spec, s, tau)? {
            Ok(mut rec) if rec.frames() >= labeling.window => {
                rec.round_to_f32();
                kept.push(rec);
            }
            Ok(rec) => dropped.push(DroppedEpisode {
                seed: s,
                reason: format!("only {} frames", rec.frames()),
            }),
            Err(reason) => dropped.push(DroppedEpisode { seed: s, reason }),
        }
    }

    let streams: Vec<_> = kept
        .iter()
        .map(|e| history_stream(&e.force_log, e.frames()))
        .collect();
    let noise_floor = labeling.noise_floor(spec);
    let sigma = match labeling.sigma {
        Some(s) => s,
        None => {
            let mut smoothed = Vec::new();
            for s in &streams {
                smoothed.extend(smoothed_variance_series(s, &labeling.with_sigma(1.0))?);
            }
            median_sqrt_above(smoothed, noise_floor).unwrap_or(noise_floor.max(1e-6))
        }
    };
    let label_cfg = labeling.with_sigma(sigma);
    let mut all_labels = Vec::new();
    for (rec, stream) in kept.iter_mut().zip(&streams) {
        let mut labels = label_episode(stream, &label_cfg)?;
        labels.truncate(rec.frames());
        rec.labels = labels.into_iter().map(|l| l as f32 as f64).collect();
        all_labels.extend_from_slice(&rec.labels);
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(kept.len());
    for (i, rec) in kept.iter().enumerate() {
        let file = episode_file_name(i, rec.seed);
        write_episode(&out.join(&file), rec)?;
        entries.push(EpisodeEntry {
            file,
            seed: rec.seed,
            frames: rec.frames(),
        });
    }
    let label_deciles = deciles(&all_labels);
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        task: spec.kind,
        seed,
        cameras: CAMERAS,
        vision_dim: VISION_DIM,
        tau,
        label: label_cfg,
        noise_floor,
        norm: fit_norm(&kept),
        episodes: entries,
        dropped,
        label_deciles: label_deciles.clone(),
    };
    write_manifest(out, &manifest)?;
    Ok(DatasetSummary {
        episodes: kept.len(),
        frames: all_labels.len(),
        dropped: manifest.dropped.len(),
        sigma,
        label_deciles,
    })
}

/// Recomputes a random 1% of labels from each episode's own force log.
pub fn check_label_alignment<R: Rng>(dataset: &Dataset, rng: &mut R) -> Result<()> {
    let index: Vec<(usize, usize)> = dataset
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.frames()).map(move |f| (e, f)))
        .collect();
    if index.is_empty() {
        return Err(Error::Invalid("dataset has no frames".into()));
    }
    let n = index.len().div_ceil(100);
    let mut recomputed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in sample(rng, index.len(), n) {
        let (e, f) = index[i];
        let ep = &dataset.episodes[e];
        if !recomputed.contains_key(&e) {
            let stream = history_stream(&ep.force_log, ep.frames());
            recomputed.insert(e, label_episode(&stream, &dataset.manifest.label)?);
        }
        let expect = recomputed[&e][f] as f32 as f64;
        if (expect - ep.labels[f]).abs() > 1e-6 {
            return Err(Error::format(
                &dataset.dir.join(&dataset.manifest.episodes[e].file),
                format!(
                    "label at frame {f} is {} but the force log gives {expect}",
                    ep.labels[f]
                ),
            ));
        }
    }
    Ok(())
}

struct NormEpisode {
    task: usize,
    /// `[frames][cameras * vision_dim]`.
    vision: Vec<Vec<f64>>,
    state: Vec<[f64; STATE_DIM]>,
    history: Vec<Vec<[f64; FORCE_AXES]>>,
    actions: Vec<[f64; ACTION_DIM]>,
    hold: [f64; ACTION_DIM],
    labels: Vec<f64>,
    force_log: Vec<[f64; FORCE_AXES]>,
}

fn norm_rows<const N: usize>(s: &Standardizer, rows: &[[f64; N]]) -> Vec<[f64; N]> {
    rows.iter()
        .map(|r| {
            let mut o = [0.0; N];
            s.apply(r, &mut o);
            o
        })
        .collect()
}

/// Draws normalized training batches from a set of episodes.
pub struct Sampler {
    episodes: Vec<NormEpisode>,
    /// `(episode, frame)` pairs in sampling order.
    index: Vec<(usize, usize)>,
    horizon: usize,
    tau: usize,
    executed_steps: usize,
    cameras: usize,
    vision_dim: usize,
}

impl Sampler {
    pub fn new(
        dataset: &Dataset,
        policy: &Policy,
        episodes: Vec<usize>,
        executed_steps: usize,
    ) -> Result<Sampler> {
        let cfg = &policy.model.cfg;
        let m = &dataset.manifest;
        if m.vision_dim != cfg.slow.vision_dim || m.cameras != cfg.slow.cameras {
            return Err(Error::Config(format!(
                "dataset has {}x{} vision features, model expects {}x{}",
                m.cameras, m.vision_dim, cfg.slow.cameras, cfg.slow.vision_dim
            )));
        }
        if m.tau != cfg.slow.tcn.window {
            return Err(Error::Config(format!(
                "dataset force window {} differs from model window {}",
                m.tau, cfg.slow.tcn.window
            )));
        }
        if executed_steps == 0 {
            return Err(Error::Config("executed steps must be >= 1".into()));
        }
        let norm = &policy.norm;
        let vd = m.vision_dim;
        let mut out = Vec::with_capacity(episodes.len());
        let mut index = Vec::new();
        for e in episodes {
            let ep = dataset
                .episodes
                .get(e)
                .ok_or_else(|| Error::Invalid(format!("episode {e} out of range")))?;
            let vision = ep
                .vision
                .iter()
                .map(|v| {
                    let mut o = vec![0.0; v.len()];
                    for (src, dst) in v.chunks_exact(vd).zip(o.chunks_exact_mut(vd)) {
                        norm.vision.apply(src, dst);
                    }
                    o
                })
                .collect();
            let mut hold = [0.0; ACTION_DIM];
            hold[ACTION_DIM - 1] = ep.actions.last().map_or(0.0, |a| a[ACTION_DIM - 1]);
            let mut hold_n = [0.0; ACTION_DIM];
            norm.action.apply(&hold, &mut hold_n);
            let k = out.len();
            index.extend((0..ep.frames()).map(|f| (k, f)));
            out.push(NormEpisode {
                task: ep.task.id(),
                vision,
                state: norm_rows(&norm.state, &ep.state),
                history: ep.history.iter().map(|h| norm_rows(&norm.force, h)).collect(),
                actions: norm_rows(&norm.action, &ep.actions),
                hold: hold_n,
                labels: ep.labels.clone(),
                force_log: norm_rows(&norm.force, &ep.force_log),
            });
        }
        if index.is_empty() {
            return Err(Error::Invalid("no training frames".into()));
        }
        Ok(Sampler {
            episodes: out,
            index,
            horizon: cfg.fast.horizon,
            tau: m.tau,
            executed_steps,
            cameras: m.cameras,
            vision_dim: vd,
        })
    }

    pub fn frames(&self) -> usize {
        self.index.len()
    }

    /// Samples frames uniformly. Each sample pairs the observation at `t0`
    /// with the latest force window at `t0 + k`, `k` uniform in `[0, E)`,
    /// and the target chunk of demonstrator actions from `t0`, padded with
    /// hold actions past the episode end.
    pub fn sample<R: Rng>(&self, batch: usize, aug: &AugmentConfig, rng: &mut R) -> Batch {
        let (h, tau) = (self.horizon, self.tau);
        let vw = self.cameras * self.vision_dim;
        let mut vision = Vec::with_capacity(batch * vw);
        let mut tasks = Vec::with_capacity(batch);
        let mut state = Vec::with_capacity(batch * STATE_DIM);
        let mut hist = Vec::with_capacity(batch * tau * FORCE_AXES);
        let mut latest = Vec::with_capacity(batch * tau * FORCE_AXES);
        let mut actions = Vec::with_capacity(batch * h * ACTION_DIM);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (e, t0) = self.index[rng.gen_range(0..self.index.len())];
            let ep = &self.episodes[e];
            let frames = ep.state.len();
            let k = rng.gen_range(0..self.executed_steps);
            let lw = latest_window_rows(&ep.force_log, (t0 + k).min(frames), tau);
            vision.extend_from_slice(&ep.vision[t0]);
            tasks.push(ep.task);
            state.extend_from_slice(&ep.state[t0]);
            hist.extend(ep.history[t0].iter().flatten());
            latest.extend(lw.iter().flatten());
            for j in 0..h {
                actions.extend_from_slice(ep.actions.get(t0 + j).unwrap_or(&ep.hold));
            }
            labels.push(ep.labels[t0]);
        }
        let mut jitter = |v: &mut [f64], std: f64| {
            if std > 0.0 {
                for x in v {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += std * z;
                }
            }
        };
        jitter(&mut vision, aug.vision_std);
        jitter(&mut hist, aug.force_std);
        jitter(&mut latest, aug.force_std);
        Batch {
            vision: Tensor::matrix(batch * self.cameras, self.vision_dim, vision),
            tasks,
            state: Tensor::matrix(batch, STATE_DIM, state),
            history_force: Tensor::matrix(batch * tau, FORCE_AXES, hist),
            latest_force: Tensor::matrix(batch * tau, FORCE_AXES, latest),
            actions: Tensor::matrix(batch * h, ACTION_DIM, actions),
            labels,
        }
    }
}

fn window_of(rows: &[[f64; FORCE_AXES]], tau: usize) -> Result<ForceWindow> {
    let samples = rows
        .iter()
        .enumerate()
        .map(|(i, f)| ForceSample {
            t: i as f64 / PHYSICS_HZ,
            f: *f,
        })
        .collect();
    ForceWindow::new(WindowKind::History, samples, tau)
}

/// Eval-mode variance predictions for every frame of one episode.
pub fn predict_labels(policy: &Policy, ep: &EpisodeRecord) -> Result<Vec<f64>> {
    let cfg = &policy.model.cfg.slow;
    let tau = cfg.tcn.window;
    (0..ep.frames())
        .map(|f| {
            let latest = latest_window_rows(&ep.force_log, f, tau);
            let obs = ObservationBundle {
                vision: ep.vision[f]
                    .chunks_exact(cfg.vision_dim)
                    .map(<[f64]>::to_vec)
                    .collect(),
                instruction: ep.task.id(),
                state: ep.state[f],
                history_force: window_of(&ep.history[f], tau)?,
                latest_force: window_of(&latest, tau)?,
                slow_tick: f as u64,
                fast_tick: 0,
            };
            Ok(policy.slow_pass(&obs, 0)?.nu_hat)
        })
        .collect()
}

/// Mean absolute variance-head error over all frames of `episodes`.
pub fn variance_mae(dataset: &Dataset, policy: &Policy, episodes: &[usize]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &e in episodes {
        let ep = &dataset.episodes[e];
        for (p, l) in predict_labels(policy, ep)?.iter().zip(&ep.labels) {
            sum += (p - l).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latest_window_pads_at_the_start() {
        let log: Vec<[f64; 6]> = (0..40).map(|i| [i as f64; 6]).collect();
        let w = latest_window_rows(&log, 0, 4);
        assert!(w.iter().all(|r| r[0] == 0.0));
        // frame 3 is tick 60, sample 20
        let w = latest_window_rows(&log, 3, 4);
        assert_eq!(w.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![17.0, 18.0, 19.0, 20.0]);
    }

    #[test]
    fn history_stream_picks_the_sample_at_each_frame() {
        let log: Vec<[f64; 6]> = (0..=40).map(|i| [i as f64; 6]).collect();
        let s = history_stream(&log, 6);
        let got: Vec<f64> = s.iter().map(|r| r[0]).collect();
        assert_eq!(got, vec![0.0, 6.0, 13.0, 20.0, 26.0, 33.0, 40.0]);
    }

    #[test]
    fn deciles_cover_the_range() {
        let v: Vec<f64> = (0..101).map(f64::from).collect();
        let d = deciles(&v);
        assert_eq!(d.len(), 11);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[5], 50.0);
        assert_eq!(d[10], 100.0);
    }

    #[test]
    fn noise_floor_scales_with_sensor_noise() {
        let spec = TaskSpec::default_for(crate::simsuite::TaskKind::Peg);
        let l = LabelingConfig::default();
        let c = &spec.params.contact;
        let expect = 4.0 * (0.5 * (c.force_noise.powi(2) + c.torque_noise.powi(2))).sqrt();
        assert!((l.noise_floor(&spec) - expect).abs() < 1e-12);
    }
}
