use favla::model::{ModelConfig, NormStats, Policy};
use favla::runtime::{
    run_cycle, run_episode, schedule_invocations, ChunkBuffer, CycleContext, CycleTrace,
    NoiseSource, ScheduleConfig, ScheduleMode,
};
use favla::simsuite::{force_norm, Env, TaskKind, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained policy whose adapters are live and whose actions stay small.
fn policy(seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::default();
    let mut norm = NormStats::identity(cfg.slow.vision_dim);
    norm.action.std = vec![2e-4; 7];
    let mut p = Policy::new(cfg, norm, &mut rng).unwrap();
    let ids: Vec<_> = p.params.ids().collect();
    for id in ids {
        let v = p.params.value_mut(id);
        if v.data().iter().all(|&x| x == 0.0) {
            v.data_mut().iter_mut().for_each(|x| *x = 0.1 * rng.gen_range(-1.0..1.0));
        }
    }
    p
}

fn run_cycles(spec: &TaskSpec, policy: &Policy, cfg: &ScheduleConfig, seed: u64, cycles: u64) -> Vec<CycleTrace> {
    let h = policy.model.horizon();
    let mut env = Env::new(spec, seed, policy.model.cfg.slow.tcn.window).unwrap();
    let mut noise = NoiseSource::new(seed, h);
    let mut buffer = ChunkBuffer::new(h.div_ceil(cfg.executed_steps) + 1);
    (0..cycles)
        .map(|cycle| {
            run_cycle(
                &mut env,
                CycleContext {
                    policy,
                    cfg,
                    noise: &mut noise,
                    buffer: &mut buffer,
                    cycle,
                },
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn constant_force_makes_extra_calls_redundant() {
    let mut spec = TaskSpec::default_for(TaskKind::Peg);
    spec.params.contact.force_noise = 0.0;
    spec.params.contact.torque_noise = 0.0;
    let p = policy(1);
    let base = ScheduleConfig::default();
    let one = run_cycles(&spec, &p, &base.with_mode(ScheduleMode::Fixed(1)), 5, 3);
    let four = run_cycles(&spec, &p, &base.with_mode(ScheduleMode::Fixed(4)), 5, 3);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(b.invocations.len(), 4);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.force, [0.0; 6], "left free space");
            assert_eq!(sa.action, sb.action);
        }
    }
}

#[test]
fn cycles_follow_the_schedule() {
    let spec = TaskSpec::default_for(TaskKind::Peg);
    let p = policy(2);
    let cfg = ScheduleConfig::default();
    let traces = run_cycles(&spec, &p, &cfg, 8, 4);
    for (i, c) in traces.iter().enumerate() {
        let (n, offsets) = schedule_invocations(c.nu_hat, &cfg).unwrap();
        assert_eq!(c.n_t, n);
        assert_eq!(c.offsets, offsets);
        assert_eq!(c.invocations.len(), n);
        assert_eq!(c.invocations[0], c.steps[0].tick, "first call at the cycle start");
        assert_eq!(c.noise_id, i as u64);
        assert!((1..=cfg.n_max).contains(&c.n_t));
        let bounds = &p.model.cfg.fast.action_bounds;
        assert!(c.steps.iter().all(|s| bounds.contains(&s.action)));
    }
    let fixed = run_cycles(&spec, &p, &cfg.with_mode(ScheduleMode::Fixed(1)), 8, 2);
    assert!(fixed.iter().all(|c| c.invocations.len() == 1));
}

#[test]
fn episodes_are_seed_deterministic_and_self_consistent() {
    let mut spec = TaskSpec::default_for(TaskKind::Peg);
    spec.params.step_budget = 80;
    let p = policy(3);
    let cfg = ScheduleConfig::default();
    let a = run_episode(&spec, &p, &cfg, 21).unwrap();
    let b = run_episode(&spec, &p, &cfg, 21).unwrap();
    assert_eq!(a, b);
    let norms: Vec<f64> = a.step_forces().map(force_norm).collect();
    assert_eq!(a.steps, norms.len());
    assert_eq!(a.peak_force, norms.iter().cloned().fold(0.0, f64::max));
    assert_eq!(a.ae_calls, a.cycles.iter().map(|c| c.n_t).sum::<usize>());
    let threaded = favla::runtime::run_episodes(&spec, &p, &cfg, &[21, 4, 13], 3).unwrap();
    let serial = favla::runtime::run_episodes(&spec, &p, &cfg, &[21, 4, 13], 1).unwrap();
    assert_eq!(threaded, serial);
    assert_eq!(threaded.iter().find(|r| r.seed == 21).unwrap(), &a);
}
