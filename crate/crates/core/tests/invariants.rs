use bcr_core::env::{Agent, CoordinationEnv, EventKind, JointAction, STAY};
use bcr_core::exploration::{generate_layout, ExplorationConfig, ExplorationEnv, LayoutMode};
use bcr_core::kitchen::{KitchenConfig, MiniKitchenEnv, Tile};
use bcr_core::reward::{
    context_weights, guarded_ratio, kl_divergence, BcrConfig, EpochRewardStats, FadeKind,
};
use proptest::prelude::*;

fn stats(e: f64, a: f64, h: f64) -> EpochRewardStats {
    EpochRewardStats {
        epoch: 0,
        mean_ext: e,
        mean_ai: a,
        mean_human: h,
        timestep_count: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exploration_steps_keep_agents_apart_and_coverage_consistent(
        seed in any::<u64>(),
        width in 3usize..10,
        height in 3usize..10,
        density in 0.0f64..0.3,
        actions in prop::collection::vec((0usize..5, 0usize..5), 1..120),
    ) {
        let layout = generate_layout(seed, width, height, density).unwrap();
        prop_assert!(layout.is_connected());
        let cfg = ExplorationConfig { horizon: actions.len(), ..ExplorationConfig::default() };
        let mut env = ExplorationEnv::with_layout(cfg, layout.clone()).unwrap();
        env.reset(seed ^ 1);
        let mut rounds = 0;
        for &(a, h) in &actions {
            let before = env.state().explored_count();
            let snap = env.snapshot();
            let out = env.step(JointAction::new(a, h)).unwrap();
            let s = env.state();
            prop_assert_ne!(s.ai_pos, s.human_pos);
            prop_assert!(layout.is_free(s.ai_pos) && layout.is_free(s.human_pos));
            prop_assert!(s.explored[s.ai_pos.index(width)] && s.explored[s.human_pos.index(width)]);
            let hit = out.events.iter().any(|e| e.is_sparse());
            let new = out.events.iter().filter(|e| e.kind == EventKind::NewCell).count();
            if hit {
                rounds += 1;
                prop_assert_eq!(s.explored_count(), 2);
            } else {
                prop_assert_eq!(s.explored_count(), before + new);
            }
            prop_assert_eq!(s.layout.obstacles.clone(), layout.obstacles.clone());
            // Snapshots replay exactly.
            let mut twin = env.clone();
            twin.restore(&snap).unwrap();
            prop_assert_eq!(twin.step(JointAction::new(a, h)).unwrap(), out);
        }
        prop_assert_eq!(env.state().rounds_completed, rounds);
        prop_assert!(env.is_done());
    }

    #[test]
    fn counterfactual_matches_a_human_only_step(
        seed in any::<u64>(),
        moves in prop::collection::vec((0usize..5, 0usize..5), 0..40),
        h in 0usize..5,
    ) {
        let mut env = ExplorationEnv::new(ExplorationConfig::default()).unwrap();
        env.reset(seed);
        for &(a, b) in &moves {
            env.step(JointAction::new(a, b)).unwrap();
        }
        let snap = env.snapshot();
        let cf = env.counterfactual_observe(&snap, h).unwrap();
        prop_assert_eq!(env.snapshot(), snap.clone());
        let layout = env.obs_layout();
        let now = layout.decode(&env.observe(Agent::Ai)).unwrap();
        let after = layout.decode(&cf).unwrap();
        // The AI itself never moves in the counterfactual.
        prop_assert_eq!(after.me, now.me);
        prop_assert_eq!(after.obstacles, now.obstacles);
        if h == STAY {
            prop_assert_eq!(after.partner, now.partner);
        }
    }

    #[test]
    fn kitchen_random_play_conserves_onions(
        seed in any::<u64>(),
        actions in prop::collection::vec((0usize..6, 0usize..6), 1..300),
    ) {
        let cfg = KitchenConfig { cook_time: 3, horizon: actions.len(), ..KitchenConfig::default() };
        let mut env = MiniKitchenEnv::new(cfg).unwrap();
        env.reset(seed);
        let mut hits = 0u64;
        for &(a, h) in &actions {
            let out = env.step(JointAction::new(a, h)).unwrap();
            hits += out.events.iter().filter(|e| e.is_sparse()).count() as u64;
            let s = env.state();
            prop_assert_eq!(s.onions_dispensed, s.onions_held() + s.pot_contents as u64 + 3 * s.soups_scooped);
            prop_assert!(s.pot_contents <= 3);
            prop_assert_ne!(s.pos[0], s.pos[1]);
            prop_assert!(s.pos.iter().all(|&c| s.layout.tile(c) == Tile::Floor));
            prop_assert_eq!(hits, s.soups_served);
        }
        prop_assert!(env.is_done());
    }

    #[test]
    fn context_weights_sum_to_the_scale_and_stay_positive(
        p in prop::array::uniform3(-50.0f64..50.0),
        c in prop::array::uniform3(-50.0f64..50.0),
        scale in 0.1f64..10.0,
        n in 1usize..200,
    ) {
        let cfg = BcrConfig { lambda_softmax: scale, ..BcrConfig::default() };
        let w = context_weights(Some(&stats(p[0], p[1], p[2])), &stats(c[0], c[1], c[2]), n, &cfg);
        if n >= cfg.n_threshold {
            prop_assert_eq!((w.k_ext, w.k_ai, w.k_human), (1.0, 0.0, 0.0));
        } else {
            prop_assert!((w.k_ext + w.k_ai + w.k_human - scale).abs() < 1e-9);
            prop_assert!(w.k_ext > 0.0 && w.k_ai > 0.0 && w.k_human > 0.0);
        }
    }

    #[test]
    fn guarded_ratio_is_bounded(prev in -1e6f64..1e6, cur in -1e6f64..1e6, cap in 1.0f64..100.0) {
        let r = guarded_ratio(prev, cur, cap);
        prop_assert!(r.is_finite());
        prop_assert!(r >= 1.0 / cap - 1e-15 && r <= cap + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(raw in prop::collection::vec(0.01f64..1.0, 2..8), raw2 in prop::collection::vec(0.01f64..1.0, 8)) {
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let q_raw = &raw2[..p.len()];
        let zq: f64 = q_raw.iter().sum();
        let q: Vec<f64> = q_raw.iter().map(|x| x / zq).collect();
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn fade_is_monotone_within_unit_interval(t1 in 0u64..10_000, t2 in 0u64..10_000) {
        for fade in [FadeKind::Linear, FadeKind::Exponential] {
            let cfg = BcrConfig { fade, ..BcrConfig::default() };
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let (a, b) = (cfg.fade_factor(lo, 10_000), cfg.fade_factor(hi, 10_000));
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(b <= a);
        }
    }
}

#[test]
fn per_episode_layouts_differ_but_stay_connected() {
    let cfg = ExplorationConfig {
        layout_mode: LayoutMode::PerEpisode,
        ..ExplorationConfig::default()
    };
    let mut env = ExplorationEnv::new(cfg).unwrap();
    let mut seen = std::collections::HashSet::new();
    for s in 0..20 {
        env.reset(s);
        assert!(env.state().layout.is_connected());
        seen.insert(env.state().layout.to_text());
    }
    assert!(seen.len() > 1);
}
