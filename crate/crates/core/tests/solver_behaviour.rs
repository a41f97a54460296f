use databalance::audit::MomentAccumulator;
use databalance::checkpoint;
use databalance::synth::{self, StreamSpec};
use databalance::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet(epochs: usize, seed: u64) -> FitOptions {
    FitOptions {
        record_every: 0,
        ..FitOptions::new(epochs, seed)
    }
}

fn random_example(rng: &mut ChaCha8Rng, m: usize, c: usize, id: usize) -> Example {
    Example::new(
        format!("r{id}"),
        (0..m).map(|_| rng.gen_range(0..=1)).collect(),
        (0..c).map(|_| rng.gen_range(0..=1)).collect(),
        rng.gen_range(0.2..4.0),
    )
}

#[test]
fn weigh_leaves_state_untouched() {
    let sc = synth::demographics_scenario(2_000, 1).unwrap();
    let hp = Hyperparams::new(0.8, 1.0, 10.0).unwrap();
    let (state, _) = fit(&sc.data, &sc.spec, &hp, &quiet(1, 1)).unwrap();
    let before = checkpoint::save(&state);
    let first = state.weigh_all(&sc.data).unwrap();
    let second = state.weigh_all(&sc.data).unwrap();
    assert_eq!(first, second);
    assert_eq!(before, checkpoint::save(&state));
}

#[test]
fn unbiased_stream_keeps_weights_near_eta() {
    let data = synth::generate(&StreamSpec::pair(0.4, 0.3, 0.0, 60_000, 3)).unwrap();
    let spec = BalanceSpec::new(vec![0.4], 1, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.7, 1.0, 10.0).unwrap();
    let mut state = SolverState::new(spec, hp).unwrap();
    for (i, e) in data.iter().enumerate() {
        let w = state.update(e).unwrap();
        if i >= 10_000 {
            assert!((w.q - 0.7).abs() <= 0.1, "step {i}: q = {}", w.q);
        }
    }
    let norm = state.v.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1.0, "{norm}");
}

// With p(s) = p(y) = 0.5 and rho = 0.5 the diagonal cells hold 0.375 each and
// the off-diagonal ones 0.125; independence under q <= 1 keeps at most 0.5.
#[test]
fn fitted_weights_remove_covariance() {
    let data = synth::generate(&StreamSpec::pair(0.5, 0.5, 0.5, 50_000, 9)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 1, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.45, 1.0, 100.0).unwrap().with_tau0(1.0).unwrap();
    let (state, _) = fit(&data, &spec, &hp, &quiet(10, 9)).unwrap();
    let w = state.weights(&data).unwrap();
    let acc = MomentAccumulator::collect(&data, Some(&w)).unwrap();
    let (ps, py) = (acc.s[0] / acc.total, acc.y[0] / acc.total);
    let cov = acc.sy[0] / acc.total - ps * py;
    assert!(cov.abs() < 0.01, "{cov}");
}

#[test]
fn resume_is_bit_exact() {
    let sc = synth::demographics_scenario(5_000, 2).unwrap();
    let hp = Hyperparams::new(0.8, 1.0, 50.0).unwrap().with_tau0(2.0).unwrap();
    let (straight, _) = fit(&sc.data, &sc.spec, &hp, &quiet(4, 5)).unwrap();

    let (half, _) = fit(&sc.data, &sc.spec, &hp, &quiet(2, 5)).unwrap();
    let bytes = checkpoint::save(&half);
    let mut resumed = checkpoint::load_for(&bytes, sc.spec.m, sc.spec.c).unwrap();
    let opts = FitOptions {
        first_epoch: 2,
        ..quiet(2, 5)
    };
    fit_from(&mut resumed, &sc.data, &opts).unwrap();
    assert_eq!(checkpoint::save(&straight), checkpoint::save(&resumed));
}

#[test]
fn loss_trace_is_recorded_on_schedule() {
    let data = synth::generate(&StreamSpec::pair(0.3, 0.4, 0.2, 10_000, 4)).unwrap();
    let spec = BalanceSpec::new(vec![0.35], 1, 0.01, 0.01).unwrap();
    let hp = Hyperparams::new(0.8, 1.0, 10.0).unwrap();
    let opts = FitOptions {
        record_every: 500,
        loss_window: 200,
        ..FitOptions::new(2, 4)
    };
    let (_, trace) = fit(&data, &spec, &hp, &opts).unwrap();
    assert_eq!(trace.len(), 40);
    assert!(trace.iter().enumerate().all(|(i, s)| s.t == 500 * (i as u64 + 1)));
    assert!(trace.iter().all(|s| s.loss.is_finite()));
}

#[test]
fn search_eta_on_unbiased_stream_takes_the_top() {
    let data = synth::generate(&StreamSpec::pair(0.5, 0.5, 0.0, 20_000, 6)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 1, 0.01, 0.01).unwrap();
    let hp = Hyperparams::new(0.5, 1.0, 10.0).unwrap();
    let grid = [1.0, 0.9, 0.8, 0.5];
    let found = search_eta(&data, &spec, &hp, &grid, 0.005, &quiet(2, 6)).unwrap();
    assert!(found.feasible);
    assert_eq!(found.eta, 1.0);
}

#[test]
fn search_eta_respects_the_minority_mass_bound() {
    // prevalence 0.2, target 0.5: with q <= 1 the kept minority mass is at
    // most 0.2, so eta <= 0.2 / 0.5 = 0.4
    let data = synth::generate(&StreamSpec::attributes_only(vec![0.2], 20_000, 8)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 0, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.5, 1.0, 100.0).unwrap().with_tau0(1.0).unwrap();
    let grid = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
    let found = search_eta(&data, &spec, &hp, &grid, 0.01, &quiet(5, 8)).unwrap();
    assert!(found.feasible);
    assert!(found.eta <= 0.4 + 1e-12, "{found:?}");
    assert!(found.eta >= 0.3, "{found:?}");
}

#[test]
fn search_eta_falls_back_when_nothing_fits() {
    let data = synth::generate(&StreamSpec::attributes_only(vec![0.01], 20_000, 10)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 0, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.5, 1.0, 100.0).unwrap();
    let grid = [0.9, 0.5, 0.1];
    let found = search_eta(&data, &spec, &hp, &grid, 0.01, &quiet(2, 10)).unwrap();
    assert!(!found.feasible);
    assert_eq!(found.eta, 0.1);
    assert_eq!(found.trials.len(), 3);
}

#[test]
fn single_repeated_satisfied_example() {
    let spec = BalanceSpec::new(vec![1.0], 0, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.6, 1.0, 10.0).unwrap();
    let data = vec![Example::new("only", vec![1], vec![], 1.0); 100];
    let (state, _) = fit(&data, &spec, &hp, &quiet(3, 0)).unwrap();
    assert!(state.v.iter().all(|&v| v == 0.0));
    assert_eq!(state.weigh(&data[0]).unwrap().q, 0.6);
}

/// Second implementation of the penalized objective, written directly from
/// the definitions.
fn brute_objective(q: &[f64], data: &[Example], spec: &BalanceSpec, hp: &Hyperparams) -> f64 {
    let n = data.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..data.len()).map(f).sum::<f64>() / n;
    let quad = mean(&|i| 0.5 * data[i].u * (q[i] - hp.eta) * (q[i] - hp.eta));
    let mq = mean(&|i| q[i]);
    let mut penalty = 0.0;
    for k in 0..spec.m {
        for r in 0..spec.c {
            if !spec.pair_active(k, r) {
                continue;
            }
            let cov = mean(&|i| q[i] * (data[i].s[k] as f64 - spec.pi[k]) * data[i].y[r] as f64);
            penalty += f64::max(0.0, cov - spec.eps_d * mq) + f64::max(0.0, -cov - spec.eps_d * mq);
        }
        let rep = mean(&|i| q[i] * (data[i].s[k] as f64 - spec.pi[k]));
        penalty += f64::max(0.0, rep - spec.eps_r * mq) + f64::max(0.0, -rep - spec.eps_r * mq);
    }
    quad + hp.v_level * penalty
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn primal_objective_matches_brute_force(seed in any::<u64>(), m in 1usize..=3, c in 0usize..=3, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Example> = (0..n).map(|i| random_example(&mut rng, m, c, i)).collect();
        let pi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let spec = BalanceSpec::new(pi, c, rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.2)).unwrap();
        let q_max = rng.gen_range(0.5..3.0);
        let hp = Hyperparams::new(rng.gen_range(0.1..1.0) * q_max, q_max, rng.gen_range(0.1..100.0)).unwrap();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=q_max)).collect();
        let fast = primal_objective(&q, &data, &spec, &hp).unwrap();
        let slow = brute_objective(&q, &data, &spec, &hp);
        prop_assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1.0), "{} vs {}", fast, slow);
    }

    #[test]
    fn update_keeps_iterates_in_the_box(seed in any::<u64>(), m in 1usize..=3, c in 0usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let spec = BalanceSpec::new(pi, c, 0.0, 0.0).unwrap();
        let v_level = rng.gen_range(0.1..5.0);
        let hp = Hyperparams::new(0.5, 1.0, v_level).unwrap().with_tau0(rng.gen_range(0.1..20.0)).unwrap();
        let mut state = SolverState::new(spec, hp).unwrap();
        for i in 0..200 {
            let e = random_example(&mut rng, m, c, i);
            let expected = state.weigh(&e).unwrap();
            let t = state.t;
            let got = state.update(&e).unwrap();
            prop_assert_eq!(expected.q, got.q);
            prop_assert_eq!(state.t, t + 1);
            prop_assert!(state.v.iter().all(|v| (0.0..=v_level).contains(v)));
            prop_assert!((0.0..=1.0).contains(&got.q));
            prop_assert_eq!(got.alpha * got.beta, 0.0);
        }
    }
}
