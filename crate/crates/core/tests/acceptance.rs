//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.
//!
//! A criterion listed as unattainable still runs in full and prints its
//! verdict; the process only fails when an attainable criterion fails or an
//! unattainable one stops matching its analysis.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use databalance::audit::MomentAccumulator;
use databalance::synth::{self, StreamSpec};
use databalance::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
    /// For unattainable criteria: whether the outcome matches the analysis.
    expected_failure: Option<bool>,
}

fn run(name: &str, f: fn() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let secs = start.elapsed().as_secs_f64();
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let note = match v.expected_failure {
        Some(true) => " [unattainable as specified; outcome matches analysis]",
        Some(false) => " [unattainable as specified; outcome CONTRADICTS analysis]",
        None => "",
    };
    println!("{tag}  {name}: {} ({secs:.1}s){note}", v.detail);
    match v.expected_failure {
        Some(consistent) => consistent,
        None => v.pass,
    }
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn oracle_optimality() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for inst in 0..50u64 {
        let m = [1, 2][rng.gen_range(0..2)];
        let c = [0, 1, 3][rng.gen_range(0..3)];
        let eps = [0.0, 0.05][rng.gen_range(0..2)];
        let ps: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..0.8)).collect();
        let data: Vec<Example> = (0..64)
            .map(|i| {
                let s: Vec<u8> = ps.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
                let y: Vec<u8> = (0..c)
                    .map(|_| {
                        let p = 0.3 + 0.4 * f64::from(s[0]) * rng.gen::<f64>();
                        u8::from(rng.gen::<f64>() < p)
                    })
                    .collect();
                Example::new(format!("{i}"), s, y, rng.gen_range(0.5..2.0))
            })
            .collect();
        let pi: Vec<f64> = ps
            .iter()
            .map(|p| (p + rng.gen_range(-0.15..0.15)).clamp(0.05, 0.95))
            .collect();
        let eta = rng.gen_range(0.5..0.9);
        let spec = BalanceSpec::new(pi, c, eps, eps).unwrap();
        let hp = Hyperparams::new(eta, 1.0, 1.0).unwrap();

        let exact = solve_exact(&data, &spec, &hp).unwrap();
        let opts = FitOptions {
            record_every: 0,
            ..FitOptions::new(20_000, inst)
        };
        let (state, _) = fit(&data, &spec, &hp, &opts).unwrap();
        let weights = state.weights(&data).unwrap();
        let streamed = primal_objective(&weights, &data, &spec, &hp).unwrap();
        let tol = f64::max(1e-3, 0.01 * exact.objective.abs());
        let ratio = (streamed - exact.objective).abs() / tol;
        worst = worst.max(ratio);
        if ratio > 1.0 {
            failures += 1;
        }
    }
    let timely = within(start, Duration::from_secs(60));
    Verdict {
        pass: failures == 0 && timely,
        detail: format!("50 instances, {failures} outside tolerance, worst error {worst:.3} x tolerance, under 60s: {timely}"),
        expected_failure: None,
    }
}

fn constraint_transfer() -> Verdict {
    let start = Instant::now();
    let data = synth::generate(&StreamSpec::pair(0.3, 0.5, 0.5, 100_000, 11)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 1, 0.0, 0.0).unwrap();
    let hp = Hyperparams::new(0.9, 1.0, 100.0).unwrap();
    let opts = FitOptions {
        record_every: 0,
        ..FitOptions::new(5, 11)
    };
    let (state, _) = fit(&data, &spec, &hp, &opts).unwrap();
    let items = state.weigh_all(&data).unwrap();
    let decisions = subsample(&items, SampleMode::Bernoulli, hp.q_max, 11, 0.0);
    let kept: Vec<f64> = decisions.iter().map(|d| f64::from(u8::from(d.kept))).collect();
    let acc = MomentAccumulator::collect(&data, Some(&kept)).unwrap();
    let rb = acc.representation_bias(&spec.pi).unwrap();
    let (ps, py) = (acc.s[0] / acc.total, acc.y[0] / acc.total);
    let cov = (acc.sy[0] / acc.total - ps * py).abs();
    let timely = within(start, Duration::from_secs(30));
    let pass = rb <= 0.02 && cov <= 0.02 && timely;

    // With q <= Q = 1 the kept set holds at most 0.3 n positives, so a 50%
    // share caps the kept fraction at 0.6 n. Keeping 0.9 n instead leaves a
    // positive share of at most 0.3 / 0.9, i.e. RB >= 1/6 up to sampling noise.
    let kept_share: f64 = kept.iter().sum::<f64>() / data.len() as f64;
    let floor = 0.5 - (0.3 / kept_share.max(0.3)).min(0.5);
    let consistent = !pass && rb >= floor - 0.01;
    Verdict {
        pass,
        detail: format!(
            "RB {rb:.4} (limit 0.02, bound {floor:.4} at kept share {kept_share:.3}), |cov| {cov:.4} (limit 0.02), under 30s: {timely}"
        ),
        expected_failure: Some(consistent),
    }
}

fn demographic_decorrelation() -> Verdict {
    let sc = synth::demographics_scenario(100_000, 0).unwrap();
    let before = weighted_pearson(&sc.data, None).unwrap();
    let pre: Vec<f64> = sc
        .groups
        .iter()
        .map(|g| before.summarize(&g.pairs()).unwrap().max)
        .collect();

    let hp = Hyperparams::new(0.7, 1.0, 100.0).unwrap().with_tau0(3.0).unwrap();
    let opts = FitOptions {
        record_every: 0,
        ..FitOptions::new(20, 7)
    };
    let (state, _) = fit(&sc.data, &sc.spec, &hp, &opts).unwrap();
    let items = state.weigh_all(&sc.data).unwrap();
    let decisions = subsample(&items, SampleMode::Bernoulli, hp.q_max, 7, 0.0);
    let kept: Vec<f64> = decisions.iter().map(|d| f64::from(u8::from(d.kept))).collect();
    let after = weighted_pearson(&sc.data, Some(&kept)).unwrap();
    let pairs: Vec<(usize, usize)> = sc.groups.iter().flat_map(|g| g.pairs()).collect();
    let post = after.summarize(&pairs).unwrap();

    let pre_ok = (pre[0] - 0.26).abs() <= 0.02 && (pre[1] - 0.22).abs() <= 0.02;
    Verdict {
        pass: pre_ok && post.median <= 0.01 && post.max <= 0.05,
        detail: format!(
            "before max {:.3} / {:.3}; after median {:.4} (limit 0.01), max {:.4} (limit 0.05)",
            pre[0], pre[1], post.median, post.max
        ),
        expected_failure: None,
    }
}

fn algebraic_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 100_000;
    let mut bad = [0usize; 5];
    let mut worst_identity: f64 = 0.0;
    for _ in 0..trials {
        let m = rng.gen_range(1..=4);
        let c = rng.gen_range(0..=4);
        let pi: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
        let spec = BalanceSpec::new(pi, c, rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1)).unwrap();
        let q_max = rng.gen_range(0.1..5.0);
        let eta = rng.gen_range(0.01..=1.0) * q_max;
        let v_level = rng.gen_range(0.01..50.0);
        let hp = Hyperparams::new(eta, q_max, v_level).unwrap().with_tau0(rng.gen_range(0.001..10.0)).unwrap();
        let mut state = SolverState::new(spec.clone(), hp.clone()).unwrap();
        state.v.iter_mut().for_each(|v| *v = rng.gen_range(0.0..=v_level));
        state.mu = rng.gen_range(-20.0..20.0);
        state.t = rng.gen_range(0..1_000_000);
        let e = Example::new(
            "x",
            (0..m).map(|_| rng.gen_range(0..=1)).collect(),
            (0..c).map(|_| rng.gen_range(0..=1)).collect(),
            rng.gen_range(0.05..10.0),
        );

        let (gv, gmu) = state.dual_gradient(&e).unwrap();
        let norm = (gv.iter().map(|g| g * g).sum::<f64>() + gmu * gmu).sqrt();
        if norm > 5.0 * q_max * (m * (c + 1)) as f64 / eta {
            bad[3] += 1;
        }
        let w = state.update(&e).unwrap();
        if !(0.0..=q_max).contains(&w.q) {
            bad[0] += 1;
        }
        if w.alpha * w.beta != 0.0 || w.alpha < 0.0 || w.beta < 0.0 {
            bad[1] += 1;
        }
        if state.v.iter().any(|v| !(0.0..=v_level).contains(v)) {
            bad[2] += 1;
        }
    }

    // covariance <-> parity: with pi set to the weighted prevalence, the
    // weighted mean of the association entry equals the weighted covariance
    for _ in 0..trials {
        let n = rng.gen_range(2..40);
        let data: Vec<Example> = (0..n)
            .map(|i| Example::new(format!("{i}"), vec![rng.gen_range(0..=1)], vec![rng.gen_range(0..=1)], 1.0))
            .collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let total: f64 = q.iter().sum();
        let pi = data.iter().zip(&q).map(|(e, w)| w * f64::from(e.s[0])).sum::<f64>() / total;
        if !(pi > 0.0 && pi < 1.0) {
            continue;
        }
        let spec = BalanceSpec::new(vec![pi], 1, 0.0, 0.0).unwrap();
        let lhs = data
            .iter()
            .zip(&q)
            .map(|(e, w)| w * bias_vector(&e.s, &e.y, &spec).unwrap().0[0])
            .sum::<f64>()
            / total;
        let mean = |f: &dyn Fn(&Example) -> f64| data.iter().zip(&q).map(|(e, w)| w * f(e)).sum::<f64>() / total;
        let es = mean(&|e| f64::from(e.s[0]));
        let ey = mean(&|e| f64::from(e.y[0]));
        let esy = mean(&|e| f64::from(e.s[0] * e.y[0]));
        let rhs = esy - es * ey;
        worst_identity = worst_identity.max((lhs - rhs).abs());
    }
    if worst_identity > 1e-12 {
        bad[4] += 1;
    }
    Verdict {
        pass: bad.iter().all(|&b| b == 0),
        detail: format!(
            "{trials} configs: q-box {}, alpha*beta {}, v-box {}, gradient bound {} violations; cov/parity max diff {worst_identity:.1e}",
            bad[0], bad[1], bad[2], bad[3]
        ),
        expected_failure: None,
    }
}

fn convergence_envelope() -> Verdict {
    let start = Instant::now();
    let stream = synth::generate(&StreamSpec {
        s_marginals: vec![0.4, 0.3],
        y_marginals: vec![0.5, 0.3],
        target_corr: vec![0.3, 0.1, -0.1, 0.2],
        utility: synth::UtilityDist::Constant,
        n: 1_000_000,
        seed: 0,
    })
    .unwrap();
    let eval = &stream[..20_000];
    let spec = BalanceSpec::new(vec![0.35, 0.35], 2, 0.01, 0.01).unwrap();
    let hp = Hyperparams::new(0.8, 1.0, 10.0).unwrap();
    let mut state = SolverState::new(spec.clone(), hp.clone()).unwrap();

    let checkpoints: Vec<u64> = (0..=60).map(|j| 10f64.powf(3.0 + 3.0 * j as f64 / 60.0).round() as u64).collect();
    let mut losses = Vec::with_capacity(checkpoints.len());
    let mut seen = 0usize;
    for &t in &checkpoints {
        while (seen as u64) < t {
            state.update(&stream[seen]).unwrap();
            seen += 1;
        }
        losses.push(state.dual_loss(eval).unwrap());
    }
    let final_loss = *losses.last().unwrap();
    let mut best = f64::INFINITY;
    let mut monotone = true;
    let mut worst_ratio = f64::NEG_INFINITY;
    for (&t, &f) in checkpoints.iter().zip(&losses) {
        let next = best.min(f);
        monotone &= next <= best;
        best = next;
        let tf = t as f64;
        worst_ratio = worst_ratio.max((best - final_loss) * tf.sqrt() / tf.ln());
    }

    // (R^2 / log t + G^2 tau0^2 (1 + log t) / log t) / (2 tau0) bounds the
    // ratio for t >= 1e3, with R the distance to the final duals and G the
    // stochastic gradient bound
    let r2 = state.v.iter().map(|v| v * v).sum::<f64>() + state.mu * state.mu;
    let g = 5.0 * hp.q_max * (spec.m * (spec.c + 1)) as f64 / hp.eta;
    let tau0 = hp.tau0;
    let log_min = 1e3f64.ln();
    let bound = (r2 / log_min + g * g * tau0 * tau0 * (1.0 + log_min) / log_min) / (2.0 * tau0);
    let timely = within(start, Duration::from_secs(120));
    Verdict {
        pass: monotone && worst_ratio <= bound && timely,
        detail: format!(
            "min-so-far non-increasing: {monotone}; max (best - final) sqrt(t)/log t = {worst_ratio:.4} (bound {bound:.2}); under 2 min: {timely}"
        ),
        expected_failure: None,
    }
}

fn pipeline_bytes(seed: u64) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let sc = synth::demographics_scenario(20_000, seed).unwrap();
    let hp = Hyperparams::new(0.7, 1.0, 100.0).unwrap().with_tau0(3.0).unwrap();
    let (state, _) = fit(&sc.data, &sc.spec, &hp, &FitOptions::new(2, seed)).unwrap();
    let ckpt = databalance::checkpoint::save(&state);
    let restored = databalance::checkpoint::load(&ckpt).unwrap();
    let items = restored.weigh_all(&sc.data).unwrap();
    let decisions = subsample(&items, SampleMode::Bernoulli, hp.q_max, seed, 0.0);
    let mut weights = Vec::new();
    databalance::io::write_weights(&mut weights, &items).unwrap();
    let mut decided = Vec::new();
    databalance::io::write_decisions(&mut decided, &items, &decisions).unwrap();
    (ckpt, weights, decided)
}

fn determinism() -> Verdict {
    let a = pipeline_bytes(3);
    let b = pipeline_bytes(3);
    let c = pipeline_bytes(4);
    let same = a == b;
    let seed_matters = a.0 != c.0 && a.2 != c.2;
    Verdict {
        pass: same && seed_matters,
        detail: format!(
            "checkpoint {} B, weights {} B, decisions {} B identical across runs: {same}; different seed differs: {seed_matters}",
            a.0.len(),
            a.1.len(),
            a.2.len()
        ),
        expected_failure: None,
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 6] = [
        ("[1] oracle optimality", oracle_optimality),
        ("[2] constraint transfer", constraint_transfer),
        ("[3] demographic decorrelation", demographic_decorrelation),
        ("[4] algebraic invariants", algebraic_invariants),
        ("[5] convergence envelope", convergence_envelope),
        ("[6] determinism", determinism),
    ];
    let mut ok = true;
    for (name, f) in criteria {
        ok &= run(name, f);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
