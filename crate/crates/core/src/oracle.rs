//! Exact solver for the finite-dataset balancing problem
//!
//! ```text
//! minimize   1/2 mean(u (q - eta)^2) + V sum_j max(0, mean(q a_j))
//! subject to mean(q) = eta, 0 <= q <= Q
//! ```
//!
//! solved with the accelerated primal-dual hybrid gradient method
//! (Chambolle-Pock). The primal step is a separable quadratic over the
//! "mean plus box" set, solved exactly by a one-dimensional search on the
//! shift parameter of the equality constraint. Termination is certified by
//! the duality gap against the exact dual function, so the result does not
//! depend on trusting the streaming solver.

use serde::{Deserialize, Serialize};

use crate::bias::fill_bias_vector;
use crate::error::{BalanceError, Result};
use crate::types::{validate_example, BalanceSpec, Example, Hyperparams};

/// Largest instance accepted; the method is dense in `n`.
pub const MAX_INSTANCE: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub q_star: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Relative duality gap `(P - D) / max(1, |P|)` at termination.
    pub kkt_residual: f64,
    /// Multipliers of the bias rows at termination.
    pub duals: Vec<f64>,
    /// Multiplier of the mean constraint maximizing the dual for `duals`.
    pub mu: f64,
    /// Dual objective at `(duals, mu)`; a certified lower bound on the optimum.
    pub dual_objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub max_iterations: usize,
    /// Stop once the relative duality gap drops below this.
    pub target_gap: f64,
    /// Relative gap above which the run counts as failed.
    pub accept_gap: f64,
    pub check_every: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            target_gap: 1e-10,
            accept_gap: 1e-6,
            check_every: 25,
        }
    }
}

/// Solves `sum_i clamp((b_i - lambda) / c_i, 0, cap) = target` for `lambda`
/// (all `c_i > 0`, `0 <= target <= n cap`).
///
/// The left side is piecewise linear and non-increasing in `lambda` with kinks
/// at `b_i` and `b_i - cap c_i`; the root is bracketed between two adjacent
/// kinks and found by linear interpolation there.
pub fn solve_shift(b: &[f64], c: &[f64], cap: f64, target: f64) -> f64 {
    let total = |lambda: f64| -> f64 {
        b.iter()
            .zip(c)
            .map(|(bi, ci)| ((bi - lambda) / ci).clamp(0.0, cap))
            .sum()
    };
    let mut kinks: Vec<f64> = b
        .iter()
        .zip(c)
        .flat_map(|(bi, ci)| [*bi, bi - cap * ci])
        .collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();

    // largest kink index whose total is still >= target
    let (mut lo, mut hi) = (0usize, kinks.len() - 1);
    if total(kinks[lo]) < target {
        return kinks[lo];
    }
    if total(kinks[hi]) >= target {
        return kinks[hi];
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if total(kinks[mid]) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (la, lb) = (kinks[lo], kinks[hi]);
    let (sa, sb) = (total(la), total(lb));
    if sa == sb {
        return la;
    }
    la + (sa - target) / (sa - sb) * (lb - la)
}

/// Euclidean projection of `z` onto `{q : mean(q) = eta, 0 <= q <= cap}`.
pub fn project_mean_box(z: &[f64], eta: f64, cap: f64) -> Vec<f64> {
    let ones = vec![1.0; z.len()];
    let shift = solve_shift(z, &ones, cap, eta * z.len() as f64);
    z.iter().map(|zi| (zi - shift).clamp(0.0, cap)).collect()
}

/// Dense finite instance: bias vectors stored column by column.
struct Instance {
    n: usize,
    d: usize,
    /// `a[i * d + j]`: row `j` of example `i`'s bias vector.
    a: Vec<f64>,
    u: Vec<f64>,
    eta: f64,
    cap: f64,
    v_level: f64,
}

impl Instance {
    fn build(data: &[Example], spec: &BalanceSpec, hp: &Hyperparams) -> Result<Self> {
        spec.validate()?;
        hp.validate()?;
        let d = spec.bias_len();
        let mut a = vec![0.0; data.len() * d];
        for (i, e) in data.iter().enumerate() {
            let e = validate_example(e.clone(), spec)?;
            fill_bias_vector(&e.s, &e.y, spec, &mut a[i * d..(i + 1) * d])?;
        }
        Ok(Self {
            n: data.len(),
            d,
            a,
            u: data.iter().map(|e| e.u).collect(),
            eta: hp.eta,
            cap: hp.q_max,
            v_level: hp.v_level,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.d..(i + 1) * self.d]
    }

    /// `K q = mean_i q_i a_i`.
    fn forward(&self, q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, qi) in q.iter().enumerate() {
            for (o, aij) in out.iter_mut().zip(self.row(i)) {
                *o += qi * aij;
            }
        }
        let inv = 1.0 / self.n as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }

    /// `K^T y`, entry `i` is `a_i . y / n`.
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let inv = 1.0 / self.n as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() * inv;
        }
    }

    fn objective(&self, q: &[f64]) -> f64 {
        let mut kq = vec![0.0; self.d];
        self.forward(q, &mut kq);
        let quad: f64 = q
            .iter()
            .zip(&self.u)
            .map(|(qi, ui)| ui * (qi - self.eta).powi(2))
            .sum::<f64>()
            * 0.5
            / self.n as f64;
        quad + self.v_level * kq.iter().map(|x| x.max(0.0)).sum::<f64>()
    }

    /// Exact dual function at bias multipliers `y`, maximized over the mean
    /// multiplier. Returns `(value, mu)`.
    fn dual(&self, y: &[f64]) -> (f64, f64) {
        let scores: Vec<f64> = (0..self.n)
            .map(|i| self.row(i).iter().zip(y).map(|(a, b)| a * b).sum())
            .collect();
        let b: Vec<f64> = scores.iter().zip(&self.u).map(|(s, u)| self.eta * u - s).collect();
        let mu = solve_shift(&b, &self.u, self.cap, self.eta * self.n as f64);
        let mut total = 0.0;
        for ((s, u), bi) in scores.iter().zip(&self.u).zip(&b) {
            let q = ((bi - mu) / u).clamp(0.0, self.cap);
            total += 0.5 * u * (q - self.eta).powi(2) + (s + mu) * q;
        }
        (total / self.n as f64 - mu * self.eta, mu)
    }

    /// Spectral norm of K by power iteration on `K^T K`.
    fn operator_norm(&self) -> f64 {
        let mut x = vec![1.0 / (self.n as f64).sqrt(); self.n];
        let mut kx = vec![0.0; self.d];
        let mut norm = 0.0;
        for _ in 0..200 {
            self.forward(&x, &mut kx);
            self.adjoint(&kx, &mut x);
            let len = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= len);
            norm = len.sqrt();
        }
        norm
    }
}

pub fn solve_exact(data: &[Example], spec: &BalanceSpec, hp: &Hyperparams) -> Result<ExactSolution> {
    solve_exact_with(data, spec, hp, &OracleOptions::default())
}

pub fn solve_exact_with(
    data: &[Example],
    spec: &BalanceSpec,
    hp: &Hyperparams,
    opts: &OracleOptions,
) -> Result<ExactSolution> {
    if data.is_empty() {
        return Err(BalanceError::EmptyStream);
    }
    if data.len() > MAX_INSTANCE {
        return Err(BalanceError::InstanceTooLarge {
            n: data.len(),
            limit: MAX_INSTANCE,
        });
    }
    let inst = Instance::build(data, spec, hp)?;
    let (n, d) = (inst.n, inst.d);
    let nf = n as f64;

    let norm = inst.operator_norm().max(1e-12) * 1.01;
    let mut tau = 1.0 / norm;
    let mut sigma = 1.0 / norm;
    let gamma = inst.u.iter().cloned().fold(f64::INFINITY, f64::min) / nf;

    let mut x = vec![inst.eta; n];
    let mut x_bar = x.clone();
    let mut y = vec![0.0; d];
    let mut kx = vec![0.0; d];
    let mut kty = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];

    // iterate with the smallest certified gap seen so far
    struct Best {
        gap: f64,
        q: Vec<f64>,
        dual: f64,
        mu: f64,
        y: Vec<f64>,
    }
    let mut best: Option<Best> = None;
    let mut iterations = 0;
    for it in 1..=opts.max_iterations {
        iterations = it;
        inst.forward(&x_bar, &mut kx);
        for (yj, kj) in y.iter_mut().zip(&kx) {
            *yj = (*yj + sigma * kj).clamp(0.0, inst.v_level);
        }
        inst.adjoint(&y, &mut kty);
        // prox of tau * (quadratic + indicator) at x - tau K^T y
        for i in 0..n {
            let z = x[i] - tau * kty[i];
            let w = inst.u[i] / nf;
            b[i] = w * inst.eta + z / tau;
            c[i] = w + 1.0 / tau;
        }
        let shift = solve_shift(&b, &c, inst.cap, inst.eta * nf);
        let theta = 1.0 / (1.0 + 2.0 * gamma * tau).sqrt();
        for i in 0..n {
            let next = ((b[i] - shift) / c[i]).clamp(0.0, inst.cap);
            x_bar[i] = next + theta * (next - x[i]);
            x[i] = next;
        }
        tau *= theta;
        sigma /= theta;

        if it % opts.check_every == 0 || it == opts.max_iterations {
            let primal = inst.objective(&x);
            let (dual, mu) = inst.dual(&y);
            let gap = (primal - dual).max(0.0) / primal.abs().max(1.0);
            if best.as_ref().is_none_or(|b| gap < b.gap) {
                best = Some(Best {
                    gap,
                    q: x.clone(),
                    dual,
                    mu,
                    y: y.clone(),
                });
            }
            if gap <= opts.target_gap {
                break;
            }
        }
    }

    let Best {
        gap,
        q: q_star,
        dual: dual_objective,
        mu,
        y: duals,
    } = best.expect("at least one gap check runs");
    if gap > opts.accept_gap {
        return Err(BalanceError::NonConvergence {
            iterations,
            residual: gap,
        });
    }
    Ok(ExactSolution {
        objective: inst.objective(&q_star),
        q_star,
        iterations,
        kkt_residual: gap,
        duals,
        mu,
        dual_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(eta: f64, q_max: f64, v: f64) -> Hyperparams {
        Hyperparams::new(eta, q_max, v).unwrap()
    }

    #[test]
    fn shift_search_hits_target() {
        let b = [0.3, -1.0, 2.5, 0.7, 0.7];
        let c = [1.0, 2.0, 0.5, 1.5, 1.0];
        for target in [0.0, 0.4, 1.7, 3.2, 5.0] {
            let lambda = solve_shift(&b, &c, 1.0, target);
            let total: f64 = b.iter().zip(&c).map(|(bi, ci)| ((bi - lambda) / ci).clamp(0.0, 1.0)).sum();
            assert!((total - target).abs() < 1e-12, "target {target}: {total}");
        }
    }

    #[test]
    fn projection_lands_in_set() {
        let z = [1.7, -0.3, 0.2, 0.9, 0.5, 0.05];
        let p = project_mean_box(&z, 0.4, 1.0);
        assert!((p.iter().sum::<f64>() / 6.0 - 0.4).abs() < 1e-14);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn unbiased_data_keeps_uniform_weights() {
        let spec = BalanceSpec::new(vec![0.5], 1, 0.0, 0.0).unwrap();
        let data: Vec<Example> = [(1, 1), (1, 0), (0, 1), (0, 0)]
            .iter()
            .enumerate()
            .map(|(i, &(s, y))| Example::new(i.to_string(), vec![s], vec![y], 1.0))
            .collect();
        let sol = solve_exact(&data, &spec, &hp(0.7, 1.0, 10.0)).unwrap();
        assert!(sol.objective.abs() < 1e-9, "{}", sol.objective);
        assert!(sol.q_star.iter().all(|q| (q - 0.7).abs() < 1e-6), "{:?}", sol.q_star);
    }

    #[test]
    fn balanced_pair() {
        let spec = BalanceSpec::new(vec![0.5], 0, 0.0, 0.0).unwrap();
        let data = vec![
            Example::new("a", vec![1], vec![], 1.0),
            Example::new("b", vec![0], vec![], 1.0),
        ];
        let sol = solve_exact(&data, &spec, &hp(0.5, 1.0, 1e3)).unwrap();
        assert!((sol.q_star[0] - 0.5).abs() < 1e-6 && (sol.q_star[1] - 0.5).abs() < 1e-6);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn rejects_large_and_empty() {
        let spec = BalanceSpec::new(vec![0.5], 0, 0.0, 0.0).unwrap();
        let data: Vec<Example> = (0..MAX_INSTANCE + 1)
            .map(|i| Example::new(i.to_string(), vec![(i % 2) as u8], vec![], 1.0))
            .collect();
        assert!(matches!(
            solve_exact(&data, &spec, &hp(0.5, 1.0, 1.0)),
            Err(BalanceError::InstanceTooLarge { .. })
        ));
        assert_eq!(solve_exact(&[], &spec, &hp(0.5, 1.0, 1.0)).unwrap_err(), BalanceError::EmptyStream);
    }
}
