//! Stochastic dual solver.
//!
//! The solver keeps one multiplier per bias-vector row (`v`, boxed to
//! `[0, V]`) and one for the mean-weight constraint (`mu`). Given those, the
//! weight of an example with bias vector `a` and utility `u` is the
//! minimizer of `u/2 (q - eta)^2 + (v.a + mu) q` over `0 <= q <= Q`:
//!
//! ```text
//! w     = v.a + mu
//! beta  = max(0, w - eta u)
//! alpha = max(0, u (eta - Q) - w)
//! q     = eta - (w + alpha - beta) / u
//! ```
//!
//! Each update is one projected stochastic gradient step on the dual loss
//! `F(v, mu) = E[ mu - h(w) / eta ]`, where `h(w)` is the minimum above.

use std::collections::VecDeque;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{dot, fill_bias_vector};
use crate::error::{BalanceError, Result};
use crate::types::{BalanceSpec, Example, Hyperparams, SolverState, WeightedExample};

/// Closed-form weight and hinge multipliers for a given dual score `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParts {
    pub w: f64,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn weight_from_score(w: f64, u: f64, hp: &Hyperparams) -> WeightParts {
    let (eta, q_max) = (hp.eta, hp.q_max);
    let beta = (w - eta * u).max(0.0);
    let alpha = (u * (eta - q_max) - w).max(0.0);
    // beta > 0 and alpha > 0 pin q to the box ends; evaluating the closed
    // form there would leave rounding residue.
    let q = if beta > 0.0 {
        0.0
    } else if alpha > 0.0 {
        q_max
    } else {
        (eta - (w + alpha - beta) / u).clamp(0.0, q_max)
    };
    WeightParts { w, q, alpha, beta }
}

/// Per-example dual loss term `mu - h(w) / eta`.
fn dual_term(parts: &WeightParts, u: f64, mu: f64, eta: f64) -> f64 {
    let h = 0.5 * u * (parts.q - eta).powi(2) + parts.w * parts.q;
    mu - h / eta
}

fn weighted(e: &Example, parts: WeightParts) -> WeightedExample {
    WeightedExample {
        example: e.clone(),
        q: parts.q,
        alpha: parts.alpha,
        beta: parts.beta,
        kept: false,
    }
}

impl SolverState {
    fn score(&self, a: &[f64]) -> f64 {
        dot(&self.v, a) + self.mu
    }

    fn parts_with(&self, e: &Example, scratch: &mut [f64]) -> Result<WeightParts> {
        fill_bias_vector(&e.s, &e.y, &self.spec, scratch)?;
        Ok(weight_from_score(self.score(scratch), e.u, &self.hp))
    }

    /// Weight of `e` under the current duals. Does not touch the state.
    pub fn weigh(&self, e: &Example) -> Result<WeightedExample> {
        let mut a = vec![0.0; self.spec.bias_len()];
        Ok(weighted(e, self.parts_with(e, &mut a)?))
    }

    pub fn weigh_all(&self, data: &[Example]) -> Result<Vec<WeightedExample>> {
        let mut a = vec![0.0; self.spec.bias_len()];
        data.iter()
            .map(|e| Ok(weighted(e, self.parts_with(e, &mut a)?)))
            .collect()
    }

    /// Bare weights for a dataset, in order.
    pub fn weights(&self, data: &[Example]) -> Result<Vec<f64>> {
        let mut a = vec![0.0; self.spec.bias_len()];
        data.iter().map(|e| Ok(self.parts_with(e, &mut a)?.q)).collect()
    }

    /// One dual update on `e`. Returns the weight computed before the step.
    pub fn update(&mut self, e: &Example) -> Result<WeightedExample> {
        let mut a = vec![0.0; self.spec.bias_len()];
        let (parts, _) = self.step_with(e, &mut a)?;
        Ok(weighted(e, parts))
    }

    /// Applies one update using `scratch` for the bias vector; returns the
    /// weight parts and the dual loss term, both evaluated before the step.
    pub(crate) fn step_with(&mut self, e: &Example, scratch: &mut [f64]) -> Result<(WeightParts, f64)> {
        let parts = self.parts_with(e, scratch)?;
        let loss = dual_term(&parts, e.u, self.mu, self.hp.eta);

        let tau = self.hp.learning_rate(self.t);
        let ratio = parts.q / self.hp.eta;
        let gain = tau * ratio;
        let v_level = self.hp.v_level;
        for (vi, ai) in self.v.iter_mut().zip(scratch.iter()) {
            *vi = (*vi + gain * ai).clamp(0.0, v_level);
        }
        self.mu += tau * (ratio - 1.0);
        self.t += 1;
        Ok((parts, loss))
    }

    /// Stochastic gradient of the dual loss at `e`, as (d/dv, d/dmu).
    pub fn dual_gradient(&self, e: &Example) -> Result<(Vec<f64>, f64)> {
        let mut a = vec![0.0; self.spec.bias_len()];
        let parts = self.parts_with(e, &mut a)?;
        let ratio = parts.q / self.hp.eta;
        Ok((a.iter().map(|ai| -ratio * ai).collect(), 1.0 - ratio))
    }

    /// Dual objective `mean_i h_i(v.a_i + mu) - mu eta` over a finite dataset.
    /// A lower bound on the optimal primal objective for any `v` in the box.
    pub fn dual_objective(&self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(BalanceError::EmptyStream);
        }
        let eta = self.hp.eta;
        let mut a = vec![0.0; self.spec.bias_len()];
        let mut total = 0.0;
        for e in data {
            let parts = self.parts_with(e, &mut a)?;
            total += 0.5 * e.u * (parts.q - eta).powi(2) + parts.w * parts.q;
        }
        Ok(total / data.len() as f64 - self.mu * eta)
    }

    /// Dual loss `F = -dual_objective / eta`, the quantity the updates descend.
    pub fn dual_loss(&self, data: &[Example]) -> Result<f64> {
        Ok(-self.dual_objective(data)? / self.hp.eta)
    }
}

/// One point of the running dual-loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualLossSample {
    pub t: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Number of recent per-example terms averaged into each loss sample.
    pub loss_window: usize,
    /// Record a loss sample every this many updates. Zero disables the trace.
    pub record_every: u64,
    /// Epoch index to start from when resuming; selects the shuffle order.
    pub first_epoch: usize,
    /// Visit examples in stored order instead of shuffling.
    pub in_order: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            seed: 0,
            loss_window: 1000,
            record_every: 1000,
            first_epoch: 0,
            in_order: false,
        }
    }
}

impl FitOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            seed,
            ..Self::default()
        }
    }
}

/// Moving average of the per-example dual terms.
struct LossTracker {
    window: usize,
    every: u64,
    recent: VecDeque<f64>,
    sum: f64,
    trace: Vec<DualLossSample>,
}

impl LossTracker {
    fn new(window: usize, every: u64) -> Self {
        Self {
            window: window.max(1),
            every,
            recent: VecDeque::with_capacity(window.max(1)),
            sum: 0.0,
            trace: Vec::new(),
        }
    }

    fn push(&mut self, t: u64, term: f64) {
        if self.every == 0 {
            return;
        }
        if self.recent.len() == self.window {
            if let Some(old) = self.recent.pop_front() {
                self.sum -= old;
            }
        }
        self.recent.push_back(term);
        self.sum += term;
        if t.is_multiple_of(self.every) {
            // re-sum occasionally so subtraction drift cannot build up
            if t.is_multiple_of(self.every * 64) {
                self.sum = self.recent.iter().sum();
            }
            self.trace.push(DualLossSample {
                t,
                loss: self.sum / self.recent.len() as f64,
            });
        }
    }
}

/// Shuffle order for epoch `epoch`. Depends only on (seed, epoch, n) so a
/// resumed fit replays the same sequence.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Fits fresh duals on a finite dataset.
pub fn fit(
    data: &[Example],
    spec: &BalanceSpec,
    hp: &Hyperparams,
    opts: &FitOptions,
) -> Result<(SolverState, Vec<DualLossSample>)> {
    let mut state = SolverState::new(spec.clone(), hp.clone())?;
    let trace = fit_from(&mut state, data, opts)?;
    Ok((state, trace))
}

/// Continues fitting `state` over `data` for `opts.epochs` epochs, starting at
/// epoch `opts.first_epoch`.
pub fn fit_from(state: &mut SolverState, data: &[Example], opts: &FitOptions) -> Result<Vec<DualLossSample>> {
    if data.is_empty() {
        return Err(BalanceError::EmptyStream);
    }
    let mut scratch = vec![0.0; state.spec.bias_len()];
    let mut tracker = LossTracker::new(opts.loss_window, opts.record_every);
    for epoch in opts.first_epoch..opts.first_epoch + opts.epochs {
        if opts.in_order {
            for e in data {
                let (_, term) = state.step_with(e, &mut scratch)?;
                tracker.push(state.t, term);
            }
        } else {
            for i in epoch_order(data.len(), opts.seed, epoch) {
                let (_, term) = state.step_with(&data[i], &mut scratch)?;
                tracker.push(state.t, term);
            }
        }
    }
    Ok(tracker.trace)
}

/// Fits on a (possibly unbounded) stream in arrival order.
pub fn fit_stream<I>(state: &mut SolverState, stream: I, loss_window: usize, record_every: u64) -> Result<Vec<DualLossSample>>
where
    I: IntoIterator<Item = Example>,
{
    let mut scratch = vec![0.0; state.spec.bias_len()];
    let mut tracker = LossTracker::new(loss_window, record_every);
    let mut seen = false;
    for e in stream {
        seen = true;
        let (_, term) = state.step_with(&e, &mut scratch)?;
        tracker.push(state.t, term);
    }
    if !seen {
        return Err(BalanceError::EmptyStream);
    }
    Ok(tracker.trace)
}

/// Penalized primal objective
/// `1/2 mean(u (q - eta)^2) + V (sum of representation and association hinges)`.
///
/// The hinges are the positive parts of `mean(q a_j)` over the bias-vector
/// rows, i.e. `max(0, |mean(q x)| - eps mean(q))` for each constraint, which is
/// the form the dual updates optimize.
pub fn primal_objective(weights: &[f64], data: &[Example], spec: &BalanceSpec, hp: &Hyperparams) -> Result<f64> {
    if weights.len() != data.len() {
        return Err(BalanceError::DimensionMismatch {
            what: "weights",
            got: weights.len(),
            expected: data.len(),
        });
    }
    if data.is_empty() {
        return Err(BalanceError::EmptyStream);
    }
    let n = data.len() as f64;
    let moments = ConstraintMoments::collect(weights, data, spec)?;
    let quad: f64 = weights
        .iter()
        .zip(data)
        .map(|(q, e)| e.u * (q - hp.eta).powi(2))
        .sum::<f64>()
        * 0.5
        / n;
    Ok(quad + hp.v_level * moments.total_violation(spec))
}

/// Weighted constraint moments `mean(q (s_k - pi_k) y_r)`, `mean(q (s_k - pi_k))`
/// and `mean(q)` over a finite dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMoments {
    pub assoc: Vec<f64>,
    pub repr: Vec<f64>,
    pub mean_q: f64,
}

impl ConstraintMoments {
    pub fn collect(weights: &[f64], data: &[Example], spec: &BalanceSpec) -> Result<Self> {
        let (m, c) = (spec.m, spec.c);
        let mut assoc = vec![0.0; m * c];
        let mut repr = vec![0.0; m];
        let mut total = 0.0;
        for (q, e) in weights.iter().zip(data) {
            if e.s.len() != m || e.y.len() != c {
                return Err(BalanceError::DimensionMismatch {
                    what: "example",
                    got: e.s.len() + e.y.len(),
                    expected: m + c,
                });
            }
            total += q;
            for k in 0..m {
                let centered = q * (f64::from(e.s[k]) - spec.pi[k]);
                repr[k] += centered;
                for r in 0..c {
                    if e.y[r] == 1 {
                        assoc[k * c + r] += centered;
                    }
                }
            }
        }
        let n = data.len().max(1) as f64;
        assoc.iter_mut().chain(repr.iter_mut()).for_each(|x| *x /= n);
        Ok(Self {
            assoc,
            repr,
            mean_q: total / n,
        })
    }

    fn hinges(&self, spec: &BalanceSpec) -> impl Iterator<Item = f64> + '_ {
        let slack_d = spec.eps_d * self.mean_q;
        let slack_r = spec.eps_r * self.mean_q;
        let mask = spec.assoc_mask.clone();
        let assoc = self
            .assoc
            .iter()
            .enumerate()
            .filter(move |(i, _)| mask.as_ref().is_none_or(|mk| mk[*i]))
            .map(move |(_, x)| (x.abs() - slack_d).max(0.0));
        let repr = self.repr.iter().map(move |x| (x.abs() - slack_r).max(0.0));
        assoc.chain(repr)
    }

    /// Sum of hinge violations.
    pub fn total_violation(&self, spec: &BalanceSpec) -> f64 {
        self.hinges(spec).sum()
    }

    /// Largest hinge violation divided by the mean weight: the residual in
    /// units of the reweighted distribution.
    pub fn max_normalized_violation(&self, spec: &BalanceSpec) -> f64 {
        if self.mean_q <= 0.0 {
            return f64::INFINITY;
        }
        self.hinges(spec).fold(0.0, f64::max) / self.mean_q
    }
}

/// Outcome of a feasibility search over the average weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSearch {
    pub eta: f64,
    /// False when no grid value met the tolerance; `eta` is then the smallest
    /// grid value.
    pub feasible: bool,
    /// `(eta, max normalized residual)` for every grid value tried.
    pub trials: Vec<(f64, f64)>,
}

/// Largest grid value whose fitted weights satisfy every constraint up to
/// `violation_tol` (in reweighted-distribution units).
pub fn search_eta(
    data: &[Example],
    spec: &BalanceSpec,
    hp_template: &Hyperparams,
    grid: &[f64],
    violation_tol: f64,
    opts: &FitOptions,
) -> Result<EtaSearch> {
    if data.is_empty() {
        return Err(BalanceError::EmptyStream);
    }
    if grid.is_empty() {
        return Err(BalanceError::InvalidHyperparams("empty eta grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let mut trials = Vec::with_capacity(grid.len());
    for &eta in &grid {
        let hp = Hyperparams {
            eta,
            ..hp_template.clone()
        };
        hp.validate()?;
        let (state, _) = fit(data, spec, &hp, opts)?;
        let weights = state.weights(data)?;
        let residual = ConstraintMoments::collect(&weights, data, spec)?.max_normalized_violation(spec);
        trials.push((eta, residual));
        if residual <= violation_tol {
            return Ok(EtaSearch {
                eta,
                feasible: true,
                trials,
            });
        }
    }
    let eta = *grid.last().expect("grid is non-empty");
    warn!("no eta in the grid satisfies the constraints within {violation_tol}; falling back to {eta}");
    Ok(EtaSearch {
        eta,
        feasible: false,
        trials,
    })
}
