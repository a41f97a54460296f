//! Seeded synthetic streams with controlled marginals and pairwise
//! correlations.
//!
//! Attributes are independent Bernoulli draws. Each label is drawn with
//! probability `p_r + sum_k beta_kr (s_k - p_k)`, which gives every
//! (attribute, label) pair exactly the requested Pearson correlation
//! `rho_kr = beta_kr sqrt(var s_k / var y_r)` while keeping the label
//! marginal at `p_r`. With a single attribute this is the usual 2x2
//! contingency construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::audit::PairGroup;
use crate::error::{BalanceError, Result};
use crate::types::{BalanceSpec, Example};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UtilityDist {
    #[default]
    Constant,
    /// `exp(N(0, sigma^2))`.
    LogNormal { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// Prevalence of each attribute.
    pub s_marginals: Vec<f64>,
    /// Prevalence of each label.
    pub y_marginals: Vec<f64>,
    /// Target Pearson correlation per (attribute, label), row-major.
    pub target_corr: Vec<f64>,
    #[serde(default)]
    pub utility: UtilityDist,
    pub n: usize,
    pub seed: u64,
}

impl StreamSpec {
    pub fn m(&self) -> usize {
        self.s_marginals.len()
    }

    pub fn c(&self) -> usize {
        self.y_marginals.len()
    }

    /// Label-free stream with the given attribute prevalences.
    pub fn attributes_only(s_marginals: Vec<f64>, n: usize, seed: u64) -> Self {
        Self {
            s_marginals,
            y_marginals: Vec::new(),
            target_corr: Vec::new(),
            utility: UtilityDist::Constant,
            n,
            seed,
        }
    }

    /// One attribute and one label.
    pub fn pair(p_s: f64, p_y: f64, rho: f64, n: usize, seed: u64) -> Self {
        Self {
            s_marginals: vec![p_s],
            y_marginals: vec![p_y],
            target_corr: vec![rho],
            utility: UtilityDist::Constant,
            n,
            seed,
        }
    }
}

/// Regression slopes `beta_kr` realizing the requested correlations.
fn slopes(spec: &StreamSpec) -> Result<Vec<f64>> {
    let (m, c) = (spec.m(), spec.c());
    if spec.target_corr.len() != m * c {
        return Err(BalanceError::DimensionMismatch {
            what: "target_corr",
            got: spec.target_corr.len(),
            expected: m * c,
        });
    }
    for p in spec.s_marginals.iter().chain(&spec.y_marginals) {
        if !(*p > 0.0 && *p < 1.0) {
            return Err(BalanceError::InvalidStreamSpec(format!("marginal {p} must lie strictly inside (0, 1)")));
        }
    }
    if let UtilityDist::LogNormal { sigma } = spec.utility {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(BalanceError::InvalidStreamSpec(format!("log-normal sigma {sigma} must be non-negative")));
        }
    }
    let sd = |p: f64| (p * (1.0 - p)).sqrt();
    let mut beta = vec![0.0; m * c];
    for k in 0..m {
        for r in 0..c {
            beta[k * c + r] = spec.target_corr[k * c + r] * sd(spec.y_marginals[r]) / sd(spec.s_marginals[k]);
        }
    }

    // the label probability must stay in [0, 1] for every attribute pattern
    for r in 0..c {
        let p_r = spec.y_marginals[r];
        let contrib = |k: usize| {
            let (b, p) = (beta[k * c + r], spec.s_marginals[k]);
            (f64::min(b * (1.0 - p), -b * p), f64::max(b * (1.0 - p), -b * p))
        };
        let low: f64 = p_r + (0..m).map(|k| contrib(k).0).sum::<f64>();
        let high: f64 = p_r + (0..m).map(|k| contrib(k).1).sum::<f64>();
        if low >= -1e-12 && high <= 1.0 + 1e-12 {
            continue;
        }
        // report the strongest pair of the row with its admissible range
        // given the other pairs
        let k = (0..m)
            .max_by(|&a, &b| spec.target_corr[a * c + r].abs().total_cmp(&spec.target_corr[b * c + r].abs()))
            .unwrap_or(0);
        let p_k = spec.s_marginals[k];
        let (own_low, own_high) = contrib(k);
        let floor = low - own_low;
        let ceil = 1.0 - (high - own_high);
        let scale = sd(p_r) / sd(p_k);
        let beta_hi = f64::min(floor / p_k, ceil / (1.0 - p_k)).max(0.0);
        let beta_lo = -f64::min(floor / (1.0 - p_k), ceil / p_k).max(0.0);
        return Err(BalanceError::InfeasibleCorrelation {
            attr: k,
            label: r,
            rho: spec.target_corr[k * c + r],
            lo: beta_lo / scale,
            hi: beta_hi / scale,
        });
    }
    Ok(beta)
}

/// Draws `spec.n` examples. Deterministic per seed.
pub fn generate(spec: &StreamSpec) -> Result<Vec<Example>> {
    let beta = slopes(spec)?;
    let (m, c) = (spec.m(), spec.c());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lognormal = match spec.utility {
        UtilityDist::LogNormal { sigma } => {
            Some(LogNormal::new(0.0, sigma).map_err(|e| BalanceError::InvalidStreamSpec(e.to_string()))?)
        }
        UtilityDist::Constant => None,
    };
    let width = spec.n.max(1).to_string().len().max(8);

    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let s: Vec<u8> = spec.s_marginals.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
        let mut y = Vec::with_capacity(c);
        for r in 0..c {
            let shift: f64 = (0..m)
                .map(|k| beta[k * c + r] * (f64::from(s[k]) - spec.s_marginals[k]))
                .sum();
            let p = (spec.y_marginals[r] + shift).clamp(0.0, 1.0);
            y.push(u8::from(rng.gen::<f64>() < p));
        }
        let u = lognormal.as_ref().map_or(1.0, |d| d.sample(&mut rng));
        out.push(Example::new(format!("ex{i:0width$}"), s, y, u));
    }
    Ok(out)
}

/// A generated dataset together with the balancing problem posed on it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub data: Vec<Example>,
    pub spec: BalanceSpec,
    pub groups: Vec<PairGroup>,
}

/// Correlations of the gender x occupation pairs: (male, female) per occupation.
const OCCUPATION_CORR: [(f64, f64); 20] = [
    (0.259, -0.05),
    (0.12, -0.05),
    (-0.06, 0.04),
    (0.045, -0.03),
    (0.03, 0.02),
    (0.02, -0.015),
    (0.015, 0.012),
    (-0.012, 0.01),
    (0.01, -0.009),
    (0.008, 0.007),
    (0.006, 0.005),
    (-0.005, 0.003),
    (0.004, 0.0),
    (0.003, 0.0),
    (0.002, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
];
const OCCUPATION_PREVALENCE: [f64; 20] = [
    0.07, 0.06, 0.08, 0.2, 0.1, 0.05, 0.15, 0.08, 0.2, 0.1, 0.05, 0.15, 0.08, 0.2, 0.1, 0.05, 0.15, 0.08, 0.2, 0.1,
];
/// Correlations of the gender x age pairs: (male, female) per age group.
/// Strongly associated groups are more prevalent than the target so the
/// decorrelated, balanced reweighting stays attainable.
const AGE_CORR: [(f64, f64); 6] = [
    (0.218, 0.0),
    (0.0, 0.15),
    (0.03, 0.02),
    (0.02, 0.03),
    (0.01, 0.0),
    (0.0, 0.01),
];
const AGE_PREVALENCE: [f64; 6] = [0.025, 0.018, 0.0100, 0.0100, 0.0095, 0.0095];
const GENDER_PREVALENCE: [f64; 2] = [0.14, 0.13];
const GENDER_TARGET: f64 = 0.12;
const AGE_TARGET: f64 = 0.01;

/// Stand-in for a web-scale image-text audit: two perceived-gender
/// attributes, six age groups and twenty occupations.
///
/// Attributes are `[male, female, age_0..age_5]`, labels
/// `[occupation_0..occupation_19, age_0..age_5]`. Constraints balance every
/// attribute at a fixed target (12% per gender, 1% per age group, the age
/// target being the median age prevalence) and decorrelate gender from occupation and from age. Age
/// attributes carry no association constraints.
pub fn demographics_scenario(n: usize, seed: u64) -> Result<Scenario> {
    let occupations = OCCUPATION_CORR.len();
    let ages = AGE_CORR.len();
    let c = occupations + ages;
    let mut y_marginals: Vec<f64> = (0..occupations)
        .map(|r| OCCUPATION_PREVALENCE[r])
        .collect();
    y_marginals.extend_from_slice(&AGE_PREVALENCE);
    let mut target_corr = vec![0.0; 2 * c];
    for (r, &(male, female)) in OCCUPATION_CORR.iter().chain(AGE_CORR.iter()).enumerate() {
        target_corr[r] = male;
        target_corr[c + r] = female;
    }
    let base = generate(&StreamSpec {
        s_marginals: GENDER_PREVALENCE.to_vec(),
        y_marginals,
        target_corr,
        utility: UtilityDist::Constant,
        n,
        seed,
    })?;
    let data = base
        .into_iter()
        .map(|mut e| {
            let age_flags = e.y[occupations..].to_vec();
            e.s.extend(age_flags);
            e
        })
        .collect();

    let mut pi = vec![GENDER_TARGET; 2];
    pi.extend(std::iter::repeat_n(AGE_TARGET, ages));
    let spec = BalanceSpec::new(pi, c, 0.0, 0.0)?.with_assoc_attrs(&[0, 1])?;
    let groups = vec![
        PairGroup {
            name: "gender x occupation".into(),
            attrs: vec![0, 1],
            labels: (0..occupations).collect(),
        },
        PairGroup {
            name: "gender x age".into(),
            attrs: vec![0, 1],
            labels: (occupations..c).collect(),
        },
    ];
    Ok(Scenario { data, spec, groups })
}

/// Median of a non-empty slice (mean of the middle two for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
