//! Per-example bias vector.
//!
//! Layout, for `m` attributes and `c` labels:
//!
//! ```text
//! [ dp - eps_d | -dp - eps_d | (s - pi) - eps_r | -(s - pi) - eps_r ]
//! ```
//!
//! where `dp[k*c + r] = (s_k - pi_k) * y_r`. Attribute index is outer, label
//! index inner. Association pairs switched off by the spec's mask contribute
//! zeros in both association blocks.

use crate::error::{BalanceError, Result};
use crate::types::BalanceSpec;

/// Version tag of the layout above, stored in checkpoints.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector(pub Vec<f64>);

impl BiasVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        dot(&self.0, v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn bias_vector(s: &[u8], y: &[u8], spec: &BalanceSpec) -> Result<BiasVector> {
    let mut out = vec![0.0; spec.bias_len()];
    fill_bias_vector(s, y, spec, &mut out)?;
    Ok(BiasVector(out))
}

/// Writes the bias vector into `out`, which must have length `2m(c+1)`.
pub fn fill_bias_vector(s: &[u8], y: &[u8], spec: &BalanceSpec, out: &mut [f64]) -> Result<()> {
    let (m, c) = (spec.m, spec.c);
    if s.len() != m {
        return Err(BalanceError::DimensionMismatch { what: "s", got: s.len(), expected: m });
    }
    if y.len() != c {
        return Err(BalanceError::DimensionMismatch { what: "y", got: y.len(), expected: c });
    }
    if out.len() != spec.bias_len() {
        return Err(BalanceError::DimensionMismatch {
            what: "bias vector",
            got: out.len(),
            expected: spec.bias_len(),
        });
    }

    let mc = m * c;
    let (assoc, repr) = out.split_at_mut(2 * mc);
    let (pos_dp, neg_dp) = assoc.split_at_mut(mc);
    let (pos_r, neg_r) = repr.split_at_mut(m);
    for k in 0..m {
        let centered = f64::from(s[k]) - spec.pi[k];
        for (r, &yr) in y.iter().enumerate() {
            let i = k * c + r;
            if spec.pair_active(k, r) {
                let dp = centered * f64::from(yr);
                pos_dp[i] = dp - spec.eps_d;
                neg_dp[i] = -dp - spec.eps_d;
            } else {
                pos_dp[i] = 0.0;
                neg_dp[i] = 0.0;
            }
        }
        pos_r[k] = centered - spec.eps_r;
        neg_r[k] = -centered - spec.eps_r;
    }
    Ok(())
}
