//! Bias measurements on data and on model predictions.
//!
//! Data-side measures read everything they need from weighted first and
//! second moments of the binary indicators, collected by [`MomentAccumulator`].
//! Accumulators over disjoint shards merge by addition.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{BalanceError, Result};
use crate::types::Example;

/// Weighted sums `sum w`, `sum w s_k`, `sum w y_r`, `sum w s_k y_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub m: usize,
    pub c: usize,
    pub count: u64,
    pub total: f64,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub sy: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(m: usize, c: usize) -> Self {
        Self {
            m,
            c,
            count: 0,
            total: 0.0,
            s: vec![0.0; m],
            y: vec![0.0; c],
            sy: vec![0.0; m * c],
        }
    }

    pub fn add(&mut self, e: &Example, w: f64) -> Result<()> {
        if e.s.len() != self.m || e.y.len() != self.c {
            return Err(BalanceError::DimensionMismatch {
                what: "example",
                got: e.s.len() + e.y.len(),
                expected: self.m + self.c,
            });
        }
        self.count += 1;
        if w == 0.0 {
            return Ok(());
        }
        self.total += w;
        for (r, &yr) in e.y.iter().enumerate() {
            if yr == 1 {
                self.y[r] += w;
            }
        }
        for (k, &sk) in e.s.iter().enumerate() {
            if sk == 1 {
                self.s[k] += w;
                let row = &mut self.sy[k * self.c..(k + 1) * self.c];
                for (cell, &yr) in row.iter_mut().zip(&e.y) {
                    if yr == 1 {
                        *cell += w;
                    }
                }
            }
        }
        Ok(())
    }

    /// Collects moments of `data`, weighted by `weights` when given.
    pub fn collect(data: &[Example], weights: Option<&[f64]>) -> Result<Self> {
        let first = data.first().ok_or(BalanceError::EmptyStream)?;
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(BalanceError::DimensionMismatch {
                    what: "weights",
                    got: w.len(),
                    expected: data.len(),
                });
            }
        }
        let mut acc = Self::new(first.s.len(), first.y.len());
        for (i, e) in data.iter().enumerate() {
            acc.add(e, weights.map_or(1.0, |w| w[i]))?;
        }
        Ok(acc)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.m != self.m || other.c != self.c {
            return Err(BalanceError::DimensionMismatch {
                what: "accumulator",
                got: other.m + other.c,
                expected: self.m + self.c,
            });
        }
        self.count += other.count;
        self.total += other.total;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.s, &other.s);
        add(&mut self.y, &other.y);
        add(&mut self.sy, &other.sy);
        Ok(())
    }

    fn require_mass(&self) -> Result<()> {
        if self.count == 0 || self.total <= 0.0 {
            Err(BalanceError::EmptyStream)
        } else {
            Ok(())
        }
    }

    /// Weighted prevalence of each attribute.
    pub fn prevalence(&self) -> Vec<f64> {
        self.s.iter().map(|x| x / self.total).collect()
    }

    pub fn label_prevalence(&self) -> Vec<f64> {
        self.y.iter().map(|x| x / self.total).collect()
    }

    /// `max_k |pi_k - E_w[s_k]|`.
    pub fn representation_bias(&self, pi: &[f64]) -> Result<f64> {
        self.require_mass()?;
        if pi.len() != self.m {
            return Err(BalanceError::DimensionMismatch { what: "pi", got: pi.len(), expected: self.m });
        }
        Ok(self
            .prevalence()
            .iter()
            .zip(pi)
            .map(|(p, t)| (t - p).abs())
            .fold(0.0, f64::max))
    }

    /// Signed parity gaps `E_w[y_r | s_k = 1] - E_w[y_r | s_k = 0]`, row-major.
    /// Attributes with no weighted mass on one side are `None` and listed in
    /// the returned skip list.
    pub fn parity_gaps(&self) -> Result<(Vec<Option<f64>>, Vec<usize>)> {
        self.require_mass()?;
        let mut gaps = vec![None; self.m * self.c];
        let mut skipped = Vec::new();
        for k in 0..self.m {
            let on = self.s[k];
            let off = self.total - on;
            if on <= 0.0 || off <= 0.0 {
                skipped.push(k);
                continue;
            }
            for r in 0..self.c {
                let joint = self.sy[k * self.c + r];
                gaps[k * self.c + r] = Some(joint / on - (self.y[r] - joint) / off);
            }
        }
        Ok((gaps, skipped))
    }

    /// Weighted Pearson correlation of `s_k` and `y_r`, `None` when either
    /// variable has zero weighted variance.
    pub fn pearson(&self, k: usize, r: usize) -> Option<f64> {
        let ps = self.s[k] / self.total;
        let py = self.y[r] / self.total;
        let pj = self.sy[k * self.c + r] / self.total;
        let var_s = ps * (1.0 - ps);
        let var_y = py * (1.0 - py);
        if var_s <= 0.0 || var_y <= 0.0 {
            return None;
        }
        Some(((pj - ps * py) / (var_s * var_y).sqrt()).clamp(-1.0, 1.0))
    }

    pub fn correlation_matrix(&self) -> Result<CorrelationMatrix> {
        self.require_mass()?;
        let rho = (0..self.m)
            .flat_map(|k| (0..self.c).map(move |r| (k, r)))
            .map(|(k, r)| self.pearson(k, r))
            .collect();
        Ok(CorrelationMatrix { m: self.m, c: self.c, rho })
    }
}

/// Weighted Pearson coefficients per (attribute, label), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub m: usize,
    pub c: usize,
    pub rho: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsSummary {
    pub median: f64,
    pub max: f64,
    /// Pairs with a defined coefficient.
    pub count: usize,
}

impl CorrelationMatrix {
    pub fn get(&self, k: usize, r: usize) -> Option<f64> {
        self.rho[k * self.c + r]
    }

    /// Median and max of `|rho|` over `pairs`, skipping undefined entries.
    pub fn summarize(&self, pairs: &[(usize, usize)]) -> Option<AbsSummary> {
        let mut values: Vec<f64> = pairs.iter().filter_map(|&(k, r)| self.get(k, r)).map(f64::abs).collect();
        abs_summary(&mut values)
    }

    pub fn summarize_all(&self) -> Option<AbsSummary> {
        let mut values: Vec<f64> = self.rho.iter().flatten().map(|x| x.abs()).collect();
        abs_summary(&mut values)
    }
}

fn abs_summary(values: &mut [f64]) -> Option<AbsSummary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    Some(AbsSummary {
        median,
        max: values[n - 1],
        count: n,
    })
}

/// Representation bias of (optionally weighted) data against targets `pi`.
pub fn data_rb(data: &[Example], pi: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    MomentAccumulator::collect(data, weights)?.representation_bias(pi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationBias {
    /// Largest absolute parity gap over the measurable pairs.
    pub max: f64,
    /// Signed parity gaps, row-major; `None` for skipped attributes.
    pub gaps: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Association bias of (optionally weighted) data.
pub fn data_ab(data: &[Example], weights: Option<&[f64]>) -> Result<AssociationBias> {
    association_bias(&MomentAccumulator::collect(data, weights)?)
}

pub fn association_bias(acc: &MomentAccumulator) -> Result<AssociationBias> {
    let (gaps, skipped) = acc.parity_gaps()?;
    for k in &skipped {
        warn!("attribute {k} has no weighted mass on one side; its pairs are excluded");
    }
    let max = gaps.iter().flatten().map(|g| g.abs()).fold(0.0, f64::max);
    Ok(AssociationBias { max, gaps, skipped })
}

pub fn weighted_pearson(data: &[Example], weights: Option<&[f64]>) -> Result<CorrelationMatrix> {
    MomentAccumulator::collect(data, weights)?.correlation_matrix()
}

/// A model output for one input: `probs` over attribute (or label)
/// categories, plus the input's ground-truth attributes when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    #[serde(default)]
    pub s: Vec<u8>,
}

fn check_probs(p: &PredictionRecord, width: usize) -> Result<()> {
    if p.probs.len() != width {
        return Err(BalanceError::DimensionMismatch {
            what: "probs",
            got: p.probs.len(),
            expected: width,
        });
    }
    if let Some((index, &value)) = p.probs.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(BalanceError::InvalidSpec(format!("probability {value} at index {index} outside [0, 1]")));
    }
    Ok(())
}

/// `max_k |pi_k - mean(probs_k)|` for a model emitting distributions over
/// `m` categories.
pub fn model_rb(predictions: &[PredictionRecord], pi: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(BalanceError::EmptyStream);
    }
    let m = pi.len();
    let mut sums = vec![0.0; m];
    for p in predictions {
        check_probs(p, m)?;
        let mass: f64 = p.probs.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(BalanceError::InvalidSpec(format!("prediction sums to {mass}, not 1")));
        }
        sums.iter_mut().zip(&p.probs).for_each(|(s, x)| *s += x);
    }
    let n = predictions.len() as f64;
    Ok(sums.iter().zip(pi).map(|(s, t)| (t - s / n).abs()).fold(0.0, f64::max))
}

/// `max_{k,r} |mean(f_r | s_k = 1) - mean(f_r | s_k = 0)|`.
pub fn model_ab(predictions: &[PredictionRecord]) -> Result<f64> {
    let first = predictions.first().ok_or(BalanceError::EmptyStream)?;
    let (m, c) = (first.s.len(), first.probs.len());
    let mut count = vec![[0usize; 2]; m];
    let mut sums = vec![[0.0f64; 2]; m * c];
    for p in predictions {
        check_probs(p, c)?;
        if p.s.len() != m {
            return Err(BalanceError::DimensionMismatch { what: "s", got: p.s.len(), expected: m });
        }
        for (k, &sk) in p.s.iter().enumerate() {
            let side = usize::from(sk == 1);
            count[k][side] += 1;
            for (r, &f) in p.probs.iter().enumerate() {
                sums[k * c + r][side] += f;
            }
        }
    }
    let mut worst = 0.0f64;
    for (k, n) in count.iter().enumerate() {
        for (side, &cnt) in n.iter().enumerate() {
            if cnt == 0 {
                return Err(BalanceError::DegenerateGroup { attr: k, side: side as u8 });
            }
        }
        for r in 0..c {
            let [off, on] = sums[k * c + r];
            worst = worst.max((on / n[1] as f64 - off / n[0] as f64).abs());
        }
    }
    Ok(worst)
}

/// A named block of (attribute, label) pairs summarized together in reports,
/// e.g. "gender x occupation".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGroup {
    pub name: String,
    pub attrs: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PairGroup {
    pub fn all(m: usize, c: usize) -> Self {
        Self {
            name: "all pairs".into(),
            attrs: (0..m).collect(),
            labels: (0..c).collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.attrs
            .iter()
            .flat_map(|&k| self.labels.iter().map(move |&r| (k, r)))
            .collect()
    }
}

/// Measurements of one (weighted) view of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSection {
    pub examples: u64,
    pub total_weight: f64,
    pub data_rb: f64,
    /// Largest parity gap over the grouped pairs, or over every pair when
    /// no groups are given.
    pub data_ab: f64,
    /// Signed parity gaps, m x c row-major.
    pub residuals: Vec<Option<f64>>,
    pub pearson: CorrelationMatrix,
    /// One summary per pair group, same order as the report's groups.
    pub summaries: Vec<Option<AbsSummary>>,
    pub group_prevalence: Vec<f64>,
    pub skipped_attrs: Vec<usize>,
}

impl AuditSection {
    pub fn from_moments(acc: &MomentAccumulator, pi: &[f64], groups: &[PairGroup]) -> Result<Self> {
        let ab = association_bias(acc)?;
        let pearson = acc.correlation_matrix()?;
        let summaries = groups.iter().map(|g| pearson.summarize(&g.pairs())).collect();
        let data_ab = if groups.is_empty() {
            ab.max
        } else {
            groups
                .iter()
                .flat_map(|g| g.pairs())
                .filter_map(|(k, r)| ab.gaps.get(k * acc.c + r).copied().flatten())
                .map(f64::abs)
                .fold(0.0, f64::max)
        };
        Ok(Self {
            examples: acc.count,
            total_weight: acc.total,
            data_rb: acc.representation_bias(pi)?,
            data_ab,
            residuals: ab.gaps,
            pearson,
            summaries,
            group_prevalence: acc.prevalence(),
            skipped_attrs: ab.skipped,
        })
    }
}

/// Before/after comparison of a balancing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pi: Vec<f64>,
    pub groups: Vec<PairGroup>,
    pub before: AuditSection,
    pub after: Option<AuditSection>,
}

impl AuditReport {
    pub fn build(
        data: &[Example],
        pi: &[f64],
        groups: &[PairGroup],
        after_weights: Option<&[f64]>,
    ) -> Result<Self> {
        let before = MomentAccumulator::collect(data, None)?;
        let after = after_weights.map(|w| MomentAccumulator::collect(data, Some(w))).transpose()?;
        Self::from_moments(&before, after.as_ref(), pi, groups)
    }

    pub fn from_moments(
        before: &MomentAccumulator,
        after: Option<&MomentAccumulator>,
        pi: &[f64],
        groups: &[PairGroup],
    ) -> Result<Self> {
        let groups = if groups.is_empty() {
            vec![PairGroup::all(before.m, before.c)]
        } else {
            groups.to_vec()
        };
        Ok(Self {
            pi: pi.to_vec(),
            before: AuditSection::from_moments(before, pi, &groups)?,
            after: after.map(|a| AuditSection::from_moments(a, pi, &groups)).transpose()?,
            groups,
        })
    }

    /// Plain-text summary: absolute Pearson correlations (median and max per
    /// pair group) followed by the bias measures.
    pub fn render(&self) -> String {
        let label_width = 30;
        let col = 19;
        let mut out = String::new();
        out.push_str(&format!("{:<label_width$}", "Absolute Pearson Correlations"));
        for g in &self.groups {
            out.push_str(&format!("| {:<col$}", truncate(&g.name, col)));
        }
        out.push('\n');
        out.push_str(&format!("{:<label_width$}", ""));
        for _ in &self.groups {
            out.push_str(&format!("| {:<9}{:<10}", "median", "max"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_width + self.groups.len() * (col + 2)));
        out.push('\n');
        let mut rows = vec![("BEFORE", &self.before)];
        if let Some(after) = &self.after {
            rows.push(("AFTER", after));
        }
        for (name, section) in &rows {
            out.push_str(&format!("{name:<label_width$}"));
            for s in &section.summaries {
                match s {
                    Some(s) => out.push_str(&format!("| {:<9.3}{:<10.3}", s.median, s.max)),
                    None => out.push_str(&format!("| {:<9}{:<10}", "n/a", "n/a")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
        for (name, section) in &rows {
            out.push_str(&format!(
                "{name:<7} examples={} weight={:.6} RB={:.4} AB={:.4}\n",
                section.examples, section.total_weight, section.data_rb, section.data_ab
            ));
            let prev: Vec<String> = section.group_prevalence.iter().map(|p| format!("{p:.4}")).collect();
            out.push_str(&format!("        prevalence=[{}]\n", prev.join(", ")));
        }
        let target: Vec<String> = self.pi.iter().map(|p| format!("{p:.4}")).collect();
        out.push_str(&format!("        target    =[{}]\n", target.join(", ")));
        out
    }
}

fn truncate(s: &str, width: usize) -> String {
    s.chars().take(width).collect()
}
