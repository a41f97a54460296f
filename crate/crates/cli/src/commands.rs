use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use databalance::audit::{AuditReport, MomentAccumulator, PairGroup};
use databalance::io::{self as dio, IngestOptions, RecordReader};
use databalance::oracle::solve_exact;
use databalance::sampler::subsample_stream;
use databalance::synth::{self, StreamSpec, UtilityDist};
use databalance::{
    checkpoint, fit_from, search_eta as find_eta, subsample as decide, BalanceError, BalanceSpec, Example, FitOptions,
    Hyperparams, SampleMode, SolverState,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::{AuditArgs, FitArgs, HyperArgs, InputArgs, OracleArgs, SearchEtaArgs, SpecArgs, SubsampleArgs, SynthArgs, WeighArgs};

/// Usage problems exit with 1, everything about the data with 2.
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<BalanceError> for Failure {
    fn from(e: BalanceError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64, Failure> {
    seed.ok_or_else(|| usage(format!("{command} is randomized; pass --seed <N> to make the run reproducible")))
}

/// Balancing problem as stored on disk.
#[derive(Debug, Serialize, Deserialize)]
struct Problem {
    spec: BalanceSpec,
    #[serde(default)]
    groups: Vec<PairGroup>,
}

fn read_problem(path: &Path) -> Result<Problem, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read problem file {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("bad problem file {}", path.display()))?)
}

/// Parses `0,1,4-6` into indices.
fn parse_indices(text: &str) -> Result<Vec<usize>, Failure> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || usage(format!("bad index list '{text}' (expected e.g. 0,1,4-6)"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn parse_group(text: &str) -> Result<PairGroup, Failure> {
    let mut parts = text.splitn(3, ':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(name), Some(attrs), Some(labels)) => Ok(PairGroup {
            name: name.to_string(),
            attrs: parse_indices(attrs)?,
            labels: parse_indices(labels)?,
        }),
        _ => Err(usage(format!("bad --group '{text}' (expected NAME:ATTRS:LABELS)"))),
    }
}

fn read_input(input: &InputArgs) -> Result<Vec<Example>, Failure> {
    let opts = IngestOptions {
        strict: input.strict,
        ..IngestOptions::default()
    };
    let (data, stats) = dio::ingest(&input.input, opts)?;
    info!("read {} records from {} lines", stats.records, stats.lines);
    if data.is_empty() {
        return Err(BalanceError::EmptyStream.into());
    }
    Ok(data)
}

/// A stream whose every line was rejected is a data error, not an empty result.
fn require_records(stats: dio::IngestStats) -> Outcome {
    if stats.records == 0 {
        return Err(anyhow!("no valid records ({} malformed of {} lines)", stats.malformed, stats.lines).into());
    }
    Ok(())
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) if p.as_os_str() != "-" => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        _ => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Builds the spec from a problem file and/or flags. Targets left open
/// default to the median prevalence of each attribute group.
fn build_spec(args: &SpecArgs, data: &[Example]) -> Result<(BalanceSpec, Vec<PairGroup>), Failure> {
    let (m, c) = (data[0].s.len(), data[0].y.len());
    let (mut spec, groups) = match &args.problem {
        Some(path) => {
            let p = read_problem(path)?;
            (Some(p.spec), p.groups)
        }
        None => (None, Vec::new()),
    };

    let pi = match (&args.pi, &spec) {
        (Some(pi), _) => pi.clone(),
        (None, Some(s)) => s.pi.clone(),
        (None, None) => default_targets(args.attr_groups.as_deref(), data)?,
    };
    if pi.len() != m {
        return Err(usage(format!("--pi has {} entries but the records have {m} attributes", pi.len())));
    }
    let eps_d = args.eps_d.or(spec.as_ref().map(|s| s.eps_d)).unwrap_or(0.01);
    let eps_r = args.eps_r.or(spec.as_ref().map(|s| s.eps_r)).unwrap_or(0.01);
    let mut built = BalanceSpec::new(pi, c, eps_d, eps_r).map_err(|e| usage(e.to_string()))?;
    match (&args.assoc_attrs, spec.take().and_then(|s| s.assoc_mask)) {
        (Some(attrs), _) => {
            built = built
                .with_assoc_attrs(&parse_indices(attrs)?)
                .map_err(|e| usage(e.to_string()))?;
        }
        (None, Some(mask)) => built = built.with_assoc_mask(mask).map_err(|e| usage(e.to_string()))?,
        (None, None) => {}
    }
    Ok((built, groups))
}

fn default_targets(groups: Option<&str>, data: &[Example]) -> Result<Vec<f64>, Failure> {
    let m = data[0].s.len();
    let prevalence = MomentAccumulator::collect(data, None)?.prevalence();
    let groups: Vec<Vec<usize>> = match groups {
        Some(text) => text.split(';').map(parse_indices).collect::<Result<_, _>>()?,
        None => vec![(0..m).collect()],
    };
    let mut pi: Vec<Option<f64>> = vec![None; m];
    for g in &groups {
        if let Some(&k) = g.iter().find(|&&k| k >= m) {
            return Err(usage(format!("attribute group refers to attribute {k}, but records have {m}")));
        }
        if g.is_empty() {
            continue;
        }
        let median = synth::median(&g.iter().map(|&k| prevalence[k]).collect::<Vec<_>>());
        g.iter().for_each(|&k| pi[k] = Some(median));
    }
    let pi: Vec<f64> = pi.iter().zip(&prevalence).map(|(t, p)| t.unwrap_or(*p)).collect();
    info!("default targets {pi:?}");
    Ok(pi)
}

fn build_hyper(args: &HyperArgs) -> Result<Hyperparams, Failure> {
    Hyperparams::new(args.eta, args.q_max, args.v_level)
        .and_then(|hp| hp.with_tau0(args.tau0))
        .map(|hp| hp.with_schedule(args.schedule))
        .map_err(|e| usage(e.to_string()))
}

fn read_checkpoint(path: &Path) -> Result<SolverState, Failure> {
    let bytes = fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    Ok(checkpoint::load(&bytes)?)
}

fn check_dims(state: &SolverState, data: &[Example]) -> Result<(), Failure> {
    let (m, c) = (data[0].s.len(), data[0].y.len());
    if (state.spec.m, state.spec.c) != (m, c) {
        return Err(BalanceError::VersionMismatch(format!(
            "checkpoint is for m = {}, c = {}; records have m = {m}, c = {c}",
            state.spec.m, state.spec.c
        ))
        .into());
    }
    Ok(())
}

pub fn fit(a: FitArgs) -> Outcome {
    let seed = if a.in_order { a.seed.unwrap_or(0) } else { require_seed(a.seed, "fit")? };
    let data = read_input(&a.input)?;
    let (mut state, groups, first_epoch) = match &a.resume {
        Some(path) => {
            let state = read_checkpoint(path)?;
            check_dims(&state, &data)?;
            let done = (state.t / data.len() as u64) as usize;
            info!("resuming at t = {} (epoch {done})", state.t);
            (state, Vec::new(), done)
        }
        None => {
            let (spec, groups) = build_spec(&a.spec, &data)?;
            let hp = build_hyper(&a.hyper)?;
            (SolverState::new(spec, hp).map_err(|e| usage(e.to_string()))?, groups, 0)
        }
    };
    let opts = FitOptions {
        epochs: a.epochs,
        seed,
        loss_window: a.trace_window,
        record_every: if a.trace.is_some() { a.trace_every } else { 0 },
        first_epoch,
        in_order: a.in_order,
    };
    let trace = fit_from(&mut state, &data, &opts)?;

    fs::write(&a.out, checkpoint::save(&state)).with_context(|| format!("cannot write {}", a.out.display()))?;
    if let Some(path) = &a.trace {
        let mut w = output(Some(path))?;
        for sample in &trace {
            serde_json::to_writer(&mut w, sample).map_err(anyhow::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }

    let weights = state.weights(&data)?;
    let groups = if groups.is_empty() {
        vec![PairGroup::all(state.spec.m, state.spec.c)]
    } else {
        groups
    };
    let report = AuditReport::build(&data, &state.spec.pi, &groups, Some(&weights))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", report.render())?;
    writeln!(
        out,
        "checkpoint written to {} (t = {}, mean weight {:.6})",
        a.out.display(),
        state.t,
        weights.iter().sum::<f64>() / weights.len() as f64
    )?;
    Ok(())
}

pub fn weigh(a: WeighArgs) -> Outcome {
    let state = read_checkpoint(&a.ckpt)?;
    let opts = IngestOptions {
        strict: a.input.strict,
        dims: Some((state.spec.m, state.spec.c)),
        kept_only: false,
    };
    let mut out = output(a.out.as_ref())?;
    let mut reader = RecordReader::new(dio::open_source(&a.input.input)?, opts);
    let mut batch = Vec::with_capacity(1024);
    for item in reader.by_ref() {
        batch.push(state.weigh(&item?)?);
        if batch.len() == 1024 {
            dio::write_weights(&mut out, &batch)?;
            batch.clear();
        }
    }
    dio::write_weights(&mut out, &batch)?;
    out.flush()?;
    require_records(reader.stats())
}

pub fn subsample(a: SubsampleArgs) -> Outcome {
    let seed = require_seed(a.seed, "subsample")?;
    let state = read_checkpoint(&a.ckpt)?;
    let q_max = state.hp.q_max;
    let opts = IngestOptions {
        strict: a.input.strict,
        dims: Some((state.spec.m, state.spec.c)),
        kept_only: false,
    };
    let mut reader = RecordReader::new(dio::open_source(&a.input.input)?, opts);
    let mut out = output(a.out.as_ref())?;
    let mut emit = |items: &[databalance::WeightedExample], decisions: &[databalance::SampleDecision]| -> io::Result<()> {
        if a.kept_only {
            let kept: Vec<Example> = items
                .iter()
                .zip(decisions)
                .filter(|(_, d)| d.kept)
                .map(|(w, _)| w.example.clone())
                .collect();
            dio::write_examples(&mut out, &kept)
        } else {
            dio::write_decisions(&mut out, items, decisions)
        }
    };

    match a.mode {
        SampleMode::Bernoulli => {
            if a.rate.is_some() {
                warn!("--rate only applies to top_q sampling; ignored");
            }
            let mut items = Vec::with_capacity(1024);
            let mut flush = |items: &mut Vec<databalance::WeightedExample>| -> Outcome {
                let decisions: Vec<_> = subsample_stream(items.iter().cloned(), SampleMode::Bernoulli, q_max, seed)?.collect();
                emit(items, &decisions)?;
                items.clear();
                Ok(())
            };
            for item in reader.by_ref() {
                items.push(state.weigh(&item?)?);
                if items.len() == 1024 {
                    flush(&mut items)?;
                }
            }
            flush(&mut items)?;
        }
        SampleMode::TopQ => {
            let rate = a.rate.unwrap_or(state.hp.eta / q_max);
            if !(0.0..=1.0).contains(&rate) {
                return Err(usage(format!("--rate must lie in [0, 1], got {rate}")));
            }
            let data: Vec<Example> = reader.by_ref().collect::<Result<_, _>>()?;
            let items = state.weigh_all(&data)?;
            let decisions = decide(&items, SampleMode::TopQ, q_max, seed, rate);
            emit(&items, &decisions)?;
        }
    }
    out.flush()?;
    require_records(reader.stats())
}

fn read_weights(path: &Path) -> Result<HashMap<String, f64>, Failure> {
    #[derive(Deserialize)]
    struct WeightLine {
        id: String,
        q: f64,
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read weights {}", path.display()))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let w: WeightLine = serde_json::from_str(line).map_err(|e| BalanceError::MalformedLine {
            line: n as u64 + 1,
            reason: e.to_string(),
        })?;
        out.insert(w.id, w.q);
    }
    Ok(out)
}

pub fn audit(a: AuditArgs) -> Outcome {
    let bytes = dio::read_all(dio::open_source(&a.input.input)?)?;
    let base = IngestOptions {
        strict: a.input.strict,
        ..IngestOptions::default()
    };
    let (data, _) = dio::read_examples(&bytes[..], base)?;
    if data.is_empty() {
        return Err(BalanceError::EmptyStream.into());
    }
    let (kept, stats) = dio::read_examples(
        &bytes[..],
        IngestOptions {
            kept_only: true,
            ..base
        },
    )?;

    let after: Option<Vec<f64>> = if let Some(path) = &a.weights {
        let table = read_weights(path)?;
        let w = data
            .iter()
            .map(|e| table.get(&e.id).copied().ok_or_else(|| anyhow!("no weight for record '{}'", e.id)))
            .collect::<Result<Vec<_>, _>>()?;
        Some(w)
    } else if stats.filtered > 0 || kept.len() < data.len() {
        let ids: std::collections::HashSet<&str> = kept.iter().map(|e| e.id.as_str()).collect();
        if ids.len() != kept.len() {
            warn!("duplicate record ids; kept flags are matched by id");
        }
        Some(data.iter().map(|e| f64::from(u8::from(ids.contains(e.id.as_str())))).collect())
    } else {
        None
    };

    let (spec, mut groups) = build_spec(&a.spec, &data)?;
    for g in &a.groups {
        groups.push(parse_group(g)?);
    }
    if groups.is_empty() {
        groups.push(PairGroup::all(spec.m, spec.c));
    }
    for g in &groups {
        if g.attrs.iter().any(|&k| k >= spec.m) || g.labels.iter().any(|&r| r >= spec.c) {
            return Err(usage(format!("group '{}' refers to attributes or labels outside the data", g.name)));
        }
    }
    let report = AuditReport::build(&data, &spec.pi, &groups, after.as_deref())?;
    if let Some(path) = &a.json {
        let mut w = output(Some(path))?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(anyhow::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "{}", report.render())?;
    Ok(())
}

pub fn search_eta(a: SearchEtaArgs) -> Outcome {
    let seed = require_seed(a.seed, "search-eta")?;
    if a.grid.iter().any(|&g| !(g > 0.0 && g <= a.hyper.q_max)) {
        return Err(usage(format!("grid values must lie in (0, q_max = {}]", a.hyper.q_max)));
    }
    let data = read_input(&a.input)?;
    let (spec, _) = build_spec(&a.spec, &data)?;
    let template = HyperArgs {
        eta: a.grid.iter().cloned().fold(f64::MIN, f64::max),
        ..a.hyper.clone()
    };
    let hp = build_hyper(&template)?;
    let opts = FitOptions {
        record_every: 0,
        ..FitOptions::new(a.epochs, seed)
    };
    let found = find_eta(&data, &spec, &hp, &a.grid, a.tol, &opts)?;
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &found).map_err(anyhow::Error::from)?;
    writeln!(out)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    let seed = require_seed(a.seed, "synth")?;
    let utility = match a.utility_sigma {
        Some(sigma) => UtilityDist::LogNormal { sigma },
        None => UtilityDist::Constant,
    };
    let (data, problem) = match a.scenario.as_str() {
        "demographics" => {
            let mut sc = synth::demographics_scenario(a.n, seed)?;
            if let UtilityDist::LogNormal { .. } = utility {
                warn!("--utility-sigma is ignored by the demographics scenario");
            }
            let problem = Problem {
                spec: sc.spec.clone(),
                groups: std::mem::take(&mut sc.groups),
            };
            (sc.data, problem)
        }
        "pair" => {
            let spec = StreamSpec {
                utility,
                ..StreamSpec::pair(a.p_s, a.p_y, a.rho, a.n, seed)
            };
            let data = synth::generate(&spec)?;
            let problem = Problem {
                spec: BalanceSpec::new(vec![a.p_s], 1, 0.0, 0.0)?,
                groups: vec![PairGroup::all(1, 1)],
            };
            (data, problem)
        }
        other => return Err(usage(format!("unknown scenario '{other}' (expected demographics or pair)"))),
    };
    let mut out = output(a.out.as_ref())?;
    dio::write_examples(&mut out, &data)?;
    out.flush()?;
    if let Some(path) = &a.problem_out {
        let mut w = output(Some(path))?;
        serde_json::to_writer_pretty(&mut w, &problem).map_err(anyhow::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

pub fn oracle(a: OracleArgs) -> Outcome {
    #[derive(Serialize)]
    struct Summary {
        objective: f64,
        dual_objective: f64,
        iterations: usize,
        residual: f64,
        mu: f64,
    }
    let data = read_input(&a.input)?;
    let (spec, _) = build_spec(&a.spec, &data)?;
    let hp = build_hyper(&a.hyper)?;
    let sol = solve_exact(&data, &spec, &hp)?;
    if let Some(path) = &a.out {
        let mut w = output(Some(path))?;
        for (e, q) in data.iter().zip(&sol.q_star) {
            serde_json::to_writer(&mut w, &serde_json::json!({ "id": e.id, "q": q })).map_err(anyhow::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut out = io::stdout().lock();
    let summary = Summary {
        objective: sol.objective,
        dual_objective: sol.dual_objective,
        iterations: sol.iterations,
        residual: sol.kkt_residual,
        mu: sol.mu,
    };
    serde_json::to_writer_pretty(&mut out, &summary).map_err(anyhow::Error::from)?;
    writeln!(out)?;
    Ok(())
}
