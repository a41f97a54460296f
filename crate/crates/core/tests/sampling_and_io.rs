use std::io::{BufReader, Write};
use std::time::Instant;

use databalance::io::{self, IngestOptions};
use databalance::sampler::subsample_stream;
use databalance::synth::{self, StreamSpec, UtilityDist};
use databalance::*;

fn weighted(n: usize, q: impl Fn(usize) -> f64) -> Vec<WeightedExample> {
    (0..n)
        .map(|i| WeightedExample {
            example: Example::new(format!("id-{i}"), vec![0], vec![], 1.0),
            q: q(i),
            alpha: 0.0,
            beta: 0.0,
            kept: false,
        })
        .collect()
}

#[test]
fn kept_fraction_within_four_sigma() {
    let n = 100_000;
    for (q, q_max, seed) in [(0.9, 1.0, 1), (0.3, 1.0, 2), (0.5, 2.0, 3), (0.05, 1.0, 4)] {
        let items = weighted(n, |_| q);
        let kept = subsample(&items, SampleMode::Bernoulli, q_max, seed, 0.0)
            .iter()
            .filter(|d| d.kept)
            .count() as f64
            / n as f64;
        let p = q / q_max;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((kept - p).abs() <= 4.0 * sigma, "q={q}: kept {kept}, expected {p}");
    }
}

#[test]
fn streaming_and_batch_decisions_agree() {
    let items = weighted(5_000, |i| (i % 11) as f64 / 10.0);
    let batch = subsample(&items, SampleMode::Bernoulli, 1.0, 99, 0.0);
    let streamed: Vec<SampleDecision> = subsample_stream(items.clone(), SampleMode::Bernoulli, 1.0, 99).unwrap().collect();
    assert_eq!(batch, streamed);
    let other_seed = subsample(&items, SampleMode::Bernoulli, 1.0, 100, 0.0);
    assert_ne!(batch, other_seed);
}

#[test]
fn top_q_keeps_the_heaviest() {
    let items = weighted(1_000, |i| i as f64 / 1_000.0);
    let decisions = subsample(&items, SampleMode::TopQ, 1.0, 0, 0.25);
    let kept: Vec<usize> = decisions.iter().enumerate().filter(|(_, d)| d.kept).map(|(i, _)| i).collect();
    assert_eq!(kept, (750..1_000).collect::<Vec<_>>());
}

#[test]
fn written_examples_read_back_identically() {
    let data = synth::generate(&StreamSpec {
        utility: UtilityDist::LogNormal { sigma: 0.7 },
        ..StreamSpec::pair(0.3, 0.4, 0.2, 2_000, 12)
    })
    .unwrap();
    let mut buf = Vec::new();
    io::write_examples(&mut buf, &data).unwrap();
    let (back, stats) = io::read_examples(&buf[..], IngestOptions::default()).unwrap();
    assert_eq!(back, data);
    assert_eq!(stats.records, 2_000);
    assert_eq!(stats.malformed, 0);
}

#[test]
fn decision_log_filters_to_kept_records() {
    let data = synth::generate(&StreamSpec::pair(0.5, 0.5, 0.0, 1_000, 13)).unwrap();
    let spec = BalanceSpec::new(vec![0.5], 1, 0.0, 0.0).unwrap();
    let state = SolverState::new(spec, Hyperparams::new(0.5, 1.0, 1.0).unwrap()).unwrap();
    let items = state.weigh_all(&data).unwrap();
    let decisions = subsample(&items, SampleMode::Bernoulli, 1.0, 13, 0.0);
    let mut log = Vec::new();
    io::write_decisions(&mut log, &items, &decisions).unwrap();
    let opts = IngestOptions {
        kept_only: true,
        ..IngestOptions::default()
    };
    let (kept, stats) = io::read_examples(&log[..], opts).unwrap();
    let expected: Vec<&str> = decisions.iter().filter(|d| d.kept).map(|d| d.id.as_str()).collect();
    assert_eq!(kept.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), expected);
    assert_eq!(stats.filtered as usize, 1_000 - expected.len());
    assert_eq!(stats.unknown_fields, 0);
}

#[test]
fn ingestion_throughput() {
    let data = synth::generate(&StreamSpec {
        s_marginals: vec![0.3, 0.4],
        y_marginals: vec![0.2, 0.5, 0.1],
        target_corr: vec![0.1, 0.0, 0.05, 0.0, 0.2, 0.0],
        utility: UtilityDist::Constant,
        n: 1_000_000,
        seed: 14,
    })
    .unwrap();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    {
        let mut w = std::io::BufWriter::new(file.as_file_mut());
        io::write_examples(&mut w, &data).unwrap();
        w.flush().unwrap();
    }
    let start = Instant::now();
    let (back, stats) = io::ingest(file.path(), IngestOptions::default()).unwrap();
    let rate = back.len() as f64 / start.elapsed().as_secs_f64();
    assert_eq!(stats.records, 1_000_000);
    assert!(rate >= 1e5, "{rate:.0} records/s");

    let reader = BufReader::new(std::fs::File::open(file.path()).unwrap());
    let first = io::RecordReader::new(reader, IngestOptions::default()).next().unwrap().unwrap();
    assert_eq!(first, data[0]);
}
