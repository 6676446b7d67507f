//! Wall time of one full gradient evaluation over synthetic chains, swept
//! over a grid of label counts and sequence lengths.

use std::fmt::Write;
use std::time::Instant;

use anyhow::Result;
use crfkit::features::{ChainInstance, FeatureMode, FeatureSpaceBuilder, FeatureTemplate};
use crfkit::objectives::{evaluate_batch, ChainCll, RegularizerSpec};
use crfkit::synth::{synthetic_chain_task, SyntheticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    pub instances: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub labels: usize,
    pub length: usize,
    pub instances: usize,
    pub parameters: usize,
    /// Median over repeats.
    pub millis: f64,
}

impl BenchRow {
    pub fn nanos_per_cell(&self) -> f64 {
        self.millis * 1e6 / (self.instances * self.length * self.labels * self.labels) as f64
    }
}

/// `base`, `2 base`, `4 base`.
pub fn doubling_grid(base: usize) -> Vec<usize> {
    vec![base, 2 * base, 4 * base]
}

fn dataset(labels: usize, length: usize, instances: usize, seed: u64) -> Result<(crfkit::features::FeatureSpace, Vec<ChainInstance>)> {
    let task = synthetic_chain_task(&SyntheticConfig {
        num_labels: labels,
        length,
        vocabulary: 50,
        train: instances,
        test: 0,
        seed,
        ..SyntheticConfig::default()
    })?;
    let templates = [FeatureTemplate::node("identity", &[0])];
    let mut builder = FeatureSpaceBuilder::new();
    let data = task
        .train
        .iter()
        .map(|s| builder.add(&s.tokens, &s.labels, &templates))
        .collect::<crfkit::Result<Vec<_>>>()?;
    Ok((builder.finish(FeatureMode::Full), data))
}

pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    anyhow::ensure!(config.instances > 0 && config.repeats > 0, "instances and repeats must be positive");
    let mut rows = Vec::new();
    for &m in &config.labels {
        for &t in &config.lengths {
            anyhow::ensure!(m > 0 && t > 0, "label count and length must be positive");
            let (space, data) = dataset(m, t, config.instances, config.seed)?;
            let obj = ChainCll::new(&space, &data, RegularizerSpec::l2_default());
            let weights: Vec<f64> = (0..space.num_weights()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
            evaluate_batch(&obj, &weights, 1)?;
            let mut times: Vec<f64> = (0..config.repeats)
                .map(|_| {
                    let start = Instant::now();
                    evaluate_batch(&obj, &weights, 1).map(|_| start.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<crfkit::Result<_>>()?;
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                labels: m,
                length: t,
                instances: config.instances,
                parameters: space.num_weights(),
                millis: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("labels\tlength\tinstances\tparameters\tmillis\tns_per_tm2\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.3}",
            r.labels,
            r.length,
            r.instances,
            r.parameters,
            r.millis,
            r.nanos_per_cell()
        );
    }
    out
}

/// Geometric mean of `time(2x) / time(x)` over the doubling steps along
/// one axis of the grid.
pub fn doubling_ratio(rows: &[BenchRow], along_labels: bool) -> Option<f64> {
    let mut logs = Vec::new();
    for a in rows {
        for b in rows {
            let doubled = if along_labels {
                b.length == a.length && b.labels == 2 * a.labels
            } else {
                b.labels == a.labels && b.length == 2 * a.length
            };
            if doubled && a.millis > 0.0 {
                logs.push((b.millis / a.millis).ln());
            }
        }
    }
    (!logs.is_empty()).then(|| (logs.iter().sum::<f64>() / logs.len() as f64).exp())
}
