//! Latency of the naive dense cross-region graph against the
//! representative-point graph, on the same engine and inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{count_edges, GraphMode, IrlConfig, IrlLayer};
use crate::error::{domain, Result};
use crate::geometry::Point;
use crate::tensor::{Mode, ParameterStore, Session, Tensor};

pub const CSV_HEADER: &str = "N,S,k,m,threads,naive_ms,rep_ms,ratio,edges_naive,edges_rep";

/// Default ceiling on the estimated peak working set of one naive pass.
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub n: usize,
    pub s: usize,
    pub k: usize,
    pub m: usize,
    pub channels: usize,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    pub memory_budget: usize,
    /// Recorded in the output; the caller owns the thread pool.
    pub threads: usize,
}

impl BenchConfig {
    pub fn new(n: usize, s: usize, k: usize, m: usize) -> Self {
        Self {
            n,
            s,
            k,
            m,
            channels: 256,
            batch: 1,
            warmup: 1,
            repeats: 5,
            seed: 0,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            threads: rayon::current_num_threads(),
        }
    }

    /// Rough upper bound on bytes held by one naive forward.
    pub fn naive_bytes(&self) -> usize {
        let sk = self.s * self.k;
        let per_cloud = 3 * sk * sk + 10 * sk * self.channels + 8 * self.n * self.channels;
        per_cloud * self.batch * std::mem::size_of::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub s: usize,
    pub k: usize,
    pub m: usize,
    pub threads: usize,
    pub naive_ms: Option<f64>,
    pub rep_ms: f64,
    pub edges_naive: u64,
    pub edges_rep: u64,
    pub skipped: Option<String>,
}

impl BenchRecord {
    pub fn ratio(&self) -> Option<f64> {
        self.naive_ms.map(|n| n / self.rep_ms)
    }

    /// One CSV line; skipped measurements are written as `skipped`.
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "skipped".to_owned(), |x| format!("{x:.3}"));
        format!(
            "{},{},{},{},{},{},{:.3},{},{},{}",
            self.n,
            self.s,
            self.k,
            self.m,
            self.threads,
            fmt(self.naive_ms),
            self.rep_ms,
            fmt(self.ratio()),
            self.edges_naive,
            self.edges_rep
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Median forward latency of both graphs on random clouds and features.
pub fn bench_attention(cfg: &BenchConfig) -> Result<BenchRecord> {
    if cfg.repeats == 0 || cfg.batch == 0 || cfg.s < 2 {
        return Err(domain("benchmark needs repeats >= 1, batch >= 1 and S >= 2"));
    }
    if cfg.s > cfg.n || cfg.k > cfg.n {
        return Err(domain(format!("S = {} and k = {} must not exceed N = {}", cfg.s, cfg.k, cfg.n)));
    }
    let layer = IrlLayer::new("bench", cfg.channels, IrlConfig::new(cfg.s, cfg.k, cfg.m))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    layer.init(&mut store, &mut rng);
    let clouds: Vec<Vec<Point>> = (0..cfg.batch)
        .map(|_| (0..cfg.n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
        .collect();
    let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
    let rows = cfg.batch * cfg.n;
    let features = Tensor::new(
        vec![rows, cfg.channels],
        (0..rows * cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let rep_ms = time_ms(cfg.warmup, cfg.repeats, || {
        let mut s = Session::new(&mut store, Mode::Eval);
        let t = s.tape.constant(features.clone());
        layer.forward(&mut s, t, &refs)?;
        Ok(())
    })?;
    let need = cfg.naive_bytes();
    let (naive_ms, skipped) = if need > cfg.memory_budget {
        let reason = format!("naive pass needs about {} MiB, budget {} MiB", need >> 20, cfg.memory_budget >> 20);
        log::warn!("N={} S={} m={}: {reason}", cfg.n, cfg.s, cfg.m);
        (None, Some(reason))
    } else {
        let ms = time_ms(cfg.warmup, cfg.repeats, || {
            let mut s = Session::new(&mut store, Mode::Eval);
            let t = s.tape.constant(features.clone());
            layer.forward_naive(&mut s, t, &refs)?;
            Ok(())
        })?;
        (Some(ms), None)
    };
    let (s, k, m) = (cfg.s as u64, cfg.k as u64, cfg.m as u64);
    Ok(BenchRecord {
        n: cfg.n,
        s: cfg.s,
        k: cfg.k,
        m: cfg.m,
        threads: cfg.threads,
        naive_ms,
        rep_ms,
        edges_naive: count_edges(GraphMode::Naive, s, k, m),
        edges_rep: count_edges(GraphMode::Representative, s, k, m),
        skipped,
    })
}
