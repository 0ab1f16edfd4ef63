//! Throughput measurement over seeded random weights and inputs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::fuse_network;
use crate::model::{init_params, ModelSpec, Network};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub images_per_sec: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub thread_count: usize,
    pub fused: bool,
}

impl BenchReport {
    /// Aligned `key: value` lines.
    pub fn to_text(&self) -> String {
        let rows = [
            ("variant", self.variant.clone()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("measured_iters", self.measured_iters.to_string()),
            ("images_per_sec", format!("{:.2}", self.images_per_sec)),
            ("mean_latency_ms", format!("{:.3}", self.mean_latency_ms)),
            ("p50_latency_ms", format!("{:.3}", self.p50_latency_ms)),
            ("p95_latency_ms", format!("{:.3}", self.p95_latency_ms)),
            ("thread_count", self.thread_count.to_string()),
            ("fused", self.fused.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<16} {v}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub batch: usize,
    pub iters: usize,
    pub warmup: usize,
    pub threads: usize,
    pub fused: bool,
    pub seed: u64,
}

/// Builds a seeded network for `spec` (fused if requested) and times it.
pub fn bench_run(spec: &ModelSpec, cfg: &BenchConfig) -> Result<BenchReport> {
    let net = Network::from_store(spec, init_params(spec, cfg.seed)?)?;
    let net = if cfg.fused { fuse_network(&net, cfg.seed)?.0 } else { net };
    bench_network(&net, cfg)
}

/// Times `iters` steady-state iterations after `warmup` discarded ones. Each
/// iteration runs one forward of `batch` images on each of `threads` workers.
pub fn bench_network(net: &Network, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iters == 0 || cfg.batch == 0 || cfg.threads == 0 {
        return Err(Error::InvalidArgument("batch, iters and threads must all be at least 1".into()));
    }
    let (h, w) = net.spec().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = (0..cfg.batch * 3 * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor4::from_vec(cfg.batch, 3, h, w, data)?;

    let step = || -> Result<()> {
        if cfg.threads == 1 {
            net.forward(&x)?;
            return Ok(());
        }
        std::thread::scope(|s| {
            let workers: Vec<_> = (0..cfg.threads).map(|_| s.spawn(|| net.forward(&x).map(drop))).collect();
            workers
                .into_iter()
                .try_for_each(|w| w.join().unwrap_or_else(|_| Err(Error::InvalidArgument("benchmark worker panicked".into()))))
        })
    };
    for _ in 0..cfg.warmup {
        step()?;
    }
    let mut lat = Vec::with_capacity(cfg.iters);
    let total = Instant::now();
    for _ in 0..cfg.iters {
        let t = Instant::now();
        step()?;
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let elapsed = total.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let images = (cfg.iters * cfg.batch * cfg.threads) as f64;
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    lat.sort_by(f64::total_cmp);
    Ok(BenchReport {
        variant: net.spec().label(),
        batch_size: cfg.batch,
        warmup_iters: cfg.warmup,
        measured_iters: cfg.iters,
        images_per_sec: images / elapsed,
        mean_latency_ms: mean,
        p50_latency_ms: percentile(&lat, 0.50),
        p95_latency_ms: percentile(&lat, 0.95),
        thread_count: cfg.threads,
        fused: net.is_fused(),
    })
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
