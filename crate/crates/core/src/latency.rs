//! Single-threaded controller latency.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, Precision};
use crate::error::{Error, Result};

pub const MIN_ITERATIONS: usize = 10_000;
pub const WARMUP_ITERATIONS: usize = 1_000;
pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub median_ns: f64,
    pub p99_ns: f64,
    pub mean_ns: f64,
    pub min_ns: f64,
}

impl LatencyStats {
    fn from_samples(mut ns: Vec<f64>) -> Self {
        ns.sort_by(f64::total_cmp);
        let n = ns.len();
        let q = |p: f64| ns[((p * (n - 1) as f64).round() as usize).min(n - 1)];
        Self {
            iterations: n,
            median_ns: q(0.5),
            p99_ns: q(0.99),
            mean_ns: ns.iter().sum::<f64>() / n as f64,
            min_ns: ns[0],
        }
    }

    pub fn hz(&self) -> f64 {
        1e9 / self.median_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    /// Parameters of the deployed controller only.
    pub param_count: usize,
    pub precision: Precision,
    pub warmup: usize,
    pub forward: LatencyStats,
    pub hz: f64,
    /// Text-to-parameters cost, measured separately when available.
    pub instantiation: Option<LatencyStats>,
    pub machine: MachineInfo,
}

/// Times `iterations` single-state forward passes on the calling thread.
pub fn bench_controller(
    controller: &mut dyn Controller,
    precision: Precision,
    iterations: usize,
) -> Result<BenchReport> {
    if iterations < MIN_ITERATIONS {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_ITERATIONS} iterations, got {iterations}"
        )));
    }
    let state: Vec<f64> = (0..controller.state_dim()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
    let mut out = vec![0.0; controller.action_dim()];
    for _ in 0..WARMUP_ITERATIONS {
        controller.act(black_box(&state), &mut out);
        black_box(&out);
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        controller.act(black_box(&state), &mut out);
        black_box(&out);
        samples.push(t.elapsed().as_nanos() as f64);
    }
    let forward = LatencyStats::from_samples(samples);
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        param_count: controller.param_count(),
        precision,
        warmup: WARMUP_ITERATIONS,
        hz: forward.hz(),
        forward,
        instantiation: None,
        machine: MachineInfo::current(),
    })
}

/// Times `iterations` calls of `f`.
pub fn time_calls<F: FnMut() -> Result<()>>(iterations: usize, mut f: F) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be positive".into()));
    }
    f()?;
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    Ok(LatencyStats::from_samples(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::MlpController;
    use crate::model::policy_manifest;
    use crate::ndiff::ParamVec;

    #[test]
    fn too_few_iterations_rejected() {
        let p = ParamVec::zeros(policy_manifest(4, &[8], 2).unwrap());
        let mut c = MlpController::new(p);
        assert!(bench_controller(&mut c, Precision::F64, 10).is_err());
    }

    #[test]
    fn report_is_consistent() {
        let p = ParamVec::zeros(policy_manifest(4, &[64, 64], 2).unwrap());
        let mut c = MlpController::new(p);
        let r = bench_controller(&mut c, Precision::F64, MIN_ITERATIONS).unwrap();
        assert_eq!(r.param_count, 4610);
        assert_eq!(r.forward.iterations, MIN_ITERATIONS);
        assert!(r.forward.p99_ns >= r.forward.median_ns);
        assert!((r.hz * r.forward.median_ns / 1e9 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantiles() {
        let s = LatencyStats::from_samples((1..=101).map(f64::from).collect());
        assert_eq!(s.median_ns, 51.0);
        assert_eq!(s.p99_ns, 100.0);
        assert_eq!(s.min_ns, 1.0);
    }
}
