//! Wall-time measurement of the three attention modules, used by the
//! complexity-scaling checks and the `bench` CLI subcommand.
//!
//! Each measurement times one module forward pass on random latents; graph
//! construction for the local module happens outside the timed region. The
//! reported number is the median over `reps` runs after one warmup.

use std::time::Instant;

use rand::Rng;

use crate::error::Result;
use crate::geometry::{knn_graph, NeighborGraph};
use crate::model::{global_attention, local_attention, micro_attention, MnoConfig, ModuleMask, MnoModel};
use crate::nn::{bind_params, init_rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchModule {
    Global,
    Local,
    Micro,
}

impl BenchModule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(BenchModule::Global),
            "local" => Ok(BenchModule::Local),
            "micro" => Ok(BenchModule::Micro),
            _ => Err(crate::error::Error::argument(format!(
                "unknown module '{s}' (expected global, local, or micro)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BenchModule::Global => "global",
            BenchModule::Local => "local",
            BenchModule::Micro => "micro",
        }
    }
}

/// Dimensions of one measurement.
#[derive(Debug, Clone, Copy)]
pub struct BenchDims {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub heads: usize,
}

fn bench_config(dims: BenchDims) -> MnoConfig {
    MnoConfig {
        blocks: 1,
        latent_dim: dims.d,
        modes: dims.m,
        heads: dims.heads,
        k: dims.k,
        mask: ModuleMask::ALL,
        feature_dim: 0,
        output_dim: 1,
    }
}

fn random_latents(seed: u64, n: usize, d: usize) -> Tensor<f32> {
    let mut rng = init_rng(seed);
    let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f64..1.0) as f32).collect();
    Tensor::matrix(n, d, data).unwrap()
}

fn random_graph(seed: u64, n: usize, k: usize) -> NeighborGraph {
    let mut rng = init_rng(seed ^ 0x9e37);
    let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-1.0f64..1.0) as f32).collect();
    let pos = Tensor::matrix(n, 3, data).unwrap();
    knn_graph(&pos, k).unwrap()
}

/// Median wall time in milliseconds of one module forward pass.
pub fn time_module(module: BenchModule, dims: BenchDims, reps: usize, seed: u64) -> Result<f64> {
    let config = bench_config(dims);
    config.validate()?;
    let model = MnoModel::<f32>::init(config.clone(), seed)?;
    let latents = random_latents(seed + 1, dims.n, dims.d);
    let graph = match module {
        BenchModule::Local => Some(random_graph(seed + 2, dims.n, dims.k)),
        _ => None,
    };

    let run = || -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &model.params);
        let x = tape.constant(latents.clone());
        let start = Instant::now();
        match module {
            BenchModule::Global => {
                global_attention(&mut tape, &bound, "block.0.global", &config, x)?;
            }
            BenchModule::Local => {
                local_attention(&mut tape, &bound, "block.0.local", &config, x, graph.as_ref().unwrap())?;
            }
            BenchModule::Micro => {
                micro_attention(&mut tape, &bound, "block.0.micro", &config, x)?;
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    run()?; // warmup
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        times.push(run()?);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

/// One sweep row: the varied parameter value, the median wall time, and the
/// time ratio against the previous row (1.0 for the first).
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub value: usize,
    pub ms: f64,
    pub ratio: f64,
}

/// Module wall time as N grows, everything else fixed.
pub fn sweep_n(
    module: BenchModule,
    n_list: &[usize],
    base: BenchDims,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let ms = time_module(module, BenchDims { n, ..base }, reps, seed)?;
        let ratio = rows.last().map(|p: &BenchRow| ms / p.ms).unwrap_or(1.0);
        rows.push(BenchRow { value: n, ms, ratio });
    }
    Ok(rows)
}

/// Global-module wall time as the mode count M grows at fixed N.
pub fn sweep_m_global(
    m_list: &[usize],
    base: BenchDims,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let ms = time_module(BenchModule::Global, BenchDims { m, ..base }, reps, seed)?;
        let ratio = rows.last().map(|p: &BenchRow| ms / p.ms).unwrap_or(1.0);
        rows.push(BenchRow { value: m, ms, ratio });
    }
    Ok(rows)
}

pub fn bench_csv(param_name: &str, rows: &[BenchRow]) -> String {
    let mut out = format!("{param_name},wall_ms,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{:.3},{:.3}\n", r.value, r.ms, r.ratio));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_modules_produce_positive_times() {
        let dims = BenchDims { n: 128, d: 16, m: 8, k: 4, heads: 2 };
        for module in [BenchModule::Global, BenchModule::Local, BenchModule::Micro] {
            let ms = time_module(module, dims, 3, 0).unwrap();
            assert!(ms > 0.0);
        }
    }

    #[test]
    fn sweep_rows_carry_ratios() {
        let dims = BenchDims { n: 0, d: 16, m: 8, k: 4, heads: 2 };
        let rows = sweep_n(BenchModule::Micro, &[64, 128], dims, 3, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].ratio, 1.0);
        assert!(rows[1].ratio > 0.0);
        let csv = bench_csv("n", &rows);
        assert!(csv.starts_with("n,wall_ms,ratio\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn module_parse() {
        assert_eq!(BenchModule::parse("global").unwrap(), BenchModule::Global);
        assert!(BenchModule::parse("bogus").is_err());
    }
}
