//! Per-epoch training cost of PENG against pre-multiplication fusion as the
//! node count grows.

use std::path::Path;

use serde::Serialize;

use crate::dynamics::{generate, Task, TaskConfig};
use crate::error::Result;
use crate::graphgen::{GraphFamily, SeriesConfig};
use crate::neuralcde::{ModelConfig, ModelParams, SolverConfig, Variant};
use crate::trainer::{train, Normalization, Prepared, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub variant: String,
    pub n: usize,
    pub seconds_per_epoch: f64,
    pub fusion_params: usize,
    /// Time per epoch over the same variant's time at the smallest `n`.
    pub ratio: f64,
}

/// Single-epoch fixed-step training runs on one heat series of `n` nodes.
#[derive(Clone, Debug)]
pub struct ScalingSetup {
    pub num_times: usize,
    /// RK4 steps between consecutive snapshots.
    pub substeps: usize,
    /// Timed epochs; the fastest one is reported.
    pub epochs: usize,
}

impl Default for ScalingSetup {
    fn default() -> Self {
        Self {
            num_times: 12,
            substeps: 1,
            epochs: 3,
        }
    }
}

/// Fastest wall time of one epoch, after an untimed warm-up epoch, and the
/// fusion parameter count.
pub fn epoch_seconds(variant: Variant, n: usize, setup: &ScalingSetup, seed: u64) -> Result<(f64, usize)> {
    let task = TaskConfig {
        task: Task::Heat,
        series: SeriesConfig {
            num_nodes: n,
            graph: GraphFamily::Community.defaults(n),
            t_end: 1.0,
            num_times: setup.num_times,
            num_changes: 2,
            ..SeriesConfig::desk(GraphFamily::Community)
        },
        regime: None,
    };
    let series = generate(&task, seed)?;
    let norm = Normalization::fit(std::slice::from_ref(&series))?;
    let prepared = vec![Prepared::new(&series, variant, Some(&norm))?];
    let params = ModelParams::init(ModelConfig::new(variant, n, 1, 1), seed)?;
    let fusion = params.fusion_param_count();
    let cfg = TrainConfig {
        epochs: 1,
        patience: 1,
        solver: SolverConfig::Rk4Knots { substeps: setup.substeps },
        ..TrainConfig::desk()
    };
    let mut best = f64::INFINITY;
    for round in 0..=setup.epochs.max(1) {
        let trained = train(params.clone(), &prepared, &prepared, &cfg).map_err(|a| a.error)?;
        if round > 0 {
            best = best.min(trained.wall_seconds);
        }
    }
    Ok((best, fusion))
}

pub fn scaling(variants: &[Variant], sizes: &[usize], setup: &ScalingSetup, seed: u64) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut base = None;
        for &n in sizes {
            let (secs, fusion) = epoch_seconds(variant, n, setup, seed)?;
            let base = *base.get_or_insert(secs);
            rows.push(ScalingRow {
                variant: variant.name().to_string(),
                n,
                seconds_per_epoch: secs,
                fusion_params: fusion,
                ratio: secs / base,
            });
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
