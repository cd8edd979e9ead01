//! End-to-end runs: generate a batch per role, train, evaluate.

use serde::{Deserialize, Serialize};

use crate::dynamics::{generate, SirRegime, Task, TaskConfig};
use crate::error::{Error, Result};
use crate::graphgen::DynamicGraphSeries;
use crate::neuralcde::{Head, ModelConfig, ModelParams};
use crate::par;
use crate::trainer::{
    classification_metrics, extrapolation_growth, regression_metrics, snapshot_losses, train, Aborted, Checkpoint, ClassificationMetrics,
    LossKind, Normalization, Prepared, RegressionMetrics, SnapshotLoss, TrainConfig, Trained,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Val, Role::Test];

    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Seed of series `i` of `role` for a dataset seeded with `seed`.
pub fn series_seed(seed: u64, role: Role, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(role.index() * 10_007).wrapping_add(i as u64)
}

/// SIR batches alternate regimes so both labels appear in every role.
pub fn regime_for(i: usize) -> SirRegime {
    if i % 2 == 0 {
        SirRegime::Outbreak
    } else {
        SirRegime::DieOut
    }
}

#[derive(Clone, Debug, Default)]
pub struct Bundle {
    pub train: Vec<DynamicGraphSeries>,
    pub val: Vec<DynamicGraphSeries>,
    pub test: Vec<DynamicGraphSeries>,
}

impl Bundle {
    pub fn role(&self, role: Role) -> &[DynamicGraphSeries] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }

    pub fn role_mut(&mut self, role: Role) -> &mut Vec<DynamicGraphSeries> {
        match role {
            Role::Train => &mut self.train,
            Role::Val => &mut self.val,
            Role::Test => &mut self.test,
        }
    }
}

/// `batch` series per role, generated in parallel.
pub fn generate_bundle(task: &TaskConfig, seed: u64, batch: usize) -> Result<Bundle> {
    let jobs: Vec<(Role, usize)> = Role::ALL.iter().flat_map(|&r| (0..batch).map(move |i| (r, i))).collect();
    let made = par::map(&jobs, |&(role, i)| {
        let mut cfg = task.clone();
        if cfg.task == Task::Sir && cfg.regime.is_none() {
            cfg.regime = Some(regime_for(i));
        }
        generate(&cfg, series_seed(seed, role, i))
    });
    let mut bundle = Bundle::default();
    for ((role, _), s) in jobs.into_iter().zip(made) {
        bundle.role_mut(role).push(s?);
    }
    Ok(bundle)
}

/// Model and training settings shared by every seed of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    /// Model sized for the task's node count and channels.
    pub fn for_task(task: &TaskConfig, variant: crate::neuralcde::Variant, train: TrainConfig) -> Self {
        let channels = task.task.channels();
        let mut model = ModelConfig::new(variant, task.series.num_nodes, channels, channels);
        let mut train = train;
        if task.task == Task::Sir {
            model.head = Head::GraphClassification;
            train.loss = LossKind::Bce;
        }
        Self { model, train }
    }
}

#[derive(Clone, Debug)]
pub enum Evaluation {
    Regression {
        metrics: RegressionMetrics,
        snapshots: Vec<SnapshotLoss>,
    },
    Classification(ClassificationMetrics),
}

impl Evaluation {
    /// Test mean squared error over all snapshots, or accuracy.
    pub fn headline(&self) -> f64 {
        match self {
            Evaluation::Regression { metrics, .. } => metrics.all,
            Evaluation::Classification(c) => c.accuracy,
        }
    }

    pub fn extrapolation_growth(&self) -> Option<f64> {
        match self {
            Evaluation::Regression { snapshots, .. } => Some(extrapolation_growth(snapshots)),
            Evaluation::Classification(_) => None,
        }
    }
}

pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub trained: Trained,
    pub test: Evaluation,
}

fn prepare_all(series: &[DynamicGraphSeries], spec: &RunSpec, norm: Option<&Normalization>) -> Result<Vec<Prepared>> {
    series.iter().map(|s| Prepared::new(s, spec.model.variant, norm)).collect()
}

/// Normalisation used for a bundle: regression targets are standardised
/// with training statistics, class-labelled data is left as is.
pub fn normalization_for(bundle: &Bundle, spec: &RunSpec) -> Result<Option<Normalization>> {
    match spec.train.loss {
        LossKind::Mse => Ok(Some(Normalization::fit(&bundle.train)?)),
        LossKind::Bce => Ok(None),
    }
}

pub fn evaluate(checkpoint: &Checkpoint, series: &[DynamicGraphSeries]) -> Result<Evaluation> {
    let prepared: Vec<Prepared> = series
        .iter()
        .map(|s| Prepared::new(s, checkpoint.model.config.variant, checkpoint.normalization.as_ref()))
        .collect::<Result<_>>()?;
    match checkpoint.model.config.head {
        Head::NodeRegression => Ok(Evaluation::Regression {
            metrics: regression_metrics(&checkpoint.model, &prepared, &checkpoint.solver)?,
            snapshots: snapshot_losses(&checkpoint.model, &prepared, &checkpoint.solver)?,
        }),
        Head::GraphClassification => Ok(Evaluation::Classification(classification_metrics(
            &checkpoint.model,
            &prepared,
            &checkpoint.solver,
        )?)),
    }
}

#[derive(Debug)]
pub enum RunError {
    Setup(Error),
    Aborted(Box<Aborted>),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Setup(e) => e.fmt(f),
            RunError::Aborted(a) => a.fmt(f),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Setup(e)
    }
}

/// Trains a fresh model seeded with `seed` on `bundle` and evaluates it on
/// the test role.
pub fn run(spec: &RunSpec, bundle: &Bundle, seed: u64, task: Option<&str>) -> std::result::Result<RunOutcome, RunError> {
    let norm = normalization_for(bundle, spec)?;
    let train_set = prepare_all(&bundle.train, spec, norm.as_ref())?;
    let val_set = prepare_all(&bundle.val, spec, norm.as_ref())?;
    let init = ModelParams::init(spec.model.clone(), seed)?;
    let mut cfg = spec.train.clone();
    cfg.seed = seed;
    let trained = train(init, &train_set, &val_set, &cfg).map_err(RunError::Aborted)?;
    let checkpoint = Checkpoint {
        model: trained.params.clone(),
        solver: cfg.solver.clone(),
        seed,
        normalization: norm,
        task: task.map(str::to_string),
        epochs_run: trained.epochs_run,
    };
    let test = evaluate(&checkpoint, &bundle.test)?;
    Ok(RunOutcome { checkpoint, trained, test })
}
