//! Losses, optimisation, training loops, evaluation and the fusion-weight
//! ablation table.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::equivariant::{BasisMap, PermEquivWeights};
use crate::error::{Error, Result};
use crate::graphgen::{DynamicGraphSeries, Split};
use crate::neuralcde::{fusion_name, predict, GraphControl, Head, ModelParams, SolverConfig, Variant};
use crate::par;
use crate::tensor::Tensor;

/// Mean squared error over the snapshots where `mask` is true.
pub fn mse(pred: &[Tensor], target: &[Tensor], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || mask.len() != pred.len() {
        return Err(Error::invalid("prediction, target and mask lengths differ"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), _) in pred.iter().zip(target).zip(mask).filter(|(_, &m)| m) {
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Err(Error::invalid("empty loss mask"));
    }
    Ok(sum / count as f64)
}

/// Mean logistic cross-entropy of `logits` against 0/1 `targets`.
pub fn bce_logits(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid("logits and targets must be non-empty and equally long"));
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

/// Recorded masked MSE over the selected snapshot indices.
pub fn mse_var<'t>(pred: &[Var<'t>], target: &[Tensor], indices: &[usize]) -> Result<Var<'t>> {
    let first = *pred.first().ok_or_else(|| Error::invalid("no predictions"))?;
    if indices.is_empty() {
        return Err(Error::invalid("empty loss mask"));
    }
    let tape = first.tape();
    let mut terms = Vec::with_capacity(indices.len());
    let mut count = 0usize;
    for &i in indices {
        let (p, t) = (
            pred.get(i).ok_or_else(|| Error::invalid("mask index past the predictions"))?,
            &target[i],
        );
        let diff = p.sub(tape.constant(t.clone()))?;
        terms.push(diff.mul(diff)?.sum()?);
        count += t.len();
    }
    let weighted: Vec<(f64, Var<'t>)> = terms.into_iter().map(|v| (1.0 / count as f64, v)).collect();
    crate::autodiff::lin_comb(&weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Decay weights directly (AdamW) instead of adding `wd·p` to the gradient.
    pub decoupled: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            decoupled: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and moment counts differ"));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || m.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let mut gi = g.data()[i];
            if cfg.decoupled {
                pd[i] *= 1.0 - cfg.lr * cfg.weight_decay;
            } else {
                gi += cfg.weight_decay * pd[i];
            }
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Stops once `patience` epochs past `min_epochs` bring no improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_epochs: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_epochs: usize) -> Self {
        Self {
            patience,
            min_epochs,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the validation loss of `epoch` (0-based). Returns whether it
    /// improved and whether training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else if epoch >= self.min_epochs {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub patience: usize,
    pub min_epochs: usize,
    pub loss: LossKind,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// 300 epochs at lr 1e-2, wd 1e-4, patience never reached, one RK4 step
    /// per gap between observations.
    pub fn desk() -> Self {
        Self {
            epochs: 300,
            optimizer: AdamConfig::new(1e-2, 1e-4),
            patience: 300,
            min_epochs: 0,
            loss: LossKind::Mse,
            solver: SolverConfig::Rk4Knots { substeps: 1 },
            seed: 0,
        }
    }

    /// 2000 epochs, patience 200 after a minimum of 200.
    pub fn paper() -> Self {
        Self {
            epochs: 2000,
            patience: 200,
            min_epochs: 200,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience > self.epochs || !(self.optimizer.lr > 0.0) || self.epochs == 0 {
            return Err(Error::invalid("need epochs ≥ 1, patience ≤ epochs and a positive learning rate"));
        }
        Ok(())
    }
}

/// Per-channel affine standardisation of node features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics over the training snapshots of the given series.
    pub fn fit(series: &[DynamicGraphSeries]) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut squares: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in series {
            let feats = s.features.as_ref().ok_or_else(|| Error::invalid("series has no features"))?;
            for &i in &s.split.train {
                let x = &feats[i];
                let (n, c) = x.dims2()?;
                if sums.is_empty() {
                    sums = vec![0.0; c];
                    squares = vec![0.0; c];
                }
                for u in 0..n {
                    for ch in 0..c {
                        sums[ch] += x.at(u, ch);
                        squares[ch] += x.at(u, ch).powi(2);
                    }
                }
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::invalid("no training snapshots to normalise with"));
        }
        let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let std = squares
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = q / count as f64 - m * m;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        Ok(Tensor::from_fn(n, c, |u, ch| (x.at(u, ch) - self.mean[ch]) / self.std[ch]))
    }
}

/// A series turned into model inputs and targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub control: GraphControl,
    pub times: Vec<f64>,
    pub targets: Vec<Tensor>,
    pub split: Split,
    pub label: Option<f64>,
}

impl Prepared {
    pub fn new(series: &DynamicGraphSeries, variant: Variant, norm: Option<&Normalization>) -> Result<Self> {
        let targets: Vec<Tensor> = match &series.features {
            Some(fs) => match norm {
                Some(nm) => fs.iter().map(|x| nm.apply(x)).collect::<Result<_>>()?,
                None => fs.clone(),
            },
            None => Vec::new(),
        };
        let control = if variant == Variant::PengFeatures {
            if targets.is_empty() {
                return Err(Error::invalid("peng-features needs node features"));
            }
            GraphControl::new(&series.times, &series.adjacency, Some(&targets))?
        } else {
            let c = GraphControl::new(&series.times, &series.adjacency, None)?;
            match targets.first() {
                Some(x0) => c.with_initial_features(x0.clone()),
                None => c,
            }
        };
        Ok(Self {
            control,
            times: series.times.clone(),
            targets,
            split: series.split.clone(),
            label: series.labels.as_ref().and_then(|l| l.first()).map(|&y| y as f64),
        })
    }

    fn save_times(&self, upto: usize) -> &[f64] {
        &self.times[..=upto]
    }
}

/// Per-epoch losses. `interp` and `extrap` are validation losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub interp: f64,
    pub extrap: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

/// Training stopped on an error; `last_good` holds the best parameters so far.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub last_good: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for Aborted {}

/// Loss and gradient of one series, in parameter order.
fn series_gradient(params: &ModelParams, p: &Prepared, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = match cfg.loss {
        LossKind::Mse => {
            let upto = *p.split.train.iter().max().ok_or_else(|| Error::invalid("empty training split"))?;
            let fwd = bound.forward(&p.control, p.save_times(upto), &cfg.solver)?;
            mse_var(&fwd.outputs, &p.targets, &p.split.train)?
        }
        LossKind::Bce => {
            let label = p.label.ok_or_else(|| Error::invalid("classification series without a label"))?;
            let end = p.times.len() - 1;
            let fwd = bound.forward(&p.control, &p.times[end..], &cfg.solver)?;
            fwd.outputs[0].bce_with_logits(&Tensor::new(vec![1, 1], vec![label])?)?
        }
    };
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mean loss and gradient over a batch; series run in parallel and are
/// reduced in input order.
pub fn batch_gradient(params: &ModelParams, batch: &[Prepared], cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts = par::map(batch, |p| series_gradient(params, p, cfg));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.tensor.shape())).collect();
    for part in parts {
        let (l, grads) = part?;
        loss += scale * l;
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.axpy(scale, g)?;
        }
    }
    Ok((loss, total))
}

/// Validation losses (interp, extrap) of `params` on the given series.
fn validation(params: &ModelParams, val: &[Prepared], cfg: &TrainConfig) -> Result<(f64, f64)> {
    match cfg.loss {
        LossKind::Mse => {
            let m = regression_metrics(params, val, &cfg.solver)?;
            Ok((m.interp, m.extrap))
        }
        LossKind::Bce => {
            let c = classification_metrics(params, val, &cfg.solver)?;
            Ok((c.bce, c.bce))
        }
    }
}

/// Adam training with early stopping on the interpolation-validation loss.
pub fn train(init: ModelParams, train_set: &[Prepared], val_set: &[Prepared], cfg: &TrainConfig) -> std::result::Result<Trained, Box<Aborted>> {
    let started = Instant::now();
    let abort = |error: Error, last_good: &ModelParams, history: &[EpochRecord]| {
        Box::new(Aborted {
            error,
            last_good: last_good.clone(),
            history: history.to_vec(),
        })
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, &init, &[]));
    }
    let head_ok = matches!(
        (cfg.loss, init.config.head),
        (LossKind::Mse, Head::NodeRegression) | (LossKind::Bce, Head::GraphClassification)
    );
    if !head_ok {
        return Err(abort(Error::invalid("loss does not match the model head"), &init, &[]));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut state = OptimState::new(&params.tensors.iter().map(|p| p.tensor.clone()).collect::<Vec<_>>());
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_epochs);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let (loss, grads) = match batch_gradient(&params, train_set, cfg) {
            Ok(x) => x,
            Err(e) => return Err(abort(e, &best, &history)),
        };
        let mut tensors: Vec<Tensor> = params.tensors.iter().map(|p| p.tensor.clone()).collect();
        if let Err(e) = adam_step(&mut tensors, &grads, &mut state, &cfg.optimizer) {
            return Err(abort(e, &best, &history));
        }
        let (interp, extrap) = match validation(&params, val_set, cfg) {
            Ok(v) => v,
            Err(e) => return Err(abort(e, &best, &history)),
        };
        if !interp.is_finite() {
            return Err(abort(Error::NonFinite("validation loss"), &best, &history));
        }
        // losses describe the parameters before this epoch's update
        history.push(EpochRecord {
            epoch,
            train: loss,
            interp,
            extrap,
        });
        let (improved, stop) = stopper.observe(epoch, interp);
        if improved {
            best = params.clone();
        }
        for (p, t) in params.tensors.iter_mut().zip(tensors) {
            p.tensor = t;
        }
        epochs_run = epoch + 1;
        log::debug!("epoch {epoch}: train {loss:.6} interp {interp:.6} extrap {extrap:.6}");
        if stop {
            break;
        }
    }
    Ok(Trained {
        params: best,
        history,
        best_epoch: stopper.best_epoch,
        epochs_run,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean squared errors over the train, interp, extrap and all snapshots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub train: f64,
    pub interp: f64,
    pub extrap: f64,
    pub all: f64,
}

/// Squared error of one snapshot.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotLoss {
    pub series: usize,
    pub index: usize,
    pub time: f64,
    pub phase: &'static str,
    pub mse: f64,
}

fn phase(split: &Split, i: usize) -> &'static str {
    if split.extrap.contains(&i) {
        "extrap"
    } else if split.interp.contains(&i) {
        "interp"
    } else {
        "train"
    }
}

/// Per-snapshot errors of every series at every timestamp.
pub fn snapshot_losses(params: &ModelParams, set: &[Prepared], solver: &SolverConfig) -> Result<Vec<SnapshotLoss>> {
    let per = par::map(set, |p| -> Result<Vec<f64>> {
        let pred = predict(params, &p.control, &p.times, solver)?;
        pred.iter()
            .zip(&p.targets)
            .map(|(y, t)| mse(std::slice::from_ref(y), std::slice::from_ref(t), &[true]))
            .collect()
    });
    let mut out = Vec::new();
    for (s, (p, losses)) in set.iter().zip(per).enumerate() {
        for (i, l) in losses?.into_iter().enumerate() {
            out.push(SnapshotLoss {
                series: s,
                index: i,
                time: p.times[i],
                phase: phase(&p.split, i),
                mse: l,
            });
        }
    }
    Ok(out)
}

pub fn regression_metrics(params: &ModelParams, set: &[Prepared], solver: &SolverConfig) -> Result<RegressionMetrics> {
    let losses = snapshot_losses(params, set, solver)?;
    let mean = |keep: &dyn Fn(&SnapshotLoss) -> bool| {
        let picked: Vec<f64> = losses.iter().filter(|l| keep(l)).map(|l| l.mse).collect();
        if picked.is_empty() {
            f64::NAN
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    };
    Ok(RegressionMetrics {
        train: mean(&|l| l.phase == "train"),
        interp: mean(&|l| l.phase == "interp"),
        extrap: mean(&|l| l.phase == "extrap"),
        all: mean(&|_| true),
    })
}

/// Ratio of the mean last to the mean first extrapolation-snapshot loss.
pub fn extrapolation_growth(losses: &[SnapshotLoss]) -> f64 {
    let series = losses.iter().map(|l| l.series).max().map_or(0, |s| s + 1);
    let (mut first, mut last) = (0.0, 0.0);
    for s in 0..series {
        let ex: Vec<&SnapshotLoss> = losses.iter().filter(|l| l.series == s && l.phase == "extrap").collect();
        if let (Some(a), Some(b)) = (ex.first(), ex.last()) {
            first += a.mse;
            last += b.mse;
        }
    }
    last / first
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub bce: f64,
}

pub fn classification_metrics(params: &ModelParams, set: &[Prepared], solver: &SolverConfig) -> Result<ClassificationMetrics> {
    let logits = par::map(set, |p| -> Result<(f64, f64)> {
        let label = p.label.ok_or_else(|| Error::invalid("classification series without a label"))?;
        let end = p.times.len() - 1;
        let out = predict(params, &p.control, &p.times[end..], solver)?;
        Ok((out[0].item(), label))
    });
    let pairs: Vec<(f64, f64)> = logits.into_iter().collect::<Result<_>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let correct = pairs.iter().filter(|(x, y)| (*x > 0.0) == (*y > 0.5)).count();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / pairs.len().max(1) as f64,
        bce: bce_logits(&xs, &ys)?,
    })
}

/// `mean ± 1.96·σ/√runs` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// One fusion weight, shaped like a row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub operation: String,
    pub placement: String,
    pub layer: String,
    pub channel: String,
    pub weight: f64,
    pub bold: bool,
}

/// Magnitude above which a weight is flagged.
pub const BOLD_THRESHOLD: f64 = 0.1;

/// The 15 weights of every fusion set, for both the A and dA channels.
pub fn ablate_fusion(params: &ModelParams) -> Result<Vec<AblationRow>> {
    let cfg = &params.config;
    if !cfg.variant.is_equivariant_fusion() {
        return Err(Error::invalid(format!("ablation needs an equivariant-fusion model, got {}", cfg.variant)));
    }
    let sets = if cfg.per_layer_fusion { cfg.layers } else { 1 };
    let mut rows = Vec::with_capacity(sets * 30);
    for set in 0..sets {
        let layer = if cfg.per_layer_fusion {
            (set + 1).to_string()
        } else {
            "shared".to_string()
        };
        for (which, channel) in [(1, "A"), (2, "dA")] {
            let name = fusion_name(which, set);
            let t = params.get(&name).ok_or_else(|| Error::invalid(format!("missing {name}")))?;
            let w = PermEquivWeights::from_tensor(t)?;
            for map in BasisMap::ALL {
                let (operation, placement) = map.label();
                let weight = w.get(map);
                rows.push(AblationRow {
                    operation: operation.to_string(),
                    placement: placement.to_string(),
                    layer: layer.clone(),
                    channel: channel.to_string(),
                    weight,
                    bold: weight.abs() > BOLD_THRESHOLD,
                });
            }
        }
    }
    Ok(rows)
}

/// Whether the identity weight has the largest magnitude in every (layer, channel) block.
pub fn identity_dominates(rows: &[AblationRow]) -> bool {
    rows.chunks(15).all(|block| {
        let id = block[0].weight.abs();
        block[1..].iter().all(|r| r.weight.abs() <= id)
    })
}

/// Trained model plus what is needed to reproduce its predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub solver: SolverConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub epochs_run: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub variant: String,
    pub task: String,
    pub graph_kind: String,
    pub split: String,
    pub value: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "variant", "task", "graph_kind", "split", "mse_or_acc", "epochs_run", "wall_seconds"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.variant.clone(),
            r.task.clone(),
            r.graph_kind.clone(),
            r.split.clone(),
            r.value.to_string(),
            r.epochs_run.to_string(),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train", "interp_val", "extrap_val"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train.to_string(), r.interp.to_string(), r.extrap.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshot_csv(path: &Path, losses: &[SnapshotLoss]) -> Result<()> {
    write_rows(path, losses)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_rows(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 4.0]]).unwrap();
        assert_eq!(mse(&[a.clone()], &[a.clone()], &[true]).unwrap(), 0.0);
        assert!((bce_logits(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let masked = mse(&[a.clone(), b.clone()], &[b.clone(), b.clone()], &[true, false]).unwrap();
        assert_eq!(masked, mse(&[a.clone()], &[b.clone()], &[true]).unwrap());
        assert_eq!(masked, 2.5);
        assert!(mse(&[a.clone()], &[b], &[false]).is_err());
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!(bce_logits(&[800.0], &[1.0]).unwrap() < 1e-300);
        assert!((bce_logits(&[-800.0], &[1.0]).unwrap() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn adam_single_step_by_hand() {
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = OptimState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.5)], &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so Δp = −lr·g/(|g| + ε)
        let expected = 2.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);

        let mut q = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(&q);
        adam_step(&mut q, &[Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
        assert_eq!(q[0].item(), 1.0);

        let wd = AdamConfig::new(0.1, 0.5);
        let mut r = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(&r);
        adam_step(&mut r, &[Tensor::scalar(0.0)], &mut st, &wd).unwrap();
        assert!((r[0].item() - 0.95).abs() < 1e-15);
        let coupled = AdamConfig { decoupled: false, ..wd };
        let mut s = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(&s);
        adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st, &coupled).unwrap();
        assert!((s[0].item() - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn plateau_stops_at_min_plus_patience() {
        let mut es = EarlyStopping::new(7, 20);
        let mut ran = 0;
        for epoch in 0..1000 {
            ran = epoch + 1;
            if es.observe(epoch, 1.0).1 {
                break;
            }
        }
        assert_eq!(ran, 27);
    }

    #[test]
    fn interval_and_median() {
        let (m, h) = confidence_interval(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((h - 1.96 * (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
