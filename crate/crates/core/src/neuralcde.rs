//! Graph CDE model variants.
//!
//! A latent node state `Z` (n × d_z) evolves under a graph-convolutional
//! vector field driven by the interpolated adjacency path. Variants differ
//! in how the adjacency `A_t` and its rate `dA_t` are fused into the
//! effective operator `Ā` used by every convolution.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::graphgen::DynamicGraphSeries;
use crate::pathinterp::{augment_time, CubicPath, TimeChannel};
use crate::solver::{rk4_solve, rk4_solve_grid, tsit5_solve, AdaptiveConfig, LatentPath, SolverStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned constant field, blind to the graph.
    Constant,
    /// Graph ODE on the most recent observed snapshot.
    Gnode,
    /// Convolution with the interpolated adjacency.
    Adjacency,
    /// `W₁·A + W₂·dA` with dense n × n matrices.
    PreMult,
    /// `A + dA`.
    Original,
    /// `L₁(A) + L₂(dA)` over the 15-map equivariant basis.
    Peng,
    /// Equivariant fusion with a node-wise feature control.
    PengFeatures,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Constant,
        Variant::Gnode,
        Variant::Adjacency,
        Variant::PreMult,
        Variant::Original,
        Variant::Peng,
        Variant::PengFeatures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Constant => "constant",
            Variant::Gnode => "gnode",
            Variant::Adjacency => "adjacency",
            Variant::PreMult => "pre-mult",
            Variant::Original => "original",
            Variant::Peng => "peng",
            Variant::PengFeatures => "peng-features",
        }
    }

    pub fn is_equivariant_fusion(self) -> bool {
        matches!(self, Variant::Peng | Variant::PengFeatures)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Per-node linear readout at every save time.
    NodeRegression,
    /// Mean-pooled final state to a single logit.
    GraphClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_nodes: usize,
    /// Observed node feature channels `d_x`.
    pub input_channels: usize,
    pub output_channels: usize,
    pub latent: usize,
    pub hidden: usize,
    /// Number of graph convolutions in the field.
    pub layers: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    /// Separate fusion weights for every convolution.
    pub per_layer_fusion: bool,
    pub head: Head,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_nodes: usize, input_channels: usize, output_channels: usize) -> Self {
        Self {
            variant,
            num_nodes,
            input_channels,
            output_channels,
            latent: 16,
            hidden: 16,
            layers: 2,
            activation: Activation::Tanh,
            layer_norm: true,
            per_layer_fusion: false,
            head: Head::NodeRegression,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.latent == 0 || self.hidden == 0 || self.num_nodes < 2 {
            return Err(Error::invalid("model needs ≥ 1 layer, positive widths and ≥ 2 nodes"));
        }
        if self.variant == Variant::PengFeatures && self.input_channels == 0 {
            return Err(Error::invalid("peng-features needs node features"));
        }
        Ok(())
    }

    /// Width of the field's last convolution.
    fn field_width(&self) -> usize {
        match self.variant {
            Variant::PengFeatures => self.latent * (self.input_channels + 1),
            _ => self.latent,
        }
    }

    fn fusion_sets(&self) -> usize {
        if self.per_layer_fusion {
            self.layers
        } else {
            1
        }
    }

    fn readout_width(&self) -> usize {
        match self.head {
            Head::NodeRegression => self.output_channels,
            Head::GraphClassification => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Model configuration plus every trainable tensor, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

pub fn fusion_name(which: usize, set: usize) -> String {
    format!("fusion.l{which}.{set}")
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut push = |name: String, tensor: Tensor| tensors.push(NamedTensor { name, tensor });
        let (n, dz) = (config.num_nodes, config.latent);
        match config.variant {
            Variant::Constant => push("const.b".into(), glorot(n, dz, &mut rng)),
            Variant::PreMult => {
                push("fusion.w1".into(), glorot(n, n, &mut rng));
                push("fusion.w2".into(), glorot(n, n, &mut rng));
            }
            Variant::Peng | Variant::PengFeatures => {
                for set in 0..config.fusion_sets() {
                    push(fusion_name(1, set), crate::equivariant::PermEquivWeights::identity().to_tensor());
                    push(fusion_name(2, set), crate::equivariant::PermEquivWeights::identity().to_tensor());
                }
            }
            _ => {}
        }
        if config.variant != Variant::Constant {
            for l in 0..config.layers {
                let fan_in = if l == 0 { dz } else { config.hidden };
                let fan_out = if l + 1 == config.layers { config.field_width() } else { config.hidden };
                push(format!("gcn.{l}.weight"), glorot(fan_in, fan_out, &mut rng));
                if config.layer_norm && l + 1 < config.layers {
                    push(format!("gcn.{l}.gain"), Tensor::ones(&[1, config.hidden]));
                    push(format!("gcn.{l}.bias"), Tensor::zeros(&[1, config.hidden]));
                }
            }
        }
        push("init.weight".into(), glorot(2, dz, &mut rng));
        if config.input_channels > 0 {
            push("init.obs".into(), glorot(config.input_channels, dz, &mut rng));
        }
        let dy = config.readout_width();
        push("readout.weight".into(), glorot(dz, dy, &mut rng));
        push("readout.bias".into(), Tensor::zeros(&[1, dy]));
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn fusion_param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|p| p.name.starts_with("fusion."))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Records every tensor as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    /// Binds caller-recorded variables, one per tensor in order.
    pub fn bind_vars<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> Result<Bound<'t>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid(format!("expected {} variables, got {}", self.tensors.len(), vars.len())));
        }
        for (p, v) in self.tensors.iter().zip(vars) {
            if v.shape() != p.tensor.shape() {
                return Err(Error::invalid(format!("variable for '{}' has the wrong shape", p.name)));
            }
        }
        let index = self.tensors.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Bound {
            tape,
            config: self.config.clone(),
            vars: vars.to_vec(),
            index,
        })
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars: Vec<Var<'t>> = self
            .tensors
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        let index = self.tensors.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Bound {
            tape,
            config: self.config.clone(),
            vars,
            index,
        }
    }
}

/// Everything the field needs from the control at one instant.
#[derive(Clone, Debug)]
pub struct ControlSample {
    /// Interpolated adjacency.
    pub adjacency: Tensor,
    /// Its derivative with respect to the time channel.
    pub adjacency_rate: Tensor,
    /// Derivative of the time channel with respect to the integration variable.
    pub time_rate: f64,
    /// Index of the most recent observed snapshot.
    pub snapshot: usize,
    /// Derivative of the time-augmented feature path, n × (d_x + 1).
    pub feature_rate: Option<Tensor>,
}

pub trait ControlPath {
    fn domain(&self) -> (f64, f64);
    /// Integration-variable positions of the observed snapshots.
    fn knots(&self) -> Vec<f64>;
    fn sample(&self, s: f64) -> Result<ControlSample>;
    fn snapshot(&self, index: usize) -> &Tensor;
    /// Time value, adjacency and (if observed) features at the start.
    fn initial(&self) -> (f64, &Tensor, Option<&Tensor>);
}

/// Spline control built from a dynamic graph series.
#[derive(Clone, Debug)]
pub struct GraphControl {
    times: Vec<f64>,
    adjacency: CubicPath,
    snapshots: Vec<Tensor>,
    initial_features: Option<Tensor>,
    feature_path: Option<CubicPath>,
}

impl GraphControl {
    /// Adjacency control, plus a time-augmented feature control when
    /// `features` is given.
    pub fn new(times: &[f64], adjacency: &[Tensor], features: Option<&[Tensor]>) -> Result<Self> {
        let path = CubicPath::fit(times, adjacency)?;
        let (initial_features, feature_path) = match features {
            Some(fs) => {
                let aug = augment_time(fs, times, TimeChannel::Prepend)?;
                (Some(fs[0].clone()), Some(CubicPath::fit(times, &aug)?))
            }
            None => (None, None),
        };
        Ok(Self {
            times: times.to_vec(),
            adjacency: path,
            snapshots: adjacency.to_vec(),
            initial_features,
            feature_path,
        })
    }

    /// Makes the first observation available to the initial state only.
    pub fn with_initial_features(mut self, x0: Tensor) -> Self {
        self.initial_features = Some(x0);
        self
    }

    pub fn from_series(series: &DynamicGraphSeries) -> Result<Self> {
        Self::new(&series.times, &series.adjacency, series.features.as_deref())
    }

    pub fn num_nodes(&self) -> usize {
        self.snapshots[0].shape()[0]
    }
}

impl ControlPath for GraphControl {
    fn domain(&self) -> (f64, f64) {
        self.adjacency.domain()
    }

    fn knots(&self) -> Vec<f64> {
        self.times.clone()
    }

    fn sample(&self, s: f64) -> Result<ControlSample> {
        let adjacency = self.adjacency.eval(s)?;
        let adjacency_rate = self.adjacency.deriv(s)?;
        let snapshot = self.times.partition_point(|&k| k <= s).saturating_sub(1);
        let feature_rate = match &self.feature_path {
            Some(path) => Some(path.deriv(s)?),
            None => None,
        };
        Ok(ControlSample {
            adjacency,
            adjacency_rate,
            time_rate: 1.0,
            snapshot,
            feature_rate,
        })
    }

    fn snapshot(&self, index: usize) -> &Tensor {
        &self.snapshots[index]
    }

    fn initial(&self) -> (f64, &Tensor, Option<&Tensor>) {
        (self.times[0], &self.snapshots[0], self.initial_features.as_ref())
    }
}

/// Strictly increasing cubic reparametrisation `s ↦ t` of `[t0, t1]` that
/// fixes both endpoints: with `u = (s − t0)/(t1 − t0)`,
/// `t = t0 + (t1 − t0)·(u + a·u(1 − u)(1 − 2u))`, monotone for `−1 < a < 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicWarp {
    pub t0: f64,
    pub t1: f64,
    pub a: f64,
}

impl CubicWarp {
    pub fn new(t0: f64, t1: f64, a: f64) -> Result<Self> {
        if !(t1 > t0) || !(-1.0 < a && a < 2.0) {
            return Err(Error::invalid("warp needs t1 > t0 and −1 < a < 2"));
        }
        Ok(Self { t0, t1, a })
    }

    pub fn apply(&self, s: f64) -> f64 {
        let span = self.t1 - self.t0;
        let u = (s - self.t0) / span;
        self.t0 + span * (u + self.a * u * (1.0 - u) * (1.0 - 2.0 * u))
    }

    /// `dt/ds`
    pub fn rate(&self, s: f64) -> f64 {
        let u = (s - self.t0) / (self.t1 - self.t0);
        1.0 + self.a * (1.0 - 6.0 * u + 6.0 * u * u)
    }

    /// Solves `apply(s) = t` by bisection.
    pub fn invert(&self, t: f64) -> f64 {
        let (mut lo, mut hi) = (self.t0, self.t1);
        if t <= lo {
            return lo;
        }
        if t >= hi {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.apply(mid) < t {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// A control read through a time warp; the integration variable is `s`
/// and the time channel is `t = warp(s)`.
pub struct WarpedControl<'c, C: ControlPath> {
    pub inner: &'c C,
    pub warp: CubicWarp,
}

impl<C: ControlPath> ControlPath for WarpedControl<'_, C> {
    fn domain(&self) -> (f64, f64) {
        let (a, b) = self.inner.domain();
        (self.warp.invert(a), self.warp.invert(b))
    }

    fn knots(&self) -> Vec<f64> {
        self.inner.knots().into_iter().map(|t| self.warp.invert(t)).collect()
    }

    fn sample(&self, s: f64) -> Result<ControlSample> {
        let rate = self.warp.rate(s);
        let mut inner = self.inner.sample(self.warp.apply(s))?;
        inner.time_rate *= rate;
        inner.feature_rate = inner.feature_rate.map(|dx| dx.scale(rate));
        Ok(inner)
    }

    fn snapshot(&self, index: usize) -> &Tensor {
        self.inner.snapshot(index)
    }

    fn initial(&self) -> (f64, &Tensor, Option<&Tensor>) {
        self.inner.initial()
    }
}

/// How the latent ODE is integrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolverConfig {
    Tsit5(AdaptiveConfig),
    /// Uniform RK4 steps over the whole interval.
    Rk4 { steps: usize },
    /// RK4 with every gap between control knots cut into `substeps` pieces.
    Rk4Knots { substeps: usize },
    /// RK4 on an explicit grid.
    Rk4Grid { grid: Vec<f64> },
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Tsit5(AdaptiveConfig::default())
    }
}

/// Output of a forward pass.
pub struct Forward<'t> {
    pub states: Vec<Var<'t>>,
    /// Node predictions per save time, or a single logit for classification.
    pub outputs: Vec<Var<'t>>,
    pub stats: SolverStats,
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    config: ModelConfig,
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn var(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    /// `Z₀ = σ(A₀ · H · W) + X₀ · W_obs` with `H = [t₀·𝟙, degree/(n−1)]`.
    pub fn init_state(&self, control: &dyn ControlPath) -> Result<Var<'t>> {
        let (t0, a0, x0) = control.initial();
        let n = a0.shape()[0];
        let summary = Tensor::from_fn(n, 2, |u, c| {
            if c == 0 {
                t0
            } else {
                a0.row(u).iter().sum::<f64>() / (n - 1) as f64
            }
        });
        let pooled = self.tape.constant(a0.matmul(&summary)?);
        let mut z = pooled.matmul(self.var("init.weight")?)?.activate(self.config.activation)?;
        if let (Some(x0), true) = (x0, self.config.input_channels > 0) {
            z = z.add(self.tape.constant(x0.clone()).matmul(self.var("init.obs")?)?)?;
        }
        Ok(z)
    }

    fn fused(&self, set: usize, sample: &ControlSample, control: &dyn ControlPath) -> Result<Var<'t>> {
        let tape = self.tape;
        match self.config.variant {
            Variant::Constant => Err(Error::invalid("constant field has no graph operator")),
            Variant::Gnode => Ok(tape.constant(control.snapshot(sample.snapshot).clone())),
            Variant::Adjacency => Ok(tape.constant(sample.adjacency.clone())),
            Variant::Original => Ok(tape.constant(sample.adjacency.add(&sample.adjacency_rate)?)),
            Variant::PreMult => {
                let a = tape.constant(sample.adjacency.clone());
                let da = tape.constant(sample.adjacency_rate.clone());
                self.var("fusion.w1")?.matmul(a)?.add(self.var("fusion.w2")?.matmul(da)?)
            }
            Variant::Peng | Variant::PengFeatures => {
                let a = tape.constant(sample.adjacency.clone());
                let da = tape.constant(sample.adjacency_rate.clone());
                a.equiv_apply(self.var(&fusion_name(1, set))?)?
                    .add(da.equiv_apply(self.var(&fusion_name(2, set))?)?)
            }
        }
    }

    /// The vector field with respect to the integration variable.
    pub fn field_at(&self, z: Var<'t>, sample: &ControlSample, control: &dyn ControlPath) -> Result<Var<'t>> {
        let cfg = &self.config;
        if cfg.variant == Variant::Constant {
            return self.var("const.b")?.scale(sample.time_rate);
        }
        let shared = if cfg.per_layer_fusion {
            None
        } else {
            Some(self.fused(0, sample, control)?)
        };
        let mut h = z;
        for l in 0..cfg.layers {
            let abar = match shared {
                Some(a) => a,
                None => self.fused(l, sample, control)?,
            };
            h = abar.matmul(h.matmul(self.var(&format!("gcn.{l}.weight"))?)?)?.activate(cfg.activation)?;
            if cfg.layer_norm && l + 1 < cfg.layers {
                h = h
                    .layer_norm(1e-5)?
                    .mul(self.var(&format!("gcn.{l}.gain"))?)?
                    .add(self.var(&format!("gcn.{l}.bias"))?)?;
            }
        }
        if cfg.variant == Variant::PengFeatures {
            let dx = sample
                .feature_rate
                .as_ref()
                .ok_or_else(|| Error::invalid("peng-features needs a feature control"))?;
            let (n, c) = dx.dims2()?;
            let dx = self.tape.constant(dx.reshape(&[n, 1, c])?);
            return h.reshape(&[n, cfg.latent, c])?.mul(dx)?.sum_last_axis();
        }
        h.scale(sample.time_rate)
    }

    pub fn field(&self, s: f64, z: Var<'t>, control: &dyn ControlPath) -> Result<Var<'t>> {
        let sample = control.sample(s)?;
        self.field_at(z, &sample, control)
    }

    pub fn readout(&self, z: Var<'t>) -> Result<Var<'t>> {
        let w = self.var("readout.weight")?;
        let b = self.var("readout.bias")?;
        match self.config.head {
            Head::NodeRegression => z.matmul(w)?.add(b),
            Head::GraphClassification => {
                let n = z.shape()[0];
                let pool = self.tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
                pool.matmul(z)?.matmul(w)?.add(b)
            }
        }
    }

    /// Latent path at the save times (in the control's integration variable).
    pub fn solve(&self, control: &dyn ControlPath, save_times: &[f64], solver: &SolverConfig) -> Result<LatentPath<Var<'t>>> {
        let z0 = self.init_state(control)?;
        let (t0, _) = control.domain();
        let t1 = save_times.last().copied().unwrap_or(t0);
        if t1 <= t0 {
            return Ok(LatentPath {
                times: save_times.to_vec(),
                states: vec![z0; save_times.len()],
                stats: SolverStats::default(),
            });
        }
        let field = |s: f64, z: &Var<'t>| self.field(s, *z, control);
        match solver {
            SolverConfig::Tsit5(cfg) => tsit5_solve(field, z0, t0, t1, save_times, cfg),
            SolverConfig::Rk4 { steps } => rk4_solve(field, z0, t0, t1, *steps, save_times),
            SolverConfig::Rk4Knots { substeps } => {
                let substeps = (*substeps).max(1);
                let knots: Vec<f64> = control.knots().into_iter().filter(|&k| k <= t1).collect();
                let mut grid = Vec::with_capacity(knots.len() * substeps);
                for w in knots.windows(2) {
                    for j in 0..substeps {
                        grid.push(w[0] + (w[1] - w[0]) * j as f64 / substeps as f64);
                    }
                }
                grid.push(*knots.last().unwrap_or(&t0));
                if *grid.last().unwrap() < t1 {
                    grid.push(t1);
                }
                rk4_solve_grid(field, z0, &grid, save_times)
            }
            SolverConfig::Rk4Grid { grid } => rk4_solve_grid(field, z0, grid, save_times),
        }
    }

    /// Predictions at the save times; a classification head reads out only
    /// the last state.
    pub fn forward(&self, control: &dyn ControlPath, save_times: &[f64], solver: &SolverConfig) -> Result<Forward<'t>> {
        let path = self.solve(control, save_times, solver)?;
        let outputs = match self.config.head {
            Head::NodeRegression => path.states.iter().map(|&z| self.readout(z)).collect::<Result<_>>()?,
            Head::GraphClassification => match path.states.last() {
                Some(&z) => vec![self.readout(z)?],
                None => Vec::new(),
            },
        };
        Ok(Forward {
            states: path.states,
            outputs,
            stats: path.stats,
        })
    }
}

/// Plain-tensor predictions without keeping gradients.
pub fn predict(params: &ModelParams, control: &dyn ControlPath, save_times: &[f64], solver: &SolverConfig) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let bound = params.bind_constant(&tape);
    let fwd = bound.forward(control, save_times, solver)?;
    Ok(fwd.outputs.iter().map(|v| (*v.value()).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::{conjugate, permute_rows, Permutation};
    use crate::graphgen::{build_series, GraphFamily, SeriesConfig};

    fn small_series(n: usize, seed: u64) -> DynamicGraphSeries {
        let cfg = SeriesConfig {
            graph: GraphFamily::Community.defaults(n),
            num_nodes: n,
            t_end: 1.0,
            num_times: 6,
            num_changes: 2,
            flip_rate: 0.2,
            sampling: Default::default(),
        };
        build_series(&cfg, seed).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn parameter_layout() {
        let peng = ModelParams::init(ModelConfig::new(Variant::Peng, 10, 1, 1), 0).unwrap();
        assert_eq!(peng.fusion_param_count(), 30);
        assert_eq!(peng.get("fusion.l1.0").unwrap().data()[0], 1.0);
        assert_eq!(peng.get("readout.bias").unwrap().max_abs(), 0.0);
        let pre = ModelParams::init(ModelConfig::new(Variant::PreMult, 10, 1, 1), 0).unwrap();
        assert_eq!(pre.fusion_param_count(), 200);
        let mut cfg = ModelConfig::new(Variant::Peng, 10, 1, 1);
        cfg.per_layer_fusion = true;
        assert_eq!(ModelParams::init(cfg, 0).unwrap().fusion_param_count(), 60);
        assert!(ModelParams::init(ModelConfig::new(Variant::PengFeatures, 10, 0, 1), 0).is_err());
    }

    #[test]
    fn init_state_examples() {
        let tape = Tape::new();
        let params = ModelParams::init(ModelConfig::new(Variant::Peng, 5, 0, 1), 1).unwrap();
        let bound = params.bind(&tape);
        let empty = GraphControl::new(&[0.0, 1.0], &[Tensor::zeros(&[5, 5]), Tensor::zeros(&[5, 5])], None).unwrap();
        assert_eq!(bound.init_state(&empty).unwrap().value().max_abs(), 0.0);
        let k5 = Tensor::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 });
        let full = GraphControl::new(&[0.5, 1.0], &[k5.clone(), k5], None).unwrap();
        let z = bound.init_state(&full).unwrap().value();
        for u in 1..5 {
            assert_eq!(z.row(u), z.row(0));
        }
    }

    #[test]
    fn peng_with_identity_fusion_is_original() {
        let s = small_series(6, 3);
        let control = GraphControl::from_series(&s).unwrap();
        let peng = ModelParams::init(ModelConfig::new(Variant::Peng, 6, 0, 1), 5).unwrap();
        let mut orig = ModelParams::init(ModelConfig::new(Variant::Original, 6, 0, 1), 5).unwrap();
        for p in &mut orig.tensors {
            p.tensor = peng.get(&p.name).unwrap().clone();
        }
        let solver = SolverConfig::Rk4Knots { substeps: 2 };
        let a = predict(&peng, &control, &s.times, &solver).unwrap();
        let b = predict(&orig, &control, &s.times, &solver).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-13);
        }
    }

    #[test]
    fn constant_variant_is_affine_in_time() {
        let s = small_series(5, 1);
        let control = GraphControl::from_series(&s).unwrap();
        let params = ModelParams::init(ModelConfig::new(Variant::Constant, 5, 0, 1), 2).unwrap();
        let out = predict(&params, &control, &s.times, &SolverConfig::default()).unwrap();
        let slope = |i: usize| out[i].sub(&out[0]).unwrap().scale(1.0 / (s.times[i] - s.times[0]));
        for i in 2..out.len() {
            assert!(slope(i).max_abs_diff(&slope(1)) < 1e-9);
        }
    }

    #[test]
    fn peng_field_is_equivariant() {
        let n = 7;
        let s = small_series(n, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Permutation::random(n, &mut rng);
        let control = GraphControl::from_series(&s).unwrap();
        let moved: Vec<Tensor> = s.adjacency.iter().map(|a| conjugate(&p, a).unwrap()).collect();
        let control_p = GraphControl::new(&s.times, &moved, None).unwrap();
        let mut params = ModelParams::init(ModelConfig::new(Variant::Peng, n, 0, 1), 4).unwrap();
        for name in ["fusion.l1.0", "fusion.l2.0"] {
            let w = params.get_mut(name).unwrap();
            for x in w.data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z = Tensor::from_fn(n, 16, |_, _| rng.random_range(-1.0..1.0));
        let f = bound.field(0.37, tape.constant(z.clone()), &control).unwrap().value();
        let fp = bound
            .field(0.37, tape.constant(permute_rows(&p, &z).unwrap()), &control_p)
            .unwrap()
            .value();
        assert!(permute_rows(&p, &f).unwrap().max_abs_diff(&fp) < 1e-12);
    }

    #[test]
    fn classification_head_gives_one_logit() {
        let s = small_series(5, 2);
        let feats: Vec<Tensor> = (0..6).map(|k| Tensor::full(&[5, 3], k as f64 * 0.1)).collect();
        let control = GraphControl::new(&s.times, &s.adjacency, Some(&feats)).unwrap();
        let mut cfg = ModelConfig::new(Variant::PengFeatures, 5, 3, 1);
        cfg.head = Head::GraphClassification;
        let params = ModelParams::init(cfg, 0).unwrap();
        let out = predict(&params, &control, &[*s.times.last().unwrap()], &SolverConfig::Rk4Knots { substeps: 1 }).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), &[1, 1]);
    }
}
