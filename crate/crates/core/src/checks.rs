//! Self-checks run by the `check` command and the acceptance suite.
//!
//! Each check measures one or more deviations and compares them with a
//! fixed limit. Nothing here panics on a failed comparison; the caller
//! decides what a failure means.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, Activation, Tape};
use crate::dynamics::{initial_state, simulate_on, SirRegime, System, Task};
use crate::equivariant::{
    basis_apply, basis_rank, conjugate, lsq_decompose, materialize, permute_rows, project_group_average, BasisMap,
    Permutation,
};
use crate::error::{Error, Result};
use crate::graphgen::{build_series, gen_graph, DynamicGraphSeries, GraphFamily, GraphKind, SeriesConfig};
use crate::neuralcde::{
    fusion_name, predict, ControlPath, CubicWarp, GraphControl, ModelConfig, ModelParams, SolverConfig, Variant,
    WarpedControl,
};
use crate::solver::{rk4_solve, rk4_solve_grid, tsit5_solve, AdaptiveConfig};
use crate::tensor::Tensor;
use crate::trainer::mse_var;

/// How a measured value is judged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Limit {
    Below(f64),
    Above(f64),
    AtMost(f64),
    Within(f64, f64),
    Equals(f64),
}

impl Limit {
    pub fn admits(self, x: f64) -> bool {
        match self {
            Limit::Below(b) => x < b,
            Limit::Above(b) => x > b,
            Limit::AtMost(b) => x <= b,
            Limit::Within(lo, hi) => lo <= x && x <= hi,
            Limit::Equals(b) => x == b,
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Below(b) => write!(f, "< {b:e}"),
            Limit::Above(b) => write!(f, "> {b:e}"),
            Limit::AtMost(b) => write!(f, "<= {b:e}"),
            Limit::Within(lo, hi) => write!(f, "in [{lo}, {hi}]"),
            Limit::Equals(b) => write!(f, "== {b}"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Finding {
    pub what: String,
    pub value: f64,
    pub limit: Limit,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub findings: Vec<Finding>,
    pub seconds: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.passed)
    }

    fn push(&mut self, what: impl Into<String>, value: f64, limit: Limit) {
        let passed = limit.admits(value);
        self.findings.push(Finding {
            what: what.into(),
            value,
            limit,
            passed,
        });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{verdict} {} ({:.2}s)", self.name, self.seconds)?;
        for x in &self.findings {
            let mark = if x.passed { "ok " } else { "BAD" };
            writeln!(f, "  {mark} {}: {:.3e} (want {})", x.what, x.value, x.limit)?;
        }
        Ok(())
    }
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 7] = ["equivariance", "timewarp", "projection", "rank", "gradients", "solver-order", "dynamics"];

pub fn run_check(name: &str, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut report = match name {
        "equivariance" => equivariance(seed),
        "timewarp" => time_warp(seed),
        "projection" => projection(seed),
        "rank" => rank(),
        "gradients" => gradients(seed),
        "solver-order" => solver_order(),
        "dynamics" => dynamics(seed),
        other => Err(Error::invalid(format!("unknown check '{other}'; expected one of {}", CHECK_NAMES.join(", ")))),
    }?;
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn report(name: &'static str) -> CheckReport {
    CheckReport {
        name,
        findings: Vec::new(),
        seconds: 0.0,
    }
}

/// Small dynamic graph on evenly spaced times with one feature channel
/// per node.
fn toy_series(n: usize, num_times: usize, seed: u64) -> Result<DynamicGraphSeries> {
    let cfg = SeriesConfig {
        graph: GraphKind::Community {
            blocks: 2,
            p_in: 0.6,
            p_out: 0.1,
        },
        num_nodes: n,
        t_end: 1.0,
        num_times,
        num_changes: 2,
        flip_rate: 0.2,
        sampling: Default::default(),
    };
    let mut series = build_series(&cfg, seed)?;
    series.times = (0..num_times).map(|k| k as f64 / (num_times - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let features = (0..num_times)
        .map(|_| Tensor::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    series.features = Some(features);
    Ok(series)
}

fn relabel(series: &DynamicGraphSeries, p: &Permutation) -> Result<DynamicGraphSeries> {
    let mut out = series.clone();
    out.adjacency = series.adjacency.iter().map(|a| conjugate(p, a)).collect::<Result<_>>()?;
    if let Some(fs) = &series.features {
        out.features = Some(fs.iter().map(|x| permute_rows(p, x)).collect::<Result<_>>()?);
    }
    Ok(out)
}

/// Model with every fusion coefficient perturbed away from the identity.
fn model(variant: Variant, n: usize, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::init(ModelConfig::new(variant, n, 1, 1), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    for p in params.tensors.iter_mut() {
        if p.name.starts_with("fusion.l") {
            for w in p.tensor.data_mut() {
                *w += rng.random_range(-0.1..0.1);
            }
        }
    }
    Ok(params)
}

fn control_for(series: &DynamicGraphSeries, variant: Variant) -> Result<GraphControl> {
    let features = series.features.as_ref().ok_or_else(|| Error::invalid("toy series has features"))?;
    if variant == Variant::PengFeatures {
        GraphControl::new(&series.times, &series.adjacency, Some(features))
    } else {
        Ok(GraphControl::new(&series.times, &series.adjacency, None)?.with_initial_features(features[0].clone()))
    }
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Largest deviation of `forward(P·in)` from `P·forward(in)` over `perms`.
fn forward_deviation(params: &ModelParams, series: &DynamicGraphSeries, perms: &[Permutation], steps: usize) -> Result<f64> {
    let solver = SolverConfig::Rk4 { steps };
    let variant = params.config.variant;
    let (t0, t1) = (series.times[0], *series.times.last().expect("series has times"));
    let saves: Vec<f64> = (0..=16).map(|k| t0 + (t1 - t0) * k as f64 / 16.0).collect();
    let base = predict(params, &control_for(series, variant)?, &saves, &solver)?;
    let mut worst: f64 = 0.0;
    for p in perms {
        let moved = relabel(series, p)?;
        let out = predict(params, &control_for(&moved, variant)?, &saves, &solver)?;
        let expect: Vec<Tensor> = base.iter().map(|y| permute_rows(p, y)).collect::<Result<_>>()?;
        worst = worst.max(max_diff(&out, &expect));
    }
    Ok(worst)
}

/// Basis maps under every permutation of 2, 3 and 4 nodes on integer
/// matrices, then whole forward passes under random relabellings.
pub fn equivariance(seed: u64) -> Result<CheckReport> {
    let mut rep = report("equivariance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 2..=4 {
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let a = Tensor::from_fn(n, n, |_, _| rng.random_range(-9..=9) as f64);
            for p in Permutation::all(n) {
                let pa = conjugate(&p, &a)?;
                for map in BasisMap::ALL {
                    let lhs = basis_apply(map, &pa)?;
                    let rhs = conjugate(&p, &basis_apply(map, &a)?)?;
                    worst = worst.max(lhs.max_abs_diff(&rhs));
                }
            }
        }
        rep.push(format!("15 basis maps, all of S{n}, integer inputs"), worst, Limit::Equals(0.0));
    }

    let n = 8;
    let series = toy_series(n, 6, seed)?;
    let perms: Vec<Permutation> = (0..20).map(|_| Permutation::random(n, &mut rng)).collect();
    for variant in [Variant::Peng, Variant::PengFeatures, Variant::Original, Variant::Adjacency, Variant::Gnode] {
        let dev = forward_deviation(&model(variant, n, seed)?, &series, &perms, 128)?;
        rep.push(format!("{variant} forward, n={n}, 20 relabellings"), dev, Limit::Below(1e-9));
    }
    let dev = forward_deviation(&model(Variant::PreMult, n, seed)?, &series, &perms, 128)?;
    rep.push("pre-mult forward breaks equivariance", dev, Limit::Above(1e-3));
    Ok(rep)
}

/// Solving in a warped integration variable reproduces the unwarped
/// outputs at corresponding times.
pub fn time_warp(seed: u64) -> Result<CheckReport> {
    let mut rep = report("timewarp");
    let series = toy_series(8, 6, seed)?;
    let substeps = 128;
    let knots = &series.times;
    let mut grid = Vec::new();
    for w in knots.windows(2) {
        for j in 0..substeps {
            grid.push(w[0] + (w[1] - w[0]) * j as f64 / substeps as f64);
        }
    }
    grid.push(*knots.last().expect("series has times"));
    let (t0, t1) = (knots[0], *knots.last().expect("series has times"));
    for variant in [Variant::Peng, Variant::PengFeatures] {
        let params = model(variant, 8, seed)?;
        let control = control_for(&series, variant)?;
        let base = predict(&params, &control, knots, &SolverConfig::Rk4Grid { grid: grid.clone() })?;
        for a in [0.6, -0.5] {
            let warp = CubicWarp::new(t0, t1, a)?;
            let warped = WarpedControl {
                inner: &control,
                warp,
            };
            let s_grid: Vec<f64> = grid.iter().map(|&t| warp.invert(t)).collect();
            let s_saves: Vec<f64> = knots.iter().map(|&t| warp.invert(t)).collect();
            let out = predict(&params, &warped, &s_saves, &SolverConfig::Rk4Grid { grid: s_grid })?;
            rep.push(format!("{variant}, cubic warp a={a}"), max_diff(&base, &out), Limit::Below(1e-6));
        }
    }
    Ok(rep)
}

/// Linear case with four nodes: averaging the pre-multiplication field over
/// all relabellings gives the field of an equivariant fusion.
pub fn projection(seed: u64) -> Result<CheckReport> {
    let mut rep = report("projection");
    let n = 4;
    let series = toy_series(n, 5, seed)?;
    let control = control_for(&series, Variant::PreMult)?;
    let mut cfg = ModelConfig::new(Variant::PreMult, n, 1, 1);
    cfg.layers = 1;
    cfg.layer_norm = false;
    cfg.activation = Activation::Identity;
    let pre = ModelParams::init(cfg.clone(), seed)?;
    let w1 = pre.get("fusion.w1").expect("pre-mult has w1").clone();
    let w2 = pre.get("fusion.w2").expect("pre-mult has w2").clone();
    let weight = pre.get("gcn.0.weight").expect("one layer").clone();

    let mut decomposed = Vec::new();
    for (label, w) in [("A", &w1), ("dA", &w2)] {
        let dense = materialize(n, |a| w.matmul(a))?;
        let averaged = project_group_average(&dense, n)?;
        let dec = lsq_decompose(&averaged, n)?;
        rep.push(format!("residual of averaged fusion on {label}"), dec.residual, Limit::Below(1e-10));
        decomposed.push(dec.weights);
    }

    let mut peng_cfg = cfg;
    peng_cfg.variant = Variant::Peng;
    let mut peng = ModelParams::init(peng_cfg, seed)?;
    for p in peng.tensors.iter_mut() {
        p.tensor = match p.name.as_str() {
            name if name == fusion_name(1, 0) => decomposed[0].to_tensor(),
            name if name == fusion_name(2, 0) => decomposed[1].to_tensor(),
            name => pre.get(name).ok_or_else(|| Error::invalid(format!("no '{name}' in pre-mult model")))?.clone(),
        };
    }

    let perms = Permutation::all(n);
    let averaged_field = |s: f64, z: &Tensor| -> Result<Tensor> {
        let sample = control.sample(s)?;
        let mut acc = Tensor::zeros(z.shape());
        for p in &perms {
            let a = conjugate(p, &sample.adjacency)?;
            let da = conjugate(p, &sample.adjacency_rate)?;
            let fused = w1.matmul(&a)?.add(&w2.matmul(&da)?)?;
            let out = fused.matmul(&permute_rows(p, z)?)?.matmul(&weight)?;
            acc.axpy(1.0, &permute_rows(&p.inverse(), &out)?)?;
        }
        Ok(acc.scale(sample.time_rate / perms.len() as f64))
    };
    let tape = Tape::new();
    let bound = peng.bind_constant(&tape);
    let z0 = bound.init_state(&control)?;
    let (t0, t1) = control.domain();
    let saves: Vec<f64> = (0..=8).map(|k| t0 + (t1 - t0) * k as f64 / 8.0).collect();
    let steps = 64;
    let avg = rk4_solve(averaged_field, (*z0.value()).clone(), t0, t1, steps, &saves)?;
    let proj = rk4_solve(|s, z| bound.field(s, *z, &control), z0, t0, t1, steps, &saves)?;
    let proj: Vec<Tensor> = proj.states.iter().map(|v| (*v.value()).clone()).collect();
    rep.push("averaged pre-mult flow vs decomposed PENG flow", max_diff(&avg.states, &proj), Limit::Below(1e-10));
    Ok(rep)
}

pub fn rank() -> Result<CheckReport> {
    let mut rep = report("rank");
    rep.push("rank of the 15 maps at n=4", basis_rank(4)? as f64, Limit::Equals(15.0));
    rep.push("rank of the 15 maps at n=3", basis_rank(3)? as f64, Limit::Below(15.0));
    Ok(rep)
}

/// Reverse-mode gradient of a full forward pass against central differences.
pub fn gradients(seed: u64) -> Result<CheckReport> {
    let mut rep = report("gradients");
    let n = 6;
    let series = toy_series(n, 4, seed)?;
    let targets = series.features.clone().expect("toy series has features");
    for variant in [Variant::Peng, Variant::PengFeatures] {
        let params = model(variant, n, seed)?;
        let control = control_for(&series, variant)?;
        let (t0, t1) = control.domain();
        let saves: Vec<f64> = (1..=3).map(|k| t0 + (t1 - t0) * k as f64 / 3.0).collect();
        let tensors: Vec<Tensor> = params.tensors.iter().map(|p| p.tensor.clone()).collect();
        let err = gradcheck(
            |tape, vars| {
                let bound = params.bind_vars(tape, vars)?;
                let fwd = bound.forward(&control, &saves, &SolverConfig::Rk4 { steps: 3 })?;
                mse_var(&fwd.outputs, &targets[1..], &[0, 1, 2])
            },
            &tensors,
            1e-5,
        )?;
        rep.push(format!("{variant}, n={n}, 3 RK4 steps, max relative error"), err, Limit::Below(1e-4));
    }
    Ok(rep)
}

/// Least-squares slope of `log err` against `log h`.
pub fn convergence_slope(steps: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|&s| (1.0 / s as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

pub fn solver_order() -> Result<CheckReport> {
    let mut rep = report("solver-order");
    let cfg = AdaptiveConfig {
        rtol: 1e-8,
        atol: 1e-8,
        ..Default::default()
    };
    let saves = [0.25, 0.5, 0.75, 1.0];
    let path = tsit5_solve(|_, z: &Tensor| Ok(z.scale(-1.0)), Tensor::scalar(1.0), 0.0, 1.0, &saves, &cfg)?;
    let worst = saves
        .iter()
        .zip(&path.states)
        .map(|(t, z)| ((z.item() - (-t).exp()) / (-t).exp()).abs())
        .fold(0.0, f64::max);
    rep.push("tsit5 on z' = -z, relative error", worst, Limit::Below(1e-8));

    // z' = cos(t)·z, exact z = exp(sin t)
    let steps = [8, 16, 32, 64];
    let errors: Vec<f64> = steps
        .iter()
        .map(|&k| {
            let path = rk4_solve(|t, z: &Tensor| Ok(z.scale(t.cos())), Tensor::scalar(1.0), 0.0, 2.0, k, &[2.0])?;
            Ok((path.states[0].item() - 2f64.sin().exp()).abs())
        })
        .collect::<Result<_>>()?;
    rep.push("rk4 convergence slope", convergence_slope(&steps, &errors), Limit::Within(3.8, 4.2));
    let grid: Vec<f64> = (0..=40).map(|k| 2.0 * (k as f64 / 40.0).powi(2)).collect();
    let path = rk4_solve_grid(|t, z: &Tensor| Ok(z.scale(t.cos())), Tensor::scalar(1.0), &grid, &[2.0])?;
    rep.push(
        "rk4 on a graded grid, abs error",
        (path.states[0].item() - 2f64.sin().exp()).abs(),
        Limit::Below(1e-5),
    );
    Ok(rep)
}

pub fn dynamics(seed: u64) -> Result<CheckReport> {
    let mut rep = report("dynamics");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 100;
    let grid = gen_graph(&GraphFamily::Grid.defaults(n), n, seed)?;
    let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let adjacency = vec![grid; times.len()];
    for regime in [SirRegime::Outbreak, SirRegime::DieOut] {
        let x0 = initial_state(Task::Sir, n, &mut rng);
        let xs = simulate_on(&System::sir(regime), &times, &adjacency, &x0)?;
        let drift = xs
            .iter()
            .flat_map(|x| (0..n).map(move |u| (x.row(u).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max);
        rep.push(format!("sir {regime:?} S+I+R drift over [0,1]"), drift, Limit::Below(1e-8));
    }

    let ring = gen_graph(&GraphKind::SmallWorld { k: 4, p: 0.0 }, 30, seed)?;
    let x0 = Tensor::full(&[30, 1], 7.5);
    let xs = simulate_on(&System::Heat, &times, &vec![ring; times.len()], &x0)?;
    let moved = xs.iter().map(|x| x.max_abs_diff(&x0)).fold(0.0, f64::max);
    rep.push("heat on a regular ring from a uniform state, max change", moved, Limit::Equals(0.0));

    let cfg = SeriesConfig {
        graph: GraphFamily::SmallWorld.defaults(30),
        num_nodes: 30,
        t_end: 1.0,
        num_times: 12,
        num_changes: 3,
        flip_rate: 0.05,
        sampling: Default::default(),
    };
    let series = build_series(&cfg, seed)?;
    for task in [Task::Heat, Task::Gene, Task::Opinion, Task::Sir] {
        let system = System::sample(task, 30, &mut rng);
        let x0 = initial_state(task, 30, &mut rng);
        let base = simulate_on(&system, &series.times, &series.adjacency, &x0)?;
        let p = Permutation::random(30, &mut rng);
        let moved = relabel(&series, &p)?;
        let out = simulate_on(&system, &moved.times, &moved.adjacency, &permute_rows(&p, &x0)?)?;
        let expect: Vec<Tensor> = base.iter().map(|x| permute_rows(&p, x)).collect::<Result<_>>()?;
        rep.push(format!("{task} simulation under relabelling"), max_diff(&out, &expect), Limit::Below(1e-10));
    }
    Ok(rep)
}
