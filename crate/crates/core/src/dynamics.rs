//! Network dynamical systems used as ground truth node features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgen::{build_series, DynamicGraphSeries, SeriesConfig};
use crate::tensor::Tensor;

/// Largest integration substep between observation times.
pub const MAX_SUBSTEP: f64 = 1e-2;
const BLOW_UP: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Heat,
    Gene,
    Wealth,
    Opinion,
    Sir,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Heat => "heat",
            Task::Gene => "gene",
            Task::Wealth => "wealth",
            Task::Opinion => "opinion",
            Task::Sir => "sir",
        }
    }

    pub fn channels(self) -> usize {
        if self == Task::Sir {
            3
        } else {
            1
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(Task::Heat),
            "gene" => Ok(Task::Gene),
            "wealth" => Ok(Task::Wealth),
            "opinion" => Ok(Task::Opinion),
            "sir" => Ok(Task::Sir),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// SIR parameter settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SirRegime {
    /// beta = 0.3, gamma = 0.3.
    Outbreak,
    /// beta = 0.25, gamma = 0.7.
    DieOut,
}

impl SirRegime {
    pub fn params(self) -> (f64, f64) {
        match self {
            SirRegime::Outbreak => (0.3, 0.3),
            SirRegime::DieOut => (0.25, 0.7),
        }
    }

    pub fn label(self) -> u8 {
        match self {
            SirRegime::Outbreak => 1,
            SirRegime::DieOut => 0,
        }
    }
}

/// A dynamical system with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum System {
    Heat,
    Gene { f: f64 },
    Wealth { savings: Vec<f64>, delta: f64 },
    Opinion { threshold: f64 },
    Sir { beta: f64, gamma: f64 },
}

impl System {
    /// Default parameters for `task`; wealth savings are drawn per node.
    pub fn sample(task: Task, n: usize, rng: &mut impl Rng) -> Self {
        match task {
            Task::Heat => System::Heat,
            Task::Gene => System::Gene { f: 1.0 },
            Task::Wealth => System::Wealth {
                savings: (0..n).map(|_| rng.random_range(0.0..0.1)).collect(),
                delta: 0.05,
            },
            Task::Opinion => System::Opinion { threshold: 0.5 },
            Task::Sir => Self::sir(SirRegime::Outbreak),
        }
    }

    pub fn sir(regime: SirRegime) -> Self {
        let (beta, gamma) = regime.params();
        System::Sir { beta, gamma }
    }

    pub fn channels(&self) -> usize {
        match self {
            System::Sir { .. } => 3,
            _ => 1,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let ok = match self {
            System::Heat => true,
            System::Gene { f } => f.is_finite(),
            System::Wealth { savings, delta } => {
                savings.len() == n && savings.iter().all(|s| s.is_finite()) && delta.is_finite()
            }
            System::Opinion { threshold } => threshold.is_finite(),
            System::Sir { beta, gamma } => *beta > 0.0 && *gamma > 0.0 && beta.is_finite() && gamma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad system parameters {self:?} for {n} nodes")))
        }
    }
}

/// Neighbour lists of a 0/1 adjacency matrix.
#[derive(Clone, Debug)]
pub struct Neighbors(Vec<Vec<usize>>);

impl Neighbors {
    pub fn new(adjacency: &Tensor) -> Result<Self> {
        let (n, m) = adjacency.dims2()?;
        if n != m {
            return Err(Error::invalid("adjacency must be square"));
        }
        Ok(Self(
            (0..n)
                .map(|u| (0..n).filter(|&v| adjacency.at(u, v) != 0.0).collect())
                .collect(),
        ))
    }

    pub fn degree(&self, u: usize) -> usize {
        self.0[u].len()
    }
}

/// Time derivative of the state for the given topology.
pub fn rhs(system: &System, adjacency: &Tensor, x: &Tensor) -> Result<Tensor> {
    let nb = Neighbors::new(adjacency)?;
    system.validate(nb.0.len())?;
    rhs_with(system, &nb, x)
}

fn rhs_with(system: &System, nb: &Neighbors, x: &Tensor) -> Result<Tensor> {
    let n = nb.0.len();
    let c = system.channels();
    if x.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "rhs",
            lhs: x.shape().to_vec(),
            rhs: vec![n, c],
        });
    }
    let xs = x.data();
    let mut out = vec![0.0; n * c];
    match system {
        System::Heat => {
            // dissipative normalised Laplacian flow; isolated nodes contribute 0
            let scaled: Vec<f64> = (0..n)
                .map(|u| match nb.degree(u) {
                    0 => 0.0,
                    d => xs[u] / (d as f64).sqrt(),
                })
                .collect();
            for u in 0..n {
                out[u] = -nb.0[u].iter().map(|&v| scaled[u] - scaled[v]).sum::<f64>();
            }
        }
        System::Gene { f } => {
            for u in 0..n {
                let inflow: f64 = nb.0[u].iter().map(|&v| xs[v] / (xs[v] + 1.0)).sum();
                out[u] = -xs[u] * f + inflow;
            }
        }
        System::Wealth { savings, delta } => {
            for u in 0..n {
                let exchange: f64 = nb.0[u].iter().map(|&v| xs[v] - xs[u]).sum();
                let capital = if xs[u] < 0.0 {
                    log::warn!("negative capital {} at node {u} clamped to 0", xs[u]);
                    0.0
                } else {
                    xs[u]
                };
                out[u] = savings[u] * capital.powf(0.6) + exchange + delta * xs[u];
            }
        }
        System::Opinion { threshold } => {
            for u in 0..n {
                let pressure: f64 = nb.0[u].iter().map(|&v| xs[v]).sum();
                out[u] = -xs[u] + if pressure >= *threshold { 1.0 } else { 0.0 };
            }
        }
        System::Sir { beta, gamma } => {
            for v in 0..n {
                let (s, i) = (xs[3 * v], xs[3 * v + 1]);
                let force: f64 = nb.0[v].iter().map(|&u| xs[3 * u + 1]).sum();
                let infection = beta * s * force;
                let recovery = gamma * i;
                out[3 * v] = -infection;
                out[3 * v + 1] = infection - recovery;
                out[3 * v + 2] = recovery;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

fn rk4_step(system: &System, nb: &Neighbors, x: &Tensor, h: f64) -> Result<Tensor> {
    let k1 = rhs_with(system, nb, x)?;
    let mut y = x.clone();
    y.axpy(0.5 * h, &k1)?;
    let k2 = rhs_with(system, nb, &y)?;
    let mut y = x.clone();
    y.axpy(0.5 * h, &k2)?;
    let k3 = rhs_with(system, nb, &y)?;
    let mut y = x.clone();
    y.axpy(h, &k3)?;
    let k4 = rhs_with(system, nb, &y)?;
    let mut out = x.clone();
    out.axpy(h / 6.0, &k1)?;
    out.axpy(h / 3.0, &k2)?;
    out.axpy(h / 3.0, &k3)?;
    out.axpy(h / 6.0, &k4)?;
    Ok(out)
}

/// Integrates `system` from `x0` at `times[0]` with classical RK4, holding
/// `adjacency[k]` on `[times[k], times[k+1])`. Returns one state per time.
pub fn simulate_on(system: &System, times: &[f64], adjacency: &[Tensor], x0: &Tensor) -> Result<Vec<Tensor>> {
    if times.len() != adjacency.len() || times.is_empty() {
        return Err(Error::invalid("times and adjacency lengths differ"));
    }
    let n = adjacency[0].shape()[0];
    system.validate(n)?;
    if x0.shape() != [n, system.channels()] {
        return Err(Error::ShapeMismatch {
            op: "simulate",
            lhs: x0.shape().to_vec(),
            rhs: vec![n, system.channels()],
        });
    }
    let mut out = Vec::with_capacity(times.len());
    out.push(x0.clone());
    let mut x = x0.clone();
    let mut nb = Neighbors::new(&adjacency[0])?;
    for k in 0..times.len() - 1 {
        if k > 0 && adjacency[k] != adjacency[k - 1] {
            nb = Neighbors::new(&adjacency[k])?;
        }
        let span = times[k + 1] - times[k];
        let steps = (span / MAX_SUBSTEP).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for s in 0..steps {
            x = rk4_step(system, &nb, &x, h)?;
            let magnitude = x.max_abs();
            if !(magnitude <= BLOW_UP) {
                return Err(Error::BlowUp {
                    t: times[k] + (s + 1) as f64 * h,
                    magnitude,
                });
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

pub fn simulate(system: &System, series: &DynamicGraphSeries, x0: &Tensor) -> Result<Vec<Tensor>> {
    simulate_on(system, &series.times, &series.adjacency, x0)
}

/// Default initial condition for `task`.
pub fn initial_state(task: Task, n: usize, rng: &mut impl Rng) -> Tensor {
    match task {
        Task::Heat | Task::Gene | Task::Wealth => Tensor::from_fn(n, 1, |_, _| rng.random_range(0.0..=25.0)),
        Task::Opinion => Tensor::from_fn(n, 1, |_, _| rng.random_range(-1.0..=1.0)),
        Task::Sir => {
            // a uniform point on the S + I + R = 1 simplex per node
            let mut x = Tensor::zeros(&[n, 3]);
            for u in 0..n {
                let e: [f64; 3] = std::array::from_fn(|_| Exp1.sample(rng));
                let total: f64 = e.iter().sum();
                for (c, v) in e.iter().enumerate() {
                    x.set(u, c, v / total);
                }
            }
            x
        }
    }
}

/// `num_times` strictly increasing times from 0 to `t_end`, both exact,
/// with normalised Gamma(`shape`, 1) gaps. Small shapes give bursty sampling.
pub fn gamma_times(num_times: usize, shape: f64, t_end: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gamma_times_rng(num_times, shape, t_end, &mut rng)
}

pub fn gamma_times_rng(num_times: usize, shape: f64, t_end: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if num_times < 2 || !(shape > 0.0) || !(t_end > 0.0) {
        return Err(Error::invalid("gamma sampling needs num_times ≥ 2, shape > 0, t_end > 0"));
    }
    let dist = Gamma::new(shape, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    loop {
        let gaps: Vec<f64> = (0..num_times - 1).map(|_| dist.sample(rng)).collect();
        let total: f64 = gaps.iter().sum();
        let mut times = Vec::with_capacity(num_times);
        let mut acc = 0.0;
        times.push(0.0);
        for g in &gaps[..gaps.len() - 1] {
            acc += g;
            times.push(t_end * acc / total);
        }
        times.push(t_end);
        if times.windows(2).all(|w| w[1] > w[0]) {
            return Ok(times);
        }
    }
}

/// Outbreak iff the trajectory came from the spreading regime.
pub fn sir_label(regime: SirRegime) -> u8 {
    regime.label()
}

/// Dataset recipe: a graph series plus the system that drives its features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub series: SeriesConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<SirRegime>,
}

/// Builds a graph series and simulates its node features from `seed`.
pub fn generate(cfg: &TaskConfig, seed: u64) -> Result<DynamicGraphSeries> {
    let mut series = build_series(&cfg.series, seed)?;
    let n = cfg.series.num_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let system = match (cfg.task, cfg.regime) {
        (Task::Sir, regime) => System::sir(regime.unwrap_or(SirRegime::Outbreak)),
        (task, _) => System::sample(task, n, &mut rng),
    };
    let x0 = initial_state(cfg.task, n, &mut rng);
    let features = simulate(&system, &series, &x0)?;
    series.features = Some(features);
    if cfg.task == Task::Sir {
        series.labels = Some(vec![sir_label(cfg.regime.unwrap_or(SirRegime::Outbreak))]);
    }
    series.meta.task = Some(cfg.task.name().to_string());
    series.meta.system = Some(serde_json::to_value(&system)?);
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::{conjugate, permute_rows, Permutation};
    use crate::graphgen::{gen_graph, GraphFamily, GraphKind};

    fn complete(n: usize) -> Tensor {
        Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
    }

    #[test]
    fn rhs_examples() {
        let x = Tensor::full(&[5, 1], 3.0);
        assert_eq!(rhs(&System::Heat, &complete(5), &x).unwrap().max_abs(), 0.0);
        let iso = Tensor::zeros(&[3, 3]);
        let x = Tensor::full(&[3, 1], 2.0);
        let d = rhs(&System::Gene { f: 1.0 }, &iso, &x).unwrap();
        assert_eq!(d.data(), &[-2.0, -2.0, -2.0]);
        // isolated nodes have no heat flux
        assert_eq!(rhs(&System::Heat, &iso, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn sir_rates_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gen_graph(&GraphFamily::SmallWorld.defaults(20), 20, 1).unwrap();
        let x = Tensor::from_fn(20, 3, |_, _| rng.random::<f64>());
        let d = rhs(&System::sir(SirRegime::Outbreak), &a, &x).unwrap();
        for v in 0..20 {
            assert!(d.row(v).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn heat_on_two_node_path_conserves_sum() {
        let a = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let times: Vec<f64> = (0..6).map(|k| k as f64 * 0.2).collect();
        let adj = vec![a; 6];
        let x0 = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
        let out = simulate_on(&System::Heat, &times, &adj, &x0).unwrap();
        for x in &out {
            assert!((x.sum() - 1.0).abs() < 1e-8);
        }
        // relaxes towards the mean
        assert!(out[5].at(0, 0) < 0.6 && out[5].at(0, 0) > 0.5);
    }

    #[test]
    fn uniform_heat_is_fixed_on_regular_graphs() {
        let a = gen_graph(&GraphKind::SmallWorld { k: 4, p: 0.0 }, 10, 0).unwrap();
        let x = Tensor::full(&[10, 1], 7.25);
        assert_eq!(rhs(&System::Heat, &a, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn opinion_stays_in_envelope() {
        let cfg = SeriesConfig::desk(GraphFamily::Community);
        let series = build_series(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = initial_state(Task::Opinion, 50, &mut rng);
        let bound = x0.max_abs().max(1.0);
        let out = simulate(&System::Opinion { threshold: 0.5 }, &series, &x0).unwrap();
        assert!(out.iter().all(|x| x.max_abs() <= bound + 1e-12));
    }

    #[test]
    fn sir_die_out_decays() {
        let mut cfg = SeriesConfig::desk(GraphFamily::Grid);
        cfg.num_nodes = 100;
        cfg.graph = GraphFamily::Grid.defaults(100);
        cfg.t_end = 1.0;
        let series = build_series(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = initial_state(Task::Sir, 100, &mut rng);
        let infected = |x: &Tensor| (0..100).map(|v| x.at(v, 1)).sum::<f64>();
        let out = simulate(&System::sir(SirRegime::DieOut), &series, &x0).unwrap();
        assert!(out.windows(2).all(|w| infected(&w[1]) < infected(&w[0])));
        let grows = simulate(&System::sir(SirRegime::Outbreak), &series, &x0).unwrap();
        assert!(infected(grows.last().unwrap()) > infected(out.last().unwrap()));
    }

    #[test]
    fn simulate_is_permutation_covariant() {
        let cfg = SeriesConfig::desk(GraphFamily::PowerLaw);
        let series = build_series(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Permutation::random(50, &mut rng);
        let adj_p: Vec<Tensor> = series.adjacency.iter().map(|a| conjugate(&p, a).unwrap()).collect();
        for task in [Task::Heat, Task::Gene, Task::Opinion, Task::Sir] {
            let system = System::sample(task, 50, &mut rng);
            let x0 = initial_state(task, 50, &mut rng);
            let base = simulate(&system, &series, &x0).unwrap();
            let moved = simulate_on(&system, &series.times, &adj_p, &permute_rows(&p, &x0).unwrap()).unwrap();
            for (b, m) in base.iter().zip(&moved) {
                assert!(permute_rows(&p, b).unwrap().max_abs_diff(m) < 1e-10, "{task}");
            }
        }
    }

    #[test]
    fn gamma_times_shape() {
        let t = gamma_times(30, 3.0, 5.0, 1).unwrap();
        assert_eq!((t[0], t[29]), (0.0, 5.0));
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!(gamma_times(1, 3.0, 5.0, 1).is_err());
        assert!(gamma_times(5, 0.0, 5.0, 1).is_err());
    }

    #[test]
    fn generated_series_carry_features() {
        let cfg = TaskConfig {
            task: Task::Heat,
            series: SeriesConfig::desk(GraphFamily::Community),
            regime: None,
        };
        let s = generate(&cfg, 0).unwrap();
        let f = s.features.as_ref().unwrap();
        assert_eq!(f.len(), 60);
        assert_eq!(f[0].shape(), &[50, 1]);
        assert_eq!(generate(&cfg, 0).unwrap(), s);
    }
}
