//! Random initial graphs and dynamic graph series.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::gamma_times_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generator and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphKind {
    Grid { rows: usize, cols: usize },
    /// Watts–Strogatz ring with `k` neighbours per node, rewired with probability `p`.
    SmallWorld { k: usize, p: f64 },
    /// Barabási–Albert preferential attachment with `m` edges per new node.
    PowerLaw { m: usize },
    /// Stochastic block model with `blocks` equal-size blocks.
    Community { blocks: usize, p_in: f64, p_out: f64 },
}

/// Generator families with default parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFamily {
    Grid,
    SmallWorld,
    PowerLaw,
    Community,
}

impl GraphFamily {
    pub fn defaults(self, n: usize) -> GraphKind {
        match self {
            GraphFamily::Grid => {
                let rows = (1..=n).take_while(|r| r * r <= n).filter(|r| n % r == 0).max().unwrap_or(1);
                GraphKind::Grid { rows, cols: n / rows }
            }
            GraphFamily::SmallWorld => GraphKind::SmallWorld { k: 4, p: 0.1 },
            GraphFamily::PowerLaw => GraphKind::PowerLaw { m: 2 },
            GraphFamily::Community => GraphKind::Community {
                blocks: 2,
                p_in: 0.2,
                p_out: 0.01,
            },
        }
    }
}

impl std::str::FromStr for GraphFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(GraphFamily::Grid),
            "small-world" => Ok(GraphFamily::SmallWorld),
            "power-law" => Ok(GraphFamily::PowerLaw),
            "community" => Ok(GraphFamily::Community),
            other => Err(Error::invalid(format!("unknown graph kind '{other}'"))),
        }
    }
}

fn empty(n: usize) -> Tensor {
    Tensor::zeros(&[n, n])
}

fn link(a: &mut Tensor, i: usize, j: usize, on: bool) {
    let v = if on { 1.0 } else { 0.0 };
    a.set(i, j, v);
    a.set(j, i, v);
}

/// Samples an undirected simple graph as a symmetric 0/1 adjacency matrix.
pub fn gen_graph(kind: &GraphKind, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_graph_with(kind, n, &mut rng)
}

pub fn gen_graph_with(kind: &GraphKind, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::invalid("graphs need at least 2 nodes"));
    }
    let mut a = empty(n);
    match *kind {
        GraphKind::Grid { rows, cols } => {
            if rows * cols != n {
                return Err(Error::invalid(format!("grid {rows}×{cols} does not have {n} nodes")));
            }
            for r in 0..rows {
                for c in 0..cols {
                    let u = r * cols + c;
                    if c + 1 < cols {
                        link(&mut a, u, u + 1, true);
                    }
                    if r + 1 < rows {
                        link(&mut a, u, u + cols, true);
                    }
                }
            }
        }
        GraphKind::SmallWorld { k, p } => {
            if k % 2 != 0 || k == 0 || k >= n || !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("small-world needs even 0 < k < n and p in [0, 1]"));
            }
            for u in 0..n {
                for j in 1..=k / 2 {
                    link(&mut a, u, (u + j) % n, true);
                }
            }
            for j in 1..=k / 2 {
                for u in 0..n {
                    let v = (u + j) % n;
                    if a.at(u, v) == 0.0 || rng.random::<f64>() >= p {
                        continue;
                    }
                    let degree: f64 = a.row(u).iter().sum();
                    if degree as usize >= n - 1 {
                        continue;
                    }
                    let w = loop {
                        let w = rng.random_range(0..n);
                        if w != u && a.at(u, w) == 0.0 {
                            break w;
                        }
                    };
                    link(&mut a, u, v, false);
                    link(&mut a, u, w, true);
                }
            }
        }
        GraphKind::PowerLaw { m } => {
            if m == 0 || m >= n {
                return Err(Error::invalid("power-law needs 1 ≤ m < n"));
            }
            // seed clique on m+1 nodes, then attach proportionally to degree
            let mut ends: Vec<usize> = Vec::new();
            for u in 0..=m {
                for v in u + 1..=m {
                    link(&mut a, u, v, true);
                    ends.extend([u, v]);
                }
            }
            for u in m + 1..n {
                let mut targets = Vec::with_capacity(m);
                while targets.len() < m {
                    let v = ends[rng.random_range(0..ends.len())];
                    if !targets.contains(&v) {
                        targets.push(v);
                    }
                }
                for v in targets {
                    link(&mut a, u, v, true);
                    ends.extend([u, v]);
                }
            }
        }
        GraphKind::Community { blocks, p_in, p_out } => {
            if blocks == 0
                || blocks > n
                || !(0.0..=1.0).contains(&p_in)
                || !(0.0..=1.0).contains(&p_out)
                || p_in <= p_out
            {
                return Err(Error::invalid("community needs 1 ≤ blocks ≤ n and p_in > p_out in [0, 1]"));
            }
            let block = |u: usize| u * blocks / n;
            for u in 0..n {
                for v in u + 1..n {
                    let p = if block(u) == block(v) { p_in } else { p_out };
                    if rng.random::<f64>() < p {
                        link(&mut a, u, v, true);
                    }
                }
            }
        }
    }
    Ok(a)
}

/// Flips every unordered pair `i < j` for which `draw(i, j) < flip_rate`.
/// Pairs are visited row-major over the upper triangle.
pub fn perturb_with(adjacency: &Tensor, flip_rate: f64, mut draw: impl FnMut(usize, usize) -> f64) -> Tensor {
    let n = adjacency.shape()[0];
    let mut out = adjacency.clone();
    for i in 0..n {
        for j in i + 1..n {
            if draw(i, j) < flip_rate {
                let on = out.at(i, j) == 0.0;
                link(&mut out, i, j, on);
            }
        }
    }
    out
}

pub fn perturb(adjacency: &Tensor, seed: u64, flip_rate: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_rng(adjacency, &mut rng, flip_rate)
}

pub fn perturb_rng(adjacency: &Tensor, rng: &mut impl Rng, flip_rate: f64) -> Result<Tensor> {
    if !(flip_rate > 0.0 && flip_rate < 1.0) {
        return Err(Error::invalid("flip rate must lie in (0, 1)"));
    }
    Ok(perturb_with(adjacency, flip_rate, |_, _| rng.random::<f64>()))
}

/// Train / interpolation-validation / extrapolation-validation indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub interp: Vec<usize>,
    pub extrap: Vec<usize>,
}

impl Split {
    /// Final sixth for extrapolation, a random sixth of the total for
    /// interpolation, the rest for training (80/20/20 of 120).
    pub fn sample(num_times: usize, rng: &mut impl Rng) -> Self {
        let held = (num_times as f64 / 6.0).round() as usize;
        let cut = num_times - held;
        let extrap = (cut..num_times).collect();
        let mut interp: Vec<usize> = index::sample(rng, cut, held.min(cut)).into_vec();
        interp.sort_unstable();
        let train = (0..cut).filter(|i| interp.binary_search(i).is_err()).collect();
        Self { train, interp, extrap }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub graph: GraphKind,
    pub num_nodes: usize,
    pub seed: u64,
    pub t_end: f64,
    pub flip_rate: f64,
    pub change_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<serde_json::Value>,
}

/// Timestamps with per-time adjacency and optional node features.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphSeries {
    pub times: Vec<f64>,
    pub adjacency: Vec<Tensor>,
    pub features: Option<Vec<Tensor>>,
    pub split: Split,
    pub labels: Option<Vec<u8>>,
    pub meta: SeriesMeta,
}

impl DynamicGraphSeries {
    pub fn num_nodes(&self) -> usize {
        self.meta.num_nodes
    }

    pub fn change_times(&self) -> Vec<f64> {
        self.meta.change_indices.iter().map(|&i| self.times[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub graph: GraphKind,
    pub num_nodes: usize,
    pub t_end: f64,
    pub num_times: usize,
    pub num_changes: usize,
    pub flip_rate: f64,
    #[serde(default)]
    pub sampling: Sampling,
}

/// How observation times are drawn on `[0, t_end]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    /// Sorted uniform draws.
    #[default]
    Uniform,
    /// Normalised Gamma increments with the given shape; endpoints included.
    Gamma { shape: f64 },
}

impl SeriesConfig {
    pub fn desk(family: GraphFamily) -> Self {
        Self {
            graph: family.defaults(50),
            num_nodes: 50,
            t_end: 5.0,
            num_times: 60,
            num_changes: 6,
            flip_rate: 0.01,
            sampling: Sampling::Uniform,
        }
    }

    pub fn paper(family: GraphFamily) -> Self {
        Self {
            graph: family.defaults(400),
            num_nodes: 400,
            t_end: 5.0,
            num_times: 120,
            num_changes: 12,
            flip_rate: 0.01,
            sampling: Sampling::Uniform,
        }
    }
}

pub fn build_series(cfg: &SeriesConfig, seed: u64) -> Result<DynamicGraphSeries> {
    if cfg.num_times < 2 || cfg.num_changes >= cfg.num_times || cfg.t_end <= 0.0 {
        return Err(Error::invalid(format!(
            "degenerate series: {} times, {} changes, t_end {}",
            cfg.num_times, cfg.num_changes, cfg.t_end
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = gen_graph_with(&cfg.graph, cfg.num_nodes, &mut rng)?;
    let times = match cfg.sampling {
        Sampling::Uniform => loop {
            let mut ts: Vec<f64> = (0..cfg.num_times).map(|_| rng.random_range(0.0..=cfg.t_end)).collect();
            ts.sort_by(f64::total_cmp);
            if ts.windows(2).all(|w| w[1] > w[0]) {
                break ts;
            }
        },
        Sampling::Gamma { shape } => gamma_times_rng(cfg.num_times, shape, cfg.t_end, &mut rng)?,
    };
    let mut change_indices: Vec<usize> = index::sample(&mut rng, cfg.num_times - 1, cfg.num_changes)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    change_indices.sort_unstable();
    let mut adjacency = Vec::with_capacity(cfg.num_times);
    adjacency.push(initial);
    for k in 1..cfg.num_times {
        let prev = &adjacency[k - 1];
        let next = if change_indices.binary_search(&k).is_ok() {
            perturb_rng(prev, &mut rng, cfg.flip_rate)?
        } else {
            prev.clone()
        };
        adjacency.push(next);
    }
    let split = Split::sample(cfg.num_times, &mut rng);
    Ok(DynamicGraphSeries {
        times,
        adjacency,
        features: None,
        split,
        labels: None,
        meta: SeriesMeta {
            graph: cfg.graph.clone(),
            num_nodes: cfg.num_nodes,
            seed,
            t_end: cfg.t_end,
            flip_rate: cfg.flip_rate,
            change_indices,
            task: None,
            system: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::{conjugate, Permutation};

    fn check_simple(a: &Tensor) {
        let n = a.shape()[0];
        for i in 0..n {
            assert_eq!(a.at(i, i), 0.0);
            for j in 0..n {
                assert_eq!(a.at(i, j), a.at(j, i));
                assert!(a.at(i, j) == 0.0 || a.at(i, j) == 1.0);
            }
        }
    }

    fn degrees(a: &Tensor) -> Vec<f64> {
        (0..a.shape()[0]).map(|i| a.row(i).iter().sum()).collect()
    }

    #[test]
    fn grid_two_by_two_is_a_cycle() {
        let a = gen_graph(&GraphKind::Grid { rows: 2, cols: 2 }, 4, 0).unwrap();
        check_simple(&a);
        assert!(degrees(&a).iter().all(|&d| d == 2.0));
        assert!(gen_graph(&GraphKind::Grid { rows: 2, cols: 3 }, 4, 0).is_err());
    }

    #[test]
    fn unrewired_small_world_is_regular() {
        let a = gen_graph(&GraphKind::SmallWorld { k: 4, p: 0.0 }, 12, 3).unwrap();
        check_simple(&a);
        assert!(degrees(&a).iter().all(|&d| d == 4.0));
        assert!(gen_graph(&GraphKind::SmallWorld { k: 3, p: 0.1 }, 12, 3).is_err());
    }

    #[test]
    fn generators_produce_simple_graphs() {
        for fam in [
            GraphFamily::Grid,
            GraphFamily::SmallWorld,
            GraphFamily::PowerLaw,
            GraphFamily::Community,
        ] {
            let a = gen_graph(&fam.defaults(50), 50, 7).unwrap();
            check_simple(&a);
            assert!(a.sum() > 0.0);
        }
        assert!(gen_graph(
            &GraphKind::Community {
                blocks: 2,
                p_in: 0.1,
                p_out: 0.2
            },
            10,
            0
        )
        .is_err());
        assert!(gen_graph(&GraphKind::PowerLaw { m: 0 }, 10, 0).is_err());
    }

    #[test]
    fn perturb_flip_count_is_binomial() {
        let n = 40;
        let pairs = (n * (n - 1) / 2) as f64;
        let rate = 0.05;
        let base = gen_graph(&GraphFamily::Community.defaults(n), n, 1).unwrap();
        let trials = 200;
        let mut total = 0.0;
        for s in 0..trials {
            let out = perturb(&base, s, rate).unwrap();
            check_simple(&out);
            total += out.sub(&base).unwrap().data().iter().filter(|x| **x != 0.0).count() as f64 / 2.0;
        }
        let mean = total / trials as f64;
        let sigma = (pairs * rate * (1.0 - rate) / trials as f64).sqrt();
        assert!((mean - pairs * rate).abs() < 3.0 * sigma, "{mean}");
        assert_eq!(perturb_with(&base, 0.01, |_, _| 1.0), base);
        assert!(perturb(&base, 0, 0.0).is_err());
    }

    #[test]
    fn perturbation_commutes_with_relabelling() {
        let n = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gen_graph(&GraphFamily::Community.defaults(n), n, 2).unwrap();
        let u = {
            let mut u = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in i + 1..n {
                    let x = rng.random::<f64>();
                    u.set(i, j, x);
                    u.set(j, i, x);
                }
            }
            u
        };
        let p = Permutation::random(n, &mut rng);
        let pu = conjugate(&p, &u).unwrap();
        let after = conjugate(&p, &perturb_with(&a, 0.3, |i, j| u.at(i, j))).unwrap();
        let before = perturb_with(&conjugate(&p, &a).unwrap(), 0.3, |i, j| pu.at(i, j));
        assert_eq!(before, after);
    }

    #[test]
    fn series_shapes_and_splits() {
        let cfg = SeriesConfig::desk(GraphFamily::Community);
        let s = build_series(&cfg, 5).unwrap();
        assert_eq!(s.times.len(), 60);
        assert!(s.times.windows(2).all(|w| w[1] > w[0]));
        assert!(s.times.iter().all(|t| (0.0..=5.0).contains(t)));
        assert_eq!(
            (s.split.train.len(), s.split.interp.len(), s.split.extrap.len()),
            (40, 10, 10)
        );
        assert_eq!(s.split.extrap, (50..60).collect::<Vec<_>>());
        let mut all: Vec<usize> = s.split.train.iter().chain(&s.split.interp).chain(&s.split.extrap).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(s.meta.change_indices.len(), 6);
        assert!(!s.meta.change_indices.contains(&0));
        for k in 1..60 {
            if s.adjacency[k] != s.adjacency[k - 1] {
                assert!(s.meta.change_indices.contains(&k));
            }
            check_simple(&s.adjacency[k]);
        }
        assert_eq!(build_series(&cfg, 5).unwrap(), s);
        let bad = SeriesConfig { num_changes: 60, ..cfg };
        assert!(build_series(&bad, 0).is_err());
    }

    #[test]
    fn paper_scale_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Split::sample(120, &mut rng);
        assert_eq!((s.train.len(), s.interp.len(), s.extrap.len()), (80, 20, 20));
    }
}
