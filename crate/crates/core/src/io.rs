//! Dataset files: one JSON document per dynamic graph series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgen::{DynamicGraphSeries, SeriesMeta, Split};
use crate::tensor::Tensor;

/// On-disk layout. Edges are stored once as `[i, j]` with `i < j`;
/// `splits` is `[train, interp, extrap]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFile {
    pub times: Vec<f64>,
    pub adjacency: Vec<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
    pub splits: [Vec<usize>; 3],
    pub meta: SeriesMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl From<&DynamicGraphSeries> for SeriesFile {
    fn from(s: &DynamicGraphSeries) -> Self {
        let n = s.meta.num_nodes;
        let adjacency = s
            .adjacency
            .iter()
            .map(|a| {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if a.at(i, j) != 0.0 {
                            edges.push([i, j]);
                        }
                    }
                }
                edges
            })
            .collect();
        let features = s.features.as_ref().map(|fs| {
            fs.iter()
                .map(|x| (0..x.shape()[0]).map(|u| x.row(u).to_vec()).collect())
                .collect()
        });
        Self {
            times: s.times.clone(),
            adjacency,
            features,
            splits: [s.split.train.clone(), s.split.interp.clone(), s.split.extrap.clone()],
            meta: s.meta.clone(),
            labels: s.labels.clone(),
        }
    }
}

impl TryFrom<SeriesFile> for DynamicGraphSeries {
    type Error = Error;

    fn try_from(f: SeriesFile) -> Result<Self> {
        let n = f.meta.num_nodes;
        let k = f.times.len();
        if f.adjacency.len() != k {
            return Err(Error::invalid("one edge list per timestamp expected"));
        }
        if f.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        let adjacency = f
            .adjacency
            .iter()
            .map(|edges| {
                let mut a = Tensor::zeros(&[n, n]);
                for &[i, j] in edges {
                    if i >= j || j >= n {
                        return Err(Error::invalid(format!("bad edge [{i}, {j}] for {n} nodes")));
                    }
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        let features = match f.features {
            Some(fs) => {
                if fs.len() != k {
                    return Err(Error::invalid("one feature matrix per timestamp expected"));
                }
                Some(
                    fs.iter()
                        .map(|rows| {
                            let t = Tensor::from_rows(rows)?;
                            if t.shape()[0] != n {
                                return Err(Error::invalid("feature rows must match the node count"));
                            }
                            Ok(t)
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        let [train, interp, extrap] = f.splits;
        let mut all: Vec<usize> = train.iter().chain(&interp).chain(&extrap).copied().collect();
        all.sort_unstable();
        if all != (0..k).collect::<Vec<_>>() {
            return Err(Error::invalid("splits must partition the snapshot indices"));
        }
        Ok(DynamicGraphSeries {
            times: f.times,
            adjacency,
            features,
            split: Split { train, interp, extrap },
            labels: f.labels,
            meta: f.meta,
        })
    }
}

pub fn to_json(series: &DynamicGraphSeries) -> Result<String> {
    Ok(serde_json::to_string(&SeriesFile::from(series))?)
}

pub fn from_json(text: &str) -> Result<DynamicGraphSeries> {
    serde_json::from_str::<SeriesFile>(text)?.try_into()
}

pub fn write_series(path: &Path, series: &DynamicGraphSeries) -> Result<()> {
    std::fs::write(path, to_json(series)?)?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<DynamicGraphSeries> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, Task, TaskConfig};
    use crate::graphgen::{GraphFamily, SeriesConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = TaskConfig {
            task: Task::Gene,
            series: SeriesConfig::desk(GraphFamily::SmallWorld),
            regime: None,
        };
        let s = generate(&cfg, 11).unwrap();
        let text = to_json(&s).unwrap();
        assert_eq!(from_json(&text).unwrap(), s);
        let file: SeriesFile = serde_json::from_str(&text).unwrap();
        assert!(file.adjacency.iter().flatten().all(|[i, j]| i < j));
    }

    #[test]
    fn rejects_bad_files() {
        let cfg = TaskConfig {
            task: Task::Heat,
            series: SeriesConfig::desk(GraphFamily::Grid),
            regime: None,
        };
        let s = generate(&cfg, 1).unwrap();
        let mut f = SeriesFile::from(&s);
        f.adjacency[0].push([3, 2]);
        assert!(DynamicGraphSeries::try_from(f).is_err());
        let mut f = SeriesFile::from(&s);
        f.splits[0].pop();
        assert!(DynamicGraphSeries::try_from(f).is_err());
    }
}
