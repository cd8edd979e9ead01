//! Linear permutation-equivariant maps on `n×n` matrices.
//!
//! The space of linear maps `L` with `L(P A Pᵀ) = P L(A) Pᵀ` for every
//! permutation matrix `P` is 15-dimensional once `n ≥ 4`. [`BasisMap`]
//! enumerates a spanning set; each map is evaluated through row, column,
//! total and trace sums in `O(n²)` and is never materialized outside the
//! verification helpers ([`materialize`], [`lsq_decompose`]).
//!
//! [`project_group_average`] averages an arbitrary linear map over all
//! conjugations by `S_n`, which is the orthogonal projection onto the
//! equivariant subspace.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// The 15 basis maps, numbered 1..=15.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasisMap {
    /// `A`
    Identity = 1,
    /// `Aᵀ`
    Transpose = 2,
    /// `diag(diag(A))`
    Diagonal = 3,
    /// `A𝟙𝟙ᵀ`: row `i` filled with the `i`-th row sum.
    RowSumsOnRows = 4,
    /// `𝟙(A𝟙)ᵀ`: column `j` filled with the `j`-th row sum.
    RowSumsOnColumns = 5,
    /// `diag(A𝟙)`
    RowSumsOnDiagonal = 6,
    /// `Aᵀ𝟙𝟙ᵀ`: row `i` filled with the `i`-th column sum.
    ColumnSumsOnRows = 7,
    /// `𝟙(Aᵀ𝟙)ᵀ = 𝟙𝟙ᵀA`: column `j` filled with the `j`-th column sum.
    ColumnSumsOnColumns = 8,
    /// `diag(Aᵀ𝟙)`
    ColumnSumsOnDiagonal = 9,
    /// `(𝟙ᵀA𝟙)·𝟙𝟙ᵀ`
    TotalOnAll = 10,
    /// `(𝟙ᵀA𝟙)·I`
    TotalOnDiagonal = 11,
    /// `tr(A)·𝟙𝟙ᵀ`
    TraceOnAll = 12,
    /// `tr(A)·I`
    TraceOnDiagonal = 13,
    /// `diag(A)𝟙ᵀ`
    DiagonalOnRows = 14,
    /// `𝟙diag(A)ᵀ`
    DiagonalOnColumns = 15,
}

impl BasisMap {
    pub const ALL: [BasisMap; 15] = [
        BasisMap::Identity,
        BasisMap::Transpose,
        BasisMap::Diagonal,
        BasisMap::RowSumsOnRows,
        BasisMap::RowSumsOnColumns,
        BasisMap::RowSumsOnDiagonal,
        BasisMap::ColumnSumsOnRows,
        BasisMap::ColumnSumsOnColumns,
        BasisMap::ColumnSumsOnDiagonal,
        BasisMap::TotalOnAll,
        BasisMap::TotalOnDiagonal,
        BasisMap::TraceOnAll,
        BasisMap::TraceOnDiagonal,
        BasisMap::DiagonalOnRows,
        BasisMap::DiagonalOnColumns,
    ];

    pub fn from_index(index: usize) -> Result<Self> {
        (1..=15)
            .contains(&index)
            .then(|| Self::ALL[index - 1])
            .ok_or_else(|| Error::invalid(format!("basis index {index} not in 1..=15")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Operation group and placement, as used in the ablation report.
    pub fn label(self) -> (&'static str, &'static str) {
        match self {
            BasisMap::Identity => ("identity", ""),
            BasisMap::Transpose => ("transpose", ""),
            BasisMap::Diagonal => ("diagonalisation", ""),
            BasisMap::RowSumsOnRows => ("sum rows", "rows"),
            BasisMap::RowSumsOnColumns => ("sum rows", "columns"),
            BasisMap::RowSumsOnDiagonal => ("sum rows", "diagonal"),
            BasisMap::ColumnSumsOnRows => ("sum columns", "rows"),
            BasisMap::ColumnSumsOnColumns => ("sum columns", "columns"),
            BasisMap::ColumnSumsOnDiagonal => ("sum columns", "diagonal"),
            BasisMap::TotalOnAll => ("sum all", "all"),
            BasisMap::TotalOnDiagonal => ("sum all", "diagonal"),
            BasisMap::TraceOnAll => ("sum diagonal", "all"),
            BasisMap::TraceOnDiagonal => ("sum diagonal", "diagonal"),
            BasisMap::DiagonalOnRows => ("diagonal", "rows"),
            BasisMap::DiagonalOnColumns => ("diagonal", "columns"),
        }
    }

    pub fn name(self) -> String {
        match self.label() {
            (op, "") => op.to_string(),
            (op, on) => format!("{op} on {on}"),
        }
    }
}

/// Closed-form kernels shared with the differentiable record.
pub(crate) mod kernels {
    pub(crate) struct Stats {
        pub rows: Vec<f64>,
        pub cols: Vec<f64>,
        pub diag: Vec<f64>,
        pub total: f64,
        pub trace: f64,
    }

    pub(crate) fn stats(n: usize, a: &[f64]) -> Stats {
        let mut rows = vec![0.0; n];
        let mut cols = vec![0.0; n];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            for (j, &x) in row.iter().enumerate() {
                rows[i] += x;
                cols[j] += x;
            }
            diag[i] = row[i];
        }
        let total = rows.iter().sum();
        let trace = diag.iter().sum();
        Stats {
            rows,
            cols,
            diag,
            total,
            trace,
        }
    }

    /// `out = Σ_k w[k] B_{k+1}(a)`.
    pub(crate) fn apply_combination(n: usize, w: &[f64; 15], a: &[f64], out: &mut [f64]) {
        let s = stats(n, a);
        let offdiag_const = w[9] * s.total + w[11] * s.trace;
        let diag_const = w[10] * s.total + w[12] * s.trace;
        for i in 0..n {
            let row_i = w[3] * s.rows[i] + w[6] * s.cols[i] + w[13] * s.diag[i] + offdiag_const;
            for j in 0..n {
                let mut v = w[0] * a[i * n + j]
                    + w[1] * a[j * n + i]
                    + row_i
                    + w[4] * s.rows[j]
                    + w[7] * s.cols[j]
                    + w[14] * s.diag[j];
                if i == j {
                    v += w[2] * s.diag[i] + w[5] * s.rows[i] + w[8] * s.cols[i] + diag_const;
                }
                out[i * n + j] = v;
            }
        }
    }

    /// `⟨B_{k+1}(a), g⟩` for every `k`.
    pub(crate) fn basis_inner_products(n: usize, a: &[f64], g: &[f64]) -> [f64; 15] {
        let sa = stats(n, a);
        let sg = stats(n, g);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let mut transposed = 0.0;
        for i in 0..n {
            for j in 0..n {
                transposed += a[j * n + i] * g[i * n + j];
            }
        }
        [
            dot(a, g),
            transposed,
            dot(&sa.diag, &sg.diag),
            dot(&sa.rows, &sg.rows),
            dot(&sa.rows, &sg.cols),
            dot(&sa.rows, &sg.diag),
            dot(&sa.cols, &sg.rows),
            dot(&sa.cols, &sg.cols),
            dot(&sa.cols, &sg.diag),
            sa.total * sg.total,
            sa.total * sg.trace,
            sa.trace * sg.total,
            sa.trace * sg.trace,
            dot(&sa.diag, &sg.rows),
            dot(&sa.diag, &sg.cols),
        ]
    }

    /// Zero-based index of the adjoint basis map (the set is closed under
    /// adjoints).
    pub(crate) fn adjoint_index(k: usize) -> usize {
        match k {
            4 => 6,
            6 => 4,
            5 => 13,
            13 => 5,
            8 => 14,
            14 => 8,
            10 => 11,
            11 => 10,
            other => other,
        }
    }
}

fn square(a: &Tensor) -> Result<usize> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::invalid(format!("expected a square matrix, got {n}×{m}")));
    }
    Ok(n)
}

pub fn basis_apply(map: BasisMap, a: &Tensor) -> Result<Tensor> {
    let mut w = [0.0; 15];
    w[map.index() - 1] = 1.0;
    PermEquivWeights(w).apply(a)
}

/// Coefficients of one equivariant linear map over [`BasisMap`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermEquivWeights(pub [f64; 15]);

impl PermEquivWeights {
    pub fn zeros() -> Self {
        Self([0.0; 15])
    }

    /// One-hot on the identity map.
    pub fn identity() -> Self {
        Self::one_hot(BasisMap::Identity)
    }

    pub fn one_hot(map: BasisMap) -> Self {
        let mut w = [0.0; 15];
        w[map.index() - 1] = 1.0;
        Self(w)
    }

    pub fn get(&self, map: BasisMap) -> f64 {
        self.0[map.index() - 1]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![15], self.0.to_vec())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let w: [f64; 15] = t
            .data()
            .try_into()
            .map_err(|_| Error::invalid("equivariant weights need 15 entries"))?;
        Ok(Self(w))
    }

    /// `Σ_k w_k B_k(a)`.
    pub fn apply(&self, a: &Tensor) -> Result<Tensor> {
        let n = square(a)?;
        let mut out = vec![0.0; n * n];
        kernels::apply_combination(n, &self.0, a.data(), &mut out);
        Ok(Tensor::from_parts(vec![n, n], out))
    }
}

pub fn equiv_apply(weights: &PermEquivWeights, a: &Tensor) -> Result<Tensor> {
    weights.apply(a)
}

/// `L1(a) + L2(da)`.
pub fn fuse(l1: &PermEquivWeights, l2: &PermEquivWeights, a: &Tensor, da: &Tensor) -> Result<Tensor> {
    if a.shape() != da.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: a.shape().to_vec(),
            rhs: da.shape().to_vec(),
        });
    }
    l1.apply(a)?.add(&l2.apply(da)?)
}

/// A bijection on `0..n`. As a matrix, `P[i, p[i]] = 1`, so `(P X)[i] =
/// X[p[i]]` and `(P A Pᵀ)[i, j] = A[p[i], p[j]]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(p: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; p.len()];
        for &i in &p {
            if i >= p.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("{p:?} is not a permutation")));
            }
        }
        Ok(Self(p))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        Self(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// Every permutation of `0..n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut p: Vec<usize> = (0..n).collect();
        loop {
            out.push(Self(p.clone()));
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
            p.swap(i - 1, j);
            p[i..].reverse();
        }
    }
}

/// `P A Pᵀ` by index permutation.
pub fn conjugate(p: &Permutation, a: &Tensor) -> Result<Tensor> {
    let n = square(a)?;
    if n != p.len() {
        return Err(Error::ShapeMismatch {
            op: "conjugate",
            lhs: vec![p.len()],
            rhs: a.shape().to_vec(),
        });
    }
    let q = p.as_slice();
    Ok(Tensor::from_fn(n, n, |i, j| a.at(q[i], q[j])))
}

/// `P X` for `X` with `n` rows of any width.
pub fn permute_rows(p: &Permutation, x: &Tensor) -> Result<Tensor> {
    let rows = *x.shape().first().unwrap_or(&0);
    if rows != p.len() {
        return Err(Error::ShapeMismatch {
            op: "permute_rows",
            lhs: vec![p.len()],
            rhs: x.shape().to_vec(),
        });
    }
    let width = x.len() / rows.max(1);
    let mut data = Vec::with_capacity(x.len());
    for &src in p.as_slice() {
        data.extend_from_slice(&x.data()[src * width..(src + 1) * width]);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Dense `n²×n²` matrix of a linear map on `n×n` matrices, acting on
/// row-major `vec(A)`.
pub fn materialize(n: usize, map: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let m = n * n;
    let mut out = Tensor::zeros(&[m, m]);
    for col in 0..m {
        let mut e = Tensor::zeros(&[n, n]);
        e.data_mut()[col] = 1.0;
        let img = map(&e)?;
        for row in 0..m {
            out.set(row, col, img.data()[row]);
        }
    }
    Ok(out)
}

/// Largest `n` accepted by [`project_group_average`].
pub const MAX_GROUP_AVERAGE_N: usize = 5;

/// `(1/n!) Σ_σ ρ(σ)⁻¹ M ρ(σ)` where `ρ(σ)` conjugates matrices by `σ`.
pub fn project_group_average(m: &Tensor, n: usize) -> Result<Tensor> {
    if n > MAX_GROUP_AVERAGE_N {
        return Err(Error::invalid(format!(
            "group averaging enumerates n! permutations; n = {n} exceeds {MAX_GROUP_AVERAGE_N}"
        )));
    }
    let nn = n * n;
    if m.shape() != [nn, nn] {
        return Err(Error::ShapeMismatch {
            op: "project_group_average",
            lhs: m.shape().to_vec(),
            rhs: vec![nn, nn],
        });
    }
    let perms = Permutation::all(n);
    let conjugates = par::map(&perms, |p| {
        // q maps vec index (i, j) to (p[i], p[j])
        let q: Vec<usize> = (0..nn)
            .map(|idx| p.as_slice()[idx / n] * n + p.as_slice()[idx % n])
            .collect();
        let mut out = vec![0.0; nn * nn];
        for a in 0..nn {
            for b in 0..nn {
                out[q[a] * nn + q[b]] = m.data()[a * nn + b];
            }
        }
        out
    });
    let mut acc = vec![0.0; nn * nn];
    for c in &conjugates {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let scale = 1.0 / perms.len() as f64;
    Ok(Tensor::from_parts(
        vec![nn, nn],
        acc.into_iter().map(|x| x * scale).collect(),
    ))
}

/// Stack of the 15 materialized basis maps as columns of an
/// `n⁴ × 15` matrix.
fn basis_design(n: usize) -> Result<DMatrix<f64>> {
    let m = n * n * n * n;
    let mut design = DMatrix::zeros(m, 15);
    for (k, map) in BasisMap::ALL.iter().enumerate() {
        let dense = materialize(n, |a| basis_apply(*map, a))?;
        for (r, &x) in dense.data().iter().enumerate() {
            design[(r, k)] = x;
        }
    }
    Ok(design)
}

/// Numerical rank of the 15 basis maps at size `n`.
pub fn basis_rank(n: usize) -> Result<usize> {
    let design = basis_design(n)?;
    let sv = design.svd(false, false).singular_values;
    let tol = sv.max() * 1e-10;
    Ok(sv.iter().filter(|&&s| s > tol).count())
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub weights: PermEquivWeights,
    /// Frobenius norm of `M − Σ_k w_k B_k`.
    pub residual: f64,
}

/// Least-squares coefficients of a materialized map over the basis.
pub fn lsq_decompose(m: &Tensor, n: usize) -> Result<Decomposition> {
    let nn = n * n;
    if m.shape() != [nn, nn] {
        return Err(Error::ShapeMismatch {
            op: "lsq_decompose",
            lhs: m.shape().to_vec(),
            rhs: vec![nn, nn],
        });
    }
    let rank = basis_rank(n)?;
    if rank < 15 {
        return Err(Error::RankDeficient { n, rank });
    }
    let design = basis_design(n)?;
    let target = DVector::from_column_slice(m.data());
    let svd = design.clone().svd(true, true);
    let coeffs = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let residual = (&design * &coeffs - &target).norm();
    let mut w = [0.0; 15];
    w.copy_from_slice(coeffs.as_slice());
    Ok(Decomposition {
        weights: PermEquivWeights(w),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_matrix(n: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn basis_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(basis_apply(BasisMap::Identity, &a).unwrap(), a);
        assert_eq!(
            basis_apply(BasisMap::TotalOnAll, &Tensor::eye(2)).unwrap(),
            m(&[&[2.0, 2.0], &[2.0, 2.0]])
        );
        assert_eq!(
            basis_apply(BasisMap::RowSumsOnDiagonal, &m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap(),
            Tensor::eye(2)
        );
        // row i holds the i-th row sum; column j holds the j-th column sum
        assert_eq!(
            basis_apply(BasisMap::RowSumsOnRows, &a).unwrap(),
            m(&[&[3.0, 3.0], &[7.0, 7.0]])
        );
        assert_eq!(
            basis_apply(BasisMap::ColumnSumsOnColumns, &a).unwrap(),
            m(&[&[4.0, 6.0], &[4.0, 6.0]])
        );
        assert!(BasisMap::from_index(0).is_err());
        assert!(BasisMap::from_index(16).is_err());
        assert!(basis_apply(BasisMap::Identity, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn closed_forms_match_matrix_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let a = random_matrix(n, &mut rng);
        let ones = Tensor::ones(&[n, 1]);
        let j = Tensor::ones(&[n, n]);
        let at = a.transpose().unwrap();
        let diag_of = |v: &Tensor| Tensor::from_fn(n, n, |i, k| if i == k { v.data()[i] } else { 0.0 });
        let dvec = Tensor::from_fn(n, 1, |i, _| a.at(i, i));
        let r = a.matmul(&ones).unwrap();
        let c = at.matmul(&ones).unwrap();
        let total = a.sum();
        let tr = dvec.sum();
        let expect = [
            a.clone(),
            at.clone(),
            diag_of(&dvec),
            a.matmul(&j).unwrap(),
            ones.matmul(&r.transpose().unwrap()).unwrap(),
            diag_of(&r),
            at.matmul(&j).unwrap(),
            j.matmul(&a).unwrap(),
            diag_of(&c),
            j.scale(total),
            Tensor::eye(n).scale(total),
            j.scale(tr),
            Tensor::eye(n).scale(tr),
            dvec.matmul(&ones.transpose().unwrap()).unwrap(),
            ones.matmul(&dvec.transpose().unwrap()).unwrap(),
        ];
        for (map, e) in BasisMap::ALL.iter().zip(&expect) {
            let got = basis_apply(*map, &a).unwrap();
            assert!(got.max_abs_diff(e) < 1e-12, "{map:?}");
        }
    }

    #[test]
    fn adjoints_are_transposed_materializations() {
        let n = 3;
        for (k, map) in BasisMap::ALL.iter().enumerate() {
            let fwd = materialize(n, |a| basis_apply(*map, a)).unwrap();
            let adj = materialize(n, |a| basis_apply(BasisMap::ALL[kernels::adjoint_index(k)], a)).unwrap();
            assert_eq!(fwd.transpose().unwrap(), adj, "{map:?}");
        }
    }

    #[test]
    fn exhaustive_equivariance_small_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=4 {
            let a = Tensor::from_fn(n, n, |_, _| rng.random_range(-9i32..10) as f64);
            for p in Permutation::all(n) {
                for map in BasisMap::ALL {
                    let lhs = basis_apply(map, &conjugate(&p, &a).unwrap()).unwrap();
                    let rhs = conjugate(&p, &basis_apply(map, &a).unwrap()).unwrap();
                    assert_eq!(lhs, rhs, "n={n} {map:?} {p:?}");
                }
            }
        }
    }

    #[test]
    fn weighted_combination_matches_dense_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let mut w = [0.0; 15];
        w.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let weights = PermEquivWeights(w);
        let a = random_matrix(n, &mut rng);
        let mut dense = Tensor::zeros(&[16, 16]);
        for (k, map) in BasisMap::ALL.iter().enumerate() {
            dense.axpy(w[k], &materialize(n, |x| basis_apply(*map, x)).unwrap()).unwrap();
        }
        let via_dense = dense.matmul(&a.reshape(&[16, 1]).unwrap()).unwrap();
        let direct = weights.apply(&a).unwrap();
        assert!(direct.reshape(&[16, 1]).unwrap().max_abs_diff(&via_dense) < 1e-12);
        assert_eq!(PermEquivWeights::identity().apply(&a).unwrap(), a);
        assert_eq!(PermEquivWeights::zeros().apply(&a).unwrap(), Tensor::zeros(&[n, n]));
    }

    #[test]
    fn fuse_reduces_to_baseline_fusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(5, &mut rng);
        let da = random_matrix(5, &mut rng);
        let id = PermEquivWeights::identity();
        assert!(fuse(&id, &id, &a, &da).unwrap().max_abs_diff(&a.add(&da).unwrap()) < 1e-15);
        assert_eq!(fuse(&id, &PermEquivWeights::zeros(), &a, &da).unwrap(), a);
    }

    #[test]
    fn conjugation_examples() {
        let a = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let swap = Permutation::new(vec![1, 0]).unwrap();
        assert_eq!(conjugate(&swap, &a).unwrap(), m(&[&[0.0, 0.0], &[1.0, 0.0]]));
        assert_eq!(conjugate(&Permutation::identity(2), &a).unwrap(), a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(6, &mut rng);
        let p = Permutation::random(6, &mut rng);
        let back = conjugate(&p.inverse(), &conjugate(&p, &b).unwrap()).unwrap();
        assert_eq!(back, b);
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(conjugate(&swap, &b).is_err());
        assert_eq!(Permutation::all(4).len(), 24);
    }

    #[test]
    fn rank_is_fifteen_only_from_four_nodes() {
        assert_eq!(basis_rank(4).unwrap(), 15);
        assert_eq!(basis_rank(5).unwrap(), 15);
        assert!(basis_rank(3).unwrap() < 15);
        assert!(matches!(
            lsq_decompose(&Tensor::zeros(&[9, 9]), 3),
            Err(Error::RankDeficient { n: 3, .. })
        ));
    }

    #[test]
    fn decomposing_a_basis_map_recovers_it() {
        let dense = materialize(4, |a| basis_apply(BasisMap::ColumnSumsOnRows, a)).unwrap();
        let d = lsq_decompose(&dense, 4).unwrap();
        assert!(d.residual < 1e-12);
        for (k, w) in d.weights.0.iter().enumerate() {
            let expect = if k == 6 { 1.0 } else { 0.0 };
            assert!((w - expect).abs() < 1e-10, "k={k} w={w}");
        }
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 3;
        let equiv = materialize(n, |a| basis_apply(BasisMap::DiagonalOnRows, a)).unwrap();
        assert!(project_group_average(&equiv, n).unwrap().max_abs_diff(&equiv) < 1e-12);
        let raw = Tensor::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        let once = project_group_average(&raw, n).unwrap();
        let twice = project_group_average(&once, n).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-12);
        assert!(project_group_average(&Tensor::zeros(&[36, 36]), 6).is_err());
    }
}
