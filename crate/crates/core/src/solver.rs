//! Explicit Runge–Kutta solvers over tensors or recorded variables.
//!
//! Solvers are generic over [`OdeState`], so the same code integrates plain
//! tensors and tape variables. With variables every stage is recorded and
//! gradients flow through the unrolled steps; step-size control only ever
//! looks at detached values.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{lin_comb, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// State that supports the linear combinations Runge–Kutta needs.
pub trait OdeState: Clone {
    /// `base + Σ c_i x_i`.
    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self>;
    fn values(&self) -> Rc<Tensor>;
}

impl OdeState for Tensor {
    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = base.clone();
        for (c, x) in terms {
            if *c != 0.0 {
                out.axpy(*c, x)?;
            }
        }
        Ok(out)
    }

    fn values(&self) -> Rc<Tensor> {
        Rc::new(self.clone())
    }
}

impl<'t> OdeState for Var<'t> {
    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut all = Vec::with_capacity(terms.len() + 1);
        all.push((1.0, *base));
        all.extend(terms.iter().filter(|(c, _)| *c != 0.0).map(|(c, x)| (*c, **x)));
        if all.len() == 1 {
            return Ok(*base);
        }
        lin_comb(&all)
    }

    fn values(&self) -> Rc<Tensor> {
        self.value()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub field_evals: usize,
}

/// States at the requested save times.
#[derive(Clone, Debug)]
pub struct LatentPath<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub stats: SolverStats,
}

fn check_save_times(t0: f64, t1: f64, save_times: &[f64]) -> Result<()> {
    if !(t1 > t0) {
        return Err(Error::invalid(format!("empty integration interval [{t0}, {t1}]")));
    }
    if save_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("save times must be sorted"));
    }
    if let (Some(&lo), Some(&hi)) = (save_times.first(), save_times.last()) {
        if lo < t0 || hi > t1 {
            return Err(Error::OutOfDomain { t: if lo < t0 { lo } else { hi }, lo: t0, hi: t1 });
        }
    }
    Ok(())
}

/// Classical RK4 on `num_steps` uniform steps. Every save time must sit on a
/// step endpoint.
pub fn rk4_solve<S, F>(field: F, z0: S, t0: f64, t1: f64, num_steps: usize, save_times: &[f64]) -> Result<LatentPath<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    if num_steps == 0 {
        return Err(Error::invalid("RK4 needs at least one step"));
    }
    check_save_times(t0, t1, save_times)?;
    let span = t1 - t0;
    let grid: Vec<f64> = (0..=num_steps)
        .map(|j| if j == num_steps { t1 } else { t0 + span * j as f64 / num_steps as f64 })
        .collect();
    rk4_solve_grid(field, z0, &grid, save_times)
}

/// Classical RK4 over an arbitrary increasing grid.
pub fn rk4_solve_grid<S, F>(mut field: F, z0: S, grid: &[f64], save_times: &[f64]) -> Result<LatentPath<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("RK4 grid must be strictly increasing with at least one step"));
    }
    let (t0, t1) = (grid[0], grid[grid.len() - 1]);
    check_save_times(t0, t1, save_times)?;
    let tol = 1e-9 * (t1 - t0);
    let mut slots = Vec::with_capacity(save_times.len());
    for &s in save_times {
        let j = grid.partition_point(|&g| g < s - tol);
        if j >= grid.len() || (grid[j] - s).abs() > tol {
            return Err(Error::invalid(format!("save time {s} is not on the RK4 grid")));
        }
        slots.push(j);
    }
    let mut stats = SolverStats::default();
    let mut states = Vec::with_capacity(save_times.len());
    let mut next = 0;
    let mut z = z0;
    while next < slots.len() && slots[next] == 0 {
        states.push(z.clone());
        next += 1;
    }
    for j in 0..grid.len() - 1 {
        let (t, h) = (grid[j], grid[j + 1] - grid[j]);
        let k1 = field(t, &z)?;
        let k2 = field(t + 0.5 * h, &S::combine(&z, &[(0.5 * h, &k1)])?)?;
        let k3 = field(t + 0.5 * h, &S::combine(&z, &[(0.5 * h, &k2)])?)?;
        let k4 = field(t + h, &S::combine(&z, &[(h, &k3)])?)?;
        z = S::combine(&z, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)])?;
        stats.accepted += 1;
        stats.field_evals += 4;
        while next < slots.len() && slots[next] == j + 1 {
            states.push(z.clone());
            next += 1;
        }
    }
    Ok(LatentPath {
        times: save_times.to_vec(),
        states,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; `None` means a hundredth of the interval.
    pub dt0: Option<f64>,
    pub max_steps: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-6,
            dt0: None,
            max_steps: 100_000,
        }
    }
}

const C: [f64; 6] = [0.0, 0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0];
const A: [&[f64]; 6] = [
    &[],
    &[0.161],
    &[-0.008_480_655_492_356_989, 0.335_480_655_492_357],
    &[2.897_153_057_105_493, -6.359_448_489_975_075, 4.362_295_432_869_581],
    &[5.325_864_828_439_257, -11.748_883_564_062_828, 7.495_539_342_889_836, -0.092_495_066_361_755_25],
    &[
        5.861_455_442_946_42,
        -12.920_969_317_847_11,
        8.159_367_898_576_159,
        -0.071_584_973_281_401,
        -0.028_269_050_394_068_383,
    ],
];
const B: [f64; 6] = [
    0.096_460_766_818_065_23,
    0.01,
    0.479_889_650_414_499_6,
    1.379_008_574_103_742,
    -3.290_069_515_436_081,
    2.324_710_524_099_774,
];
const B_HAT: [f64; 7] = [
    0.094_680_755_765_839_46,
    0.009_183_565_540_343_254,
    0.487_770_528_424_761_6,
    1.234_297_566_930_479,
    -2.707_712_349_983_525_5,
    1.866_628_418_170_587,
    1.0 / 66.0,
];

/// Continuous extension weights at fraction `th` of a step.
fn dense_weights(th: f64) -> [f64; 7] {
    let t2 = th * th;
    [
        -1.053_088_497_729_021_6 * th * (th - 1.329_989_018_975_141_2) * (t2 - 1.436_402_854_171_635_1 * th + 0.713_981_691_707_420_9),
        0.1017 * t2 * (t2 - 2.196_656_833_824_975_4 * th + 1.294_985_250_737_463_1),
        2.490_627_285_651_252_8 * t2 * (t2 - 2.385_356_454_720_616_5 * th + 1.578_034_682_080_924_8),
        -16.548_102_889_244_902 * (th - 1.217_129_272_955_332_4) * (th - 0.616_204_060_378_000_9) * t2,
        47.379_521_962_819_28 * (th - 1.203_071_208_372_362_6) * (th - 0.658_047_292_653_547_4) * t2,
        -34.870_657_861_496_61 * (th - 1.2) * (th - 2.0 / 3.0) * t2,
        2.5 * (th - 1.0) * (th - 0.6) * t2,
    ]
}

/// Tsitouras 5(4) with a PI step controller and dense output at the save
/// times.
pub fn tsit5_solve<S, F>(mut field: F, z0: S, t0: f64, t1: f64, save_times: &[f64], cfg: &AdaptiveConfig) -> Result<LatentPath<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    check_save_times(t0, t1, save_times)?;
    if !(cfg.rtol >= 0.0 && cfg.atol >= 0.0 && cfg.rtol + cfg.atol > 0.0) {
        return Err(Error::invalid("tolerances must be non-negative and not both zero"));
    }
    let span = t1 - t0;
    let min_dt = 1e-12 * span;
    let mut dt = cfg.dt0.unwrap_or(span / 100.0).min(span);
    if !(dt > 0.0) {
        return Err(Error::invalid("initial step must be positive"));
    }
    let mut stats = SolverStats::default();
    let mut states = Vec::with_capacity(save_times.len());
    let mut next = 0;
    let mut t = t0;
    let mut z = z0;
    while next < save_times.len() && save_times[next] <= t0 {
        states.push(z.clone());
        next += 1;
    }
    let mut f0 = field(t, &z)?;
    stats.field_evals += 1;
    let mut err_prev: f64 = 1.0;
    let mut rejected_last = false;

    while t < t1 {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::StepUnderflow { t, dt });
        }
        let last = t + dt >= t1 - min_dt;
        let h = if last { t1 - t } else { dt };
        let mut k: Vec<S> = Vec::with_capacity(7);
        k.push(f0.clone());
        for s in 1..6 {
            let terms: Vec<(f64, &S)> = A[s].iter().zip(&k).map(|(&a, ks)| (h * a, ks)).collect();
            let zs = S::combine(&z, &terms)?;
            k.push(field(t + C[s] * h, &zs)?);
        }
        let terms: Vec<(f64, &S)> = B.iter().zip(&k).map(|(&b, ks)| (h * b, ks)).collect();
        let z_new = S::combine(&z, &terms)?;
        let f_new = field(t + h, &z_new)?;
        stats.field_evals += 6;
        k.push(f_new);

        let (zv, zn) = (z.values(), z_new.values());
        let kv: Vec<Rc<Tensor>> = k.iter().map(|x| x.values()).collect();
        let mut acc = 0.0;
        for i in 0..zv.len() {
            let e: f64 = (0..7).map(|s| (B_EXT[s] - B_HAT[s]) * kv[s].data()[i]).sum::<f64>() * h;
            let scale = cfg.atol + cfg.rtol * zv.data()[i].abs().max(zn.data()[i].abs());
            acc += (e / scale).powi(2);
        }
        let err = (acc / zv.len().max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::NonFinite("tsit5 error estimate"));
        }

        if err <= 1.0 {
            stats.accepted += 1;
            let t_new = if last { t1 } else { t + h };
            while next < save_times.len() && save_times[next] <= t_new {
                let s = save_times[next];
                if s >= t_new {
                    states.push(z_new.clone());
                } else {
                    let w = dense_weights((s - t) / h);
                    let terms: Vec<(f64, &S)> = w.iter().zip(&k).map(|(&b, ks)| (h * b, ks)).collect();
                    states.push(S::combine(&z, &terms)?);
                }
                next += 1;
            }
            t = t_new;
            z = z_new;
            f0 = k.pop().expect("seven stages");
            let fac = if err == 0.0 {
                10.0
            } else {
                let fac = 0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
                if rejected_last {
                    fac.clamp(0.2, 1.0)
                } else {
                    fac.clamp(0.2, 10.0)
                }
            };
            err_prev = err.max(1e-4);
            rejected_last = false;
            dt = h * fac;
        } else {
            stats.rejected += 1;
            rejected_last = true;
            dt = h * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
        if t < t1 && dt < min_dt {
            return Err(Error::StepUnderflow { t, dt });
        }
    }
    Ok(LatentPath {
        times: save_times.to_vec(),
        states,
        stats,
    })
}

const B_EXT: [f64; 7] = [B[0], B[1], B[2], B[3], B[4], B[5], 0.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};

    fn decay(_: f64, z: &Tensor) -> Result<Tensor> {
        Ok(z.scale(-1.0))
    }

    #[test]
    fn tableau_is_consistent() {
        for s in 1..6 {
            let row: f64 = A[s].iter().sum();
            assert!((row - C[s]).abs() < 1e-14, "row {s}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((B_HAT.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let w = dense_weights(1.0);
        for s in 0..7 {
            assert!((w[s] - B_EXT[s]).abs() < 1e-12, "dense weight {s}");
        }
        assert!(dense_weights(0.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tsit5_exponential_decay() {
        let cfg = AdaptiveConfig {
            rtol: 1e-8,
            atol: 1e-8,
            ..Default::default()
        };
        let saves = [0.0, 0.25, 0.5, 1.0];
        let path = tsit5_solve(decay, Tensor::scalar(1.0), 0.0, 1.0, &saves, &cfg).unwrap();
        for (t, z) in saves.iter().zip(&path.states) {
            let exact = (-t).exp();
            assert!((z.item() - exact).abs() / exact < 1e-8, "t={t}");
        }
    }

    #[test]
    fn tsit5_zero_field_takes_one_step() {
        let cfg = AdaptiveConfig {
            dt0: Some(1.0),
            ..Default::default()
        };
        let z0 = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
        let path = tsit5_solve(|_, z: &Tensor| Ok(z.scale(0.0)), z0.clone(), 0.0, 1.0, &[0.3, 1.0], &cfg).unwrap();
        assert_eq!(path.stats.accepted, 1);
        assert_eq!(path.stats.rejected, 0);
        assert!(path.states.iter().all(|z| *z == z0));
    }

    #[test]
    fn tighter_tolerance_never_hurts() {
        let saves: Vec<f64> = (0..=10).map(|i| i as f64 * 0.3).collect();
        let mut prev = f64::INFINITY;
        for p in 3..=10 {
            let tol = 10f64.powi(-p);
            let cfg = AdaptiveConfig {
                rtol: tol,
                atol: tol,
                ..Default::default()
            };
            let path = tsit5_solve(decay, Tensor::scalar(1.0), 0.0, 3.0, &saves, &cfg).unwrap();
            let err = saves
                .iter()
                .zip(&path.states)
                .map(|(t, z)| (z.item() - (-t).exp()).abs())
                .fold(0.0, f64::max);
            assert!(err <= prev * 1.0001, "tol {tol}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let err = |n| {
            let p = rk4_solve(decay, Tensor::scalar(1.0), 0.0, 1.0, n, &[1.0]).unwrap();
            (p.states[0].item() - (-1f64).exp()).abs()
        };
        let (e1, e2, e3) = (err(8), err(16), err(32));
        let slope = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;
        assert!((3.8..=4.2).contains(&slope), "{slope}");
    }

    #[test]
    fn rk4_zero_field_and_save_times() {
        let z0 = Tensor::from_rows(&[[0.5, 1.5]]).unwrap();
        let p = rk4_solve(|_, z: &Tensor| Ok(z.scale(0.0)), z0.clone(), 0.0, 1.0, 4, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(p.states, vec![z0.clone(), z0.clone(), z0.clone()]);
        assert!(rk4_solve(decay, z0.clone(), 0.0, 1.0, 4, &[0.3]).is_err());
        assert!(rk4_solve(decay, z0, 0.0, 1.0, 0, &[]).is_err());
    }

    #[test]
    fn underflow_is_reported() {
        let cfg = AdaptiveConfig {
            rtol: 1e-12,
            atol: 1e-12,
            ..Default::default()
        };
        // finite-time blow-up at t = 1
        let res = tsit5_solve(|_, z: &Tensor| Ok(z.mul(z).unwrap()), Tensor::scalar(1.0), 0.0, 2.0, &[2.0], &cfg);
        assert!(matches!(res, Err(Error::StepUnderflow { .. }) | Err(Error::NonFinite(_))));
    }

    #[test]
    fn unrolled_rk4_gradient() {
        let a = Tensor::from_rows(&[[-0.5, 0.3], [0.2, -0.4]]).unwrap();
        let z0 = Tensor::from_rows(&[[1.0, 0.5]]).unwrap();
        let err = gradcheck(
            |_tape: &Tape, p| {
                let path = rk4_solve(|_, z: &Var| z.matmul(p[0]), p[1], 0.0, 1.0, 5, &[1.0])?;
                path.states[0].mul(path.states[0])?.sum()
            },
            &[a, z0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn tsit5_gradient_through_accepted_steps() {
        use crate::autodiff::Activation;
        let a = Tensor::from_rows(&[[-1.5, 2.3], [1.2, -0.4]]).unwrap();
        let z0 = Tensor::from_rows(&[[1.0, 0.5], [-0.3, 0.8]]).unwrap();
        let cfg = AdaptiveConfig::default();
        let err = gradcheck(
            |_tape: &Tape, p| {
                let path = tsit5_solve(|_, z: &Var| z.matmul(p[0])?.activate(Activation::Tanh), p[1], 0.0, 3.0, &[0.3, 1.7, 3.0], &cfg)?;
                let mut loss = path.states[0].sum()?;
                for s in &path.states[1..] {
                    loss = loss.add(s.mul(*s)?.sum()?)?;
                }
                Ok(loss)
            },
            &[a, z0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tsit5_on_variables_matches_tensors() {
        let tape = Tape::new();
        let z0 = Tensor::from_rows(&[[1.0, -0.5]]).unwrap();
        let cfg = AdaptiveConfig::default();
        let plain = tsit5_solve(decay, z0.clone(), 0.0, 2.0, &[0.7, 2.0], &cfg).unwrap();
        let v = tape.param(z0);
        let rec = tsit5_solve(|_, z: &Var| z.scale(-1.0), v, 0.0, 2.0, &[0.7, 2.0], &cfg).unwrap();
        for (a, b) in plain.states.iter().zip(&rec.states) {
            assert!(a.max_abs_diff(&b.value()) < 1e-14);
        }
        assert_eq!(plain.stats, rec.stats);
    }
}
