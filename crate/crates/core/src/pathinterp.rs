//! Natural cubic spline control paths.
//!
//! Every scalar channel of a time-indexed tensor gets its own natural cubic
//! spline (zero second derivative at both ends). All channels share the
//! knots, so the tridiagonal system for the knot curvatures is factored once
//! and solved for every channel together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CubicPath {
    knots: Vec<f64>,
    channel_shape: Vec<usize>,
    channels: usize,
    // Power-basis coefficients around the left knot of each interval,
    // laid out [interval][channel].
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl CubicPath {
    pub fn fit(times: &[f64], samples: &[Tensor]) -> Result<Self> {
        if samples.len() < 2 || times.len() != samples.len() {
            return Err(Error::invalid(format!(
                "need at least 2 samples with matching times (got {} samples, {} times)",
                samples.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("knot times must be finite and strictly increasing"));
        }
        let shape = samples[0].shape().to_vec();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::invalid("samples have differing shapes"));
        }
        let channels = samples[0].len();
        let k = times.len();
        let intervals = k - 1;
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();

        // Curvatures M_0 = M_{k-1} = 0; interior rows solve
        // h_{i-1} M_{i-1} + 2(h_{i-1}+h_i) M_i + h_i M_{i+1} = 6 (s_i - s_{i-1}).
        let mut m = vec![0.0; k * channels];
        if k > 2 {
            let inner = k - 2;
            let mut diag: Vec<f64> = (0..inner).map(|i| 2.0 * (h[i] + h[i + 1])).collect();
            let mut rhs: Vec<f64> = Vec::with_capacity(inner * channels);
            for i in 1..k - 1 {
                let (y0, y1, y2) = (samples[i - 1].data(), samples[i].data(), samples[i + 1].data());
                for ch in 0..channels {
                    let s1 = (y1[ch] - y0[ch]) / h[i - 1];
                    let s2 = (y2[ch] - y1[ch]) / h[i];
                    rhs.push(6.0 * (s2 - s1));
                }
            }
            // Thomas elimination; sub- and super-diagonal of row r are h[r] and h[r+1].
            for r in 1..inner {
                let w = h[r] / diag[r - 1];
                diag[r] -= w * h[r];
                let (prev, cur) = rhs.split_at_mut(r * channels);
                let prev = &prev[(r - 1) * channels..];
                for ch in 0..channels {
                    cur[ch] -= w * prev[ch];
                }
            }
            for r in (0..inner).rev() {
                for ch in 0..channels {
                    let next = if r + 1 < inner {
                        m[(r + 2) * channels + ch]
                    } else {
                        0.0
                    };
                    m[(r + 1) * channels + ch] = (rhs[r * channels + ch] - h[r + 1] * next) / diag[r];
                }
            }
        }

        let mut a = Vec::with_capacity(intervals * channels);
        let mut b = Vec::with_capacity(intervals * channels);
        let mut c = Vec::with_capacity(intervals * channels);
        let mut d = Vec::with_capacity(intervals * channels);
        for (i, &hi) in h.iter().enumerate() {
            let (y0, y1) = (samples[i].data(), samples[i + 1].data());
            for ch in 0..channels {
                let (m0, m1) = (m[i * channels + ch], m[(i + 1) * channels + ch]);
                a.push(y0[ch]);
                b.push((y1[ch] - y0[ch]) / hi - hi * (2.0 * m0 + m1) / 6.0);
                c.push(m0 / 2.0);
                d.push((m1 - m0) / (6.0 * hi));
            }
        }
        Ok(Self {
            knots: times.to_vec(),
            channel_shape: shape,
            channels,
            a,
            b,
            c,
            d,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn channel_shape(&self) -> &[usize] {
        &self.channel_shape
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Interval index and offset from its left knot.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&t) {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        let i = self.knots.partition_point(|&k| k <= t).saturating_sub(1);
        let i = i.min(self.knots.len() - 2);
        Ok((i, t - self.knots[i]))
    }

    fn combine(&self, t: f64, f: impl Fn(f64, f64, f64, f64, f64) -> f64) -> Result<Tensor> {
        let (i, dt) = self.locate(t)?;
        let span = i * self.channels..(i + 1) * self.channels;
        let data = self.a[span.clone()]
            .iter()
            .zip(&self.b[span.clone()])
            .zip(self.c[span.clone()].iter().zip(&self.d[span]))
            .map(|((&a, &b), (&c, &d))| f(a, b, c, d, dt))
            .collect();
        Ok(Tensor::from_parts(self.channel_shape.clone(), data))
    }

    pub fn eval(&self, t: f64) -> Result<Tensor> {
        self.combine(t, |a, b, c, d, x| a + x * (b + x * (c + x * d)))
    }

    pub fn deriv(&self, t: f64) -> Result<Tensor> {
        self.combine(t, |_, b, c, d, x| b + x * (2.0 * c + 3.0 * x * d))
    }

    pub fn second_deriv(&self, t: f64) -> Result<Tensor> {
        self.combine(t, |_, _, c, d, x| 2.0 * c + 6.0 * x * d)
    }

    /// Second derivative at the right end of interval `i`, evaluated with
    /// that interval's cubic.
    pub fn second_deriv_left_of(&self, knot: usize) -> Result<Tensor> {
        if knot == 0 || knot >= self.knots.len() {
            return Err(Error::invalid("no interval to the left of this knot"));
        }
        let i = knot - 1;
        let x = self.knots[knot] - self.knots[i];
        let span = i * self.channels..(i + 1) * self.channels;
        let data = self.c[span.clone()]
            .iter()
            .zip(&self.d[span])
            .map(|(&c, &d)| 2.0 * c + 6.0 * x * d)
            .collect();
        Ok(Tensor::from_parts(self.channel_shape.clone(), data))
    }
}

/// Where the time channel goes when augmenting a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeChannel {
    /// Shape `S` becomes `S×2` with channel 0 the time.
    NewAxis,
    /// Trailing extent `d` becomes `d+1` with slot 0 the time.
    Prepend,
}

/// Pairs every sample with its timestamp broadcast over the spatial shape.
pub fn augment_time(samples: &[Tensor], times: &[f64], mode: TimeChannel) -> Result<Vec<Tensor>> {
    if samples.len() != times.len() {
        return Err(Error::invalid("samples and times differ in length"));
    }
    samples
        .iter()
        .zip(times)
        .map(|(s, &t)| match mode {
            TimeChannel::NewAxis => {
                let mut shape = s.shape().to_vec();
                shape.push(2);
                let data = s.data().iter().flat_map(|&x| [t, x]).collect();
                Ok(Tensor::from_parts(shape, data))
            }
            TimeChannel::Prepend => {
                let mut shape = s.shape().to_vec();
                let last = shape
                    .last_mut()
                    .ok_or_else(|| Error::invalid("cannot prepend a channel to a scalar"))?;
                let width = *last;
                *last += 1;
                let mut data = Vec::with_capacity(s.len() + s.len() / width.max(1));
                for row in s.data().chunks(width.max(1)) {
                    data.push(t);
                    data.extend_from_slice(row);
                }
                Ok(Tensor::from_parts(shape, data))
            }
        })
        .collect()
}
