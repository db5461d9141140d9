//! One-dimensional linear resampling operators.
//!
//! Every spatial resampling in the network (bilinear and bicubic resizing,
//! block averaging, global pooling, broadcast, pyramid blur/decimation) is a
//! separable linear map, so a single graph op with an exact adjoint covers
//! all of them.

use crate::border::{clamp, reflect};
use crate::error::{LfpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    input: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

impl LinearMap {
    pub fn from_rows(input: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(i, _)| i < input));
        Self { input, rows }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    /// Half-pixel-centred bilinear resize. Downscaling widens the triangle
    /// filter by the scale factor so every input sample contributes.
    pub fn bilinear(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        if output >= input {
            let rows = (0..output)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(input - 1);
                    let i1 = (i0 + 1).min(input - 1);
                    let t = src - i0 as f64;
                    merge(vec![(i0, 1.0 - t), (i1, t)])
                })
                .collect();
            return Self::from_rows(input, rows);
        }
        let rows = (0..output)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale;
                let lo = (center - scale).floor().max(0.0) as usize;
                let hi = ((center + scale).ceil() as usize).min(input);
                let mut taps: Vec<(usize, f64)> = (lo..hi)
                    .map(|j| (j, (1.0 - ((j as f64 + 0.5 - center) / scale).abs()).max(0.0)))
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        Self::from_rows(input, rows)
    }

    pub fn nearest(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let rows = (0..output)
            .map(|i| vec![((((i as f64 + 0.5) * scale).floor() as usize).min(input - 1), 1.0)])
            .collect();
        Self::from_rows(input, rows)
    }

    /// Cubic-convolution resize (`a = -0.75`, half-pixel centres, clamped
    /// borders).
    pub fn bicubic(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let rows = (0..output)
            .map(|i| {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                let taps = (-1..=2)
                    .map(|k| {
                        let w = cubic(t - k as f64);
                        (clamp(base as isize + k, input), w)
                    })
                    .collect();
                merge(taps)
            })
            .collect();
        Self::from_rows(input, rows)
    }

    /// Block boundaries `round(k·n/grid)` for `k = 0..=grid`.
    pub fn block_bounds(input: usize, grid: usize) -> Vec<usize> {
        (0..=grid)
            .map(|k| (k as f64 * input as f64 / grid as f64).round() as usize)
            .collect()
    }

    /// Mean over each of `grid` contiguous blocks.
    pub fn block_mean(input: usize, grid: usize) -> Result<Self> {
        if grid == 0 || grid > input {
            return Err(LfpError::Parameter(format!(
                "pooling grid {grid} must lie in 1..={input}"
            )));
        }
        let b = Self::block_bounds(input, grid);
        let rows = b
            .windows(2)
            .map(|w| {
                let n = (w[1] - w[0]) as f64;
                (w[0]..w[1]).map(|j| (j, 1.0 / n)).collect()
            })
            .collect();
        Ok(Self::from_rows(input, rows))
    }

    /// Copies a single value to `output` positions.
    pub fn broadcast(output: usize) -> Self {
        Self::from_rows(1, vec![vec![(0, 1.0)]; output])
    }

    /// Binomial low-pass followed by decimation by two (reflect border).
    pub fn pyramid_down(input: usize) -> Self {
        let output = input.div_ceil(2);
        let rows = (0..output)
            .map(|i| {
                let c = 2 * i as isize;
                merge(
                    BINOMIAL5
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| (reflect(c + k as isize - 2, input), w))
                        .collect(),
                )
            })
            .collect();
        Self::from_rows(input, rows)
    }

    /// Zero insertion to `output` samples followed by a gain-two binomial
    /// blur; the adjoint-shaped partner of [`LinearMap::pyramid_down`].
    pub fn pyramid_up(input: usize, output: usize) -> Self {
        debug_assert_eq!(output.div_ceil(2), input);
        if output == 1 {
            return Self::identity(1);
        }
        let rows = (0..output)
            .map(|i| {
                let mut taps = Vec::new();
                for (k, &w) in BINOMIAL5.iter().enumerate() {
                    let j = reflect(i as isize + k as isize - 2, output);
                    if j.is_multiple_of(2) {
                        taps.push((j / 2, 2.0 * w));
                    }
                }
                merge(taps)
            })
            .collect();
        Self::from_rows(input, rows)
    }

    /// `self ∘ inner`
    pub fn compose(&self, inner: &LinearMap) -> Self {
        assert_eq!(self.input, inner.output());
        let rows = self
            .rows
            .iter()
            .map(|taps| {
                let mut acc = Vec::new();
                for &(j, w) in taps {
                    for &(k, v) in &inner.rows[j] {
                        acc.push((k, w * v));
                    }
                }
                merge(acc)
            })
            .collect();
        Self::from_rows(inner.input, rows)
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, taps) in dst.iter_mut().zip(&self.rows) {
            *d = taps.iter().map(|&(j, w)| w * src[j]).sum();
        }
    }

    /// Accumulates `Aᵀ·src` into `dst`.
    pub fn apply_adjoint(&self, src: &[f64], dst: &mut [f64]) {
        for (s, taps) in src.iter().zip(&self.rows) {
            for &(j, w) in taps {
                dst[j] += w * s;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|taps| {
                let mut row = vec![0.0; self.input];
                for &(j, w) in taps {
                    row[j] += w;
                }
                row
            })
            .collect()
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Sums duplicate indices and drops exact zeros, keeping index order.
fn merge(mut taps: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    taps.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(taps.len());
    for (j, w) in taps {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += w,
            _ => out.push((j, w)),
        }
    }
    out.retain(|t| t.1 != 0.0);
    out
}
