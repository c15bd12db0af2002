//! Fused neighborhood max for single-layer edge MLPs.
//!
//! Computes `out[i] = max_j leaky(bn(y[i] - y[nbr[i][j]]))` without storing
//! the `(N k) x C` edge tensor. Batch statistics are taken over all edges,
//! so the result equals the unfused chain `edge_diff -> batchnorm ->
//! leaky_relu -> max`. The backward pass streams over the edges again for
//! the dense part of the batchnorm gradient.

use super::params::BnStats;
use super::tape::BN_EPS;

pub(super) struct EdgeMaxCache {
    pub sel: Vec<u32>,
    /// Whether the activation at the selected edge took its positive branch.
    pub pos: Vec<u32>,
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(super) struct EdgeInput<'a> {
    pub y: &'a [f64],
    pub c: usize,
    pub nbr: &'a [usize],
    pub k: usize,
    pub slope: f64,
}

impl EdgeInput<'_> {
    /// Calls `f(i, edge, diff_row)` for every edge in row-major order.
    fn for_each_edge(&self, buf: &mut [f64], mut f: impl FnMut(usize, usize, &[f64])) {
        let c = self.c;
        for (e, &j) in self.nbr.iter().enumerate() {
            let i = e / self.k;
            let (yi, yj) = (&self.y[i * c..(i + 1) * c], &self.y[j * c..(j + 1) * c]);
            for ((d, a), b) in buf.iter_mut().zip(yi).zip(yj) {
                *d = a - b;
            }
            f(i, e, buf);
        }
    }

    fn leaky(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.slope * z
        }
    }

    /// With `fixed = Some((sel, pos))` the selected edges and activation
    /// branches are taken as given instead of compared.
    pub fn forward(
        &self,
        gamma: &[f64],
        beta: &[f64],
        stats: &mut BnStats,
        train: bool,
        momentum: f64,
        fixed: Option<(&[u32], &[u32])>,
    ) -> (Vec<f64>, EdgeMaxCache) {
        let (c, k) = (self.c, self.k);
        let n = self.nbr.len() / k;
        let mut buf = vec![0.0; c];
        let (mean, inv_std) = if train {
            let r = self.nbr.len() as f64;
            let mut mean = vec![0.0; c];
            self.for_each_edge(&mut buf, |_, _, d| mean.iter_mut().zip(d).for_each(|(m, v)| *m += v));
            mean.iter_mut().for_each(|m| *m /= r);
            let mut var = vec![0.0; c];
            self.for_each_edge(&mut buf, |_, _, d| {
                for ((s, v), m) in var.iter_mut().zip(d).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            });
            var.iter_mut().for_each(|s| *s /= r);
            let unbias = r / (r - 1.0);
            for j in 0..c {
                stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
                stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j] * unbias;
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, inv)
        } else {
            let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (stats.mean.clone(), inv)
        };
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut sel = vec![0u32; n * c];
        let mut xhat = vec![0.0; n * c];
        if let Some((fsel, _)) = fixed {
            sel.copy_from_slice(fsel);
        }
        self.for_each_edge(&mut buf, |i, e, d| {
            let slot = (e - i * k) as u32;
            let (o, s, h) = (
                &mut out[i * c..(i + 1) * c],
                &mut sel[i * c..(i + 1) * c],
                &mut xhat[i * c..(i + 1) * c],
            );
            for ch in 0..c {
                let xh = (d[ch] - mean[ch]) * inv_std[ch];
                if fixed.is_some() {
                    if s[ch] == slot {
                        h[ch] = xh;
                    }
                    continue;
                }
                let v = self.leaky(gamma[ch] * xh + beta[ch]);
                if v > o[ch] || slot == 0 {
                    o[ch] = v;
                    s[ch] = slot;
                    h[ch] = xh;
                }
            }
        });
        let pos: Vec<u32> = match fixed {
            Some((_, fpos)) => fpos.to_vec(),
            None => (0..n * c).map(|t| u32::from(gamma[t % c] * xhat[t] + beta[t % c] > 0.0)).collect(),
        };
        if fixed.is_some() {
            for (t, o) in out.iter_mut().enumerate() {
                let z = gamma[t % c] * xhat[t] + beta[t % c];
                *o = if pos[t] == 1 { z } else { self.slope * z };
            }
        }
        (
            out,
            EdgeMaxCache {
                sel,
                pos,
                xhat,
                mean,
                inv_std,
            },
        )
    }

    /// Accumulates gradients of `y`, `gamma` and `beta` given `g = dL/dout`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &EdgeMaxCache,
        gamma: &[f64],
        train: bool,
        g: &[f64],
        gy: Option<&mut Vec<f64>>,
        gg: Option<&mut Vec<f64>>,
        gb: Option<&mut Vec<f64>>,
    ) {
        let c = self.c;
        let n = g.len() / c;
        // gradient at the pre-activation of each selected edge
        let gz: Vec<f64> = (0..n * c)
            .map(|t| if cache.pos[t] == 1 { g[t] } else { self.slope * g[t] })
            .collect();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (t, v) in gz.iter().enumerate() {
            sum_g[t % c] += v;
            sum_gx[t % c] += v * cache.xhat[t];
        }
        if let Some(gg) = gg {
            gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
        }
        if let Some(gb) = gb {
            gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
        }
        let Some(gy) = gy else {
            return;
        };
        let scale: Vec<f64> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch]).collect();
        for i in 0..n {
            for ch in 0..c {
                let t = i * c + ch;
                let j = self.nbr[i * self.k + cache.sel[t] as usize];
                let v = scale[ch] * gz[t];
                gy[t] += v;
                gy[j * c + ch] -= v;
            }
        }
        if !train {
            return;
        }
        let r = self.nbr.len() as f64;
        let h1: Vec<f64> = (0..c).map(|ch| scale[ch] * sum_g[ch] / r).collect();
        let h2: Vec<f64> = (0..c).map(|ch| scale[ch] * sum_gx[ch] / r).collect();
        let mut buf = vec![0.0; c];
        let mut dense = vec![0.0; c];
        let (mean, inv) = (&cache.mean, &cache.inv_std);
        self.for_each_edge(&mut buf, |i, e, d| {
            for ch in 0..c {
                let xh = (d[ch] - mean[ch]) * inv[ch];
                dense[ch] = -(h1[ch] + xh * h2[ch]);
            }
            let j = self.nbr[e];
            for ch in 0..c {
                gy[i * c + ch] += dense[ch];
                gy[j * c + ch] -= dense[ch];
            }
        });
    }
}
