//! Multichannel Wiener filtering of a stereo mixture from magnitude estimates.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::Stft;
use crate::tensor::Tensor;

type C = Complex64;
/// Hermitian 2x2 matrix stored as `[a, b, conj(b), d]`.
type Mat = [C; 4];

const ZERO: C = C::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MwfConfig {
    /// Regularizer relative to the per-bin trace of the mixture model.
    pub eps_scale: f64,
    /// Diagonal loading of each spatial covariance, relative to its trace.
    pub loading: f64,
}

impl Default for MwfConfig {
    fn default() -> Self {
        MwfConfig {
            eps_scale: 1e-10,
            loading: 0.0,
        }
    }
}

fn outer(x: [C; 2]) -> Mat {
    [
        x[0] * x[0].conj(),
        x[0] * x[1].conj(),
        x[1] * x[0].conj(),
        x[1] * x[1].conj(),
    ]
}

fn add_scaled(acc: &mut Mat, m: &Mat, s: f64) {
    for (a, b) in acc.iter_mut().zip(m) {
        *a += b * s;
    }
}

fn mat_vec(m: &Mat, x: [C; 2]) -> [C; 2] {
    [m[0] * x[0] + m[1] * x[1], m[2] * x[0] + m[3] * x[1]]
}

fn trace(m: &Mat) -> f64 {
    m[0].re + m[3].re
}

/// Solve `m y = x` for a 2x2 system.
fn solve(m: &Mat, x: [C; 2]) -> [C; 2] {
    let det = m[0] * m[3] - m[1] * m[2];
    [(m[3] * x[0] - m[1] * x[1]) / det, (m[0] * x[1] - m[2] * x[0]) / det]
}

/// One pass of the multichannel Wiener filter.
///
/// Source `j` has power `v_j = mean_c |est_j|^2` and a spatial covariance
/// `R_j(f)` estimated from the soft-masked mixture, `sum_t y y^H / sum_t v_j`
/// with `y = v_j / sum_k v_k * x`. Each bin is then filtered as
/// `s_j = v_j R_j (C + eps I)^-1 x` with `C = sum_k v_k R_k`. The part of `x`
/// removed by the regularizer, `eps (C + eps I)^-1 x`, is handed back to the
/// sources in proportion to their power, so the estimates always add up to the
/// mixture. Bins where every estimate is zero are split evenly.
pub fn mwf(mixture: &Stft, estimates: &[Tensor], config: MwfConfig) -> Result<Vec<Stft>> {
    if mixture.channels != 2 {
        return Err(Error::ChannelMismatch {
            op: "mwf",
            expected: 2,
            actual: mixture.channels,
        });
    }
    if estimates.is_empty() {
        return Err(Error::invalid("mwf needs at least one source estimate"));
    }
    let (frames, bins) = (mixture.frames, mixture.bins());
    let want = [2, frames, bins];
    for e in estimates {
        if e.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "mwf",
                left: want.to_vec(),
                right: e.shape().to_vec(),
            });
        }
        if e.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("magnitude estimates must be finite and nonnegative"));
        }
    }
    let j_count = estimates.len();
    let plane = frames * bins;
    let power: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| {
            let d = e.data();
            (0..plane)
                .map(|i| 0.5 * (d[i] * d[i] + d[plane + i] * d[plane + i]))
                .collect()
        })
        .collect();
    let x_at = |t: usize, f: usize| [mixture.at(0, t, f), mixture.at(1, t, f)];

    let mut outs: Vec<Stft> = (0..j_count).map(|_| Stft::zeros_like(mixture)).collect();
    let mut r = vec![[ZERO; 4]; j_count];
    for f in 0..bins {
        // spatial covariances
        for (j, rj) in r.iter_mut().enumerate() {
            let mut acc = [ZERO; 4];
            let mut weight = 0.0;
            for t in 0..frames {
                let i = t * bins + f;
                let total: f64 = power.iter().map(|p| p[i]).sum();
                weight += power[j][i];
                if total > 0.0 {
                    let share = power[j][i] / total;
                    add_scaled(&mut acc, &outer(x_at(t, f)), share * share);
                }
            }
            if weight > 0.0 {
                for a in &mut acc {
                    *a /= weight;
                }
            }
            let load = config.loading * trace(&acc) * 0.5;
            acc[0] += load;
            acc[3] += load;
            if trace(&acc) <= 0.0 {
                acc = [C::new(1.0, 0.0), ZERO, ZERO, C::new(1.0, 0.0)];
            }
            *rj = acc;
        }
        for t in 0..frames {
            let i = t * bins + f;
            let x = x_at(t, f);
            let mut model = [ZERO; 4];
            for (j, rj) in r.iter().enumerate() {
                add_scaled(&mut model, rj, power[j][i]);
            }
            let tr = trace(&model);
            let total: f64 = power.iter().map(|p| p[i]).sum();
            let eps = config.eps_scale * tr * 0.5;
            let mut loaded = model;
            loaded[0] += eps;
            loaded[3] += eps;
            let z = solve(&loaded, x);
            if total <= 0.0 || tr <= 0.0 || !(z[0].is_finite() && z[1].is_finite()) {
                // nothing to weigh the sources by: split the mixture evenly
                for out in outs.iter_mut() {
                    for (c, xc) in x.iter().enumerate() {
                        let k = out.index(c, t, f);
                        out.data[k] = xc / j_count as f64;
                    }
                }
                continue;
            }
            let residual = [z[0] * eps, z[1] * eps];
            for (j, out) in outs.iter_mut().enumerate() {
                let filtered = if power[j][i] > 0.0 {
                    let y = mat_vec(&r[j], z);
                    [y[0] * power[j][i], y[1] * power[j][i]]
                } else {
                    [ZERO; 2]
                };
                let share = power[j][i] / total;
                for c in 0..2 {
                    let k = out.index(c, t, f);
                    out.data[k] = filtered[c] + residual[c] * share;
                }
            }
        }
    }
    Ok(outs)
}
