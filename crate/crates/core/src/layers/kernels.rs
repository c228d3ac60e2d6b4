//! Raw loops behind the convolution-family tape ops.
//!
//! Layouts are row-major `[n, c, t, f]` for activations and
//! `[out, in, kt, kf]` for kernels. Every routine accumulates into its output
//! buffer and sums in a fixed order, so results are bit-reproducible.

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output index range `[lo, hi)` whose shifted index `i + offset` stays in `[0, extent)`.
#[inline]
fn valid_range(extent: usize, offset: isize) -> Option<(usize, usize)> {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset).min(extent as isize);
    (hi > lo as isize).then_some((lo, hi as usize))
}

#[inline]
fn tap_offset(index: usize, size: usize, dilation: usize) -> isize {
    (index as isize - (size / 2) as isize) * dilation as isize
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub f: usize,
    pub o: usize,
    pub kt: usize,
    pub kf: usize,
    pub dt: usize,
    pub df: usize,
}

impl ConvGeom {
    #[inline]
    fn w(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.c + c) * self.kt + a) * self.kf + b
    }

    #[inline]
    fn row(&self, plane: usize, r: usize) -> usize {
        (plane * self.t + r) * self.f
    }
}

/// `out[n, o] += sum_c x[n, c] (*)_d w[o, c]` with "same" zero padding.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let f = g.f;
    for ni in 0..g.n {
        for ti in 0..g.t {
            for ci in 0..g.c {
                for a in 0..g.kt {
                    let dt = tap_offset(a, g.kt, g.dt);
                    let r = ti as isize + dt;
                    if r < 0 || r >= g.t as isize {
                        continue;
                    }
                    let xrow = &x[g.row(ni * g.c + ci, r as usize)..][..f];
                    for oi in 0..g.o {
                        let orow = &mut out[g.row(ni * g.o + oi, ti)..][..f];
                        for b in 0..g.kf {
                            let df = tap_offset(b, g.kf, g.df);
                            let Some((f0, f1)) = valid_range(f, df) else {
                                continue;
                            };
                            let src = (f0 as isize + df) as usize;
                            axpy(w[g.w(oi, ci, a, b)], &xrow[src..src + (f1 - f0)], &mut orow[f0..f1]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input, accumulated into `dx`.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let f = g.f;
    for ni in 0..g.n {
        for r in 0..g.t {
            for ci in 0..g.c {
                let dxrow = &mut dx[g.row(ni * g.c + ci, r)..][..f];
                for oi in 0..g.o {
                    for a in 0..g.kt {
                        let ti = r as isize - tap_offset(a, g.kt, g.dt);
                        if ti < 0 || ti >= g.t as isize {
                            continue;
                        }
                        let dyrow = &dy[g.row(ni * g.o + oi, ti as usize)..][..f];
                        for b in 0..g.kf {
                            let df = tap_offset(b, g.kf, g.df);
                            let Some((f0, f1)) = valid_range(f, df) else {
                                continue;
                            };
                            let dst = (f0 as isize + df) as usize;
                            axpy(w[g.w(oi, ci, a, b)], &dyrow[f0..f1], &mut dxrow[dst..dst + (f1 - f0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the kernel, accumulated into `dw`.
pub(crate) fn conv2d_backward_kernel(g: &ConvGeom, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let f = g.f;
    for ni in 0..g.n {
        for ti in 0..g.t {
            for a in 0..g.kt {
                let r = ti as isize + tap_offset(a, g.kt, g.dt);
                if r < 0 || r >= g.t as isize {
                    continue;
                }
                for ci in 0..g.c {
                    let xrow = &x[g.row(ni * g.c + ci, r as usize)..][..f];
                    for oi in 0..g.o {
                        let dyrow = &dy[g.row(ni * g.o + oi, ti)..][..f];
                        for b in 0..g.kf {
                            let df = tap_offset(b, g.kf, g.df);
                            let Some((f0, f1)) = valid_range(f, df) else {
                                continue;
                            };
                            let src = (f0 as isize + df) as usize;
                            dw[g.w(oi, ci, a, b)] += dot(&dyrow[f0..f1], &xrow[src..src + (f1 - f0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Stride-2 transposed convolution with a 2x2 kernel laid out `[in, out, 2, 2]`.
pub(crate) fn tconv2x2_forward(dims: [usize; 4], o: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
    let [n, c, t, f] = dims;
    let (t2, f2) = (2 * t, 2 * f);
    let mut y = vec![0.0; n * o * t2 * f2];
    for ni in 0..n {
        for ci in 0..c {
            let xp = &x[(ni * c + ci) * t * f..][..t * f];
            for oi in 0..o {
                let yp = &mut y[(ni * o + oi) * t2 * f2..][..t2 * f2];
                let wk = &w[(ci * o + oi) * 4..][..4];
                for ti in 0..t {
                    for fi in 0..f {
                        let v = xp[ti * f + fi];
                        let base = 2 * ti * f2 + 2 * fi;
                        yp[base] += v * wk[0];
                        yp[base + 1] += v * wk[1];
                        yp[base + f2] += v * wk[2];
                        yp[base + f2 + 1] += v * wk[3];
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn tconv2x2_backward(dims: [usize; 4], o: usize, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, t, f] = dims;
    let (t2, f2) = (2 * t, 2 * f);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for ni in 0..n {
        for ci in 0..c {
            let xp = &x[(ni * c + ci) * t * f..][..t * f];
            let dxp = &mut dx[(ni * c + ci) * t * f..][..t * f];
            for oi in 0..o {
                let dyp = &dy[(ni * o + oi) * t2 * f2..][..t2 * f2];
                let wk = &w[(ci * o + oi) * 4..][..4];
                let mut acc = [0.0; 4];
                for ti in 0..t {
                    for fi in 0..f {
                        let base = 2 * ti * f2 + 2 * fi;
                        let g = [dyp[base], dyp[base + 1], dyp[base + f2], dyp[base + f2 + 1]];
                        let v = xp[ti * f + fi];
                        dxp[ti * f + fi] += g[0] * wk[0] + g[1] * wk[1] + g[2] * wk[2] + g[3] * wk[3];
                        for k in 0..4 {
                            acc[k] += g[k] * v;
                        }
                    }
                }
                for k in 0..4 {
                    dw[(ci * o + oi) * 4 + k] += acc[k];
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_both_ends() {
        assert_eq!(valid_range(5, 2), Some((0, 3)));
        assert_eq!(valid_range(5, -2), Some((2, 5)));
        assert_eq!(valid_range(5, 0), Some((0, 5)));
        assert_eq!(valid_range(3, 4), None);
    }

    #[test]
    fn tap_offsets_are_centered() {
        assert_eq!(tap_offset(0, 3, 4), -4);
        assert_eq!(tap_offset(1, 3, 4), 0);
        assert_eq!(tap_offset(2, 3, 4), 4);
        assert_eq!(tap_offset(0, 1, 7), 0);
    }
}
