//! Raw loops behind the recorded primitives. Direct nested-loop
//! convolution, no im2col.

use crate::Scalar;

pub fn conv2d_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output column range `[lo, hi)` for which input column `ow*s + kj - pad` is inside `[0, w)`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // ow*s + k >= pad  <=>  ow >= ceil((pad - k)/s)
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        // ow*s + k - pad <= extent - 1  <=>  ow <= (extent - 1 + pad - k)/s
        let hi = if extent + self.pad < k + 1 {
            0
        } else {
            ((extent - 1 + self.pad - k) / s + 1).min(out)
        };
        (lo, hi.max(lo))
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.o * self.ho * self.wo * self.c * self.kh * self.kw) as u64
    }
}

/// y[n,o,:,:] = b[o] + sum_c w[o,c] * x[n,c]
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>, y: &mut [T]) {
    let (hw_out, hw_in) = (g.ho * g.wo, g.h * g.w);
    for n in 0..g.n {
        for o in 0..g.o {
            let yo = &mut y[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
            let bias = b.map_or(T::zero(), |b| b[o]);
            yo.iter_mut().for_each(|v| *v = bias);
            for c in 0..g.c {
                let xc = &x[(n * g.c + c) * hw_in..(n * g.c + c + 1) * hw_in];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid(ki, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = g.valid(kj, g.w, g.wo);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &xc[ih * g.w..(ih + 1) * g.w];
                            let yrow = &mut yo[oh * g.wo..(oh + 1) * g.wo];
                            if g.stride == 1 {
                                let off = kj as isize - g.pad as isize;
                                for ow in ow_lo..ow_hi {
                                    yrow[ow] += wv * xrow[(ow as isize + off) as usize];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    yrow[ow] += wv * xrow[ow * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dx (if given), dw and db from the output cotangent dy.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (hw_out, hw_in) = (g.ho * g.wo, g.h * g.w);
    for n in 0..g.n {
        for o in 0..g.o {
            let dyo = &dy[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
            if let Some(db) = db.as_deref_mut() {
                db[o] += dyo.iter().copied().sum::<T>();
            }
            for c in 0..g.c {
                let base_in = (n * g.c + c) * hw_in;
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid(ki, g.h, g.ho);
                    for kj in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let (ow_lo, ow_hi) = g.valid(kj, g.w, g.wo);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let row = base_in + ih * g.w;
                            let dyrow = &dyo[oh * g.wo..(oh + 1) * g.wo];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kj - g.pad;
                                acc += dyrow[ow] * x[row + iw];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[row + iw] += wv * dyrow[ow];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// c[m,n] (+)= a[m,k] b[k,n]
pub fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] (+)= a[m,k] b[n,k]^T
pub fn matmul_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * n + j] += s;
        }
    }
}

/// c[k,n] (+)= a[m,k]^T b[m,n]
pub fn matmul_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Non-overlapping `size`×`size` average pool over [planes, h, w].
pub fn avg_pool_forward<T: Scalar>(planes: usize, h: usize, w: usize, size: usize, x: &[T], y: &mut [T]) {
    let (ho, wo) = (h / size, w / size);
    let inv = T::one() / T::of((size * size) as f64);
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = T::zero();
                for i in 0..size {
                    let row = (p * h + oh * size + i) * w + ow * size;
                    for j in 0..size {
                        s += x[row + j];
                    }
                }
                y[(p * ho + oh) * wo + ow] = s * inv;
            }
        }
    }
}

pub fn avg_pool_backward<T: Scalar>(planes: usize, h: usize, w: usize, size: usize, dy: &[T], dx: &mut [T]) {
    let (ho, wo) = (h / size, w / size);
    let inv = T::one() / T::of((size * size) as f64);
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dy[(p * ho + oh) * wo + ow] * inv;
                for i in 0..size {
                    let row = (p * h + oh * size + i) * w + ow * size;
                    for j in 0..size {
                        dx[row + j] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent sliding-window oracle with explicit bounds checks.
    fn conv_oracle(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.o * g.ho * g.wo];
        for n in 0..g.n {
            for o in 0..g.o {
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        let mut s = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    s += w[((o * g.c + c) * g.kh + ki) * g.kw + kj]
                                        * x[((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize];
                                }
                            }
                        }
                        y[((n * g.o + o) * g.ho + oh) * g.wo + ow] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_sliding_window_with_padding_and_stride() {
        for &(h, w, k, s, p) in &[(5, 4, 3, 1, 1), (6, 6, 3, 2, 1), (4, 5, 2, 1, 0), (7, 5, 3, 2, 0)] {
            let ho = conv2d_output_dim(h, k, s, p).unwrap();
            let wo = conv2d_output_dim(w, k, s, p).unwrap();
            let g = ConvGeom { n: 2, c: 2, h, w, o: 3, kh: k, kw: k, stride: s, pad: p, ho, wo };
            let x: Vec<f64> = (0..g.n * g.c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..g.o * g.c * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let mut y = vec![0.0; g.n * g.o * ho * wo];
            conv2d_forward(&g, &x, &wt, None, &mut y);
            assert_eq!(y, conv_oracle(&g, &x, &wt));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, &b, &mut c);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
        // b^T stored as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_bt(2, 3, 4, &a, &bt, &mut c2);
        assert_eq!(c, c2);
    }
}
