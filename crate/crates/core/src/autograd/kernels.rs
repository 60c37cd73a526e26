//! Convolution kernels (im2col + gemm) shared by the forward and backward passes.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `cin x h x w` sample into a `(cin*k*k) x (ho*wo)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (adds) columns back into a sample gradient.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. `per_sample_weight` selects a `[B, cout, patch]` weight layout.
pub fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    per_sample_weight: bool,
    bias: Option<(&[T], bool)>,
) -> Vec<T> {
    let l = g.out_len();
    let p = g.patch();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); batch * g.cout * l];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * l]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let colsb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let wb = if per_sample_weight {
            &weight[b * g.cout * p..(b + 1) * g.cout * p]
        } else {
            weight
        };
        let ob = &mut out[b * g.cout * l..(b + 1) * g.cout * l];
        if let Some((bias, per_sample_bias)) = bias {
            let bb = if per_sample_bias {
                &bias[b * g.cout..(b + 1) * g.cout]
            } else {
                bias
            };
            for (co, row) in ob.chunks_mut(l).enumerate() {
                row.fill(bb[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            p,
            l,
            T::one(),
            wb,
            (p as isize, 1),
            colsb,
            (l as isize, 1),
            beta,
            ob,
            (l as isize, 1),
        );
    }
    out
}

/// Gradients of [`conv_forward`]. Each output buffer is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    per_sample_weight: bool,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<(&mut [T], bool)>,
) {
    let l = g.out_len();
    let p = g.patch();
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); p * l];
    let mut dcols = vec![T::zero(); p * l];
    for b in 0..batch {
        let db = &dout[b * g.cout * l..(b + 1) * g.cout * l];
        if let Some((dbias, per_sample)) = dbias.as_mut() {
            let off = if *per_sample { b * g.cout } else { 0 };
            for (co, row) in db.chunks(l).enumerate() {
                let s: T = row.iter().copied().sum();
                dbias[off + co] = dbias[off + co] + s;
            }
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let colsb: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            let dwb = if per_sample_weight {
                &mut dw[b * g.cout * p..(b + 1) * g.cout * p]
            } else {
                &mut dw[..]
            };
            T::gemm(
                g.cout,
                l,
                p,
                T::one(),
                db,
                (l as isize, 1),
                colsb,
                (1, l as isize),
                T::one(),
                dwb,
                (p as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let wb = if per_sample_weight {
                &weight[b * g.cout * p..(b + 1) * g.cout * p]
            } else {
                weight
            };
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    p,
                    g.cout,
                    l,
                    T::one(),
                    wb,
                    (1, p as isize),
                    db,
                    (l as isize, 1),
                    T::one(),
                    dxb,
                    (l as isize, 1),
                );
            } else {
                T::gemm(
                    p,
                    g.cout,
                    l,
                    T::one(),
                    wb,
                    (1, p as isize),
                    db,
                    (l as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (l as isize, 1),
                );
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    out[(co * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let g = ConvGeom::new(3, 7, 6, 4, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..3 * 7 * 6)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                .collect();
            let w: Vec<f64> = (0..4 * g.patch())
                .map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0)
                .collect();
            let got = conv_forward(&x, 1, &g, &w, false, None);
            let want = naive_conv(&x, &g, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 1, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.patch() * g.out_len())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
