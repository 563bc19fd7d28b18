//! Dense 3D convolution kernels.
//!
//! Three entry points cover the forward pass and both adjoints: gradient
//! with respect to the input and gradient with respect to the weights. All
//! three walk the same `(co, o0, o1, o2, ci, k0, k1, k2)` index space in the
//! same order, so accumulation order is fixed and results are bit-stable
//! across runs.
//!
//! Layout: inputs are `[ci, n0, n1, n2]`, weights `[co, ci, k0, k1, k2]`,
//! outputs `[co, m0, m1, m2]`, all row-major with the last axis contiguous.
//! Padding is zero-valued, applied symmetrically on every spatial axis.

/// Output extent of one spatial axis, or `None` when the kernel does not fit
/// even once into the padded input.
pub fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Spatial output shape for an input/weight pair, or `None` if any axis
/// collapses.
pub fn out_shape(xs: &[usize; 4], ws: &[usize; 5], stride: usize, pad: usize) -> Option<[usize; 4]> {
    let m0 = out_dim(xs[1], ws[2], stride, pad)?;
    let m1 = out_dim(xs[2], ws[3], stride, pad)?;
    let m2 = out_dim(xs[3], ws[4], stride, pad)?;
    Some([ws[0], m0, m1, m2])
}

/// Forward convolution. Caller guarantees `xs[0] == ws[1]` and that
/// `out_shape` is `Some`; both are checked by the graph layer.
pub fn forward(x: &[f64], xs: &[usize; 4], w: &[f64], ws: &[usize; 5], stride: usize, pad: usize) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = *xs;
    let [co_n, _, k0_n, k1_n, k2_n] = *ws;
    let os = out_shape(xs, ws, stride, pad).expect("conv output shape");
    let [_, m0, m1, m2] = os;
    let mut out = vec![0.0; co_n * m0 * m1 * m2];
    let ip = pad as isize;
    for co in 0..co_n {
        for o0 in 0..m0 {
            let b0 = (o0 * stride) as isize - ip;
            for o1 in 0..m1 {
                let b1 = (o1 * stride) as isize - ip;
                for o2 in 0..m2 {
                    let b2 = (o2 * stride) as isize - ip;
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for kk0 in 0..k0_n {
                            let i0 = b0 + kk0 as isize;
                            if i0 < 0 || i0 >= n0 as isize {
                                continue;
                            }
                            for kk1 in 0..k1_n {
                                let i1 = b1 + kk1 as isize;
                                if i1 < 0 || i1 >= n1 as isize {
                                    continue;
                                }
                                for kk2 in 0..k2_n {
                                    let i2 = b2 + kk2 as isize;
                                    if i2 < 0 || i2 >= n2 as isize {
                                        continue;
                                    }
                                    let wi = (((co * ci_n + ci) * k0_n + kk0) * k1_n + kk1) * k2_n + kk2;
                                    let xi = ((ci * n0 + i0 as usize) * n1 + i1 as usize) * n2 + i2 as usize;
                                    acc += w[wi] * x[xi];
                                }
                            }
                        }
                    }
                    out[((co * m0 + o0) * m1 + o1) * m2 + o2] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint with respect to the input: scatters `gy` back through the
/// weights. `xs` is the shape of the original input, which is also the shape
/// of the returned buffer.
pub fn input_grad(gy: &[f64], w: &[f64], ws: &[usize; 5], stride: usize, pad: usize, xs: &[usize; 4]) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = *xs;
    let [co_n, _, k0_n, k1_n, k2_n] = *ws;
    let [_, m0, m1, m2] = out_shape(xs, ws, stride, pad).expect("conv output shape");
    let mut gx = vec![0.0; ci_n * n0 * n1 * n2];
    let ip = pad as isize;
    for co in 0..co_n {
        for o0 in 0..m0 {
            let b0 = (o0 * stride) as isize - ip;
            for o1 in 0..m1 {
                let b1 = (o1 * stride) as isize - ip;
                for o2 in 0..m2 {
                    let b2 = (o2 * stride) as isize - ip;
                    let g = gy[((co * m0 + o0) * m1 + o1) * m2 + o2];
                    for ci in 0..ci_n {
                        for kk0 in 0..k0_n {
                            let i0 = b0 + kk0 as isize;
                            if i0 < 0 || i0 >= n0 as isize {
                                continue;
                            }
                            for kk1 in 0..k1_n {
                                let i1 = b1 + kk1 as isize;
                                if i1 < 0 || i1 >= n1 as isize {
                                    continue;
                                }
                                for kk2 in 0..k2_n {
                                    let i2 = b2 + kk2 as isize;
                                    if i2 < 0 || i2 >= n2 as isize {
                                        continue;
                                    }
                                    let wi = (((co * ci_n + ci) * k0_n + kk0) * k1_n + kk1) * k2_n + kk2;
                                    let xi = ((ci * n0 + i0 as usize) * n1 + i1 as usize) * n2 + i2 as usize;
                                    gx[xi] += g * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint with respect to the weights. `ws` is the shape of the original
/// weight tensor, which is also the shape of the returned buffer.
pub fn weight_grad(x: &[f64], xs: &[usize; 4], gy: &[f64], ws: &[usize; 5], stride: usize, pad: usize) -> Vec<f64> {
    let [ci_n, n0, n1, n2] = *xs;
    let [co_n, _, k0_n, k1_n, k2_n] = *ws;
    let [_, m0, m1, m2] = out_shape(xs, ws, stride, pad).expect("conv output shape");
    let mut gw = vec![0.0; co_n * ci_n * k0_n * k1_n * k2_n];
    let ip = pad as isize;
    for co in 0..co_n {
        for o0 in 0..m0 {
            let b0 = (o0 * stride) as isize - ip;
            for o1 in 0..m1 {
                let b1 = (o1 * stride) as isize - ip;
                for o2 in 0..m2 {
                    let b2 = (o2 * stride) as isize - ip;
                    let g = gy[((co * m0 + o0) * m1 + o1) * m2 + o2];
                    for ci in 0..ci_n {
                        for kk0 in 0..k0_n {
                            let i0 = b0 + kk0 as isize;
                            if i0 < 0 || i0 >= n0 as isize {
                                continue;
                            }
                            for kk1 in 0..k1_n {
                                let i1 = b1 + kk1 as isize;
                                if i1 < 0 || i1 >= n1 as isize {
                                    continue;
                                }
                                for kk2 in 0..k2_n {
                                    let i2 = b2 + kk2 as isize;
                                    if i2 < 0 || i2 >= n2 as isize {
                                        continue;
                                    }
                                    let wi = (((co * ci_n + ci) * k0_n + kk0) * k1_n + kk1) * k2_n + kk2;
                                    let xi = ((ci * n0 + i0 as usize) * n1 + i1 as usize) * n2 + i2 as usize;
                                    gw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dim_matches_floor_arithmetic() {
        assert_eq!(out_dim(32, 4, 4, 0), Some(8));
        assert_eq!(out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(out_dim(5, 3, 2, 0), Some(2));
        assert_eq!(out_dim(2, 3, 1, 0), None);
        assert_eq!(out_dim(4, 3, 0, 0), None);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // 1x1x1 kernel with weight 1 is the identity map.
        let xs = [1, 2, 2, 2];
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let out = forward(&x, &xs, &[1.0], &[1, 1, 1, 1, 1], 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn averaging_kernel_sums_neighborhood() {
        // All-ones 3x3x3 kernel over an all-ones 3x3x3 input with pad 1:
        // the center output voxel sees the full 27-voxel neighborhood.
        let xs = [1, 3, 3, 3];
        let x = vec![1.0; 27];
        let w = vec![1.0; 27];
        let out = forward(&x, &xs, &w, &[1, 1, 3, 3, 3], 1, 1);
        assert_eq!(out[13], 27.0);
        // A corner output voxel only sees the 8 in-bounds voxels.
        assert_eq!(out[0], 8.0);
    }
}
