//! Raw compute kernels for matrix multiply and 2-D convolution.
//!
//! Every kernel accumulates each output element in a fixed index order, so
//! results are bitwise reproducible. Rayon parallelism only splits work
//! across disjoint output regions and never changes per-element order.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 100_000;

/// C = A (m x k) * B (k x n), row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row_job = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    out
}

/// Shape metadata for a conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dMeta {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dMeta {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.in_h, self.kernel, self.stride, self.padding)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.in_w, self.kernel, self.stride, self.padding)
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(in_dim: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (in_dim + 2 * padding - kernel) / stride + 1
}

/// Direct convolution. x is [B, Cin, H, W], w is [O, Cin/g, k, k], both
/// flattened row-major. Zero padding, square kernel and stride.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, m: &Conv2dMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let ci_pg = m.in_ch / m.groups;
    let o_pg = m.out_ch / m.groups;
    let mut out = vec![0.0; m.batch * m.out_ch * oh * ow];
    let plane_job = |idx: usize, plane: &mut [f64]| {
        let b = idx / m.out_ch;
        let o = idx % m.out_ch;
        let g = o / o_pg;
        let wbase = o * ci_pg * m.kernel * m.kernel;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for cl in 0..ci_pg {
                    let ci = g * ci_pg + cl;
                    let xplane = (b * m.in_ch + ci) * m.in_h * m.in_w;
                    let wchan = wbase + cl * m.kernel * m.kernel;
                    for ky in 0..m.kernel {
                        let iy = (oy * m.stride + ky) as isize - m.padding as isize;
                        if iy < 0 || iy >= m.in_h as isize {
                            continue;
                        }
                        for kx in 0..m.kernel {
                            let ix = (ox * m.stride + kx) as isize - m.padding as isize;
                            if ix < 0 || ix >= m.in_w as isize {
                                continue;
                            }
                            acc += x[xplane + iy as usize * m.in_w + ix as usize]
                                * w[wchan + ky * m.kernel + kx];
                        }
                    }
                }
                if let Some(bs) = bias {
                    acc += bs[o];
                }
                plane[oy * ow + ox] = acc;
            }
        }
    };
    let work = out.len() * ci_pg * m.kernel * m.kernel;
    if work >= PAR_THRESHOLD && m.batch * m.out_ch > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(idx, plane)| plane_job(idx, plane));
    } else {
        for (idx, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane_job(idx, plane);
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_backward_input(dy: &[f64], w: &[f64], m: &Conv2dMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let ci_pg = m.in_ch / m.groups;
    let o_pg = m.out_ch / m.groups;
    let mut dx = vec![0.0; m.batch * m.in_ch * m.in_h * m.in_w];
    let batch_job = |b: usize, dxb: &mut [f64]| {
        for o in 0..m.out_ch {
            let g = o / o_pg;
            let wbase = o * ci_pg * m.kernel * m.kernel;
            let dyplane = (b * m.out_ch + o) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gval = dy[dyplane + oy * ow + ox];
                    if gval == 0.0 {
                        continue;
                    }
                    for cl in 0..ci_pg {
                        let ci = g * ci_pg + cl;
                        let xplane = ci * m.in_h * m.in_w;
                        let wchan = wbase + cl * m.kernel * m.kernel;
                        for ky in 0..m.kernel {
                            let iy = (oy * m.stride + ky) as isize - m.padding as isize;
                            if iy < 0 || iy >= m.in_h as isize {
                                continue;
                            }
                            for kx in 0..m.kernel {
                                let ix = (ox * m.stride + kx) as isize - m.padding as isize;
                                if ix < 0 || ix >= m.in_w as isize {
                                    continue;
                                }
                                dxb[xplane + iy as usize * m.in_w + ix as usize] +=
                                    gval * w[wchan + ky * m.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = dy.len() * ci_pg * m.kernel * m.kernel;
    if work >= PAR_THRESHOLD && m.batch > 1 {
        dx.par_chunks_mut(m.in_ch * m.in_h * m.in_w)
            .enumerate()
            .for_each(|(b, dxb)| batch_job(b, dxb));
    } else {
        for (b, dxb) in dx.chunks_mut(m.in_ch * m.in_h * m.in_w).enumerate() {
            batch_job(b, dxb);
        }
    }
    dx
}

/// Gradient of conv2d w.r.t. its weight.
pub fn conv2d_backward_weight(dy: &[f64], x: &[f64], m: &Conv2dMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let ci_pg = m.in_ch / m.groups;
    let o_pg = m.out_ch / m.groups;
    let mut dw = vec![0.0; m.out_ch * ci_pg * m.kernel * m.kernel];
    let filter_job = |o: usize, dwo: &mut [f64]| {
        let g = o / o_pg;
        for b in 0..m.batch {
            let dyplane = (b * m.out_ch + o) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gval = dy[dyplane + oy * ow + ox];
                    if gval == 0.0 {
                        continue;
                    }
                    for cl in 0..ci_pg {
                        let ci = g * ci_pg + cl;
                        let xplane = (b * m.in_ch + ci) * m.in_h * m.in_w;
                        for ky in 0..m.kernel {
                            let iy = (oy * m.stride + ky) as isize - m.padding as isize;
                            if iy < 0 || iy >= m.in_h as isize {
                                continue;
                            }
                            for kx in 0..m.kernel {
                                let ix = (ox * m.stride + kx) as isize - m.padding as isize;
                                if ix < 0 || ix >= m.in_w as isize {
                                    continue;
                                }
                                dwo[cl * m.kernel * m.kernel + ky * m.kernel + kx] +=
                                    gval * x[xplane + iy as usize * m.in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = dy.len() * ci_pg * m.kernel * m.kernel;
    if work >= PAR_THRESHOLD && m.out_ch > 1 {
        dw.par_chunks_mut(ci_pg * m.kernel * m.kernel)
            .enumerate()
            .for_each(|(o, dwo)| filter_job(o, dwo));
    } else {
        for (o, dwo) in dw.chunks_mut(ci_pg * m.kernel * m.kernel).enumerate() {
            filter_job(o, dwo);
        }
    }
    dw
}

/// Gradient of conv2d w.r.t. its bias.
pub fn conv2d_backward_bias(dy: &[f64], m: &Conv2dMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let mut db = vec![0.0; m.out_ch];
    for b in 0..m.batch {
        for o in 0..m.out_ch {
            let plane = (b * m.out_ch + o) * oh * ow;
            for i in 0..oh * ow {
                db[o] += dy[plane + i];
            }
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_values() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul_raw(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert_eq!(matmul_raw(&a, &eye, 3, 4, 4), a);
    }

    #[test]
    fn conv_out_dim_formula() {
        assert_eq!(conv_out_dim(128, 4, 4, 0), 32);
        assert_eq!(conv_out_dim(32, 2, 2, 0), 16);
        assert_eq!(conv_out_dim(16, 7, 1, 3), 16);
        assert_eq!(conv_out_dim(5, 3, 1, 1), 5);
    }

    #[test]
    fn pointwise_conv_equals_matmul_bitwise() {
        // groups == 1, k == 1: conv over [B,Cin,H,W] is a matmul
        // W[O x Cin] * X[Cin x BHW-columns] position by position.
        let m = Conv2dMeta {
            batch: 2,
            in_ch: 5,
            out_ch: 3,
            in_h: 4,
            in_w: 3,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let x: Vec<f64> = (0..m.batch * m.in_ch * m.in_h * m.in_w)
            .map(|i| ((i * 37 + 11) % 17) as f64 * 0.21 - 1.3)
            .collect();
        let w: Vec<f64> = (0..m.out_ch * m.in_ch)
            .map(|i| ((i * 13 + 5) % 19) as f64 * 0.17 - 1.1)
            .collect();
        let conv = conv2d_forward(&x, &w, None, &m);
        let hw = m.in_h * m.in_w;
        for b in 0..m.batch {
            // columns of this batch item: [Cin x HW]
            let xcols: Vec<f64> = x[b * m.in_ch * hw..(b + 1) * m.in_ch * hw].to_vec();
            let mm = matmul_raw(&w, &xcols, m.out_ch, m.in_ch, hw);
            assert_eq!(&conv[b * m.out_ch * hw..(b + 1) * m.out_ch * hw], &mm[..]);
        }
    }

    #[test]
    fn depthwise_conv_known_values() {
        // 1x2x3x3 input, 3x3 depthwise kernel of ones, padding 1: each output
        // element is the sum of its 3x3 neighborhood.
        let m = Conv2dMeta {
            batch: 1,
            in_ch: 2,
            out_ch: 2,
            in_h: 3,
            in_w: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 2,
        };
        let x: Vec<f64> = (1..=18).map(|v| v as f64).collect();
        let w = vec![1.0; 2 * 9];
        let y = conv2d_forward(&x, &w, None, &m);
        // channel 0 holds 1..9; center output = sum(1..9) = 45
        assert_eq!(y[4], 45.0);
        // corner output (0,0) = 1+2+4+5 = 12
        assert_eq!(y[0], 12.0);
        // channel 1 center = sum(10..18) = 126
        assert_eq!(y[9 + 4], 126.0);
    }

    #[test]
    fn strided_conv_shapes_and_bias() {
        let m = Conv2dMeta {
            batch: 1,
            in_ch: 3,
            out_ch: 4,
            in_h: 8,
            in_w: 8,
            kernel: 4,
            stride: 4,
            padding: 0,
            groups: 1,
        };
        let x = vec![0.0; 3 * 64];
        let w = vec![0.5; 4 * 3 * 16];
        let bias = vec![1.0, 2.0, 3.0, 4.0];
        let y = conv2d_forward(&x, &w, Some(&bias), &m);
        assert_eq!(y.len(), 4 * 2 * 2);
        for o in 0..4 {
            for i in 0..4 {
                assert_eq!(y[o * 4 + i], bias[o]);
            }
        }
    }
}
