//! Space-time convolution and pooling over `[N, C, T, H, W]` tensors.
//!
//! Convolution lowers each sample to a column matrix (im2col) and runs one
//! GEMM per sample. Columns are rebuilt during backward instead of being
//! kept alive with the graph.

use super::ops::gemm;
use super::{BackwardCtx, Result, Tensor, TensorError};

/// Kernel, stride and zero padding along (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeometry {
    pub fn spatial(kernel: usize, stride: usize, pad: usize) -> Self {
        Conv3dGeometry {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn temporal(kernel: usize, stride: usize, pad: usize) -> Self {
        Conv3dGeometry {
            kernel: [kernel, 1, 1],
            stride: [stride, 1, 1],
            pad: [pad, 0, 0],
        }
    }

    /// Standard convolution arithmetic; an extent below 1 is an error.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.pad[i];
            if self.stride[i] == 0 || self.kernel[i] == 0 || padded < self.kernel[i] {
                return Err(TensorError::Invalid(format!(
                    "conv3d: kernel {:?} stride {:?} pad {:?} gives an empty output for input {:?}",
                    self.kernel, self.stride, self.pad, input
                )));
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

struct Lowering {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: Conv3dGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Visits every (column-matrix index, input index) pair that lies inside
    /// the unpadded input.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [kt, kh, kw] = self.geom.kernel;
        let [st, sh, sw] = self.geom.stride;
        let [pt, ph, pw] = self.geom.pad;
        let [it_n, ih_n, iw_n] = self.input;
        let [ot_n, oh_n, ow_n] = self.output;
        let cols = self.cols();
        let plane = ih_n * iw_n;
        let mut row = 0;
        for c in 0..self.channels {
            let c_base = c * it_n * plane;
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row_base = row * cols;
                        for ot in 0..ot_n {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it >= it_n as isize {
                                continue;
                            }
                            let t_base = c_base + it as usize * plane;
                            for oh in 0..oh_n {
                                let ih = (oh * sh + dy) as isize - ph as isize;
                                if ih < 0 || ih >= ih_n as isize {
                                    continue;
                                }
                                let h_base = t_base + ih as usize * iw_n;
                                let col_base = row_base + (ot * oh_n + oh) * ow_n;
                                for ow in 0..ow_n {
                                    let iw = (ow * sw + dx) as isize - pw as isize;
                                    if iw >= 0 && iw < iw_n as isize {
                                        f(col_base + ow, h_base + iw as usize);
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        col.iter_mut().for_each(|v| *v = 0.0);
        self.for_each(|ci, xi| col[ci] = x[xi]);
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        self.for_each(|ci, xi| dx[xi] += col[ci]);
    }
}

fn rank5(t: &Tensor, op: &'static str) -> Result<[usize; 5]> {
    match *t.shape() {
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(TensorError::Invalid(format!(
            "{op}: expected [N, C, T, H, W], got {:?}",
            t.shape()
        ))),
    }
}

impl Tensor {
    /// 3D convolution of `[N, C, T, H, W]` input with `[Co, C, kt, kh, kw]`
    /// weights and optional `[Co]` bias.
    pub fn conv3d(&self, weight: &Tensor, bias: Option<&Tensor>, geom: Conv3dGeometry) -> Result<Tensor> {
        let [n, c, t, h, w] = rank5(self, "conv3d")?;
        let co = match *weight.shape() {
            [co, wc, kt, kh, kw] if wc == c && [kt, kh, kw] == geom.kernel => co,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    lhs: self.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                })
            }
        };
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let output = geom.output_extent([t, h, w])?;
        let low = Lowering {
            channels: c,
            input: [t, h, w],
            output,
            geom,
        };
        let (k, p) = (low.rows(), low.cols());
        let in_len = c * t * h * w;
        let mut out = vec![0.0; n * co * p];
        {
            let x = self.data();
            let wt = weight.data();
            let mut col = vec![0.0; k * p];
            for s in 0..n {
                low.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
                gemm(co, k, p, &wt, (k, 1), &col, (p, 1), &mut out[s * co * p..], 0.0);
            }
            if let Some(b) = bias {
                let b = b.data();
                for s in 0..n {
                    for (o, &bv) in b.iter().enumerate() {
                        let base = (s * co + o) * p;
                        out[base..base + p].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv3d",
            out,
            vec![n, co, output[0], output[1], output[2]],
            parents,
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.parents[0].data();
                let wt = ctx.parents[1].data();
                let g = ctx.grad;
                let need_x = ctx.parents[0].requires_grad();
                let need_w = ctx.parents[1].requires_grad();
                let mut dx = need_x.then(|| vec![0.0; n * in_len]);
                let mut dw = need_w.then(|| vec![0.0; co * k]);
                let mut col = vec![0.0; k * p];
                for s in 0..n {
                    let gs = &g[s * co * p..(s + 1) * co * p];
                    if let Some(dw) = dw.as_mut() {
                        low.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
                        gemm(co, p, k, gs, (p, 1), &col, (1, p), dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(k, co, p, &wt, (1, k), gs, (p, 1), &mut col, 0.0);
                        low.col2im(&col, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                let mut grads = vec![dx, dw];
                if ctx.parents.len() == 3 {
                    let db = ctx.parents[2].requires_grad().then(|| {
                        let mut db = vec![0.0; co];
                        for s in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (s * co + o) * p;
                                *d += g[base..base + p].iter().sum::<f64>();
                            }
                        }
                        db
                    });
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Non-overlapping average pooling with kernel equal to stride; trailing
    /// cells that do not fill a window are dropped.
    pub fn avg_pool3d(&self, kernel: [usize; 3]) -> Result<Tensor> {
        let [n, c, t, h, w] = rank5(self, "avg_pool3d")?;
        if kernel.contains(&0) || kernel[0] > t || kernel[1] > h || kernel[2] > w {
            return Err(TensorError::Invalid(format!(
                "avg_pool3d: kernel {kernel:?} does not fit input {:?}",
                self.shape()
            )));
        }
        let [kt, kh, kw] = kernel;
        let (ot, oh, ow) = (t / kt, h / kh, w / kw);
        let norm = 1.0 / (kt * kh * kw) as f64;
        let mut out = vec![0.0; n * c * ot * oh * ow];
        {
            let x = self.data();
            for nc in 0..n * c {
                let src = nc * t * h * w;
                for a in 0..ot {
                    for b in 0..oh {
                        for d in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..kt {
                                for j in 0..kh {
                                    let row = src + ((a * kt + i) * h + b * kh + j) * w + d * kw;
                                    for l in 0..kw {
                                        acc += x[row + l];
                                    }
                                }
                            }
                            out[((nc * ot + a) * oh + b) * ow + d] = acc * norm;
                        }
                    }
                }
            }
        }
        let in_len = n * c * t * h * w;
        Ok(Tensor::from_op(
            "avg_pool3d",
            out,
            vec![n, c, ot, oh, ow],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut dx = vec![0.0; in_len];
                for nc in 0..n * c {
                    let dst = nc * t * h * w;
                    for a in 0..ot {
                        for b in 0..oh {
                            for d in 0..ow {
                                let gv = ctx.grad[((nc * ot + a) * oh + b) * ow + d] * norm;
                                for i in 0..kt {
                                    for j in 0..kh {
                                        let row = dst + ((a * kt + i) * h + b * kh + j) * w + d * kw;
                                        for l in 0..kw {
                                            dx[row + l] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_preserving_config() {
        let x = Tensor::ones(&[1, 1, 4, 8, 8]);
        let ws = Tensor::ones(&[1, 1, 1, 3, 3]);
        let wt = Tensor::ones(&[1, 1, 3, 1, 1]);
        let y = x
            .conv3d(&ws, None, Conv3dGeometry::spatial(3, 1, 1))
            .unwrap()
            .relu()
            .conv3d(&wt, None, Conv3dGeometry::temporal(3, 1, 1))
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 8, 8]);
    }

    #[test]
    fn stride_two_halves_spatial() {
        let g = Conv3dGeometry::spatial(3, 2, 1);
        assert_eq!(g.output_extent([4, 8, 8]).unwrap(), [4, 4, 4]);
        let bad = Conv3dGeometry::spatial(5, 1, 0);
        assert!(bad.output_extent([4, 3, 3]).is_err());
    }

    #[test]
    fn ones_kernel_interior_sums_nine() {
        let x = Tensor::ones(&[1, 1, 1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 1, 3, 3]);
        let y = x.conv3d(&w, None, Conv3dGeometry::spatial(3, 1, 1)).unwrap();
        let d = y.to_vec();
        // direct summation over the 3x3 neighbourhood with zero padding
        for r in 0..5usize {
            for c in 0..5usize {
                let mut s = 0.0;
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if (0..5).contains(&rr) && (0..5).contains(&cc) {
                            s += 1.0;
                        }
                    }
                }
                assert_eq!(d[r * 5 + c], s);
            }
        }
        assert_eq!(d[2 * 5 + 2], 9.0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (n, c, t, h, w, co) = (2, 2, 3, 5, 4, 3);
        let xs: Vec<f64> = (0..n * c * t * h * w)
            .map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.5)
            .collect();
        let ws: Vec<f64> = (0..co * c * 2 * 3 * 3)
            .map(|i| ((i * 5 % 13) as f64) * 0.05 - 0.3)
            .collect();
        let x = Tensor::from_vec(xs.clone(), &[n, c, t, h, w]).unwrap();
        let wt = Tensor::from_vec(ws.clone(), &[co, c, 2, 3, 3]).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.2, 0.3], &[co]).unwrap();
        let geom = Conv3dGeometry {
            kernel: [2, 3, 3],
            stride: [1, 2, 1],
            pad: [1, 1, 0],
        };
        let y = x.conv3d(&wt, Some(&b), geom).unwrap();
        let [ot, oh, ow] = geom.output_extent([t, h, w]).unwrap();
        assert_eq!(y.shape(), &[n, co, ot, oh, ow]);
        let yd = y.to_vec();
        for s in 0..n {
            for o in 0..co {
                for a in 0..ot {
                    for bb in 0..oh {
                        for d in 0..ow {
                            let mut acc = [0.1, -0.2, 0.3][o];
                            for ci in 0..c {
                                for i in 0..2 {
                                    for j in 0..3 {
                                        for l in 0..3 {
                                            let it = (a + i) as isize - 1;
                                            let ih = (bb * 2 + j) as isize - 1;
                                            let iw = (d + l) as isize;
                                            if it < 0
                                                || ih < 0
                                                || it >= t as isize
                                                || ih >= h as isize
                                                || iw >= w as isize
                                            {
                                                continue;
                                            }
                                            let xi =
                                                (((s * c + ci) * t + it as usize) * h + ih as usize) * w + iw as usize;
                                            let wi = (((o * c + ci) * 2 + i) * 3 + j) * 3 + l;
                                            acc += xs[xi] * ws[wi];
                                        }
                                    }
                                }
                            }
                            let yi = (((s * co + o) * ot + a) * oh + bb) * ow + d;
                            assert!((yd[yi] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_means_windows() {
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 1, 1, 4, 4]).unwrap();
        let y = x.avg_pool3d([1, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
    }
}
