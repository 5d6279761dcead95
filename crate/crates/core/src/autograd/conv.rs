//! 3-D convolution, its transpose, and batch normalization.

use super::{Tape, Var};
use crate::tensor::Tensor;

/// Kernel, stride and padding per (time, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Extra trailing size for transposed convolutions only.
    pub output_padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { kernel, stride, padding, output_padding: [0; 3] }
    }

    pub fn pointwise() -> Self {
        Self::new([1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    pub fn with_output_padding(mut self, output_padding: [usize; 3]) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|d| {
            (input[d] + 2 * self.padding[d] - self.kernel[d]) / self.stride[d] + 1
        })
    }

    pub fn transposed_output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|d| {
            (input[d] - 1) * self.stride[d] + self.kernel[d] + self.output_padding[d]
                - 2 * self.padding[d]
        })
    }
}

/// Output positions `[lo, hi)` along one axis whose tap `k` lands inside the input.
fn tap_range(k: usize, input: usize, output: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if input + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - k) / stride + 1).min(output);
    (lo, hi.max(lo))
}

/// Dimensions of a direct convolution `x -> y`.
#[derive(Clone, Copy)]
struct Layout {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Layout {
    /// Folds axes that the kernel passes over one-to-one into the width axis,
    /// so the inner loop runs over longer contiguous spans.
    fn collapsed(mut self) -> Self {
        let g = &mut self.geom;
        let unit = |g: &ConvGeometry, d: usize| g.kernel[d] == 1 && g.stride[d] == 1 && g.padding[d] == 0;
        if unit(g, 1) && unit(g, 2) {
            self.input = [self.input[0], 1, self.input[1] * self.input[2]];
            self.output = [self.output[0], 1, self.output[1] * self.output[2]];
            if unit(g, 0) {
                self.input = [1, 1, self.input[0] * self.input[2]];
                self.output = [1, 1, self.output[0] * self.output[2]];
            }
        }
        self
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.geom.kernel.iter().product()
    }

    /// Calls `f(row, col_offset, x_offset, w_lo, w_hi)` for every valid
    /// (channel, tap, time, height) line of the unfolded input; element `wo`
    /// of the line maps column `col_offset + wo` to input `x_offset + wo * stride_w`.
    #[inline]
    fn lines(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let g = &self.geom;
        let [kt_n, kh_n, kw_n] = g.kernel;
        let [it, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let (ins, outs) = (self.in_spatial(), self.out_spatial());
        for c in 0..self.cin {
            for kt in 0..kt_n {
                let (t0, t1) = tap_range(kt, it, ot, g.stride[0], g.padding[0]);
                for kh in 0..kh_n {
                    let (h0, h1) = tap_range(kh, ih, oh, g.stride[1], g.padding[1]);
                    for kw in 0..kw_n {
                        let (w0, w1) = tap_range(kw, iw, ow, g.stride[2], g.padding[2]);
                        if w0 >= w1 {
                            continue;
                        }
                        let row = ((c * kt_n + kt) * kh_n + kh) * kw_n + kw;
                        for to in t0..t1 {
                            let ti = to * g.stride[0] + kt - g.padding[0];
                            for ho in h0..h1 {
                                let hi = ho * g.stride[1] + kh - g.padding[1];
                                // `w0 * stride + kw >= padding` by construction of the tap range.
                                let x_off = c * ins + (ti * ih + hi) * iw + w0 * g.stride[2] + kw - g.padding[2];
                                f(row, row * outs + (to * oh + ho) * ow, x_off, w0, w1);
                            }
                        }
                    }
                }
            }
        }
    }

    /// One sample `[cin, in_spatial]` unfolded to `[cin * taps, out_spatial]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.cin * self.taps() * self.out_spatial()];
        let sw = self.geom.stride[2];
        self.lines(|_, c_off, x_off, w0, w1| {
            let dst = &mut col[c_off + w0..c_off + w1];
            if sw == 1 {
                dst.copy_from_slice(&x[x_off..x_off + (w1 - w0)]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = x[x_off + i * sw];
                }
            }
        });
        col
    }

    /// Adjoint of [`Layout::im2col`], accumulated into `gx`.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let sw = self.geom.stride[2];
        self.lines(|_, c_off, x_off, w0, w1| {
            for (i, &v) in col[c_off + w0..c_off + w1].iter().enumerate() {
                gx[x_off + i * sw] += v;
            }
        });
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ins, outs, rows) = (self.in_spatial(), self.out_spatial(), self.cin * self.taps());
        let mut y = vec![0.0; self.batch * self.cout * outs];
        for n in 0..self.batch {
            let col = self.im2col(&x[n * self.cin * ins..(n + 1) * self.cin * ins]);
            for o in 0..self.cout {
                let y_row = &mut y[(n * self.cout + o) * outs..(n * self.cout + o + 1) * outs];
                for (r, &wv) in w[o * rows..(o + 1) * rows].iter().enumerate() {
                    if wv != 0.0 {
                        for (yv, &cv) in y_row.iter_mut().zip(&col[r * outs..(r + 1) * outs]) {
                            *yv += wv * cv;
                        }
                    }
                }
            }
        }
        y
    }

    fn backward_input(&self, gy: &[f64], w: &[f64]) -> Vec<f64> {
        let (ins, outs, rows) = (self.in_spatial(), self.out_spatial(), self.cin * self.taps());
        let mut gx = vec![0.0; self.batch * self.cin * ins];
        let mut gcol = vec![0.0; rows * outs];
        for n in 0..self.batch {
            gcol.fill(0.0);
            for o in 0..self.cout {
                let g_row = &gy[(n * self.cout + o) * outs..(n * self.cout + o + 1) * outs];
                for (r, &wv) in w[o * rows..(o + 1) * rows].iter().enumerate() {
                    if wv != 0.0 {
                        for (cv, &gv) in gcol[r * outs..(r + 1) * outs].iter_mut().zip(g_row) {
                            *cv += wv * gv;
                        }
                    }
                }
            }
            self.col2im(&gcol, &mut gx[n * self.cin * ins..(n + 1) * self.cin * ins]);
        }
        gx
    }

    fn backward_weight(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let (ins, outs, rows) = (self.in_spatial(), self.out_spatial(), self.cin * self.taps());
        let mut gw = vec![0.0; self.cout * rows];
        for n in 0..self.batch {
            let col = self.im2col(&x[n * self.cin * ins..(n + 1) * self.cin * ins]);
            for o in 0..self.cout {
                let g_row = &gy[(n * self.cout + o) * outs..(n * self.cout + o + 1) * outs];
                for (r, gwv) in gw[o * rows..(o + 1) * rows].iter_mut().enumerate() {
                    *gwv += g_row.iter().zip(&col[r * outs..(r + 1) * outs]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        gw
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn add_bias(y: &mut [f64], bias: &[f64], batch: usize, spatial: usize) {
    let cout = bias.len();
    for n in 0..batch {
        for (o, &b) in bias.iter().enumerate() {
            let start = (n * cout + o) * spatial;
            y[start..start + spatial].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (batch, cout) = (g.dim(0), g.dim(1));
    let spatial = g.len() / (batch * cout);
    let mut d = vec![0.0; cout];
    for (i, chunk) in g.data().chunks(spatial).enumerate() {
        d[i % cout] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(&[cout], d)
}

impl Tape {
    /// `x: [N, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`, optional `b: [Cout]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        assert_eq!(xs.len(), 5, "conv3d input must be 5-D, got {xs:?}");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?} weight {ws:?}");
        assert_eq!(&ws[2..], &geom.kernel, "conv3d kernel mismatch");
        let layout = Layout {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: dims3(&xs),
            output: geom.output_dims(dims3(&xs)),
            geom,
        }
        .collapsed();
        let mut y = layout.forward(xv.data(), wv.data());
        if let Some(b) = b {
            add_bias(&mut y, self.value(b).data(), layout.batch, layout.out_spatial());
        }
        let [ot, oh, ow] = geom.output_dims(dims3(&xs));
        let value = Tensor::from_vec(&[layout.batch, layout.cout, ot, oh, ow], y);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |g, need| {
                let mut out = vec![
                    need[0].then(|| Tensor::from_vec(&xs, layout.backward_input(g.data(), wv.data()))),
                    need[1].then(|| Tensor::from_vec(&ws, layout.backward_weight(xv.data(), g.data()))),
                ];
                if need.len() > 2 {
                    out.push(need[2].then(|| bias_grad(g)));
                }
                out
            }),
        )
    }

    /// Transposed convolution. `w: [Cin, Cout, kt, kh, kw]` as in the usual
    /// deep-learning convention; it is the adjoint of [`Tape::conv3d`].
    pub fn conv_transpose3d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        assert_eq!(xs.len(), 5, "conv_transpose3d input must be 5-D, got {xs:?}");
        assert_eq!(xs[1], ws[0], "conv_transpose3d channel mismatch: {xs:?} vs {ws:?}");
        let out_dims = geom.transposed_output_dims(dims3(&xs));
        // The adjoint direct convolution maps the (larger) output back to `x`.
        let layout = Layout {
            batch: xs[0],
            cin: ws[1],
            cout: ws[0],
            input: out_dims,
            output: dims3(&xs),
            geom,
        }
        .collapsed();
        debug_assert_eq!(geom.output_dims(out_dims), dims3(&xs));
        let mut y = layout.backward_input(xv.data(), wv.data());
        if let Some(b) = b {
            add_bias(&mut y, self.value(b).data(), layout.batch, layout.in_spatial());
        }
        let ys = vec![xs[0], ws[1], out_dims[0], out_dims[1], out_dims[2]];
        let value = Tensor::from_vec(&ys, y);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |g, need| {
                let mut out = vec![
                    need[0].then(|| Tensor::from_vec(&xs, layout.forward(g.data(), wv.data()))),
                    need[1].then(|| Tensor::from_vec(&ws, layout.backward_weight(g.data(), xv.data()))),
                ];
                if need.len() > 2 {
                    out.push(need[2].then(|| bias_grad(g)));
                }
                out
            }),
        )
    }

    /// Batch normalization with batch statistics over every axis except
    /// channels. Returns the output and the per-channel batch mean and biased
    /// variance (for running-statistic updates).
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.rc(x);
        let shape = xv.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in xv.data().chunks(spatial).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in xv.data().chunks(spatial).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.data().chunks(spatial).enumerate() {
            let ch = i % c;
            for &x in chunk {
                let h = (x - mean[ch]) * inv_std[ch];
                xhat.push(h);
                y.push(gv[ch] * h + bv[ch]);
            }
        }
        let out = self.push(
            Tensor::from_vec(&shape, y),
            &[x, gamma, beta],
            Box::new(move |g, need| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for (i, (gc, hc)) in g.data().chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    sum_g[i % c] += gc.iter().sum::<f64>();
                    sum_gh[i % c] += gc.iter().zip(hc).map(|(g, h)| g * h).sum::<f64>();
                }
                let gx = need[0].then(|| {
                    let mut d = Vec::with_capacity(g.len());
                    for (i, (gc, hc)) in g.data().chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                        let ch = i % c;
                        let k = gv[ch] * inv_std[ch] / count;
                        for (g, h) in gc.iter().zip(hc) {
                            d.push(k * (count * g - sum_g[ch] - h * sum_gh[ch]));
                        }
                    }
                    Tensor::from_vec(&shape, d)
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::from_vec(&[c], sum_gh.clone())),
                    need[2].then(|| Tensor::from_vec(&[c], sum_g.clone())),
                ]
            }),
        );
        (out, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.rc(x);
        let shape = xv.shape().to_vec();
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.data().chunks(spatial).enumerate() {
            let ch = i % c;
            y.extend(chunk.iter().map(|x| gv[ch] * (x - mean[ch]) * inv_std[ch] + bv[ch]));
        }
        self.push(
            Tensor::from_vec(&shape, y),
            &[x, gamma, beta],
            Box::new(move |g, need| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for (i, (gc, xc)) in g.data().chunks(spatial).zip(xv.data().chunks(spatial)).enumerate() {
                    let ch = i % c;
                    sum_g[ch] += gc.iter().sum::<f64>();
                    sum_gh[ch] += gc.iter().zip(xc).map(|(g, x)| g * (x - mean[ch]) * inv_std[ch]).sum::<f64>();
                }
                let gx = need[0].then(|| {
                    let mut d = Vec::with_capacity(g.len());
                    for (i, gc) in g.data().chunks(spatial).enumerate() {
                        let k = gv[i % c] * inv_std[i % c];
                        d.extend(gc.iter().map(|g| g * k));
                    }
                    Tensor::from_vec(&shape, d)
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::from_vec(&[c], sum_gh)),
                    need[2].then(|| Tensor::from_vec(&[c], sum_g)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_matches_bruteforce() {
        for input in 1usize..7 {
            for k in 0..3 {
                for stride in 1..3 {
                    for pad in 0..2 {
                        let output = (input + 2 * pad).saturating_sub(3) / stride + 1;
                        let (lo, hi) = tap_range(k, input, output, stride, pad);
                        for o in 0..output {
                            let i = (o * stride + k) as isize - pad as isize;
                            let valid = i >= 0 && (i as usize) < input;
                            assert_eq!(valid, (lo..hi).contains(&o), "k={k} in={input} s={stride} p={pad} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_conv_is_channel_mixing() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::from_vec(&[1, 2, 1, 1, 1], vec![10.0, 1.0]));
        let y = tape.conv3d(x, w, None, ConvGeometry::pointwise());
        assert_eq!(tape.value(y).data(), &[13.0, 24.0]);
    }

    #[test]
    fn transposed_output_shape() {
        let g = ConvGeometry::new([1, 3, 3], [1, 2, 2], [0, 1, 1]).with_output_padding([0, 1, 1]);
        assert_eq!(g.transposed_output_dims([8, 4, 4]), [8, 8, 8]);
        assert_eq!(g.output_dims([8, 8, 8]), [8, 4, 4]);
    }
}
