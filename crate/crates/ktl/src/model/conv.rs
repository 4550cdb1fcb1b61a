//! Dense f64 tensors and 2D convolution forward/backward. Loops are ordered
//! so the innermost dimension is contiguous in x and auto-vectorizes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let start = (c * self.h + y) * self.w;
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [f64] {
        let start = (c * self.h + y) * self.w;
        &mut self.data[start..start + self.w]
    }

    /// Feature vector across channels at one spatial cell.
    pub fn channel_vec(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.at(c, y, x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Tanh after the convolution; final head layers are linear.
    pub activated: bool,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        // Same-padding: ceil(in/stride).
        (in_size + self.stride - 1) / self.stride
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// Layout: [out_c][in_c][ky][kx].
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.out_c],
        }
    }

    /// Xavier-uniform initialization.
    pub fn init(spec: ConvSpec, rng: &mut impl rand::Rng) -> Self {
        let fan_in = (spec.in_c * spec.kernel * spec.kernel) as f64;
        let fan_out = (spec.out_c * spec.kernel * spec.kernel) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let weight = (0..spec.weight_len())
            .map(|_| rng.gen_range(-a..a))
            .collect();
        let bias = (0..spec.out_c).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Self { spec, weight, bias }
    }

    #[inline]
    fn w_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        let k = self.spec.kernel;
        self.weight[((oc * self.spec.in_c + ic) * k + ky) * k + kx]
    }
}

/// Gradient buffers matching one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.weight {
            *a *= s;
        }
        for a in &mut self.bias {
            *a *= s;
        }
    }
}

/// Valid output-x range so that `ox*stride + kx - pad` stays inside `[0, iw)`.
#[inline]
fn ox_range(ow: usize, iw: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    // ox*stride + kx - pad <= iw-1  =>  ox <= (iw-1+pad-kx)/stride
    let hi_inc = (iw as isize - 1 + pad as isize - kx as isize) / stride as isize;
    if hi_inc < lo as isize {
        (0, 0)
    } else {
        ((lo).min(ow), ((hi_inc as usize) + 1).min(ow))
    }
}

pub fn conv_forward(input: &Tensor, layer: &ConvLayer) -> Tensor {
    let s = layer.spec;
    debug_assert_eq!(input.c, s.in_c);
    if s.kernel == 3 && s.stride == 1 {
        return conv3x3_s1_forward(input, layer);
    }
    let oh = s.out_size(input.h);
    let ow = s.out_size(input.w);
    let pad = s.padding();
    let mut out = Tensor::zeros(s.out_c, oh, ow);

    for oc in 0..s.out_c {
        let b = layer.bias[oc];
        for y in 0..oh {
            for v in out.row_mut(oc, y) {
                *v = b;
            }
        }
        for ic in 0..s.in_c {
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    let w = layer.w_at(oc, ic, ky, kx);
                    let (x0, x1) = ox_range(ow, input.w, s.stride, kx, pad);
                    if x1 <= x0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= input.h {
                            continue;
                        }
                        let in_row = input.row(ic, iy as usize);
                        let out_start = (oc * oh + oy) * ow;
                        let out_row = &mut out.data[out_start + x0..out_start + x1];
                        if s.stride == 1 {
                            let off = (x0 + kx) as isize - pad as isize;
                            let in_slice = &in_row[off as usize..off as usize + (x1 - x0)];
                            for (o, i) in out_row.iter_mut().zip(in_slice) {
                                *o += w * i;
                            }
                        } else {
                            for (idx, o) in out_row.iter_mut().enumerate() {
                                let ix =
                                    ((x0 + idx) * s.stride + kx) as isize - pad as isize;
                                *o += w * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    if s.activated {
        for v in &mut out.data {
            *v = v.tanh();
        }
    }
    out
}

/// Same-padded 3×3 stride-1 convolution, the hot path: all three taps of a
/// kernel row are applied in one sweep over each output row.
fn conv3x3_s1_forward(input: &Tensor, layer: &ConvLayer) -> Tensor {
    let s = layer.spec;
    let (h, w) = (input.h, input.w);
    let mut out = Tensor::zeros(s.out_c, h, w);
    for oc in 0..s.out_c {
        let b = layer.bias[oc];
        for y in 0..h {
            for v in out.row_mut(oc, y) {
                *v = b;
            }
        }
        for ic in 0..s.in_c {
            for oy in 0..h {
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let w0 = layer.w_at(oc, ic, ky, 0);
                    let w1 = layer.w_at(oc, ic, ky, 1);
                    let w2 = layer.w_at(oc, ic, ky, 2);
                    let in_start = (ic * h + iy as usize) * w;
                    let out_start = (oc * h + oy) * w;
                    let in_row = &input.data[in_start..in_start + w];
                    let out_row = &mut out.data[out_start..out_start + w];
                    out_row[0] += w1 * in_row[0] + w2 * in_row[1];
                    let n = w - 2;
                    {
                        let (a, b, c) = (&in_row[..n], &in_row[1..1 + n], &in_row[2..2 + n]);
                        let dst = &mut out_row[1..1 + n];
                        for i in 0..n {
                            dst[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
                        }
                    }
                    out_row[w - 1] += w0 * in_row[w - 2] + w1 * in_row[w - 1];
                }
            }
        }
    }
    if s.activated {
        for v in &mut out.data {
            *v = v.tanh();
        }
    }
    out
}

fn conv3x3_s1_backward(
    input: &Tensor,
    layer: &ConvLayer,
    d_out: &Tensor,
    grad: &mut ConvGrad,
    need_d_input: bool,
) -> Option<Tensor> {
    let s = layer.spec;
    let (h, w) = (input.h, input.w);
    let mut d_input = need_d_input.then(|| Tensor::zeros(s.in_c, h, w));
    for oc in 0..s.out_c {
        let mut db = 0.0;
        for oy in 0..h {
            for &g in d_out.row(oc, oy) {
                db += g;
            }
        }
        grad.bias[oc] += db;

        for ic in 0..s.in_c {
            let mut dw = [0.0f64; 9];
            for oy in 0..h {
                let g_start = (oc * h + oy) * w;
                let g_row = &d_out.data[g_start..g_start + w];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let in_start = (ic * h + iy as usize) * w;
                    let in_row = &input.data[in_start..in_start + w];
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    a1 += g_row[0] * in_row[0];
                    a2 += g_row[0] * in_row[1];
                    let n = w - 2;
                    {
                        let g = &g_row[1..1 + n];
                        let (pa, pb, pc) = (&in_row[..n], &in_row[1..1 + n], &in_row[2..2 + n]);
                        for i in 0..n {
                            a0 += g[i] * pa[i];
                            a1 += g[i] * pb[i];
                            a2 += g[i] * pc[i];
                        }
                    }
                    let g = g_row[w - 1];
                    a0 += g * in_row[w - 2];
                    a1 += g * in_row[w - 1];
                    dw[ky * 3] += a0;
                    dw[ky * 3 + 1] += a1;
                    dw[ky * 3 + 2] += a2;
                }
            }
            let base = (oc * s.in_c + ic) * 9;
            for t in 0..9 {
                grad.weight[base + t] += dw[t];
            }

            if let Some(di) = d_input.as_mut() {
                // d_in[iy][x] += Σ_ky Σ_kx w[ky][kx]·g[iy−ky+1][x−kx+1]:
                // gather form, one sweep per (ky, input row).
                for iy in 0..h {
                    let di_start = (ic * h + iy) * w;
                    for ky in 0..3usize {
                        let oy = iy as isize - (ky as isize - 1);
                        if oy < 0 || oy as usize >= h {
                            continue;
                        }
                        let w0 = layer.w_at(oc, ic, ky, 0);
                        let w1 = layer.w_at(oc, ic, ky, 1);
                        let w2 = layer.w_at(oc, ic, ky, 2);
                        let g_start = (oc * h + oy as usize) * w;
                        let g_row = &d_out.data[g_start..g_start + w];
                        let di_row = &mut di.data[di_start..di_start + w];
                        di_row[0] += w1 * g_row[0] + w0 * g_row[1];
                        let n = w - 2;
                        {
                            let (a, b, c) =
                                (&g_row[..n], &g_row[1..1 + n], &g_row[2..2 + n]);
                            let dst = &mut di_row[1..1 + n];
                            for i in 0..n {
                                dst[i] += w2 * a[i] + w1 * b[i] + w0 * c[i];
                            }
                        }
                        di_row[w - 1] += w2 * g_row[w - 2] + w1 * g_row[w - 1];
                    }
                }
            }
        }
    }
    d_input
}

/// Backward pass for one conv layer.
///
/// `output` must be the forward result (post-activation when activated);
/// `d_out` is the loss gradient w.r.t. that output and is consumed in place
/// when the layer is activated. Returns the gradient w.r.t. the input when
/// `need_d_input` is set.
pub fn conv_backward(
    input: &Tensor,
    layer: &ConvLayer,
    output: &Tensor,
    d_out: &mut Tensor,
    grad: &mut ConvGrad,
    need_d_input: bool,
) -> Option<Tensor> {
    let s = layer.spec;
    let (oh, ow) = (output.h, output.w);
    let pad = s.padding();

    if s.activated {
        // d/dz tanh(z) = 1 - tanh(z)^2, and output stores tanh(z).
        for (g, o) in d_out.data.iter_mut().zip(&output.data) {
            *g *= 1.0 - o * o;
        }
    }

    if s.kernel == 3 && s.stride == 1 {
        return conv3x3_s1_backward(input, layer, d_out, grad, need_d_input);
    }

    for oc in 0..s.out_c {
        let mut db = 0.0;
        for oy in 0..oh {
            for &g in d_out.row(oc, oy) {
                db += g;
            }
        }
        grad.bias[oc] += db;
    }

    let mut d_input = need_d_input.then(|| Tensor::zeros(s.in_c, input.h, input.w));

    for oc in 0..s.out_c {
        for ic in 0..s.in_c {
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    let (x0, x1) = ox_range(ow, input.w, s.stride, kx, pad);
                    if x1 <= x0 {
                        continue;
                    }
                    let mut dw = 0.0;
                    let w = layer.w_at(oc, ic, ky, kx);
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= input.h {
                            continue;
                        }
                        let iy = iy as usize;
                        let g_start = (oc * oh + oy) * ow;
                        let g_row = &d_out.data[g_start + x0..g_start + x1];
                        let in_row = input.row(ic, iy);
                        if s.stride == 1 {
                            // ox_range guarantees base stays in-bounds.
                            let base = (x0 + kx) as isize - pad as isize;
                            let in_slice = &in_row[base as usize..base as usize + (x1 - x0)];
                            for (g, i) in g_row.iter().zip(in_slice) {
                                dw += g * i;
                            }
                            if let Some(di) = d_input.as_mut() {
                                let di_start = (ic * input.h + iy) * input.w;
                                let di_slice = &mut di.data
                                    [di_start + base as usize..di_start + base as usize + (x1 - x0)];
                                for (d, g) in di_slice.iter_mut().zip(g_row) {
                                    *d += w * g;
                                }
                            }
                        } else {
                            for (idx, g) in g_row.iter().enumerate() {
                                let ix = ((x0 + idx) * s.stride + kx) as isize - pad as isize;
                                dw += g * in_row[ix as usize];
                                if let Some(di) = d_input.as_mut() {
                                    *di.at_mut(ic, iy, ix as usize) += w * g;
                                }
                            }
                        }
                    }
                    let k = s.kernel;
                    grad.weight[((oc * s.in_c + ic) * k + ky) * k + kx] += dw;
                }
            }
        }
    }
    d_input
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "tensor", 0);
        let mut t = Tensor::zeros(c, h, w);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Reference conv: direct quadruple loop, no slicing tricks.
    fn conv_ref(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let s = layer.spec;
        let oh = s.out_size(input.h);
        let ow = s.out_size(input.w);
        let pad = s.padding() as isize;
        let mut out = Tensor::zeros(s.out_c, oh, ow);
        for oc in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias[oc];
                    for ic in 0..s.in_c {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky) as isize - pad;
                                let ix = (ox * s.stride + kx) as isize - pad;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < input.h
                                    && (ix as usize) < input.w
                                {
                                    acc += layer.w_at(oc, ic, ky, kx)
                                        * input.at(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(oc, oy, ox) = if s.activated { acc.tanh() } else { acc };
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_reference_various_shapes() {
        for &(in_c, out_c, kernel, stride, h, w, act) in &[
            (1, 3, 3, 1, 8, 8, true),
            (2, 4, 3, 2, 9, 7, false),
            (3, 2, 1, 1, 5, 6, true),
            (2, 2, 3, 2, 8, 8, true),
        ] {
            let spec = ConvSpec {
                in_c,
                out_c,
                kernel,
                stride,
                activated: act,
            };
            let mut rng = rng_for(42, "conv", (in_c * out_c * kernel) as u64);
            let layer = ConvLayer::init(spec, &mut rng);
            let input = rand_tensor(in_c, h, w, 7);
            let fast = conv_forward(&input, &layer);
            let slow = conv_ref(&input, &layer);
            assert_eq!(fast.h, slow.h);
            assert_eq!(fast.w, slow.w);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for stride in [2usize, 1] {
            backward_fd_case(stride);
        }
    }

    fn backward_fd_case(stride: usize) {
        let spec = ConvSpec {
            in_c: 2,
            out_c: 3,
            kernel: 3,
            stride,
            activated: true,
        };
        let mut rng = rng_for(11, "convbwd", stride as u64);
        let layer = ConvLayer::init(spec, &mut rng);
        let input = rand_tensor(2, 6, 6, 13);

        // Scalar loss: weighted sum of outputs.
        let out = conv_forward(&input, &layer);
        let weights: Vec<f64> = (0..out.data.len())
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();

        let mut d_out = out.clone();
        d_out.data.copy_from_slice(&weights);
        let mut grad = ConvGrad::zeros_like(&layer);
        let d_in = conv_backward(&input, &layer, &out, &mut d_out, &mut grad, true).unwrap();

        let loss = |layer: &ConvLayer, input: &Tensor| -> f64 {
            conv_forward(input, layer)
                .data
                .iter()
                .zip(&weights)
                .map(|(o, w)| o * w)
                .sum()
        };
        let h = 1e-6;
        for wi in (0..layer.weight.len()).step_by(5) {
            let mut lp = layer.clone();
            lp.weight[wi] += h;
            let mut lm = layer.clone();
            lm.weight[wi] -= h;
            let fd = (loss(&lp, &input) - loss(&lm, &input)) / (2.0 * h);
            assert!(
                (fd - grad.weight[wi]).abs() < 1e-6 * (1.0 + fd.abs()),
                "weight {wi}: fd {fd} vs {got}",
                got = grad.weight[wi]
            );
        }
        for bi in 0..layer.bias.len() {
            let mut lp = layer.clone();
            lp.bias[bi] += h;
            let mut lm = layer.clone();
            lm.bias[bi] -= h;
            let fd = (loss(&lp, &input) - loss(&lm, &input)) / (2.0 * h);
            assert!((fd - grad.bias[bi]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for ii in (0..input.data.len()).step_by(7) {
            let mut ip = input.clone();
            ip.data[ii] += h;
            let mut im = input.clone();
            im.data[ii] -= h;
            let fd = (loss(&layer, &ip) - loss(&layer, &im)) / (2.0 * h);
            assert!((fd - d_in.data[ii]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
