//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Parameters live in flat `f64` slices; each layer descriptor knows its
//! parameter count and reads `[weights..., bias...]` from its segment.
//! Feature maps are `[channel][row][column]`, one item at a time.

use crate::rng::RngStream;

/// 3x3 (or any odd-kernel) same-padding convolution descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        debug_assert!(kernel % 2 == 1, "kernel must be odd");
        Self { in_ch, out_ch, kernel }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// out[o, y, x] = bias[o] + sum_{i, dy, dx} w[o, i, dy, dx] *
    /// in[i, y + dy - r, x + dx - r], zero padded.
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize, out: &mut [f64]) {
        debug_assert_eq!(params.len(), self.param_len());
        debug_assert_eq!(input.len(), self.in_ch * h * w);
        debug_assert_eq!(out.len(), self.out_ch * h * w);
        let k = self.kernel;
        let r = (k / 2) as isize;
        let (weights, bias) = params.split_at(self.weight_len());
        for o in 0..self.out_ch {
            let out_plane = &mut out[o * h * w..(o + 1) * h * w];
            out_plane.fill(bias[o]);
            for i in 0..self.in_ch {
                let in_plane = &input[i * h * w..(i + 1) * h * w];
                let w_base = (o * self.in_ch + i) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = weights[w_base + dy * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let oy = dy as isize - r;
                        let ox = dx as isize - r;
                        let y_lo = (-oy).max(0) as usize;
                        let y_hi = ((h as isize - oy).min(h as isize)) as usize;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = ((w as isize - ox).min(w as isize)) as usize;
                        for y in y_lo..y_hi {
                            let src = ((y as isize + oy) as usize) * w;
                            let dst = y * w;
                            for x in x_lo..x_hi {
                                out_plane[dst + x] +=
                                    wv * in_plane[src + (x as isize + ox) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradients for upstream `dout`.
    pub fn backward_params(
        &self,
        input: &[f64],
        dout: &[f64],
        h: usize,
        w: usize,
        dparams: &mut [f64],
    ) {
        debug_assert_eq!(dparams.len(), self.param_len());
        let k = self.kernel;
        let r = (k / 2) as isize;
        let (dweights, dbias) = dparams.split_at_mut(self.weight_len());
        for o in 0..self.out_ch {
            let dout_plane = &dout[o * h * w..(o + 1) * h * w];
            dbias[o] += dout_plane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let in_plane = &input[i * h * w..(i + 1) * h * w];
                let w_base = (o * self.in_ch + i) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let oy = dy as isize - r;
                        let ox = dx as isize - r;
                        let y_lo = (-oy).max(0) as usize;
                        let y_hi = ((h as isize - oy).min(h as isize)) as usize;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = ((w as isize - ox).min(w as isize)) as usize;
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let src = ((y as isize + oy) as usize) * w;
                            let dst = y * w;
                            for x in x_lo..x_hi {
                                acc += dout_plane[dst + x]
                                    * in_plane[src + (x as isize + ox) as usize];
                            }
                        }
                        dweights[w_base + dy * k + dx] += acc;
                    }
                }
            }
        }
    }

    /// Accumulate input gradients for upstream `dout`.
    pub fn backward_input(
        &self,
        params: &[f64],
        dout: &[f64],
        h: usize,
        w: usize,
        dinput: &mut [f64],
    ) {
        debug_assert_eq!(dinput.len(), self.in_ch * h * w);
        let k = self.kernel;
        let r = (k / 2) as isize;
        let weights = &params[..self.weight_len()];
        for o in 0..self.out_ch {
            let dout_plane = &dout[o * h * w..(o + 1) * h * w];
            for i in 0..self.in_ch {
                let din_plane = &mut dinput[i * h * w..(i + 1) * h * w];
                let w_base = (o * self.in_ch + i) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = weights[w_base + dy * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let oy = dy as isize - r;
                        let ox = dx as isize - r;
                        let y_lo = (-oy).max(0) as usize;
                        let y_hi = ((h as isize - oy).min(h as isize)) as usize;
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = ((w as isize - ox).min(w as isize)) as usize;
                        for y in y_lo..y_hi {
                            let src = ((y as isize + oy) as usize) * w;
                            let dst = y * w;
                            for x in x_lo..x_hi {
                                din_plane[src + (x as isize + ox) as usize] +=
                                    wv * dout_plane[dst + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense layer descriptor, params laid out `[weights..., bias...]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self { in_features, out_features }
    }

    pub fn weight_len(&self) -> usize {
        self.in_features * self.out_features
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_features
    }

    pub fn forward(&self, params: &[f64], input: &[f64], out: &mut [f64]) {
        let (weights, bias) = params.split_at(self.weight_len());
        for o in 0..self.out_features {
            let row = &weights[o * self.in_features..(o + 1) * self.in_features];
            out[o] = bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    pub fn backward_params(&self, input: &[f64], dout: &[f64], dparams: &mut [f64]) {
        let (dweights, dbias) = dparams.split_at_mut(self.weight_len());
        for o in 0..self.out_features {
            dbias[o] += dout[o];
            let row = &mut dweights[o * self.in_features..(o + 1) * self.in_features];
            for (dw, x) in row.iter_mut().zip(input) {
                *dw += dout[o] * x;
            }
        }
    }
}

pub fn relu(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// din = dout gated by the pre-activation sign.
pub fn relu_backward(pre: &[f64], dout: &mut [f64]) {
    for (d, &p) in dout.iter_mut().zip(pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Multiply upstream by s(1-s) where `s` is the sigmoid output.
pub fn sigmoid_backward(s: &[f64], dout: &mut [f64]) {
    for (d, &y) in dout.iter_mut().zip(s) {
        *d *= y * (1.0 - y);
    }
}

/// 2x2 average pooling over every channel; h and w must be even.
pub fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let inp = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                dst[y * ow + x] =
                    0.25 * (inp[base] + inp[base + 1] + inp[base + w] + inp[base + w + 1]);
            }
        }
    }
}

pub fn avg_pool2_backward(dout: &[f64], c: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let dsrc = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dinput[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * dsrc[y * ow + x];
                let base = 2 * y * w + 2 * x;
                dst[base] += g;
                dst[base + 1] += g;
                dst[base + w] += g;
                dst[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling over every channel.
pub fn upsample2(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for ch in 0..c {
        let inp = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = inp[y * w + x];
                let base = 2 * y * ow + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for ch in 0..c {
        let dsrc = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dinput[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * ow + 2 * x;
                dst[y * w + x] +=
                    dsrc[base] + dsrc[base + 1] + dsrc[base + ow] + dsrc[base + ow + 1];
            }
        }
    }
}

/// Sinusoidal features of an integer timestep: D/2 sine then D/2 cosine
/// channels over geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize, out: &mut [f64]) {
    debug_assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let denom = (half - 1).max(1) as f64;
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / denom).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

/// Fan-in-scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(params: &mut [f64], fan_in: usize, rng: &mut RngStream) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for p in params.iter_mut() {
        *p = (2.0 * rng.next_f64() - 1.0) * bound;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadratic-cost evaluation used to cross-check the backward
    /// passes by central finite differences.
    fn conv_scalar_loss(conv: &Conv2d, params: &[f64], input: &[f64], h: usize, w: usize) -> f64 {
        let mut out = vec![0.0; conv.out_ch * h * w];
        conv.forward(params, input, h, w, &mut out);
        out.iter().enumerate().map(|(i, v)| (i as f64 * 0.01 + 0.3) * v).sum()
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let conv = Conv2d::new(1, 1, 3);
        let mut params = vec![0.0; conv.param_len()];
        params[4] = 1.0; // center tap
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 16];
        conv.forward(&params, &input, 4, 4, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_param_gradients_match_finite_differences() {
        let conv = Conv2d::new(2, 3, 3);
        let (h, w) = (5, 4);
        let mut rng = RngStream::new(21);
        let mut params = vec![0.0; conv.param_len()];
        fan_in_uniform(&mut params, conv.fan_in(), &mut rng);
        let input: Vec<f64> = (0..conv.in_ch * h * w).map(|_| rng.next_f64() - 0.5).collect();

        let upstream: Vec<f64> = (0..conv.out_ch * h * w).map(|i| i as f64 * 0.01 + 0.3).collect();
        let mut dparams = vec![0.0; conv.param_len()];
        conv.backward_params(&input, &upstream, h, w, &mut dparams);

        let eps = 1e-5;
        for i in (0..conv.param_len()).step_by(3) {
            let mut p = params.clone();
            p[i] += eps;
            let hi = conv_scalar_loss(&conv, &p, &input, h, w);
            p[i] -= 2.0 * eps;
            let lo = conv_scalar_loss(&conv, &p, &input, h, w);
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - dparams[i]).abs() < 1e-6, "param {i}: {fd} vs {}", dparams[i]);
        }
    }

    #[test]
    fn conv_input_gradients_match_finite_differences() {
        let conv = Conv2d::new(2, 2, 3);
        let (h, w) = (4, 4);
        let mut rng = RngStream::new(22);
        let mut params = vec![0.0; conv.param_len()];
        fan_in_uniform(&mut params, conv.fan_in(), &mut rng);
        let input: Vec<f64> = (0..conv.in_ch * h * w).map(|_| rng.next_f64() - 0.5).collect();
        let upstream: Vec<f64> = (0..conv.out_ch * h * w).map(|i| i as f64 * 0.01 + 0.3).collect();

        let mut dinput = vec![0.0; input.len()];
        conv.backward_input(&params, &upstream, h, w, &mut dinput);

        let eps = 1e-5;
        for i in (0..input.len()).step_by(5) {
            let mut x = input.clone();
            x[i] += eps;
            let hi = conv_scalar_loss(&conv, &params, &x, h, w);
            x[i] -= 2.0 * eps;
            let lo = conv_scalar_loss(&conv, &params, &x, h, w);
            let fd = (hi - lo) / (2.0 * eps);
            assert!((fd - dinput[i]).abs() < 1e-6, "input {i}: {fd} vs {}", dinput[i]);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let input: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let mut pooled = vec![0.0; 8];
        avg_pool2(&input, 2, 4, 4, &mut pooled);
        assert_eq!(pooled[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);

        let mut up = vec![0.0; 32];
        upsample2(&pooled, 2, 2, 2, &mut up);
        assert_eq!(up[0], pooled[0]);
        assert_eq!(up[1], pooled[0]);
        assert_eq!(up[4], pooled[0]);
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        timestep_embedding(3, 16, &mut a);
        timestep_embedding(4, 16, &mut b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        // First sine channel is sin(t), last cosine channel is near cos(0).
        assert!((a[0] - (3.0f64).sin()).abs() < 1e-12);
    }
}
