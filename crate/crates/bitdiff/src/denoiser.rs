//! Flip-probability predictors.
//!
//! A denoiser maps a noisy binary latent and a timestep to per-entry flip
//! probabilities in (0, 1). Two implementations: a cheating oracle that is
//! handed the true clean code (test double and upper bound), and a small
//! residual convolutional network with hand-written reverse-mode gradients.

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::rng::RngStream;
use crate::tensor::{BitTensor, Dims, ProbTensor};

/// Sigmoid outputs are clamped into [OUTPUT_CLAMP, 1 - OUTPUT_CLAMP] so
/// predictions never reach exactly 0 or 1.
const OUTPUT_CLAMP: f64 = 1e-12;

pub trait Denoiser {
    /// Predict the per-entry flip probability eps(z_t, t).
    fn predict(&self, z_t: &BitTensor, t: usize) -> Result<ProbTensor>;
}

/// Test-only denoiser granted the true clean code: returns the exact flip
/// pattern z_t XOR target, clamped away from {0, 1}.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    target: BitTensor,
    epsilon_clip: f64,
}

impl OracleDenoiser {
    pub fn new(target: BitTensor, epsilon_clip: f64) -> Self {
        Self { target, epsilon_clip }
    }

    pub fn target(&self) -> &BitTensor {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, z_t: &BitTensor, _t: usize) -> Result<ProbTensor> {
        let flips = z_t.xor(&self.target)?;
        let lo = self.epsilon_clip;
        let hi = 1.0 - self.epsilon_clip;
        let data = flips.data().iter().map(|&f| if f == 1 { hi } else { lo }).collect();
        ProbTensor::new(z_t.dims(), data)
    }
}

/// Architecture descriptor; the parameter count is a deterministic function
/// of these fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    /// Latent channels the network consumes and produces.
    pub in_channels: usize,
    /// Hidden feature width.
    pub hidden: usize,
    /// Number of residual blocks.
    pub blocks: usize,
    /// Odd convolution kernel size.
    pub kernel: usize,
    /// Sinusoidal time-embedding width (even).
    pub time_dim: usize,
    /// Feed bits as {-1, +1} instead of {0, 1}.
    pub recenter: bool,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { in_channels: 4, hidden: 16, blocks: 2, kernel: 3, time_dim: 16, recenter: true }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidRange("channel widths must be positive".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidRange(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidRange(format!(
                "time embedding dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    fn conv_in(&self) -> Conv2d {
        Conv2d::new(self.in_channels, self.hidden, self.kernel)
    }

    fn time_proj(&self) -> Linear {
        Linear::new(self.time_dim, self.hidden)
    }

    fn block_conv(&self) -> Conv2d {
        Conv2d::new(self.hidden, self.hidden, self.kernel)
    }

    fn conv_out(&self) -> Conv2d {
        Conv2d::new(self.hidden, self.in_channels, self.kernel)
    }

    fn block_len(&self) -> usize {
        self.time_proj().param_len() + 2 * self.block_conv().param_len()
    }

    pub fn param_count(&self) -> usize {
        self.conv_in().param_len() + self.blocks * self.block_len() + self.conv_out().param_len()
    }

    fn conv_out_offset(&self) -> usize {
        self.conv_in().param_len() + self.blocks * self.block_len()
    }
}

/// Residual convolutional flip-probability predictor.
///
/// conv_in -> [conv + time bias -> relu -> conv, residual add] x blocks
/// -> conv_out -> sigmoid. The output head is zero-initialized so a fresh
/// network predicts exactly 0.5 everywhere.
#[derive(Clone, Debug)]
pub struct ConvDenoiser {
    arch: DenoiserArch,
    params: Vec<f64>,
}

struct ForwardCache {
    emb: Vec<f64>,
    x0: Vec<f64>,
    /// Input feature map of each block (blocks + 1 entries; last is the
    /// conv_out input).
    h: Vec<Vec<f64>>,
    /// Pre-activation of each block's first convolution.
    u: Vec<Vec<f64>>,
    /// Unclamped sigmoid outputs.
    s: Vec<f64>,
}

impl ConvDenoiser {
    /// Fan-in-scaled uniform init everywhere except the zeroed output head.
    pub fn init(arch: DenoiserArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let mut off = 0;
        let conv_in = arch.conv_in();
        nn::fan_in_uniform(&mut params[off..off + conv_in.param_len()], conv_in.fan_in(), rng);
        off += conv_in.param_len();
        for _ in 0..arch.blocks {
            let tp = arch.time_proj();
            nn::fan_in_uniform(&mut params[off..off + tp.param_len()], tp.in_features, rng);
            off += tp.param_len();
            let bc = arch.block_conv();
            nn::fan_in_uniform(&mut params[off..off + bc.param_len()], bc.fan_in(), rng);
            off += bc.param_len();
            nn::fan_in_uniform(&mut params[off..off + bc.param_len()], bc.fan_in(), rng);
            off += bc.param_len();
        }
        // conv_out stays zero: sigmoid(0) = 0.5 exactly.
        debug_assert_eq!(off, arch.conv_out_offset());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector length {} does not match architecture ({} expected)",
                params.len(),
                arch.param_count()
            )));
        }
        if let Some(idx) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidRange(format!("parameter {idx} is not finite")));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, z_t: &BitTensor) -> Result<Dims> {
        let dims = z_t.dims();
        if dims.c != self.arch.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} channels, input has {}",
                self.arch.in_channels, dims.c
            )));
        }
        Ok(dims)
    }

    fn forward(&self, z_t: &BitTensor, t: usize) -> Result<(ForwardCache, ProbTensor)> {
        let dims = self.check_input(z_t)?;
        let (h, w) = (dims.h, dims.w);
        let plane = h * w;
        let arch = &self.arch;

        let x0: Vec<f64> = if arch.recenter {
            z_t.data().iter().map(|&v| 2.0 * f64::from(v) - 1.0).collect()
        } else {
            z_t.data().iter().map(|&v| f64::from(v)).collect()
        };
        let mut emb = vec![0.0; arch.time_dim];
        nn::timestep_embedding(t, arch.time_dim, &mut emb);

        let mut off = 0;
        let conv_in = arch.conv_in();
        let mut feat = vec![0.0; arch.hidden * plane];
        conv_in.forward(&self.params[off..off + conv_in.param_len()], &x0, h, w, &mut feat);
        off += conv_in.param_len();

        let mut h_maps = Vec::with_capacity(arch.blocks + 1);
        let mut u_maps = Vec::with_capacity(arch.blocks);
        for _ in 0..arch.blocks {
            h_maps.push(feat.clone());
            let tp = arch.time_proj();
            let mut tb = vec![0.0; arch.hidden];
            tp.forward(&self.params[off..off + tp.param_len()], &emb, &mut tb);
            off += tp.param_len();

            let bc = arch.block_conv();
            let mut u = vec![0.0; arch.hidden * plane];
            bc.forward(&self.params[off..off + bc.param_len()], &feat, h, w, &mut u);
            off += bc.param_len();
            for (c, &bias) in tb.iter().enumerate() {
                for v in &mut u[c * plane..(c + 1) * plane] {
                    *v += bias;
                }
            }
            let mut v = u.clone();
            nn::relu(&mut v);
            u_maps.push(u);

            let mut delta = vec![0.0; arch.hidden * plane];
            bc.forward(&self.params[off..off + bc.param_len()], &v, h, w, &mut delta);
            off += bc.param_len();
            for (f, d) in feat.iter_mut().zip(&delta) {
                *f += d;
            }
        }
        h_maps.push(feat.clone());

        let conv_out = arch.conv_out();
        let mut logits = vec![0.0; arch.in_channels * plane];
        conv_out.forward(&self.params[off..off + conv_out.param_len()], &feat, h, w, &mut logits);
        nn::sigmoid(&mut logits);
        let s = logits;
        let clamped: Vec<f64> =
            s.iter().map(|&v| v.clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP)).collect();
        let out = ProbTensor::new(dims, clamped)?;
        Ok((ForwardCache { emb, x0, h: h_maps, u: u_maps, s }, out))
    }

    /// Forward pass plus the gradient of `sum(upstream * output)` with
    /// respect to every parameter, by reverse-mode accumulation.
    pub fn predict_with_gradients(
        &self,
        z_t: &BitTensor,
        t: usize,
        upstream: &[f64],
    ) -> Result<(ProbTensor, Vec<f64>)> {
        let dims = self.check_input(z_t)?;
        if upstream.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "upstream length {} does not match output {}",
                upstream.len(),
                dims
            )));
        }
        let (cache, out) = self.forward(z_t, t)?;
        let (h, w) = (dims.h, dims.w);
        let plane = h * w;
        let arch = &self.arch;
        let mut dparams = vec![0.0; self.params.len()];

        // Through the sigmoid.
        let mut dlogits: Vec<f64> = upstream.to_vec();
        nn::sigmoid_backward(&cache.s, &mut dlogits);

        // Output head.
        let conv_out = arch.conv_out();
        let out_off = arch.conv_out_offset();
        conv_out.backward_params(
            &cache.h[arch.blocks],
            &dlogits,
            h,
            w,
            &mut dparams[out_off..out_off + conv_out.param_len()],
        );
        let mut dfeat = vec![0.0; arch.hidden * plane];
        conv_out.backward_input(
            &self.params[out_off..out_off + conv_out.param_len()],
            &dlogits,
            h,
            w,
            &mut dfeat,
        );

        // Blocks in reverse.
        let conv_in_len = arch.conv_in().param_len();
        for b in (0..arch.blocks).rev() {
            let block_off = conv_in_len + b * arch.block_len();
            let tp = arch.time_proj();
            let bc = arch.block_conv();
            let tp_off = block_off;
            let c1_off = tp_off + tp.param_len();
            let c2_off = c1_off + bc.param_len();

            let u = &cache.u[b];
            let mut v = u.clone();
            nn::relu(&mut v);

            // Second conv of the block.
            bc.backward_params(&v, &dfeat, h, w, &mut dparams[c2_off..c2_off + bc.param_len()]);
            let mut dv = vec![0.0; arch.hidden * plane];
            bc.backward_input(&self.params[c2_off..c2_off + bc.param_len()], &dfeat, h, w, &mut dv);
            nn::relu_backward(u, &mut dv);

            // Time bias: per-channel sum of the pre-activation gradient.
            let dtb: Vec<f64> =
                (0..arch.hidden).map(|c| dv[c * plane..(c + 1) * plane].iter().sum()).collect();
            tp.backward_params(&cache.emb, &dtb, &mut dparams[tp_off..tp_off + tp.param_len()]);

            // First conv of the block; add the residual skip afterwards.
            bc.backward_params(
                &cache.h[b],
                &dv,
                h,
                w,
                &mut dparams[c1_off..c1_off + bc.param_len()],
            );
            let mut dskip = vec![0.0; arch.hidden * plane];
            bc.backward_input(&self.params[c1_off..c1_off + bc.param_len()], &dv, h, w, &mut dskip);
            for (df, ds) in dfeat.iter_mut().zip(&dskip) {
                *df += ds;
            }
        }

        // Stem.
        let conv_in = arch.conv_in();
        conv_in.backward_params(&cache.x0, &dfeat, h, w, &mut dparams[0..conv_in_len]);

        Ok((out, dparams))
    }
}

impl Denoiser for ConvDenoiser {
    fn predict(&self, z_t: &BitTensor, t: usize) -> Result<ProbTensor> {
        self.forward(z_t, t).map(|(_, out)| out)
    }
}
