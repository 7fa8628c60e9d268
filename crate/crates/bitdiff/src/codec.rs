//! Image <-> binary latent codecs.
//!
//! Two kinds: a deterministic bit-plane codec (average-pool, quantize,
//! Gray-code the level into bit channels) that needs no training, and a
//! small learned binarizing autoencoder trained with MSE through a
//! straight-through estimator at the sampling step.

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};
use crate::rng::RngStream;
use crate::tensor::{BitTensor, Dims, Image, ProbTensor};
use crate::training::{Optimizer, TrainConfig};
use std::fmt;

const OUTPUT_CLAMP: f64 = 1e-12;

/// Stream label for autoencoder training under a user seed.
pub const STREAM_TRAIN_AE: u64 = 0x6165;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    /// z ~ B(y).
    Sample,
    /// z = (y >= 0.5); the tie at exactly 0.5 resolves to 1.
    Threshold,
}

impl fmt::Display for BinarizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinarizeMode::Sample => write!(f, "sample"),
            BinarizeMode::Threshold => write!(f, "threshold"),
        }
    }
}

impl std::str::FromStr for BinarizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(BinarizeMode::Sample),
            "threshold" => Ok(BinarizeMode::Threshold),
            other => Err(Error::Config(format!("unknown binarize mode '{other}'"))),
        }
    }
}

/// Turn encoder probabilities into hard bits.
pub fn binarize(y: &ProbTensor, mode: BinarizeMode, rng: &mut RngStream) -> BitTensor {
    match mode {
        BinarizeMode::Sample => y.sample(rng),
        BinarizeMode::Threshold => {
            let data = y.data().iter().map(|&p| u8::from(p >= 0.5)).collect();
            BitTensor::new(y.dims(), data).expect("thresholded bits are binary")
        }
    }
}

/// Training-free reference codec: k-fold average pooling, quantization to
/// 2^bits levels, Gray-coded bit planes (MSB first). A single latent bit
/// flip perturbs the decoded intensity by at most one quantization step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitplaneCodec {
    bits: usize,
    downsample: usize,
}

impl BitplaneCodec {
    pub fn new(bits: usize, downsample: usize) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::InvalidRange(format!("bits per pixel must be in [1, 16], got {bits}")));
        }
        if downsample == 0 {
            return Err(Error::InvalidRange("downsample factor must be >= 1".into()));
        }
        Ok(Self { bits, downsample })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        let k = self.downsample;
        if image.h % k != 0 || image.w % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {image} not divisible by downsample factor {k}"
            )));
        }
        Ok(Dims::new(image.c * self.bits, image.h / k, image.w / k))
    }

    pub fn encode(&self, x: &Image) -> Result<ProbTensor> {
        let latent = self.latent_dims(x.dims())?;
        let (c, h, w) = (x.dims().c, x.dims().h, x.dims().w);
        let k = self.downsample;
        let (lh, lw) = (latent.h, latent.w);
        let levels = 1usize << self.bits;
        let mut out = vec![0.0; latent.len()];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            for ly in 0..lh {
                for lx in 0..lw {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += plane[(ly * k + dy) * w + (lx * k + dx)];
                        }
                    }
                    let pooled = acc / (k * k) as f64;
                    let level =
                        ((pooled * levels as f64).floor() as usize).min(levels - 1);
                    let gray = level ^ (level >> 1);
                    for j in 0..self.bits {
                        let bit = (gray >> (self.bits - 1 - j)) & 1;
                        out[((ci * self.bits + j) * lh + ly) * lw + lx] = bit as f64;
                    }
                }
            }
        }
        ProbTensor::new(latent, out)
    }

    pub fn decode(&self, z: &BitTensor) -> Result<Image> {
        let dims = z.dims();
        if dims.c % self.bits != 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent channels {} not a multiple of {} bits",
                dims.c, self.bits
            )));
        }
        let c = dims.c / self.bits;
        let k = self.downsample;
        let (lh, lw) = (dims.h, dims.w);
        let (h, w) = (lh * k, lw * k);
        let levels = 1usize << self.bits;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for ly in 0..lh {
                for lx in 0..lw {
                    let mut gray = 0usize;
                    for j in 0..self.bits {
                        let bit = z.data()[((ci * self.bits + j) * lh + ly) * lw + lx];
                        gray = (gray << 1) | bit as usize;
                    }
                    let level = gray_to_binary(gray, self.bits);
                    let intensity = (level as f64 + 0.5) / levels as f64;
                    for dy in 0..k {
                        for dx in 0..k {
                            out[(ci * h + ly * k + dy) * w + lx * k + dx] = intensity;
                        }
                    }
                }
            }
        }
        Image::new(Dims::new(c, h, w), out)
    }
}

/// Gray code of a level: g = n XOR (n >> 1).
pub fn binary_to_gray(n: usize) -> usize {
    n ^ (n >> 1)
}

/// Inverse Gray code by prefix XOR.
pub fn gray_to_binary(gray: usize, bits: usize) -> usize {
    let mut n = gray;
    let mut shift = 1;
    while shift < bits {
        n ^= n >> shift;
        shift <<= 1;
    }
    n
}

/// Architecture of the learned codec networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LearnedArch {
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Spatial compression rate; must be a power of two.
    pub downsample: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl LearnedArch {
    fn stages(&self) -> usize {
        (self.downsample as f64).log2().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidRange("channel counts must be positive".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::InvalidRange(format!(
                "downsample factor must be a power of two, got {}",
                self.downsample
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidRange(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    fn enc_layers(&self) -> Vec<Conv2d> {
        let mut layers = vec![Conv2d::new(self.image_channels, self.hidden, self.kernel)];
        for _ in 0..self.stages() {
            layers.push(Conv2d::new(self.hidden, self.hidden, self.kernel));
        }
        layers.push(Conv2d::new(self.hidden, self.latent_channels, self.kernel));
        layers
    }

    fn dec_layers(&self) -> Vec<Conv2d> {
        let mut layers = vec![Conv2d::new(self.latent_channels, self.hidden, self.kernel)];
        for _ in 0..self.stages() {
            layers.push(Conv2d::new(self.hidden, self.hidden, self.kernel));
        }
        layers.push(Conv2d::new(self.hidden, self.image_channels, self.kernel));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.enc_layers().iter().chain(self.dec_layers().iter()).map(Conv2d::param_len).sum()
    }
}

/// Learned binarizing autoencoder: conv encoder with sigmoid head, Bernoulli
/// (or threshold) binarization, conv decoder with sigmoid output.
#[derive(Clone, Debug)]
pub struct LearnedCodec {
    arch: LearnedArch,
    params: Vec<f64>,
}

struct EncCache {
    /// Inputs of each conv layer in order (x, relu/pool outputs...).
    conv_inputs: Vec<Vec<f64>>,
    /// Pre-activations of every relu.
    pre_acts: Vec<Vec<f64>>,
    /// Unclamped sigmoid output.
    y_sig: Vec<f64>,
}

struct DecCache {
    conv_inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    xhat_sig: Vec<f64>,
}

impl LearnedCodec {
    /// Fan-in uniform init; both sigmoid heads are zeroed so a fresh encoder
    /// emits exactly 0.5 everywhere.
    pub fn init(arch: LearnedArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let enc = arch.enc_layers();
        let dec = arch.dec_layers();
        let mut off = 0;
        for (li, layer) in enc.iter().chain(dec.iter()).enumerate() {
            let len = layer.param_len();
            let is_head = li == enc.len() - 1 || li == enc.len() + dec.len() - 1;
            if !is_head {
                nn::fan_in_uniform(&mut params[off..off + len], layer.fan_in(), rng);
            }
            off += len;
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: LearnedArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector length {} does not match architecture ({} expected)",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> LearnedArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        let k = self.arch.downsample;
        if image.h % k != 0 || image.w % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {image} not divisible by downsample factor {k}"
            )));
        }
        Ok(Dims::new(self.arch.latent_channels, image.h / k, image.w / k))
    }

    fn check_image(&self, x: &Image) -> Result<Dims> {
        if x.dims().c != self.arch.image_channels {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} channels, image has {}",
                self.arch.image_channels,
                x.dims().c
            )));
        }
        self.latent_dims(x.dims())
    }

    fn encode_cached(&self, x: &Image) -> Result<(EncCache, ProbTensor)> {
        let latent = self.check_image(x)?;
        let arch = &self.arch;
        let layers = arch.enc_layers();
        let stages = arch.stages();
        let (mut h, mut w) = (x.dims().h, x.dims().w);

        let mut conv_inputs: Vec<Vec<f64>> = vec![x.data().to_vec()];
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(stages + 1);
        let mut off = 0;

        // Stem conv + relu at full resolution.
        let mut cur = {
            let layer = layers[0];
            let mut a = vec![0.0; layer.out_ch * h * w];
            layer.forward(&self.params[off..off + layer.param_len()], &conv_inputs[0], h, w, &mut a);
            off += layer.param_len();
            pre_acts.push(a.clone());
            nn::relu(&mut a);
            a
        };
        // Downsampling stages: conv -> relu -> avg pool.
        for s in 0..stages {
            conv_inputs.push(cur.clone());
            let layer = layers[1 + s];
            let mut a = vec![0.0; layer.out_ch * h * w];
            layer.forward(&self.params[off..off + layer.param_len()], &cur, h, w, &mut a);
            off += layer.param_len();
            pre_acts.push(a.clone());
            nn::relu(&mut a);
            let mut pooled = vec![0.0; layer.out_ch * (h / 2) * (w / 2)];
            nn::avg_pool2(&a, layer.out_ch, h, w, &mut pooled);
            h /= 2;
            w /= 2;
            cur = pooled;
        }
        // Sigmoid head at latent resolution.
        conv_inputs.push(cur.clone());
        let head = layers[stages + 1];
        let mut logits = vec![0.0; head.out_ch * h * w];
        head.forward(&self.params[off..off + head.param_len()], &cur, h, w, &mut logits);
        nn::sigmoid(&mut logits);
        let y_sig = logits;
        let clamped: Vec<f64> =
            y_sig.iter().map(|&v| v.clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP)).collect();
        let y = ProbTensor::new(latent, clamped)?;
        Ok((EncCache { conv_inputs, pre_acts, y_sig }, y))
    }

    pub fn encode(&self, x: &Image) -> Result<ProbTensor> {
        self.encode_cached(x).map(|(_, y)| y)
    }

    fn decode_cached(&self, z_data: &[f64], latent: Dims) -> Result<(DecCache, Image)> {
        if latent.c != self.arch.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {} channels, latent has {}",
                self.arch.latent_channels, latent.c
            )));
        }
        let arch = &self.arch;
        let layers = arch.dec_layers();
        let stages = arch.stages();
        let (mut h, mut w) = (latent.h, latent.w);
        let mut off: usize = arch.enc_layers().iter().map(Conv2d::param_len).sum();

        let mut conv_inputs: Vec<Vec<f64>> = vec![z_data.to_vec()];
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(stages + 1);

        let mut cur = {
            let layer = layers[0];
            let mut a = vec![0.0; layer.out_ch * h * w];
            layer.forward(&self.params[off..off + layer.param_len()], z_data, h, w, &mut a);
            off += layer.param_len();
            pre_acts.push(a.clone());
            nn::relu(&mut a);
            a
        };
        for s in 0..stages {
            let layer = layers[1 + s];
            let mut up = vec![0.0; layer.in_ch * h * 2 * w * 2];
            nn::upsample2(&cur, layer.in_ch, h, w, &mut up);
            h *= 2;
            w *= 2;
            conv_inputs.push(up.clone());
            let mut a = vec![0.0; layer.out_ch * h * w];
            layer.forward(&self.params[off..off + layer.param_len()], &up, h, w, &mut a);
            off += layer.param_len();
            pre_acts.push(a.clone());
            nn::relu(&mut a);
            cur = a;
        }
        conv_inputs.push(cur.clone());
        let head = layers[stages + 1];
        let mut logits = vec![0.0; head.out_ch * h * w];
        head.forward(&self.params[off..off + head.param_len()], &cur, h, w, &mut logits);
        nn::sigmoid(&mut logits);
        let xhat_sig = logits;
        let image = Image::new(Dims::new(arch.image_channels, h, w), xhat_sig.clone())?;
        Ok((DecCache { conv_inputs, pre_acts, xhat_sig }, image))
    }

    pub fn decode(&self, z: &BitTensor) -> Result<Image> {
        let z_data: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
        self.decode_cached(&z_data, z.dims()).map(|(_, img)| img)
    }

    /// One training step's loss and parameter gradients: encode, binarize by
    /// sampling (straight-through gradient), decode, mean squared error.
    fn mse_step(&self, x: &Image, rng: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let latent = self.check_image(x)?;
        let (enc_cache, y) = self.encode_cached(x)?;
        let z = y.sample(rng);
        let z_data: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
        let (dec_cache, xhat) = self.decode_cached(&z_data, latent)?;

        let n = x.dims().len() as f64;
        let loss = x
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;

        let mut dparams = vec![0.0; self.params.len()];
        let mut dxhat: Vec<f64> =
            xhat.data().iter().zip(x.data()).map(|(b, a)| 2.0 * (b - a) / n).collect();
        nn::sigmoid_backward(&dec_cache.xhat_sig, &mut dxhat);
        let dz = self.decoder_backward(&dec_cache, latent, dxhat, &mut dparams);
        // Straight-through: gradient passes unchanged through the sampling.
        let mut dy = dz;
        nn::sigmoid_backward(&enc_cache.y_sig, &mut dy);
        self.encoder_backward(&enc_cache, x.dims(), dy, &mut dparams);
        Ok((loss, dparams))
    }

    fn decoder_backward(
        &self,
        cache: &DecCache,
        latent: Dims,
        dlogits: Vec<f64>,
        dparams: &mut [f64],
    ) -> Vec<f64> {
        let arch = &self.arch;
        let layers = arch.dec_layers();
        let stages = arch.stages();
        let enc_len: usize = arch.enc_layers().iter().map(Conv2d::param_len).sum();
        // Offsets of each decoder layer.
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = enc_len;
        for layer in &layers {
            offsets.push(off);
            off += layer.param_len();
        }
        let (full_h, full_w) = (latent.h << stages, latent.w << stages);

        // Head.
        let head = layers[stages + 1];
        let head_off = offsets[stages + 1];
        head.backward_params(
            &cache.conv_inputs[stages + 1],
            &dlogits,
            full_h,
            full_w,
            &mut dparams[head_off..head_off + head.param_len()],
        );
        let mut dcur = vec![0.0; head.in_ch * full_h * full_w];
        head.backward_input(
            &self.params[head_off..head_off + head.param_len()],
            &dlogits,
            full_h,
            full_w,
            &mut dcur,
        );

        let (mut h, mut w) = (full_h, full_w);
        for s in (0..stages).rev() {
            let layer = layers[1 + s];
            let off = offsets[1 + s];
            nn::relu_backward(&cache.pre_acts[1 + s], &mut dcur);
            layer.backward_params(
                &cache.conv_inputs[1 + s],
                &dcur,
                h,
                w,
                &mut dparams[off..off + layer.param_len()],
            );
            let mut dup = vec![0.0; layer.in_ch * h * w];
            layer.backward_input(&self.params[off..off + layer.param_len()], &dcur, h, w, &mut dup);
            h /= 2;
            w /= 2;
            let mut dprev = vec![0.0; layer.in_ch * h * w];
            nn::upsample2_backward(&dup, layer.in_ch, h, w, &mut dprev);
            dcur = dprev;
        }

        let stem = layers[0];
        let off = offsets[0];
        nn::relu_backward(&cache.pre_acts[0], &mut dcur);
        stem.backward_params(
            &cache.conv_inputs[0],
            &dcur,
            latent.h,
            latent.w,
            &mut dparams[off..off + stem.param_len()],
        );
        let mut dz = vec![0.0; stem.in_ch * latent.h * latent.w];
        stem.backward_input(&self.params[off..off + stem.param_len()], &dcur, latent.h, latent.w, &mut dz);
        dz
    }

    fn encoder_backward(
        &self,
        cache: &EncCache,
        image: Dims,
        dlogits: Vec<f64>,
        dparams: &mut [f64],
    ) {
        let arch = &self.arch;
        let layers = arch.enc_layers();
        let stages = arch.stages();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for layer in &layers {
            offsets.push(off);
            off += layer.param_len();
        }
        let (lat_h, lat_w) = (image.h >> stages, image.w >> stages);

        // Head at latent resolution.
        let head = layers[stages + 1];
        let head_off = offsets[stages + 1];
        head.backward_params(
            &cache.conv_inputs[stages + 1],
            &dlogits,
            lat_h,
            lat_w,
            &mut dparams[head_off..head_off + head.param_len()],
        );
        let mut dcur = vec![0.0; head.in_ch * lat_h * lat_w];
        head.backward_input(
            &self.params[head_off..head_off + head.param_len()],
            &dlogits,
            lat_h,
            lat_w,
            &mut dcur,
        );

        let (mut h, mut w) = (lat_h, lat_w);
        for s in (0..stages).rev() {
            let layer = layers[1 + s];
            let off = offsets[1 + s];
            // Undo the pooling back to this stage's conv resolution.
            let mut drelu = vec![0.0; layer.out_ch * h * 2 * w * 2];
            nn::avg_pool2_backward(&dcur, layer.out_ch, h * 2, w * 2, &mut drelu);
            h *= 2;
            w *= 2;
            nn::relu_backward(&cache.pre_acts[1 + s], &mut drelu);
            layer.backward_params(
                &cache.conv_inputs[1 + s],
                &drelu,
                h,
                w,
                &mut dparams[off..off + layer.param_len()],
            );
            let mut dprev = vec![0.0; layer.in_ch * h * w];
            layer.backward_input(&self.params[off..off + layer.param_len()], &drelu, h, w, &mut dprev);
            dcur = dprev;
        }

        let stem = layers[0];
        let off = offsets[0];
        nn::relu_backward(&cache.pre_acts[0], &mut dcur);
        stem.backward_params(
            &cache.conv_inputs[0],
            &dcur,
            image.h,
            image.w,
            &mut dparams[off..off + stem.param_len()],
        );
    }
}

/// Either codec behind one dispatch point.
#[derive(Clone, Debug)]
pub enum Codec {
    Bitplane(BitplaneCodec),
    Learned(LearnedCodec),
}

impl Codec {
    pub fn encode(&self, x: &Image) -> Result<ProbTensor> {
        match self {
            Codec::Bitplane(c) => c.encode(x),
            Codec::Learned(c) => c.encode(x),
        }
    }

    pub fn decode(&self, z: &BitTensor) -> Result<Image> {
        match self {
            Codec::Bitplane(c) => c.decode(z),
            Codec::Learned(c) => c.decode(z),
        }
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        match self {
            Codec::Bitplane(c) => c.latent_dims(image),
            Codec::Learned(c) => c.latent_dims(image),
        }
    }
}

/// Incremental autoencoder trainer; iteration draws are keyed by the
/// absolute iteration index so chunked runs replay exactly.
pub struct AeTrainer {
    config: TrainConfig,
    optimizer: Optimizer,
    iteration: usize,
    root: RngStream,
}

impl AeTrainer {
    pub fn new(config: TrainConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, param_count);
        let root = RngStream::with_stream(config.seed, STREAM_TRAIN_AE);
        Ok(Self { config, optimizer, iteration: 0, root })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn run(
        &mut self,
        dataset: &[Image],
        codec: &mut LearnedCodec,
        iterations: usize,
    ) -> Result<Vec<f64>> {
        let first = dataset.first().ok_or_else(|| Error::InvalidDataset("empty dataset".into()))?;
        for (i, img) in dataset.iter().enumerate() {
            if img.dims() != first.dims() {
                return Err(Error::InvalidDataset(format!(
                    "image {i} has dims {}, expected {}",
                    img.dims(),
                    first.dims()
                )));
            }
        }
        let n = dataset.len() as u64;
        let mut history = Vec::with_capacity(iterations);
        let mut grads = vec![0.0; codec.params().len()];
        for _ in 0..iterations {
            let iter_rng = self.root.derive(self.iteration as u64);
            grads.fill(0.0);
            let mut loss_sum = 0.0;
            for slot in 0..self.config.batch_size {
                let mut item_rng = iter_rng.derive(slot as u64);
                let idx = item_rng.next_below(n) as usize;
                let (loss, g) = codec.mse_step(&dataset[idx], &mut item_rng)?;
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / self.config.batch_size as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            self.optimizer.step(codec.params_mut(), &grads, self.config.learning_rate);
            history.push(loss_sum * scale);
            self.iteration += 1;
        }
        Ok(history)
    }
}

/// Train a learned codec from scratch on a homogeneous image dataset.
pub fn train_autoencoder(
    dataset: &[Image],
    arch: LearnedArch,
    config: &TrainConfig,
) -> Result<(LearnedCodec, Vec<f64>)> {
    let mut init_rng = RngStream::with_stream(config.seed, STREAM_TRAIN_AE).derive(u64::MAX);
    let mut codec = LearnedCodec::init(arch, &mut init_rng)?;
    let mut trainer = AeTrainer::new(config.clone(), codec.params().len())?;
    let history = trainer.run(dataset, &mut codec, config.iterations)?;
    Ok((codec, history))
}

/// Mean reconstruction MSE of a codec over a dataset, binarizing with the
/// given mode under a derived stream per image.
pub fn reconstruction_mse(
    codec: &Codec,
    dataset: &[Image],
    mode: BinarizeMode,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    let root = RngStream::with_stream(seed, STREAM_TRAIN_AE).derive(0x6d7365);
    let mut total = 0.0;
    for (i, x) in dataset.iter().enumerate() {
        let y = codec.encode(x)?;
        let mut rng = root.derive(i as u64);
        let z = binarize(&y, mode, &mut rng);
        let xhat = codec.decode(&z)?;
        let n = x.dims().len() as f64;
        total += x
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_image(c: usize, h: usize, w: usize, v: f64) -> Image {
        Image::new(Dims::new(c, h, w), vec![v; c * h * w]).unwrap()
    }

    fn random_image(c: usize, h: usize, w: usize, rng: &mut RngStream) -> Image {
        let data = (0..c * h * w).map(|_| rng.next_f64()).collect();
        Image::new(Dims::new(c, h, w), data).unwrap()
    }

    #[test]
    fn bitplane_gray_examples() {
        // Level 0 -> (0,0); level 3 -> gray 10 -> (1,0).
        let codec = BitplaneCodec::new(2, 1).unwrap();
        let lo = codec.encode(&uniform_image(1, 1, 1, 0.0)).unwrap();
        assert_eq!(lo.data(), &[0.0, 0.0]);
        let hi = codec.encode(&uniform_image(1, 1, 1, 1.0)).unwrap();
        assert_eq!(hi.data(), &[1.0, 0.0]);
    }

    #[test]
    fn bitplane_decode_examples() {
        let codec = BitplaneCodec::new(2, 1).unwrap();
        // Bits (1,0) -> gray 2 -> level 3 -> midpoint 7/8.
        let z = BitTensor::new(Dims::new(2, 1, 1), vec![1, 0]).unwrap();
        let img = codec.decode(&z).unwrap();
        assert!((img.data()[0] - 7.0 / 8.0).abs() < 1e-15);
        // All zeros -> level 0 -> 1 / 2^(C+1).
        let z0 = BitTensor::zeros(Dims::new(2, 1, 1));
        let img0 = codec.decode(&z0).unwrap();
        assert!((img0.data()[0] - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn bitplane_round_trip_error_bound_k1() {
        let codec = BitplaneCodec::new(8, 1).unwrap();
        let mut rng = RngStream::new(51);
        let x = random_image(1, 16, 16, &mut rng);
        let y = codec.encode(&x).unwrap();
        let z = binarize(&y, BinarizeMode::Threshold, &mut rng);
        let xhat = codec.decode(&z).unwrap();
        let bound = 1.0 / 512.0 + 1e-12;
        for (a, b) in x.data().iter().zip(xhat.data()) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn bitplane_round_trip_is_idempotent() {
        let codec = BitplaneCodec::new(4, 2).unwrap();
        let mut rng = RngStream::new(52);
        let x = random_image(1, 8, 8, &mut rng);
        let once = codec
            .decode(&binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng))
            .unwrap();
        let twice = codec
            .decode(&binarize(&codec.encode(&once).unwrap(), BinarizeMode::Threshold, &mut rng))
            .unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn gray_code_adjacent_levels_differ_in_one_bit() {
        for bits in 1..=12usize {
            for level in 0..(1usize << bits) - 1 {
                let a = binary_to_gray(level);
                let b = binary_to_gray(level + 1);
                assert_eq!((a ^ b).count_ones(), 1, "bits={bits} level={level}");
            }
            for level in 0..(1usize << bits) {
                assert_eq!(gray_to_binary(binary_to_gray(level), bits), level);
            }
        }
    }

    #[test]
    fn binarize_is_identity_on_hard_bits() {
        let dims = Dims::new(1, 2, 2);
        let y = ProbTensor::new(dims, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut rng = RngStream::new(53);
        let a = binarize(&y, BinarizeMode::Sample, &mut rng);
        let b = binarize(&y, BinarizeMode::Threshold, &mut rng);
        assert_eq!(a.data(), &[0, 1, 1, 0]);
        assert_eq!(a, b);
    }

    #[test]
    fn binarize_threshold_tie_goes_up() {
        let dims = Dims::new(1, 1, 2);
        let y = ProbTensor::new(dims, vec![0.5, 0.4999]).unwrap();
        let mut rng = RngStream::new(54);
        let z = binarize(&y, BinarizeMode::Threshold, &mut rng);
        assert_eq!(z.data(), &[1, 0]);
    }

    #[test]
    fn binarize_sample_rate_matches() {
        let n = 100_000;
        let y = ProbTensor::constant(Dims::new(1, 1, n), 0.3).unwrap();
        let mut rng = RngStream::new(55);
        let z = binarize(&y, BinarizeMode::Sample, &mut rng);
        let mean = z.count_ones() as f64 / n as f64;
        assert!((mean - 0.3).abs() < 3.0 * (0.3 * 0.7 / n as f64).sqrt());
    }

    #[test]
    fn fresh_learned_encoder_emits_half() {
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 4,
            downsample: 2,
            hidden: 6,
            kernel: 3,
        };
        let mut rng = RngStream::new(56);
        let codec = LearnedCodec::init(arch, &mut rng).unwrap();
        let x = random_image(1, 8, 8, &mut rng);
        let y = codec.encode(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn learned_codec_shapes_round_trip() {
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 4,
            downsample: 4,
            hidden: 6,
            kernel: 3,
        };
        let mut rng = RngStream::new(57);
        let codec = LearnedCodec::init(arch, &mut rng).unwrap();
        let x = random_image(1, 16, 16, &mut rng);
        let y = codec.encode(&x).unwrap();
        assert_eq!(y.dims(), Dims::new(4, 4, 4));
        let z = binarize(&y, BinarizeMode::Sample, &mut rng);
        let xhat = codec.decode(&z).unwrap();
        assert_eq!(xhat.dims(), x.dims());
        assert!(xhat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ae_gradients_match_finite_differences() {
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 2,
            downsample: 2,
            hidden: 3,
            kernel: 3,
        };
        let mut rng = RngStream::new(58);
        let mut codec = LearnedCodec::init(arch, &mut rng).unwrap();
        for p in codec.params_mut() {
            *p += 0.3 * (rng.next_f64() - 0.5);
        }
        let x = random_image(1, 6, 6, &mut rng);
        // Freeze the binarization draw by replaying the same stream.
        let (_, analytic) = codec.mse_step(&x, &mut RngStream::new(77)).unwrap();

        let step = 1e-5;
        let mut probe = codec.clone();
        for i in (0..probe.params().len()).step_by(11) {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + step;
            let (hi, _) = probe.mse_step(&x, &mut RngStream::new(77)).unwrap();
            probe.params_mut()[i] = orig - step;
            let (lo, _) = probe.mse_step(&x, &mut RngStream::new(77)).unwrap();
            probe.params_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * step);
            // The sampled bits are a step function of y, so the encoder-side
            // finite difference only matches where the draw is stable; the
            // straight-through estimator is not the true gradient there.
            // Decoder parameters (second half) must match exactly.
            let enc_len: usize =
                probe.arch().enc_layers().iter().map(Conv2d::param_len).sum();
            if i >= enc_len {
                let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - analytic[i]).abs() / denom <= 1e-3,
                    "param {i}: fd {fd} vs analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn constant_dataset_mse_decreases() {
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 4,
            downsample: 2,
            hidden: 6,
            kernel: 3,
        };
        let dataset = vec![uniform_image(1, 8, 8, 0.8); 4];
        let cfg = TrainConfig {
            learning_rate: 3e-2,
            batch_size: 2,
            iterations: 60,
            seed: 11,
            ..Default::default()
        };
        let (codec, history) = train_autoencoder(&dataset, arch, &cfg).unwrap();
        let final_mse =
            reconstruction_mse(&Codec::Learned(codec), &dataset, BinarizeMode::Threshold, 1)
                .unwrap();
        // Initial decode is a constant 0.5 image: MSE = (0.8 - 0.5)^2 = 0.09.
        assert!(final_mse < 0.09, "final {final_mse}, history tail {:?}", &history[55..]);
    }

    #[test]
    fn same_seed_gives_identical_ae_histories() {
        let arch = LearnedArch {
            image_channels: 1,
            latent_channels: 2,
            downsample: 2,
            hidden: 4,
            kernel: 3,
        };
        let mut rng = RngStream::new(59);
        let dataset: Vec<Image> = (0..4).map(|_| random_image(1, 8, 8, &mut rng)).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            iterations: 10,
            seed: 21,
            ..Default::default()
        };
        let (c1, h1) = train_autoencoder(&dataset, arch, &cfg).unwrap();
        let (c2, h2) = train_autoencoder(&dataset, arch, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(c1.params(), c2.params());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(BitplaneCodec::new(0, 1).is_err());
        assert!(BitplaneCodec::new(4, 0).is_err());
        let bad = LearnedArch {
            image_channels: 1,
            latent_channels: 4,
            downsample: 3,
            hidden: 4,
            kernel: 3,
        };
        assert!(bad.validate().is_err());
        let codec = BitplaneCodec::new(4, 4).unwrap();
        let mut rng = RngStream::new(60);
        let x = random_image(1, 6, 6, &mut rng);
        assert!(codec.encode(&x).is_err());
    }
}
