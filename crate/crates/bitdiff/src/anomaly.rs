//! Masked Bernoulli denoising for anomaly detection.
//!
//! The pipeline encodes an image to a binary latent z, jumps L noise steps,
//! then walks the reverse chain t = L..1. At every step the denoiser's flip
//! probabilities update a monotone mask (entries with probability above the
//! threshold P), the clean estimate is stitched with the original latent
//! (masked entries take the estimate, the rest keep z), and the next latent
//! is drawn from the exact posterior. The reconstruction's squared distance
//! to the input is the anomaly map; the mask fraction is an image-level
//! score.

use crate::codec::{binarize, BinarizeMode, Codec};
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_jump, posterior_theta, predict_z0};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::{BitTensor, Dims, Image, ProbTensor, ScalarMap};

/// Stream labels under the inference seed.
const STREAM_BINARIZE: u64 = 0x627a;
const STREAM_CHAIN: u64 = 0x6368;

/// Post-processing of the anomaly map into a binary segmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    /// Odd median-filter kernel size.
    pub median_kernel: usize,
    /// Segmentation threshold on the filtered map (strictly above).
    pub threshold: f64,
    /// Drop 8-connected components with fewer pixels than this.
    pub min_component: usize,
    /// Min-max normalize the map per image before thresholding.
    pub normalize: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { median_kernel: 5, threshold: 0.5, min_component: 10, normalize: false }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    /// Noise level L: how many forward steps corrupt the latent.
    pub noise_level: usize,
    /// Mask threshold P in [0, 1); entries with flip probability strictly
    /// above it are masked.
    pub threshold: f64,
    pub binarize_mode: BinarizeMode,
    pub seed: u64,
    /// Keep the per-step trace (memory grows with L).
    pub record_trace: bool,
    pub postprocess: PostprocessConfig,
}

impl InferenceConfig {
    pub fn new(noise_level: usize, threshold: f64, seed: u64) -> Self {
        Self {
            noise_level,
            threshold,
            binarize_mode: BinarizeMode::Sample,
            seed,
            record_trace: false,
            postprocess: PostprocessConfig::default(),
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.noise_level < 1 || self.noise_level > schedule.timesteps() {
            return Err(Error::InvalidRange(format!(
                "noise level {} outside [1, {}]",
                self.noise_level,
                schedule.timesteps()
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidRange(format!(
                "mask threshold {} outside [0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// One step of the retained trace.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub t: usize,
    /// Denoiser clean estimate |z_t - eps|.
    pub z0_estimate: ProbTensor,
    /// Estimate after stitching with the original latent.
    pub z0_stitched: ProbTensor,
    pub mask_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct AnomalyResult {
    pub reconstruction: Image,
    pub anomaly_map: ScalarMap,
    pub segmentation: BitTensor,
    /// Percentage of latent entries ever masked (100 by convention for the
    /// unmasked pipeline).
    pub mask_fraction: f64,
    /// Final latent mask.
    pub mask: BitTensor,
    /// Mask fraction after each step t = L..1; non-decreasing.
    pub fraction_history: Vec<f64>,
    pub trace: Option<Vec<StepTrace>>,
}

/// Element-wise stitching: masked entries take the estimate, unmasked keep
/// the original code.
pub fn stitch(mask: &BitTensor, estimate: &ProbTensor, original: &BitTensor) -> Result<ProbTensor> {
    if mask.dims() != estimate.dims() || mask.dims() != original.dims() {
        return Err(Error::ShapeMismatch(format!(
            "stitch: mask {} estimate {} original {}",
            mask.dims(),
            estimate.dims(),
            original.dims()
        )));
    }
    let data = mask
        .data()
        .iter()
        .zip(estimate.data())
        .zip(original.data())
        .map(|((&m, &e), &z)| if m == 1 { e } else { f64::from(z) })
        .collect();
    ProbTensor::new(mask.dims(), data)
}

/// Percentage of masked entries.
pub fn mask_fraction(mask: &BitTensor) -> f64 {
    100.0 * mask.count_ones() as f64 / mask.dims().len() as f64
}

/// Pixel-wise channel-sum of squared differences.
pub fn anomaly_map(x: &Image, x_hat: &Image) -> Result<ScalarMap> {
    if x.dims() != x_hat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "anomaly map: {} vs {}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let Dims { c, h, w } = x.dims();
    let mut data = vec![0.0; h * w];
    for ci in 0..c {
        let a = &x.data()[ci * h * w..(ci + 1) * h * w];
        let b = &x_hat.data()[ci * h * w..(ci + 1) * h * w];
        for (d, (&va, &vb)) in data.iter_mut().zip(a.iter().zip(b)) {
            let diff = va - vb;
            *d += diff * diff;
        }
    }
    ScalarMap::new(h, w, data)
}

fn run_chain(
    x: &Image,
    codec: &Codec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
    masked: bool,
) -> Result<AnomalyResult> {
    cfg.validate(schedule)?;
    let root = RngStream::new(cfg.seed);
    let y = codec.encode(x)?;
    let z = binarize(&y, cfg.binarize_mode, &mut root.derive(STREAM_BINARIZE));

    let mut chain_rng = root.derive(STREAM_CHAIN);
    let mut z_t = forward_jump(&z, cfg.noise_level, schedule, &mut chain_rng)?;

    let mut mask = BitTensor::zeros(z.dims());
    let mut fraction_history = Vec::with_capacity(cfg.noise_level);
    let mut trace = cfg.record_trace.then(Vec::new);

    for t in (1..=cfg.noise_level).rev() {
        let eps = denoiser
            .predict(&z_t, t)
            .map_err(|e| Error::InvalidPrediction(format!("denoiser at t={t}: {e}")))?;
        if eps.dims() != z_t.dims() {
            return Err(Error::InvalidPrediction(format!(
                "denoiser returned {} for input {}",
                eps.dims(),
                z_t.dims()
            )));
        }
        let z0_estimate = predict_z0(&z_t, &eps)?;
        let stitched = if masked {
            for (m, &e) in mask.data_mut().iter_mut().zip(eps.data()) {
                *m |= u8::from(e > cfg.threshold);
            }
            stitch(&mask, &z0_estimate, &z)?
        } else {
            z0_estimate.clone()
        };
        fraction_history.push(if masked { mask_fraction(&mask) } else { 100.0 });
        if let Some(steps) = trace.as_mut() {
            steps.push(StepTrace {
                t,
                z0_estimate: z0_estimate.clone(),
                z0_stitched: stitched.clone(),
                mask_fraction: *fraction_history.last().unwrap(),
            });
        }
        let theta = posterior_theta(&z_t, &stitched, t, schedule)?;
        z_t = theta.sample(&mut chain_rng);
    }

    let reconstruction = codec.decode(&z_t)?;
    let map = anomaly_map(x, &reconstruction)?;
    let segmentation = postprocess(
        &map,
        cfg.postprocess.median_kernel,
        cfg.postprocess.threshold,
        cfg.postprocess.min_component,
        cfg.postprocess.normalize,
    )?;
    let final_fraction = if masked { mask_fraction(&mask) } else { 100.0 };
    if !masked {
        // Everything was replaced by the model's estimate.
        mask.data_mut().fill(1);
    }
    Ok(AnomalyResult {
        reconstruction,
        anomaly_map: map,
        segmentation,
        mask_fraction: final_fraction,
        mask,
        fraction_history,
        trace,
    })
}

/// Mask-and-stitch inference at noise level L and threshold P.
pub fn masked_inference(
    x: &Image,
    codec: &Codec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
) -> Result<AnomalyResult> {
    run_chain(x, codec, denoiser, schedule, cfg, true)
}

/// Plain noising/denoising without the mask branch; consumes the rng streams
/// of `masked_inference` identically, so a P = 0 masked run is bit-identical
/// under a shared seed.
pub fn unmasked_inference(
    x: &Image,
    codec: &Codec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    noise_level: usize,
    seed: u64,
) -> Result<AnomalyResult> {
    let cfg = InferenceConfig::new(noise_level, 0.0, seed);
    run_chain(x, codec, denoiser, schedule, &cfg, false)
}

/// Unmasked inference with explicit binarize/postprocess settings.
pub fn unmasked_inference_with(
    x: &Image,
    codec: &Codec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
) -> Result<AnomalyResult> {
    run_chain(x, codec, denoiser, schedule, cfg, false)
}

/// Median filter (clamp-to-edge), threshold (strictly above), then drop
/// 8-connected components smaller than `min_component` pixels.
pub fn postprocess(
    map: &ScalarMap,
    median_kernel: usize,
    threshold: f64,
    min_component: usize,
    normalize: bool,
) -> Result<BitTensor> {
    if median_kernel % 2 == 0 || median_kernel == 0 {
        return Err(Error::InvalidRange(format!(
            "median kernel must be odd, got {median_kernel}"
        )));
    }
    if threshold < 0.0 {
        return Err(Error::InvalidRange(format!("threshold must be >= 0, got {threshold}")));
    }
    let work = if normalize { map.normalized() } else { map.clone() };
    let filtered = median_filter(&work, median_kernel);
    let (h, w) = (map.height(), map.width());
    let mut bits: Vec<u8> = filtered.iter().map(|&v| u8::from(v > threshold)).collect();
    remove_small_components(&mut bits, h, w, min_component);
    BitTensor::new(Dims::new(1, h, w), bits)
}

fn median_filter(map: &ScalarMap, kernel: usize) -> Vec<f64> {
    let (h, w) = (map.height(), map.width());
    let r = (kernel / 2) as isize;
    let data = map.data();
    let mut out = vec![0.0; h * w];
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(data[yy * w + xx]);
                }
            }
            window.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + x as usize] = window[window.len() / 2];
        }
    }
    out
}

/// Label 8-connected foreground components and clear those below the size
/// floor. Iterative stack-based fill.
fn remove_small_components(bits: &mut [u8], h: usize, w: usize, min_component: usize) {
    if min_component <= 1 {
        return;
    }
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if bits[start] == 0 || visited[start] {
            continue;
        }
        stack.clear();
        component.clear();
        stack.push(start);
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            component.push(idx);
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if bits[n] == 1 && !visited[n] {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if component.len() < min_component {
            for &idx in &component {
                bits[idx] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BitplaneCodec;
    use crate::denoiser::OracleDenoiser;
    use crate::schedule::ScheduleKind;

    fn toy_schedule() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 30, 1e-3, 0.12).unwrap()
    }

    /// A codec-exact image: quantizing a phantom through the codec makes the
    /// bitplane round trip lossless.
    fn codec_exact_input(codec: &Codec, seed: u64) -> Image {
        let raw = crate::datagen::generate_healthy(
            &crate::datagen::PhantomSpec::default(),
            1,
            seed,
        )
        .unwrap()
        .remove(0);
        let mut rng = RngStream::new(seed);
        let z = binarize(&codec.encode(&raw).unwrap(), BinarizeMode::Threshold, &mut rng);
        codec.decode(&z).unwrap()
    }

    fn test_codec() -> Codec {
        Codec::Bitplane(BitplaneCodec::new(4, 4).unwrap())
    }

    #[test]
    fn stitch_identity_cases() {
        let dims = Dims::new(1, 2, 2);
        let mut rng = RngStream::new(61);
        let z = ProbTensor::constant(dims, 0.5).unwrap().sample(&mut rng);
        let est = ProbTensor::new(dims, vec![0.1, 0.6, 0.3, 0.9]).unwrap();
        let zero = BitTensor::zeros(dims);
        let all_one = BitTensor::new(dims, vec![1; 4]).unwrap();
        // All-zero mask keeps the original exactly.
        assert_eq!(stitch(&zero, &est, &z).unwrap(), z.to_probs());
        // All-one mask takes the estimate exactly.
        assert_eq!(stitch(&all_one, &est, &z).unwrap(), est);
        // Mixed mask selects entrywise.
        let mixed = BitTensor::new(dims, vec![1, 0, 0, 1]).unwrap();
        let got = stitch(&mixed, &est, &z).unwrap();
        assert_eq!(got.data()[0], 0.1);
        assert_eq!(got.data()[1], f64::from(z.data()[1]));
        assert_eq!(got.data()[2], f64::from(z.data()[2]));
        assert_eq!(got.data()[3], 0.9);
    }

    #[test]
    fn mask_fraction_examples() {
        let dims = Dims::new(2, 4, 4);
        assert_eq!(mask_fraction(&BitTensor::zeros(dims)), 0.0);
        let ones = BitTensor::new(dims, vec![1; 32]).unwrap();
        assert_eq!(mask_fraction(&ones), 100.0);
        let mut half = vec![0u8; 32];
        half[..8].fill(1);
        assert_eq!(mask_fraction(&BitTensor::new(dims, half).unwrap()), 25.0);
    }

    #[test]
    fn anomaly_map_arithmetic() {
        let dims = Dims::new(4, 1, 1);
        let x = Image::new(dims, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let same = anomaly_map(&x, &x).unwrap();
        assert_eq!(same.data(), &[0.0]);
        let y = Image::new(dims, vec![0.6, 0.6, 0.6, 0.6]).unwrap();
        let m = anomaly_map(&x, &y).unwrap();
        assert!((m.data()[0] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn oracle_on_healthy_input_recovers_exactly() {
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 3);
        let mut rng = RngStream::new(4);
        let z = binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng);
        let oracle = OracleDenoiser::new(z.clone(), 1e-6);
        let cfg = InferenceConfig {
            binarize_mode: BinarizeMode::Threshold,
            ..InferenceConfig::new(25, 0.5, 42)
        };
        let res = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        let mean =
            res.anomaly_map.data().iter().sum::<f64>() / res.anomaly_map.data().len() as f64;
        assert!(mean < 1e-6, "mean anomaly {mean}");
        assert_eq!(res.reconstruction, x);
        // Some entries flipped under forward noise and were masked.
        assert!(res.mask_fraction > 0.0 && res.mask_fraction < 100.0);
    }

    #[test]
    fn p_zero_masked_equals_unmasked_bit_for_bit() {
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 5);
        let mut rng = RngStream::new(6);
        let z = binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng);
        let oracle = OracleDenoiser::new(z, 1e-6);
        let seed = 77;
        let cfg = InferenceConfig {
            binarize_mode: BinarizeMode::Threshold,
            ..InferenceConfig::new(20, 0.0, seed)
        };
        let masked = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        let unmasked =
            unmasked_inference(&x, &codec, &oracle, &schedule, 20, seed).unwrap();
        assert_eq!(masked.reconstruction, unmasked.reconstruction);
        assert_eq!(masked.anomaly_map, unmasked.anomaly_map);
        assert_eq!(masked.segmentation, unmasked.segmentation);
        // P = 0 saturates the mask at the first step.
        assert!(masked.fraction_history.iter().all(|&f| f == 100.0));
        assert_eq!(unmasked.mask_fraction, 100.0);
    }

    #[test]
    fn mask_history_is_monotone() {
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 8);
        let mut rng = RngStream::new(9);
        let z = binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng);
        let oracle = OracleDenoiser::new(z, 1e-6);
        let cfg = InferenceConfig {
            binarize_mode: BinarizeMode::Threshold,
            record_trace: true,
            ..InferenceConfig::new(30, 0.5, 13)
        };
        let res = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        for pair in res.fraction_history.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        let trace = res.trace.unwrap();
        assert_eq!(trace.len(), 30);
        assert_eq!(trace[0].t, 30);
        assert_eq!(trace.last().unwrap().t, 1);
    }

    #[test]
    fn saturating_threshold_keeps_original_latent() {
        // P above every prediction: the mask never fires and the chain is
        // pinned to the original code at t = 1.
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 10);
        let mut rng = RngStream::new(11);
        let z = binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng);
        let oracle = OracleDenoiser::new(z, 1e-6);
        let cfg = InferenceConfig {
            binarize_mode: BinarizeMode::Threshold,
            ..InferenceConfig::new(15, 0.9999999, 21)
        };
        let res = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        assert_eq!(res.mask_fraction, 0.0);
        assert_eq!(res.reconstruction, x);
    }

    #[test]
    fn inference_is_deterministic_given_seed() {
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 12);
        let mut rng = RngStream::new(13);
        let z = binarize(&codec.encode(&x).unwrap(), BinarizeMode::Threshold, &mut rng);
        let oracle = OracleDenoiser::new(z, 1e-6);
        let cfg = InferenceConfig::new(18, 0.5, 5);
        let a = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        let b = masked_inference(&x, &codec, &oracle, &schedule, &cfg).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn noise_level_beyond_schedule_rejected() {
        let codec = test_codec();
        let schedule = toy_schedule();
        let x = codec_exact_input(&codec, 14);
        let oracle = OracleDenoiser::new(BitTensor::zeros(Dims::new(4, 16, 16)), 1e-6);
        let cfg = InferenceConfig::new(31, 0.5, 1);
        assert!(masked_inference(&x, &codec, &oracle, &schedule, &cfg).is_err());
        let cfg = InferenceConfig::new(10, 1.0, 1);
        assert!(masked_inference(&x, &codec, &oracle, &schedule, &cfg).is_err());
    }

    #[test]
    fn postprocess_uniform_below_threshold_is_empty() {
        let map = ScalarMap::new(16, 16, vec![0.2; 256]).unwrap();
        let seg = postprocess(&map, 5, 0.5, 10, false).unwrap();
        assert_eq!(seg.count_ones(), 0);
    }

    #[test]
    fn postprocess_isolated_pixel_is_erased_by_median() {
        let mut data = vec![0.0; 256];
        data[8 * 16 + 8] = 1.0;
        let map = ScalarMap::new(16, 16, data).unwrap();
        let seg = postprocess(&map, 5, 0.5, 0, false).unwrap();
        assert_eq!(seg.count_ones(), 0);
    }

    #[test]
    fn postprocess_block_survives_with_one_component() {
        let mut data = vec![0.1; 64 * 64];
        for y in 20..40 {
            for x in 20..40 {
                data[y * 64 + x] = 0.9;
            }
        }
        let map = ScalarMap::new(64, 64, data).unwrap();
        let seg = postprocess(&map, 5, 0.5, 10, false).unwrap();
        assert!(seg.count_ones() > 0);
        // Count components in the output.
        let mut bits = seg.data().to_vec();
        remove_small_components(&mut bits, 64, 64, usize::MAX);
        // A single component means clearing everything below usize::MAX
        // wipes the map in exactly one pass over one component.
        assert!(bits.iter().all(|&b| b == 0));
        // Interior is intact, corners eroded by the median.
        assert_eq!(seg.data()[25 * 64 + 25], 1);
        assert_eq!(seg.data()[20 * 64 + 20], 0);
    }

    #[test]
    fn postprocess_small_components_removed() {
        let mut data = vec![0.0; 32 * 32];
        // A 3x3 block: survives the median (9 pixels > half of 9-window at
        // kernel 1) but is below the 10-pixel floor.
        for y in 10..13 {
            for x in 10..13 {
                data[y * 32 + x] = 1.0;
            }
        }
        let map = ScalarMap::new(32, 32, data).unwrap();
        let seg = postprocess(&map, 1, 0.5, 10, false).unwrap();
        assert_eq!(seg.count_ones(), 0);
        let seg_keep = postprocess(&map, 1, 0.5, 9, false).unwrap();
        assert_eq!(seg_keep.count_ones(), 9);
    }

    #[test]
    fn postprocess_even_kernel_rejected() {
        let map = ScalarMap::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(postprocess(&map, 4, 0.5, 10, false).is_err());
    }

    #[test]
    fn segmentation_subset_of_superthreshold_region() {
        let mut rng = RngStream::new(15);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.next_f64()).collect();
        let map = ScalarMap::new(32, 32, data).unwrap();
        let seg = postprocess(&map, 3, 0.6, 5, false).unwrap();
        let filtered = median_filter(&map, 3);
        for (i, &s) in seg.data().iter().enumerate() {
            if s == 1 {
                assert!(filtered[i] > 0.6);
            }
        }
    }
}
