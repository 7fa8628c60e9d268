//! Deterministic synthetic phantoms: nested-ellipse "healthy" images over a
//! smooth background gradient, plus anomaly-injected variants with exact
//! ground-truth masks. Stands in for full-scale medical datasets so the
//! anomaly pipeline can be scored against known truth.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{BitTensor, Dims, Image};

const STREAM_HEALTHY: u64 = 0x6865;
const STREAM_ANOMALOUS: u64 = 0x616e;
const LABEL_BASE: u64 = 1;
const LABEL_BLOBS: u64 = 2;

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// Square image side length.
    pub size: usize,
    pub channels: usize,
    /// Outer-ellipse semi-axis range as a fraction of size / 2.
    pub ellipse_axes: (f64, f64),
    /// Base intensity of each nested band, outermost first.
    pub intensity_bands: Vec<f64>,
    /// Uniform per-image jitter applied to every band intensity.
    pub band_jitter: f64,
    /// Peak-to-center amplitude of the linear background gradient.
    pub gradient_amplitude: f64,
    /// Per-image detail bumps inside the foreground: count range,
    /// radius range in pixels, amplitude range. These carry the
    /// image-specific structure a reconstruction must preserve.
    pub detail_count: (usize, usize),
    pub detail_radius: (f64, f64),
    pub detail_amplitude: (f64, f64),
    /// Anomaly blob radius range in pixels.
    pub blob_radius: (usize, usize),
    /// Anomaly intensity offset magnitude range.
    pub blob_delta: (f64, f64),
    /// Number of injected blobs per anomalous image.
    pub blob_count: (usize, usize),
    /// Default seed for config-driven runs; the generator ops take an
    /// explicit seed argument.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 1,
            ellipse_axes: (0.55, 0.85),
            intensity_bands: vec![0.25, 0.45, 0.65, 0.85],
            band_jitter: 0.05,
            gradient_amplitude: 0.04,
            detail_count: (0, 0),
            detail_radius: (2.0, 4.0),
            detail_amplitude: (0.3, 0.4),
            blob_radius: (3, 6),
            blob_delta: (0.5, 0.8),
            blob_count: (1, 3),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidRange("phantom size must be >= 8".into()));
        }
        if self.channels == 0 {
            return Err(Error::InvalidRange("channels must be >= 1".into()));
        }
        let (a0, a1) = self.ellipse_axes;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::InvalidRange(format!(
                "ellipse axis range ({a0}, {a1}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if self.intensity_bands.is_empty() {
            return Err(Error::InvalidRange("at least one intensity band required".into()));
        }
        if self.blob_radius.0 == 0 || self.blob_radius.0 > self.blob_radius.1 {
            return Err(Error::InvalidRange("blob radius range invalid".into()));
        }
        if self.blob_radius.1 * 2 + 2 >= self.size {
            return Err(Error::InvalidRange("blob radius too large for image size".into()));
        }
        if self.blob_delta.0 < 0.0 || self.blob_delta.0 > self.blob_delta.1 {
            return Err(Error::InvalidRange("blob delta range invalid".into()));
        }
        if self.blob_count.0 > self.blob_count.1 || self.blob_count.1 == 0 {
            return Err(Error::InvalidRange("blob count range invalid".into()));
        }
        if self.detail_count.0 > self.detail_count.1 {
            return Err(Error::InvalidRange("detail count range invalid".into()));
        }
        if self.detail_radius.0 <= 0.0 || self.detail_radius.0 > self.detail_radius.1 {
            return Err(Error::InvalidRange("detail radius range invalid".into()));
        }
        if self.detail_amplitude.0 < 0.0 || self.detail_amplitude.0 > self.detail_amplitude.1 {
            return Err(Error::InvalidRange("detail amplitude range invalid".into()));
        }
        Ok(())
    }
}

struct EllipseGeometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

fn sample_in(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

/// Deterministic healthy phantom from one derived stream.
fn healthy_phantom(spec: &PhantomSpec, rng: &mut RngStream) -> (Image, EllipseGeometry) {
    let n = spec.size;
    let half = n as f64 / 2.0;
    let jitter = n as f64 / 16.0;
    let geo = EllipseGeometry {
        cx: half + sample_in(rng, -jitter, jitter),
        cy: half + sample_in(rng, -jitter, jitter),
        a: half * sample_in(rng, spec.ellipse_axes.0, spec.ellipse_axes.1),
        b: half * sample_in(rng, spec.ellipse_axes.0, spec.ellipse_axes.1),
    };
    let gx = sample_in(rng, -spec.gradient_amplitude, spec.gradient_amplitude);
    let gy = sample_in(rng, -spec.gradient_amplitude, spec.gradient_amplitude);
    let base = sample_in(rng, 0.05, 0.10);

    let bands: Vec<f64> = spec
        .intensity_bands
        .iter()
        .map(|&v| v + sample_in(rng, -spec.band_jitter, spec.band_jitter))
        .collect();
    // Nested band boundaries: squared relative radius, outermost first.
    let nb = bands.len();
    let limits: Vec<f64> = (0..nb).map(|j| (1.0 - j as f64 / nb as f64).powi(2)).collect();

    let mut plane = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let ex = (x as f64 + 0.5 - geo.cx) / geo.a;
            let ey = (y as f64 + 0.5 - geo.cy) / geo.b;
            let e = ex * ex + ey * ey;
            let mut v = base + gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5);
            if e <= 1.0 {
                // Innermost band whose boundary still contains the pixel.
                let mut band = 0;
                for (j, &lim) in limits.iter().enumerate() {
                    if e <= lim {
                        band = j;
                    }
                }
                v = bands[band];
            }
            plane[y * n + x] = v.clamp(0.0, 1.0);
        }
    }

    // Image-specific detail: smooth bumps at unpredictable positions inside
    // the foreground. A faithful reconstruction has to carry them through.
    let bump_count = spec.detail_count.0
        + if spec.detail_count.1 > spec.detail_count.0 {
            rng.next_below((spec.detail_count.1 - spec.detail_count.0 + 1) as u64) as usize
        } else {
            0
        };
    for _ in 0..bump_count {
        let r = sample_in(rng, spec.detail_radius.0, spec.detail_radius.1);
        let (ea, eb) = (geo.a - r, geo.b - r);
        if ea <= 1.0 || eb <= 1.0 {
            continue;
        }
        let mut center = None;
        for _ in 0..64 {
            let cx = geo.cx + sample_in(rng, -ea, ea);
            let cy = geo.cy + sample_in(rng, -eb, eb);
            let dx = (cx - geo.cx) / ea;
            let dy = (cy - geo.cy) / eb;
            if dx * dx + dy * dy <= 1.0 {
                center = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = center else { continue };
        let amp = sample_in(rng, spec.detail_amplitude.0, spec.detail_amplitude.1);
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let x_lo = (cx - r).floor().max(0.0) as usize;
        let x_hi = ((cx + r).ceil() as usize).min(n - 1);
        let y_lo = (cy - r).floor().max(0.0) as usize;
        let y_hi = ((cy + r).ceil() as usize).min(n - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d2 = (dx * dx + dy * dy) / (r * r);
                if d2 < 1.0 {
                    let idx = y * n + x;
                    plane[idx] = (plane[idx] + sign * amp * (1.0 - d2)).clamp(0.0, 1.0);
                }
            }
        }
    }

    let mut data = vec![0.0; spec.channels * n * n];
    for (i, &v) in plane.iter().enumerate() {
        for c in 0..spec.channels {
            let scale = 1.0 - 0.12 * c as f64;
            data[c * n * n + i] = (v * scale).clamp(0.0, 1.0);
        }
    }
    (Image::new(Dims::new(spec.channels, n, n), data).expect("phantom pixels clamped"), geo)
}

/// n deterministic healthy phantoms.
pub fn generate_healthy(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<Image>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::InvalidRange("n must be >= 1".into()));
    }
    let root = RngStream::with_stream(seed, STREAM_HEALTHY);
    Ok((0..n)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            healthy_phantom(spec, &mut rng).0
        })
        .collect())
}

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    delta: f64,
}

fn sample_blob(spec: &PhantomSpec, geo: &EllipseGeometry, rng: &mut RngStream) -> Blob {
    let (r_lo, r_hi) = (spec.blob_radius.0 as f64, spec.blob_radius.1 as f64);
    let mut r = sample_in(rng, r_lo, r_hi);
    loop {
        // Containment with margin r keeps the blob fully inside the
        // foreground ellipse.
        let (ea, eb) = (geo.a - r - 1.0, geo.b - r - 1.0);
        if ea > 1.0 && eb > 1.0 {
            for _ in 0..64 {
                let cx = geo.cx + sample_in(rng, -ea, ea);
                let cy = geo.cy + sample_in(rng, -eb, eb);
                let dx = (cx - geo.cx) / ea;
                let dy = (cy - geo.cy) / eb;
                if dx * dx + dy * dy <= 1.0 {
                    let delta = sample_in(rng, spec.blob_delta.0, spec.blob_delta.1);
                    return Blob { cx, cy, r, delta };
                }
            }
        }
        // Ellipse too small for this radius: shrink and retry.
        r = (r * 0.7).max(1.0);
    }
}

/// n deterministic anomalous phantoms with exact pixel masks. Each image is
/// a healthy phantom (drawn from its own derived stream, disjoint from the
/// healthy split) plus 1..=count circular intensity offsets; each blob is
/// pushed toward the far side of the intensity range from its local band.
pub fn generate_anomalous(
    spec: &PhantomSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(Image, BitTensor)>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::InvalidRange("n must be >= 1".into()));
    }
    let root = RngStream::with_stream(seed, STREAM_ANOMALOUS);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img_rng = root.derive(i as u64);
        let (healthy, geo) = healthy_phantom(spec, &mut img_rng.derive(LABEL_BASE));
        let mut blob_rng = img_rng.derive(LABEL_BLOBS);
        let count = spec.blob_count.0
            + blob_rng.next_below((spec.blob_count.1 - spec.blob_count.0 + 1) as u64) as usize;

        let size = spec.size;
        let mut data = healthy.data().to_vec();
        let mut mask = vec![0u8; size * size];
        for _ in 0..count {
            let blob = sample_blob(spec, &geo, &mut blob_rng);
            let r2 = blob.r * blob.r;
            let x_lo = (blob.cx - blob.r).floor().max(0.0) as usize;
            let x_hi = ((blob.cx + blob.r).ceil() as usize).min(size - 1);
            let y_lo = (blob.cy - blob.r).floor().max(0.0) as usize;
            let y_hi = ((blob.cy + blob.r).ceil() as usize).min(size - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let dx = x as f64 + 0.5 - blob.cx;
                    let dy = y as f64 + 0.5 - blob.cy;
                    if dx * dx + dy * dy > r2 {
                        continue;
                    }
                    mask[y * size + x] = 1;
                    for c in 0..spec.channels {
                        let idx = (c * size + y) * size + x;
                        let v = data[idx];
                        let shifted =
                            if v < 0.5 { v + blob.delta } else { v - blob.delta };
                        data[idx] = shifted.clamp(0.0, 1.0);
                    }
                }
            }
        }
        let image = Image::new(healthy.dims(), data)?;
        let truth = BitTensor::new(Dims::new(1, size, size), mask)?;
        out.push((image, truth));
    }
    Ok(out)
}
