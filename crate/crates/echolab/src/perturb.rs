//! Physics-informed ultrasound perturbations.
//!
//! Six transforms with exact formulas: linear and power-law depth
//! attenuation, a horizontal Gaussian shadow band, a 2-d Gaussian shadow,
//! additive near-field haze, and bilateral-filter speckle reduction. All of
//! them honor a binary scan mask (pixels outside the mask are bit-identical
//! before and after), map `[0,1]` into `[0,1]`, and — for the
//! spatially-varying ones — apply one multiplier map identically to every
//! frame of a video.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::video::Video;

/// Binary scan mask covering the active ultrasound sector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<u8>,
}

impl ScanMask {
    pub fn full(h: usize, w: usize) -> Self {
        ScanMask { h, w, bits: vec![1; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x] != 0
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn iou(&self, other: &ScanMask) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn check_video(&self, video: &Video) {
        assert_eq!(
            (self.h, self.w),
            (video.h, video.w),
            "scan mask {}x{} does not match video {}x{}",
            self.h,
            self.w,
            video.h,
            video.w
        );
    }
}

/// Threshold-and-morphology scan-mask detection. Intensities are rescaled to
/// the 0-255 convention before applying `tau` (typically 10); the raw mask is
/// refined by 3x3 closing then opening.
pub fn auto_scan_mask(frame: &[f32], h: usize, w: usize, tau: f32) -> ScanMask {
    assert_eq!(frame.len(), h * w);
    let bits: Vec<u8> = frame.iter().map(|&v| u8::from(v * 255.0 > tau)).collect();
    let closed = erode3(&dilate3(&bits, h, w), h, w);
    let opened = dilate3(&erode3(&closed, h, w), h, w);
    ScanMask { h, w, bits: opened }
}

fn dilate3(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0u8;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    v |= bits[yy * w + xx];
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

fn erode3(bits: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 1u8;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    v &= bits[yy * w + xx];
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Applies a per-pixel multiplier inside the mask, identically to all frames.
fn apply_multiplier_map(video: &Video, mask: &ScanMask, map: &[f32]) -> Video {
    mask.check_video(video);
    let mut out = video.clone();
    let hw = video.h * video.w;
    for ti in 0..video.t {
        let frame = &mut out.data[ti * hw..(ti + 1) * hw];
        for (i, p) in frame.iter_mut().enumerate() {
            if mask.bits[i] != 0 {
                *p *= map[i];
            }
        }
    }
    out
}

/// Linear depth ramp `I' = I * max(0, 1 - alpha * y / H)`.
pub fn depth_attenuation_linear(video: &Video, alpha: f32, mask: &ScanMask) -> Video {
    assert!(alpha >= 0.0, "depth_attenuation_linear: alpha must be >= 0, got {alpha}");
    let map: Vec<f32> = (0..video.h * video.w)
        .map(|i| {
            let y = (i / video.w) as f32;
            (1.0 - alpha * y / video.h as f32).max(0.0)
        })
        .collect();
    apply_multiplier_map(video, mask, &map)
}

/// Power-law multiplier `max(a_min, 1 - (y/H)^gamma)` evaluated per row.
pub fn depth_power_multiplier(y: f32, h: f32, gamma: f32, a_min: f32) -> f32 {
    (1.0 - (y / h).powf(gamma)).max(a_min)
}

/// Power-law depth attenuation. `gamma` outside `[0.5, 3.0]` is accepted with
/// a warning on stderr (presets sit on the boundary of the documented range).
pub fn depth_attenuation_power(video: &Video, gamma: f32, a_min: f32, mask: &ScanMask) -> Video {
    if !(0.5..=3.0).contains(&gamma) {
        eprintln!("warning: depth attenuation gamma {gamma} outside documented range [0.5, 3.0]");
    }
    assert!((0.0..=1.0).contains(&a_min), "depth_attenuation_power: a_min must be in [0,1], got {a_min}");
    let map: Vec<f32> = (0..video.h * video.w)
        .map(|i| {
            let y = (i / video.w) as f32;
            depth_power_multiplier(y, video.h as f32, gamma, a_min)
        })
        .collect();
    apply_multiplier_map(video, mask, &map)
}

/// Horizontal shadow band `I' = I * (1 - exp(-(x-x0)^2 / 2 sigma^2))`.
pub fn gaussian_shadow_band(video: &Video, x0: f32, sigma: f32, mask: &ScanMask) -> Video {
    assert!(sigma > 0.0, "gaussian_shadow_band: sigma must be positive, got {sigma}");
    let map: Vec<f32> = (0..video.h * video.w)
        .map(|i| {
            let x = (i % video.w) as f32;
            let d = x - x0;
            1.0 - (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    apply_multiplier_map(video, mask, &map)
}

/// 2-d Gaussian shadow `1 - s * exp(-(x-mx)^2/2sx^2 - (y-my)^2/2sy^2)`.
/// `sigma_x`/`sigma_y` and `mu_x`/`mu_y` are fractions of width/height.
pub fn gaussian_shadow_2d(
    video: &Video,
    strength: f32,
    sigma_x: f32,
    sigma_y: f32,
    mu_x: f32,
    mu_y: f32,
    mask: &ScanMask,
) -> Video {
    assert!((0.0..=1.0).contains(&strength), "gaussian_shadow_2d: strength must be in [0,1], got {strength}");
    let sx = sigma_x * video.w as f32;
    let sy = sigma_y * video.h as f32;
    let cx = mu_x * video.w as f32;
    let cy = mu_y * video.h as f32;
    let map: Vec<f32> = (0..video.h * video.w)
        .map(|i| {
            let x = (i % video.w) as f32;
            let y = (i / video.w) as f32;
            let dx = x - cx;
            let dy = y - cy;
            1.0 - strength * (-dx * dx / (2.0 * sx * sx) - dy * dy / (2.0 * sy * sy)).exp()
        })
        .collect();
    apply_multiplier_map(video, mask, &map)
}

/// Additive near-field haze centered at the sector apex (top-center by
/// default), zeroed beyond `radius` (a fraction of the image diagonal),
/// clipped to 1. `sigma_h` is also a fraction of the diagonal.
pub fn haze_artifact(
    video: &Video,
    radius: f32,
    sigma_h: f32,
    h_max: f32,
    apex: Option<(f32, f32)>,
    mask: &ScanMask,
) -> Video {
    mask.check_video(video);
    assert!(h_max >= 0.0, "haze_artifact: h_max must be >= 0, got {h_max}");
    let (w, h) = (video.w as f32, video.h as f32);
    let diag = (w * w + h * h).sqrt();
    let (cx, cy) = apex.unwrap_or((w / 2.0, 0.0));
    let s = sigma_h * diag;
    let rmax2 = (radius * diag) * (radius * diag);
    let haze: Vec<f32> = (0..video.h * video.w)
        .map(|i| {
            let x = (i % video.w) as f32 - cx;
            let y = (i / video.w) as f32 - cy;
            let r2 = x * x + y * y;
            if r2 > rmax2 {
                0.0
            } else {
                h_max * (-r2 / (2.0 * s * s)).exp()
            }
        })
        .collect();
    let mut out = video.clone();
    let hw = video.h * video.w;
    for ti in 0..video.t {
        let frame = &mut out.data[ti * hw..(ti + 1) * hw];
        for (i, p) in frame.iter_mut().enumerate() {
            if mask.bits[i] != 0 {
                *p = (*p + haze[i]).min(1.0);
            }
        }
    }
    out
}

/// Bilateral-filter speckle reduction, applied per frame. The window is
/// clamped to the frame at the edges. Pixels outside the mask pass through.
pub fn speckle_reduction(
    video: &Video,
    sigma_spatial: f32,
    sigma_range: f32,
    window: usize,
    mask: &ScanMask,
) -> Result<Video> {
    mask.check_video(video);
    if window % 2 == 0 || !(3..=11).contains(&window) {
        return Err(Error::invalid(format!(
            "speckle_reduction: window must be odd and in [3, 11], got {window}"
        )));
    }
    let half = (window / 2) as isize;
    let (h, w) = (video.h as isize, video.w as isize);
    let inv_2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv_2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = video.clone();
    for ti in 0..video.t {
        let src = video.frame(ti).to_vec();
        let dst = out.frame_mut(ti);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if mask.bits[i] == 0 {
                    continue;
                }
                let center = src[i];
                let mut num = 0.0f32;
                let mut den = 0.0f32;
                for yy in (y - half).max(0)..=(y + half).min(h - 1) {
                    for xx in (x - half).max(0)..=(x + half).min(w - 1) {
                        let v = src[(yy * w + xx) as usize];
                        let ds = ((yy - y) * (yy - y) + (xx - x) * (xx - x)) as f32;
                        let dr = v - center;
                        let weight = (-ds * inv_2ss - dr * dr * inv_2sr).exp();
                        num += weight * v;
                        den += weight;
                    }
                }
                dst[i] = num / den;
            }
        }
    }
    Ok(out)
}

// ── perturbation specs and composition ───────────────────────────────

/// A scalar parameter that is either fixed or a uniform range sampled per
/// application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Range(f64, f64),
}

impl Param {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Range(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    DepthLinear,
    DepthPower,
    ShadowBand,
    Shadow2d,
    Haze,
    SpeckleReduction,
}

/// One perturbation: kind, named parameters (scalars or ranges), an
/// application probability, and a deterministic seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    #[serde(default)]
    pub params: BTreeMap<String, Param>,
    #[serde(default = "default_probability")]
    pub probability: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probability() -> f64 {
    1.0
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind) -> Self {
        PerturbSpec { kind, params: BTreeMap::new(), probability: 1.0, seed: 0 }
    }

    pub fn with(mut self, key: &str, p: Param) -> Self {
        self.params.insert(key.to_string(), p);
        self
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn param(&self, key: &str, default: f64, rng: &mut ChaCha8Rng) -> f64 {
        self.params.get(key).map(|p| p.sample(rng)).unwrap_or(default)
    }

    /// Applies this spec unconditionally. Spatially-varying transforms
    /// sample their parameters once and reuse them for every frame.
    pub fn apply(&self, video: &Video, mask: &ScanMask, rng: &mut ChaCha8Rng) -> Result<Video> {
        match self.kind {
            PerturbKind::DepthLinear => {
                let alpha = self.param("alpha", 0.5, rng) as f32;
                Ok(depth_attenuation_linear(video, alpha, mask))
            }
            PerturbKind::DepthPower => {
                let gamma = self.param("gamma", 1.5, rng) as f32;
                let a_min = self.param("a_min", 0.0, rng) as f32;
                Ok(depth_attenuation_power(video, gamma, a_min, mask))
            }
            PerturbKind::ShadowBand => {
                let x0 = match self.params.get("x0") {
                    Some(p) => p.sample(rng) as f32,
                    None => rng.gen_range(0.0..video.w as f64) as f32,
                };
                let sigma_frac = self.param("sigma", 0.2, rng) as f32;
                Ok(gaussian_shadow_band(video, x0, sigma_frac * video.w as f32, mask))
            }
            PerturbKind::Shadow2d => {
                let s = self.param("strength", 0.6, rng) as f32;
                let sx = self.param("sigma_x", 0.2, rng) as f32;
                let sy = self.param("sigma_y", 0.2, rng) as f32;
                let mx = match self.params.get("center_x") {
                    Some(p) => p.sample(rng) as f32,
                    None => rng.gen_range(0.2..=0.8) as f32,
                };
                let my = match self.params.get("center_y") {
                    Some(p) => p.sample(rng) as f32,
                    None => rng.gen_range(0.2..=0.8) as f32,
                };
                Ok(gaussian_shadow_2d(video, s, sx, sy, mx, my, mask))
            }
            PerturbKind::Haze => {
                let radius = self.param("radius", 0.5, rng) as f32;
                let sigma = self.param("sigma", 0.1, rng) as f32;
                let h_max = self.param("h_max", 0.3, rng) as f32;
                Ok(haze_artifact(video, radius, sigma, h_max, None, mask))
            }
            PerturbKind::SpeckleReduction => {
                let ss = self.param("sigma_spatial", 1.0, rng) as f32;
                let sr = self.param("sigma_color", 0.5, rng) as f32;
                let window = self.param("window", 5.0, rng) as usize;
                speckle_reduction(video, ss, sr, window, mask)
            }
        }
    }
}

/// Applies `specs` in order. Each fires independently with its probability;
/// randomness comes from `(video_seed, spec.seed, position)`, so output bytes
/// are fully determined by the inputs.
pub fn compose(specs: &[PerturbSpec], video: &Video, mask: &ScanMask, video_seed: u64) -> Result<Video> {
    let mut out = video.clone();
    for (i, spec) in specs.iter().enumerate() {
        let stream = derive_seed_indexed(video_seed ^ spec.seed, "perturb", i as u64);
        let mut rng = rng_from_seed(stream);
        let fire: f64 = rng.gen_range(0.0..1.0);
        if fire < spec.probability {
            out = spec.apply(&out, mask, &mut rng)?;
        }
    }
    Ok(out)
}

// ── presets ──────────────────────────────────────────────────────────

/// Resolves a named preset (case-insensitive) to its perturbation list.
///
/// `DA-075/150/215` are power-law depth attenuation; `GS-Low/Med/High` are
/// 2-d Gaussian shadows; `depth-linear-low/med/high` and
/// `shadow-band-low/med/high` are the main-text severity variants.
pub fn preset(name: &str) -> Option<Vec<PerturbSpec>> {
    let key = name.to_ascii_lowercase();
    let spec = match key.as_str() {
        "da-075" => PerturbSpec::new(PerturbKind::DepthPower)
            .with("gamma", Param::Fixed(0.75))
            .with("a_min", Param::Fixed(0.0)),
        "da-150" => PerturbSpec::new(PerturbKind::DepthPower)
            .with("gamma", Param::Fixed(1.50))
            .with("a_min", Param::Fixed(0.0)),
        "da-215" => PerturbSpec::new(PerturbKind::DepthPower)
            .with("gamma", Param::Fixed(2.15))
            .with("a_min", Param::Fixed(0.0)),
        "gs-low" => PerturbSpec::new(PerturbKind::Shadow2d)
            .with("strength", Param::Fixed(0.4))
            .with("sigma_x", Param::Fixed(0.15))
            .with("sigma_y", Param::Fixed(0.15)),
        "gs-med" => PerturbSpec::new(PerturbKind::Shadow2d)
            .with("strength", Param::Fixed(0.6))
            .with("sigma_x", Param::Fixed(0.20))
            .with("sigma_y", Param::Fixed(0.20)),
        "gs-high" => PerturbSpec::new(PerturbKind::Shadow2d)
            .with("strength", Param::Fixed(0.8))
            .with("sigma_x", Param::Fixed(0.25))
            .with("sigma_y", Param::Fixed(0.25)),
        "depth-linear-low" => {
            PerturbSpec::new(PerturbKind::DepthLinear).with("alpha", Param::Fixed(0.3))
        }
        "depth-linear-med" => {
            PerturbSpec::new(PerturbKind::DepthLinear).with("alpha", Param::Fixed(0.5))
        }
        "depth-linear-high" => {
            PerturbSpec::new(PerturbKind::DepthLinear).with("alpha", Param::Fixed(0.7))
        }
        "shadow-band-low" => PerturbSpec::new(PerturbKind::ShadowBand).with("sigma", Param::Fixed(0.1)),
        "shadow-band-med" => PerturbSpec::new(PerturbKind::ShadowBand).with("sigma", Param::Fixed(0.2)),
        "shadow-band-high" => PerturbSpec::new(PerturbKind::ShadowBand).with("sigma", Param::Fixed(0.3)),
        _ => return None,
    };
    Some(vec![spec])
}

/// The six-cell severity grid used by the robustness sweep: main-text depth
/// attenuation and shadow band at low/med/high.
pub fn robustness_grid() -> Vec<(String, Vec<PerturbSpec>)> {
    [
        "depth-linear-low",
        "depth-linear-med",
        "depth-linear-high",
        "shadow-band-low",
        "shadow-band-med",
        "shadow-band-high",
    ]
    .iter()
    .map(|name| (name.to_string(), preset(name).expect("grid preset exists")))
    .collect()
}
