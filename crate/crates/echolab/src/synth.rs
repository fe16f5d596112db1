//! Deterministic generator of echo-like cine clips with known ground truth.
//!
//! Each patient gets an ejection fraction `ef`, two latent factors `a` and
//! `b`, and one clip per view layout. All chambers oscillate one full cycle
//! over the clip with fractional area change `ef`. Factor `a` is rendered
//! only in view 0 (myocardium thickness) and `b` only in view 2 (size of a
//! bright inclusion); the composite target `rv = (a + b) / 2` therefore needs
//! both views.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::ScanMask;
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::video::Video;

pub const N_VIEWS: usize = 3;

const TISSUE: f32 = 0.30;
const CHAMBER: f32 = 0.05;
const RING: f32 = 0.85;
const INCLUSION: f32 = 0.95;

/// Idealized scan sector: apex, half-angle (radians), max radius (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorGeometry {
    pub apex_x: f32,
    pub apex_y: f32,
    pub half_angle: f32,
    pub max_radius: f32,
}

impl SectorGeometry {
    /// Default sector for a given frame size: apex at top-center, opening
    /// downward, radius just inside the frame.
    pub fn default_for(h: usize, w: usize) -> Self {
        SectorGeometry {
            apex_x: (w as f32 - 1.0) / 2.0,
            apex_y: 0.0,
            half_angle: 0.72,
            max_radius: 0.95 * h as f32,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.half_angle <= 0.0 || self.half_angle >= std::f32::consts::FRAC_PI_2 {
            return Err(Error::invalid(format!(
                "sector half_angle must be in (0, pi/2), got {}",
                self.half_angle
            )));
        }
        if self.apex_y > h as f32 {
            return Err(Error::invalid("sector apex must be inside or above the frame"));
        }
        let diag = ((h * h + w * w) as f32).sqrt();
        if self.max_radius <= 0.0 || self.max_radius > diag {
            return Err(Error::invalid(format!(
                "sector max_radius must be in (0, diagonal], got {}",
                self.max_radius
            )));
        }
        Ok(())
    }

    /// Binary sector mask: pixel (x, y) is inside iff its distance from the
    /// apex is at most `max_radius` and the angle from the downward vertical,
    /// `atan2(x - apex_x, y - apex_y)`, is within the half-angle.
    pub fn mask(&self, h: usize, w: usize) -> Result<ScanMask> {
        self.validate(h, w)?;
        let mut bits = vec![0u8; h * w];
        let r2 = self.max_radius * self.max_radius;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f32 - self.apex_x;
                let dy = y as f32 - self.apex_y;
                if dx * dx + dy * dy <= r2 && dx.atan2(dy).abs() <= self.half_angle {
                    bits[y * w + x] = 1;
                }
            }
        }
        Ok(ScanMask { h, w, bits })
    }
}

/// One rendered clip plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub video: Video,
    pub view_class: usize,
    pub ef_truth: f32,
    pub rv_truth: f32,
    pub seed: u64,
}

/// Full control over the per-patient latent factors.
#[derive(Debug, Clone, Copy)]
pub struct ClipParams {
    pub view_class: usize,
    pub ef: f32,
    pub a: f32,
    pub b: f32,
    pub speckle_strength: f32,
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Ellipse {
    /// Approximate signed-distance coverage of the pixel at (x, y):
    /// 1 deep inside, 0 outside, smooth across the boundary.
    fn coverage(&self, x: f32, y: f32) -> f32 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let f = dx * dx + dy * dy - 1.0;
        let gx = 2.0 * (x - self.cx) / (self.rx * self.rx);
        let gy = 2.0 * (y - self.cy) / (self.ry * self.ry);
        let grad = (gx * gx + gy * gy).sqrt().max(1e-6);
        (0.5 - f / grad).clamp(0.0, 1.0)
    }
}

fn paint(frame: &mut [f32], w: usize, e: &Ellipse, value: f32) {
    // Only touch the bounding box.
    let x0 = (e.cx - e.rx - 1.0).floor().max(0.0) as usize;
    let x1 = ((e.cx + e.rx + 2.0).ceil() as usize).min(w);
    let h = frame.len() / w;
    let y0 = (e.cy - e.ry - 1.0).floor().max(0.0) as usize;
    let y1 = ((e.cy + e.ry + 2.0).ceil() as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let c = e.coverage(x as f32, y as f32);
            if c > 0.0 {
                let p = &mut frame[y * w + x];
                *p += (value - *p) * c;
            }
        }
    }
}

/// Chamber layouts per view class, in fractions of (w, h). Each chamber is
/// (cx, cy, rx, ry).
fn layout(view_class: usize, w: f32, h: f32, a: f32, b: f32) -> (Vec<Ellipse>, f32, Option<Ellipse>) {
    let thickness_base = 0.045 * h;
    match view_class {
        0 => {
            // Single large chamber; `a` controls wall thickness.
            let chambers = vec![Ellipse { cx: 0.50 * w, cy: 0.56 * h, rx: 0.17 * w, ry: 0.15 * h }];
            let thickness = thickness_base * (0.7 + 1.3 * a);
            (chambers, thickness, None)
        }
        1 => {
            // Two stacked chambers.
            let chambers = vec![
                Ellipse { cx: 0.42 * w, cy: 0.42 * h, rx: 0.115 * w, ry: 0.095 * h },
                Ellipse { cx: 0.58 * w, cy: 0.68 * h, rx: 0.105 * w, ry: 0.090 * h },
            ];
            (chambers, thickness_base, None)
        }
        2 => {
            // Two side-by-side chambers plus a bright inclusion whose size
            // tracks `b`.
            let chambers = vec![
                Ellipse { cx: 0.36 * w, cy: 0.57 * h, rx: 0.115 * w, ry: 0.105 * h },
                Ellipse { cx: 0.64 * w, cy: 0.57 * h, rx: 0.100 * w, ry: 0.092 * h },
            ];
            let r = (0.030 + 0.055 * b) * w;
            let inclusion = Ellipse { cx: 0.50 * w, cy: 0.28 * h, rx: r, ry: r };
            (chambers, thickness_base, Some(inclusion))
        }
        _ => panic!("view_class {view_class} out of range, expected 0..{N_VIEWS}"),
    }
}

/// Renders a clip from explicit parameters. Pure in `(seed, params, dims)`.
pub fn render_clip(
    seed: u64,
    geometry: &SectorGeometry,
    params: &ClipParams,
    t: usize,
    h: usize,
    w: usize,
) -> Result<SyntheticClip> {
    if !(0.1..=0.8).contains(&params.ef) {
        return Err(Error::invalid(format!("ef must be in [0.1, 0.8], got {}", params.ef)));
    }
    if t < 8 {
        return Err(Error::invalid(format!("clip length must be at least 8 frames, got {t}")));
    }
    if params.view_class >= N_VIEWS {
        return Err(Error::invalid(format!("view_class must be in 0..{N_VIEWS}, got {}", params.view_class)));
    }
    let mask = geometry.mask(h, w)?;
    let (chambers, thickness, inclusion) = layout(params.view_class, w as f32, h as f32, params.a, params.b);
    let mut video = Video::zeros(t, h, w);
    video.seed = seed;
    for ti in 0..t {
        // Area oscillates one full cycle: A(t) = A_d * (1 - ef*(1-cos)/2),
        // so axes scale by sqrt of the area factor.
        let phase = 2.0 * std::f32::consts::PI * ti as f32 / t as f32;
        let area_factor = 1.0 - params.ef * (1.0 - phase.cos()) / 2.0;
        let axis_scale = area_factor.sqrt();
        let frame = video.frame_mut(ti);
        frame.fill(TISSUE);
        for ch in &chambers {
            let inner = Ellipse { cx: ch.cx, cy: ch.cy, rx: ch.rx * axis_scale, ry: ch.ry * axis_scale };
            let outer = Ellipse {
                cx: ch.cx,
                cy: ch.cy,
                rx: inner.rx + thickness,
                ry: inner.ry + thickness,
            };
            paint(frame, w, &outer, RING);
            paint(frame, w, &inner, CHAMBER);
        }
        if let Some(inc) = &inclusion {
            paint(frame, w, inc, INCLUSION);
        }
        if params.speckle_strength > 0.0 {
            let mut rng = rng_from_seed(derive_seed_indexed(seed, "speckle", ti as u64));
            for p in frame.iter_mut() {
                let r = rayleigh_unit_mean(&mut rng);
                *p = (*p * (1.0 + params.speckle_strength * (r - 1.0))).clamp(0.0, 1.0);
            }
        }
        for (p, &m) in frame.iter_mut().zip(&mask.bits) {
            if m == 0 {
                *p = 0.0;
            }
        }
    }
    Ok(SyntheticClip {
        video,
        view_class: params.view_class,
        ef_truth: params.ef,
        rv_truth: rv_target(params.a, params.b),
        seed,
    })
}

/// The two-view composite target.
pub fn rv_target(a: f32, b: f32) -> f32 {
    (a + b) / 2.0
}

/// Rayleigh sample with unit mean via inverse CDF: `R = sigma*sqrt(-2 ln U)`
/// with `sigma = sqrt(2/pi)`.
fn rayleigh_unit_mean(rng: &mut ChaCha8Rng) -> f32 {
    let sigma = (2.0 / std::f32::consts::PI).sqrt();
    let u: f32 = rng.gen_range(f32::EPSILON..1.0);
    sigma * (-2.0 * u.ln()).sqrt()
}

/// Renders a clip with latent factors derived from the seed.
pub fn generate_clip(
    seed: u64,
    geometry: &SectorGeometry,
    view_class: usize,
    ef: f32,
    speckle_strength: f32,
    t: usize,
    h: usize,
    w: usize,
) -> Result<SyntheticClip> {
    let mut rng = rng_from_seed(derive_seed(seed, "latent"));
    let a: f32 = rng.gen_range(0.0..1.0);
    let b: f32 = rng.gen_range(0.0..1.0);
    render_clip(seed, geometry, &ClipParams { view_class, ef, a, b, speckle_strength }, t, h, w)
}

/// Recovers the ejection fraction of a (noiseless) clip by soft-counting
/// chamber pixels per frame: darkness relative to the tissue level sums to an
/// area estimate, and `ef = 1 - min_area / max_area`.
pub fn ef_from_clip(video: &Video, mask: &ScanMask) -> f32 {
    let hw = video.h * video.w;
    let mut min_area = f32::INFINITY;
    let mut max_area = f32::NEG_INFINITY;
    for ti in 0..video.t {
        let frame = &video.data[ti * hw..(ti + 1) * hw];
        let mut area = 0.0f32;
        for (i, &v) in frame.iter().enumerate() {
            if mask.bits[i] != 0 {
                area += ((TISSUE - v) / (TISSUE - CHAMBER)).clamp(0.0, 1.0);
            }
        }
        min_area = min_area.min(area);
        max_area = max_area.max(area);
    }
    1.0 - min_area / max_area
}

// ── dataset generation ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub seed: u64,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_hw")]
    pub h: usize,
    #[serde(default = "default_hw")]
    pub w: usize,
    #[serde(default = "default_speckle")]
    pub speckle_strength: f32,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_t() -> usize {
    8
}
fn default_hw() -> usize {
    32
}
fn default_speckle() -> f32 {
    0.4
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_val_frac() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(n_clips: usize, seed: u64) -> Self {
        SynthConfig {
            n_clips,
            seed,
            t: default_t(),
            h: default_hw(),
            w: default_hw(),
            speckle_strength: default_speckle(),
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One row of the labels table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub view_class: usize,
    pub ef: f32,
    pub rv: f32,
    pub split: Split,
}

impl LabelRow {
    /// Clip ids are `s<patient>v<view>`; the study id is the patient part.
    pub fn study_id(&self) -> &str {
        self.id.split('v').next().unwrap_or(&self.id)
    }
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: Vec<LabelRow>,
    pub clips: Vec<Video>,
    pub config: SynthConfig,
}

impl Dataset {
    pub fn geometry(&self) -> SectorGeometry {
        SectorGeometry::default_for(self.config.h, self.config.w)
    }

    pub fn indices_of_split(&self, split: Split) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Generates the dataset deterministically in memory: patients are sampled
/// from the master seed, rendered one clip per view (patient-major order),
/// shuffled at patient level, and split into exact clip counts.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    if config.n_clips == 0 {
        return Err(Error::invalid("n_clips must be positive"));
    }
    let f_test = 1.0 - config.train_frac - config.val_frac;
    if config.train_frac < 0.0 || config.val_frac < 0.0 || f_test < -1e-9 {
        return Err(Error::invalid("split fractions must be nonnegative and sum to at most 1"));
    }
    let geometry = SectorGeometry::default_for(config.h, config.w);
    let n_patients = config.n_clips.div_ceil(N_VIEWS);

    // Patient-level shuffle decides split membership; clip-level counts are
    // exact (a boundary patient may straddle two splits, which only yields a
    // partial study in each).
    let mut order: Vec<usize> = (0..n_patients).collect();
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, "split"));
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let n = config.n_clips;
    let n_train = (config.train_frac * n as f64 + 0.5).floor() as usize;
    let n_val = (config.val_frac * n as f64 + 0.5).floor() as usize;

    let mut rows = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    let mut emitted = 0usize;
    for &patient in &order {
        if emitted == n {
            break;
        }
        let patient_seed = derive_seed_indexed(config.seed, "patient", patient as u64);
        let mut prng = rng_from_seed(patient_seed);
        let ef: f32 = prng.gen_range(0.1..=0.8);
        let a: f32 = prng.gen_range(0.0..1.0);
        let b: f32 = prng.gen_range(0.0..1.0);
        for view in 0..N_VIEWS {
            if emitted == n {
                break;
            }
            let clip_seed = derive_seed_indexed(patient_seed, "view", view as u64);
            let clip = render_clip(
                clip_seed,
                &geometry,
                &ClipParams { view_class: view, ef, a, b, speckle_strength: config.speckle_strength },
                config.t,
                config.h,
                config.w,
            )?;
            let split = if emitted < n_train {
                Split::Train
            } else if emitted < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            rows.push(LabelRow {
                id: format!("s{patient:05}v{view}"),
                view_class: view,
                ef,
                rv: clip.rv_truth,
                split,
            });
            clips.push(clip.video);
            emitted += 1;
        }
    }
    Ok(Dataset { rows, clips, config: config.clone() })
}

/// Serializes the labels table (`id,view_class,ef,rv,split`).
pub fn labels_to_csv(rows: &[LabelRow]) -> String {
    let mut out = String::from("id,view_class,ef,rv,split\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{}", r.id, r.view_class, r.ef, r.rv, r.split);
    }
    out
}

pub fn labels_from_csv(text: &str) -> Result<Vec<LabelRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty labels table"))?;
    if header.trim() != "id,view_class,ef,rv,split" {
        return Err(Error::invalid(format!("unexpected labels header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::invalid(format!("labels row {i}: expected 5 fields")));
        }
        rows.push(LabelRow {
            id: parts[0].to_string(),
            view_class: parts[1].parse().map_err(|_| Error::invalid(format!("labels row {i}: bad view")))?,
            ef: parts[2].parse().map_err(|_| Error::invalid(format!("labels row {i}: bad ef")))?,
            rv: parts[3].parse().map_err(|_| Error::invalid(format!("labels row {i}: bad rv")))?,
            split: parts[4].parse()?,
        });
    }
    Ok(rows)
}

/// Writes clips and the labels table under `out_dir`.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<()> {
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir)?;
    for (row, clip) in dataset.rows.iter().zip(&dataset.clips) {
        crate::container::write_clip(&clip_dir.join(format!("{}.ecv", row.id)), clip)?;
    }
    std::fs::write(out_dir.join("labels.csv"), labels_to_csv(&dataset.rows))?;
    Ok(())
}
