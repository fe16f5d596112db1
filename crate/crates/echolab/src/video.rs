//! Single-channel f32 video clips and the spatial augmentation used by both
//! pretraining objectives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A `T x H x W` clip with values in `[0,1]`, frame-major row-major, plus the
/// seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub seed: u64,
}

impl Video {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Video { t, h, w, data: vec![0.0; t * h * w], seed: 0 }
    }

    pub fn n_pixels(&self) -> usize {
        self.t * self.h * self.w
    }

    #[inline]
    pub fn frame(&self, ti: usize) -> &[f32] {
        &self.data[ti * self.h * self.w..(ti + 1) * self.h * self.w]
    }

    #[inline]
    pub fn frame_mut(&mut self, ti: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[ti * hw..(ti + 1) * hw]
    }

    #[inline]
    pub fn at(&self, ti: usize, y: usize, x: usize) -> f32 {
        self.data[(ti * self.h + y) * self.w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Bilinear sample of one frame at fractional coordinates, clamped to bounds.
fn sample_bilinear(frame: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let v00 = frame[y0 * w + x0];
    let v01 = frame[y0 * w + x1];
    let v10 = frame[y1 * w + x0];
    let v11 = frame[y1 * w + x1];
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    top + (bot - top) * fy
}

/// Random resized crop applied identically to every frame: area scale and
/// aspect ratio drawn uniformly, crop resized back to the input size.
pub fn random_resized_crop(video: &Video, scale: (f64, f64), aspect: (f64, f64), rng: &mut ChaCha8Rng) -> Video {
    let (h, w) = (video.h, video.w);
    let area = (h * w) as f64;
    // Sample until the crop fits; with the narrow default ranges this almost
    // never retries, but fall back to a full-frame crop after a few attempts.
    let mut crop = None;
    for _ in 0..10 {
        let s: f64 = rng.gen_range(scale.0..=scale.1);
        let a: f64 = rng.gen_range(aspect.0..=aspect.1);
        let target = area * s;
        let cw = (target * a).sqrt().round() as usize;
        let ch = (target / a).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=(w - cw));
            let y0 = rng.gen_range(0..=(h - ch));
            crop = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = crop.unwrap_or((0, 0, w, h));
    let mut out = Video::zeros(video.t, h, w);
    out.seed = video.seed;
    for ti in 0..video.t {
        let src = video.frame(ti);
        let dst = out.frame_mut(ti);
        for y in 0..h {
            // Map output pixel centers into the crop rectangle.
            let sy = y0 as f32 + (y as f32 + 0.5) / h as f32 * ch as f32 - 0.5;
            for x in 0..w {
                let sx = x0 as f32 + (x as f32 + 0.5) / w as f32 * cw as f32 - 0.5;
                dst[y * w + x] = sample_bilinear(src, h, w, sy, sx).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn full_crop_identity_when_scale_one() {
        let mut v = Video::zeros(2, 8, 8);
        for (i, p) in v.data.iter_mut().enumerate() {
            *p = (i % 13) as f32 / 13.0;
        }
        let mut rng = rng_from_seed(1);
        let out = random_resized_crop(&v, (1.0, 1.0), (1.0, 1.0), &mut rng);
        for (a, b) in v.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_consistent_across_frames() {
        let mut v = Video::zeros(3, 16, 16);
        for ti in 0..3 {
            for p in v.frame_mut(ti).iter_mut() {
                *p = 0.5;
            }
        }
        let mut rng = rng_from_seed(2);
        let out = random_resized_crop(&v, (0.5, 1.0), (0.9, 1.1), &mut rng);
        // Constant input stays constant under any crop if frames share it.
        for ti in 0..3 {
            for &p in out.frame(ti) {
                assert!((p - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_crop() {
        let mut v = Video::zeros(2, 16, 16);
        for (i, p) in v.data.iter_mut().enumerate() {
            *p = ((i * 7) % 11) as f32 / 11.0;
        }
        let a = random_resized_crop(&v, (0.5, 1.0), (0.9, 1.1), &mut rng_from_seed(9));
        let b = random_resized_crop(&v, (0.5, 1.0), (0.9, 1.1), &mut rng_from_seed(9));
        assert_eq!(a.data, b.data);
    }
}
