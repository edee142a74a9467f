//! Deterministic synthetic detection scenes: colored geometric shapes on a
//! noisy background, with ground-truth boxes and proposal sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

const BACKGROUND: [f64; 3] = [0.20, 0.20, 0.20];
const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] =
    [[0.85, 0.20, 0.20], [0.20, 0.80, 0.25], [0.25, 0.35, 0.90]];

/// Everything that pins a dataset: image size, object statistics, noise,
/// class frequencies, and the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub noise_amp: f64,
    /// Relative sampling weight per class id 1..=3; normalized internally.
    pub class_probs: [f64; NUM_CLASSES],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            objects_min: 1,
            objects_max: 5,
            size_min: 12.0,
            size_max: 28.0,
            noise_amp: 0.05,
            class_probs: [0.6, 0.3, 0.1],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object count range [{}, {}] is invalid",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return Err(Error::Config("object size range is invalid".to_string()));
        }
        if self.size_max >= self.width.min(self.height) as f64 {
            return Err(Error::Config(
                "objects do not fit inside the image".to_string(),
            ));
        }
        if self.class_probs.iter().any(|&p| p < 0.0) || self.class_probs.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "class probabilities must be nonnegative".to_string(),
            ));
        }
        if self.noise_amp < 0.0 {
            return Err(Error::Config(
                "noise amplitude must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }

    /// Canonical one-line description; its hash pins every scene.
    pub fn manifest(&self) -> String {
        format!(
            "h={} w={} objects={}..{} size={:.6}..{:.6} noise={:.6} probs={:.6},{:.6},{:.6} seed={}",
            self.height,
            self.width,
            self.objects_min,
            self.objects_max,
            self.size_min,
            self.size_max,
            self.noise_amp,
            self.class_probs[0],
            self.class_probs[1],
            self.class_probs[2],
            self.seed
        )
    }

    /// FNV-1a over the manifest text.
    pub fn manifest_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.manifest().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// One rendered scene with its ground truth (box, class id 1..=3).
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub gt: Vec<(Box, usize)>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Interleaved RGB8 (row-major), for PNG export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let data = self.image.data();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((data[c * h * w + y * w + x] * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// Stateless seed mixing so every (seed, index) pair gets its own stream.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a).wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sample_class(rng: &mut ChaCha8Rng, probs: &[f64; NUM_CLASSES]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i + 1;
        }
        u -= p;
    }
    NUM_CLASSES
}

/// Deterministic function of (spec.seed, index): same arguments, same scene.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
    let (h, w) = (spec.height, spec.width);

    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut gt = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = sample_class(&mut rng, &spec.class_probs);
        let size = rng.random_range(spec.size_min..=spec.size_max);
        let cx = rng.random_range(size / 2.0..w as f64 - size / 2.0);
        let cy = rng.random_range(size / 2.0..h as f64 - size / 2.0);
        gt.push((Box::new(cx, cy, size, size)?, class_id));
    }

    let mut image = vec![0.0; 3 * h * w];
    for c in 0..3 {
        image[c * h * w..(c + 1) * h * w].fill(BACKGROUND[c]);
    }
    // Later objects paint over earlier ones.
    for &(box_, class_id) in &gt {
        paint_shape(&mut image, h, w, &box_, class_id);
    }
    if spec.noise_amp > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + rng.random_range(-spec.noise_amp..spec.noise_amp)).clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, h, w], image)?,
        gt,
    })
}

fn paint_shape(image: &mut [f64], h: usize, w: usize, box_: &Box, class_id: usize) {
    let color = CLASS_COLORS[class_id - 1];
    let (x1, y1, x2, y2) = box_.corners();
    let px1 = x1.floor().max(0.0) as usize;
    let py1 = y1.floor().max(0.0) as usize;
    let px2 = (x2.ceil() as usize).min(w);
    let py2 = (y2.ceil() as usize).min(h);
    for py in py1..py2 {
        for px in px1..px2 {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            if cx < x1 || cx >= x2 || cy < y1 || cy >= y2 {
                continue;
            }
            let inside = match class_id {
                1 => {
                    let dx = cx - box_.cx;
                    let dy = cy - box_.cy;
                    (dx * dx + dy * dy).sqrt() <= box_.w / 2.0
                }
                2 => true,
                _ => {
                    // Apex at top center, base along the bottom edge.
                    let t = (cy - y1) / box_.h;
                    (cx - box_.cx).abs() <= t * box_.w / 2.0
                }
            };
            if inside {
                for c in 0..3 {
                    image[c * h * w + py * w + px] = color[c];
                }
            }
        }
    }
}

/// Per ground-truth box, `n_per_gt` jittered copies (relative magnitude
/// `jitter` on center and size), plus `n_bg` uniform boxes; all clipped to
/// the image and deterministic in `seed`.
pub fn sample_proposals(
    scene: &SyntheticScene,
    n_per_gt: usize,
    n_bg: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<Box>> {
    if n_per_gt == 0 {
        return Err(Error::Parameter("n_per_gt must be at least 1".to_string()));
    }
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x70726f70));
    let mut proposals = Vec::with_capacity(scene.gt.len() * n_per_gt + n_bg);
    for &(gt, _) in &scene.gt {
        for _ in 0..n_per_gt {
            let b = if jitter == 0.0 {
                gt
            } else {
                let cx = gt.cx + rng.random_range(-jitter..jitter) * gt.w;
                let cy = gt.cy + rng.random_range(-jitter..jitter) * gt.h;
                let bw = gt.w * (1.0 + rng.random_range(-jitter..jitter));
                let bh = gt.h * (1.0 + rng.random_range(-jitter..jitter));
                Box::new(cx, cy, bw.max(1.0), bh.max(1.0))?
            };
            proposals.push(b.clip(w, h));
        }
    }
    for _ in 0..n_bg {
        let bw = rng.random_range(4.0..w / 2.0);
        let bh = rng.random_range(4.0..h / 2.0);
        let cx = rng.random_range(bw / 2.0..w - bw / 2.0);
        let cy = rng.random_range(bh / 2.0..h - bh / 2.0);
        proposals.push(Box::new(cx, cy, bw, bh)?.clip(w, h));
    }
    Ok(proposals)
}
