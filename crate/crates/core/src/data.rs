//! Synthetic crowded scenes: generation, rasterization and JSON-lines storage.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng::{stream, Stream};

const MAX_ATTEMPTS: usize = 1000;
/// Allowed excess IoU between a new box and boxes other than its seed.
const NEIGHBOR_SLACK: f64 = 0.1;
/// Relative size jitter between a box and the box it is placed against.
const SIZE_JITTER: (f64, f64) = (0.85, 1.15);
/// Height over width of generated boxes.
const ASPECT: (f64, f64) = (1.0, 2.0);
/// Count channel saturates at this many overlapping boxes.
const COUNT_CLAMP: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub crowd_level: f64,
    pub boxes: Vec<BBox>,
}

impl Scene {
    /// Mirror image of the scene, horizontally and/or vertically.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Scene {
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let cx = if horizontal { 1.0 - b.cx } else { b.cx };
                let cy = if vertical { 1.0 - b.cy } else { b.cy };
                BBox::new(cx, cy, b.w, b.h)
            })
            .collect();
        Scene { boxes, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub object_count_range: (usize, usize),
    /// Box widths are drawn from this range (normalized units).
    pub size_range: (f64, f64),
    pub crowd_level_range: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 250,
            object_count_range: (1, 12),
            size_range: (0.1, 0.3),
            crowd_level_range: (0.0, 0.5),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be at least 1".into()));
        }
        let (lo, hi) = self.object_count_range;
        if lo > hi {
            return Err(Error::Config(format!("object_count_range ({lo}, {hi}) is empty")));
        }
        let (a, b) = self.size_range;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return Err(Error::Config(format!("size_range ({a}, {b}) must satisfy 0 < min <= max < 1")));
        }
        let (a, b) = self.crowd_level_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("crowd_level_range ({a}, {b}) must lie in [0, 1]")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_box(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> BBox {
    let w = uniform(rng, spec.size_range);
    let h = (w * uniform(rng, ASPECT)).min(0.95);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    BBox::new(cx, cy, w, h)
}

/// Box of size `(w, h)` displaced from `seed` along `dir` so its IoU with
/// `seed` is close to `target`.
fn place_against(seed: BBox, w: f64, h: f64, dir: (f64, f64), target: f64) -> BBox {
    let at = |d: f64| BBox::new(seed.cx + d * dir.0, seed.cy + d * dir.1, w, h);
    if iou(at(0.0), seed) <= target {
        return at(0.0);
    }
    let (mut lo, mut hi) = (0.0, 2.0 * (seed.w + seed.h + w + h));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if iou(at(mid), seed) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

fn try_place(spec: &DatasetSpec, rng: &mut ChaCha8Rng, placed: &[BBox], crowd: f64) -> Option<BBox> {
    if crowd <= 0.0 || placed.is_empty() {
        let b = random_box(spec, rng);
        let disjoint = crowd > 0.0 || placed.iter().all(|p| iou(*p, b) == 0.0);
        return disjoint.then_some(b);
    }
    let seed = placed[rng.gen_range(0..placed.len())];
    let s = uniform(rng, SIZE_JITTER);
    let (w, h) = (seed.w * s, (seed.h * s).min(0.95));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let b = place_against(seed, w, h, (angle.cos(), angle.sin()), crowd);
    let inside = b.inside_unit(0.0);
    let crowded = placed
        .iter()
        .filter(|p| **p != seed)
        .any(|p| iou(*p, b) > crowd + NEIGHBOR_SLACK);
    (inside && !crowded).then_some(b)
}

/// Draws one scene. Boxes after the first are placed against a random
/// earlier box at an IoU equal to the crowd level; crowd level 0 places
/// disjoint boxes by rejection. After [`MAX_ATTEMPTS`] failures the target
/// is halved (eventually to an unconstrained placement).
pub fn generate_scene(spec: &DatasetSpec, id: u64) -> Scene {
    let mut rng = stream(spec.seed.wrapping_add(id), Stream::Data);
    let (lo, hi) = spec.object_count_range;
    let count = rng.gen_range(lo..=hi);
    let crowd_level = uniform(&mut rng, spec.crowd_level_range);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    while boxes.len() < count {
        let mut target = crowd_level;
        let mut relaxations = 0;
        let b = loop {
            if let Some(b) = (0..MAX_ATTEMPTS).find_map(|_| try_place(spec, &mut rng, &boxes, target)) {
                break b;
            }
            relaxations += 1;
            if relaxations > 8 {
                break random_box(spec, &mut rng);
            }
            target = if target <= 0.0 { 0.05 } else { target * 0.5 };
        };
        if relaxations > 0 {
            warn!(
                "scene {id}: relaxed crowd target from {crowd_level:.3} to {target:.3} for box {}",
                boxes.len()
            );
        }
        boxes.push(b);
    }
    Scene { id, crowd_level, boxes }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..spec.n_images as u64).map(|id| generate_scene(spec, id)).collect())
}

/// Mean over boxes of the largest IoU with any other box (0 below two boxes).
pub fn mean_neighbor_iou(boxes: &[BBox]) -> f64 {
    if boxes.len() < 2 {
        return 0.0;
    }
    let total: f64 = boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            boxes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| iou(*a, *b))
                .fold(0.0, f64::max)
        })
        .sum();
    total / boxes.len() as f64
}

/// Integer pixel span `[start, end)` whose centers fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, size: usize) -> (usize, usize) {
    let s = size as f64;
    let first = (lo * s - 0.5).ceil().max(0.0) as usize;
    let end = ((hi * s - 0.5).ceil().max(0.0) as usize).min(size);
    (first.min(end), end)
}

/// Rasterizes a scene into `3 x S x S`: overlap count (saturating at 4,
/// scaled to [0, 1]), per-box edge indicator, and `sqrt(w h)` of the
/// smallest covering box. A pixel is covered when its center lies in the box.
pub fn render_scene(scene: &Scene, image_size: usize) -> Tensor {
    let s = image_size;
    let mut data = vec![0.0; 3 * s * s];
    let mut count = vec![0usize; s * s];
    let mut smallest = vec![f64::INFINITY; s * s];
    for b in &scene.boxes {
        let c = b.to_corners();
        let (x0, x1) = pixel_span(c.x1, c.x2, s);
        let (y0, y1) = pixel_span(c.y1, c.y2, s);
        let size = (b.w * b.h).sqrt();
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * s + x;
                count[p] += 1;
                smallest[p] = smallest[p].min(size);
                if x == x0 || x + 1 == x1 || y == y0 || y + 1 == y1 {
                    data[s * s + p] = 1.0;
                }
            }
        }
    }
    for p in 0..s * s {
        data[p] = count[p].min(COUNT_CLAMP) as f64 / COUNT_CLAMP as f64;
        if count[p] > 0 {
            data[2 * s * s + p] = smallest[p];
        }
    }
    Tensor::new(vec![3, s, s], data).expect("render shape matches data")
}

/// Training part and held-out part (the last 20% by id).
pub fn split(scenes: &[Scene]) -> (Vec<Scene>, Vec<Scene>) {
    let mut sorted = scenes.to_vec();
    sorted.sort_by_key(|s| s.id);
    let held = scenes.len() / 5;
    let train = sorted.len() - held;
    let test = sorted.split_off(train);
    (sorted, test)
}

pub fn save_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&out)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(boxes: Vec<BBox>) -> Scene {
        Scene {
            id: 0,
            crowd_level: 0.0,
            boxes,
        }
    }

    #[test]
    fn empty_scene_renders_zero() {
        let spec = DatasetSpec {
            object_count_range: (0, 0),
            ..DatasetSpec::default()
        };
        let s = generate_scene(&spec, 3);
        assert!(s.boxes.is_empty());
        assert!(render_scene(&s, 16).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_image_box() {
        let t = render_scene(&one(vec![BBox::new(0.5, 0.5, 1.0, 1.0)]), 8);
        let d = t.data();
        assert!(d[..64].iter().all(|&v| v == 0.25));
        for y in 0..8 {
            for x in 0..8 {
                let border = x == 0 || y == 0 || x == 7 || y == 7;
                assert_eq!(d[64 + y * 8 + x] == 1.0, border, "({x}, {y})");
                assert_eq!(d[128 + y * 8 + x], 1.0);
            }
        }
    }

    #[test]
    fn count_support_matches_pixel_area() {
        // 0.25 x 0.5 of a 16-pixel side covers 4 x 8 pixel centers.
        let a = BBox::new(0.25, 0.5, 0.25, 0.5);
        let b = BBox::new(0.8, 0.2, 0.25, 0.25);
        let t = render_scene(&one(vec![a, b]), 16);
        let support = t.data()[..256].iter().filter(|&&v| v > 0.0).count();
        assert_eq!(support, 4 * 8 + 4 * 4);
    }

    #[test]
    fn overlap_count_saturates() {
        let b = BBox::new(0.5, 0.5, 0.5, 0.5);
        let t = render_scene(&one(vec![b; 6]), 8);
        assert_eq!(t.data()[3 * 8 + 3], 1.0);
        let small = BBox::new(0.5, 0.5, 0.25, 0.25);
        let t = render_scene(&one(vec![b, small]), 8);
        assert_eq!(t.data()[128 + 3 * 8 + 3], 0.25);
        assert_eq!(t.data()[3 * 8 + 3], 0.5);
    }

    #[test]
    fn zero_crowd_is_disjoint() {
        let spec = DatasetSpec {
            crowd_level_range: (0.0, 0.0),
            object_count_range: (2, 6),
            ..DatasetSpec::default()
        };
        for id in 0..20 {
            let s = generate_scene(&spec, id);
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    assert_eq!(iou(*a, *b), 0.0);
                }
            }
        }
    }

    #[test]
    fn boxes_stay_in_image_and_count_in_range() {
        let spec = DatasetSpec::default();
        for s in generate_dataset(&DatasetSpec { n_images: 40, ..spec.clone() }).unwrap() {
            assert!((1..=12).contains(&s.boxes.len()));
            assert!(s.boxes.iter().all(|b| b.inside_unit(1e-12)));
            assert!((0.0..=0.5).contains(&s.crowd_level));
        }
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        let spec = DatasetSpec {
            n_images: 10,
            seed: 9,
            ..DatasetSpec::default()
        };
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let other = DatasetSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_dataset(&spec).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let bad = DatasetSpec {
            object_count_range: (3, 2),
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetSpec {
            crowd_level_range: (0.2, 1.5),
            ..DatasetSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_holds_out_last_fifth() {
        let spec = DatasetSpec {
            n_images: 10,
            ..DatasetSpec::default()
        };
        let (train, test) = split(&generate_dataset(&spec).unwrap());
        assert_eq!(train.len(), 8);
        assert_eq!(test.iter().map(|s| s.id).collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn neighbor_iou() {
        assert_eq!(mean_neighbor_iou(&[BBox::new(0.5, 0.5, 0.2, 0.2)]), 0.0);
        let a = BBox::new(0.3, 0.5, 0.2, 0.2);
        assert_eq!(mean_neighbor_iou(&[a, a]), 1.0);
    }
}
