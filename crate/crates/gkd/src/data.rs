//! Synthetic detection scenes: bright geometric shapes on a dark ground.
//!
//! Three classes, told apart by shape and intensity: circles (0.9), squares
//! (0.7), and upward triangles (0.5) on a 0.15 background. Objects are
//! placed by rejection sampling so no pair overlaps badly; pixel noise is
//! added last and the image is quantized to the 8-bit grid the on-disk
//! format uses, so an in-memory scene and its disk round trip are
//! identical.
//!
//! Scene randomness derives from `(dataset seed, split, scene index)`
//! through a 64-bit mix, so any scene can be regenerated in isolation and
//! train/val streams never share draws.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::io::{read_pgm, write_pgm, GrayImage};
use crate::tensor::Tensor;

/// Circle, square, triangle.
pub const NUM_SHAPE_CLASSES: usize = 3;

/// Fill intensity per class.
pub const SHAPE_INTENSITY: [f64; NUM_SHAPE_CLASSES] = [0.9, 0.7, 0.5];

const BACKGROUND: f64 = 0.15;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bounding-box side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Standard deviation of per-pixel Gaussian noise (0 disables it).
    pub noise_sigma: f64,
    /// Largest allowed IoU between any two placed boxes.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 10.0,
            max_size: 26.0,
            noise_sigma: 0.02,
            max_overlap: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::invalid("scene config", "image size must be positive".to_string()));
        }
        if !(2.0 <= self.min_size && self.min_size <= self.max_size) {
            return Err(Error::invalid(
                "scene config",
                format!("need 2 <= min_size <= max_size, got {} / {}", self.min_size, self.max_size),
            ));
        }
        if self.max_size > self.image_size as f64 {
            return Err(Error::invalid(
                "scene config",
                format!("max_size {} exceeds image size {}", self.max_size, self.image_size),
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid(
                "scene config",
                format!("min_objects {} > max_objects {}", self.min_objects, self.max_objects),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(Error::invalid("scene config", format!("max_overlap {} not in [0, 1]", self.max_overlap)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("scene config", format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub objects: Vec<GroundTruth>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The seed that generates scene `index` of split `split_id`.
pub fn scene_seed(dataset_seed: u64, split_id: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(dataset_seed) ^ split_id) ^ index)
}

/// Generates one scene from an explicit seed.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let side = size as f64;

    let wanted = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(wanted);
    'place: for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class_id = rng.gen_range(0..NUM_SHAPE_CLASSES);
            let s = rng.gen_range(config.min_size..=config.max_size);
            let x0 = rng.gen_range(0.0..=(side - s));
            let y0 = rng.gen_range(0.0..=(side - s));
            let bbox = BBox::new(x0, y0, x0 + s, y0 + s)?;
            let crowded =
                objects.iter().any(|o| crate::eval::iou(&o.bbox, &bbox) > config.max_overlap);
            if !crowded {
                objects.push(GroundTruth { bbox, class_id });
                continue 'place;
            }
        }
        // The scene is too crowded to host another object; stop with fewer.
        break;
    }

    let mut pixels = vec![BACKGROUND; size * size];
    for gt in &objects {
        draw_shape(&mut pixels, size, gt);
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| Error::invalid("scene config", e.to_string()))?;
        for p in &mut pixels {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    // Snap to the 8-bit grid so memory and disk agree exactly.
    for p in &mut pixels {
        *p = (*p * 255.0 + 0.5).floor() / 255.0;
    }
    Ok(Scene { image: GrayImage { width: size, height: size, pixels }, objects })
}

fn draw_shape(pixels: &mut [f64], size: usize, gt: &GroundTruth) {
    let b = &gt.bbox;
    let value = SHAPE_INTENSITY[gt.class_id];
    let (cx, cy) = b.center();
    let half = b.width() / 2.0;
    let x_lo = b.x_min.floor().max(0.0) as usize;
    let x_hi = (b.x_max.ceil() as usize).min(size);
    let y_lo = b.y_min.floor().max(0.0) as usize;
    let y_hi = (b.y_max.ceil() as usize).min(size);
    for y in y_lo..y_hi {
        let py = y as f64 + 0.5;
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let inside = match gt.class_id {
                0 => {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= half * half
                }
                1 => px >= b.x_min && px < b.x_max && py >= b.y_min && py < b.y_max,
                _ => {
                    // Upward triangle: apex (cx, y_min), base along y_max.
                    let down = py - b.y_min;
                    down >= 0.0 && down <= b.height() && (px - cx).abs() <= down / 2.0
                }
            };
            if inside {
                pixels[y * size + x] = value;
            }
        }
    }
}

/// Generates `count` scenes for one split of a dataset.
/// Returns the scenes plus how many came out with fewer objects than
/// requested because placement kept colliding.
pub fn generate_scenes(
    config: &SceneConfig,
    count: usize,
    dataset_seed: u64,
    split_id: u64,
) -> Result<(Vec<Scene>, usize)> {
    let mut scenes = Vec::with_capacity(count);
    let mut truncated = 0usize;
    for index in 0..count {
        let scene = generate_scene(config, scene_seed(dataset_seed, split_id, index as u64))?;
        if scene.objects.len() < config.min_objects {
            truncated += 1;
        }
        scenes.push(scene);
    }
    Ok((scenes, truncated))
}

/// Stacks selected scenes into a `[B, 1, H, W]` image batch.
pub fn images_tensor(scenes: &[Scene], indices: &[usize]) -> Result<Tensor> {
    let Some(first) = indices.first().map(|&i| &scenes[i]) else {
        return Err(Error::invalid("batch", "empty index list".to_string()));
    };
    let (w, h) = (first.image.width, first.image.height);
    let mut values = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let img = &scenes[i].image;
        if (img.width, img.height) != (w, h) {
            return Err(Error::shape(
                "batch",
                format!("scene {i} is {}x{}, batch is {w}x{h}", img.width, img.height),
            ));
        }
        values.extend_from_slice(&img.pixels);
    }
    Tensor::new(&[indices.len(), 1, h, w], values)
}

/// Ground-truth lists for the same selection, aligned with
/// [`images_tensor`].
pub fn ground_truth_of(scenes: &[Scene], indices: &[usize]) -> Vec<Vec<GroundTruth>> {
    indices.iter().map(|&i| scenes[i].objects.clone()).collect()
}

// ── disk format ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig { scene: SceneConfig::default(), train_scenes: 500, val_scenes: 100, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub objects: usize,
    /// Scenes that ended up with fewer objects than requested.
    pub truncated_scenes: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    file: String,
    boxes: Vec<(f64, f64, f64, f64, usize)>,
}

pub const TRAIN_SPLIT: u64 = 0;
pub const VAL_SPLIT: u64 = 1;

/// Writes a `train/` and `val/` split under `dir`, each holding one `.pgm`
/// per scene plus an `annotations.jsonl`. Refuses to touch an existing
/// dataset unless `overwrite` is set.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path, overwrite: bool) -> Result<DatasetSummary> {
    config.scene.validate()?;
    let mut summary = DatasetSummary::default();
    for (split_name, split_id, count) in
        [("train", TRAIN_SPLIT, config.train_scenes), ("val", VAL_SPLIT, config.val_scenes)]
    {
        let split_dir = dir.join(split_name);
        let manifest = split_dir.join("annotations.jsonl");
        if manifest.exists() && !overwrite {
            return Err(Error::invalid(
                "dataset",
                format!("{} exists; pass overwrite to replace it", manifest.display()),
            ));
        }
        std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let (scenes, truncated) = generate_scenes(&config.scene, count, config.seed, split_id)?;
        summary.truncated_scenes += truncated;
        let mut manifest_body = String::new();
        for (i, scene) in scenes.iter().enumerate() {
            let file = format!("scene_{i:05}.pgm");
            write_pgm(&split_dir.join(&file), &scene.image)?;
            let record = SceneRecord {
                file,
                boxes: scene
                    .objects
                    .iter()
                    .map(|o| (o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max, o.class_id))
                    .collect(),
            };
            manifest_body.push_str(
                &serde_json::to_string(&record)
                    .map_err(|e| Error::format(&manifest, format!("encode: {e}")))?,
            );
            manifest_body.push('\n');
            summary.objects += scene.objects.len();
        }
        super::io::write_atomic(&manifest, manifest_body.as_bytes())?;
        match split_id {
            TRAIN_SPLIT => summary.train_scenes = scenes.len(),
            _ => summary.val_scenes = scenes.len(),
        }
    }
    Ok(summary)
}

/// Loads one split directory written by [`generate_dataset`].
pub fn load_split(split_dir: &Path) -> Result<Vec<Scene>> {
    let manifest = split_dir.join("annotations.jsonl");
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut scenes = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: SceneRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&manifest, format!("bad record: {e}")))?;
        let image = read_pgm(&split_dir.join(&record.file))?;
        let objects = record
            .boxes
            .iter()
            .map(|&(x0, y0, x1, y1, class_id)| {
                if class_id >= NUM_SHAPE_CLASSES {
                    return Err(Error::format(
                        &manifest,
                        format!("{}: class {class_id} out of range", record.file),
                    ));
                }
                Ok(GroundTruth { bbox: BBox::new(x0, y0, x1, y1)?, class_id })
            })
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene { image, objects });
    }
    Ok(scenes)
}

/// Loads `(train, val)` from a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok((load_split(&dir.join("train"))?, load_split(&dir.join("val"))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::iou;
    use proptest::prelude::*;

    #[test]
    fn same_seed_reproduces_the_scene_exactly() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 123).unwrap();
        let b = generate_scene(&cfg, 123).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 124).unwrap();
        assert_ne!(a.image.pixels, c.image.pixels);
    }

    #[test]
    fn split_streams_are_distinct() {
        assert_ne!(scene_seed(7, TRAIN_SPLIT, 0), scene_seed(7, VAL_SPLIT, 0));
        assert_ne!(scene_seed(7, TRAIN_SPLIT, 0), scene_seed(8, TRAIN_SPLIT, 0));
        assert_ne!(scene_seed(7, TRAIN_SPLIT, 0), scene_seed(7, TRAIN_SPLIT, 1));
    }

    #[test]
    fn all_classes_appear_at_reasonable_rates() {
        let cfg = SceneConfig::default();
        let (scenes, _) = generate_scenes(&cfg, 150, 0, TRAIN_SPLIT).unwrap();
        let mut counts = [0usize; NUM_SHAPE_CLASSES];
        for s in &scenes {
            for o in &s.objects {
                counts[o.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert!(total >= 150, "at least one object per scene on average, got {total}");
        for (class, &count) in counts.iter().enumerate() {
            let share = count as f64 / total as f64;
            assert!(share > 0.15, "class {class} share {share}");
        }
    }

    #[test]
    fn boxes_are_tight_around_drawn_pixels() {
        // One object, no noise: every painted pixel center sits inside the
        // box and every box edge has paint within 2.05 px (the triangle
        // apex can miss the two rows nearest the top edge).
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            noise_sigma: 0.0,
            ..SceneConfig::default()
        };
        let bg = (BACKGROUND * 255.0 + 0.5).floor() / 255.0;
        for seed in 0..40u64 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let b = scene.objects[0].bbox;
            let size = scene.image.width;
            let mut bounds: Option<(f64, f64, f64, f64)> = None;
            for y in 0..size {
                for x in 0..size {
                    if scene.image.pixels[y * size + x] == bg {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(
                        px >= b.x_min && px <= b.x_max && py >= b.y_min && py <= b.y_max,
                        "seed {seed}: painted pixel ({px}, {py}) outside {b:?}"
                    );
                    bounds = Some(match bounds {
                        None => (px, py, px, py),
                        Some((x0, y0, x1, y1)) => (x0.min(px), y0.min(py), x1.max(px), y1.max(py)),
                    });
                }
            }
            let (x0, y0, x1, y1) = bounds.expect("object painted something");
            assert!(x0 - b.x_min <= 2.05, "seed {seed}: left gap {}", x0 - b.x_min);
            assert!(y0 - b.y_min <= 2.05, "seed {seed}: top gap {}", y0 - b.y_min);
            assert!(b.x_max - x1 <= 2.05, "seed {seed}: right gap {}", b.x_max - x1);
            assert!(b.y_max - y1 <= 2.05, "seed {seed}: bottom gap {}", b.y_max - y1);
        }
    }

    #[test]
    fn intensities_match_classes() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            noise_sigma: 0.0,
            ..SceneConfig::default()
        };
        for seed in 0..30u64 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let gt = &scene.objects[0];
            let want = (SHAPE_INTENSITY[gt.class_id] * 255.0 + 0.5).floor() / 255.0;
            let (cx, cy) = gt.bbox.center();
            // The box center pixel is painted for all three shapes.
            let v = scene.image.pixels[(cy as usize).min(63) * 64 + (cx as usize).min(63)];
            assert_eq!(v, want, "seed {seed} class {}", gt.class_id);
        }
    }

    #[test]
    fn noise_perturbs_pixels_but_not_boxes() {
        let quiet = SceneConfig { noise_sigma: 0.0, ..SceneConfig::default() };
        let noisy = SceneConfig { noise_sigma: 0.05, ..SceneConfig::default() };
        let a = generate_scene(&quiet, 9).unwrap();
        let b = generate_scene(&noisy, 9).unwrap();
        assert_eq!(a.objects, b.objects, "placement draws come before noise draws");
        assert_ne!(a.image.pixels, b.image.pixels);
        assert!(b.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { train_scenes: 4, val_scenes: 2, ..DatasetConfig::default() };
        let summary = generate_dataset(&cfg, dir.path(), false).unwrap();
        assert_eq!((summary.train_scenes, summary.val_scenes), (4, 2));

        let (train, val) = load_dataset(dir.path()).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 2);
        let (mem, _) = generate_scenes(&cfg.scene, 4, cfg.seed, TRAIN_SPLIT).unwrap();
        for (disk, mem) in train.iter().zip(&mem) {
            assert_eq!(disk.image, mem.image, "quantized pixels survive the trip bit-for-bit");
            assert_eq!(disk.objects, mem.objects);
        }

        assert!(generate_dataset(&cfg, dir.path(), false).is_err(), "refuses to clobber");
        generate_dataset(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_sizes = SceneConfig { min_size: 30.0, max_size: 20.0, ..SceneConfig::default() };
        assert!(bad_sizes.validate().is_err());
        let bad_objects = SceneConfig { min_objects: 5, max_objects: 2, ..SceneConfig::default() };
        assert!(bad_objects.validate().is_err());
        let too_big = SceneConfig { max_size: 100.0, ..SceneConfig::default() };
        assert!(too_big.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Placement honors the overlap cap and the size bounds.
        #[test]
        fn placement_respects_overlap_and_size(seed in 0u64..5000) {
            let cfg = SceneConfig::default();
            let scene = generate_scene(&cfg, seed).unwrap();
            for (i, a) in scene.objects.iter().enumerate() {
                let w = a.bbox.width();
                prop_assert!(w >= cfg.min_size && w <= cfg.max_size);
                prop_assert!((a.bbox.width() - a.bbox.height()).abs() < 1e-9);
                prop_assert!(a.bbox.x_min >= 0.0 && a.bbox.x_max <= 64.0);
                for b in &scene.objects[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= cfg.max_overlap + 1e-12);
                }
            }
        }
    }
}
