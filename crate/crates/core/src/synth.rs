//! Synthetic shape dataset: rendered geometric objects with exact
//! ground-truth boxes, disjoint train/test category sets and deterministic
//! seeded generation. The desk-scale stand-in for a real detection corpus.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AnnotatedBox, DataError, DatasetManifest, MemoryImages, SplitTag};
use crate::geometry::BBox;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Saltire,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Square,
        ShapeKind::Disc,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Saltire,
        ShapeKind::Frame,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Saltire => "saltire",
            ShapeKind::Frame => "frame",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    fn base_color(&self) -> [f64; 3] {
        match self {
            ShapeKind::Square => [0.85, 0.20, 0.20],
            ShapeKind::Disc => [0.20, 0.80, 0.25],
            ShapeKind::Triangle => [0.25, 0.35, 0.90],
            ShapeKind::Cross => [0.90, 0.85, 0.20],
            ShapeKind::Ring => [0.85, 0.25, 0.80],
            ShapeKind::Diamond => [0.20, 0.80, 0.85],
            ShapeKind::Saltire => [0.95, 0.55, 0.15],
            ShapeKind::Frame => [0.55, 0.25, 0.95],
        }
    }

    /// Implicit membership test, centered coordinates, half-size `r`.
    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => math::max(math::abs(dx), math::abs(dy)) <= r,
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && math::abs(dx) <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                (math::abs(dx) <= r / 3.0 && math::abs(dy) <= r)
                    || (math::abs(dy) <= r / 3.0 && math::abs(dx) <= r)
            }
            ShapeKind::Ring => {
                let d = math::sqrt(dx * dx + dy * dy);
                d >= 0.55 * r && d <= r
            }
            ShapeKind::Diamond => math::abs(dx) + math::abs(dy) <= r,
            ShapeKind::Saltire => {
                math::max(math::abs(dx), math::abs(dy)) <= r
                    && (math::abs(dx - dy) <= 0.4 * r || math::abs(dx + dy) <= 0.4 * r)
            }
            ShapeKind::Frame => {
                let m = math::max(math::abs(dx), math::abs(dy));
                m >= 0.6 * r && m <= r
            }
        }
    }
}

/// Generation knobs: categories per split, image counts, object density and
/// sizes, clutter level.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    pub image_size: usize,
    pub train_categories: Vec<ShapeKind>,
    pub test_categories: Vec<ShapeKind>,
    pub train_images: usize,
    pub test_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Unlabeled low-contrast distractor blobs per image.
    pub clutter: usize,
    /// Background noise amplitude.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            train_categories: alloc::vec![
                ShapeKind::Square,
                ShapeKind::Disc,
                ShapeKind::Triangle,
                ShapeKind::Cross,
                ShapeKind::Ring,
                ShapeKind::Diamond,
            ],
            test_categories: alloc::vec![ShapeKind::Saltire, ShapeKind::Frame],
            train_images: 400,
            test_images: 120,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 24.0,
            max_object_size: 44.0,
            clutter: 2,
            noise: 0.02,
        }
    }
}

/// A manifest together with its rendered images.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: MemoryImages,
}

/// Render both splits. Deterministic for a given rng state; train and test
/// category sets must be disjoint and at least two test categories are
/// required (episodic evaluation needs a negative category).
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(SyntheticDataset, SyntheticDataset), DataError> {
    if spec.test_categories.len() < 2 {
        return Err(DataError::InsufficientCategories { needed: 2, available: spec.test_categories.len() });
    }
    if spec.train_categories.iter().any(|c| spec.test_categories.contains(c)) {
        return Err(DataError::InsufficientCategories {
            needed: spec.train_categories.len() + spec.test_categories.len(),
            available: distinct_count(spec),
        });
    }
    let train = render_split(spec, &spec.train_categories, spec.train_images, SplitTag::Train, "train", rng);
    let test = render_split(spec, &spec.test_categories, spec.test_images, SplitTag::Test, "test", rng);
    Ok((train, test))
}

fn distinct_count(spec: &SynthSpec) -> usize {
    let mut all: Vec<ShapeKind> = spec.train_categories.iter().chain(&spec.test_categories).copied().collect();
    all.sort();
    all.dedup();
    all.len()
}

fn render_split(
    spec: &SynthSpec,
    categories: &[ShapeKind],
    n_images: usize,
    split: SplitTag,
    tag: &str,
    rng: &mut ChaCha8Rng,
) -> SyntheticDataset {
    let mut records = Vec::with_capacity(n_images);
    let mut images = MemoryImages::default();
    for i in 0..n_images {
        let id = format!("synth-{tag}-{i:05}");
        let (image, boxes) = render_image(spec, categories, rng);
        records.push(crate::data::ImageRecord {
            image: id.clone(),
            width: spec.image_size as u32,
            height: spec.image_size as u32,
            boxes,
        });
        images.images.insert(id, image);
    }
    let names: Vec<String> = categories.iter().map(|c| c.name().to_string()).collect();
    SyntheticDataset { manifest: DatasetManifest::new(records, names, split), images }
}

fn render_image(spec: &SynthSpec, categories: &[ShapeKind], rng: &mut ChaCha8Rng) -> (Tensor, Vec<AnnotatedBox>) {
    let size = spec.image_size;
    let mut image = Tensor::zeros(&[size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let v = 0.12 + (rng.random::<f64>() - 0.5) * 2.0 * spec.noise;
            let base = image.idx3(y, x, 0);
            for ci in 0..3 {
                image.data_mut()[base + ci] = math::clamp(v, 0.0, 1.0);
            }
        }
    }

    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<AnnotatedBox> = Vec::new();
    let mut occupied: Vec<BBox> = Vec::new();
    for _ in 0..n_objects {
        let kind = categories[rng.random_range(0..categories.len())];
        let side = spec.min_object_size + rng.random::<f64>() * (spec.max_object_size - spec.min_object_size);
        let r = side / 2.0;
        let mut placed = None;
        for _try in 0..40 {
            let cx = r + 2.0 + rng.random::<f64>() * (size as f64 - 2.0 * r - 4.0);
            let cy = r + 2.0 + rng.random::<f64>() * (size as f64 - 2.0 * r - 4.0);
            let candidate = BBox::new(cx - r - 2.0, cy - r - 2.0, cx + r + 2.0, cy + r + 2.0);
            if occupied.iter().all(|b| b.intersection_area(&candidate) == 0.0) {
                placed = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = placed else { continue };
        occupied.push(BBox::new(cx - r - 2.0, cy - r - 2.0, cx + r + 2.0, cy + r + 2.0));

        let mut color = kind.base_color();
        for ch in &mut color {
            *ch = math::clamp(*ch + (rng.random::<f64>() - 0.5) * 0.16, 0.0, 1.0);
        }
        if let Some(bbox) = paint(&mut image, kind, cx, cy, r, &color) {
            boxes.push(AnnotatedBox { bbox, category: kind.name().to_string() });
        }
    }

    // Distractor blobs: small gray discs, never labeled, kept off the
    // annotated objects so the ground truth stays exact.
    for _ in 0..spec.clutter {
        let r = 1.5 + rng.random::<f64>() * 2.5;
        let gray = 0.28 + (rng.random::<f64>() - 0.5) * 0.12;
        for _try in 0..20 {
            let cx = r + 1.0 + rng.random::<f64>() * (size as f64 - 2.0 * r - 2.0);
            let cy = r + 1.0 + rng.random::<f64>() * (size as f64 - 2.0 * r - 2.0);
            let candidate = BBox::new(cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0);
            if occupied.iter().all(|b| b.intersection_area(&candidate) == 0.0) {
                occupied.push(candidate);
                paint(&mut image, ShapeKind::Disc, cx, cy, r, &[gray, gray, gray]);
                break;
            }
        }
    }

    (image, boxes)
}

/// Rasterize the shape and return the exact pixel-extent box of what was
/// painted (half-open right/bottom edges), or None if nothing landed.
fn paint(image: &mut Tensor, kind: ShapeKind, cx: f64, cy: f64, r: f64, color: &[f64; 3]) -> Option<BBox> {
    let size = image.dim(0);
    let x_lo = math::max(0.0, math::floor(cx - r - 1.0)) as usize;
    let y_lo = math::max(0.0, math::floor(cy - r - 1.0)) as usize;
    let x_hi = (math::ceil(cx + r + 1.0) as usize).min(size);
    let y_hi = (math::ceil(cy + r + 1.0) as usize).min(size);
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if kind.contains(dx, dy, r) {
                let base = image.idx3(y, x, 0);
                for ci in 0..3 {
                    image.data_mut()[base + ci] = color[ci];
                }
                extent = Some(match extent {
                    None => (x, y, x, y),
                    Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
                });
            }
        }
    }
    extent.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_object_has_exact_box() {
        let spec = SynthSpec {
            train_images: 1,
            test_images: 0,
            min_objects: 1,
            max_objects: 1,
            clutter: 0,
            noise: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train, _) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        let rec = &train.manifest.records[0];
        assert_eq!(rec.boxes.len(), 1);
        let bbox = rec.boxes[0].bbox;
        let image = train.images.images.get(&rec.image).unwrap();
        // every pixel deviating from the constant background lies inside the box
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let off = (0..3).any(|c| (image.at3(y, x, c) - 0.12).abs() > 0.05);
                if off {
                    let inside = (x as f64) >= bbox.x1
                        && (x as f64) < bbox.x2
                        && (y as f64) >= bbox.y1
                        && (y as f64) < bbox.y2;
                    assert!(inside, "painted pixel ({x},{y}) outside emitted box {bbox:?}");
                }
            }
        }
        // and the box is tight: its edges touch painted pixels
        let mut touched_left = false;
        for y in bbox.y1 as usize..bbox.y2 as usize {
            if (0..3).any(|c| (image.at3(y, bbox.x1 as usize, c) - 0.12).abs() > 0.05) {
                touched_left = true;
            }
        }
        assert!(touched_left);
    }

    #[test]
    fn splits_are_category_disjoint() {
        let spec = SynthSpec { train_images: 3, test_images: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (train, test) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        assert!(crate::data::category_sets_disjoint(&train.manifest, &test.manifest));
        for rec in &test.manifest.records {
            for b in &rec.boxes {
                assert!(test.manifest.categories.contains(&b.category));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { train_images: 4, test_images: 2, ..Default::default() };
        let a = generate_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0.manifest, b.0.manifest);
        assert_eq!(a.1.manifest, b.1.manifest);
        for (id, img) in &a.0.images.images {
            assert_eq!(img.data(), b.0.images.images[id].data());
        }
    }

    #[test]
    fn too_few_test_categories_errors() {
        let spec = SynthSpec { test_categories: alloc::vec![ShapeKind::Frame], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_synthetic_dataset(&spec, &mut rng).is_err());
    }

    #[test]
    fn boxes_stay_in_bounds() {
        let spec = SynthSpec { train_images: 20, test_images: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (train, test) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        for m in [&train.manifest, &test.manifest] {
            for rec in &m.records {
                for b in &rec.boxes {
                    assert!(b.bbox.x1 >= 0.0 && b.bbox.y1 >= 0.0);
                    assert!(b.bbox.x2 <= rec.width as f64 && b.bbox.y2 <= rec.height as f64);
                    assert!(b.bbox.area() > 0.0);
                }
            }
        }
    }
}
