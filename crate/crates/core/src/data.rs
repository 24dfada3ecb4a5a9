//! Dataset types and preprocessing: manifests, query resizing, support
//! cropping, small-box filtering, taxonomy-distance category splitting and
//! dataset statistics.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::geometry::BBox;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    DegenerateImage,
    BoxOutsideImage,
    MissingImage { id: String },
    UnknownCategory { category: String },
    DisconnectedTaxonomy { category: String },
    CyclicTaxonomy,
    InsufficientCategories { needed: usize, available: usize },
    InsufficientData { category: String, detail: &'static str },
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::DegenerateImage => write!(f, "image has a zero dimension"),
            DataError::BoxOutsideImage => write!(f, "box lies outside the image bounds"),
            DataError::MissingImage { id } => write!(f, "no image stored under id {id:?}"),
            DataError::UnknownCategory { category } => write!(f, "category {category:?} missing from taxonomy"),
            DataError::DisconnectedTaxonomy { category } => {
                write!(f, "taxonomy does not connect {category:?} to the rest")
            }
            DataError::CyclicTaxonomy => write!(f, "taxonomy contains a cycle"),
            DataError::InsufficientCategories { needed, available } => {
                write!(f, "need {needed} categories, only {available} available")
            }
            DataError::InsufficientData { category, detail } => {
                write!(f, "category {category:?}: {detail}")
            }
        }
    }
}

impl core::error::Error for DataError {}

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotatedBox {
    pub bbox: BBox,
    pub category: String,
}

/// One image with its annotations.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SplitTag {
    Train,
    Test,
}

/// Image records plus the category table and split tag.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub categories: Vec<String>,
    pub split: SplitTag,
}

/// Reference to one annotated object instance: (record index, box index).
pub type InstanceRef = (usize, usize);

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, categories: Vec<String>, split: SplitTag) -> Self {
        Self { records, categories, split }
    }

    /// All (record, box) instances of a category, in manifest order.
    pub fn instances_of(&self, category: &str) -> Vec<InstanceRef> {
        let mut out = Vec::new();
        for (ri, rec) in self.records.iter().enumerate() {
            for (bi, ab) in rec.boxes.iter().enumerate() {
                if ab.category == category {
                    out.push((ri, bi));
                }
            }
        }
        out
    }

    /// Indices of records containing at least one box of the category.
    pub fn images_with(&self, category: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.boxes.iter().any(|b| b.category == category))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_boxes(&self) -> usize {
        self.records.iter().map(|r| r.boxes.len()).sum()
    }
}

/// Categories of two manifests must not overlap in the few-shot setting.
pub fn category_sets_disjoint(train: &DatasetManifest, test: &DatasetManifest) -> bool {
    let t: BTreeSet<&str> = train.categories.iter().map(String::as_str).collect();
    test.categories.iter().all(|c| !t.contains(c.as_str()))
}

/// Source of image tensors, keyed by the manifest's image identifier.
pub trait ImageSource {
    fn load(&self, image_id: &str) -> Result<Tensor, DataError>;
}

/// In-memory image store.
#[derive(Debug, Clone, Default)]
pub struct MemoryImages {
    pub images: BTreeMap<String, Tensor>,
}

impl ImageSource for MemoryImages {
    fn load(&self, image_id: &str) -> Result<Tensor, DataError> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| DataError::MissingImage { id: image_id.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Query resize rule: scale so the shorter side hits `short_side` unless the
/// longer side would exceed `long_cap`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryResize {
    pub short_side: f64,
    pub long_cap: f64,
}

impl Default for QueryResize {
    fn default() -> Self {
        Self { short_side: 600.0, long_cap: 1000.0 }
    }
}

impl QueryResize {
    pub fn scale_for(&self, height: usize, width: usize) -> f64 {
        let short = math::min(height as f64, width as f64);
        let long = math::max(height as f64, width as f64);
        math::min(self.short_side / short, self.long_cap / long)
    }
}

/// Bilinear resize of an `(h, w, c)` image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let py = math::clamp((oy as f64 + 0.5) * sy - 0.5, 0.0, (h - 1) as f64);
        let y0 = math::floor(py) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = py - y0 as f64;
        for ox in 0..out_w {
            let px = math::clamp((ox as f64 + 0.5) * sx - 0.5, 0.0, (w - 1) as f64);
            let x0 = math::floor(px) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = px - x0 as f64;
            let base = out.idx3(oy, ox, 0);
            for ci in 0..c {
                let v = (1.0 - fy) * (1.0 - fx) * image.at3(y0, x0, ci)
                    + (1.0 - fy) * fx * image.at3(y0, x1, ci)
                    + fy * (1.0 - fx) * image.at3(y1, x0, ci)
                    + fy * fx * image.at3(y1, x1, ci);
                out.data_mut()[base + ci] = v;
            }
        }
    }
    out
}

/// Resize a query image, returning the resized tensor and the uniform scale
/// factor that must also be applied to its ground-truth boxes.
pub fn prepare_query(image: &Tensor, rule: &QueryResize) -> Result<(Tensor, f64), DataError> {
    let (h, w) = (image.dim(0), image.dim(1));
    if h == 0 || w == 0 {
        return Err(DataError::DegenerateImage);
    }
    let scale = rule.scale_for(h, w);
    let oh = math::max(1.0, math::round(h as f64 * scale)) as usize;
    let ow = math::max(1.0, math::round(w as f64 * scale)) as usize;
    if oh == h && ow == w {
        return Ok((image.clone(), scale));
    }
    Ok((resize_bilinear(image, oh, ow), scale))
}

/// Output-space padding of a [`SupportCrop`], in pixels of the final square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PadRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Square support crop: the object with context, zero-padded to a centered
/// square and resized.
#[derive(Debug, Clone)]
pub struct SupportCrop {
    pub image: Tensor,
    pub source_box: BBox,
    pub pad: PadRecord,
}

/// Default square side of support crops.
pub const SUPPORT_SIZE: usize = 320;

/// Context margin around the object, in source pixels.
pub const SUPPORT_CONTEXT: f64 = 16.0;

/// Crop around the target with 16 pixels of context, zero-pad the crop to a
/// centered square the size of its longer side, and resize to
/// `SUPPORT_SIZE` x `SUPPORT_SIZE`. Pad and resize are composed in output
/// space so padded entries are exactly zero.
pub fn prepare_support(image: &Tensor, bbox: &BBox) -> Result<SupportCrop, DataError> {
    prepare_support_sized(image, bbox, SUPPORT_SIZE)
}

/// [`prepare_support`] with a configurable output side (desk-scale runs use
/// smaller crops).
pub fn prepare_support_sized(image: &Tensor, bbox: &BBox, out_size: usize) -> Result<SupportCrop, DataError> {
    let (h, w) = (image.dim(0) as f64, image.dim(1) as f64);
    let c = image.dim(2);
    if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w || bbox.y2 > h || !bbox.is_valid() || bbox.area() == 0.0 {
        return Err(DataError::BoxOutsideImage);
    }
    // Expand by the context margin, clipped at the borders.
    let x1 = math::floor(math::max(0.0, bbox.x1 - SUPPORT_CONTEXT)) as usize;
    let y1 = math::floor(math::max(0.0, bbox.y1 - SUPPORT_CONTEXT)) as usize;
    let x2 = math::ceil(math::min(w, bbox.x2 + SUPPORT_CONTEXT)) as usize;
    let y2 = math::ceil(math::min(h, bbox.y2 + SUPPORT_CONTEXT)) as usize;
    let (ch, cw) = (y2 - y1, x2 - x1);

    let mut crop = Tensor::zeros(&[ch, cw, c]);
    for y in 0..ch {
        for x in 0..cw {
            let src = image.idx3(y1 + y, x1 + x, 0);
            let dst = crop.idx3(y, x, 0);
            for ci in 0..c {
                crop.data_mut()[dst + ci] = image.data()[src + ci];
            }
        }
    }

    let side = ch.max(cw) as f64;
    let inner_h = math::max(1.0, math::round(out_size as f64 * ch as f64 / side)) as usize;
    let inner_w = math::max(1.0, math::round(out_size as f64 * cw as f64 / side)) as usize;
    let top = (out_size - inner_h) / 2;
    let left = (out_size - inner_w) / 2;
    let inner = resize_bilinear(&crop, inner_h, inner_w);
    let mut out = Tensor::zeros(&[out_size, out_size, c]);
    for y in 0..inner_h {
        for x in 0..inner_w {
            let src = inner.idx3(y, x, 0);
            let dst = out.idx3(top + y, left + x, 0);
            for ci in 0..c {
                out.data_mut()[dst + ci] = inner.data()[src + ci];
            }
        }
    }
    Ok(SupportCrop {
        image: out,
        source_box: *bbox,
        pad: PadRecord {
            top,
            bottom: out_size - inner_h - top,
            left,
            right: out_size - inner_w - left,
        },
    })
}

// ---------------------------------------------------------------------------
// Dataset construction procedures

/// Minimum box-area / image-area ratio below which an image is dropped.
pub const MIN_BOX_AREA_RATIO: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FilterReport {
    pub kept: usize,
    pub removed: usize,
}

/// Drop every image containing a box smaller than 0.05% of the image area.
pub fn filter_small_boxes(manifest: &DatasetManifest) -> (DatasetManifest, FilterReport) {
    let mut kept = Vec::new();
    let mut removed = 0;
    for rec in &manifest.records {
        let image_area = rec.width as f64 * rec.height as f64;
        let bad = rec
            .boxes
            .iter()
            .any(|b| b.bbox.area() / image_area < MIN_BOX_AREA_RATIO);
        if bad {
            removed += 1;
        } else {
            kept.push(rec.clone());
        }
    }
    let report = FilterReport { kept: kept.len(), removed };
    (
        DatasetManifest { records: kept, categories: manifest.categories.clone(), split: manifest.split },
        report,
    )
}

/// Directed is-a edges over category names, rooted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Taxonomy {
    pub root: String,
    /// (parent, child) pairs.
    pub edges: Vec<(String, String)>,
}

impl Taxonomy {
    pub fn nodes(&self) -> BTreeSet<&str> {
        let mut nodes: BTreeSet<&str> = BTreeSet::new();
        nodes.insert(self.root.as_str());
        for (a, b) in &self.edges {
            nodes.insert(a);
            nodes.insert(b);
        }
        nodes
    }

    fn undirected_adjacency(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        adj.entry(self.root.as_str()).or_default();
        for (a, b) in &self.edges {
            adj.entry(a.as_str()).or_default().push(b.as_str());
            adj.entry(b.as_str()).or_default().push(a.as_str());
        }
        adj
    }

    /// Connected (ignoring direction) and acyclic (respecting it).
    pub fn validate(&self) -> Result<(), DataError> {
        let adj = self.undirected_adjacency();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(self.root.as_str());
        seen.insert(self.root.as_str());
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        for n in self.nodes() {
            if !seen.contains(n) {
                return Err(DataError::DisconnectedTaxonomy { category: n.to_string() });
            }
        }
        // acyclicity of the directed edges via Kahn's algorithm
        let mut indeg: BTreeMap<&str, usize> = self.nodes().iter().map(|&n| (n, 0)).collect();
        for (_, b) in &self.edges {
            *indeg.get_mut(b.as_str()).unwrap() += 1;
        }
        let mut queue: VecDeque<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in &self.edges {
            children.entry(a.as_str()).or_default().push(b.as_str());
        }
        let mut visited = 0;
        while let Some(n) = queue.pop_front() {
            visited += 1;
            for &m in children.get(n).into_iter().flatten() {
                let d = indeg.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(m);
                }
            }
        }
        if visited != self.nodes().len() {
            return Err(DataError::CyclicTaxonomy);
        }
        Ok(())
    }

    /// Undirected BFS distances from `from` to every reachable node.
    pub fn distances_from(&self, from: &str) -> BTreeMap<String, usize> {
        let adj = self.undirected_adjacency();
        let mut dist: BTreeMap<String, usize> = BTreeMap::new();
        if !adj.contains_key(from) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist.insert(from.to_string(), 0);
        queue.push_back(from);
        while let Some(n) = queue.pop_front() {
            let d = dist[n];
            for &m in adj.get(n).into_iter().flatten() {
                if !dist.contains_key(m) {
                    dist.insert(m.to_string(), d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist
    }
}

/// Split categories into train and test sets by taxonomy distance: the
/// `n_test` categories farthest (shortest undirected path) from the train
/// pool become the test set, ties broken by name; everything else trains.
pub fn taxonomy_split(
    categories: &[String],
    taxonomy: &Taxonomy,
    train_pool: &[String],
    n_test: usize,
) -> Result<(Vec<String>, Vec<String>), DataError> {
    taxonomy.validate()?;
    let nodes = taxonomy.nodes();
    for c in categories.iter().chain(train_pool) {
        if !nodes.contains(c.as_str()) {
            return Err(DataError::UnknownCategory { category: c.clone() });
        }
    }
    let pool: BTreeSet<&str> = train_pool.iter().map(String::as_str).collect();
    let candidates: Vec<&String> = categories.iter().filter(|c| !pool.contains(c.as_str())).collect();
    if n_test > candidates.len() {
        return Err(DataError::InsufficientCategories { needed: n_test, available: candidates.len() });
    }

    // Distance to the pool: min over pool members, one BFS per member. With
    // an empty pool every candidate ties at distance 0.
    let mut min_dist: BTreeMap<&str, usize> =
        candidates.iter().map(|c| (c.as_str(), if pool.is_empty() { 0 } else { usize::MAX })).collect();
    for p in &pool {
        let d = taxonomy.distances_from(p);
        for c in &candidates {
            if let Some(&dc) = d.get(c.as_str()) {
                let slot = min_dist.get_mut(c.as_str()).unwrap();
                *slot = (*slot).min(dc);
            }
        }
    }

    let mut ranked: Vec<(&str, usize)> =
        candidates.iter().map(|c| (c.as_str(), min_dist[c.as_str()])).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let test: BTreeSet<&str> = ranked.iter().take(n_test).map(|(c, _)| *c).collect();
    let test_vec: Vec<String> = ranked.iter().take(n_test).map(|(c, _)| c.to_string()).collect();
    let train_vec: Vec<String> =
        categories.iter().filter(|c| !test.contains(c.as_str())).cloned().collect();
    Ok((train_vec, test_vec))
}

// ---------------------------------------------------------------------------
// Statistics

/// Dataset summary: counts, per-class image statistics and the box size /
/// area-ratio / aspect-ratio ranges.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetStats {
    pub classes: usize,
    pub images: usize,
    pub boxes: usize,
    pub boxes_per_image: f64,
    pub min_images_per_class: usize,
    pub max_images_per_class: usize,
    pub avg_images_per_class: f64,
    /// Longer box side, in pixels.
    pub box_size_min: f64,
    pub box_size_max: f64,
    pub area_ratio_min: f64,
    pub area_ratio_max: f64,
    pub wh_ratio_min: f64,
    pub wh_ratio_max: f64,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let images = manifest.records.len();
    let boxes = manifest.total_boxes();
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut box_size = (f64::INFINITY, f64::NEG_INFINITY);
    let mut area_ratio = (f64::INFINITY, f64::NEG_INFINITY);
    let mut wh_ratio = (f64::INFINITY, f64::NEG_INFINITY);
    for rec in &manifest.records {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let image_area = rec.width as f64 * rec.height as f64;
        for b in &rec.boxes {
            seen.insert(b.category.as_str());
            let size = math::max(b.bbox.width(), b.bbox.height());
            box_size = (math::min(box_size.0, size), math::max(box_size.1, size));
            let ar = b.bbox.area() / image_area;
            area_ratio = (math::min(area_ratio.0, ar), math::max(area_ratio.1, ar));
            if b.bbox.height() > 0.0 {
                let wh = b.bbox.width() / b.bbox.height();
                wh_ratio = (math::min(wh_ratio.0, wh), math::max(wh_ratio.1, wh));
            }
        }
        for c in seen {
            *per_class.entry(c).or_insert(0) += 1;
        }
    }
    let classes = manifest.categories.len();
    let (min_ipc, max_ipc, avg_ipc) = if per_class.is_empty() {
        (0, 0, 0.0)
    } else {
        let min = *per_class.values().min().unwrap();
        let max = *per_class.values().max().unwrap();
        let sum: usize = per_class.values().sum();
        (min, max, sum as f64 / per_class.len() as f64)
    };
    let clean = |pair: (f64, f64)| if pair.0.is_finite() { pair } else { (0.0, 0.0) };
    let box_size = clean(box_size);
    let area_ratio = clean(area_ratio);
    let wh_ratio = clean(wh_ratio);
    DatasetStats {
        classes,
        images,
        boxes,
        boxes_per_image: if images > 0 { boxes as f64 / images as f64 } else { 0.0 },
        min_images_per_class: min_ipc,
        max_images_per_class: max_ipc,
        avg_images_per_class: avg_ipc,
        box_size_min: box_size.0,
        box_size_max: box_size.1,
        area_ratio_min: area_ratio.0,
        area_ratio_max: area_ratio.1,
        wh_ratio_min: wh_ratio.0,
        wh_ratio_max: wh_ratio.1,
    }
}
