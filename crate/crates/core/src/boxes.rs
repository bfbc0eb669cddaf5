//! Bounding boxes to external attention vectors: rectangle mask, nearest
//! neighbour down-sampling to the feature grid, softmax.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interface::AttentionVector;
use crate::tensor::softmax_slice;

/// Pixel-space box with its top-left corner at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub category_id: u64,
    pub image_id: u64,
    pub ann_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

/// Category id → name (names may be compound, e.g. "fire hydrant").
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable(BTreeMap<u64, String>);

impl CategoryTable {
    pub fn new(entries: impl IntoIterator<Item = (u64, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, name) in entries {
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(Error::Domain(format!("category {id} has an empty name")));
            }
            if map.insert(id, name).is_some() {
                return Err(Error::Domain(format!("duplicate category id {id}")));
            }
        }
        Ok(Self(map))
    }

    pub fn name(&self, id: u64) -> Option<&str> {
        self.0.get(&id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &str)> {
        self.0.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoDetections {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parsed detection annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub images: BTreeMap<u64, ImageInfo>,
    pub boxes: Vec<BoundingBox>,
    pub categories: CategoryTable,
}

impl AnnotationSet {
    /// Parse the COCO detection layout; float boxes are floored.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CocoDetections =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("annotation JSON: {e}")))?;
        let mut images = BTreeMap::new();
        for im in raw.images {
            if im.width == 0 || im.height == 0 {
                return Err(Error::Domain(format!("image {} has zero extent", im.id)));
            }
            images.insert(
                im.id,
                ImageInfo {
                    id: im.id,
                    width: im.width,
                    height: im.height,
                },
            );
        }
        let categories = CategoryTable::new(raw.categories.into_iter().map(|c| (c.id, c.name)))?;
        let mut boxes = Vec::with_capacity(raw.annotations.len());
        for (idx, a) in raw.annotations.into_iter().enumerate() {
            if a.bbox.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Domain(format!("annotation {idx} has an invalid bbox {:?}", a.bbox)));
            }
            if !images.contains_key(&a.image_id) {
                return Err(Error::Domain(format!("annotation {idx} references unknown image {}", a.image_id)));
            }
            if categories.name(a.category_id).is_none() {
                return Err(Error::Domain(format!(
                    "annotation {idx} references unknown category {}",
                    a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox.map(|v| v.floor() as u32);
            boxes.push(BoundingBox {
                x,
                y,
                w,
                h,
                category_id: a.category_id,
                image_id: a.image_id,
                ann_id: a.id.unwrap_or(idx as u64),
            });
        }
        Ok(Self {
            images,
            boxes,
            categories,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    /// Median box width and height over all boxes.
    pub fn median_size(&self) -> Option<(f64, f64)> {
        let ws: Vec<f64> = self.boxes.iter().map(|b| b.w as f64).collect();
        let hs: Vec<f64> = self.boxes.iter().map(|b| b.h as f64).collect();
        Some((median(&ws)?, median(&hs)?))
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.get(&id)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Keep boxes at least as large as both medians and at least one grid
/// cell in each dimension.
pub fn filter_boxes(boxes: &[BoundingBox], median_w: f64, median_h: f64, cell_w: f64, cell_h: f64) -> Vec<BoundingBox> {
    boxes
        .iter()
        .filter(|b| {
            let (w, h) = (b.w as f64, b.h as f64);
            w >= median_w && h >= median_h && w >= cell_w && h >= cell_h
        })
        .copied()
        .collect()
}

/// [`filter_boxes`] with the cell floor taken from each box's own image.
pub fn filter_annotation_boxes(set: &AnnotationSet, median_w: f64, median_h: f64, grid: usize) -> Vec<BoundingBox> {
    set.boxes
        .iter()
        .filter(|b| {
            set.image(b.image_id).is_some_and(|im| {
                let cell_w = im.width as f64 / grid as f64;
                let cell_h = im.height as f64 / grid as f64;
                !filter_boxes(std::slice::from_ref(*b), median_w, median_h, cell_w, cell_h).is_empty()
            })
        })
        .copied()
        .collect()
}

/// Centre-sampling nearest neighbour resize of a row-major `height×width`
/// grid: `out[i][j] = mask[⌊(i+½)·H/out_h⌋][⌊(j+½)·W/out_w⌋]`.
pub fn nearest_neighbor_resize(mask: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<u8>> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("cannot resize an empty mask".into()));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::Domain("resize target has a zero dimension".into()));
    }
    if mask.len() != width * height {
        return Err(Error::Dimension(format!(
            "mask has {} bytes for {width}x{height}",
            mask.len()
        )));
    }
    let mut out = Vec::with_capacity(out_w * out_h);
    for i in 0..out_h {
        let r = ((2 * i + 1) * height) / (2 * out_h);
        for j in 0..out_w {
            let c = ((2 * j + 1) * width) / (2 * out_w);
            out.push(mask[r * width + c]);
        }
    }
    Ok(out)
}

/// Attention vector for a box: 255-valued rectangle mask, resize to
/// `grid×grid`, scale to [0, 1], optionally divide by `sharpen`, softmax.
pub fn box_to_attention(b: &BoundingBox, img_w: u32, img_h: u32, grid: usize, sharpen: Option<f64>) -> Result<AttentionVector> {
    if b.w == 0 || b.h == 0 {
        return Err(Error::Domain(format!("box {} is degenerate ({}x{})", b.ann_id, b.w, b.h)));
    }
    if b.x as u64 + b.w as u64 > img_w as u64 || b.y as u64 + b.h as u64 > img_h as u64 {
        return Err(Error::Domain(format!(
            "box {} at ({}, {}) size {}x{} exceeds the {img_w}x{img_h} image",
            b.ann_id, b.x, b.y, b.w, b.h
        )));
    }
    if grid == 0 {
        return Err(Error::Domain("grid must be positive".into()));
    }
    if let Some(tau) = sharpen {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Domain(format!("sharpen temperature {tau} must be positive")));
        }
    }
    let (w, h) = (img_w as usize, img_h as usize);
    let mut mask = vec![0u8; w * h];
    for r in b.y as usize..(b.y + b.h) as usize {
        mask[r * w + b.x as usize..r * w + (b.x + b.w) as usize].fill(255);
    }
    let small = nearest_neighbor_resize(&mask, w, h, grid, grid)?;
    let tau = sharpen.unwrap_or(1.0);
    let scores: Vec<f64> = small.iter().map(|&v| v as f64 / 255.0 / tau).collect();
    Ok(AttentionVector::new_unchecked(softmax_slice(&scores)?))
}

/// Attention records for every box of `set` (or only boxes passing the
/// median filter), in annotation order.
pub fn annotation_attention(set: &AnnotationSet, grid: usize, sharpen: Option<f64>, filter: bool) -> Result<Vec<AttentionRecord>> {
    let boxes = if filter {
        let (mw, mh) = set
            .median_size()
            .ok_or_else(|| Error::Domain("no boxes to take a median over".into()))?;
        filter_annotation_boxes(set, mw, mh, grid)
    } else {
        set.boxes.clone()
    };
    boxes
        .iter()
        .map(|b| {
            let info = set
                .image(b.image_id)
                .ok_or_else(|| Error::Domain(format!("box {} on unknown image {}", b.ann_id, b.image_id)))?;
            let alpha = box_to_attention(b, info.width, info.height, grid, sharpen)?;
            Ok(AttentionRecord {
                image_id: b.image_id,
                ann_id: b.ann_id,
                category_id: b.category_id,
                alpha: alpha.into_vec(),
            })
        })
        .collect()
}

/// One line of the attention output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub image_id: u64,
    pub ann_id: u64,
    pub category_id: u64,
    pub alpha: Vec<f64>,
}

pub fn write_attention_jsonl(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_attention_jsonl(path: &Path) -> Result<Vec<AttentionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
