//! Synthetic scene generator and dataset ingestion.
//!
//! A scene is a grid of cells holding up to a few axis-aligned objects. Each
//! cell's feature vector is one-hot(shape) ⊕ one-hot(color) ⊕ two position
//! channels ⊕ noise, so which object an attention vector selects is known
//! exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::AnnotationSet;
use crate::captioner::ImageAnnotation;
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Rng};

pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const VERTICAL: [&str; 2] = ["top", "bottom"];
pub const HORIZONTAL: [&str; 2] = ["left", "right"];

pub const FEATURES_FILE: &str = "features.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const QA_FILE: &str = "qa.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Channels before the noise block: shape, color, row, column.
pub const INFORMATIVE_CHANNELS: usize = SHAPES.len() + COLORS.len() + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Footprint side lengths in cells.
    pub min_side: usize,
    pub max_side: usize,
    pub grid: usize,
    pub dim: usize,
    pub image_size: u32,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenes: 500,
            min_objects: 1,
            max_objects: 3,
            min_side: 2,
            max_side: 6,
            grid: 14,
            dim: 32,
            image_size: 448,
            noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Domain("at least one scene is required".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Domain(format!(
                "objects per scene range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > SHAPES.len() {
            return Err(Error::Domain(format!(
                "at most {} objects fit with distinct shapes",
                SHAPES.len()
            )));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.grid {
            return Err(Error::Domain(format!(
                "footprint side range {}..={} does not fit a {} grid",
                self.min_side, self.max_side, self.grid
            )));
        }
        if self.dim < INFORMATIVE_CHANNELS {
            return Err(Error::Domain(format!(
                "feature dim {} is below the {INFORMATIVE_CHANNELS} informative channels",
                self.dim
            )));
        }
        if self.grid == 0 || self.image_size as usize % self.grid != 0 {
            return Err(Error::Domain(format!(
                "image size {} is not a multiple of grid {}",
                self.image_size, self.grid
            )));
        }
        Ok(())
    }

    fn cell_px(&self) -> u32 {
        self.image_size / self.grid as u32
    }
}

/// Cell rectangle: rows `row..row + height`, columns `col..col + width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Footprint {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn cells(&self, grid: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.row..self.row + self.height {
            for c in self.col..self.col + self.width {
                out.push(r * grid + c);
            }
        }
        out
    }

    fn separated(&self, other: &Footprint) -> bool {
        self.row + self.height < other.row
            || other.row + other.height < self.row
            || self.col + self.width < other.col
            || other.col + other.width < self.col
    }

    fn centre_offset(&self, grid: usize) -> (f64, f64) {
        let mid = grid as f64 / 2.0;
        (
            self.row as f64 + self.height as f64 / 2.0 - mid,
            self.col as f64 + self.width as f64 / 2.0 - mid,
        )
    }

    /// Centre at least one cell away from both grid midlines.
    fn clear_of_midlines(&self, grid: usize) -> bool {
        let (dr, dc) = self.centre_offset(grid);
        dr.abs() >= 1.0 && dc.abs() >= 1.0
    }

    /// Quadrant phrase of the footprint centre, e.g. "top left".
    pub fn region(&self, grid: usize) -> String {
        let (dr, dc) = self.centre_offset(grid);
        format!("{} {}", VERTICAL[usize::from(dr > 0.0)], HORIZONTAL[usize::from(dc > 0.0)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub footprint: Footprint,
}

impl SceneObject {
    pub fn category_id(&self) -> u64 {
        category_id(self.color, self.shape)
    }

    pub fn category_name(&self) -> String {
        format!("{} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

pub fn category_id(color: usize, shape: usize) -> u64 {
    (color * SHAPES.len() + shape + 1) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    pub features: DenseArray,
    pub captions: Vec<String>,
    pub qa: Vec<QaPair>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub answer: String,
    pub qtype: String,
}

fn place_objects(cfg: &GenConfig, rng: &mut Rng) -> Vec<SceneObject> {
    loop {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
        let mut colors: Vec<usize> = (0..COLORS.len()).collect();
        shapes.shuffle(rng);
        colors.shuffle(rng);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for k in 0..n {
            let mut placed = None;
            for _ in 0..200 {
                let height = rng.gen_range(cfg.min_side..=cfg.max_side);
                let width = rng.gen_range(cfg.min_side..=cfg.max_side);
                let fp = Footprint {
                    row: rng.gen_range(0..=cfg.grid - height),
                    col: rng.gen_range(0..=cfg.grid - width),
                    height,
                    width,
                };
                if fp.clear_of_midlines(cfg.grid) && objects.iter().all(|o| o.footprint.separated(&fp)) {
                    placed = Some(fp);
                    break;
                }
            }
            match placed {
                Some(footprint) => objects.push(SceneObject {
                    shape: shapes[k],
                    color: colors[k],
                    footprint,
                }),
                None => break,
            }
        }
        if objects.len() == n {
            return objects;
        }
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn scene_features(cfg: &GenConfig, objects: &[SceneObject], rng: &mut Rng) -> DenseArray {
    let g = cfg.grid;
    let denom = (g.max(2) - 1) as f64;
    let mut data = vec![0.0; g * g * cfg.dim];
    for r in 0..g {
        for c in 0..g {
            let row = &mut data[(r * g + c) * cfg.dim..(r * g + c + 1) * cfg.dim];
            if let Some(o) = objects.iter().find(|o| o.footprint.contains(r, c)) {
                row[o.shape] = 1.0;
                row[SHAPES.len() + o.color] = 1.0;
            }
            row[SHAPES.len() + COLORS.len()] = r as f64 / denom;
            row[SHAPES.len() + COLORS.len() + 1] = c as f64 / denom;
            for v in row.iter_mut() {
                *v = round4(*v + rng.gen_range(-cfg.noise..=cfg.noise));
            }
        }
    }
    DenseArray::from_vec(&[g * g, cfg.dim], data).expect("shape matches buffer")
}

fn caption_for(o: &SceneObject, grid: usize) -> String {
    format!("a {} {} at the {}", COLORS[o.color], SHAPES[o.shape], o.footprint.region(grid))
}

/// Generate one scene; question ids start at `first_question_id`.
pub fn gen_scene(cfg: &GenConfig, id: u64, first_question_id: u64, rng: &mut Rng) -> SyntheticScene {
    let objects = place_objects(cfg, rng);
    let features = scene_features(cfg, &objects, rng);
    let n_caps = rng.gen_range(objects.len().max(2)..=5.max(objects.len()));
    let mut captions: Vec<String> = objects.iter().map(|o| caption_for(o, cfg.grid)).collect();
    while captions.len() < n_caps {
        let o = &objects[rng.gen_range(0..objects.len())];
        captions.push(caption_for(o, cfg.grid));
    }
    let mut qa = Vec::with_capacity(2 * objects.len());
    for o in &objects {
        let shape = SHAPES[o.shape];
        for (question, answer) in [
            (format!("what color is the {shape}"), COLORS[o.color].to_string()),
            (format!("where is the {shape}"), o.footprint.region(cfg.grid)),
        ] {
            qa.push(QaPair {
                question_id: first_question_id + qa.len() as u64,
                image_id: id,
                question,
                answer,
                qtype: "other".into(),
            });
        }
    }
    SyntheticScene {
        id,
        objects,
        features,
        captions,
        qa,
    }
}

pub fn gen_scenes(cfg: &GenConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut next_q = 0;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for id in 0..cfg.scenes as u64 {
        let s = gen_scene(cfg, id, next_q, &mut rng);
        next_q += s.qa.len() as u64;
        scenes.push(s);
    }
    Ok(scenes)
}

/// Scene ids with `id % 5 == 4` go to validation.
pub fn is_validation(id: u64) -> bool {
    id % 5 == 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImage {
    pub image_id: u64,
    pub features: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub grid: usize,
    pub dim: usize,
    pub images: Vec<FeatureImage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_seed: u64,
    pub scenes: usize,
    pub grid: usize,
    pub dim: usize,
    pub image_size: u32,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub train_hash: String,
    pub val_hash: String,
    pub files: BTreeMap<String, String>,
}

pub fn split_hash(ids: &[u64]) -> String {
    let joined = ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    hex::encode(Sha256::digest(joined.as_bytes()))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate a dataset into `dir`, returning the manifest.
pub fn gen_dataset(cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    let scenes = gen_scenes(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = cfg.cell_px();

    let features = FeatureFile {
        grid: cfg.grid,
        dim: cfg.dim,
        images: scenes
            .iter()
            .map(|s| FeatureImage {
                image_id: s.id,
                features: (0..s.features.rows()).map(|r| s.features.row(r).to_vec()).collect(),
            })
            .collect(),
    };

    let images: Vec<serde_json::Value> = scenes
        .iter()
        .map(|s| {
            serde_json::json!({
                "id": s.id,
                "width": cfg.image_size,
                "height": cfg.image_size,
                "file_name": format!("scene_{:06}.png", s.id),
            })
        })
        .collect();

    let mut caption_anns = Vec::new();
    let mut box_anns = Vec::new();
    for s in &scenes {
        for c in &s.captions {
            caption_anns.push(serde_json::json!({
                "id": caption_anns.len(),
                "image_id": s.id,
                "caption": c,
            }));
        }
        for o in &s.objects {
            let fp = o.footprint;
            box_anns.push(serde_json::json!({
                "id": box_anns.len(),
                "image_id": s.id,
                "category_id": o.category_id(),
                "bbox": [
                    fp.col as u32 * side,
                    fp.row as u32 * side,
                    fp.width as u32 * side,
                    fp.height as u32 * side,
                ],
                "area": (fp.width * fp.height) as u32 * side * side,
                "iscrowd": 0,
            }));
        }
    }
    let mut categories = Vec::new();
    for (ci, color) in COLORS.iter().enumerate() {
        for (si, shape) in SHAPES.iter().enumerate() {
            categories.push(serde_json::json!({
                "id": category_id(ci, si),
                "name": format!("{color} {shape}"),
                "supercategory": "shape",
            }));
        }
    }
    categories.sort_by_key(|c| c["id"].as_u64());
    let captions = serde_json::json!({ "images": images, "annotations": caption_anns });
    let annotations = serde_json::json!({
        "images": images,
        "annotations": box_anns,
        "categories": categories,
    });
    let qa: Vec<&QaPair> = scenes.iter().flat_map(|s| &s.qa).collect();

    let payloads = [
        (FEATURES_FILE, to_json(&features)),
        (CAPTIONS_FILE, to_json(&captions)),
        (ANNOTATIONS_FILE, to_json(&annotations)),
        (QA_FILE, to_json(&qa)),
    ];
    let mut files = BTreeMap::new();
    for (name, bytes) in &payloads {
        write_file(&dir.join(name), bytes)?;
        files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    }
    let (val, train): (Vec<u64>, Vec<u64>) = scenes.iter().map(|s| s.id).partition(|id| is_validation(*id));
    let manifest = Manifest {
        config_seed: cfg.seed,
        scenes: cfg.scenes,
        grid: cfg.grid,
        dim: cfg.dim,
        image_size: cfg.image_size,
        train_hash: split_hash(&train),
        val_hash: split_hash(&val),
        train,
        val,
        files,
    };
    write_file(&dir.join(MANIFEST_FILE), &to_json(&manifest))?;
    Ok(manifest)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
}

/// Image features keyed by image id.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub grid: usize,
    pub dim: usize,
    pub images: BTreeMap<u64, ImageAnnotation>,
}

impl FeatureSet {
    pub fn from_file(file: FeatureFile, path: &Path) -> Result<Self> {
        let regions = file.grid * file.grid;
        if regions == 0 || file.dim == 0 {
            return Err(Error::data(path, "grid and dim must be positive"));
        }
        let mut images = BTreeMap::new();
        for img in file.images {
            if img.features.len() != regions || img.features.iter().any(|r| r.len() != file.dim) {
                return Err(Error::data(
                    path,
                    format!("image {} is not {regions}×{}", img.image_id, file.dim),
                ));
            }
            if img.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::data(path, format!("image {} has non-finite features", img.image_id)));
            }
            let arr = DenseArray::from_rows(&img.features).map_err(|e| Error::data(path, e.to_string()))?;
            let ann = ImageAnnotation::new(arr).map_err(|e| Error::data(path, e.to_string()))?;
            if images.insert(img.image_id, ann).is_some() {
                return Err(Error::data(path, format!("duplicate image id {}", img.image_id)));
            }
        }
        Ok(Self {
            grid: file.grid,
            dim: file.dim,
            images,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: FeatureFile = read_json(path)?;
        Self::from_file(file, path)
    }

    pub fn get(&self, id: u64) -> Option<&ImageAnnotation> {
        self.images.get(&id)
    }
}

#[derive(Deserialize)]
struct CocoCaptions {
    annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct CocoCaption {
    image_id: u64,
    caption: String,
}

/// Raw caption strings per image, in file order.
pub fn load_captions(path: &Path) -> Result<BTreeMap<u64, Vec<String>>> {
    let raw: CocoCaptions = read_json(path)?;
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for a in raw.annotations {
        out.entry(a.image_id).or_default().push(a.caption);
    }
    Ok(out)
}

pub fn load_qa(path: &Path) -> Result<Vec<QaPair>> {
    read_json(path)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

/// Everything a dataset directory holds.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub features: FeatureSet,
    pub captions: BTreeMap<u64, Vec<String>>,
    pub annotations: AnnotationSet,
    pub qa: Vec<QaPair>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        let features = FeatureSet::load(&dir.join(FEATURES_FILE))?;
        let captions = load_captions(&dir.join(CAPTIONS_FILE))?;
        let annotations = AnnotationSet::load(&dir.join(ANNOTATIONS_FILE))?;
        let qa = load_qa(&dir.join(QA_FILE))?;
        for id in manifest.train.iter().chain(&manifest.val) {
            if features.get(*id).is_none() {
                return Err(Error::data(dir.join(FEATURES_FILE), format!("missing features for image {id}")));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            features,
            captions,
            annotations,
            qa,
            manifest,
        })
    }

    pub fn train_ids(&self) -> &[u64] {
        &self.manifest.train
    }

    pub fn val_ids(&self) -> &[u64] {
        &self.manifest.val
    }
}
