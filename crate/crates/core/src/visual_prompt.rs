//! Visual prompt block: semantic colour overlay plus a colour legend.
//!
//! Segmentation itself happens upstream; this module takes per-pixel class
//! ids, optionally folds them into four broad categories, paints them over
//! the camera frame and describes each colour for the text prompt.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ClassId = u16;

/// Blend factor used when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.45;

/// Magic bytes of the run-length label sidecar format.
pub const VPRL_MAGIC: &[u8; 4] = b"VPRL";

/// Bundled RELLIS-3D ontology with broad categories and palette.
pub const DEFAULT_CLASS_TABLE: &str = include_str!("../data/rellis_classes.toml");

#[derive(Debug, Error)]
pub enum VisualPromptError {
    #[error("class id {id} at pixel ({x}, {y}) is not in the class table")]
    UnknownClassId { id: ClassId, x: u32, y: u32 },
    #[error("image is {image_w}x{image_h} but label map is {labels_w}x{labels_h}")]
    DimensionMismatch {
        image_w: u32,
        image_h: u32,
        labels_w: u32,
        labels_h: u32,
    },
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("invalid class table: {0}")]
    InvalidTable(String),
    #[error("malformed label map {path}: {reason}")]
    MalformedLabelMap { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// The four coarse terrain categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadCategory {
    Sky,
    Traversable,
    NonTraversable,
    Obstacle,
}

impl BroadCategory {
    pub const ALL: [BroadCategory; 4] = [
        BroadCategory::Sky,
        BroadCategory::Traversable,
        BroadCategory::NonTraversable,
        BroadCategory::Obstacle,
    ];

    pub fn traversability_note(self) -> &'static str {
        match self {
            BroadCategory::Sky => "sky, not drivable, ignore for planning",
            BroadCategory::Traversable => "traversable terrain, safe to drive on",
            BroadCategory::NonTraversable => "non-traversable terrain, avoid",
            BroadCategory::Obstacle => "obstacle, must not be driven into",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BroadCategory::Sky => "sky",
            BroadCategory::Traversable => "traversable",
            BroadCategory::NonTraversable => "non_traversable",
            BroadCategory::Obstacle => "obstacle",
        }
    }
}

/// Row-major grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<ClassId>) -> Option<Self> {
        (labels.len() as u64 == width as u64 * height as u64).then_some(Self {
            width,
            height,
            labels,
        })
    }

    pub fn uniform(width: u32, height: u32, id: ClassId) -> Self {
        Self {
            width,
            height,
            labels: vec![id; (width * height) as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> ClassId {
        self.labels[(y * self.width + x) as usize]
    }

    fn position(&self, index: usize) -> (u32, u32) {
        let w = self.width.max(1) as usize;
        ((index % w) as u32, (index / w) as u32)
    }

    /// Pixel count per class id.
    pub fn histogram(&self) -> BTreeMap<ClassId, u64> {
        let mut counts = BTreeMap::new();
        for &id in &self.labels {
            *counts.entry(id).or_insert(0) += 1;
        }
        counts
    }

    /// Reads a label map from a single-channel PNG (8 or 16 bit) or a VPRL
    /// run-length file, chosen by content.
    pub fn load(path: &Path) -> Result<Self, VisualPromptError> {
        let bytes = fs::read(path).map_err(|source| VisualPromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.starts_with(VPRL_MAGIC) {
            return Self::decode_vprl(&bytes).map_err(|reason| VisualPromptError::MalformedLabelMap {
                path: path.display().to_string(),
                reason,
            });
        }
        let img = image::load_from_memory(&bytes).map_err(|source| VisualPromptError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let labels = match &img {
            image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as ClassId).collect(),
            image::DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0]).collect(),
            other => {
                return Err(VisualPromptError::MalformedLabelMap {
                    path: path.display().to_string(),
                    reason: format!("expected a single-channel PNG, got {:?}", other.color()),
                })
            }
        };
        Ok(Self {
            width: img.width(),
            height: img.height(),
            labels,
        })
    }

    /// VPRL layout, all little-endian u32: magic, width, height, then
    /// `(count, id)` runs in row-major order covering every pixel.
    pub fn encode_vprl(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * 16);
        out.extend_from_slice(VPRL_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        let mut iter = self.labels.iter().peekable();
        while let Some(&id) = iter.next() {
            let mut count = 1u32;
            while iter.peek() == Some(&&id) {
                iter.next();
                count += 1;
            }
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        out
    }

    pub fn decode_vprl(bytes: &[u8]) -> Result<Self, String> {
        let word = |i: usize| -> Result<u32, String> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| format!("truncated at byte {i}"))
        };
        if !bytes.starts_with(VPRL_MAGIC) {
            return Err("missing VPRL magic".into());
        }
        let (width, height) = (word(4)?, word(8)?);
        let total = width as u64 * height as u64;
        if (bytes.len() - 12) % 8 != 0 {
            return Err("run table is not a whole number of (count, id) pairs".into());
        }
        let mut labels = Vec::with_capacity(total.min(1 << 26) as usize);
        let mut offset = 12;
        while offset < bytes.len() {
            let (count, id) = (word(offset)?, word(offset + 4)?);
            let id = ClassId::try_from(id).map_err(|_| format!("class id {id} out of range"))?;
            if labels.len() as u64 + count as u64 > total {
                return Err(format!("runs exceed {width}x{height} pixels"));
            }
            labels.extend(std::iter::repeat_n(id, count as usize));
            offset += 8;
        }
        if labels.len() as u64 != total {
            return Err(format!("runs cover {} of {total} pixels", labels.len()));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn save_vprl(&self, path: &Path) -> Result<(), VisualPromptError> {
        fs::write(path, self.encode_vprl()).map_err(|source| VisualPromptError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Writes an 8-bit grayscale PNG when every id fits, 16-bit otherwise.
    pub fn save_png(&self, path: &Path) -> Result<(), VisualPromptError> {
        let res = if self.labels.iter().all(|&id| id <= u8::MAX as ClassId) {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
                self.width,
                self.height,
                self.labels.iter().map(|&id| id as u8).collect(),
            )
            .expect("dimensions checked at construction");
            buf.save(path)
        } else {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(self.width, self.height, self.labels.clone())
                    .expect("dimensions checked at construction");
            buf.save(path)
        };
        res.map_err(|source| VisualPromptError::Image {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    pub category: BroadCategory,
    pub rgb: [u8; 3],
    /// Human-readable colour for the legend, e.g. "dark green".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassTableFile {
    #[serde(default)]
    categories: BTreeMap<BroadCategory, ClassId>,
    classes: Vec<ClassEntry>,
}

/// Class id to name, broad category and overlay colour.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    entries: BTreeMap<ClassId, ClassEntry>,
    /// The class id standing for each broad category after consolidation.
    representatives: BTreeMap<BroadCategory, ClassId>,
}

impl ClassTable {
    pub fn new(
        classes: Vec<ClassEntry>,
        representatives: BTreeMap<BroadCategory, ClassId>,
    ) -> Result<Self, VisualPromptError> {
        let invalid = |msg: String| Err(VisualPromptError::InvalidTable(msg));
        let mut entries = BTreeMap::new();
        let mut colors = HashSet::new();
        for entry in classes {
            if !colors.insert(entry.rgb) {
                return invalid(format!("colour {:?} used by more than one class", entry.rgb));
            }
            let id = entry.id;
            if entries.insert(id, entry).is_some() {
                return invalid(format!("class id {id} defined twice"));
            }
        }
        for (&category, &id) in &representatives {
            match entries.get(&id) {
                Some(e) if e.category == category => {}
                Some(e) => {
                    return invalid(format!(
                        "category {} maps to class {id} ({}) of category {}",
                        category.as_str(),
                        e.name,
                        e.category.as_str()
                    ))
                }
                None => return invalid(format!("category {} maps to unknown class {id}", category.as_str())),
            }
        }
        for e in entries.values() {
            if !representatives.contains_key(&e.category) {
                return invalid(format!(
                    "class {} uses category {} which has no representative id",
                    e.name,
                    e.category.as_str()
                ));
            }
        }
        Ok(Self {
            entries,
            representatives,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, VisualPromptError> {
        let file: ClassTableFile =
            toml::from_str(text).map_err(|e| VisualPromptError::InvalidTable(e.to_string()))?;
        Self::new(file.classes, file.categories)
    }

    pub fn load(path: &Path) -> Result<Self, VisualPromptError> {
        let text = fs::read_to_string(path).map_err(|source| VisualPromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn rellis_default() -> Self {
        Self::from_toml(DEFAULT_CLASS_TABLE).expect("bundled class table is valid")
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ClassEntry> {
        self.entries.values()
    }

    pub fn representative(&self, category: BroadCategory) -> Option<ClassId> {
        self.representatives.get(&category).copied()
    }

    fn check_covers(&self, map: &LabelMap) -> Result<(), VisualPromptError> {
        match map.labels.iter().position(|id| !self.entries.contains_key(id)) {
            Some(i) => {
                let (x, y) = map.position(i);
                Err(VisualPromptError::UnknownClassId {
                    id: map.labels[i],
                    x,
                    y,
                })
            }
            None => Ok(()),
        }
    }
}

/// Replaces every class id by the id representing its broad category.
pub fn consolidate_labels(map: &LabelMap, table: &ClassTable) -> Result<LabelMap, VisualPromptError> {
    table.check_covers(map)?;
    let labels = map
        .labels
        .iter()
        .map(|id| {
            let category = table.entries[id].category;
            table.representatives[&category]
        })
        .collect();
    Ok(LabelMap {
        labels,
        ..map.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: RgbImage,
    pub alpha: f64,
}

impl AnnotatedImage {
    /// Lossless PNG bytes.
    pub fn encode_png(&self) -> Vec<u8> {
        encode_png(&self.pixels)
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

/// `round_half_up((1 − alpha)·base + alpha·mark)` for one channel.
fn blend_channel(base: u8, mark: u8, alpha: f64) -> u8 {
    let v = (1.0 - alpha) * base as f64 + alpha * mark as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Paints each pixel's class colour over the image.
pub fn overlay(
    image: &RgbImage,
    map: &LabelMap,
    table: &ClassTable,
    alpha: f64,
) -> Result<AnnotatedImage, VisualPromptError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(VisualPromptError::AlphaOutOfRange(alpha));
    }
    if image.dimensions() != (map.width, map.height) {
        return Err(VisualPromptError::DimensionMismatch {
            image_w: image.width(),
            image_h: image.height(),
            labels_w: map.width,
            labels_h: map.height,
        });
    }
    table.check_covers(map)?;
    let mut pixels = image.clone();
    for (px, id) in pixels.pixels_mut().zip(&map.labels) {
        let mark = table.entries[id].rgb;
        *px = Rgb([
            blend_channel(px.0[0], mark[0], alpha),
            blend_channel(px.0[1], mark[1], alpha),
            blend_channel(px.0[2], mark[2], alpha),
        ]);
    }
    Ok(AnnotatedImage { pixels, alpha })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub class_id: ClassId,
    pub class_name: String,
    pub color_name: Option<String>,
    pub rgb: [u8; 3],
    pub category: BroadCategory,
    pub pixel_count: u64,
}

impl LegendEntry {
    pub fn color_label(&self) -> String {
        let [r, g, b] = self.rgb;
        match &self.color_name {
            Some(name) => format!("{name} RGB({r}, {g}, {b})"),
            None => format!("RGB({r}, {g}, {b})"),
        }
    }

    pub fn note(&self) -> &'static str {
        self.category.traversability_note()
    }
}

/// Colour-to-meaning table, most frequent class first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Legend {
    pub entries: Vec<LegendEntry>,
}

impl Legend {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One line per entry, as injected into prompts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("- {} = {} ({})\n", e.color_label(), e.class_name, e.note()));
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<(), VisualPromptError> {
        let io = |source| VisualPromptError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_text().as_bytes()).map_err(io)
    }
}

impl fmt::Display for Legend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// One entry per class present, by descending pixel count then class id.
pub fn build_legend(map: &LabelMap, table: &ClassTable) -> Result<Legend, VisualPromptError> {
    table.check_covers(map)?;
    let mut entries: Vec<LegendEntry> = map
        .histogram()
        .into_iter()
        .map(|(id, pixel_count)| {
            let c = &table.entries[&id];
            LegendEntry {
                class_id: id,
                class_name: c.name.clone(),
                color_name: c.color_name.clone(),
                rgb: c.rgb,
                category: c.category,
                pixel_count,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.pixel_count.cmp(&a.pixel_count).then(a.class_id.cmp(&b.class_id)));
    Ok(Legend { entries })
}
