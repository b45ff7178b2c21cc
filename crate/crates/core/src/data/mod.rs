//! Datasets: synthetic generation, COCO-subset annotation I/O, pixmap
//! images and training-time augmentation.
//!
//! On disk a dataset is a directory holding `annotations.json` (a COCO
//! subset: `images[id, file_name, width, height]`,
//! `annotations[id, image_id, bbox, category_id]`, `categories[id, name]`)
//! with image files named relative to it. Images are binary P6 pixmaps; any
//! other format can be converted first, e.g. `convert in.jpg out.ppm`.

mod augment;
mod pnm;
mod synth;

pub use augment::{augment, Augmentation};
pub use pnm::Rgb8;
pub use synth::{generate_synthetic, SynthConfig, SynthManifest};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::geometry::BoxXyxy;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: Vec<f64>,
    pub category_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// The retained subset of a COCO annotation document. Unknown fields are
/// ignored on read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDocument {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("annotation document: {e}")))
    }
}

/// One image with its boxes. `classes` index [`Dataset::categories`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub image: Rgb8,
    pub boxes: Vec<BoxXyxy>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub categories: Vec<CocoCategory>,
    pub samples: Vec<Sample>,
}

/// Corner box of a COCO `[x, y, w, h]`, clamped to the image.
pub fn xywh_to_xyxy(b: &[f64], width: usize, height: usize) -> Option<BoxXyxy> {
    if b.len() != 4 || b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return None;
    }
    let r = BoxXyxy::new(b[0], b[1], b[0] + b[2], b[1] + b[3]).clipped(width as f64, height as f64);
    (r.width() > 0.0 && r.height() > 0.0).then_some(r)
}

impl Dataset {
    /// Build from a parsed document, fetching pixels through `load`.
    pub fn from_document(
        doc: &CocoDocument,
        mut load: impl FnMut(&CocoImage) -> Result<Rgb8>,
    ) -> Result<Self> {
        let class_of: HashMap<u64, usize> = doc
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
        if class_of.len() != doc.categories.len() {
            return Err(Error::Parse("duplicate category id".into()));
        }
        let mut slot: HashMap<u64, usize> = HashMap::new();
        let mut samples = Vec::with_capacity(doc.images.len());
        for im in &doc.images {
            if slot.insert(im.id, samples.len()).is_some() {
                return Err(Error::Parse(format!("image {}: duplicate id", im.id)));
            }
            let image = load(im)?;
            if image.width != im.width || image.height != im.height {
                return Err(Error::Parse(format!(
                    "image {}: file is {}x{}, document says {}x{}",
                    im.id, image.width, image.height, im.width, im.height
                )));
            }
            samples.push(Sample {
                id: im.id,
                file_name: im.file_name.clone(),
                image,
                boxes: Vec::new(),
                classes: Vec::new(),
            });
        }
        for a in &doc.annotations {
            let s = *slot.get(&a.image_id).ok_or_else(|| {
                Error::Parse(format!("annotation {}: unknown image {}", a.id, a.image_id))
            })?;
            let class = *class_of.get(&a.category_id).ok_or_else(|| {
                Error::Parse(format!(
                    "annotation {}: unknown category {}",
                    a.id, a.category_id
                ))
            })?;
            let sample = &mut samples[s];
            let b = xywh_to_xyxy(&a.bbox, sample.image.width, sample.image.height).ok_or_else(
                || Error::Parse(format!("annotation {}: malformed bbox {:?}", a.id, a.bbox)),
            )?;
            sample.boxes.push(b);
            sample.classes.push(class);
        }
        Ok(Dataset {
            categories: doc.categories.clone(),
            samples,
        })
    }

    /// The COCO document describing this dataset. Annotation ids count
    /// from 1 in sample order.
    pub fn document(&self) -> CocoDocument {
        let mut annotations = Vec::new();
        for s in &self.samples {
            for (b, &c) in s.boxes.iter().zip(&s.classes) {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: s.id,
                    bbox: vec![b.x1, b.y1, b.width(), b.height()],
                    category_id: self.categories[c].id,
                });
            }
        }
        CocoDocument {
            images: self
                .samples
                .iter()
                .map(|s| CocoImage {
                    id: s.id,
                    file_name: s.file_name.clone(),
                    width: s.image.width,
                    height: s.image.height,
                })
                .collect(),
            annotations,
            categories: self.categories.clone(),
        }
    }

    /// Write images and `annotations.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in &self.samples {
            let path = dir.join(&s.file_name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            s.image.write(&path)?;
        }
        crate::json::write(dir.join(ANNOTATIONS_FILE), &self.document())
    }

    /// Ground truth in evaluation form (category = class index).
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.samples
            .iter()
            .flat_map(|s| {
                s.boxes
                    .iter()
                    .zip(&s.classes)
                    .map(move |(b, &c)| GroundTruth {
                        image_id: s.id,
                        category: c,
                        bbox: *b,
                    })
            })
            .collect()
    }

    /// Keep samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        Dataset {
            categories: self.categories.clone(),
            samples: self.samples.iter().skip(start).take(len).cloned().collect(),
        }
    }
}

/// Path of the annotation document for a dataset directory or file path.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Load a COCO-subset document and the pixmaps it names (relative to the
/// document's directory).
pub fn load_coco_subset(path: &Path) -> Result<Dataset> {
    let doc_path = annotation_path(path);
    let text = std::fs::read_to_string(&doc_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", doc_path.display())))?;
    let doc = CocoDocument::parse(&text)?;
    let root = doc_path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::from_document(&doc, |im| Rgb8::read(&root.join(&im.file_name)))
}

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// `[B, 3, H, W]` normalized tensor of equally sized images.
pub fn image_tensor(images: &[&Rgb8]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("no images".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::Config(
            "images in a batch must share one size".into(),
        ));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        for c in 0..3 {
            for i in 0..h * w {
                data.push((img.pixels[i * 3 + c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD);
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// A detection in COCO results form, the interchange format between
/// inference and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: Vec<f64>,
    pub score: f64,
}

/// Convert result records to evaluation detections using the dataset's
/// category ids.
pub fn records_to_detections(
    records: &[DetectionRecord],
    categories: &[CocoCategory],
) -> Result<Vec<Detection>> {
    let class_of: HashMap<u64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let category = *class_of.get(&r.category_id).ok_or_else(|| {
                Error::Parse(format!("detection {i}: unknown category {}", r.category_id))
            })?;
            if r.bbox.len() != 4
                || r.bbox.iter().any(|v| !v.is_finite())
                || !(0.0..=1.0).contains(&r.score)
            {
                return Err(Error::Parse(format!("detection {i}: malformed record")));
            }
            let b = &r.bbox;
            Ok(Detection {
                image_id: r.image_id,
                category,
                bbox: BoxXyxy::new(b[0], b[1], b[0] + b[2], b[1] + b[3]),
                score: r.score,
            })
        })
        .collect()
}
