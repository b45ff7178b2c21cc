//! Synthetic "toy damage" scenes: textured rectangles on a noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CocoCategory, Dataset, Rgb8, Sample};
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
    Gradient,
}

const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Gradient];
const PALETTE: [[u8; 3]; 6] = [
    [220, 50, 50],
    [40, 200, 70],
    [60, 90, 230],
    [230, 200, 40],
    [200, 60, 210],
    [40, 210, 210],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            num_classes: 3,
            min_instances: 1,
            max_instances: 3,
            min_side: 12,
            max_side: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of 32",
                self.size
            )));
        }
        if self.num_classes == 0 || self.num_classes > PALETTE.len() * TEXTURES.len() {
            return Err(Error::Config(format!(
                "num_classes {} outside 1..=18",
                self.num_classes
            )));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(
                "instances range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.min_side < 2 || self.min_side > self.max_side || self.max_side > self.size {
            return Err(Error::Config(
                "box side range must satisfy 2 <= min <= max <= size".into(),
            ));
        }
        Ok(())
    }

    /// Fill family and base colour of a class.
    pub fn appearance(class: usize) -> (Texture, [u8; 3]) {
        (
            TEXTURES[class % 3],
            PALETTE[(class / 3 + class) % PALETTE.len()],
        )
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| {
                let (t, _) = Self::appearance(c);
                let base = match t {
                    Texture::Solid => "solid",
                    Texture::Striped => "striped",
                    Texture::Gradient => "gradient",
                };
                if c < 3 {
                    base.to_string()
                } else {
                    format!("{base}_{}", c / 3)
                }
            })
            .collect()
    }
}

/// Written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub num_images: usize,
    pub num_annotations: usize,
    pub class_counts: Vec<usize>,
    pub files: Vec<String>,
}

impl SynthManifest {
    pub fn of(cfg: &SynthConfig, ds: &Dataset) -> Self {
        let mut class_counts = vec![0; cfg.num_classes];
        for s in &ds.samples {
            for &c in &s.classes {
                class_counts[c] += 1;
            }
        }
        SynthManifest {
            config: cfg.clone(),
            num_images: ds.samples.len(),
            num_annotations: class_counts.iter().sum(),
            class_counts,
            files: ds.samples.iter().map(|s| s.file_name.clone()).collect(),
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: u8, amount: i32) -> u8 {
    (c as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8
}

fn paint(img: &mut Rgb8, b: &BoxXyxy, class: usize, rng: &mut ChaCha8Rng) {
    let (texture, base) = SynthConfig::appearance(class);
    let base = base.map(|c| jitter(rng, c, 15));
    let (x0, y0, x1, y1) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
    let period = 4;
    for y in y0..y1 {
        for x in x0..x1 {
            let c = match texture {
                Texture::Solid => base,
                Texture::Striped => {
                    if ((y - y0) / (period / 2)) % 2 == 0 {
                        base
                    } else {
                        [20, 20, 20]
                    }
                }
                Texture::Gradient => {
                    let f = 0.25 + 0.75 * (x - x0) as f64 / (x1 - x0).max(1) as f64;
                    base.map(|v| (v as f64 * f).round() as u8)
                }
            };
            img.set(x, y, c);
        }
    }
}

fn overlaps(a: &BoxXyxy, b: &BoxXyxy) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn scene(cfg: &SynthConfig, index: usize) -> (Rgb8, Vec<BoxXyxy>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let s = cfg.size;
    let mut img = Rgb8::new(s, s);
    for v in img.pixels.iter_mut() {
        *v = rng.random_range(90..=150);
    }
    let want = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut boxes: Vec<BoxXyxy> = Vec::new();
    let mut classes = Vec::new();
    // Rejection-sample non-overlapping placements.
    for _ in 0..want {
        for _attempt in 0..100 {
            let w = rng.random_range(cfg.min_side..=cfg.max_side);
            let h = rng.random_range(cfg.min_side..=cfg.max_side);
            let x = rng.random_range(0..=s - w);
            let y = rng.random_range(0..=s - h);
            let b = BoxXyxy::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            if boxes.iter().all(|o| !overlaps(o, &b)) {
                let class = rng.random_range(0..cfg.num_classes);
                paint(&mut img, &b, class, &mut rng);
                boxes.push(b);
                classes.push(class);
                break;
            }
        }
    }
    (img, boxes, classes)
}

/// `n` images, each fully determined by `(cfg.seed, index)`.
pub fn generate_synthetic(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("number of images must be at least 1".into()));
    }
    let categories = cfg
        .category_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name,
        })
        .collect();
    let samples = (0..n)
        .map(|i| {
            let (image, boxes, classes) = scene(cfg, i);
            Sample {
                id: i as u64 + 1,
                file_name: format!("images/{i:06}.ppm"),
                image,
                boxes,
                classes,
            }
        })
        .collect();
    Ok(Dataset {
        categories,
        samples,
    })
}
