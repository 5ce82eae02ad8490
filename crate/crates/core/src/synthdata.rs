//! Seeded "blob-face" scenes with exact ground truth.
//!
//! A face is a bright filled ellipse with two dark eye dots and a mouth arc.
//! Distractors are plain ellipses drawn at face brightness and rectangles,
//! so the classifier has to look at the inner structure to tell them apart.
//! Every pixel is quantized to 8 bits so the P5 files round-trip exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{write_fddb_ellipses, write_wider_annotations, Ellipse};
use crate::geometry::{iou, BBox};
use crate::tinynet::Tensor;

const PLACEMENT_ATTEMPTS: usize = 500;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_w: usize,
    pub image_h: usize,
    /// Inclusive range.
    pub n_faces: (usize, usize),
    /// Inclusive range of face widths in pixels; heights are 1.1-1.35x.
    pub face_size: (usize, usize),
    pub noise_sigma: f64,
    pub distractor_count: (usize, usize),
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.image_w < 8 || self.image_h < 8 {
            return bad("image must be at least 8x8");
        }
        if self.n_faces.0 > self.n_faces.1 || self.distractor_count.0 > self.distractor_count.1 {
            return bad("count ranges must be ordered");
        }
        if self.face_size.0 < 8 || self.face_size.0 > self.face_size.1 {
            return bad("face size range must be ordered with minimum >= 8");
        }
        let tallest = (self.face_size.1 as f64 * 1.35).round() as usize;
        if self.n_faces.1 > 0 && (self.face_size.1 > self.image_w || tallest > self.image_h) {
            return bad("largest face does not fit in the image");
        }
        if !(0.0..=0.15).contains(&self.noise_sigma) {
            return bad("noise sigma must be in [0, 0.15]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Face,
    Ellipse,
    Rect,
}

struct Item {
    shape: Shape,
    bbox: BBox,
    level: f64,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Coverage value in `[0, 1]`-ish intensity for one sub-sample of a face.
/// Returns `None` outside the face ellipse.
fn face_sample(b: &BBox, level: f64, bg: f64, px: f64, py: f64) -> Option<f64> {
    let (cx, cy) = b.center();
    let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
    let (u, v) = ((px - cx) / rx, (py - cy) / ry);
    if u * u + v * v > 1.0 {
        return None;
    }
    let dark = bg - 0.05;
    // eyes
    let eye_r = 0.17;
    for ex in [-0.38, 0.38] {
        let (du, dv) = (u - ex, v + 0.22);
        if du * du + dv * dv < eye_r * eye_r {
            return Some(dark);
        }
    }
    // mouth: lower half of a ring around (0, 0.1)
    let (mu, mv) = (u, v - 0.1);
    let r = (mu * mu + mv * mv).sqrt();
    if mv > 0.12 && (r - 0.48).abs() < 0.1 {
        return Some(dark);
    }
    Some(level)
}

fn ellipse_sample(b: &BBox, level: f64, px: f64, py: f64) -> Option<f64> {
    let (cx, cy) = b.center();
    let (u, v) = ((px - cx) / (0.5 * b.width()), (py - cy) / (0.5 * b.height()));
    (u * u + v * v <= 1.0).then_some(level)
}

fn rect_sample(b: &BBox, level: f64, px: f64, py: f64) -> Option<f64> {
    (px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2).then_some(level)
}

fn random_face_box<R: Rng>(spec: &SceneSpec, rng: &mut R) -> BBox {
    let fw = rng.random_range(spec.face_size.0..=spec.face_size.1);
    let aspect = rng.random_range(1.1..1.35);
    let fh = ((fw as f64 * aspect).round() as usize).min(spec.image_h);
    let x = rng.random_range(0..=spec.image_w - fw) as f64;
    let y = rng.random_range(0..=spec.image_h - fh) as f64;
    BBox {
        x1: x,
        y1: y,
        x2: x + fw as f64,
        y2: y + fh as f64,
    }
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2
}

/// Renders scene `index` of the stream defined by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Tensor, Vec<BBox>)> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let (w, h) = (spec.image_w, spec.image_h);

    let bg = rng.random_range(0.15..0.4);
    let gradient = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let min_contrast = (4.5 * spec.noise_sigma).max(0.3);
    let face_level = |rng: &mut ChaCha8Rng| (bg + rng.random_range(min_contrast..min_contrast + 0.15)).min(0.98);

    let n_faces = rng.random_range(spec.n_faces.0..=spec.n_faces.1);
    let mut faces: Vec<BBox> = Vec::with_capacity(n_faces);
    let mut attempts = 0;
    while faces.len() < n_faces {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Placement { attempts: PLACEMENT_ATTEMPTS });
        }
        let b = random_face_box(spec, &mut rng);
        if faces.iter().all(|f| iou(f, &b) < 0.2) {
            faces.push(b);
        }
    }

    let mut items: Vec<Item> = Vec::new();
    let n_distract = rng.random_range(spec.distractor_count.0..=spec.distractor_count.1);
    for _ in 0..n_distract {
        let shape = if rng.random_bool(0.6) { Shape::Ellipse } else { Shape::Rect };
        // distractors that collide with a face are dropped rather than retried
        for _ in 0..20 {
            let mut b = random_face_box(spec, &mut rng);
            if rng.random_bool(0.5) {
                // random aspect, including wide blobs
                let fw = b.width() * rng.random_range(0.7..1.6);
                b.x2 = (b.x1 + fw.round()).min(w as f64);
            }
            if faces.iter().all(|f| !overlaps(f, &b, 1.0)) {
                items.push(Item {
                    shape,
                    bbox: b,
                    level: face_level(&mut rng),
                });
                break;
            }
        }
    }
    for f in &faces {
        items.push(Item {
            shape: Shape::Face,
            bbox: *f,
            level: face_level(&mut rng),
        });
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let inv = 1.0 / SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = bg + gradient.0 * (x as f64 / w as f64 - 0.5) + gradient.1 * (y as f64 / h as f64 - 0.5);
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * inv;
                    let py = y as f64 + (sy as f64 + 0.5) * inv;
                    let mut v = base;
                    for it in &items {
                        if !overlaps(&it.bbox, &BBox { x1: px, y1: py, x2: px, y2: py }, 0.0) {
                            continue;
                        }
                        let s = match it.shape {
                            Shape::Face => face_sample(&it.bbox, it.level, bg, px, py),
                            Shape::Ellipse => ellipse_sample(&it.bbox, it.level, px, py),
                            Shape::Rect => rect_sample(&it.bbox, it.level, px, py),
                        };
                        if let Some(s) = s {
                            v = s;
                        }
                    }
                    acc += v;
                }
            }
            let mean = acc * inv * inv;
            let noisy = if spec.noise_sigma > 0.0 { mean + noise.sample(&mut rng) } else { mean };
            data.push(quantize(noisy));
        }
    }
    Ok((Tensor::from_vec(&[1, h, w], data)?, faces))
}

#[inline]
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Writes a `[1, H, W]` image as binary P5, 8-bit.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image.chw()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary P5 file into a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(1, format!("expected P5 magic, got `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(1, format!("bad PGM header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(1, format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| Error::parse(1, "truncated PGM data"))?;
    let data = pixels.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::from_vec(&[1, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Image key without extension, relative to the dataset root.
    pub name: String,
    pub faces: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn total_faces(&self) -> usize {
        self.entries.iter().map(|e| e.faces.len()).sum()
    }
}

pub const WIDER_FILE: &str = "wider_annotations.txt";
pub const FDDB_FILE: &str = "fddb_ellipses.txt";
pub const IMAGE_DIR: &str = "images";

pub fn image_key(index: usize) -> String {
    format!("{IMAGE_DIR}/{index:05}")
}

/// Axis-aligned ellipse inscribed in a face box; the major axis is vertical
/// when the face is taller than wide.
pub fn box_to_ellipse(b: &BBox) -> Ellipse {
    let (cx, cy) = b.center();
    let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
    if ry >= rx {
        Ellipse {
            major_axis_radius: ry,
            minor_axis_radius: rx,
            angle: std::f64::consts::FRAC_PI_2,
            center_x: cx,
            center_y: cy,
        }
    } else {
        Ellipse {
            major_axis_radius: rx,
            minor_axis_radius: ry,
            angle: 0.0,
            center_x: cx,
            center_y: cy,
        }
    }
}

/// Writes `n_images` scenes as P5 files plus WIDER-style and FDDB-style
/// annotation files under `out_dir`.
pub fn write_dataset(spec: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let entries = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let (image, faces) = generate_scene(spec, i as u64)?;
            let name = image_key(i);
            write_pgm(&out_dir.join(format!("{name}.pgm")), &image)?;
            Ok(ManifestEntry { name, faces })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };

    let wider: Vec<(String, Vec<BBox>)> = manifest
        .entries
        .iter()
        .map(|e| (format!("{}.pgm", e.name), e.faces.clone()))
        .collect();
    write_text(&out_dir.join(WIDER_FILE), &write_wider_annotations(&wider))?;
    let fddb: Vec<(String, Vec<Ellipse>)> = manifest
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.faces.iter().map(box_to_ellipse).collect()))
        .collect();
    write_text(&out_dir.join(FDDB_FILE), &write_fddb_ellipses(&fddb))?;
    Ok(manifest)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Path of image `key` inside a dataset directory.
pub fn image_path(root: &Path, key: &str) -> PathBuf {
    root.join(format!("{key}.pgm"))
}
