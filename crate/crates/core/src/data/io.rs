//! On-disk dataset format: binary PPM images plus per-split JSON
//! annotations and a regeneration manifest.
//!
//! Layout: `<root>/{source,target}/{train,val}/img_%05d.ppm` with an
//! `annotations.json` next to the images and a `manifest.json` at the
//! root. Everything is byte-reproducible from the manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ShiftConfig;
use crate::error::CoreError;
use crate::matching::GroundTruth;

use super::{generate_scene, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    /// Offset so train and val draw from disjoint seed ranges.
    fn seed_offset(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectRecord {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub file: String,
    pub seed: u64,
    pub domain: u8,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub train_count: usize,
    pub val_count: usize,
    pub shift: ShiftConfig,
}

/// Writes one (3, H, W) image as an 8-bit binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), CoreError> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(32 + 3 * plane);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes.push(v);
        }
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Reads a binary PPM back into a (3, H, W) tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor, CoreError> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let err = |offset: usize, detail: &str| CoreError::PpmParse {
        path: path.to_path_buf(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(err(0, "expected P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err(pos, "expected integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| err(start, "integer out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err(pos, "only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after maxval")),
    }
    let plane = h * w;
    if bytes.len() - pos < 3 * plane {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = bytes[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(CoreError::from)
}

fn domain_dir(root: &Path, domain: u8, split: Split) -> PathBuf {
    root.join(if domain == 0 { "source" } else { "target" })
        .join(split.dir_name())
}

/// Generates and writes `count` scenes of one split for both domains.
/// Source and target use the same per-scene seeds, so the shift is
/// photometric only and annotations coincide.
pub fn write_split(
    root: &Path,
    count: usize,
    split: Split,
    shift: &ShiftConfig,
    base_seed: u64,
    image_size: (usize, usize),
) -> Result<(), CoreError> {
    for domain in [0u8, 1u8] {
        let dir = domain_dir(root, domain, split);
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let seed = base_seed + split.seed_offset() + i as u64;
            let scene = generate_scene(seed, domain, shift, image_size);
            let file = format!("img_{i:05}.ppm");
            write_ppm(&dir.join(&file), &scene.image)?;
            records.push(AnnotationRecord {
                file,
                seed,
                domain,
                objects: scene
                    .annotations
                    .classes
                    .iter()
                    .zip(&scene.annotations.boxes)
                    .map(|(&class, b)| ObjectRecord {
                        class,
                        cx: b[0],
                        cy: b[1],
                        w: b[2],
                        h: b[3],
                    })
                    .collect(),
            });
        }
        let ann_path = dir.join("annotations.json");
        let json = serde_json::to_string_pretty(&records).expect("annotation serialization");
        let mut f = fs::File::create(&ann_path).map_err(|e| CoreError::io(&ann_path, e))?;
        f.write_all(json.as_bytes())
            .map_err(|e| CoreError::io(&ann_path, e))?;
    }
    Ok(())
}

/// Generates the full benchmark: train and val splits for both domains
/// plus the manifest that makes regeneration bit-identical.
pub fn write_benchmark(
    root: &Path,
    train_count: usize,
    val_count: usize,
    shift: &ShiftConfig,
    seed: u64,
    image_size: (usize, usize),
) -> Result<DatasetManifest, CoreError> {
    fs::create_dir_all(root).map_err(|e| CoreError::io(root, e))?;
    write_split(root, train_count, Split::Train, shift, seed, image_size)?;
    write_split(root, val_count, Split::Val, shift, seed, image_size)?;
    let manifest = DatasetManifest {
        version: 1,
        seed,
        image_size,
        train_count,
        val_count,
        shift: shift.clone(),
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&path, json).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CoreError> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        let offset = text
            .lines()
            .take(line.saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + column.saturating_sub(1);
        CoreError::JsonParse {
            path: path.to_path_buf(),
            offset,
            line,
            column,
            detail: e.to_string(),
        }
    })
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, CoreError> {
    parse_json(&root.join("manifest.json"))
}

/// Reads every scene of one domain and split, in annotation order.
pub fn read_split(root: &Path, domain: u8, split: Split) -> Result<Vec<Scene>, CoreError> {
    let dir = domain_dir(root, domain, split);
    let records: Vec<AnnotationRecord> = parse_json(&dir.join("annotations.json"))?;
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let img_path = dir.join(&rec.file);
        if !img_path.exists() {
            return Err(CoreError::MissingImage { path: img_path });
        }
        let image = read_ppm(&img_path)?;
        scenes.push(Scene {
            image,
            annotations: GroundTruth {
                classes: rec.objects.iter().map(|o| o.class).collect(),
                boxes: rec.objects.iter().map(|o| [o.cx, o.cy, o.w, o.h]).collect(),
            },
            domain: rec.domain,
            seed: rec.seed,
        });
    }
    Ok(scenes)
}
