use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{DatasetManifest, GroundTruthBox, ImageRecord, MIN_IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::geometry::BBox;

fn key<'a>(obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Format(format!("missing key `{name}` in {ctx}")))
}

fn as_u64(v: &Value, name: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Format(format!("key `{name}` must be a non-negative integer")))
}

fn as_array<'a>(v: &'a Value, name: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::Format(format!("key `{name}` must be an array")))
}

/// Read a COCO detection annotation file. Boxes become corner form,
/// degenerate and crowd annotations leave the training set, and category
/// ids are remapped onto `1..=C` in ascending source-id order.
pub fn load_coco(annotation_path: &Path, image_root: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("invalid JSON: {e}")))?;

    let mut images = Vec::new();
    for img in as_array(key(&root, "images", "top level")?, "images")? {
        let id = as_u64(key(img, "id", "image")?, "id")?;
        let width = as_u64(key(img, "width", "image")?, "width")? as u32;
        let height = as_u64(key(img, "height", "image")?, "height")? as u32;
        let file_path = key(img, "file_name", "image")?
            .as_str()
            .ok_or_else(|| Error::Format("key `file_name` must be a string".into()))?
            .to_string();
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::Format(format!(
                "image {id} is {width}×{height}; both sides must be at least {MIN_IMAGE_SIDE}"
            )));
        }
        images.push(ImageRecord {
            id,
            width,
            height,
            file_path,
            pixels: None,
        });
    }

    let mut source_ids = BTreeMap::new();
    for cat in as_array(key(&root, "categories", "top level")?, "categories")? {
        let id = as_u64(key(cat, "id", "category")?, "id")?;
        let name = key(cat, "name", "category")?.as_str().unwrap_or_default().to_string();
        source_ids.insert(id, name);
    }
    let remap: BTreeMap<u64, usize> = source_ids.keys().enumerate().map(|(i, &s)| (s, i + 1)).collect();
    let categories = source_ids.values().enumerate().map(|(i, n)| (i + 1, n.clone())).collect();
    let source_category_ids = remap.iter().map(|(&s, &c)| (c, s)).collect();

    let image_dims: BTreeMap<u64, (u32, u32)> = images.iter().map(|r| (r.id, (r.width, r.height))).collect();
    let mut annotations = Vec::new();
    let mut crowd = Vec::new();
    for ann in as_array(key(&root, "annotations", "top level")?, "annotations")? {
        let image_id = as_u64(key(ann, "image_id", "annotation")?, "image_id")?;
        let &(w, h) = image_dims
            .get(&image_id)
            .ok_or_else(|| Error::Format(format!("annotation references unknown image {image_id}")))?;
        let cat = as_u64(key(ann, "category_id", "annotation")?, "category_id")?;
        let class_id = *remap
            .get(&cat)
            .ok_or_else(|| Error::Format(format!("annotation references unknown category {cat}")))?;
        let raw = as_array(key(ann, "bbox", "annotation")?, "bbox")?;
        if raw.len() != 4 {
            return Err(Error::Format("key `bbox` must hold four numbers".into()));
        }
        let mut xywh = [0.0; 4];
        for (slot, v) in xywh.iter_mut().zip(raw) {
            *slot = v.as_f64().ok_or_else(|| Error::Format("bbox entries must be numbers".into()))?;
        }
        let is_crowd = ann.get("iscrowd").and_then(Value::as_u64).unwrap_or(0) == 1;
        if xywh[2] <= 0.0 || xywh[3] <= 0.0 {
            continue;
        }
        let bbox = BBox::from_xywh(xywh).clip(w as f64, h as f64);
        if !bbox.is_valid() {
            continue;
        }
        let gt = GroundTruthBox {
            image_id,
            class_id,
            bbox,
        };
        if is_crowd {
            crowd.push(gt);
        } else {
            annotations.push(gt);
        }
    }

    Ok(DatasetManifest {
        images,
        annotations,
        crowd,
        categories,
        source_category_ids,
        image_root: image_root.to_path_buf(),
    })
}

#[derive(Serialize)]
struct CocoImage<'a> {
    id: u64,
    width: u32,
    height: u32,
    file_name: &'a str,
}

#[derive(Serialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Serialize)]
struct CocoCategory<'a> {
    id: u64,
    name: &'a str,
}

#[derive(Serialize)]
struct CocoFile<'a> {
    images: Vec<CocoImage<'a>>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory<'a>>,
}

/// Serialize a manifest as COCO detection JSON (source category ids restored).
pub fn coco_json(manifest: &DatasetManifest) -> Result<String> {
    let source = |c: usize| manifest.source_category_ids.get(&c).copied().unwrap_or(c as u64);
    let mut annotations = Vec::new();
    let all = manifest.annotations.iter().map(|a| (a, 0u8)).chain(manifest.crowd.iter().map(|a| (a, 1u8)));
    for (i, (a, is_crowd)) in all.enumerate() {
        annotations.push(CocoAnnotation {
            id: i as u64 + 1,
            image_id: a.image_id,
            category_id: source(a.class_id),
            bbox: a.bbox.to_xywh(),
            area: a.bbox.area(),
            iscrowd: is_crowd,
        });
    }
    let used: BTreeSet<usize> = manifest.categories.keys().copied().collect();
    let file = CocoFile {
        images: manifest
            .images
            .iter()
            .map(|r| CocoImage {
                id: r.id,
                width: r.width,
                height: r.height,
                file_name: &r.file_path,
            })
            .collect(),
        annotations,
        categories: used
            .iter()
            .map(|&c| CocoCategory {
                id: source(c),
                name: &manifest.categories[&c],
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_coco(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = coco_json(manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
