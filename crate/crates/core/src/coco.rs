//! COCO JSON annotations for line, word and character boxes.
//!
//! Only the fields used here are modelled; anything else in a file (`info`,
//! `licenses`, `segmentation`, …) is ignored on input. Recognized text is
//! carried in a top-level `"text"` key on each annotation, which COCO itself
//! does not define; it is optional on input.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::GroundTruthPage;
use crate::geometry::{BBox, ObjectClass};
use crate::image::ImageCrop;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("COCO schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("image for COCO entry {file_name}: {reason}")]
    Image { file_name: String, reason: String },
}

fn schema(location: impl Into<String>, message: impl Into<String>) -> CocoError {
    CocoError::Schema {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Category id used on export for each class.
pub fn category_id(class: ObjectClass) -> u64 {
    match class {
        ObjectClass::Line => 1,
        ObjectClass::Word => 2,
        ObjectClass::Char => 3,
    }
}

pub fn category(class: ObjectClass) -> CocoCategory {
    CocoCategory {
        id: category_id(class),
        name: class.name().to_string(),
    }
}

impl CocoDocument {
    pub fn from_json(json: &str) -> Result<Self, CocoError> {
        let mut de = serde_json::Deserializer::from_str(json);
        let doc: CocoDocument = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let location = if path == "." { "$".to_string() } else { format!("$.{path}") };
            schema(location, e.into_inner().to_string())
        })?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("COCO documents always serialize")
    }

    /// Checks ids, category names, references and box sizes.
    pub fn validate(&self) -> Result<(), CocoError> {
        let mut images = HashSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !images.insert(img.id) {
                return Err(schema(format!("$.images[{i}].id"), format!("duplicate image id {}", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(schema(format!("$.images[{i}]"), "width and height must be positive"));
            }
        }
        let mut cats = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !cats.insert(c.id) {
                return Err(schema(format!("$.categories[{i}].id"), format!("duplicate category id {}", c.id)));
            }
            if ObjectClass::from_name(&c.name).is_none() {
                return Err(schema(
                    format!("$.categories[{i}].name"),
                    format!("unknown category {:?}; allowed names are line, word, char", c.name),
                ));
            }
        }
        let mut anns = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if !anns.insert(a.id) {
                return Err(schema(format!("$.annotations[{i}].id"), format!("duplicate annotation id {}", a.id)));
            }
            if !images.contains(&a.image_id) {
                return Err(schema(
                    format!("$.annotations[{i}].image_id"),
                    format!("image id {} does not exist", a.image_id),
                ));
            }
            if !cats.contains(&a.category_id) {
                return Err(schema(
                    format!("$.annotations[{i}].category_id"),
                    format!("category id {} does not exist", a.category_id),
                ));
            }
            let [x, y, w, h] = a.bbox;
            if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
                return Err(schema(
                    format!("$.annotations[{i}].bbox"),
                    "bbox must be finite with positive width and height",
                ));
            }
        }
        Ok(())
    }

    fn class_of(&self) -> HashMap<u64, ObjectClass> {
        self.categories
            .iter()
            .filter_map(|c| ObjectClass::from_name(&c.name).map(|cls| (c.id, cls)))
            .collect()
    }

    /// Annotations of one image as `(class, box, text)`, in file order.
    pub fn boxes_for_image(&self, image_id: u64) -> Vec<(ObjectClass, BBox, Option<&str>)> {
        let classes = self.class_of();
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .filter_map(|a| {
                let class = *classes.get(&a.category_id)?;
                let [x, y, w, h] = a.bbox;
                let bbox = BBox::from_xywh(x, y, w, h).ok()?;
                Some((class, bbox, a.text.as_deref()))
            })
            .collect()
    }

    pub fn ground_truth(&self, image_id: u64) -> GroundTruthPage {
        let mut gt = GroundTruthPage::default();
        for (class, bbox, _) in self.boxes_for_image(image_id) {
            match class {
                ObjectClass::Line => gt.lines.push(bbox),
                ObjectClass::Word => gt.words.push(bbox),
                ObjectClass::Char => gt.chars.push(bbox),
            }
        }
        gt
    }

    /// The image entry for `file_name`: exact match first, then by base
    /// name; a single-image document matches any name.
    pub fn find_image(&self, file_name: &str) -> Option<&CocoImage> {
        if let Some(img) = self.images.iter().find(|i| i.file_name == file_name) {
            return Some(img);
        }
        let base = |s: &str| Path::new(s).file_name().map(|f| f.to_os_string());
        let wanted = base(file_name);
        if let Some(img) = self.images.iter().find(|i| wanted.is_some() && base(&i.file_name) == wanted) {
            return Some(img);
        }
        match self.images.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }
}

/// Crops every annotation of `class` that carries text, paired with that
/// text. Image files are looked up as `image_dir/file_name`.
pub fn labeled_crops(
    doc: &CocoDocument,
    image_dir: &Path,
    class: ObjectClass,
) -> Result<Vec<(ImageCrop, String)>, CocoError> {
    let mut out = Vec::new();
    for img in &doc.images {
        let boxes: Vec<(BBox, &str)> = doc
            .boxes_for_image(img.id)
            .into_iter()
            .filter(|(c, _, t)| *c == class && t.is_some_and(|t| !t.is_empty()))
            .map(|(_, b, t)| (b, t.unwrap_or_default()))
            .collect();
        if boxes.is_empty() {
            continue;
        }
        let image_err = |reason: String| CocoError::Image {
            file_name: img.file_name.clone(),
            reason,
        };
        let page = ImageCrop::open(&image_dir.join(&img.file_name)).map_err(|e| image_err(e.to_string()))?;
        for (b, text) in boxes {
            let (crop, _) = page.crop(&b).map_err(|e| image_err(e.to_string()))?;
            out.push((crop, text.to_string()));
        }
    }
    Ok(out)
}

pub fn parse_coco(path: &Path) -> Result<CocoDocument, CocoError> {
    let json = std::fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CocoDocument::from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "file_name": "page.png", "width": 100, "height": 50}],
        "annotations": [{"id": 7, "image_id": 1, "bbox": [10, 10, 50, 20], "category_id": 1}],
        "categories": [{"id": 1, "name": "line"}]
    }"#;

    #[test]
    fn minimal_file() {
        let doc = CocoDocument::from_json(MINIMAL).unwrap();
        let boxes = doc.boxes_for_image(1);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].0, ObjectClass::Line);
        assert_eq!(boxes[0].1, BBox::new(10.0, 10.0, 60.0, 30.0).unwrap());
        assert_eq!(boxes[0].2, None);
        assert_eq!(doc.ground_truth(1).lines.len(), 1);
    }

    #[test]
    fn extra_fields_tolerated() {
        let json = MINIMAL.replacen("\"images\"", "\"info\": {\"year\": 2020}, \"images\"", 1);
        assert!(CocoDocument::from_json(&json).is_ok());
    }

    #[test]
    fn broken_reference() {
        let json = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 9");
        match CocoDocument::from_json(&json) {
            Err(CocoError::Schema { location, .. }) => assert_eq!(location, "$.annotations[0].image_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_category_lists_allowed_names() {
        let json = MINIMAL.replace("\"line\"", "\"paragraph\"");
        let err = CocoDocument::from_json(&json).unwrap_err().to_string();
        assert!(err.contains("$.categories[0].name"), "{err}");
        assert!(err.contains("line, word, char"), "{err}");
    }

    #[test]
    fn missing_field_has_location() {
        let json = MINIMAL.replace("\"category_id\": 1", "\"cat\": 1");
        let err = CocoDocument::from_json(&json).unwrap_err().to_string();
        assert!(err.contains("$.annotations[0]"), "{err}");
        assert!(err.contains("category_id"), "{err}");
    }

    #[test]
    fn zero_size_box_rejected() {
        let json = MINIMAL.replace("[10, 10, 50, 20]", "[10, 10, 0, 20]");
        assert!(CocoDocument::from_json(&json).is_err());
    }

    #[test]
    fn find_image_by_basename() {
        let doc = CocoDocument::from_json(MINIMAL).unwrap();
        assert_eq!(doc.find_image("some/dir/page.png").unwrap().id, 1);
        // single-image documents match anything
        assert_eq!(doc.find_image("other.png").unwrap().id, 1);
    }

    #[test]
    fn labeled_crops_cut_annotated_boxes() {
        let dir = tempfile::tempdir().unwrap();
        ImageCrop::filled(100, 50, 0.5).unwrap().save_png(&dir.path().join("page.png")).unwrap();
        let json = MINIMAL
            .replace("\"category_id\": 1}", "\"category_id\": 1, \"text\": \"ab\"}")
            .replace("[10, 10, 50, 20]", "[10, 10, 5, 7]");
        let doc = CocoDocument::from_json(&json).unwrap();
        let crops = labeled_crops(&doc, dir.path(), ObjectClass::Line).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!((crops[0].0.width(), crops[0].0.height()), (5, 7));
        assert_eq!(crops[0].1, "ab");
        assert!(labeled_crops(&doc, dir.path(), ObjectClass::Char).unwrap().is_empty());
    }
}
