//! Writes transcription results as per-level COCO files and plain text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{category, category_id, CocoAnnotation, CocoDocument, CocoImage};
use crate::geometry::{BBox, ObjectClass};
use crate::pipeline::{JobResult, PageResult};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("export selection is empty")]
    EmptySelection,
    #[error("no successful results to export")]
    NoResults,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What to write: COCO files for some box levels, and/or one text file per
/// image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSelection {
    pub levels: Vec<ObjectClass>,
    pub include_assembled_text: bool,
}

impl ExportSelection {
    pub fn all() -> Self {
        Self {
            levels: ObjectClass::ALL.to_vec(),
            include_assembled_text: true,
        }
    }

    pub fn text_only() -> Self {
        Self {
            levels: Vec::new(),
            include_assembled_text: true,
        }
    }

    pub fn levels(levels: &[ObjectClass]) -> Self {
        Self {
            levels: levels.to_vec(),
            include_assembled_text: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExportError> {
        if self.levels.is_empty() && !self.include_assembled_text {
            return Err(ExportError::EmptySelection);
        }
        Ok(())
    }

    fn has(&self, class: ObjectClass) -> bool {
        self.levels.contains(&class)
    }
}

/// File name of the COCO export for one level.
pub fn coco_file_name(class: ObjectClass) -> String {
    format!("{}s.coco.json", class.name())
}

/// Text file name for an image id; path separators are replaced.
pub fn text_file_name(image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| if matches!(c, '/' | '\\' | '\0') { '_' } else { c })
        .collect();
    format!("{safe}.txt")
}

/// `(box, text)` for every annotation of `class` on a page.
pub fn page_boxes(page: &PageResult, class: ObjectClass) -> Vec<(BBox, String)> {
    let lines = &page.transcription.lines;
    match class {
        ObjectClass::Line => lines.iter().map(|l| (l.bbox, l.text.clone())).collect(),
        ObjectClass::Word => lines
            .iter()
            .flat_map(|l| &l.tokens)
            .filter(|t| !t.is_char)
            .map(|t| (t.bbox, t.text.clone()))
            .collect(),
        ObjectClass::Char => lines
            .iter()
            .flat_map(|l| &l.tokens)
            .flat_map(|t| {
                let own = t.is_char.then(|| (t.bbox, t.text.clone()));
                own.into_iter().chain(t.chars.iter().map(|c| (c.bbox, c.text.clone())))
            })
            .collect(),
    }
}

/// One COCO document for a level over all successful results. Image ids
/// are 1-based positions among those results.
pub fn coco_for_level(pages: &[&PageResult], class: ObjectClass) -> CocoDocument {
    let mut doc = CocoDocument {
        categories: vec![category(class)],
        ..CocoDocument::default()
    };
    for (i, page) in pages.iter().enumerate() {
        let image_id = i as u64 + 1;
        doc.images.push(CocoImage {
            id: image_id,
            file_name: page.file_name.clone(),
            width: page.width,
            height: page.height,
        });
        for (bbox, text) in page_boxes(page, class) {
            doc.annotations.push(CocoAnnotation {
                id: doc.annotations.len() as u64 + 1,
                image_id,
                bbox: bbox.to_xywh(),
                category_id: category_id(class),
                text: Some(text),
                area: Some(bbox.area()),
                iscrowd: Some(0),
            });
        }
    }
    doc
}

/// Writes the selected outputs into `out_dir` and returns the paths written.
/// Failed results are skipped.
pub fn export_results(results: &[JobResult], sel: &ExportSelection, out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    sel.validate()?;
    let ok: Vec<(&str, &PageResult)> = results
        .iter()
        .filter_map(|r| r.page().map(|p| (r.image_id.as_str(), p)))
        .collect();
    if ok.is_empty() {
        return Err(ExportError::NoResults);
    }
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| ExportError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let mut written = Vec::new();
    let pages: Vec<&PageResult> = ok.iter().map(|(_, p)| *p).collect();
    for class in ObjectClass::ALL.into_iter().filter(|c| sel.has(*c)) {
        let path = out_dir.join(coco_file_name(class));
        std::fs::write(&path, coco_for_level(&pages, class).to_json()).map_err(io(&path))?;
        written.push(path);
    }
    if sel.include_assembled_text {
        for (image_id, page) in &ok {
            let path = out_dir.join(text_file_name(image_id));
            std::fs::write(&path, &page.transcription.full_text).map_err(io(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}
