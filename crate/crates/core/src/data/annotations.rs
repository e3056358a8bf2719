//! Tab-separated annotation files.
//!
//! ```text
//! image_path<TAB>class_name<TAB>x_min<TAB>y_min<TAB>x_max<TAB>y_max
//! images/000000.png<TAB>species_00<TAB>12<TAB>30<TAB>41<TAB>52
//! ```
//!
//! One header line, then one line per box in absolute pixel coordinates.
//! Image paths are relative to the dataset root. An optional `classes.txt`
//! next to the annotations fixes the class table (one name per line); without
//! it classes are numbered in order of first appearance.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use super::{DataError, DatasetEntry, DatasetIndex, LabeledBox, ValidationIssue};
use crate::geometry::BoundingBox;

pub const ANNOTATION_HEADER: &str = "image_path\tclass_name\tx_min\ty_min\tx_max\ty_max";

struct Row {
    line: usize,
    class: usize,
    bbox: BoundingBox,
}

pub fn load_dataset(root: &Path, annotation_file: &Path) -> Result<DatasetIndex, DataError> {
    let text = std::fs::read_to_string(annotation_file).map_err(|source| DataError::Io {
        path: annotation_file.to_path_buf(),
        source,
    })?;
    let fixed_classes = match std::fs::read_to_string(root.join("classes.txt")) {
        Ok(t) => Some(
            t.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect::<Vec<_>>(),
        ),
        Err(_) => None,
    };
    parse_annotations(root, &text, fixed_classes)
}

fn parse_annotations(root: &Path, text: &str, fixed_classes: Option<Vec<String>>) -> Result<DatasetIndex, DataError> {
    let mut issues = Vec::new();
    let mut classes: Vec<String> = fixed_classes.clone().unwrap_or_default();
    let mut class_ids: HashMap<String, usize> = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let mut rows: BTreeMap<String, Vec<Row>> = BTreeMap::new();

    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => {
            return Ok(DatasetIndex {
                root: Some(root.to_path_buf()),
                classes,
                ..Default::default()
            })
        }
        Some((_, h)) if h.trim_end_matches('\r') == ANNOTATION_HEADER => {}
        Some((_, h)) if h.trim().is_empty() => {}
        Some(_) => issues.push(ValidationIssue {
            line: Some(1),
            message: format!("header must be `{}`", ANNOTATION_HEADER.replace('\t', "<TAB>")),
        }),
    }

    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            issues.push(ValidationIssue {
                line: Some(line),
                message: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
            continue;
        }
        let (path, class) = (fields[0].trim(), fields[1].trim());
        if path.is_empty() || class.is_empty() {
            issues.push(ValidationIssue {
                line: Some(line),
                message: "empty image path or class name".into(),
            });
            continue;
        }
        let coords: Result<Vec<f64>, _> = fields[2..].iter().map(|f| f.trim().parse::<f64>()).collect();
        let Ok(coords) = coords else {
            issues.push(ValidationIssue {
                line: Some(line),
                message: "box coordinates must be numbers".into(),
            });
            continue;
        };
        let bbox = match BoundingBox::new(coords[0], coords[1], coords[2], coords[3]) {
            Ok(b) => b,
            Err(e) => {
                issues.push(ValidationIssue {
                    line: Some(line),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let class = match class_ids.get(class) {
            Some(&c) => c,
            None if fixed_classes.is_some() => {
                issues.push(ValidationIssue {
                    line: Some(line),
                    message: format!("unknown class `{class}`"),
                });
                continue;
            }
            None => {
                classes.push(class.to_string());
                class_ids.insert(class.to_string(), classes.len() - 1);
                classes.len() - 1
            }
        };
        rows.entry(path.to_string()).or_default().push(Row { line, class, bbox });
    }

    let mut entries = Vec::with_capacity(rows.len());
    for (path, rows) in rows {
        let full = root.join(&path);
        let (width, height) = match image::image_dimensions(&full) {
            Ok(d) => d,
            Err(e) => {
                issues.push(ValidationIssue {
                    line: Some(rows[0].line),
                    message: format!("image `{path}` cannot be read: {e}"),
                });
                continue;
            }
        };
        let mut boxes = Vec::with_capacity(rows.len());
        for r in rows {
            if r.bbox.x_min < 0.0 || r.bbox.y_min < 0.0 || r.bbox.x_max > width as f64 || r.bbox.y_max > height as f64 {
                issues.push(ValidationIssue {
                    line: Some(r.line),
                    message: format!("box lies outside the {width}x{height} image"),
                });
                continue;
            }
            boxes.push(LabeledBox {
                bbox: r.bbox,
                class: r.class,
            });
        }
        entries.push(DatasetEntry {
            label: common_label(&boxes),
            path,
            width,
            height,
            boxes,
            pixels: None,
        });
    }

    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line);
        return Err(DataError::Validation(issues));
    }
    Ok(DatasetIndex {
        root: Some(root.to_path_buf()),
        classes,
        entries,
        split: None,
    })
}

pub(crate) fn common_label(boxes: &[LabeledBox]) -> Option<usize> {
    let first = boxes.first()?.class;
    boxes.iter().all(|b| b.class == first).then_some(first)
}

/// Serialize an index in the annotation format.
pub fn to_tsv(index: &DatasetIndex) -> String {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    let mut entries: Vec<&DatasetEntry> = index.entries.iter().collect();
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    for e in entries {
        for b in &e.boxes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path, index.classes[b.class], b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max
            ));
        }
    }
    out
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
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
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Convert a COCO-style detection JSON (`images`, `annotations` with
/// `[x, y, w, h]` boxes, `categories`) into the annotation format.
/// `image_dir` is prefixed to every `file_name`.
pub fn coco_to_tsv(json: &str, image_dir: &str) -> Result<String, DataError> {
    let coco: CocoFile = serde_json::from_str(json).map_err(|e| DataError::Convert(e.to_string()))?;
    let images: HashMap<u64, &str> = coco.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
    let cats: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut lines = Vec::with_capacity(coco.annotations.len());
    for a in &coco.annotations {
        let file = images
            .get(&a.image_id)
            .ok_or_else(|| DataError::Convert(format!("annotation references unknown image {}", a.image_id)))?;
        let cat = cats
            .get(&a.category_id)
            .ok_or_else(|| DataError::Convert(format!("annotation references unknown category {}", a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        let path = if image_dir.is_empty() {
            file.to_string()
        } else {
            format!("{}/{}", image_dir.trim_end_matches('/'), file)
        };
        lines.push(format!("{path}\t{cat}\t{x}\t{y}\t{}\t{}", x + w, y + h));
    }
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_image(root: &Path, rel: &str, w: u32, h: u32) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        RgbImage::new(w, h).save(p).unwrap();
    }

    #[test]
    fn empty_file_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("annotations.tsv");
        std::fs::write(&f, "").unwrap();
        let idx = load_dataset(dir.path(), &f).unwrap();
        assert!(idx.is_empty() && idx.classes.is_empty());
    }

    #[test]
    fn one_box() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "images/a.png", 20, 10);
        let f = dir.path().join("annotations.tsv");
        std::fs::write(&f, format!("{ANNOTATION_HEADER}\nimages/a.png\tmoth\t1\t2\t5\t9\n")).unwrap();
        let idx = load_dataset(dir.path(), &f).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.entries[0].boxes[0].bbox, BoundingBox::new(1.0, 2.0, 5.0, 9.0).unwrap());
        assert_eq!(idx.entries[0].label, Some(0));
        assert_eq!(idx.classes, vec!["moth".to_string()]);
    }

    #[test]
    fn corrupted_rows_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "images/a.png", 20, 10);
        let f = dir.path().join("annotations.tsv");
        let text = format!(
            "{ANNOTATION_HEADER}\nimages/a.png\tmoth\t8\t2\t5\t9\nimages/a.png\tmoth\t1\t2\t50\t9\nimages/missing.png\tmoth\t1\t1\t2\t2\n"
        );
        std::fs::write(&f, text).unwrap();
        match load_dataset(dir.path(), &f) {
            Err(DataError::Validation(issues)) => {
                let lines: Vec<_> = issues.iter().map(|i| i.line).collect();
                assert_eq!(lines, vec![Some(2), Some(3), Some(4)]);
                assert!(issues[0].message.contains("inverted"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_with_fixed_table() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "images/a.png", 20, 10);
        std::fs::write(dir.path().join("classes.txt"), "alpha\nbeta\n").unwrap();
        let f = dir.path().join("annotations.tsv");
        std::fs::write(&f, format!("{ANNOTATION_HEADER}\nimages/a.png\tgamma\t1\t2\t5\t9\n")).unwrap();
        assert!(matches!(load_dataset(dir.path(), &f), Err(DataError::Validation(_))));
    }

    #[test]
    fn coco_conversion() {
        let json = r#"{"images":[{"id":3,"file_name":"x.png","width":10,"height":10}],
            "annotations":[{"image_id":3,"category_id":7,"bbox":[1,2,3,4]}],
            "categories":[{"id":7,"name":"moth"}]}"#;
        let tsv = coco_to_tsv(json, "images").unwrap();
        assert_eq!(tsv, format!("{ANNOTATION_HEADER}\nimages/x.png\tmoth\t1\t2\t4\t6\n"));
    }
}
