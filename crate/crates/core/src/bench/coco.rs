//! COCO-format annotation and result files. Boxes are absolute `[x, y, w, h]`
//! on disk and normalized center-format internally.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use super::{BenchError, GroundTruth, Prediction, Result};
use crate::boxes::BBox;
use crate::detector::ImageSample;

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Ground truth with its image and category tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub annotations: Vec<GroundTruth>,
}

fn parse_err(path: &str, message: impl Into<String>) -> BenchError {
    BenchError::Parse {
        path: path.to_string(),
        message: message.into(),
    }
}

fn field<'a>(v: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| parse_err(path, format!("missing required key `{key}`")))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| parse_err(path, "expected an array"))
}

fn as_id(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| parse_err(path, "expected a non-negative integer id"))
}

fn as_finite(v: &Value, path: &str) -> Result<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        Some(_) => Err(parse_err(path, "number is not finite")),
        None => Err(parse_err(path, "expected a number")),
    }
}

fn as_xywh(v: &Value, path: &str) -> Result<[f64; 4]> {
    let arr = as_array(v, path)?;
    if arr.len() != 4 {
        return Err(parse_err(path, format!("expected 4 numbers, found {}", arr.len())));
    }
    let mut out = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        out[i] = as_finite(x, &format!("{path}[{i}]"))?;
    }
    if out[2] < 0.0 || out[3] < 0.0 {
        return Err(parse_err(path, "negative box extent"));
    }
    Ok(out)
}

fn normalize(xywh: [f64; 4], img: &CocoImage) -> BBox {
    let [x, y, w, h] = xywh;
    BBox::new(
        (x + 0.5 * w) / img.width,
        (y + 0.5 * h) / img.height,
        w / img.width,
        h / img.height,
    )
}

fn denormalize(b: &BBox, img: &CocoImage) -> [f64; 4] {
    let [x1, y1, _, _] = b.xyxy();
    [x1 * img.width, y1 * img.height, b.w * img.width, b.h * img.height]
}

impl CocoDataset {
    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&CocoCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    /// Parse the annotation schema; unknown fields are ignored.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
        let mut images = Vec::new();
        for (i, im) in as_array(field(&root, "$", "images")?, "$.images")?.iter().enumerate() {
            let p = format!("$.images[{i}]");
            let image = CocoImage {
                id: as_id(field(im, &p, "id")?, &format!("{p}.id"))?,
                width: as_finite(field(im, &p, "width")?, &format!("{p}.width"))?,
                height: as_finite(field(im, &p, "height")?, &format!("{p}.height"))?,
                file_name: field(im, &p, "file_name")?
                    .as_str()
                    .ok_or_else(|| parse_err(&format!("{p}.file_name"), "expected a string"))?
                    .to_string(),
            };
            if image.width <= 0.0 || image.height <= 0.0 {
                return Err(parse_err(&p, "image size must be positive"));
            }
            if images.iter().any(|x: &CocoImage| x.id == image.id) {
                return Err(parse_err(&format!("{p}.id"), format!("duplicate image id {}", image.id)));
            }
            images.push(image);
        }
        let mut categories = Vec::new();
        for (i, c) in as_array(field(&root, "$", "categories")?, "$.categories")?
            .iter()
            .enumerate()
        {
            let p = format!("$.categories[{i}]");
            let cat = CocoCategory {
                id: as_id(field(c, &p, "id")?, &format!("{p}.id"))?,
                name: field(c, &p, "name")?
                    .as_str()
                    .ok_or_else(|| parse_err(&format!("{p}.name"), "expected a string"))?
                    .to_string(),
            };
            if categories.iter().any(|x: &CocoCategory| x.id == cat.id) {
                return Err(parse_err(&format!("{p}.id"), format!("duplicate category id {}", cat.id)));
            }
            categories.push(cat);
        }
        let mut ds = Self {
            images,
            categories,
            annotations: Vec::new(),
        };
        for (i, a) in as_array(field(&root, "$", "annotations")?, "$.annotations")?
            .iter()
            .enumerate()
        {
            let p = format!("$.annotations[{i}]");
            as_id(field(a, &p, "id")?, &format!("{p}.id"))?;
            let (image, class_name, xywh) = ds.resolve(a, &p)?;
            ds.annotations.push(GroundTruth {
                image_id: image.id,
                bbox: normalize(xywh, image),
                class_name,
            });
        }
        Ok(ds)
    }

    /// Image, category name and box of one annotation or result record.
    fn resolve(&self, rec: &Value, p: &str) -> Result<(&CocoImage, String, [f64; 4])> {
        let image_id = as_id(field(rec, p, "image_id")?, &format!("{p}.image_id"))?;
        let image = self
            .image(image_id)
            .ok_or_else(|| parse_err(&format!("{p}.image_id"), format!("unknown image id {image_id}")))?;
        let cat_id = as_id(field(rec, p, "category_id")?, &format!("{p}.category_id"))?;
        let cat = self
            .categories
            .iter()
            .find(|c| c.id == cat_id)
            .ok_or_else(|| parse_err(&format!("{p}.category_id"), format!("unknown category id {cat_id}")))?;
        let xywh = as_xywh(field(rec, p, "bbox")?, &format!("{p}.bbox"))?;
        Ok((image, cat.name.clone(), xywh))
    }

    /// Parse a result file (array of scored boxes) against this dataset.
    pub fn parse_results(&self, text: &str) -> Result<Vec<Prediction>> {
        let root: Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
        let mut out = Vec::new();
        for (i, r) in as_array(&root, "$")?.iter().enumerate() {
            let p = format!("$[{i}]");
            let (image, class_name, xywh) = self.resolve(r, &p)?;
            let score = as_finite(field(r, &p, "score")?, &format!("{p}.score"))?;
            out.push(Prediction {
                image_id: image.id,
                bbox: normalize(xywh, image),
                class_name,
                score,
            });
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<Value> {
        let mut annotations = Vec::with_capacity(self.annotations.len());
        for (i, a) in self.annotations.iter().enumerate() {
            let (image, cat) = self.lookup(a.image_id, &a.class_name)?;
            annotations.push(json!({
                "id": i as u64 + 1,
                "image_id": a.image_id,
                "category_id": cat,
                "bbox": denormalize(&a.bbox, image),
                "area": a.bbox.w * image.width * a.bbox.h * image.height,
                "iscrowd": 0,
            }));
        }
        Ok(json!({
            "images": self.images.iter().map(|i| json!({
                "id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name,
            })).collect::<Vec<_>>(),
            "categories": self.categories.iter().map(|c| json!({"id": c.id, "name": c.name})).collect::<Vec<_>>(),
            "annotations": annotations,
        }))
    }

    /// Result-file records for `preds`.
    pub fn results_json(&self, preds: &[Prediction]) -> Result<Value> {
        let mut out = Vec::with_capacity(preds.len());
        for p in preds {
            let (image, cat) = self.lookup(p.image_id, &p.class_name)?;
            out.push(json!({
                "image_id": p.image_id,
                "category_id": cat,
                "bbox": denormalize(&p.bbox, image),
                "score": p.score,
            }));
        }
        Ok(Value::Array(out))
    }

    fn lookup(&self, image_id: u64, class: &str) -> Result<(&CocoImage, u64)> {
        let image = self
            .image(image_id)
            .ok_or_else(|| BenchError::Input(format!("unknown image id {image_id}")))?;
        let cat = self
            .category_by_name(class)
            .ok_or_else(|| BenchError::Input(format!("unknown class `{class}`")))?;
        Ok((image, cat.id))
    }

    /// Dataset for in-memory samples; image ids are 1-based sample positions
    /// and category ids follow `classes`.
    pub fn from_samples<S: AsRef<str>>(samples: &[ImageSample], classes: &[S], prefix: &str) -> Result<Self> {
        let categories: Vec<CocoCategory> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| CocoCategory {
                id: i as u64 + 1,
                name: c.as_ref().to_string(),
            })
            .collect();
        let mut ds = Self {
            categories,
            ..Default::default()
        };
        for (i, s) in samples.iter().enumerate() {
            let id = i as u64 + 1;
            ds.images.push(CocoImage {
                id,
                width: s.width as f64,
                height: s.height as f64,
                file_name: format!("{prefix}{id:05}.ppm"),
            });
            for (b, l) in s.boxes.iter().zip(&s.labels) {
                if ds.category_by_name(l).is_none() {
                    return Err(BenchError::Input(format!("label `{l}` is not in the class list")));
                }
                ds.annotations.push(GroundTruth {
                    image_id: id,
                    bbox: *b,
                    class_name: l.clone(),
                });
            }
        }
        Ok(ds)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
}

/// Load a ground-truth file and optionally a result file scored against it.
pub fn load_coco_format(gt_path: &Path, pred_path: Option<&Path>) -> Result<(CocoDataset, Option<Vec<Prediction>>)> {
    let ds = CocoDataset::from_json_str(&read(gt_path)?)?;
    let preds = match pred_path {
        Some(p) => Some(ds.parse_results(&read(p)?)?),
        None => None,
    };
    Ok((ds, preds))
}

/// Ground truth grouped by image id.
pub fn by_image(gts: &[GroundTruth]) -> BTreeMap<u64, Vec<&GroundTruth>> {
    let mut m: BTreeMap<u64, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        m.entry(g.image_id).or_default().push(g);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 7, "width": 100, "height": 100, "file_name": "a.png", "extra": 1}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 10, 20, 20]}],
        "categories": [{"id": 3, "name": "red circle"}]
    }"#;

    #[test]
    fn minimal_file_normalizes_box() {
        let ds = CocoDataset::from_json_str(MINIMAL).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.annotations.len(), 1);
        let b = ds.annotations[0].bbox;
        for v in [b.cx, b.cy, b.w, b.h] {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn dangling_image_reference_names_the_id() {
        let bad = MINIMAL.replace("\"image_id\": 7", "\"image_id\": 9");
        match CocoDataset::from_json_str(&bad) {
            Err(BenchError::Parse { path, message }) => {
                assert_eq!(path, "$.annotations[0].image_id");
                assert!(message.contains('9'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_key_and_bad_number_report_paths() {
        let bad = MINIMAL.replace("\"width\": 100, ", "");
        let e = CocoDataset::from_json_str(&bad).unwrap_err();
        assert!(matches!(e, BenchError::Parse { ref path, .. } if path == "$.images[0]"));
        let bad = MINIMAL.replace("[10, 10, 20, 20]", "[10, \"x\", 20, 20]");
        let e = CocoDataset::from_json_str(&bad).unwrap_err();
        assert!(matches!(e, BenchError::Parse { ref path, .. } if path == "$.annotations[0].bbox[1]"));
    }

    #[test]
    fn round_trip_preserves_ground_truth() {
        let ds = CocoDataset::from_json_str(MINIMAL).unwrap();
        let text = serde_json::to_string(&ds.to_json().unwrap()).unwrap();
        let back = CocoDataset::from_json_str(&text).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.categories, ds.categories);
        assert_eq!(back.annotations.len(), 1);
        assert_eq!(back.annotations[0].class_name, "red circle");
        let (a, b) = (back.annotations[0].bbox, ds.annotations[0].bbox);
        assert!(a.l1(&b) < 1e-12);
    }

    #[test]
    fn results_parse_against_dataset() {
        let ds = CocoDataset::from_json_str(MINIMAL).unwrap();
        let preds = ds
            .parse_results(r#"[{"image_id": 7, "category_id": 3, "bbox": [10, 10, 20, 20], "score": 0.5}]"#)
            .unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].score, 0.5);
        assert!(ds.parse_results(r#"[{"image_id": 7, "category_id": 4, "bbox": [0,0,1,1], "score": 0.5}]"#).is_err());
    }
}
