//! Domain types for images, categories, annotations and scored detections,
//! plus reading and writing COCO-style annotation and result files.
//!
//! Boxes are stored in corner form internally and converted to COCO
//! `[x, y, width, height]` only at the file boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("annotation {annotation_id} references unknown category {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
    #[error("annotation {annotation_id} references unknown image {image_id}")]
    UnknownImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id} has negative width or height")]
    NegativeSize { annotation_id: u64 },
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("invalid detection record: {0}")]
    InvalidRecord(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DatasetError> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DatasetError::InvalidBox([x_min, y_min, x_max, y_max]))
        }
    }

    /// Builds a box from COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DatasetError> {
        BBox::new(x, y, x + w, y + h)
    }

    /// Builds a box from an arbitrary corner array, ordering each axis.
    pub fn from_unordered(c: [f64; 4]) -> Self {
        BBox {
            x_min: c[0].min(c[2]),
            y_min: c[1].min(c[3]),
            x_max: c[0].max(c[2]),
            y_max: c[1].max(c[3]),
        }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.corners().iter().all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    /// Coordinate-wise mean of a non-empty set of boxes.
    pub fn mean<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for b in boxes {
            for (a, c) in acc.iter_mut().zip(b.corners()) {
                *a += c;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let n = n as f64;
        Some(BBox {
            x_min: acc[0] / n,
            y_min: acc[1] / n,
            x_max: acc[2] / n,
            y_max: acc[3] / n,
        })
    }
}

/// Frequency group of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Rare,
    Common,
    Frequent,
    Bin1,
    Bin2,
    Bin3,
    Bin4,
}

impl ClassGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassGroup::Rare => "rare",
            ClassGroup::Common => "common",
            ClassGroup::Frequent => "frequent",
            ClassGroup::Bin1 => "bin1",
            ClassGroup::Bin2 => "bin2",
            ClassGroup::Bin3 => "bin3",
            ClassGroup::Bin4 => "bin4",
        }
    }

    /// True for the lowest-frequency group of either scheme.
    pub fn is_tail(&self) -> bool {
        matches!(self, ClassGroup::Rare | ClassGroup::Bin1)
    }
}

impl std::fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binning scheme for class groups.
///
/// `Lvis3` bins by the number of images containing the class
/// (`[1, 10)`, `[10, 100)`, `[100, inf)`); `Cocolt4` bins by instance count
/// (`[1, 20)`, `[20, 400)`, `[400, 8000)`, `[8000, inf)`). A count of zero
/// falls into the lowest bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinningScheme {
    #[default]
    Lvis3,
    Cocolt4,
}

impl BinningScheme {
    pub fn groups(&self) -> &'static [ClassGroup] {
        match self {
            BinningScheme::Lvis3 => &[ClassGroup::Rare, ClassGroup::Common, ClassGroup::Frequent],
            BinningScheme::Cocolt4 => &[
                ClassGroup::Bin1,
                ClassGroup::Bin2,
                ClassGroup::Bin3,
                ClassGroup::Bin4,
            ],
        }
    }

    pub fn group_for_count(&self, count: u64) -> ClassGroup {
        match self {
            BinningScheme::Lvis3 => match count {
                0..=9 => ClassGroup::Rare,
                10..=99 => ClassGroup::Common,
                _ => ClassGroup::Frequent,
            },
            BinningScheme::Cocolt4 => match count {
                0..=19 => ClassGroup::Bin1,
                20..=399 => ClassGroup::Bin2,
                400..=7999 => ClassGroup::Bin3,
                _ => ClassGroup::Bin4,
            },
        }
    }

    /// The count this scheme bins on.
    pub fn binning_count(&self, category: &Category) -> u64 {
        match self {
            BinningScheme::Lvis3 => category.image_count,
            BinningScheme::Cocolt4 => category.instance_count,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lvis3" | "lvis" => Some(BinningScheme::Lvis3),
            "cocolt4" | "cocolt" | "coco-lt" => Some(BinningScheme::Cocolt4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub instance_count: u64,
    pub image_count: u64,
    pub group: Option<ClassGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Labeled,
    Unlabeled,
}

/// How per-class scores in a [`DetectionRecord`] relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSemantics {
    /// Entries (foreground and background) form one distribution summing to 1.
    #[default]
    Softmax,
    /// Each entry is an independent score in `[0, 1]`.
    Sigmoid,
}

/// One scored, classified box proposal from one cascade stage.
///
/// `class_probs` holds `C` foreground entries followed by one background entry.
/// Foreground index `i` refers to the `i`-th category of the bundle in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub proposal_id: u64,
    /// 1-based cascade stage.
    pub stage: usize,
    pub class_probs: Vec<f64>,
    pub bbox: BBox,
    #[serde(default)]
    pub semantics: ScoreSemantics,
}

impl DetectionRecord {
    pub fn num_classes(&self) -> usize {
        self.class_probs.len().saturating_sub(1)
    }

    pub fn foreground(&self) -> &[f64] {
        &self.class_probs[..self.num_classes()]
    }

    pub fn background(&self) -> f64 {
        self.class_probs.last().copied().unwrap_or(0.0)
    }

    /// Highest-scoring foreground class; ties go to the lowest index.
    pub fn label(&self) -> usize {
        argmax(self.foreground())
    }

    /// Max foreground probability.
    pub fn score(&self) -> f64 {
        self.foreground().iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.class_probs.len() < 2 {
            return Err(DatasetError::InvalidRecord(
                "need at least one foreground class and a background slot".into(),
            ));
        }
        if self.stage == 0 {
            return Err(DatasetError::InvalidRecord("stage is 1-based".into()));
        }
        if self
            .class_probs
            .iter()
            .any(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(DatasetError::InvalidRecord(format!(
                "probabilities outside [0,1] in image {} proposal {}",
                self.image_id, self.proposal_id
            )));
        }
        if self.semantics == ScoreSemantics::Softmax {
            let s: f64 = self.class_probs.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(DatasetError::InvalidRecord(format!(
                    "softmax probabilities sum to {s}"
                )));
            }
        }
        if !self.bbox.is_valid() {
            return Err(DatasetError::InvalidBox(self.bbox.corners()));
        }
        Ok(())
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    pub split: Split,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Dense foreground index of a category id.
    pub fn class_index(&self, category_id: u64) -> Option<usize> {
        self.categories
            .binary_search_by_key(&category_id, |c| c.id)
            .ok()
    }

    /// Category ids in dense-index order.
    pub fn class_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Recomputes instance and image counts from the annotation list.
    pub fn recount(&mut self) {
        let mut instances: BTreeMap<u64, u64> = BTreeMap::new();
        let mut images: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for a in &self.annotations {
            *instances.entry(a.category_id).or_default() += 1;
            images.entry(a.category_id).or_default().insert(a.image_id);
        }
        for c in &mut self.categories {
            c.instance_count = instances.get(&c.id).copied().unwrap_or(0);
            c.image_count = images.get(&c.id).map_or(0, |s| s.len() as u64);
        }
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut out: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    pub fn zero_instance_categories(&self) -> Vec<u64> {
        self.categories
            .iter()
            .filter(|c| c.instance_count == 0)
            .map(|c| c.id)
            .collect()
    }

    pub fn group_of(&self, class_index: usize) -> Option<ClassGroup> {
        self.categories.get(class_index).and_then(|c| c.group)
    }
}

/// Ground truth of an unlabeled split, kept apart from the public view and
/// reachable only through [`HiddenAnnotations::audit`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenAnnotations(Vec<Annotation>);

impl HiddenAnnotations {
    pub fn new(annotations: Vec<Annotation>) -> Self {
        HiddenAnnotations(annotations)
    }

    pub fn audit(&self) -> &[Annotation] {
        &self.0
    }
}

/// Unlabeled split: a public bundle with no annotations plus its hidden
/// ground truth for accuracy auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBundle {
    pub public: DatasetBundle,
    pub hidden: HiddenAnnotations,
}

impl UnlabeledBundle {
    /// Bundle view with the hidden annotations restored, for detector
    /// simulation and auditing.
    pub fn audit_view(&self) -> DatasetBundle {
        DatasetBundle {
            annotations: self.hidden.audit().to_vec(),
            ..self.public.clone()
        }
    }
}

/// Assigns every category to a group of `scheme`.
pub fn assign_class_groups(mut bundle: DatasetBundle, scheme: BinningScheme) -> DatasetBundle {
    for c in &mut bundle.categories {
        c.group = Some(scheme.group_for_count(scheme.binning_count(c)));
    }
    bundle
}

// ---------------------------------------------------------------------------
// COCO interchange

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    width: f64,
    #[serde(default)]
    height: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    #[serde(default)]
    name: String,
}

fn parse_error(bytes: &[u8], err: serde_json::Error) -> DatasetError {
    // serde_json reports 1-based line and byte column
    let mut offset = 0usize;
    let mut line = 1usize;
    for (i, b) in bytes.iter().enumerate() {
        if line == err.line() {
            offset = i;
            break;
        }
        if *b == b'\n' {
            line += 1;
        }
        offset = i + 1;
    }
    DatasetError::Parse {
        offset: (offset + err.column().saturating_sub(1)).min(bytes.len()),
        message: err.to_string(),
    }
}

/// Parses COCO annotation JSON already in memory.
pub fn parse_coco(bytes: &[u8]) -> Result<DatasetBundle, DatasetError> {
    let file: CocoFile = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, e))?;

    let mut categories: Vec<Category> = file
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
            instance_count: 0,
            image_count: 0,
            group: None,
        })
        .collect();
    categories.sort_by_key(|c| c.id);
    if let Some(w) = categories.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId {
            kind: "category",
            id: w[0].id,
        });
    }

    let mut images: Vec<ImageInfo> = file
        .images
        .into_iter()
        .map(|i| ImageInfo {
            id: i.id,
            width: i.width,
            height: i.height,
        })
        .collect();
    images.sort_by_key(|i| i.id);
    if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId {
            kind: "image",
            id: w[0].id,
        });
    }

    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in file.annotations {
        if categories.binary_search_by_key(&a.category_id, |c| c.id).is_err() {
            return Err(DatasetError::UnknownCategory {
                annotation_id: a.id,
                category_id: a.category_id,
            });
        }
        if images.binary_search_by_key(&a.image_id, |i| i.id).is_err() {
            return Err(DatasetError::UnknownImage {
                annotation_id: a.id,
                image_id: a.image_id,
            });
        }
        let [x, y, w, h] = a.bbox;
        if w < 0.0 || h < 0.0 {
            return Err(DatasetError::NegativeSize { annotation_id: a.id });
        }
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|_| DatasetError::NegativeSize {
            annotation_id: a.id,
        })?;
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox,
        });
    }
    annotations.sort_by_key(|a| (a.image_id, a.id));
    if let Some(w) = annotations
        .windows(2)
        .find(|w| w[0].id == w[1].id && w[0].image_id == w[1].image_id)
    {
        return Err(DatasetError::DuplicateId {
            kind: "annotation",
            id: w[0].id,
        });
    }

    let mut bundle = DatasetBundle {
        images,
        annotations,
        categories,
        split: Split::Labeled,
    };
    bundle.recount();
    Ok(bundle)
}

/// Reads a COCO annotation file into a bundle with corner-form boxes and
/// per-category counts. Group assignment is left to [`assign_class_groups`].
pub fn ingest_coco(path: impl AsRef<Path>) -> Result<DatasetBundle, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    parse_coco(&bytes)
}

/// Serializes a bundle as COCO annotation JSON.
pub fn coco_json(bundle: &DatasetBundle) -> String {
    let file = CocoFile {
        images: bundle
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: bundle
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox.to_xywh(),
                area: Some(a.bbox.area()),
            })
            .collect(),
        categories: bundle
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("COCO file serializes")
}

pub fn write_coco(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, coco_json(bundle)).map_err(|e| DatasetError::io(path, e))
}

/// One entry of a COCO-results file, extended with the cascade stage and,
/// optionally, the full probability vector and proposal id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default = "default_stage")]
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "is_softmax")]
    pub semantics: ScoreSemantics,
}

fn default_stage() -> usize {
    1
}

fn is_softmax(s: &ScoreSemantics) -> bool {
    *s == ScoreSemantics::Softmax
}

/// Converts records to result entries. `class_ids[i]` is the category id of
/// foreground index `i`.
pub fn results_entries(
    records: &[DetectionRecord],
    class_ids: &[u64],
) -> Result<Vec<ResultEntry>, DatasetError> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let label = r.label();
            let category_id = *class_ids.get(label).ok_or_else(|| {
                DatasetError::InvalidRecord(format!("class index {label} has no category id"))
            })?;
            Ok(ResultEntry {
                image_id: r.image_id,
                category_id,
                bbox: r.bbox.to_xywh(),
                score: r.score(),
                stage: r.stage,
                proposal_id: Some(r.proposal_id),
                class_probs: Some(r.class_probs.clone()),
                semantics: r.semantics,
            })
        })
        .collect()
}

/// Writes a COCO-results JSON array with the extra `stage` field.
pub fn export_results(
    records: &[DetectionRecord],
    class_ids: &[u64],
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let entries = results_entries(records, class_ids)?;
    let json = serde_json::to_string_pretty(&entries).expect("results serialize");
    fs::write(path, json).map_err(|e| DatasetError::io(path, e))
}

/// Parses a results array into records. Entries without `class_probs` get a
/// two-point distribution: `score` on their category, `1 - score` on background.
pub fn parse_results(bytes: &[u8], class_ids: &[u64]) -> Result<Vec<DetectionRecord>, DatasetError> {
    let entries: Vec<ResultEntry> =
        serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, e))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let [x, y, w, h] = e.bbox;
            if w < 0.0 || h < 0.0 {
                return Err(DatasetError::InvalidBox(e.bbox));
            }
            let bbox = BBox::from_xywh(x, y, w, h)?;
            let class_probs = match e.class_probs {
                Some(p) => p,
                None => {
                    let idx = class_ids.iter().position(|&c| c == e.category_id).ok_or(
                        DatasetError::UnknownCategory {
                            annotation_id: i as u64,
                            category_id: e.category_id,
                        },
                    )?;
                    let mut p = vec![0.0; class_ids.len() + 1];
                    p[idx] = e.score;
                    p[class_ids.len()] = 1.0 - e.score;
                    p
                }
            };
            let rec = DetectionRecord {
                image_id: e.image_id,
                proposal_id: e.proposal_id.unwrap_or(i as u64),
                stage: e.stage,
                class_probs,
                bbox,
                semantics: e.semantics,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn ingest_results(
    path: impl AsRef<Path>,
    class_ids: &[u64],
) -> Result<Vec<DetectionRecord>, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    parse_results(&bytes, class_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 100}],
        "annotations": [{"id": 7, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 20]}],
        "categories": [{"id": 3, "name": "cat"}, {"id": 4, "name": "dog"}]
    }"#;

    #[test]
    fn ingest_converts_to_corners() {
        let b = parse_coco(ONE.as_bytes()).unwrap();
        assert_eq!(b.annotations.len(), 1);
        assert_eq!(b.annotations[0].bbox, BBox::new(10.0, 10.0, 30.0, 30.0).unwrap());
        assert_eq!(b.categories[0].instance_count, 1);
        assert_eq!(b.categories[1].instance_count, 0);
        assert_eq!(b.zero_instance_categories(), vec![4]);
    }

    #[test]
    fn ingest_empty_annotations() {
        let src = r#"{"images": [{"id": 1}], "annotations": [],
                      "categories": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}]}"#;
        let b = parse_coco(src.as_bytes()).unwrap();
        assert!(b.annotations.is_empty());
        assert!(b.categories.iter().all(|c| c.instance_count == 0));
    }

    #[test]
    fn ingest_errors() {
        let bad = r#"{"images": [], "annotations": [}"#;
        match parse_coco(bad.as_bytes()) {
            Err(DatasetError::Parse { offset, .. }) => assert_eq!(offset, 31),
            other => panic!("{other:?}"),
        }
        let unknown = ONE.replace("\"category_id\": 3", "\"category_id\": 9");
        match parse_coco(unknown.as_bytes()) {
            Err(DatasetError::UnknownCategory { annotation_id, .. }) => {
                assert_eq!(annotation_id, 7)
            }
            other => panic!("{other:?}"),
        }
        let neg = ONE.replace("[10, 10, 20, 20]", "[10, 10, -1, 20]");
        assert!(matches!(
            parse_coco(neg.as_bytes()),
            Err(DatasetError::NegativeSize { annotation_id: 7 })
        ));
    }

    #[test]
    fn ingest_is_deterministic_and_sorted() {
        let src = r#"{"images": [{"id": 2}, {"id": 1}],
            "annotations": [
                {"id": 5, "image_id": 2, "category_id": 1, "bbox": [0,0,1,1]},
                {"id": 9, "image_id": 1, "category_id": 1, "bbox": [0,0,1,1]},
                {"id": 3, "image_id": 1, "category_id": 1, "bbox": [0,0,1,1]}],
            "categories": [{"id": 1}]}"#;
        let a = parse_coco(src.as_bytes()).unwrap();
        let b = parse_coco(src.as_bytes()).unwrap();
        assert_eq!(a, b);
        let order: Vec<_> = a.annotations.iter().map(|x| (x.image_id, x.id)).collect();
        assert_eq!(order, vec![(1, 3), (1, 9), (2, 5)]);
        assert_eq!(a.categories[0].image_count, 2);
    }

    #[test]
    fn lvis_groups_follow_half_open_edges() {
        let s = BinningScheme::Lvis3;
        assert_eq!(s.group_for_count(0), ClassGroup::Rare);
        assert_eq!(s.group_for_count(5), ClassGroup::Rare);
        assert_eq!(s.group_for_count(9), ClassGroup::Rare);
        assert_eq!(s.group_for_count(10), ClassGroup::Common);
        assert_eq!(s.group_for_count(99), ClassGroup::Common);
        assert_eq!(s.group_for_count(100), ClassGroup::Frequent);
    }

    #[test]
    fn cocolt_groups_follow_half_open_edges() {
        let s = BinningScheme::Cocolt4;
        assert_eq!(s.group_for_count(19), ClassGroup::Bin1);
        assert_eq!(s.group_for_count(20), ClassGroup::Bin2);
        assert_eq!(s.group_for_count(399), ClassGroup::Bin2);
        assert_eq!(s.group_for_count(400), ClassGroup::Bin3);
        assert_eq!(s.group_for_count(7999), ClassGroup::Bin3);
        assert_eq!(s.group_for_count(8000), ClassGroup::Bin4);
    }

    #[test]
    fn five_instances_is_rare_under_lvis() {
        let mut src = String::from(r#"{"images": ["#);
        src.push_str(
            &(1..=5)
                .map(|i| format!(r#"{{"id": {i}}}"#))
                .collect::<Vec<_>>()
                .join(","),
        );
        src.push_str(r#"], "annotations": ["#);
        src.push_str(
            &(1..=5)
                .map(|i| {
                    format!(r#"{{"id": {i}, "image_id": {i}, "category_id": 1, "bbox": [0,0,1,1]}}"#)
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        src.push_str(r#"], "categories": [{"id": 1, "name": "x"}]}"#);
        let b = assign_class_groups(parse_coco(src.as_bytes()).unwrap(), BinningScheme::Lvis3);
        assert_eq!(b.categories[0].group, Some(ClassGroup::Rare));
    }

    #[test]
    fn export_single_record() {
        let rec = DetectionRecord {
            image_id: 1,
            proposal_id: 0,
            stage: 1,
            class_probs: vec![0.7, 0.3],
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            semantics: ScoreSemantics::Softmax,
        };
        let e = results_entries(&[rec], &[5]).unwrap();
        assert_eq!(e[0].bbox, [0.0, 0.0, 2.0, 2.0]);
        assert_eq!(e[0].score, 0.7);
        assert_eq!(e[0].category_id, 5);
    }

    #[test]
    fn export_empty_is_empty_array() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        export_results(&[], &[1], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "[]");
    }

    #[test]
    fn export_to_unwritable_path_is_io_error() {
        let err = export_results(&[], &[1], "/nonexistent/dir/r.json").unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn results_without_probs_get_two_point_distribution() {
        let src = r#"[{"image_id": 1, "category_id": 4, "bbox": [0,0,1,1], "score": 0.25}]"#;
        let r = parse_results(src.as_bytes(), &[3, 4]).unwrap();
        assert_eq!(r[0].class_probs, vec![0.0, 0.25, 0.75]);
        assert_eq!(r[0].stage, 1);
    }

    #[test]
    fn softmax_sum_checked() {
        let rec = DetectionRecord {
            image_id: 1,
            proposal_id: 0,
            stage: 1,
            class_probs: vec![0.7, 0.2],
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            semantics: ScoreSemantics::Softmax,
        };
        assert!(rec.validate().is_err());
        let sig = DetectionRecord {
            semantics: ScoreSemantics::Sigmoid,
            ..rec
        };
        assert!(sig.validate().is_ok());
    }
}
