//! Readers and writers for the JSON interchange formats: layout
//! detections, OCR documents, enriched token streams, prediction records,
//! answer files, metrics reports, and the shared versioned tensor
//! document used for MLP weights and projectors.
//!
//! All files are UTF-8 JSON with a top-level `"version": "v1"` field.
//! Values are 64-bit floats serialized in shortest round-trip form, so a
//! write/read cycle is bit-exact for well-formed data. Loaders never
//! panic on malformed input; every failure carries location info.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enrich::{EnrichedTokens, OcrDocument, TagSpan};
use crate::geometry::{standardize_bbox, BBox, BBoxFormat, LayoutRegion};
use crate::kd::{Projector, ProjectorKind};
use crate::metrics::{MetricsReport, PredictionRecord};
use crate::toy::{DenseLayer, Mlp};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: &str = "v1";

pub type IoResult<T> = Result<T, IoError>;

#[derive(Debug)]
pub enum IoError {
    /// Filesystem failure.
    File { path: PathBuf, message: String },
    /// The bytes are not valid JSON for the expected schema.
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        byte_offset: usize,
        message: String,
    },
    /// The JSON parsed but violates a schema invariant.
    Schema { path: PathBuf, reason: String },
    /// A detection referenced a category missing from the category map.
    UnknownCategory {
        path: PathBuf,
        record_index: usize,
        category_id: u64,
    },
    /// Wrong or missing schema version.
    Version { path: PathBuf, got: String },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::File { path, message } => {
                write!(f, "{}: {message}", path.display())
            }
            IoError::Json {
                path,
                line,
                column,
                byte_offset,
                message,
            } => write!(
                f,
                "{}: parse error at line {line}, column {column} (byte {byte_offset}): {message}",
                path.display()
            ),
            IoError::Schema { path, reason } => {
                write!(f, "{}: {reason}", path.display())
            }
            IoError::UnknownCategory {
                path,
                record_index,
                category_id,
            } => write!(
                f,
                "{}: detection {record_index} references unknown category {category_id}",
                path.display()
            ),
            IoError::Version { path, got } => write!(
                f,
                "{}: expected schema version {SCHEMA_VERSION:?}, got {got:?}",
                path.display()
            ),
        }
    }
}

impl std::error::Error for IoError {}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut remaining = line.saturating_sub(1);
    let mut offset = 0usize;
    for (i, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = i + 1;
        }
    }
    offset + column.saturating_sub(1)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> IoResult<T> {
    let text = fs::read_to_string(path).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        byte_offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    let mut text = serde_json::to_string(value).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn check_version(path: &Path, version: &str) -> IoResult<()> {
    if version != SCHEMA_VERSION {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            got: version.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Detection files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ImageIdJson {
    Text(String),
    Number(i64),
}

impl ImageIdJson {
    fn into_string(self) -> String {
        match self {
            ImageIdJson::Text(s) => s,
            ImageIdJson::Number(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct DetectionJson {
    image_id: ImageIdJson,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct ImageDimsJson {
    width: f64,
    height: f64,
}

#[derive(Debug, Deserialize)]
struct DetectionFileJson {
    version: String,
    categories: BTreeMap<u64, String>,
    detections: Vec<DetectionJson>,
    /// Optional per-image pixel dimensions of the detector's input; used
    /// to interpolate boxes into the OCR image space when they differ.
    #[serde(default)]
    images: BTreeMap<String, ImageDimsJson>,
}

/// Detections for one image, grouped out of a detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub regions: Vec<LayoutRegion>,
    pub image_dims: Option<(f64, f64)>,
}

/// Load COCO-style detections: validate categories and scores, drop
/// detections below `score_threshold`, standardize the xywh boxes, and
/// group by image id (input order preserved within each image).
pub fn load_dla_predictions(
    path: &Path,
    score_threshold: f64,
) -> IoResult<BTreeMap<String, DetectionSet>> {
    let file: DetectionFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    let mut grouped: BTreeMap<String, DetectionSet> = BTreeMap::new();
    for (index, det) in file.detections.into_iter().enumerate() {
        let class_label = file
            .categories
            .get(&det.category_id)
            .ok_or(IoError::UnknownCategory {
                path: path.to_path_buf(),
                record_index: index,
                category_id: det.category_id,
            })?
            .clone();
        if !(0.0..=1.0).contains(&det.score) {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                reason: format!("detection {index} score {} outside [0, 1]", det.score),
            });
        }
        if det.score < score_threshold {
            continue;
        }
        let bbox = standardize_bbox(det.bbox, BBoxFormat::Xywh).map_err(|e| IoError::Schema {
            path: path.to_path_buf(),
            reason: format!("detection {index}: {e}"),
        })?;
        let image_id = det.image_id.into_string();
        let dims = file
            .images
            .get(&image_id)
            .map(|d| (d.width, d.height));
        let entry = grouped.entry(image_id).or_insert(DetectionSet {
            regions: Vec::new(),
            image_dims: dims,
        });
        entry.regions.push(LayoutRegion {
            bbox,
            class_label,
            score: det.score,
            metadata: BTreeMap::new(),
        });
    }
    Ok(grouped)
}

// ---------------------------------------------------------------------------
// OCR documents
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct OcrFileJson {
    version: String,
    width: f64,
    height: f64,
    tokens: Vec<String>,
    boxes: Vec<[f64; 4]>,
}

/// A parsed OCR document plus the number of boxes that had to be clamped
/// into the image bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedOcr {
    pub doc: OcrDocument,
    pub clamp_warnings: usize,
}

pub fn load_ocr_document(path: &Path) -> IoResult<LoadedOcr> {
    let file: OcrFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    if file.width <= 0.0 || file.height <= 0.0 {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            reason: format!("image dimensions must be > 0, got {}x{}", file.width, file.height),
        });
    }
    if file.tokens.len() != file.boxes.len() {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            reason: format!(
                "{} tokens but {} boxes",
                file.tokens.len(),
                file.boxes.len()
            ),
        });
    }
    let mut clamp_warnings = 0usize;
    let mut boxes = Vec::with_capacity(file.boxes.len());
    for raw in &file.boxes {
        let ordered = BBox::ordered(raw[0], raw[1], raw[2], raw[3]);
        let (clamped, moved) = ordered.clamp_to(file.width, file.height);
        if moved {
            clamp_warnings += 1;
        }
        boxes.push(clamped);
    }
    if clamp_warnings > 0 {
        log::warn!(
            "{}: clamped {clamp_warnings} out-of-range boxes",
            path.display()
        );
    }
    let doc = OcrDocument::new(file.tokens, boxes, file.width, file.height).map_err(|e| {
        IoError::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    Ok(LoadedOcr {
        doc,
        clamp_warnings,
    })
}

pub fn write_ocr_document(path: &Path, doc: &OcrDocument) -> IoResult<()> {
    write_json(
        path,
        &OcrFileJson {
            version: SCHEMA_VERSION.to_string(),
            width: doc.image_width,
            height: doc.image_height,
            tokens: doc.tokens.clone(),
            boxes: doc.boxes.iter().map(BBox::as_array).collect(),
        },
    )
}

// ---------------------------------------------------------------------------
// Enriched token streams
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EnrichedFileJson {
    version: String,
    width: f64,
    height: f64,
    tokens: Vec<String>,
    boxes: Vec<[f64; 4]>,
    tag_spans: Vec<[usize; 3]>,
}

pub fn write_enriched(path: &Path, enriched: &EnrichedTokens) -> IoResult<()> {
    write_json(
        path,
        &EnrichedFileJson {
            version: SCHEMA_VERSION.to_string(),
            width: enriched.image_width,
            height: enriched.image_height,
            tokens: enriched.tokens.clone(),
            boxes: enriched.boxes.iter().map(BBox::as_array).collect(),
            tag_spans: enriched
                .tag_spans
                .iter()
                .map(|s| [s.region_id, s.start_tag_index, s.end_tag_index])
                .collect(),
        },
    )
}

pub fn load_enriched(path: &Path) -> IoResult<EnrichedTokens> {
    let file: EnrichedFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    if file.tokens.len() != file.boxes.len() {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            reason: format!(
                "{} tokens but {} boxes",
                file.tokens.len(),
                file.boxes.len()
            ),
        });
    }
    for span in &file.tag_spans {
        if span[1] >= span[2] || span[2] >= file.tokens.len() {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                reason: format!("tag span {span:?} is out of order or out of range"),
            });
        }
    }
    Ok(EnrichedTokens {
        tokens: file.tokens,
        boxes: file
            .boxes
            .iter()
            .map(|b| BBox {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
            })
            .collect(),
        tag_spans: file
            .tag_spans
            .iter()
            .map(|s| TagSpan {
                region_id: s[0],
                start_tag_index: s[1],
                end_tag_index: s[2],
            })
            .collect(),
        image_width: file.width,
        image_height: file.height,
    })
}

// ---------------------------------------------------------------------------
// Prediction records and answer files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RecordsFileJson {
    version: String,
    records: Vec<PredictionRecord>,
}

pub fn load_records(path: &Path) -> IoResult<Vec<PredictionRecord>> {
    let file: RecordsFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    Ok(file.records)
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> IoResult<()> {
    write_json(
        path,
        &RecordsFileJson {
            version: SCHEMA_VERSION.to_string(),
            records: records.to_vec(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionsFileJson {
    version: String,
    predictions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldsFileJson {
    version: String,
    golds: Vec<Vec<String>>,
}

pub fn load_anls_predictions(path: &Path) -> IoResult<Vec<String>> {
    let file: PredictionsFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    Ok(file.predictions)
}

pub fn load_anls_golds(path: &Path) -> IoResult<Vec<Vec<String>>> {
    let file: GoldsFileJson = read_json(path)?;
    check_version(path, &file.version)?;
    Ok(file.golds)
}

pub fn write_metrics_report(path: &Path, report: &MetricsReport) -> IoResult<()> {
    write_json(path, report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossTrace {
    pub version: String,
    pub method: String,
    pub losses: Vec<f64>,
}

pub fn write_loss_trace(path: &Path, method: &str, losses: &[f64]) -> IoResult<()> {
    write_json(
        path,
        &LossTrace {
            version: SCHEMA_VERSION.to_string(),
            method: method.to_string(),
            losses: losses.to_vec(),
        },
    )
}

// ---------------------------------------------------------------------------
// Versioned tensor documents (MLP weights, projectors)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensorJson {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub tensors: Vec<NamedTensorJson>,
}

fn tensor_to_json(name: &str, t: &Tensor) -> NamedTensorJson {
    NamedTensorJson {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        values: t.values().to_vec(),
    }
}

fn tensor_from_json(path: &Path, j: &NamedTensorJson) -> IoResult<Tensor> {
    Tensor::new(j.values.clone(), j.shape.clone()).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        reason: format!("tensor {:?}: {e}", j.name),
    })
}

pub fn projector_to_doc(projector: &Projector) -> TensorDoc {
    let mut shapes = BTreeMap::new();
    shapes.insert("input".to_string(), projector.input_shape().to_vec());
    shapes.insert("output".to_string(), projector.output_shape().to_vec());
    TensorDoc {
        version: SCHEMA_VERSION.to_string(),
        kind: projector.kind().as_str().to_string(),
        seed: projector.seed(),
        shapes,
        tensors: projector
            .params()
            .iter()
            .map(|(name, t)| tensor_to_json(name, t))
            .collect(),
    }
}

pub fn projector_from_doc(path: &Path, doc: &TensorDoc) -> IoResult<Projector> {
    check_version(path, &doc.version)?;
    let kind = ProjectorKind::parse(&doc.kind).ok_or_else(|| IoError::Schema {
        path: path.to_path_buf(),
        reason: format!("unknown projector kind {:?}", doc.kind),
    })?;
    let input = doc.shapes.get("input").ok_or_else(|| IoError::Schema {
        path: path.to_path_buf(),
        reason: "missing \"input\" shape".to_string(),
    })?;
    let output = doc.shapes.get("output").ok_or_else(|| IoError::Schema {
        path: path.to_path_buf(),
        reason: "missing \"output\" shape".to_string(),
    })?;
    // conv_reshape stores [C, H, W] as its output; reconstruct from the
    // same shapes the constructor accepts.
    let mut projector =
        Projector::new(kind, input, output, doc.seed).map_err(|e| IoError::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let params: Vec<(String, Tensor)> = doc
        .tensors
        .iter()
        .map(|j| Ok((j.name.clone(), tensor_from_json(path, j)?)))
        .collect::<IoResult<_>>()?;
    projector
        .set_params(params)
        .map_err(|e| IoError::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(projector)
}

pub fn mlp_to_doc(mlp: &Mlp) -> TensorDoc {
    let mut shapes = BTreeMap::new();
    shapes.insert("layer_dims".to_string(), mlp.layer_dims().to_vec());
    let mut tensors = Vec::new();
    for (i, layer) in mlp.layers().iter().enumerate() {
        tensors.push(tensor_to_json(&format!("layer{i}.weight"), &layer.weight));
        tensors.push(tensor_to_json(&format!("layer{i}.bias"), &layer.bias));
    }
    TensorDoc {
        version: SCHEMA_VERSION.to_string(),
        kind: "mlp".to_string(),
        seed: mlp.seed(),
        shapes,
        tensors,
    }
}

pub fn mlp_from_doc(path: &Path, doc: &TensorDoc) -> IoResult<Mlp> {
    check_version(path, &doc.version)?;
    if doc.kind != "mlp" {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            reason: format!("expected kind \"mlp\", got {:?}", doc.kind),
        });
    }
    let layer_dims = doc
        .shapes
        .get("layer_dims")
        .ok_or_else(|| IoError::Schema {
            path: path.to_path_buf(),
            reason: "missing \"layer_dims\" shape".to_string(),
        })?
        .clone();
    if doc.tensors.len() != (layer_dims.len().saturating_sub(1)) * 2 {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} tensors for {} layers, got {}",
                (layer_dims.len().saturating_sub(1)) * 2,
                layer_dims.len().saturating_sub(1),
                doc.tensors.len()
            ),
        });
    }
    let mut layers = Vec::new();
    for pair in doc.tensors.chunks(2) {
        layers.push(DenseLayer {
            weight: tensor_from_json(path, &pair[0])?,
            bias: tensor_from_json(path, &pair[1])?,
        });
    }
    Mlp::from_layers(layer_dims, layers, doc.seed).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_tensor_doc(path: &Path, doc: &TensorDoc) -> IoResult<()> {
    write_json(path, doc)
}

pub fn load_tensor_doc(path: &Path) -> IoResult<TensorDoc> {
    read_json(path)
}
