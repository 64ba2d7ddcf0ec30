//! Layout-aware prompt construction: match layout regions to OCR token
//! spans, insert `<Class>`/`</Class>` tags with index shifting, serialize
//! documents as plain or structure-preserving text, and render the
//! question prompt.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{
    corner_distance, fully_contains, interpolate_bbox, iou, BBox, Corner, CornerNorm,
    GeometryError, LayoutRegion,
};

pub type EnrichResult<T> = Result<T, EnrichError>;

#[derive(Debug, Clone, PartialEq)]
pub enum EnrichError {
    Geometry(GeometryError),
    LengthMismatch { tokens: usize, boxes: usize },
    InvalidDimensions { width: f64, height: f64 },
    InvalidThreshold { value: f64 },
    MalformedClassLabel { label: String },
    InvalidEvents { reason: String },
    InvalidCell { width: f64, height: f64 },
}

impl fmt::Display for EnrichError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnrichError::Geometry(e) => write!(f, "{e}"),
            EnrichError::LengthMismatch { tokens, boxes } => {
                write!(f, "{tokens} tokens but {boxes} boxes")
            }
            EnrichError::InvalidDimensions { width, height } => {
                write!(f, "image dimensions must be > 0, got {width}x{height}")
            }
            EnrichError::InvalidThreshold { value } => {
                write!(f, "iou threshold must lie in [0, 1], got {value}")
            }
            EnrichError::MalformedClassLabel { label } => {
                write!(f, "class label {label:?} contains whitespace or angle brackets")
            }
            EnrichError::InvalidEvents { reason } => write!(f, "invalid event list: {reason}"),
            EnrichError::InvalidCell { width, height } => {
                write!(f, "character cell must be > 0, got {width}x{height}")
            }
        }
    }
}

impl std::error::Error for EnrichError {}

impl From<GeometryError> for EnrichError {
    fn from(e: GeometryError) -> Self {
        EnrichError::Geometry(e)
    }
}

/// OCR tokens in reading order with their boxes and source image size.
/// Token order is never re-sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrDocument {
    pub tokens: Vec<String>,
    pub boxes: Vec<BBox>,
    pub image_width: f64,
    pub image_height: f64,
}

impl OcrDocument {
    pub fn new(
        tokens: Vec<String>,
        boxes: Vec<BBox>,
        image_width: f64,
        image_height: f64,
    ) -> EnrichResult<Self> {
        if tokens.len() != boxes.len() {
            return Err(EnrichError::LengthMismatch {
                tokens: tokens.len(),
                boxes: boxes.len(),
            });
        }
        if image_width <= 0.0 || image_height <= 0.0 {
            return Err(EnrichError::InvalidDimensions {
                width: image_width,
                height: image_height,
            });
        }
        Ok(OcrDocument {
            tokens,
            boxes,
            image_width,
            image_height,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parameters of the region/token matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentConfig {
    pub iou_threshold: f64,
    pub ignore_labels: BTreeSet<String>,
    pub corner_norm: CornerNorm,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        EnrichmentConfig {
            iou_threshold: 0.3,
            ignore_labels: ["Text".to_string()].into_iter().collect(),
            corner_norm: CornerNorm::L1,
        }
    }
}

impl EnrichmentConfig {
    pub fn validate(&self) -> EnrichResult<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(EnrichError::InvalidThreshold {
                value: self.iou_threshold,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    End,
}

/// A planned tag insertion: which kind of tag for which region goes next
/// to which original token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionEvent {
    pub token_index: usize,
    pub kind: EventKind,
    pub region_id: usize,
    pub class_label: String,
    /// Region box, reused as the box of the inserted tag entry.
    pub region_bbox: BBox,
}

/// Indices of one region's start/end tags within the enriched stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSpan {
    pub region_id: usize,
    pub start_tag_index: usize,
    pub end_tag_index: usize,
}

/// Token stream interleaved with layout tags. Removing the entries listed
/// in `tag_spans` restores the original document exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedTokens {
    pub tokens: Vec<String>,
    pub boxes: Vec<BBox>,
    pub tag_spans: Vec<TagSpan>,
    pub image_width: f64,
    pub image_height: f64,
}

impl EnrichedTokens {
    fn tag_indices(&self) -> BTreeSet<usize> {
        self.tag_spans
            .iter()
            .flat_map(|s| [s.start_tag_index, s.end_tag_index])
            .collect()
    }
}

/// Whitespace inside class labels becomes `-`, so tags stay single tokens.
fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_whitespace() { '-' } else { c })
        .collect()
}

fn label_is_well_formed(label: &str) -> bool {
    !label.is_empty() && !label.chars().any(|c| c.is_whitespace() || c == '<' || c == '>')
}

/// Match each region to its closest start/end tokens.
///
/// A token qualifies for a region when it is fully contained in the region
/// box or overlaps it with IoU above the threshold. The start token
/// minimizes the top-left corner distance, the end token the bottom-right
/// corner distance; ties go to the lowest token index. Regions with an
/// ignored label or an empty qualifying set emit nothing. Events come out
/// sorted by (token index, start-before-end, region id).
pub fn find_region_spans(
    doc: &OcrDocument,
    regions: &[LayoutRegion],
    cfg: &EnrichmentConfig,
) -> EnrichResult<Vec<InsertionEvent>> {
    cfg.validate()?;
    let mut events = Vec::new();
    for (region_id, region) in regions.iter().enumerate() {
        if cfg.ignore_labels.contains(&region.class_label) {
            continue;
        }
        let mut start: Option<(usize, f64)> = None;
        let mut end: Option<(usize, f64)> = None;
        for (t, token_box) in doc.boxes.iter().enumerate() {
            let qualifies = fully_contains(&region.bbox, token_box)
                || iou(&region.bbox, token_box) > cfg.iou_threshold;
            if !qualifies {
                continue;
            }
            let d_start = corner_distance(&region.bbox, token_box, Corner::TopLeft, cfg.corner_norm);
            let d_end =
                corner_distance(&region.bbox, token_box, Corner::BottomRight, cfg.corner_norm);
            if start.map_or(true, |(_, best)| d_start < best) {
                start = Some((t, d_start));
            }
            if end.map_or(true, |(_, best)| d_end < best) {
                end = Some((t, d_end));
            }
        }
        let (Some((s, _)), Some((e, _))) = (start, end) else {
            continue;
        };
        // A region whose closest start token follows its closest end token
        // gets the span reordered, keeping every start tag ahead of its end
        // tag downstream.
        let (s, e) = (s.min(e), s.max(e));
        let label = sanitize_label(&region.class_label);
        events.push(InsertionEvent {
            token_index: s,
            kind: EventKind::Start,
            region_id,
            class_label: label.clone(),
            region_bbox: region.bbox,
        });
        events.push(InsertionEvent {
            token_index: e,
            kind: EventKind::End,
            region_id,
            class_label: label,
            region_bbox: region.bbox,
        });
    }
    events.sort_by(|a, b| {
        (a.token_index, a.kind, a.region_id).cmp(&(b.token_index, b.kind, b.region_id))
    });
    Ok(events)
}

fn validate_events(doc: &OcrDocument, events: &[InsertionEvent]) -> EnrichResult<()> {
    let mut starts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ends: BTreeMap<usize, usize> = BTreeMap::new();
    for pair in events.windows(2) {
        let ka = (pair[0].token_index, pair[0].kind, pair[0].region_id);
        let kb = (pair[1].token_index, pair[1].kind, pair[1].region_id);
        if ka > kb {
            return Err(EnrichError::InvalidEvents {
                reason: "events are not sorted by (token index, kind, region id)".to_string(),
            });
        }
    }
    for event in events {
        if !label_is_well_formed(&event.class_label) {
            return Err(EnrichError::MalformedClassLabel {
                label: event.class_label.clone(),
            });
        }
        if event.token_index >= doc.len() {
            return Err(EnrichError::InvalidEvents {
                reason: format!(
                    "token index {} out of range for {} tokens",
                    event.token_index,
                    doc.len()
                ),
            });
        }
        let slot = match event.kind {
            EventKind::Start => &mut starts,
            EventKind::End => &mut ends,
        };
        if slot.insert(event.region_id, event.token_index).is_some() {
            return Err(EnrichError::InvalidEvents {
                reason: format!("region {} has duplicate {:?} events", event.region_id, event.kind),
            });
        }
    }
    if starts.len() != ends.len() || starts.keys().ne(ends.keys()) {
        return Err(EnrichError::InvalidEvents {
            reason: "start/end events are not paired per region".to_string(),
        });
    }
    for (region_id, s) in &starts {
        if ends[region_id] < *s {
            return Err(EnrichError::InvalidEvents {
                reason: format!("region {region_id} ends before it starts"),
            });
        }
    }
    Ok(())
}

/// Insert `<Class>` before each start token and `</Class>` after each end
/// token, shifting later insertions with a running counter so original
/// token order is preserved.
pub fn insert_tags(doc: &OcrDocument, events: &[InsertionEvent]) -> EnrichResult<EnrichedTokens> {
    validate_events(doc, events)?;
    let mut tokens = doc.tokens.clone();
    let mut boxes = doc.boxes.clone();
    let mut spans: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut counter = 0usize;
    for event in events {
        match event.kind {
            EventKind::Start => {
                let at = event.token_index + counter;
                tokens.insert(at, format!("<{}>", event.class_label));
                boxes.insert(at, event.region_bbox);
                spans.entry(event.region_id).or_insert((0, 0)).0 = at;
                counter += 1;
            }
            EventKind::End => {
                let at = event.token_index + counter + 1;
                tokens.insert(at, format!("</{}>", event.class_label));
                boxes.insert(at, event.region_bbox);
                spans.entry(event.region_id).or_insert((0, 0)).1 = at;
                counter += 1;
            }
        }
    }
    let tag_spans = spans
        .into_iter()
        .map(|(region_id, (start_tag_index, end_tag_index))| TagSpan {
            region_id,
            start_tag_index,
            end_tag_index,
        })
        .collect();
    Ok(EnrichedTokens {
        tokens,
        boxes,
        tag_spans,
        image_width: doc.image_width,
        image_height: doc.image_height,
    })
}

/// Remove all tag entries, restoring the original document.
pub fn strip_tags(enriched: &EnrichedTokens) -> OcrDocument {
    let tags = enriched.tag_indices();
    let mut tokens = Vec::with_capacity(enriched.tokens.len() - tags.len());
    let mut boxes = Vec::with_capacity(tokens.capacity());
    for (i, (token, bbox)) in enriched.tokens.iter().zip(&enriched.boxes).enumerate() {
        if !tags.contains(&i) {
            tokens.push(token.clone());
            boxes.push(*bbox);
        }
    }
    OcrDocument {
        tokens,
        boxes,
        image_width: enriched.image_width,
        image_height: enriched.image_height,
    }
}

/// End-to-end enrichment: order region corners, interpolate from the
/// layout-model image space into the OCR image space, match spans, and
/// insert tags.
pub fn enrich(
    doc: &OcrDocument,
    regions: &[LayoutRegion],
    region_dims: Option<(f64, f64)>,
    cfg: &EnrichmentConfig,
) -> EnrichResult<EnrichedTokens> {
    let ocr_dims = (doc.image_width, doc.image_height);
    let mut prepared = Vec::with_capacity(regions.len());
    for region in regions {
        let mut r = region.clone();
        r.bbox = BBox::ordered(r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2);
        match region_dims {
            Some(dims) if dims != ocr_dims => {
                r.bbox = interpolate_bbox(&r.bbox, dims, ocr_dims)?;
            }
            _ => {}
        }
        prepared.push(r);
    }
    let events = find_region_spans(doc, &prepared, cfg)?;
    insert_tags(doc, &events)
}

/// Tokens joined by single spaces; tags are tokens like any other.
pub fn serialize_plain(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Structure-preserving serialization output.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSerialized {
    pub text: String,
    /// Tokens that did not fit their row and were cut short or dropped.
    pub truncated_tokens: usize,
}

/// Place each token on a character grid at roughly its page position:
/// row from the vertical center of its box, column from its left edge,
/// shifting right past earlier tokens on collision. Runs of fully empty
/// rows collapse to one blank line.
pub fn serialize_space(
    tokens: &[String],
    boxes: &[BBox],
    image_dims: (f64, f64),
    char_cell: (f64, f64),
) -> EnrichResult<SpaceSerialized> {
    if tokens.len() != boxes.len() {
        return Err(EnrichError::LengthMismatch {
            tokens: tokens.len(),
            boxes: boxes.len(),
        });
    }
    let (width, height) = image_dims;
    if width <= 0.0 || height <= 0.0 {
        return Err(EnrichError::InvalidDimensions { width, height });
    }
    let (cell_w, cell_h) = char_cell;
    if cell_w <= 0.0 || cell_h <= 0.0 {
        return Err(EnrichError::InvalidCell {
            width: cell_w,
            height: cell_h,
        });
    }
    let n_rows = ((height / cell_h).ceil() as usize).max(1);
    let n_cols = ((width / cell_w).ceil() as usize).max(1);
    let mut grid: Vec<Vec<Option<char>>> = vec![vec![None; n_cols]; n_rows];
    let mut truncated = 0usize;

    for (token, bbox) in tokens.iter().zip(boxes) {
        let chars: Vec<char> = token.chars().collect();
        if chars.is_empty() {
            continue;
        }
        let y_center = (bbox.y1 + bbox.y2) / 2.0;
        let row = ((y_center / cell_h).floor() as usize).min(n_rows - 1);
        let want = ((bbox.x1 / cell_w).floor() as usize).min(n_cols - 1);
        let cells = &mut grid[row];

        // First column at or right of the wanted one where the whole token
        // fits into free cells.
        let fit = (want..n_cols.saturating_sub(chars.len() - 1).max(want))
            .take_while(|start| start + chars.len() <= n_cols)
            .find(|&start| cells[start..start + chars.len()].iter().all(Option::is_none));
        match fit {
            Some(start) => {
                for (i, c) in chars.iter().enumerate() {
                    cells[start + i] = Some(*c);
                }
            }
            None => {
                // Truncate into the first free run, if any.
                truncated += 1;
                if let Some(start) = (want..n_cols).find(|&c| cells[c].is_none()) {
                    let mut i = 0;
                    for col in start..n_cols {
                        if cells[col].is_some() || i >= chars.len() {
                            break;
                        }
                        cells[col] = Some(chars[i]);
                        i += 1;
                    }
                }
                log::warn!("token {token:?} truncated in space serialization");
            }
        }
    }

    let mut lines: Vec<String> = Vec::new();
    let mut last_blank = false;
    for row in &grid {
        let line: String = row
            .iter()
            .map(|c| c.unwrap_or(' '))
            .collect::<String>()
            .trim_end()
            .to_string();
        if line.is_empty() {
            if !last_blank {
                lines.push(String::new());
                last_blank = true;
            }
        } else {
            lines.push(line);
            last_blank = false;
        }
    }
    Ok(SpaceSerialized {
        text: lines.join("\n"),
        truncated_tokens: truncated,
    })
}

/// Default character cell: the page maps to roughly a 100x60 grid.
pub fn default_char_cell(image_dims: (f64, f64)) -> (f64, f64) {
    (image_dims.0 / 100.0, image_dims.1 / 60.0)
}

/// The fixed ten-line question prompt around a serialized document.
pub fn render_prompt(document_text: &str, question: &str) -> String {
    format!(
        "You are asked to answer questions asked on a document image.\n\
         The answers to questions are short text spans taken verbatim from the document.\n\
         This means that the answers comprise a set of contiguous text tokens present in the document.\n\
         Document:\n\
         {document_text}\n\
         Question: {question}\n\
         \n\
         Directly extract the answer to the question from the document with as few words as possible.\n\
         \n\
         Answer: "
    )
}
