//! Fuzzed verification of the region/token matching against an exhaustive
//! brute-force matcher, plus the insert/strip round-trip law.

use std::collections::BTreeMap;

use distildoc_core::enrich::{
    find_region_spans, insert_tags, strip_tags, EnrichmentConfig, EventKind, InsertionEvent,
    OcrDocument,
};
use distildoc_core::geometry::{BBox, CornerNorm, LayoutRegion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: [&str; 5] = ["Title", "Table", "Figure", "List-item", "Text"];

/// Tokens laid out on a rows x cols grid in reading order, with a margin
/// so neighboring boxes never touch.
fn grid_document(rng: &mut ChaCha8Rng) -> OcrDocument {
    let rows = rng.gen_range(1..=6usize);
    let cols = rng.gen_range(1..=8usize);
    let cell_w = rng.gen_range(20.0..40.0);
    let cell_h = rng.gen_range(10.0..30.0);
    let width = cols as f64 * cell_w;
    let height = rows as f64 * cell_h;
    let mut tokens = Vec::new();
    let mut boxes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            tokens.push(format!("w{}", r * cols + c));
            boxes.push(BBox {
                x1: c as f64 * cell_w + 2.0,
                y1: r as f64 * cell_h + 2.0,
                x2: (c + 1) as f64 * cell_w - 2.0,
                y2: (r + 1) as f64 * cell_h - 2.0,
            });
        }
    }
    OcrDocument::new(tokens, boxes, width, height).unwrap()
}

fn random_regions(rng: &mut ChaCha8Rng, doc: &OcrDocument) -> Vec<LayoutRegion> {
    let count = rng.gen_range(0..=5usize);
    (0..count)
        .map(|_| {
            let x1 = rng.gen_range(0.0..doc.image_width);
            let x2 = rng.gen_range(0.0..doc.image_width);
            let y1 = rng.gen_range(0.0..doc.image_height);
            let y2 = rng.gen_range(0.0..doc.image_height);
            LayoutRegion {
                bbox: BBox::ordered(x1, y1, x2, y2),
                class_label: CLASSES[rng.gen_range(0..CLASSES.len())].to_string(),
                score: rng.gen_range(0.0..=1.0),
                metadata: BTreeMap::new(),
            }
        })
        .collect()
}

/// Exhaustive matcher with its own containment, IoU, and argmin code.
fn brute_force_events(
    doc: &OcrDocument,
    regions: &[LayoutRegion],
    cfg: &EnrichmentConfig,
) -> Vec<InsertionEvent> {
    let mut events = Vec::new();
    for (region_id, region) in regions.iter().enumerate() {
        if cfg.ignore_labels.contains(&region.class_label) {
            continue;
        }
        let r = &region.bbox;
        let mut qualifying = Vec::new();
        for (t, b) in doc.boxes.iter().enumerate() {
            let contained =
                r.x1 <= b.x1 && r.y1 <= b.y1 && b.x2 <= r.x2 && b.y2 <= r.y2;
            let ix = (r.x2.min(b.x2) - r.x1.max(b.x1)).max(0.0)
                * (r.y2.min(b.y2) - r.y1.max(b.y1)).max(0.0);
            let union = (r.x2 - r.x1) * (r.y2 - r.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - ix;
            let overlap = if union > 0.0 { ix / union } else { 0.0 };
            if contained || overlap > cfg.iou_threshold {
                qualifying.push(t);
            }
        }
        if qualifying.is_empty() {
            continue;
        }
        let dist = |a: (f64, f64), b: (f64, f64)| match cfg.corner_norm {
            CornerNorm::L1 => (a.0 - b.0).abs() + (a.1 - b.1).abs(),
            CornerNorm::L2 => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
        };
        let mut start = qualifying[0];
        let mut end = qualifying[0];
        for &t in &qualifying {
            let b = &doc.boxes[t];
            if dist((r.x1, r.y1), (b.x1, b.y1))
                < dist((r.x1, r.y1), (doc.boxes[start].x1, doc.boxes[start].y1))
            {
                start = t;
            }
            if dist((r.x2, r.y2), (b.x2, b.y2))
                < dist((r.x2, r.y2), (doc.boxes[end].x2, doc.boxes[end].y2))
            {
                end = t;
            }
        }
        let (s, e) = (start.min(end), start.max(end));
        let label = region.class_label.replace(char::is_whitespace, "-");
        events.push(InsertionEvent {
            token_index: s,
            kind: EventKind::Start,
            region_id,
            class_label: label.clone(),
            region_bbox: *r,
        });
        events.push(InsertionEvent {
            token_index: e,
            kind: EventKind::End,
            region_id,
            class_label: label,
            region_bbox: *r,
        });
    }
    events.sort_by(|a, b| {
        (a.token_index, a.kind, a.region_id).cmp(&(b.token_index, b.kind, b.region_id))
    });
    events
}

#[test]
fn spans_match_brute_force_on_fuzzed_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    let cfg = EnrichmentConfig::default();
    for _ in 0..500 {
        let doc = grid_document(&mut rng);
        let regions = random_regions(&mut rng, &doc);
        let fast = find_region_spans(&doc, &regions, &cfg).unwrap();
        let brute = brute_force_events(&doc, &regions, &cfg);
        assert_eq!(fast, brute);
    }
}

#[test]
fn strip_inverts_insert_on_fuzzed_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7002);
    let cfg = EnrichmentConfig::default();
    for _ in 0..1000 {
        let doc = grid_document(&mut rng);
        let regions = random_regions(&mut rng, &doc);
        let events = find_region_spans(&doc, &regions, &cfg).unwrap();
        let enriched = insert_tags(&doc, &events).unwrap();
        assert_eq!(strip_tags(&enriched), doc);

        // One start and one end tag per contributing region.
        let contributing = events.len() / 2;
        assert_eq!(enriched.tokens.len(), doc.tokens.len() + 2 * contributing);
        assert_eq!(enriched.tag_spans.len(), contributing);
        for span in &enriched.tag_spans {
            assert!(span.start_tag_index < span.end_tag_index);
            assert!(enriched.tokens[span.start_tag_index].starts_with('<'));
            assert!(enriched.tokens[span.end_tag_index].starts_with("</"));
        }
    }
}

#[test]
fn events_are_stable_under_region_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7003);
    let cfg = EnrichmentConfig::default();
    for _ in 0..200 {
        let doc = grid_document(&mut rng);
        let mut regions = random_regions(&mut rng, &doc);
        let forward = find_region_spans(&doc, &regions, &cfg).unwrap();
        regions.reverse();
        let reversed = find_region_spans(&doc, &regions, &cfg).unwrap();

        // Same events modulo the region_id relabeling from the reversal.
        let relabel = |events: &[InsertionEvent], n: usize, flip: bool| {
            let mut set: Vec<(usize, EventKind, usize, String)> = events
                .iter()
                .map(|e| {
                    let id = if flip { n - 1 - e.region_id } else { e.region_id };
                    (e.token_index, e.kind, id, e.class_label.clone())
                })
                .collect();
            set.sort();
            set
        };
        let n = regions.len();
        assert_eq!(relabel(&forward, n, false), relabel(&reversed, n, true));
    }
}
