//! Symbol detections: the annotation file format, a template-matching
//! baseline detector, and merging of per-tile results.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::BoundingBox;
use crate::lines::BinaryImage;
use crate::plan::{to_plan_coords, PlanImage, Tile};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("annotation schema violation at {location}: {message}")]
    SchemaViolation { location: String, message: String },
    #[error("symbol {id} box {bbox:?} exceeds the {width}x{height} plan")]
    BoxOutOfBounds { id: String, bbox: [f64; 4], width: u32, height: u32 },
    #[error("no templates supplied")]
    EmptyTemplateSet,
    #[error("invalid detector parameter: {0}")]
    InvalidParameter(String),
}

/// Equipment class name, stored in its canonical spelling.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolClass(String);

impl SymbolClass {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn pump() -> Self {
        Self::new("Pump")
    }

    pub fn valve() -> Self {
        Self::new("Valve")
    }

    pub fn heat_exchanger() -> Self {
        Self::new("HeatExchanger")
    }

    pub fn flap() -> Self {
        Self::new("Flap")
    }
}

impl fmt::Display for SymbolClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The set of recognised classes. Lookup ignores ASCII case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: Vec<SymbolClass>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self {
            classes: vec![
                SymbolClass::pump(),
                SymbolClass::valve(),
                SymbolClass::heat_exchanger(),
                SymbolClass::flap(),
            ],
        }
    }
}

impl ClassRegistry {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self, String> {
        let mut seen = BTreeSet::new();
        let mut classes = Vec::new();
        for n in names {
            let n = n.as_ref().trim();
            if n.is_empty() {
                return Err("empty class name".into());
            }
            if !seen.insert(n.to_ascii_lowercase()) {
                return Err(format!("duplicate class name {n:?}"));
            }
            classes.push(SymbolClass::new(n));
        }
        Ok(Self { classes })
    }

    pub fn resolve(&self, name: &str) -> Option<SymbolClass> {
        self.classes.iter().find(|c| c.0.eq_ignore_ascii_case(name.trim())).cloned()
    }

    pub fn classes(&self) -> &[SymbolClass] {
        &self.classes
    }
}

/// One detected (or annotated) equipment symbol, in plan coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolDetection {
    pub id: String,
    pub class: SymbolClass,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationSymbol {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    class: String,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    plan: String,
    symbols: Vec<AnnotationSymbol>,
}

/// Parses annotation JSON text into detections.
///
/// Symbols without an `id` are named `<Class>-<n>` where `n` is their
/// one-based position in the file. When `keep_scores` is false (ground
/// truth) every score is 1.0; otherwise the file's score is kept and
/// defaults to 1.0.
pub fn parse_annotations(
    text: &str,
    plan: &PlanImage,
    registry: &ClassRegistry,
    keep_scores: bool,
) -> Result<Vec<SymbolDetection>, DetectError> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| DetectError::SchemaViolation {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let explicit: BTreeSet<&str> = file.symbols.iter().filter_map(|s| s.id.as_deref()).collect();
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(file.symbols.len());
    for (i, raw) in file.symbols.iter().enumerate() {
        let at = |field: &str| format!("symbols[{i}].{field}");
        let class = registry.resolve(&raw.class).ok_or_else(|| DetectError::SchemaViolation {
            location: at("class"),
            message: format!("unknown class {:?}", raw.class),
        })?;
        let [x0, y0, x1, y1] = raw.bbox;
        let bbox = BoundingBox::new(x0, y0, x1, y1)
            .map_err(|e| DetectError::SchemaViolation { location: at("bbox"), message: e.to_string() })?;
        let score = match (keep_scores, raw.score) {
            (true, Some(s)) => s,
            _ => 1.0,
        };
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectError::SchemaViolation {
                location: at("score"),
                message: format!("score {score} outside [0, 1]"),
            });
        }
        let id = match &raw.id {
            Some(id) if id.trim().is_empty() => {
                return Err(DetectError::SchemaViolation { location: at("id"), message: "empty id".into() })
            }
            Some(id) => id.clone(),
            None => {
                let mut n = i + 1;
                let mut candidate = format!("{class}-{n}");
                while explicit.contains(candidate.as_str()) || used.contains(&candidate) {
                    n += 1;
                    candidate = format!("{class}-{n}");
                }
                candidate
            }
        };
        if !used.insert(id.clone()) {
            return Err(DetectError::SchemaViolation { location: at("id"), message: format!("duplicate id {id:?}") });
        }
        if !plan.extent().contains_box(&bbox) {
            return Err(DetectError::BoxOutOfBounds {
                id,
                bbox: bbox.as_array(),
                width: plan.width(),
                height: plan.height(),
            });
        }
        out.push(SymbolDetection { id, class, bbox, score });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String, DetectError> {
    std::fs::read_to_string(path)
        .map_err(|e| DetectError::Io { path: path.display().to_string(), reason: e.to_string() })
}

/// Loads ground-truth annotations; every score is 1.0.
pub fn ingest_annotations(
    path: &Path,
    plan: &PlanImage,
    registry: &ClassRegistry,
) -> Result<Vec<SymbolDetection>, DetectError> {
    parse_annotations(&read_text(path)?, plan, registry, false)
}

/// Loads the output of an external detector, keeping its scores.
pub fn ingest_detections(
    path: &Path,
    plan: &PlanImage,
    registry: &ClassRegistry,
) -> Result<Vec<SymbolDetection>, DetectError> {
    parse_annotations(&read_text(path)?, plan, registry, true)
}

/// Serializes detections in the annotation format.
pub fn write_annotations(plan_id: &str, symbols: &[SymbolDetection]) -> String {
    let file = AnnotationFile {
        plan: plan_id.to_string(),
        symbols: symbols
            .iter()
            .map(|s| AnnotationSymbol {
                id: Some(s.id.clone()),
                class: s.class.to_string(),
                bbox: s.bbox.as_array(),
                score: Some(s.score),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("plain data serializes");
    text.push('\n');
    text
}

/// Reads an annotation file without a plan image (no bounds check).
pub fn read_annotation_symbols(
    text: &str,
    registry: &ClassRegistry,
) -> Result<(String, Vec<SymbolDetection>), DetectError> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| DetectError::SchemaViolation {
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for s in &file.symbols {
        w = w.max(s.bbox[2].ceil());
        h = h.max(s.bbox[3].ceil());
    }
    let canvas = PlanImage::filled(w as u32, h as u32, 255, file.plan.clone()).expect("positive size");
    let symbols = parse_annotations(text, &canvas, registry, true)?;
    Ok((file.plan, symbols))
}

/// Reference glyph for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub class: SymbolClass,
    /// Ink mask of the glyph.
    pub mask: BinaryImage,
    /// Size in pixels (longer side) at which the glyph appears at scale 1.0.
    pub native_scale: f64,
}

impl Template {
    pub fn new(class: SymbolClass, mask: BinaryImage) -> Result<Self, DetectError> {
        if mask.count_foreground() == 0 || mask.count_foreground() == mask.bits().len() {
            return Err(DetectError::InvalidParameter(format!("template for {class} has no ink contrast")));
        }
        let native_scale = mask.width().max(mask.height()) as f64;
        Ok(Self { class, mask, native_scale })
    }

    /// Resampled and rotated copy of the mask (nearest neighbour).
    fn variant(&self, scale: f64, quarter_turns: u8) -> BinaryImage {
        let factor = scale * self.native_scale / self.mask.width().max(self.mask.height()) as f64;
        let sw = ((self.mask.width() as f64 * factor).round() as u32).max(1);
        let sh = ((self.mask.height() as f64 * factor).round() as u32).max(1);
        let scaled = BinaryImage::from_fn(sw, sh, |x, y| {
            let sx = (((x as f64 + 0.5) / factor) as u32).min(self.mask.width() - 1);
            let sy = (((y as f64 + 0.5) / factor) as u32).min(self.mask.height() - 1);
            self.mask.get(sx, sy)
        });
        match quarter_turns % 4 {
            0 => scaled,
            1 => BinaryImage::from_fn(sh, sw, |x, y| scaled.get(y, sh - 1 - x)),
            2 => BinaryImage::from_fn(sw, sh, |x, y| scaled.get(sw - 1 - x, sh - 1 - y)),
            _ => BinaryImage::from_fn(sh, sw, |x, y| scaled.get(sw - 1 - y, x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParams {
    /// Minimum zero-mean normalized cross-correlation.
    pub threshold: f64,
    pub scales: Vec<f64>,
    /// Rotations in multiples of 90 degrees.
    pub quarter_turns: Vec<u8>,
    /// Same-class boxes at or above this IoU are suppressed.
    pub nms_iou: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self { threshold: 0.6, scales: vec![0.75, 1.0, 1.25], quarter_turns: vec![0, 1, 2, 3], nms_iou: 0.5 }
    }
}

/// Summed-area tables of intensity and squared intensity.
struct Integral {
    width: usize,
    sum: Vec<u64>,
    sq: Vec<u64>,
}

impl Integral {
    fn new(plan: &PlanImage) -> Self {
        let (w, h) = (plan.width() as usize, plan.height() as usize);
        let stride = w + 1;
        let mut sum = vec![0u64; stride * (h + 1)];
        let mut sq = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0u64, 0u64);
            for x in 0..w {
                let v = plan.pixels()[y * w + x] as u64;
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Self { width: stride, sum, sq }
    }

    fn window(&self, table: &[u64], x: usize, y: usize, w: usize, h: usize) -> u64 {
        let s = self.width;
        table[(y + h) * s + x + w] + table[y * s + x] - table[y * s + x + w] - table[(y + h) * s + x]
    }
}

/// Zero-mean NCC of a binary template (paper = 1, ink = 0) against every
/// placement in the plan; returns `(x, y, score)` for local maxima at or above
/// the threshold.
fn match_variant(plan: &PlanImage, integral: &Integral, mask: &BinaryImage, threshold: f64) -> Vec<(u32, u32, f64)> {
    let (pw, ph) = (plan.width() as usize, plan.height() as usize);
    let (tw, th) = (mask.width() as usize, mask.height() as usize);
    if tw > pw || th > ph {
        return Vec::new();
    }
    let n = (tw * th) as f64;
    let ink: Vec<usize> = mask.foreground().map(|(x, y)| y as usize * pw + x as usize).collect();
    let n_ink = ink.len() as f64;
    let t_var = n_ink * (n - n_ink) / n;
    let (nx, ny) = (pw - tw + 1, ph - th + 1);
    let pixels = plan.pixels();
    let scores: Vec<f64> = (0..ny)
        .into_par_iter()
        .flat_map_iter(|y| {
            let ink = &ink;
            (0..nx).map(move |x| {
                let s = integral.window(&integral.sum, x, y, tw, th) as f64;
                let q = integral.window(&integral.sq, x, y, tw, th) as f64;
                let i_var = q - s * s / n;
                if i_var <= 1e-6 {
                    return 0.0;
                }
                let base = y * pw + x;
                let ink_sum: u64 = ink.iter().map(|&o| pixels[base + o] as u64).sum();
                let num = s * n_ink / n - ink_sum as f64;
                num / (i_var * t_var).sqrt()
            })
        })
        .collect();
    let mut peaks = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            let v = scores[y * nx + x];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || qx < 0 || qy < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    if scores[qy as usize * nx + qx as usize] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((x as u32, y as u32, v.min(1.0)));
            }
        }
    }
    peaks
}

/// Greedy per-class non-maximum suppression. Higher score wins; ties go to
/// the lexicographically smaller box.
pub fn non_max_suppression(mut dets: Vec<SymbolDetection>, iou: f64) -> Vec<SymbolDetection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
            .then_with(|| a.class.cmp(&b.class))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut kept: Vec<SymbolDetection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.class != d.class || k.bbox.iou(&d.bbox) < iou) {
            kept.push(d);
        }
    }
    kept
}

/// Orders detections top-to-bottom, left-to-right and names them
/// `<Class>-<n>`.
pub fn assign_symbol_ids(dets: &mut [SymbolDetection]) {
    dets.sort_by(|a, b| {
        a.bbox.y_min.total_cmp(&b.bbox.y_min).then_with(|| a.bbox.lex_cmp(&b.bbox)).then_with(|| a.class.cmp(&b.class))
    });
    for (i, d) in dets.iter_mut().enumerate() {
        d.id = format!("{}-{}", d.class, i + 1);
    }
}

/// Template-matching baseline detector.
pub fn detect_templates(
    plan: &PlanImage,
    templates: &[Template],
    params: &TemplateParams,
) -> Result<Vec<SymbolDetection>, DetectError> {
    if templates.is_empty() {
        return Err(DetectError::EmptyTemplateSet);
    }
    if !(params.threshold > 0.0 && params.threshold < 1.0) {
        return Err(DetectError::InvalidParameter(format!("threshold {} not in (0, 1)", params.threshold)));
    }
    let integral = Integral::new(plan);
    let mut raw = Vec::new();
    for t in templates {
        for &scale in &params.scales {
            let mut seen = Vec::new();
            for &turns in &params.quarter_turns {
                let mask = t.variant(scale, turns);
                // symmetric glyphs repeat under rotation
                if seen.contains(&mask) {
                    continue;
                }
                for (x, y, score) in match_variant(plan, &integral, &mask, params.threshold) {
                    raw.push(SymbolDetection {
                        id: String::new(),
                        class: t.class.clone(),
                        bbox: BoundingBox {
                            x_min: x as f64,
                            y_min: y as f64,
                            x_max: (x + mask.width()) as f64,
                            y_max: (y + mask.height()) as f64,
                        },
                        score,
                    });
                }
                seen.push(mask);
            }
        }
    }
    let mut kept = non_max_suppression(raw, params.nms_iou);
    assign_symbol_ids(&mut kept);
    Ok(kept)
}

/// Brings per-tile detections (tile-local boxes) into plan coordinates and
/// collapses same-class duplicates from overlapping tiles.
pub fn merge_tile_detections(
    per_tile: &[(Tile, Vec<SymbolDetection>)],
    iou_dedup: f64,
) -> Result<Vec<SymbolDetection>, DetectError> {
    if !(iou_dedup > 0.0 && iou_dedup <= 1.0) {
        return Err(DetectError::InvalidParameter(format!("dedup IoU {iou_dedup} not in (0, 1]")));
    }
    let mut all = Vec::new();
    for (tile, dets) in per_tile {
        for d in dets {
            let bbox = to_plan_coords(tile, &d.bbox)
                .map_err(|e| DetectError::InvalidParameter(format!("detection {}: {e}", d.id)))?;
            all.push(SymbolDetection { bbox, ..d.clone() });
        }
    }
    let mut kept = non_max_suppression(all, iou_dedup);
    assign_symbol_ids(&mut kept);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::decompose;

    fn plan(w: u32, h: u32) -> PlanImage {
        PlanImage::filled(w, h, 255, "p").unwrap()
    }

    fn det(id: &str, class: &str, b: [f64; 4], score: f64) -> SymbolDetection {
        SymbolDetection {
            id: id.into(),
            class: SymbolClass::new(class),
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            score,
        }
    }

    #[test]
    fn registry_is_case_insensitive() {
        let r = ClassRegistry::default();
        assert_eq!(r.resolve("heatexchanger"), Some(SymbolClass::heat_exchanger()));
        assert_eq!(r.resolve(" VALVE "), Some(SymbolClass::valve()));
        assert_eq!(r.resolve("sensor"), None);
        assert!(ClassRegistry::new(&["Pump", "pump"]).is_err());
    }

    #[test]
    fn single_valve_annotation() {
        let text = r#"{"plan":"p","symbols":[{"class":"valve","bbox":[10,10,30,30],"score":0.4}]}"#;
        let dets = parse_annotations(text, &plan(100, 100), &ClassRegistry::default(), false).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, SymbolClass::valve());
        assert_eq!(dets[0].score, 1.0);
        assert_eq!(dets[0].id, "Valve-1");
        let kept = parse_annotations(text, &plan(100, 100), &ClassRegistry::default(), true).unwrap();
        assert_eq!(kept[0].score, 0.4);
    }

    #[test]
    fn pump_tee_ids() {
        let text = r#"{"plan":"tee","symbols":[
            {"class":"Valve","bbox":[90,20,110,40]},
            {"class":"Valve","bbox":[90,260,110,280]},
            {"class":"Flap","bbox":[90,340,110,360]},
            {"class":"Pump","bbox":[280,140,310,170]}]}"#;
        let dets = parse_annotations(text, &plan(400, 400), &ClassRegistry::default(), false).unwrap();
        let ids: Vec<&str> = dets.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["Valve-1", "Valve-2", "Flap-3", "Pump-4"]);
    }

    #[test]
    fn generated_ids_avoid_explicit_ones() {
        let text = r#"{"plan":"p","symbols":[
            {"class":"Pump","bbox":[0,0,5,5]},
            {"id":"Pump-1","class":"Pump","bbox":[10,0,15,5]}]}"#;
        let dets = parse_annotations(text, &plan(50, 50), &ClassRegistry::default(), false).unwrap();
        assert_eq!(dets[0].id, "Pump-2");
        assert_eq!(dets[1].id, "Pump-1");
    }

    #[test]
    fn annotation_errors() {
        let reg = ClassRegistry::default();
        let oob = r#"{"plan":"p","symbols":[{"class":"Valve","bbox":[10,10,120,30]}]}"#;
        assert!(matches!(
            parse_annotations(oob, &plan(100, 100), &reg, false),
            Err(DetectError::BoxOutOfBounds { .. })
        ));
        let bad_json = "{\"plan\":\"p\",\n\"symbols\":[{\"class\":}]}";
        match parse_annotations(bad_json, &plan(100, 100), &reg, false) {
            Err(DetectError::SchemaViolation { location, .. }) => assert!(location.starts_with("line 2")),
            other => panic!("{other:?}"),
        }
        let unknown = r#"{"plan":"p","symbols":[{"class":"Sensor","bbox":[1,1,2,2]}]}"#;
        match parse_annotations(unknown, &plan(100, 100), &reg, false) {
            Err(DetectError::SchemaViolation { location, .. }) => assert_eq!(location, "symbols[0].class"),
            other => panic!("{other:?}"),
        }
        let inverted = r#"{"plan":"p","symbols":[{"class":"Pump","bbox":[5,1,2,2]}]}"#;
        assert!(matches!(
            parse_annotations(inverted, &plan(100, 100), &reg, false),
            Err(DetectError::SchemaViolation { .. })
        ));
        let dup = r#"{"plan":"p","symbols":[{"id":"a","class":"Pump","bbox":[1,1,2,2]},{"id":"a","class":"Pump","bbox":[3,1,4,2]}]}"#;
        assert!(matches!(
            parse_annotations(dup, &plan(100, 100), &reg, false),
            Err(DetectError::SchemaViolation { .. })
        ));
        let extra = r#"{"plan":"p","symbols":[],"extra":1}"#;
        assert!(matches!(
            parse_annotations(extra, &plan(100, 100), &reg, false),
            Err(DetectError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn annotation_round_trip() {
        let reg = ClassRegistry::default();
        let p = plan(200, 200);
        let dets =
            vec![det("Pump-1", "Pump", [1.5, 2.0, 30.25, 40.0], 0.75), det("x", "Flap", [50.0, 50.0, 60.0, 60.0], 1.0)];
        let text = write_annotations("p", &dets);
        let back = parse_annotations(&text, &p, &reg, true).unwrap();
        assert_eq!(back, dets);
        assert_eq!(write_annotations("p", &back), text);
    }

    fn stamp(canvas: &mut [u8], w: u32, mask: &BinaryImage, x0: u32, y0: u32) {
        for (x, y) in mask.foreground() {
            canvas[((y0 + y) * w + x0 + x) as usize] = 0;
        }
    }

    fn l_glyph() -> BinaryImage {
        // asymmetric so each rotation differs
        BinaryImage::from_fn(12, 12, |x, y| x < 3 || (y >= 9 && x < 8) || (x == 10 && y == 2))
    }

    #[test]
    fn exact_copy_is_found() {
        let glyph = l_glyph();
        let (w, h) = (80u32, 60u32);
        let mut px = vec![255u8; (w * h) as usize];
        stamp(&mut px, w, &glyph, 30, 20);
        let p = PlanImage::new(w, h, px, "t").unwrap();
        let t = Template::new(SymbolClass::valve(), glyph).unwrap();
        let params = TemplateParams { threshold: 0.9, ..Default::default() };
        let dets = detect_templates(&p, &[t], &params).unwrap();
        assert_eq!(dets.len(), 1, "{dets:?}");
        assert_eq!(dets[0].bbox, BoundingBox::new(30.0, 20.0, 42.0, 32.0).unwrap());
        assert!(dets[0].score > 0.999);
    }

    #[test]
    fn blank_plan_and_empty_templates() {
        let t = Template::new(SymbolClass::valve(), l_glyph()).unwrap();
        assert!(detect_templates(&plan(50, 50), &[t], &TemplateParams::default()).unwrap().is_empty());
        assert!(matches!(
            detect_templates(&plan(50, 50), &[], &TemplateParams::default()),
            Err(DetectError::EmptyTemplateSet)
        ));
    }

    /// Exhaustive NCC over every offset and rotation, written directly from
    /// the definition.
    fn brute_ncc(p: &PlanImage, m: &BinaryImage, x0: u32, y0: u32) -> f64 {
        let n = (m.width() * m.height()) as f64;
        let mut iv = Vec::new();
        let mut tv = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                iv.push(p.get(x0 + x, y0 + y) as f64);
                tv.push(if m.get(x, y) { 0.0 } else { 255.0 });
            }
        }
        let im = iv.iter().sum::<f64>() / n;
        let tm = tv.iter().sum::<f64>() / n;
        let num: f64 = iv.iter().zip(&tv).map(|(a, b)| (a - im) * (b - tm)).sum();
        let da: f64 = iv.iter().map(|a| (a - im).powi(2)).sum();
        let db: f64 = tv.iter().map(|b| (b - tm).powi(2)).sum();
        if da == 0.0 {
            0.0
        } else {
            num / (da * db).sqrt()
        }
    }

    #[test]
    fn rotated_copy_found_with_quarter_turns() {
        let glyph = l_glyph();
        let t = Template::new(SymbolClass::valve(), glyph.clone()).unwrap();
        let rotated = t.variant(1.0, 1);
        let (w, h) = (60u32, 50u32);
        let mut px = vec![255u8; (w * h) as usize];
        stamp(&mut px, w, &rotated, 17, 11);
        let p = PlanImage::new(w, h, px, "t").unwrap();

        // oracle: best offset/rotation by exhaustive correlation
        let mut best = (0.0, 0, 0, 0u8);
        for turns in 0..4u8 {
            let m = t.variant(1.0, turns);
            for y in 0..=h - m.height() {
                for x in 0..=w - m.width() {
                    let s = brute_ncc(&p, &m, x, y);
                    if s > best.0 {
                        best = (s, x, y, turns);
                    }
                }
            }
        }
        assert_eq!((best.1, best.2, best.3), (17, 11, 1));

        let params = TemplateParams { threshold: 0.9, scales: vec![1.0], ..Default::default() };
        let dets = detect_templates(&p, &[t.clone()], &params).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].bbox.x_min, dets[0].bbox.y_min), (17.0, 11.0));
        assert!((dets[0].score - best.0).abs() < 1e-9);

        let upright_only =
            TemplateParams { threshold: 0.9, scales: vec![1.0], quarter_turns: vec![0], ..Default::default() };
        assert!(detect_templates(&p, &[t], &upright_only).unwrap().is_empty());
    }

    #[test]
    fn merge_dedups_across_tiles() {
        let p = plan(1500, 800);
        let tiles = decompose(&p, 800, 100).unwrap();
        // plan box (720,100)-(770,150) seen by both tiles, shifted by 5 px in the second
        let a = det("a", "Valve", [720.0, 100.0, 770.0, 150.0], 0.9);
        let b = det("b", "Valve", [25.0, 100.0, 75.0, 150.0], 0.8);
        // oracle: plan-space IoU by area arithmetic = 45*50 / (2*2500 - 45*50)
        let iou = (45.0 * 50.0) / (2.0 * 2500.0 - 45.0 * 50.0);
        assert!(iou > 0.8 && iou < 0.85);
        let merged = merge_tile_detections(&[(tiles[0].clone(), vec![a]), (tiles[1].clone(), vec![b])], 0.5).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].bbox.x_min, 720.0);
        assert_eq!(merged[0].score, 0.9);
    }

    #[test]
    fn merge_keeps_disjoint_and_other_classes() {
        let p = plan(400, 400);
        let tiles = decompose(&p, 800, 100).unwrap();
        let dets = vec![
            det("a", "Valve", [10.0, 10.0, 30.0, 30.0], 0.9),
            det("b", "Valve", [100.0, 10.0, 120.0, 30.0], 0.9),
            det("c", "Pump", [10.0, 10.0, 30.0, 30.0], 0.9),
        ];
        let merged = merge_tile_detections(&[(tiles[0].clone(), dets)], 0.5).unwrap();
        assert_eq!(merged.len(), 3);
        let again = merge_tile_detections(&[(tiles[0].clone(), merged.clone())], 0.5).unwrap();
        assert_eq!(again, merged);
    }

    #[test]
    fn nms_is_deterministic_on_ties() {
        let a = det("a", "Valve", [10.0, 10.0, 30.0, 30.0], 0.9);
        let b = det("b", "Valve", [11.0, 10.0, 31.0, 30.0], 0.9);
        let one = non_max_suppression(vec![a.clone(), b.clone()], 0.5);
        let two = non_max_suppression(vec![b, a], 0.5);
        assert_eq!(one, two);
        assert_eq!(one[0].bbox.x_min, 10.0);
    }
}
