//! End-to-end runs: extraction from a plan image, evaluation of result
//! directories, and the debug overlay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DetectorMode, PipelineConfig};
use crate::crossings::{find_crossings, LineCrossing};
use crate::detect::{
    detect_templates, ingest_annotations, ingest_detections, merge_tile_detections, read_annotation_symbols,
    write_annotations, SymbolClass, SymbolDetection, Template,
};
use crate::eval::{
    ap_from_ranked, match_detections, metrics, score_connections, ConfusionCounts, MetricReport, PrCurve,
};
use crate::export::{export_budo, export_json, export_turtle, parse_json};
use crate::lines::{binarize, hough_segments, mask_symbols, merge_segments, LineSegment};
use crate::overlay::render_overlay;
use crate::plan::{decompose, load_plan, PlanImage};
use crate::synth::glyph_library;
use crate::topology::{derive_connections, matrix_to_graph, ConnectionMatrix, TopologyGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input error: {0}")]
    Input(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Input(_) => 2,
            PipelineError::Pipeline(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tiles: usize,
    pub symbols: usize,
    pub segments: usize,
    pub crossings: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: RunSummary,
}

/// Everything derived from one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub symbols: Vec<SymbolDetection>,
    pub segments: Vec<LineSegment>,
    pub crossings: Vec<LineCrossing>,
    pub matrix: ConnectionMatrix,
    pub graph: TopologyGraph,
}

/// Splits elapsed time into contiguous stages, so stage times add up to the
/// total by construction.
struct Laps {
    start: Instant,
    last: Instant,
    stages: Vec<StageTiming>,
}

impl Laps {
    fn new() -> Self {
        let now = Instant::now();
        Self { start: now, last: now, stages: Vec::new() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTiming { stage: stage.into(), seconds: (now - self.last).as_secs_f64() });
        self.last = now;
    }

    fn total(&self) -> f64 {
        (self.last - self.start).as_secs_f64()
    }
}

fn pipeline_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Pipeline(e.to_string())
}

/// Loads `<Class>.png` glyphs from `dir`, or the built-in library.
pub fn load_templates(cfg: &PipelineConfig) -> Result<Vec<Template>, PipelineError> {
    let dir = &cfg.detector.templates_dir;
    if dir.is_empty() {
        let lib = glyph_library(cfg.detector.template_size, 2.0);
        return Ok(lib.into_iter().filter(|t| cfg.detector.classes.iter().any(|c| c == t.class.as_str())).collect());
    }
    let registry = cfg.registry()?;
    let mut out = Vec::new();
    for class in registry.classes() {
        let path = Path::new(dir).join(format!("{class}.png"));
        if !path.exists() {
            continue;
        }
        let img = load_plan(&path, None).map_err(|e| PipelineError::Input(e.to_string()))?;
        let t = Template::new(class.clone(), binarize(&img)).map_err(|e| PipelineError::Input(e.to_string()))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(PipelineError::Input(format!("no <Class>.png templates in {dir}")));
    }
    Ok(out)
}

/// Runs the template detector tile by tile and merges across seams.
pub fn detect_symbols_tiled(plan: &PlanImage, cfg: &PipelineConfig) -> Result<Vec<SymbolDetection>, PipelineError> {
    let templates = load_templates(cfg)?;
    let tiles = decompose(plan, cfg.tiling.tile_size, cfg.tiling.overlap).map_err(pipeline_err)?;
    let params = cfg.template_params();
    let per_tile = tiles
        .into_par_iter()
        .map(|t| detect_templates(&t.image, &templates, &params).map(|d| (t, d)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(pipeline_err)?;
    merge_tile_detections(&per_tile, cfg.detector.nms_iou).map_err(pipeline_err)
}

/// Binarizes, masks symbols, runs Hough per tile and merges the pieces in
/// plan coordinates.
pub fn detect_lines(
    plan: &PlanImage,
    symbols: &[SymbolDetection],
    cfg: &PipelineConfig,
) -> Result<Vec<LineSegment>, PipelineError> {
    let bin = mask_symbols(&binarize(plan), symbols, cfg.lines.mask_inflate);
    let tiles = decompose(plan, cfg.tiling.tile_size, cfg.tiling.overlap).map_err(pipeline_err)?;
    let pieces: Vec<Vec<LineSegment>> = tiles
        .par_iter()
        .map(|t| {
            let crop = bin.crop(t.offset_x, t.offset_y, t.width(), t.height());
            hough_segments(&crop, &cfg.hough)
                .into_iter()
                .map(|s| s.translate(t.offset_x as f64, t.offset_y as f64))
                .collect()
        })
        .collect();
    let all: Vec<LineSegment> = pieces.into_iter().flatten().collect();
    Ok(merge_segments(&all, &cfg.merge))
}

/// Line, crossing and connection stages for known symbols.
pub fn extract_topology(
    plan: &PlanImage,
    symbols: Vec<SymbolDetection>,
    cfg: &PipelineConfig,
) -> Result<Extraction, PipelineError> {
    let segments = detect_lines(plan, &symbols, cfg)?;
    let crossings = find_crossings(&segments, &cfg.crossing);
    let matrix = derive_connections(&symbols, &segments, &crossings, &cfg.derive_params());
    let graph = graph_for(&matrix, &symbols, plan.source_id(), cfg)?;
    Ok(Extraction { symbols, segments, crossings, matrix, graph })
}

fn graph_for(
    matrix: &ConnectionMatrix,
    symbols: &[SymbolDetection],
    plan: &str,
    cfg: &PipelineConfig,
) -> Result<TopologyGraph, PipelineError> {
    let mut g = matrix_to_graph(matrix, symbols, plan).map_err(PipelineError::Pipeline)?;
    g.config_hash = Some(cfg.hash());
    Ok(g)
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Inputs to one extraction run.
#[derive(Debug, Clone)]
pub struct ExtractRequest {
    pub plan: PathBuf,
    pub out_dir: PathBuf,
    /// Annotation or external detection file (annotations/external modes).
    pub annotations: Option<PathBuf>,
    /// Recorded in the manifest only.
    pub config_path: Option<PathBuf>,
}

/// Runs the full pipeline and writes `topology.json`, `graph.ttl`,
/// `labels.csv` (plus debug dumps) and finally `manifest.json`.
pub fn run_extract(req: &ExtractRequest, cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.output.threads).build().map_err(pipeline_err)?;
    pool.install(|| run_extract_inner(req, cfg))
}

fn run_extract_inner(req: &ExtractRequest, cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut laps = Laps::new();

    let plan = load_plan(&req.plan, None).map_err(|e| PipelineError::Input(e.to_string()))?;
    std::fs::create_dir_all(&req.out_dir)
        .map_err(|e| PipelineError::Input(format!("cannot create {}: {e}", req.out_dir.display())))?;
    laps.lap("load");

    let tiles = decompose(&plan, cfg.tiling.tile_size, cfg.tiling.overlap).map_err(pipeline_err)?.len();
    laps.lap("decompose");

    let registry = cfg.registry()?;
    let symbols = match cfg.detector.mode {
        DetectorMode::Templates => detect_symbols_tiled(&plan, cfg)?,
        mode => {
            let path = req
                .annotations
                .as_deref()
                .ok_or_else(|| PipelineError::Input(format!("detector mode {mode:?} needs --annotations")))?;
            let read = if mode == DetectorMode::Annotations { ingest_annotations } else { ingest_detections };
            read(path, &plan, &registry).map_err(|e| PipelineError::Input(e.to_string()))?
        }
    };
    laps.lap("symbols");

    let segments = detect_lines(&plan, &symbols, cfg)?;
    laps.lap("lines");

    let crossings = find_crossings(&segments, &cfg.crossing);
    laps.lap("crossings");

    let matrix = derive_connections(&symbols, &segments, &crossings, &cfg.derive_params());
    let graph = graph_for(&matrix, &symbols, plan.source_id(), cfg)?;
    laps.lap("connections");

    let map = &cfg.export.class_map;
    let mut files: Vec<(&str, String)> = vec![
        ("topology.json", export_json(&graph).map_err(pipeline_err)?),
        ("graph.ttl", export_turtle(&graph, map, &cfg.turtle_options()).map_err(pipeline_err)?),
        ("labels.csv", export_budo(&graph, map, &cfg.budo_options()).map_err(pipeline_err)?),
    ];
    if cfg.output.debug_dumps {
        files.push(("detections.json", write_annotations(plan.source_id(), &symbols)));
        files.push(("segments.json", json(&segments)));
        files.push(("crossings.json", json(&crossings)));
    }
    for (name, text) in &files {
        write_atomic(&req.out_dir.join(name), text)?;
    }
    laps.lap("export");

    let mut inputs = BTreeMap::from([("plan".to_string(), req.plan.display().to_string())]);
    if let Some(a) = &req.annotations {
        inputs.insert("annotations".into(), a.display().to_string());
    }
    if let Some(c) = &req.config_path {
        inputs.insert("config".into(), c.display().to_string());
    }
    let mut outputs: Vec<String> = files.iter().map(|(n, _)| n.to_string()).collect();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        tool: "pidgraph".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        started_unix,
        inputs,
        total_seconds: laps.total(),
        stages: laps.stages,
        outputs,
        summary: RunSummary {
            tiles,
            symbols: symbols.len(),
            segments: segments.len(),
            crossings: crossings.len(),
            edges: graph.edges.len(),
        },
    };
    write_atomic(&req.out_dir.join("manifest.json"), &json(&manifest))?;
    log::info!(
        "{}: {} symbols, {} segments, {} crossings, {} edges",
        plan.source_id(),
        manifest.summary.symbols,
        manifest.summary.segments,
        manifest.summary.crossings,
        manifest.summary.edges
    );
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Symbols,
    Connections,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "symbols" => Ok(Self::Symbols),
            "connections" => Ok(Self::Connections),
            _ => Err(format!("unknown eval mode {s:?} (symbols, connections)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub counts: ConfusionCounts,
    pub metrics: MetricReport,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub plans: Vec<String>,
    pub counts: ConfusionCounts,
    pub metrics: MetricReport,
    /// Symbol mode only: AP over all classes pooled.
    pub ap: Option<f64>,
    /// Symbol mode only.
    pub per_class: BTreeMap<String, ClassReport>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub pr_curve: Option<PrCurve>,
}

fn json_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let rd = std::fs::read_dir(dir).map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| PipelineError::Input(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))
}

/// Ranked hits pooled over plans, scored as one precision-recall curve.
fn pooled_curve(mut ranked: Vec<(f64, bool)>, n_truth: usize) -> PrCurve {
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    let scores: Vec<f64> = ranked.iter().map(|r| r.0).collect();
    ap_from_ranked(&hits, n_truth, &scores)
}

/// Detection IoU threshold for evaluation.
pub const EVAL_IOU: f64 = 0.5;

/// Scores every `<stem>.json` in `pred_dir` against the same stem in
/// `truth_dir`. Symbol mode reads annotation files; connection mode reads
/// topology JSON.
pub fn run_eval(
    pred_dir: &Path,
    truth_dir: &Path,
    mode: EvalMode,
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let pred = json_stems(pred_dir)?;
    let truth = json_stems(truth_dir)?;
    let only_pred: Vec<&String> = pred.keys().filter(|k| !truth.contains_key(*k)).collect();
    let only_truth: Vec<&String> = truth.keys().filter(|k| !pred.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        return Err(PipelineError::Input(format!(
            "file stems differ: only predicted {only_pred:?}, only in truth {only_truth:?}"
        )));
    }
    let mut warnings = Vec::new();
    if truth.is_empty() {
        warnings.push("no plans to evaluate; metrics are undefined".to_string());
    }
    let iou = EVAL_IOU;
    let registry = cfg.registry()?;
    let mut counts = ConfusionCounts::default();
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut n_truth = 0usize;
    let mut per_class: BTreeMap<String, (ConfusionCounts, Vec<(f64, bool)>, usize)> = BTreeMap::new();
    for (stem, tpath) in &truth {
        let ppath = &pred[stem];
        match mode {
            EvalMode::Symbols => {
                let parse = |p: &Path| {
                    read_annotation_symbols(&read(p)?, &registry)
                        .map(|(_, s)| s)
                        .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))
                };
                let (p, t) = (parse(ppath)?, parse(tpath)?);
                let m = match_detections(&p, &t, iou);
                counts += m.counts;
                n_truth += t.len();
                for (d, hit) in p.iter().zip(&m.pred_match) {
                    ranked.push((d.score, hit.is_some()));
                }
                let classes: std::collections::BTreeSet<&SymbolClass> = p.iter().chain(&t).map(|s| &s.class).collect();
                for class in classes {
                    let pc: Vec<SymbolDetection> = p.iter().filter(|s| &s.class == class).cloned().collect();
                    let tc: Vec<SymbolDetection> = t.iter().filter(|s| &s.class == class).cloned().collect();
                    let mc = match_detections(&pc, &tc, iou);
                    let e = per_class.entry(class.to_string()).or_default();
                    e.0 += mc.counts;
                    e.2 += tc.len();
                    e.1.extend(pc.iter().zip(&mc.pred_match).map(|(d, h)| (d.score, h.is_some())));
                }
            }
            EvalMode::Connections => {
                let parse = |p: &Path| {
                    parse_json(&read(p)?)
                        .and_then(|g| g.to_matrix().map_err(crate::export::ExportError::InvalidGraph))
                        .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))
                };
                let (p, t) = (parse(ppath)?, parse(tpath)?);
                counts += score_connections(&p, &t).map_err(|e| PipelineError::Input(format!("{stem}: {e}")))?;
            }
        }
    }
    let (ap, pr_curve) = match mode {
        EvalMode::Symbols if n_truth > 0 => {
            let c = pooled_curve(ranked, n_truth);
            (Some(c.ap), Some(c))
        }
        _ => (None, None),
    };
    let per_class = per_class
        .into_iter()
        .map(|(k, (c, r, n))| {
            let ap = (n > 0).then(|| pooled_curve(r, n).ap);
            (k, ClassReport { counts: c, metrics: metrics(&c), ap })
        })
        .collect();
    Ok(EvalReport {
        mode,
        plans: truth.keys().cloned().collect(),
        counts,
        metrics: metrics(&counts),
        ap,
        per_class,
        warnings,
        pr_curve,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable summary of a report.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let c = r.counts;
    s.push_str(&format!("plans: {}\n", r.plans.len()));
    s.push_str(&format!("tp {}  fp {}  fn {}  tn {}\n", c.tp, c.fp, c.fn_, c.tn));
    let m = r.metrics;
    for (name, v) in [
        ("recall", m.recall),
        ("precision", m.precision),
        ("f1", m.f1),
        ("accuracy", m.accuracy),
        ("specificity", m.specificity),
        ("npv", m.npv),
    ] {
        s.push_str(&format!("{name:<12} {}\n", fmt_opt(v)));
    }
    if r.mode == EvalMode::Symbols {
        s.push_str(&format!("{:<12} {}\n", "ap", fmt_opt(r.ap)));
        for (class, cr) in &r.per_class {
            s.push_str(&format!("  {class:<14} f1 {}  ap {}\n", fmt_opt(cr.metrics.f1), fmt_opt(cr.ap)));
        }
    }
    for w in &r.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

/// Writes `report.json` and, in symbol mode, `pr_curve.csv` to `out_dir`.
pub fn write_eval_outputs(r: &EvalReport, out_dir: &Path) -> Result<Vec<String>, PipelineError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::Input(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = vec!["report.json".to_string()];
    write_atomic(&out_dir.join("report.json"), &json(r))?;
    if let Some(c) = &r.pr_curve {
        write_atomic(&out_dir.join("pr_curve.csv"), &c.to_csv())?;
        written.push("pr_curve.csv".into());
    }
    Ok(written)
}

/// Renders the overlay SVG for a plan from a finished extraction directory.
pub fn run_debug_overlay(plan_path: &Path, stage_dir: &Path, out_svg: &Path) -> Result<(), PipelineError> {
    let plan = load_plan(plan_path, None).map_err(|e| PipelineError::Input(e.to_string()))?;
    let need = |name: &str| {
        let p = stage_dir.join(name);
        if p.exists() {
            read(&p)
        } else {
            Err(PipelineError::Input(format!("missing stage output {}", p.display())))
        }
    };
    let graph = parse_json(&need("topology.json")?).map_err(|e| PipelineError::Input(e.to_string()))?;
    let segments: Vec<LineSegment> = serde_json::from_str(&need("segments.json")?)
        .map_err(|e| PipelineError::Input(format!("segments.json: {e}")))?;
    let crossings: Vec<LineCrossing> = serde_json::from_str(&need("crossings.json")?)
        .map_err(|e| PipelineError::Input(format!("crossings.json: {e}")))?;
    write_atomic(out_svg, &render_overlay(&plan, &segments, &crossings, &graph))
}
