//! Synthetic plans with known topology.
//!
//! A layout lists symbol boxes and pipes (polylines). Each pipe end is
//! anchored to a symbol, to another pipe (a tee) or left free. Ground truth
//! comes from the anchors, never from the rendered raster: symbols are
//! connected when a pipe network joins them without passing through another
//! symbol.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{SymbolClass, SymbolDetection, Template};
use crate::geom::{BoundingBox, Point};
use crate::lines::BinaryImage;
use crate::plan::PlanImage;
use crate::topology::ConnectionMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub class: SymbolClass,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Free,
    Symbol(usize),
    /// Ends on another pipe (index into the layout's pipes).
    Pipe(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub points: Vec<Point>,
    pub start: Anchor,
    pub end: Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub width: u32,
    pub height: u32,
    /// Stroke width of pipes and glyphs, pixels.
    pub stroke: f64,
    pub symbols: Vec<SymbolSpec>,
    pub pipes: Vec<PipeSpec>,
}

/// Rendering disturbances for robustness suites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_sigma: f64,
    /// Glyphs are rotated by a uniform angle in `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Relative glyph stroke variation, e.g. 0.25 for ±25 %.
    pub stroke_jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlan {
    pub image: PlanImage,
    /// Ids are `<Class>-<k>` with `k` the 1-based position in the layout.
    pub truth_symbols: Vec<SymbolDetection>,
    pub truth_matrix: ConnectionMatrix,
    pub layout: LayoutSpec,
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
    p.distance(&Point::new(a.x + t * dx, a.y + t * dy))
}

fn polyline_distance(p: Point, pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
}

fn boundary_distance(p: Point, b: &BoundingBox) -> f64 {
    let inside = p.x >= b.x_min && p.x <= b.x_max && p.y >= b.y_min && p.y <= b.y_max;
    if inside {
        (p.x - b.x_min).min(b.x_max - p.x).min(p.y - b.y_min).min(b.y_max - p.y)
    } else {
        let dx = (b.x_min - p.x).max(p.x - b.x_max).max(0.0);
        let dy = (b.y_min - p.y).max(p.y - b.y_max).max(0.0);
        dx.hypot(dy)
    }
}

/// True when the open segment `a -> b` enters the box shrunk by `inset`.
fn segment_enters(a: Point, b: Point, bbox: &BoundingBox, inset: f64) -> bool {
    let r = crate::geom::Rect {
        x_min: bbox.x_min + inset,
        y_min: bbox.y_min + inset,
        x_max: bbox.x_max - inset,
        y_max: bbox.y_max - inset,
    };
    r.x_min < r.x_max && r.y_min < r.y_max && crate::topology::liang_barsky(a, b, &r).is_some_and(|(t0, t1)| t1 > t0)
}

fn validate(spec: &LayoutSpec) -> Result<(), SynthError> {
    let bad = |m: String| Err(SynthError::InfeasibleLayout(m));
    if spec.width == 0 || spec.height == 0 || spec.width > 20_000 || spec.height > 20_000 {
        return bad(format!("canvas {}x{}", spec.width, spec.height));
    }
    if !(spec.stroke > 0.0 && spec.stroke.is_finite()) {
        return bad(format!("stroke {}", spec.stroke));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    for (i, s) in spec.symbols.iter().enumerate() {
        if s.bbox.x_max > w || s.bbox.y_max > h || s.bbox.width() < 4.0 || s.bbox.height() < 4.0 {
            return bad(format!("symbol {i} box {:?} does not fit the canvas", s.bbox.as_array()));
        }
        for (j, t) in spec.symbols.iter().enumerate().skip(i + 1) {
            let gap = spec.stroke * 2.0;
            let sep = (t.bbox.x_min - s.bbox.x_max)
                .max(s.bbox.x_min - t.bbox.x_max)
                .max(t.bbox.y_min - s.bbox.y_max)
                .max(s.bbox.y_min - t.bbox.y_max);
            if sep < gap {
                return bad(format!("symbols {i} and {j} overlap or touch"));
            }
        }
    }
    for (k, p) in spec.pipes.iter().enumerate() {
        if p.points.len() < 2 {
            return bad(format!("pipe {k} has fewer than two points"));
        }
        for pt in &p.points {
            if !(pt.is_finite() && pt.x >= 0.0 && pt.y >= 0.0 && pt.x <= w && pt.y <= h) {
                return bad(format!("pipe {k} point ({}, {}) outside the canvas", pt.x, pt.y));
            }
        }
        if p.points.windows(2).any(|s| s[0].distance(&s[1]) < 1.0) {
            return bad(format!("pipe {k} has a degenerate piece"));
        }
        let ends = [(p.start, p.points[0]), (p.end, *p.points.last().expect("two points"))];
        for (anchor, pt) in ends {
            match anchor {
                Anchor::Free => {}
                Anchor::Symbol(i) => {
                    let Some(s) = spec.symbols.get(i) else {
                        return bad(format!("pipe {k} anchors missing symbol {i}"));
                    };
                    if boundary_distance(pt, &s.bbox) > 1.0 {
                        return bad(format!("pipe {k} end is not on the border of symbol {i}"));
                    }
                }
                Anchor::Pipe(j) => {
                    let Some(q) = spec.pipes.get(j).filter(|_| j != k) else {
                        return bad(format!("pipe {k} anchors invalid pipe {j}"));
                    };
                    if polyline_distance(pt, &q.points) > 1.0 {
                        return bad(format!("pipe {k} end does not lie on pipe {j}"));
                    }
                }
            }
        }
        for (i, s) in spec.symbols.iter().enumerate() {
            if p.points.windows(2).any(|seg| segment_enters(seg[0], seg[1], &s.bbox, 1.0)) {
                return bad(format!("pipe {k} runs through symbol {i}"));
            }
        }
    }
    Ok(())
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connection matrix implied by the anchors of a layout.
pub fn truth_matrix(spec: &LayoutSpec) -> ConnectionMatrix {
    let ids = symbol_ids(spec);
    let mut m = ConnectionMatrix::new(ids);
    let n = spec.pipes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for (k, p) in spec.pipes.iter().enumerate() {
        for a in [p.start, p.end] {
            if let Anchor::Pipe(j) = a {
                if j < n {
                    let (ra, rb) = (find(&mut parent, k), find(&mut parent, j));
                    parent[ra] = rb;
                }
            }
        }
    }
    let mut nets: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for (k, p) in spec.pipes.iter().enumerate() {
        let root = find(&mut parent, k);
        for a in [p.start, p.end] {
            if let Anchor::Symbol(i) = a {
                nets.entry(root).or_default().insert(i);
            }
        }
    }
    for members in nets.values() {
        let v: Vec<usize> = members.iter().copied().collect();
        for (x, &i) in v.iter().enumerate() {
            for &j in &v[x + 1..] {
                m.connect(i, j);
            }
        }
    }
    m
}

fn symbol_ids(spec: &LayoutSpec) -> Vec<String> {
    spec.symbols.iter().enumerate().map(|(i, s)| format!("{}-{}", s.class, i + 1)).collect()
}

/// Drawing primitive in glyph units (`[-1, 1]` square).
enum Prim {
    Poly { pts: Vec<(f64, f64)>, closed: bool },
    Disc { cx: f64, cy: f64, r: f64 },
}

fn circle_pts(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    (0..64)
        .map(|k| {
            let a = k as f64 / 64.0 * std::f64::consts::TAU;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn glyph(class: &str) -> Vec<Prim> {
    let square = Prim::Poly { pts: vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)], closed: true };
    match class {
        "Pump" => vec![
            Prim::Poly { pts: circle_pts(0.0, 0.0, 1.0), closed: true },
            Prim::Poly { pts: vec![(-0.45, -0.6), (0.75, 0.0), (-0.45, 0.6)], closed: true },
        ],
        "Valve" => vec![Prim::Poly { pts: vec![(-1.0, -0.7), (1.0, 0.7), (1.0, -0.7), (-1.0, 0.7)], closed: true }],
        "HeatExchanger" => vec![
            square,
            Prim::Poly {
                pts: vec![(-1.0, 0.0), (-0.6, -0.5), (-0.2, 0.5), (0.2, -0.5), (0.6, 0.5), (1.0, 0.0)],
                closed: false,
            },
        ],
        "Flap" => vec![
            square,
            Prim::Poly { pts: vec![(-1.0, 1.0), (1.0, -1.0)], closed: false },
            Prim::Disc { cx: 0.0, cy: 0.0, r: 0.25 },
        ],
        _ => vec![square, Prim::Poly { pts: vec![(-1.0, 0.0), (1.0, 0.0)], closed: false }],
    }
}

fn ink_capsule(canvas: &mut BinaryImage, a: Point, b: Point, half: f64) {
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    let x0 = (a.x.min(b.x) - half - 1.0).floor().max(0.0) as u32;
    let y0 = (a.y.min(b.y) - half - 1.0).floor().max(0.0) as u32;
    let x1 = (a.x.max(b.x) + half + 1.0).ceil().min(w - 1.0).max(0.0) as u32;
    let y1 = (a.y.max(b.y) + half + 1.0).ceil().min(h - 1.0).max(0.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if point_segment_distance(Point::new(x as f64 + 0.5, y as f64 + 0.5), a, b) <= half {
                canvas.set(x, y, true);
            }
        }
    }
}

fn ink_polygon(canvas: &mut BinaryImage, poly: &[Point]) {
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    let x0 = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let y0 = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let x1 = poly.iter().map(|p| p.x).fold(0.0, f64::max).ceil().min(w - 1.0) as u32;
    let y1 = poly.iter().map(|p| p.y).fold(0.0, f64::max).ceil().min(h - 1.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            for i in 0..poly.len() {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                if (a.y > py) != (b.y > py) && px < a.x + (py - a.y) / (b.y - a.y) * (b.x - a.x) {
                    inside = !inside;
                }
            }
            if inside {
                canvas.set(x, y, true);
            }
        }
    }
}

/// Draws a class glyph inside `bbox`, rotated by `rot_deg` about its centre.
fn draw_glyph(canvas: &mut BinaryImage, class: &str, bbox: &BoundingBox, stroke: f64, rot_deg: f64) {
    let c = bbox.center();
    let half = stroke / 2.0;
    let sx = (bbox.width() / 2.0 - half).max(0.5);
    let sy = (bbox.height() / 2.0 - half).max(0.5);
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    let map = |(u, v): (f64, f64)| {
        let (x, y) = (u * sx, v * sy);
        Point::new(c.x + x * cos - y * sin, c.y + x * sin + y * cos)
    };
    for prim in glyph(class) {
        match prim {
            Prim::Poly { pts, closed } => {
                let pts: Vec<Point> = pts.into_iter().map(map).collect();
                for w in pts.windows(2) {
                    ink_capsule(canvas, w[0], w[1], half);
                }
                if closed {
                    ink_capsule(canvas, *pts.last().expect("non-empty"), pts[0], half);
                }
            }
            Prim::Disc { cx, cy, r } => {
                let pts: Vec<Point> = circle_pts(cx, cy, r).into_iter().map(map).collect();
                ink_polygon(canvas, &pts);
            }
        }
    }
}

/// Binary glyph of `class` at `size` pixels, as used when rendering plans.
pub fn glyph_mask(class: &str, size: u32, stroke: f64) -> BinaryImage {
    let mut m = BinaryImage::new(size, size);
    let bbox = BoundingBox::new(0.0, 0.0, size as f64, size as f64).expect("valid box");
    draw_glyph(&mut m, class, &bbox, stroke, 0.0);
    m
}

/// Built-in template library for the default classes.
pub fn glyph_library(size: u32, stroke: f64) -> Vec<Template> {
    ["Pump", "Valve", "HeatExchanger", "Flap"]
        .iter()
        .map(|c| Template::new(SymbolClass::new(*c), glyph_mask(c, size, stroke)).expect("glyphs have ink"))
        .collect()
}

/// Renders `spec` and derives its ground truth. The seed drives the
/// perturbation only, so an unperturbed render is seed-independent.
pub fn generate_synthetic_plan(
    spec: &LayoutSpec,
    seed: u64,
    perturb: &Perturbation,
) -> Result<SyntheticPlan, SynthError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = BinaryImage::new(spec.width, spec.height);
    for p in &spec.pipes {
        for w in p.points.windows(2) {
            ink_capsule(&mut canvas, w[0], w[1], spec.stroke / 2.0);
        }
    }
    for s in &spec.symbols {
        let rot = if perturb.max_rotation_deg > 0.0 {
            rng.random_range(-perturb.max_rotation_deg..=perturb.max_rotation_deg)
        } else {
            0.0
        };
        let stroke = if perturb.stroke_jitter > 0.0 {
            spec.stroke * (1.0 + rng.random_range(-perturb.stroke_jitter..=perturb.stroke_jitter))
        } else {
            spec.stroke
        };
        draw_glyph(&mut canvas, s.class.as_str(), &s.bbox, stroke, rot);
    }
    let mut pixels: Vec<u8> = canvas.bits().iter().map(|&b| if b { 0 } else { 255 }).collect();
    if perturb.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, perturb.noise_sigma).map_err(|e| SynthError::InfeasibleLayout(format!("noise: {e}")))?;
        for p in &mut pixels {
            *p = (*p as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    let image = PlanImage::new(spec.width, spec.height, pixels, format!("synthetic-{seed}"))
        .map_err(|e| SynthError::InfeasibleLayout(e.to_string()))?;
    let truth_symbols = spec
        .symbols
        .iter()
        .zip(symbol_ids(spec))
        .map(|(s, id)| SymbolDetection { id, class: s.class.clone(), bbox: s.bbox, score: 1.0 })
        .collect();
    Ok(SyntheticPlan { image, truth_symbols, truth_matrix: truth_matrix(spec), layout: spec.clone() })
}

/// Knobs for [`random_layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomLayoutParams {
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub cols: u32,
    pub rows: u32,
    /// Grid pitch, pixels.
    pub cell: f64,
    pub symbol_size: f64,
    pub stroke: f64,
    pub corners: bool,
    pub tees: bool,
    /// Allow straight runs to cross each other without connecting.
    pub crossovers: bool,
}

impl Default for RandomLayoutParams {
    fn default() -> Self {
        Self {
            min_symbols: 2,
            max_symbols: 12,
            cols: 6,
            rows: 5,
            cell: 100.0,
            symbol_size: 30.0,
            stroke: 2.0,
            corners: true,
            tees: true,
            crossovers: false,
        }
    }
}

type Node = (i32, i32);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cell {
    Free,
    Symbol(usize),
    /// Passed straight through; `horizontal` gives the direction.
    Through {
        horizontal: bool,
        crossed: bool,
    },
    Junction,
}

#[derive(Clone)]
struct Grid {
    cols: i32,
    rows: i32,
    cells: Vec<Cell>,
    edges: HashSet<(Node, Node)>,
    symbols: Vec<(Node, SymbolClass)>,
    pipes: Vec<(Vec<Node>, Anchor, Anchor, Vec<Point>)>,
}

const DIRS: [Node; 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const CLASSES: [&str; 4] = ["Pump", "Valve", "HeatExchanger", "Flap"];

impl Grid {
    fn cell(&self, n: Node) -> Cell {
        self.cells[(n.1 * self.cols + n.0) as usize]
    }

    fn set(&mut self, n: Node, c: Cell) {
        self.cells[(n.1 * self.cols + n.0) as usize] = c;
    }

    fn inside(&self, n: Node) -> bool {
        n.0 >= 0 && n.1 >= 0 && n.0 < self.cols && n.1 < self.rows
    }

    fn edge_key(a: Node, b: Node) -> (Node, Node) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Walks `steps` cells from `from`; intermediate cells become
    /// pass-through. Returns the final cell.
    fn arm(&mut self, from: Node, d: Node, steps: i32, crossovers: bool) -> Option<Node> {
        let mut cur = from;
        for k in 1..=steps {
            let next = (cur.0 + d.0, cur.1 + d.1);
            if !self.inside(next) || !self.edges.insert(Self::edge_key(cur, next)) {
                return None;
            }
            if k < steps {
                let horizontal = d.1 == 0;
                match self.cell(next) {
                    Cell::Free => self.set(next, Cell::Through { horizontal, crossed: false }),
                    Cell::Through { horizontal: h, crossed: false } if crossovers && h != horizontal => {
                        self.set(next, Cell::Through { horizontal: h, crossed: true })
                    }
                    _ => return None,
                }
            }
            cur = next;
        }
        Some(cur)
    }

    /// Resolves an arm's final cell to a symbol, placing one if free.
    fn terminal(&mut self, n: Node, budget: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        match self.cell(n) {
            Cell::Symbol(i) => Some(i),
            Cell::Free if self.symbols.len() < budget => {
                let i = self.symbols.len();
                self.symbols.push((n, SymbolClass::new(CLASSES[rng.random_range(0..4)])));
                self.set(n, Cell::Symbol(i));
                Some(i)
            }
            _ => None,
        }
    }

    fn random_node(&self, rng: &mut ChaCha8Rng) -> Node {
        (rng.random_range(0..self.cols), rng.random_range(0..self.rows))
    }

    /// A start symbol: an existing one or a new one on a free cell.
    fn start(&mut self, budget: usize, rng: &mut ChaCha8Rng) -> Option<(Node, usize)> {
        if !self.symbols.is_empty() && rng.random_bool(0.6) {
            let i = rng.random_range(0..self.symbols.len());
            return Some((self.symbols[i].0, i));
        }
        let n = self.random_node(rng);
        self.terminal(n, budget, rng).map(|i| (n, i))
    }
}

/// Random grid layout of straight runs, corners and (optionally) tees and
/// crossovers. Every grid edge and every junction cell is used by at most
/// one pipe network, so distinct networks never touch.
pub fn random_layout(seed: u64, params: &RandomLayoutParams) -> LayoutSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = params.min_symbols.max(2);
    let hi = params.max_symbols.max(lo);
    let target = rng.random_range(lo..=hi).min((params.cols * params.rows) as usize);
    let empty = Grid {
        cols: params.cols as i32,
        rows: params.rows as i32,
        cells: vec![Cell::Free; (params.cols * params.rows) as usize],
        edges: HashSet::new(),
        symbols: Vec::new(),
        pipes: Vec::new(),
    };
    let mut grid = empty.clone();
    for _ in 0..2000 {
        if grid.symbols.len() >= target && grid.pipes.len() >= grid.symbols.len() / 2 {
            break;
        }
        let mut g = grid.clone();
        let kinds = 1 + params.corners as u32 + params.tees as u32;
        let ok = match rng.random_range(0..kinds) {
            0 => add_straight(&mut g, target, params, &mut rng),
            1 if params.corners => add_corner(&mut g, target, params, &mut rng),
            _ => add_tee(&mut g, target, params, &mut rng),
        };
        if ok.is_some() {
            grid = g;
        }
    }
    if grid.pipes.is_empty() {
        // always yield at least one connection
        let mut g = empty;
        g.symbols.push(((0, 0), SymbolClass::pump()));
        g.symbols.push(((1, 0), SymbolClass::valve()));
        g.pipes.push((vec![(0, 0), (1, 0)], Anchor::Symbol(0), Anchor::Symbol(1), Vec::new()));
        grid = g;
    }
    to_layout(&grid, params)
}

fn port(params: &RandomLayoutParams, n: Node, d: Node) -> Point {
    let c = node_centre(params, n);
    let h = params.symbol_size / 2.0;
    Point::new(c.x + d.0 as f64 * h, c.y + d.1 as f64 * h)
}

fn node_centre(params: &RandomLayoutParams, n: Node) -> Point {
    Point::new((n.0 as f64 + 0.5) * params.cell, (n.1 as f64 + 0.5) * params.cell)
}

fn add_straight(g: &mut Grid, budget: usize, p: &RandomLayoutParams, rng: &mut ChaCha8Rng) -> Option<()> {
    let (s, si) = g.start(budget, rng)?;
    let d = DIRS[rng.random_range(0..4)];
    let end = g.arm(s, d, rng.random_range(1..=3), p.crossovers)?;
    let ei = g.terminal(end, budget, rng)?;
    let pts = vec![port(p, s, d), port(p, end, (-d.0, -d.1))];
    g.pipes.push((vec![s, end], Anchor::Symbol(si), Anchor::Symbol(ei), pts));
    Some(())
}

fn add_corner(g: &mut Grid, budget: usize, p: &RandomLayoutParams, rng: &mut ChaCha8Rng) -> Option<()> {
    let (s, si) = g.start(budget, rng)?;
    let d1 = DIRS[rng.random_range(0..4)];
    let corner = g.arm(s, d1, rng.random_range(1..=2), p.crossovers)?;
    if g.cell(corner) != Cell::Free {
        return None;
    }
    g.set(corner, Cell::Junction);
    let d2 = if rng.random_bool(0.5) { (d1.1, d1.0) } else { (-d1.1, -d1.0) };
    let end = g.arm(corner, d2, rng.random_range(1..=2), p.crossovers)?;
    let ei = g.terminal(end, budget, rng)?;
    let pts = vec![port(p, s, d1), node_centre(p, corner), port(p, end, (-d2.0, -d2.1))];
    g.pipes.push((vec![s, corner, end], Anchor::Symbol(si), Anchor::Symbol(ei), pts));
    Some(())
}

fn add_tee(g: &mut Grid, budget: usize, p: &RandomLayoutParams, rng: &mut ChaCha8Rng) -> Option<()> {
    let j = g.random_node(rng);
    if g.cell(j) != Cell::Free {
        return None;
    }
    g.set(j, Cell::Junction);
    let missing = rng.random_range(0..4);
    let mut arms = Vec::new();
    for k in 0..4 {
        if k == missing {
            continue;
        }
        let d = DIRS[k];
        let end = g.arm(j, d, rng.random_range(1..=2), p.crossovers)?;
        let i = g.terminal(end, budget, rng)?;
        arms.push((k, d, end, i));
    }
    // the two arms opposite each other form the bar, the third is the stem
    let stem_k = (missing + 2) % 4;
    let stem = *arms.iter().find(|a| a.0 == stem_k).expect("three arms");
    let bar: Vec<_> = arms.iter().filter(|a| a.0 != stem_k).copied().collect();
    let bar_idx = g.pipes.len();
    let (a, b) = (bar[0], bar[1]);
    g.pipes.push((
        vec![a.2, j, b.2],
        Anchor::Symbol(a.3),
        Anchor::Symbol(b.3),
        vec![port(p, a.2, (-a.1 .0, -a.1 .1)), port(p, b.2, (-b.1 .0, -b.1 .1))],
    ));
    g.pipes.push((
        vec![stem.2, j],
        Anchor::Symbol(stem.3),
        Anchor::Pipe(bar_idx),
        vec![port(p, stem.2, (-stem.1 .0, -stem.1 .1)), node_centre(p, j)],
    ));
    Some(())
}

fn to_layout(g: &Grid, p: &RandomLayoutParams) -> LayoutSpec {
    let h = p.symbol_size / 2.0;
    let symbols = g
        .symbols
        .iter()
        .map(|(n, class)| {
            let c = node_centre(p, *n);
            SymbolSpec {
                class: class.clone(),
                bbox: BoundingBox::new(c.x - h, c.y - h, c.x + h, c.y + h).expect("inside grid"),
            }
        })
        .collect();
    let pipes =
        g.pipes.iter().map(|(_, start, end, pts)| PipeSpec { points: pts.clone(), start: *start, end: *end }).collect();
    LayoutSpec {
        width: (p.cols as f64 * p.cell) as u32,
        height: (p.rows as f64 * p.cell) as u32,
        stroke: p.stroke,
        symbols,
        pipes,
    }
}

/// Valve-1 above and Valve-2 below a vertical pipe, Pump-4 off a tee to the
/// right, Flap-3 below Valve-2.
pub fn pump_tee_layout() -> LayoutSpec {
    let b = |x0: f64, y0: f64, x1: f64, y1: f64| BoundingBox::new(x0, y0, x1, y1).expect("valid box");
    let sym = |class: SymbolClass, bbox| SymbolSpec { class, bbox };
    LayoutSpec {
        width: 400,
        height: 420,
        stroke: 2.0,
        symbols: vec![
            sym(SymbolClass::valve(), b(85.0, 30.0, 115.0, 60.0)),
            sym(SymbolClass::valve(), b(85.0, 240.0, 115.0, 270.0)),
            sym(SymbolClass::flap(), b(85.0, 340.0, 115.0, 370.0)),
            sym(SymbolClass::pump(), b(280.0, 135.0, 310.0, 165.0)),
        ],
        pipes: vec![
            PipeSpec {
                points: vec![Point::new(100.0, 60.0), Point::new(100.0, 240.0)],
                start: Anchor::Symbol(0),
                end: Anchor::Symbol(1),
            },
            PipeSpec {
                points: vec![Point::new(280.0, 150.0), Point::new(100.0, 150.0)],
                start: Anchor::Symbol(3),
                end: Anchor::Pipe(0),
            },
            PipeSpec {
                points: vec![Point::new(100.0, 270.0), Point::new(100.0, 340.0)],
                start: Anchor::Symbol(1),
                end: Anchor::Symbol(2),
            },
        ],
    }
}

/// Two symbols joined by one straight pipe.
pub fn minimal_layout() -> LayoutSpec {
    LayoutSpec {
        width: 200,
        height: 100,
        stroke: 2.0,
        symbols: vec![
            SymbolSpec { class: SymbolClass::pump(), bbox: BoundingBox::new(20.0, 35.0, 50.0, 65.0).expect("valid") },
            SymbolSpec {
                class: SymbolClass::valve(),
                bbox: BoundingBox::new(150.0, 35.0, 180.0, 65.0).expect("valid"),
            },
        ],
        pipes: vec![PipeSpec {
            points: vec![Point::new(50.0, 50.0), Point::new(150.0, 50.0)],
            start: Anchor::Symbol(0),
            end: Anchor::Symbol(1),
        }],
    }
}

/// A plan of `k` isolated straight strokes (horizontal, vertical or
/// diagonal) and their true endpoints. Strokes are at least 5 px apart, and
/// collinear strokes are kept far enough apart that they are not one line.
pub fn random_line_plan(seed: u64, k: usize) -> (PlanImage, Vec<(Point, Point)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (400u32, 400u32);
    let stroke = if seed % 2 == 0 { 1.0 } else { 2.0 };
    // 1 px strokes sit on pixel centres, 2 px strokes on pixel corners
    let off = if stroke == 1.0 { 0.5 } else { 0.0 };
    let mut lines: Vec<(Point, Point)> = Vec::new();
    let mut attempts = 0;
    while lines.len() < k && attempts < 10_000 {
        attempts += 1;
        let dir = [(1, 0), (0, 1), (1, 1), (1, -1)][rng.random_range(0..4)];
        // a 45° line has one pixel per major step, so it needs ~√2 more
        // length than an axis line to reach the same vote count
        let diagonal = dir.0 != 0 && dir.1 != 0;
        let len = rng.random_range(if diagonal { 45..=200 } else { 30..=200 }) as f64;
        let (dx, dy) = if diagonal {
            (dir.0 as f64 * len / 2f64.sqrt(), dir.1 as f64 * len / 2f64.sqrt())
        } else {
            (dir.0 as f64 * len, dir.1 as f64 * len)
        };
        let (dx, dy) = (dx.round(), dy.round());
        let x0 = rng.random_range(10..(w as i32 - 10)) as f64 + off;
        let y0 = rng.random_range(10..(h as i32 - 10)) as f64 + off;
        let (a, b) = (Point::new(x0, y0), Point::new(x0 + dx, y0 + dy));
        let margin = 10.0;
        if [a, b].iter().any(|p| p.x < margin || p.y < margin || p.x > w as f64 - margin || p.y > h as f64 - margin) {
            continue;
        }
        let clear = lines.iter().all(|&(c, d)| {
            let dist = segment_distance(a, b, c, d);
            let parallel = {
                let (ux, uy) = (b.x - a.x, b.y - a.y);
                let (vx, vy) = (d.x - c.x, d.y - c.y);
                (ux * vy - uy * vx).abs() < 1e-9 * (ux.hypot(uy) * vx.hypot(vy))
            };
            let offset = point_line_distance(c, a, b);
            if parallel && offset <= 4.0 {
                dist >= 20.0
            } else {
                dist >= 5.0 + stroke
            }
        });
        if clear {
            lines.push((a, b));
        }
    }
    let mut canvas = BinaryImage::new(w, h);
    for &(a, b) in &lines {
        ink_capsule(&mut canvas, a, b, stroke / 2.0);
    }
    let pixels = canvas.bits().iter().map(|&b| if b { 0 } else { 255 }).collect();
    (PlanImage::new(w, h, pixels, format!("lines-{seed}")).expect("positive size"), lines)
}

fn point_line_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / dx.hypot(dy)
}

fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let cross = |o: Point, p: Point, q: Point| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    let (d1, d2, d3, d4) = (cross(a, b, c), cross(a, b, d), cross(c, d, a), cross(c, d, b));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}
