//! Connection derivation: attach lines to symbols, then walk along lines to
//! the nearest plan elements, expanding through crossings.
//!
//! At a connective crossing (corner or tee) the walk continues along every
//! departing ray except the one it arrived on. At a non-connective crossing
//! (crossover) it continues straight ahead only, so the crossing pipe is
//! never entered.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::crossings::LineCrossing;
use crate::detect::{SymbolClass, SymbolDetection};
use crate::geom::{BoundingBox, Point, Rect};
use crate::lines::LineSegment;

/// Symmetric boolean adjacency over the symbols of one plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionMatrix {
    symbol_ids: Vec<String>,
    cells: Vec<bool>,
}

impl ConnectionMatrix {
    pub fn new(symbol_ids: Vec<String>) -> Self {
        let n = symbol_ids.len();
        Self { symbol_ids, cells: vec![false; n * n] }
    }

    /// Builds a matrix from an edge list over `symbol_ids`. Unknown ids and
    /// self-loops are rejected.
    pub fn from_edges<S: AsRef<str>>(symbol_ids: Vec<String>, edges: &[(S, S)]) -> Result<Self, String> {
        let mut m = Self::new(symbol_ids);
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            let i = m.index_of(a).ok_or_else(|| format!("unknown symbol {a:?}"))?;
            let j = m.index_of(b).ok_or_else(|| format!("unknown symbol {b:?}"))?;
            if i == j {
                return Err(format!("self connection on {a:?}"));
            }
            m.connect(i, j);
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.symbol_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbol_ids.is_empty()
    }

    pub fn symbol_ids(&self) -> &[String] {
        &self.symbol_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.symbol_ids.iter().position(|s| s == id)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.len() + j]
    }

    /// Sets both `(i, j)` and `(j, i)`; the diagonal is left untouched.
    pub fn connect(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        let n = self.len();
        self.cells[i * n + j] = true;
        self.cells[j * n + i] = true;
    }

    pub fn connected(&self, a: &str, b: &str) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.get(i, j),
            _ => false,
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Self::new(self.symbol_ids.clone());
        for i in 0..n {
            for j in 0..n {
                t.cells[j * n + i] = self.cells[i * n + j];
            }
        }
        t
    }

    pub fn is_symmetric(&self) -> bool {
        *self == self.transpose()
    }

    /// Upper-triangle true cells as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }
}

/// The objects a walk can stop at.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanElement {
    Symbol(SymbolDetection),
    Crossing(LineCrossing),
}

impl PlanElement {
    pub fn id(&self) -> &str {
        match self {
            PlanElement::Symbol(s) => &s.id,
            PlanElement::Crossing(c) => &c.id,
        }
    }
}

/// Liang-Barsky clip of the segment `a -> b` against a closed rectangle.
/// Returns the parameter interval `[t0, t1] ⊆ [0, 1]` inside the rectangle.
pub fn liang_barsky(a: Point, b: Point, r: &Rect) -> Option<(f64, f64)> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [(-dx, a.x - r.x_min), (dx, r.x_max - a.x), (-dy, a.y - r.y_min), (dy, r.y_max - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

/// Portion of `line` inside the inflated symbol box, in pixels from `p1`.
fn symbol_interval(sym: &SymbolDetection, line: &LineSegment, inflate: f64) -> Option<(f64, f64)> {
    liang_barsky(line.p1, line.p2, &sym.bbox.inflated(inflate)).map(|(t0, t1)| (t0 * line.length, t1 * line.length))
}

/// Segments that touch the symbol box grown by `inflate`.
pub fn lines_through_symbol<'a>(sym: &SymbolDetection, segs: &'a [LineSegment], inflate: f64) -> Vec<&'a LineSegment> {
    segs.iter().filter(|s| symbol_interval(sym, s, inflate).is_some()).collect()
}

fn element_interval(e: &PlanElement, line: &LineSegment, inflate: f64) -> Option<(f64, f64)> {
    match e {
        PlanElement::Symbol(s) => symbol_interval(s, line, inflate),
        PlanElement::Crossing(c) => {
            if c.incident.iter().any(|l| *l == line.id) {
                let t = line.project(c.at);
                Some((t, t))
            } else {
                None
            }
        }
    }
}

const TIE: f64 = 1e-9;

/// Splits `(index, interval)` candidates around `origin` into the nearest
/// ones ahead (towards `p2`) and behind. Equidistant candidates are all kept.
fn nearest_around(origin: (f64, f64), candidates: &[(usize, (f64, f64))]) -> (Vec<usize>, Vec<usize>) {
    let (o0, o1) = origin;
    let mid_o = 0.5 * (o0 + o1);
    let mut ahead: Vec<(f64, usize)> = Vec::new();
    let mut behind: Vec<(f64, usize)> = Vec::new();
    for &(idx, (a, b)) in candidates {
        if a > o1 {
            ahead.push((a - o1, idx));
        } else if b < o0 {
            behind.push((o0 - b, idx));
        } else if 0.5 * (a + b) >= mid_o {
            ahead.push((0.0, idx));
        } else {
            behind.push((0.0, idx));
        }
    }
    let pick = |v: Vec<(f64, usize)>| {
        let best = v.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        let mut out: Vec<usize> = v.into_iter().filter(|x| x.0 <= best + TIE).map(|x| x.1).collect();
        out.sort_unstable();
        out
    };
    (pick(ahead), pick(behind))
}

/// The closest elements on `line` on either side of `sym`, measured from the
/// edge of the inflated symbol box. At most one element per side unless
/// several are exactly equidistant.
pub fn nearest_elements<'a>(
    sym: &SymbolDetection,
    line: &LineSegment,
    elements: &'a [PlanElement],
    inflate: f64,
) -> Vec<&'a PlanElement> {
    let Some(origin) = symbol_interval(sym, line, inflate) else {
        return Vec::new();
    };
    let candidates: Vec<(usize, (f64, f64))> = elements
        .iter()
        .enumerate()
        .filter(|(_, e)| e.id() != sym.id)
        .filter_map(|(i, e)| element_interval(e, line, inflate).map(|iv| (i, iv)))
        .collect();
    let (ahead, behind) = nearest_around(origin, &candidates);
    ahead.into_iter().chain(behind).map(|i| &elements[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveParams {
    /// Symbol box growth when attaching lines, pixels.
    pub inflate: f64,
    /// Direction tolerance when matching rays at a crossing, degrees.
    pub angle_tol: f64,
}

impl Default for DeriveParams {
    fn default() -> Self {
        Self { inflate: 3.0, angle_tol: 10.0 }
    }
}

fn angle_close(a: f64, b: f64, tol: f64) -> bool {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d) <= tol
}

/// Precomputed positions of every element along every line.
struct LineIndex<'a> {
    segs: &'a [LineSegment],
    by_id: HashMap<&'a str, usize>,
    /// per line: `(element index, interval)`; symbols first, then crossings
    on_line: Vec<Vec<(usize, (f64, f64))>>,
}

impl<'a> LineIndex<'a> {
    fn new(elements: &[PlanElement], segs: &'a [LineSegment], inflate: f64) -> Self {
        let by_id = segs.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let on_line = segs
            .iter()
            .map(|l| {
                elements
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| element_interval(e, l, inflate).map(|iv| (i, iv)))
                    .collect()
            })
            .collect();
        Self { segs, by_id, on_line }
    }

    /// Nearest elements from `origin` on line `l` in one sense, excluding
    /// element `from`.
    fn step(&self, l: usize, origin: (f64, f64), towards_p2: bool, from: usize) -> Vec<usize> {
        let cands: Vec<(usize, (f64, f64))> = self.on_line[l].iter().copied().filter(|(i, _)| *i != from).collect();
        let (ahead, behind) = nearest_around(origin, &cands);
        if towards_p2 {
            ahead
        } else {
            behind
        }
    }

    fn forward_angle(&self, l: usize) -> f64 {
        let (dx, dy) = self.segs[l].direction();
        dy.atan2(dx).to_degrees().rem_euclid(360.0)
    }
}

/// Symbols reachable from symbol element `start` by walking its lines.
fn walk_from(start: usize, elements: &[PlanElement], index: &LineIndex<'_>, params: &DeriveParams) -> BTreeSet<usize> {
    let mut reached = BTreeSet::new();
    // (crossing element, line, sense) rays already followed
    let mut visited: HashSet<(usize, usize, bool)> = HashSet::new();
    // (crossing element, direction of travel on arrival)
    let mut frontier: Vec<(usize, f64)> = Vec::new();

    let handle = |found: Vec<usize>, travel: f64, reached: &mut BTreeSet<usize>, frontier: &mut Vec<(usize, f64)>| {
        for e in found {
            match &elements[e] {
                PlanElement::Symbol(_) => {
                    if e != start {
                        reached.insert(e);
                    }
                }
                PlanElement::Crossing(_) => frontier.push((e, travel)),
            }
        }
    };

    for (l, list) in index.on_line.iter().enumerate() {
        let Some(&(_, origin)) = list.iter().find(|(i, _)| *i == start) else { continue };
        for towards_p2 in [true, false] {
            let found = index.step(l, origin, towards_p2, start);
            let fwd = index.forward_angle(l);
            let travel = if towards_p2 { fwd } else { (fwd + 180.0).rem_euclid(360.0) };
            handle(found, travel, &mut reached, &mut frontier);
        }
    }

    while let Some((c, travel)) = frontier.pop() {
        let PlanElement::Crossing(crossing) = &elements[c] else { continue };
        let back = (travel + 180.0).rem_euclid(360.0);
        for ray in &crossing.rays {
            let follow = if crossing.connective {
                !angle_close(ray.angle_deg, back, params.angle_tol)
            } else {
                angle_close(ray.angle_deg, travel, params.angle_tol)
            };
            if !follow {
                continue;
            }
            let Some(&l) = index.by_id.get(ray.line.as_str()) else { continue };
            if !visited.insert((c, l, ray.towards_p2)) {
                continue;
            }
            let t = index.segs[l].project(crossing.at);
            let found = index.step(l, (t, t), ray.towards_p2, c);
            log::trace!(
                "{}: via {} along {} -> {:?}",
                elements[start].id(),
                crossing.id,
                ray.line,
                found.iter().map(|&e| elements[e].id()).collect::<Vec<_>>()
            );
            handle(found, ray.angle_deg, &mut reached, &mut frontier);
        }
    }
    reached
}

/// Derives the symbol connection matrix from symbols, segments and
/// crossings, all in plan coordinates.
pub fn derive_connections(
    symbols: &[SymbolDetection],
    segs: &[LineSegment],
    crossings: &[LineCrossing],
    params: &DeriveParams,
) -> ConnectionMatrix {
    let mut m = ConnectionMatrix::new(symbols.iter().map(|s| s.id.clone()).collect());
    let elements: Vec<PlanElement> = symbols
        .iter()
        .cloned()
        .map(PlanElement::Symbol)
        .chain(crossings.iter().cloned().map(PlanElement::Crossing))
        .collect();
    let index = LineIndex::new(&elements, segs, params.inflate);
    for i in 0..symbols.len() {
        for j in walk_from(i, &elements, &index, params) {
            m.connect(i, j);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: String,
    pub class: SymbolClass,
    pub bbox: BoundingBox,
}

/// Exportable equipment graph of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyGraph {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub plan: String,
    /// Hash of the pipeline configuration that produced the graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(String, String)>,
}

impl TopologyGraph {
    /// Checks that edges reference existing nodes, with no self-loops or
    /// duplicates, and that node ids are unique.
    pub fn validate(&self) -> Result<(), String> {
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(format!("duplicate node {:?}", n.id));
            }
        }
        let mut seen = HashSet::new();
        for (a, b) in &self.edges {
            if !ids.contains(a.as_str()) || !ids.contains(b.as_str()) {
                return Err(format!("edge {a:?}-{b:?} references a missing node"));
            }
            if a == b {
                return Err(format!("self-loop on {a:?}"));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if !seen.insert(key) {
                return Err(format!("duplicate edge {a:?}-{b:?}"));
            }
        }
        Ok(())
    }

    /// Adjacency over the graph's nodes, in node order.
    pub fn to_matrix(&self) -> Result<ConnectionMatrix, String> {
        self.validate()?;
        ConnectionMatrix::from_edges(self.nodes.iter().map(|n| n.id.clone()).collect(), &self.edges)
    }
}

/// One node per symbol (in matrix order) and one edge per connected pair,
/// with edges normalized to `(smaller id, larger id)` and sorted.
pub fn matrix_to_graph(m: &ConnectionMatrix, symbols: &[SymbolDetection], plan: &str) -> Result<TopologyGraph, String> {
    let by_id: HashMap<&str, &SymbolDetection> = symbols.iter().map(|s| (s.id.as_str(), s)).collect();
    let nodes = m
        .symbol_ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| GraphNode { id: s.id.clone(), class: s.class.clone(), bbox: s.bbox })
                .ok_or_else(|| format!("matrix symbol {id:?} has no detection"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut edges: Vec<(String, String)> = m
        .edges()
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&m.symbol_ids()[i], &m.symbol_ids()[j]);
            if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            }
        })
        .collect();
    edges.sort();
    let g = TopologyGraph { plan: plan.to_string(), config_hash: None, nodes, edges };
    g.validate()?;
    Ok(g)
}
