//! Line extraction: Otsu binarization, symbol masking, a segment-producing
//! Hough transform and collinear fragment merging.
//!
//! Pixel `(x, y)` is treated as the unit square `[x, x+1) x [y, y+1)`; segment
//! endpoints refer to pixel centres, i.e. `(x + 0.5, y + 0.5)`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::detect::SymbolDetection;
use crate::geom::Point;
use crate::plan::PlanImage;

/// Foreground/background raster. `true` marks ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> BinaryImage {
        BinaryImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Ink pixels in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Returns `t` such that intensities `< t` form the dark class, or `None` when
/// the histogram holds fewer than two distinct intensities. When several
/// thresholds reach the maximal between-class variance (an empty band between
/// two modes) the middle of the first such band is returned.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    let mut best = -1.0f64;
    let mut band: Option<(usize, usize)> = None;
    let mut band_open = false;
    for t in 1..256usize {
        n0 += hist[t - 1];
        s0 += (t as u128 - 1) * hist[t - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            band_open = false;
            continue;
        }
        // N^2 times the between-class variance; the numerator is exact in
        // integers and invariant under a constant intensity shift.
        let d = s0 as i128 * total as i128 - sum as i128 * n0 as i128;
        let score = (d as f64) * (d as f64) / (n0 as f64 * n1 as f64);
        if score > best {
            best = score;
            band = Some((t, t));
            band_open = true;
        } else if score == best && band_open {
            if let Some((_, hi)) = band.as_mut() {
                *hi = t;
            }
        } else {
            band_open = false;
        }
    }
    band.map(|(lo, hi)| ((lo + hi) / 2) as u8)
}

/// Global Otsu binarization; dark pixels become foreground. A histogram with
/// a single intensity carries no ink contrast and yields an all-background
/// image.
pub fn binarize(plan: &PlanImage) -> BinaryImage {
    let mut hist = [0u64; 256];
    for &p in plan.pixels() {
        hist[p as usize] += 1;
    }
    let Some(t) = otsu_threshold(&hist) else {
        log::debug!("degenerate histogram for {}, no foreground", plan.source_id());
        return BinaryImage::new(plan.width(), plan.height());
    };
    BinaryImage { width: plan.width(), height: plan.height(), bits: plan.pixels().iter().map(|&p| p < t).collect() }
}

/// Clears every pixel whose centre lies inside a symbol box grown by
/// `inflate` pixels.
pub fn mask_symbols(bin: &BinaryImage, symbols: &[SymbolDetection], inflate: f64) -> BinaryImage {
    let mut out = bin.clone();
    if bin.width == 0 || bin.height == 0 {
        return out;
    }
    for s in symbols {
        let r = s.bbox.inflated(inflate);
        // pixels whose centres lie in the closed inflated box
        let x0 = (r.x_min - 0.5).ceil().max(0.0);
        let y0 = (r.y_min - 0.5).ceil().max(0.0);
        let x1 = (r.x_max - 0.5).floor().min(bin.width as f64 - 1.0);
        let y1 = (r.y_max - 0.5).floor().min(bin.height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as u32..=y1 as u32 {
            for x in x0 as u32..=x1 as u32 {
                out.set(x, y, false);
            }
        }
    }
    out
}

/// A straight, finite connection line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub id: String,
    pub p1: Point,
    pub p2: Point,
    /// Direction angle in `[0, 180)`, measured from the +x axis towards +y.
    pub angle_deg: f64,
    pub length: f64,
}

impl LineSegment {
    /// Builds a segment with endpoints in canonical (lexicographic) order.
    /// Returns `None` for zero-length or non-finite input.
    pub fn new(id: impl Into<String>, a: Point, b: Point) -> Option<Self> {
        if !a.is_finite() || !b.is_finite() {
            return None;
        }
        let (p1, p2) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
        let length = p1.distance(&p2);
        if length <= 0.0 {
            return None;
        }
        let mut angle = (p2.y - p1.y).atan2(p2.x - p1.x).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        if angle >= 180.0 {
            angle -= 180.0;
        }
        Some(Self { id: id.into(), p1, p2, angle_deg: angle, length })
    }

    /// Unit direction from `p1` to `p2`.
    pub fn direction(&self) -> (f64, f64) {
        ((self.p2.x - self.p1.x) / self.length, (self.p2.y - self.p1.y) / self.length)
    }

    /// Signed position of the orthogonal projection of `p`, in pixels from `p1`.
    pub fn project(&self, p: Point) -> f64 {
        let (dx, dy) = self.direction();
        (p.x - self.p1.x) * dx + (p.y - self.p1.y) * dy
    }

    pub fn point_at(&self, t: f64) -> Point {
        let (dx, dy) = self.direction();
        Point::new(self.p1.x + t * dx, self.p1.y + t * dy)
    }

    /// Distance from `p` to the infinite supporting line.
    pub fn line_distance(&self, p: Point) -> f64 {
        let (dx, dy) = self.direction();
        ((p.x - self.p1.x) * dy - (p.y - self.p1.y) * dx).abs()
    }

    /// Distance from `p` to the segment itself.
    pub fn distance(&self, p: Point) -> f64 {
        let t = self.project(p).clamp(0.0, self.length);
        self.point_at(t).distance(&p)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> LineSegment {
        LineSegment::new(self.id.clone(), self.p1.translate(dx, dy), self.p2.translate(dx, dy))
            .expect("translation preserves length")
    }

    fn sort_key(&self) -> [f64; 4] {
        [self.p1.x, self.p1.y, self.p2.x, self.p2.y]
    }
}

fn cmp_keys(a: &[f64; 4], b: &[f64; 4]) -> std::cmp::Ordering {
    a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Sorts segments geometrically and names them `Line-1`, `Line-2`, ...
pub fn assign_line_ids(segs: &mut [LineSegment]) {
    segs.sort_by(|a, b| cmp_keys(&a.sort_key(), &b.sort_key()));
    for (i, s) in segs.iter_mut().enumerate() {
        s.id = format!("Line-{}", i + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoughParams {
    /// Distance resolution of the accumulator, pixels.
    pub rho_res: f64,
    /// Angular resolution of the accumulator, degrees.
    pub theta_res: f64,
    /// Minimum accumulator votes for a line hypothesis.
    pub votes: u32,
    /// Shortest segment reported, pixels.
    pub min_len: f64,
    /// Longest run of missing pixels bridged inside one segment.
    pub max_gap: u32,
}

impl Default for HoughParams {
    fn default() -> Self {
        Self { rho_res: 1.0, theta_res: 1.0, votes: 30, min_len: 20.0, max_gap: 5 }
    }
}

impl HoughParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rho_res > 0.0 && self.rho_res.is_finite()) {
            return Err(format!("rho_res must be > 0, got {}", self.rho_res));
        }
        if !(self.theta_res > 0.0 && self.theta_res <= 90.0) {
            return Err(format!("theta_res must be in (0, 90], got {}", self.theta_res));
        }
        if self.votes < 2 {
            return Err(format!("votes must be >= 2, got {}", self.votes));
        }
        if !(self.min_len > 0.0 && self.min_len.is_finite()) {
            return Err(format!("min_len must be > 0, got {}", self.min_len));
        }
        Ok(())
    }
}

struct Accumulator {
    cos: Vec<f64>,
    sin: Vec<f64>,
    n_rho: usize,
    rho_offset: i64,
    rho_res: f64,
    votes: Vec<u32>,
}

impl Accumulator {
    fn new(width: u32, height: u32, p: &HoughParams) -> Self {
        let n_theta = ((180.0 / p.theta_res).round() as usize).max(1);
        let step = 180.0 / n_theta as f64;
        let (sin, cos): (Vec<f64>, Vec<f64>) = (0..n_theta).map(|k| (k as f64 * step).to_radians().sin_cos()).unzip();
        let diag = (width as f64).hypot(height as f64);
        let rho_offset = (diag / p.rho_res).ceil() as i64 + 1;
        let n_rho = 2 * rho_offset as usize + 1;
        Self { cos, sin, n_rho, rho_offset, rho_res: p.rho_res, votes: vec![0; n_theta * n_rho] }
    }

    #[inline]
    fn rho_bin(&self, k: usize, x: f64, y: f64) -> usize {
        let rho = x * self.cos[k] + y * self.sin[k];
        ((rho / self.rho_res).round() as i64 + self.rho_offset) as usize
    }

    fn add(&mut self, px: u32, py: u32, up: bool) {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        for k in 0..self.cos.len() {
            let idx = k * self.n_rho + self.rho_bin(k, x, y);
            if up {
                self.votes[idx] += 1;
            } else {
                self.votes[idx] -= 1;
            }
        }
    }

    fn line(&self, idx: usize) -> (f64, f64, f64) {
        let k = idx / self.n_rho;
        let r = (idx % self.n_rho) as i64 - self.rho_offset;
        (self.cos[k], self.sin[k], r as f64 * self.rho_res)
    }
}

/// Walks a line across the image one pixel at a time along its major axis.
struct LineWalk {
    /// Normal `(cos, sin)` and offset `rho`: points satisfy `x cos + y sin = rho`.
    cos: f64,
    sin: f64,
    rho: f64,
    x_major: bool,
}

impl LineWalk {
    fn new(cos: f64, sin: f64, rho: f64) -> Self {
        // direction is (-sin, cos)
        Self { cos, sin, rho, x_major: sin.abs() >= cos.abs() }
    }

    fn steps(&self, width: u32, height: u32) -> u32 {
        if self.x_major {
            width
        } else {
            height
        }
    }

    /// Continuous position of the line at major index `m`.
    fn at(&self, m: u32) -> Point {
        let c = m as f64 + 0.5;
        if self.x_major {
            Point::new(c, (self.rho - c * self.cos) / self.sin)
        } else {
            Point::new((self.rho - c * self.sin) / self.cos, c)
        }
    }

    /// Pixel indices along the minor axis whose centres lie within `tol` of
    /// the line at major index `m`.
    fn minor_range(&self, m: u32, tol: f64, limit: u32) -> std::ops::RangeInclusive<i64> {
        let p = self.at(m);
        let c = if self.x_major { p.y } else { p.x };
        let lo = ((c - tol - 0.5).ceil() as i64).max(0);
        let hi = ((c + tol - 0.5).floor() as i64).min(limit as i64 - 1);
        lo..=hi
    }

    fn pixel(&self, m: u32, minor: i64) -> (u32, u32) {
        if self.x_major {
            (m, minor as u32)
        } else {
            (minor as u32, m)
        }
    }
}

/// Total-least-squares line through `pts`; returns centroid and unit direction.
fn fit_line(pts: &[(u32, u32)]) -> Option<(Point, (f64, f64))> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64 + 0.5, b + y as f64 + 0.5));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let dx = x as f64 + 0.5 - mx;
        let dy = y as f64 + 0.5 - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx + syy == 0.0 {
        return None;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Some((Point::new(mx, my), (theta.cos(), theta.sin())))
}

/// Extracts finite line segments with a greedy progressive Hough transform.
///
/// The strongest accumulator cell is repeatedly selected; its line is walked
/// across the image and runs of ink (bridging gaps up to `max_gap`) at least
/// `min_len` long become segments. Each segment is refit to its supporting
/// pixels, after which a thin corridor of ink around it is removed from the
/// image and from the accumulator. Cells whose line yields no segment are
/// retired, so the loop terminates.
pub fn hough_segments(bin: &BinaryImage, params: &HoughParams) -> Vec<LineSegment> {
    let (w, h) = (bin.width(), bin.height());
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let mut alive = bin.clone();
    let mut acc = Accumulator::new(w, h, params);
    for (x, y) in bin.foreground() {
        acc.add(x, y, true);
    }

    let mut heap: BinaryHeap<(u32, Reverse<usize>)> =
        acc.votes.iter().enumerate().filter(|(_, &v)| v >= params.votes).map(|(i, &v)| (v, Reverse(i))).collect();
    let mut retired = vec![false; acc.votes.len()];

    let support_tol = 0.5 + 0.75 * params.rho_res;
    let clear_radius = 0.5 + params.rho_res;
    let mut out = Vec::new();

    while let Some((v, Reverse(idx))) = heap.pop() {
        if retired[idx] {
            continue;
        }
        let current = acc.votes[idx];
        if current != v {
            if current >= params.votes {
                heap.push((current, Reverse(idx)));
            }
            continue;
        }
        let (cos, sin, rho) = acc.line(idx);
        let walk = LineWalk::new(cos, sin, rho);
        let runs = collect_runs(&alive, &walk, support_tol, params);
        if runs.is_empty() {
            retired[idx] = true;
            continue;
        }
        for run in runs {
            let (p1, p2) = refine_run(&walk, &run);
            let Some(seg) = LineSegment::new("", p1, p2) else { continue };
            let seg = grow_segment(bin, &seg, support_tol);
            if seg.length < params.min_len {
                continue;
            }
            clear_corridor(&mut alive, &mut acc, &seg, clear_radius);
            out.push(seg);
        }
        if acc.votes[idx] >= params.votes {
            heap.push((acc.votes[idx], Reverse(idx)));
        }
    }

    assign_line_ids(&mut out);
    out
}

struct Run {
    first: u32,
    last: u32,
    support: Vec<(u32, u32)>,
    /// `(step, support length after it)` for every step with ink.
    hits: Vec<(u32, usize)>,
}

/// Ink islands this short at a run's ends, cut off by a bridged gap, are
/// taken to be other strokes crossing the line just past its end.
const END_ISLAND: usize = 3;

impl Run {
    fn trim_islands(&mut self) {
        let breaks: Vec<usize> = (1..self.hits.len()).filter(|&i| self.hits[i].0 > self.hits[i - 1].0 + 1).collect();
        let (Some(&head), Some(&tail)) = (breaks.first(), breaks.last()) else { return };
        let mut keep = 0..self.hits.len();
        if self.hits.len() - tail <= END_ISLAND {
            keep.end = tail;
        }
        if head <= END_ISLAND && head < keep.end {
            keep.start = head;
        }
        if keep.is_empty() {
            return;
        }
        let from = if keep.start == 0 { 0 } else { self.hits[keep.start - 1].1 };
        let to = self.hits[keep.end - 1].1;
        self.support = self.support[from..to].to_vec();
        self.first = self.hits[keep.start].0;
        self.last = self.hits[keep.end - 1].0;
        self.hits = self.hits[keep].to_vec();
    }
}

/// Extra pixels taken on each side of the support band for thick strokes.
const STROKE_EXTEND: i64 = 3;

fn collect_runs(alive: &BinaryImage, walk: &LineWalk, tol: f64, params: &HoughParams) -> Vec<Run> {
    let (w, h) = (alive.width(), alive.height());
    let limit = if walk.x_major { h } else { w };
    let mut runs = Vec::new();
    let mut cur: Option<Run> = None;
    let mut gap = 0u32;
    for m in 0..walk.steps(w, h) {
        let mut pix = Vec::new();
        let mut span: Option<(i64, i64)> = None;
        for minor in walk.minor_range(m, tol, limit) {
            let (x, y) = walk.pixel(m, minor);
            if alive.get(x, y) {
                pix.push((x, y));
                span = Some(span.map_or((minor, minor), |(a, _)| (a, minor)));
            }
        }
        // thick strokes: take the rest of the contiguous ink across the line
        // so the fit lands on the stroke centre
        if let Some((a, b)) = span {
            for k in 1..=STROKE_EXTEND {
                let minor = a - k;
                if minor < 0 || !alive.get(walk.pixel(m, minor).0, walk.pixel(m, minor).1) {
                    break;
                }
                pix.push(walk.pixel(m, minor));
            }
            for k in 1..=STROKE_EXTEND {
                let minor = b + k;
                if minor >= limit as i64 || !alive.get(walk.pixel(m, minor).0, walk.pixel(m, minor).1) {
                    break;
                }
                pix.push(walk.pixel(m, minor));
            }
        }
        let hit = span.is_some();
        if hit {
            gap = 0;
            match cur.as_mut() {
                Some(r) => {
                    r.last = m;
                    r.support.extend(pix);
                    r.hits.push((m, r.support.len()));
                }
                None => {
                    let n = pix.len();
                    cur = Some(Run { first: m, last: m, support: pix, hits: vec![(m, n)] });
                }
            }
        } else if cur.is_some() {
            gap += 1;
            if gap > params.max_gap {
                runs.push(cur.take().expect("checked"));
                gap = 0;
            }
        }
    }
    if let Some(r) = cur {
        runs.push(r);
    }
    for r in &mut runs {
        r.trim_islands();
    }
    runs.retain(|r| walk.at(r.first).distance(&walk.at(r.last)) >= params.min_len);
    runs
}

/// Grows a fitted segment along its own direction over ink in the original
/// image. Catches corners and tees, where an earlier line already cleared the
/// shared pixels, and tails that drifted out of the accumulator band.
fn grow_segment(bin: &BinaryImage, seg: &LineSegment, tol: f64) -> LineSegment {
    let (w, h) = (bin.width() as i64, bin.height() as i64);
    let (dx, dy) = seg.direction();
    // farthest ink along (sx, sy) from `from`, scanning in half-pixel steps
    // and giving up after a 1.5 px blank
    let reach = |from: Point, sx: f64, sy: f64| -> f64 {
        let mut best = 0.0f64;
        let mut misses = 0;
        let mut t = 0.5;
        while misses < 3 {
            let (px, py) = (from.x + sx * t, from.y + sy * t);
            let (cx, cy) = (px.floor() as i64, py.floor() as i64);
            let mut hit = false;
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    if x < 0 || y < 0 || x >= w || y >= h || !bin.get(x as u32, y as u32) {
                        continue;
                    }
                    let (ox, oy) = (x as f64 + 0.5 - from.x, y as f64 + 0.5 - from.y);
                    let along = ox * sx + oy * sy;
                    if (ox * sy - oy * sx).abs() <= tol && (along - t).abs() <= 0.5 {
                        hit = true;
                        best = best.max(along);
                    }
                }
            }
            misses = if hit { 0 } else { misses + 1 };
            t += 0.5;
        }
        best
    };
    let a = reach(seg.p1, -dx, -dy);
    let b = reach(seg.p2, dx, dy);
    let p1 = Point::new(seg.p1.x - a * dx, seg.p1.y - a * dy);
    let p2 = Point::new(seg.p2.x + b * dx, seg.p2.y + b * dy);
    LineSegment::new("", p1, p2).unwrap_or_else(|| seg.clone())
}

/// Endpoints of a run projected onto the line fitted to its support.
fn refine_run(walk: &LineWalk, run: &Run) -> (Point, Point) {
    let a = walk.at(run.first);
    let b = walk.at(run.last);
    match fit_line(&run.support) {
        Some((c, (dx, dy))) => {
            let proj = |p: Point| {
                let t = (p.x - c.x) * dx + (p.y - c.y) * dy;
                Point::new(c.x + t * dx, c.y + t * dy)
            };
            (proj(a), proj(b))
        }
        None => (a, b),
    }
}

fn clear_corridor(alive: &mut BinaryImage, acc: &mut Accumulator, seg: &LineSegment, radius: f64) {
    let (w, h) = (alive.width() as f64, alive.height() as f64);
    let lo = |v: f64| (v - radius - 1.0).floor().max(0.0) as u32;
    let x0 = lo(seg.p1.x.min(seg.p2.x));
    let y0 = lo(seg.p1.y.min(seg.p2.y));
    let x1 = (seg.p1.x.max(seg.p2.x) + radius + 1.0).ceil().min(w - 1.0) as u32;
    let y1 = (seg.p1.y.max(seg.p2.y) + radius + 1.0).ceil().min(h - 1.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if alive.get(x, y) && seg.distance(Point::new(x as f64 + 0.5, y as f64 + 0.5)) <= radius {
                alive.set(x, y, false);
                acc.add(x, y, false);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeParams {
    /// Largest direction difference, degrees.
    pub angle_tol: f64,
    /// Largest endpoint gap along the common direction, pixels.
    pub gap_tol: f64,
    /// Largest perpendicular offset between the two lines, pixels.
    pub offset_tol: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self { angle_tol: 2.0, gap_tol: 10.0, offset_tol: 3.0 }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 180.0;
    d.min(180.0 - d)
}

/// Whether two segments belong to the same straight line.
pub fn collinear(a: &LineSegment, b: &LineSegment, p: &MergeParams) -> bool {
    if angle_diff(a.angle_deg, b.angle_deg) > p.angle_tol {
        return false;
    }
    let offset = a.line_distance(b.p1).max(a.line_distance(b.p2)).max(b.line_distance(a.p1)).max(b.line_distance(a.p2));
    if offset > p.offset_tol {
        return false;
    }
    // measure the gap along the longer segment so the relation is symmetric
    let (r, o) = match a.length.total_cmp(&b.length).then_with(|| cmp_keys(&a.sort_key(), &b.sort_key())) {
        std::cmp::Ordering::Less => (b, a),
        _ => (a, b),
    };
    let (t1, t2) = (r.project(o.p1), r.project(o.p2));
    let (lo, hi) = (t1.min(t2), t1.max(t2));
    let gap = (lo - r.length).max(-hi).max(0.0);
    gap <= p.gap_tol
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Fuses a group of collinear segments into the maximal segment covering
/// their projections on the length-weighted mean line.
fn fuse(group: &[&LineSegment]) -> LineSegment {
    let mut members: Vec<&LineSegment> = group.to_vec();
    members.sort_by(|a, b| cmp_keys(&a.sort_key(), &b.sort_key()));
    let (mut c2, mut s2, mut cx, mut cy, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in &members {
        let t = (2.0 * s.angle_deg).to_radians();
        c2 += s.length * t.cos();
        s2 += s.length * t.sin();
        cx += s.length * 0.5 * (s.p1.x + s.p2.x);
        cy += s.length * 0.5 * (s.p1.y + s.p2.y);
        total += s.length;
    }
    let theta = 0.5 * s2.atan2(c2);
    let (dx, dy) = (theta.cos(), theta.sin());
    let (cx, cy) = (cx / total, cy / total);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &members {
        for p in [s.p1, s.p2] {
            let t = (p.x - cx) * dx + (p.y - cy) * dy;
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    LineSegment::new("", Point::new(cx + lo * dx, cy + lo * dy), Point::new(cx + hi * dx, cy + hi * dy))
        .expect("group spans a positive length")
}

/// Repeatedly fuses collinear fragments until no pair is related.
///
/// Groups are the connected components of the [`collinear`] relation, so the
/// result does not depend on input order; iterating to a fixpoint makes the
/// operation idempotent.
pub fn merge_segments(segs: &[LineSegment], params: &MergeParams) -> Vec<LineSegment> {
    let mut current: Vec<LineSegment> = segs.to_vec();
    current.sort_by(|a, b| cmp_keys(&a.sort_key(), &b.sort_key()));
    loop {
        let n = current.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut joined = false;
        for i in 0..n {
            for j in i + 1..n {
                if collinear(&current[i], &current[j], params) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                        joined = true;
                    }
                }
            }
        }
        if !joined {
            break;
        }
        let mut groups: Vec<Vec<&LineSegment>> = vec![Vec::new(); n];
        for i in 0..n {
            let r = find(&mut parent, i);
            groups[r].push(&current[i]);
        }
        let mut next: Vec<LineSegment> = groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| if g.len() == 1 { g[0].clone() } else { fuse(g) })
            .collect();
        next.sort_by(|a, b| cmp_keys(&a.sort_key(), &b.sort_key()));
        current = next;
    }
    assign_line_ids(&mut current);
    current
}
