//! Line crossings and their connectivity class.
//!
//! A crossing's degree is the number of distinct directions in which lines
//! leave it. Two or three departing directions (corner, tee) join the lines
//! hydraulically; four are a crossover of two independent pipes.

use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::lines::LineSegment;

/// How four-or-more-directional crossings are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourWayRule {
    /// Four departing directions mean two pipes crossing without contact.
    #[default]
    Crossover,
    /// Plans that draw crossovers with jump arcs: a plain four-way crossing
    /// is a real junction.
    Junction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossingParams {
    /// Segment extension and minimum ray length, pixels.
    pub eps: f64,
    /// Pairwise intersections closer than this form one crossing, pixels.
    pub cluster_radius: f64,
    /// Ray directions closer than this count as one direction, degrees.
    pub angle_tol: f64,
    #[serde(default)]
    pub four_way_rule: FourWayRule,
}

impl Default for CrossingParams {
    fn default() -> Self {
        Self { eps: 2.0, cluster_radius: 3.0, angle_tol: 10.0, four_way_rule: FourWayRule::Crossover }
    }
}

/// A line leaving a crossing: which segment, and in which sense along it
/// (`true` = towards `p2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub line: String,
    pub towards_p2: bool,
    /// Direction in degrees, `[0, 360)`.
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineCrossing {
    pub id: String,
    pub at: Point,
    /// Ids of the segments meeting here, sorted.
    pub incident: Vec<String>,
    pub rays: Vec<Ray>,
    pub degree: usize,
    pub connective: bool,
}

/// Canonical ordering for a pair so that `intersect(a, b)` and
/// `intersect(b, a)` evaluate the identical expression.
fn ordered<'a>(a: &'a LineSegment, b: &'a LineSegment) -> (&'a LineSegment, &'a LineSegment) {
    let ka = [a.p1.x, a.p1.y, a.p2.x, a.p2.y];
    let kb = [b.p1.x, b.p1.y, b.p2.x, b.p2.y];
    let ord =
        ka.iter().zip(kb.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal);
    if ord.is_gt() {
        (b, a)
    } else {
        (a, b)
    }
}

/// Intersection of the two supporting lines via 2x2 determinants, kept only
/// if it lies on both segments extended by `eps` at each end.
pub fn intersect(a: &LineSegment, b: &LineSegment, eps: f64) -> Option<Point> {
    let (a, b) = ordered(a, b);
    let (x1, y1, x2, y2) = (a.p1.x, a.p1.y, a.p2.x, a.p2.y);
    let (x3, y3, x4, y4) = (b.p1.x, b.p1.y, b.p2.x, b.p2.y);
    let det = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4);
    // |det| = |a| |b| sin(angle); treat near-parallel lines as parallel
    if det.abs() <= 1e-9 * a.length * b.length {
        return None;
    }
    let da = x1 * y2 - y1 * x2;
    let db = x3 * y4 - y3 * x4;
    let p = Point::new((da * (x3 - x4) - (x1 - x2) * db) / det, (da * (y3 - y4) - (y1 - y2) * db) / det);
    let within = |s: &LineSegment| {
        let t = s.project(p);
        t >= -eps && t <= s.length + eps
    };
    if within(a) && within(b) {
        Some(p)
    } else {
        None
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Number of distinct directions among `angles` (degrees in `[0, 360)`),
/// chaining directions that lie within `tol` of each other around the circle.
fn distinct_directions(angles: &[f64], tol: f64) -> usize {
    if angles.is_empty() {
        return 0;
    }
    let mut a: Vec<f64> = angles.to_vec();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let gaps: Vec<f64> = (0..n).map(|i| if i + 1 < n { a[i + 1] - a[i] } else { a[0] + 360.0 - a[n - 1] }).collect();
    let breaks = gaps.iter().filter(|&&g| g > tol).count();
    breaks.max(1)
}

/// Whether a crossing with `degree` departing directions joins its lines.
pub fn is_connective(degree: usize, rule: FourWayRule) -> bool {
    match degree {
        2 | 3 => true,
        4 => rule == FourWayRule::Junction,
        _ => false,
    }
}

/// Finds all crossings among `segs` by a pairwise scan.
///
/// Pairwise intersection points within `cluster_radius` of each other are
/// merged (single linkage) into one crossing located at their mean. Each
/// incident segment contributes a ray towards every endpoint that lies more
/// than `eps` from the crossing. Results are sorted by `(y, x)` and named
/// `LineCrossing-1`, `LineCrossing-2`, ...; clusters with fewer than two
/// departing directions are dropped.
pub fn find_crossings(segs: &[LineSegment], params: &CrossingParams) -> Vec<LineCrossing> {
    let mut hits: Vec<(Point, usize, usize)> = Vec::new();
    for i in 0..segs.len() {
        for j in i + 1..segs.len() {
            if let Some(p) = intersect(&segs[i], &segs[j], params.eps) {
                hits.push((p, i, j));
            }
        }
    }
    let n = hits.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if hits[i].0.distance(&hits[j].0) <= params.cluster_radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        clusters[r].push(i);
    }

    let mut out = Vec::new();
    for members in clusters.into_iter().filter(|c| !c.is_empty()) {
        let (sx, sy) = members.iter().fold((0.0, 0.0), |(x, y), &m| (x + hits[m].0.x, y + hits[m].0.y));
        let at = Point::new(sx / members.len() as f64, sy / members.len() as f64);
        let mut lines: Vec<usize> = members.iter().flat_map(|&m| [hits[m].1, hits[m].2]).collect();
        lines.sort_unstable();
        lines.dedup();
        let mut rays = Vec::new();
        for &l in &lines {
            let s = &segs[l];
            let t = s.project(at);
            let (dx, dy) = s.direction();
            let fwd = dy.atan2(dx).to_degrees().rem_euclid(360.0);
            if s.length - t > params.eps {
                rays.push(Ray { line: s.id.clone(), towards_p2: true, angle_deg: fwd });
            }
            if t > params.eps {
                rays.push(Ray { line: s.id.clone(), towards_p2: false, angle_deg: (fwd + 180.0).rem_euclid(360.0) });
            }
        }
        let angles: Vec<f64> = rays.iter().map(|r| r.angle_deg).collect();
        let degree = distinct_directions(&angles, params.angle_tol);
        if degree < 2 {
            continue;
        }
        if degree >= 5 {
            log::debug!("crossing at ({:.1}, {:.1}) has {degree} directions, treated as non-connective", at.x, at.y);
        }
        let mut incident: Vec<String> = lines.iter().map(|&l| segs[l].id.clone()).collect();
        incident.sort();
        out.push(LineCrossing {
            id: String::new(),
            at,
            incident,
            rays,
            degree,
            connective: is_connective(degree, params.four_way_rule),
        });
    }
    out.sort_by(|a, b| a.at.y.total_cmp(&b.at.y).then_with(|| a.at.x.total_cmp(&b.at.x)));
    for (i, c) in out.iter_mut().enumerate() {
        c.id = format!("LineCrossing-{}", i + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(id: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
        LineSegment::new(id, Point::new(x1, y1), Point::new(x2, y2)).unwrap()
    }

    #[test]
    fn diagonal_cross() {
        let p = intersect(&seg("a", 0.0, 0.0, 2.0, 2.0), &seg("b", 0.0, 2.0, 2.0, 0.0), 0.0).unwrap();
        assert_eq!(p, Point::new(1.0, 1.0));
    }

    #[test]
    fn parallel_lines_do_not_meet() {
        assert!(intersect(&seg("a", 0.0, 0.0, 1.0, 0.0), &seg("b", 0.0, 1.0, 1.0, 1.0), 0.0).is_none());
    }

    #[test]
    fn determinant_by_hand() {
        // det = (0-10)(-5-5) - (0-0)(5-5) = 100; da = 0; db = 5*5 - (-5)*5 = 50
        // x = (0*(5-5) - (0-10)*50)/100 = 5, y = (0*(-10) - 0*50)/100 = 0
        let p = intersect(&seg("a", 0.0, 0.0, 10.0, 0.0), &seg("b", 5.0, -5.0, 5.0, 5.0), 0.0).unwrap();
        assert_eq!(p, Point::new(5.0, 0.0));
    }

    #[test]
    fn out_of_range_respects_eps() {
        let a = seg("a", 0.0, 0.0, 10.0, 0.0);
        let b = seg("b", 12.0, -5.0, 12.0, 5.0);
        assert!(intersect(&a, &b, 1.0).is_none());
        assert_eq!(intersect(&a, &b, 2.0), Some(Point::new(12.0, 0.0)));
    }

    fn only(c: &[LineCrossing]) -> &LineCrossing {
        assert_eq!(c.len(), 1, "{c:?}");
        &c[0]
    }

    #[test]
    fn tee_is_three_directional() {
        let segs = vec![seg("Line-1", 0.0, 50.0, 100.0, 50.0), seg("Line-2", 50.0, 50.0, 50.0, 100.0)];
        let c = find_crossings(&segs, &CrossingParams::default());
        let c = only(&c);
        assert_eq!(c.degree, 3);
        assert!(c.connective);
        assert_eq!(c.incident, ["Line-1", "Line-2"]);
        assert_eq!(c.id, "LineCrossing-1");
    }

    #[test]
    fn cross_is_four_directional() {
        let segs = vec![seg("Line-1", 0.0, 50.0, 100.0, 50.0), seg("Line-2", 50.0, 0.0, 50.0, 100.0)];
        let c = find_crossings(&segs, &CrossingParams::default());
        assert_eq!(only(&c).degree, 4);
        assert!(!only(&c).connective);
        let jumps = CrossingParams { four_way_rule: FourWayRule::Junction, ..Default::default() };
        assert!(only(&find_crossings(&segs, &jumps)).connective);
    }

    #[test]
    fn corner_is_two_directional() {
        let segs = vec![seg("Line-1", 0.0, 50.0, 50.0, 50.0), seg("Line-2", 50.0, 50.0, 50.0, 100.0)];
        let c = find_crossings(&segs, &CrossingParams::default());
        assert_eq!(only(&c).degree, 2);
        assert!(only(&c).connective);
    }

    #[test]
    fn tee_with_raster_gap_still_found() {
        // stem stops 1.5 px short of the bar
        let segs = vec![seg("Line-1", 0.0, 50.0, 100.0, 50.0), seg("Line-2", 50.0, 51.5, 50.0, 100.0)];
        let c = find_crossings(&segs, &CrossingParams::default());
        assert_eq!(only(&c).degree, 3);
    }

    #[test]
    fn jittered_multiway_junction_clusters() {
        // three segments whose pairwise intersections differ by < 3 px
        let segs =
            vec![seg("a", 0.0, 50.0, 100.0, 50.0), seg("b", 50.0, 50.0, 50.0, 100.0), seg("c", 51.0, 0.0, 51.0, 50.0)];
        let c = find_crossings(&segs, &CrossingParams::default());
        assert_eq!(only(&c).degree, 4);
        assert_eq!(only(&c).incident.len(), 3);
    }

    #[test]
    fn direction_counting() {
        assert_eq!(distinct_directions(&[0.0, 90.0, 180.0, 270.0], 10.0), 4);
        assert_eq!(distinct_directions(&[0.0, 355.0, 180.0], 10.0), 2);
        assert_eq!(distinct_directions(&[0.0, 5.0], 10.0), 1);
        assert_eq!(distinct_directions(&[0.0, 72.0, 144.0, 216.0, 288.0], 10.0), 5);
        assert!(!is_connective(5, FourWayRule::Junction));
    }

    fn arb_segment() -> impl Strategy<Value = LineSegment> {
        (0i32..200, 0i32..200, 0i32..200, 0i32..200)
            .prop_filter("non-degenerate", |(a, b, c, d)| (a, b) != (c, d))
            .prop_map(|(a, b, c, d)| seg("s", a as f64, b as f64, c as f64, d as f64))
    }

    proptest! {
        #[test]
        fn intersect_is_symmetric(a in arb_segment(), b in arb_segment(), eps in 0.0f64..3.0) {
            let ab = intersect(&a, &b, eps);
            let ba = intersect(&b, &a, eps);
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn crossings_translate(segs in prop::collection::vec(arb_segment(), 0..12), dx in -50i32..50, dy in -50i32..50) {
            let named: Vec<LineSegment> = segs.iter().enumerate()
                .map(|(i, s)| LineSegment { id: format!("Line-{i}"), ..s.clone() }).collect();
            let moved: Vec<LineSegment> = named.iter().map(|s| s.translate(dx as f64, dy as f64)).collect();
            // thresholds off the integer lattice so rounding cannot flip a decision
            let params = CrossingParams { eps: 2.123, cluster_radius: 3.071, angle_tol: 10.3, ..Default::default() };
            let a = find_crossings(&named, &params);
            let b = find_crossings(&moved, &params);
            prop_assert_eq!(a.len(), b.len());
            let mut pa: Vec<_> = a.iter().map(|c| (c.degree, c.incident.clone(), c.at.x + dx as f64, c.at.y + dy as f64)).collect();
            let mut pb: Vec<_> = b.iter().map(|c| (c.degree, c.incident.clone(), c.at.x, c.at.y)).collect();
            pa.sort_by(|x, y| x.1.cmp(&y.1).then(x.2.total_cmp(&y.2)));
            pb.sort_by(|x, y| x.1.cmp(&y.1).then(x.2.total_cmp(&y.2)));
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert_eq!(x.0, y.0);
                prop_assert_eq!(&x.1, &y.1);
                prop_assert!((x.2 - y.2).abs() < 1e-6 && (x.3 - y.3).abs() < 1e-6);
            }
        }

        #[test]
        fn connective_iff_two_or_three(segs in prop::collection::vec(arb_segment(), 0..15)) {
            for c in find_crossings(&segs, &CrossingParams::default()) {
                prop_assert_eq!(c.connective, c.degree == 2 || c.degree == 3);
            }
        }
    }
}
