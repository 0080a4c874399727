//! Convex polygons, half-plane clipping and power (Laguerre) diagrams
//! restricted to a convex domain.
//!
//! A power cell of site `i` is the set of points `x` of the domain such that
//! `‖x − y_i‖² − φ_i ≤ ‖x − y_j‖² − φ_j` for every `j`. Each cell is obtained
//! by clipping the domain with one half-plane per competing site. Cells are
//! built in coordinates centered on their own site, which keeps the
//! half-plane offsets well conditioned when the sites are far from the
//! origin.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edge tag for edges lying on the domain boundary.
pub(crate) const BOUNDARY: usize = usize::MAX;

/// Relative tolerance (times the domain diameter) under which two vertices
/// are merged and a shared edge is treated as a point contact.
pub const LENGTH_TOL: f64 = 1e-12;

/// Cells whose area falls below this fraction of the domain area are
/// normalized to the empty polygon.
pub const SLIVER_TOL: f64 = 1e-14;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    #[inline]
    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// `self + t (other − self)`.
    #[inline]
    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
        )
    }
}

impl Add for Point2 {
    type Output = Point2;
    #[inline]
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Point2 {
    #[inline]
    fn add_assign(&mut self, o: Point2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    #[inline]
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    #[inline]
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    #[inline]
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Point2 {
    type Output = Point2;
    #[inline]
    fn div(self, s: f64) -> Point2 {
        Point2::new(self.x / s, self.y / s)
    }
}

/// An ordered cloud of sites. Index `i` identifies site `i` throughout the
/// solver (cells, potentials, masses and barycenters share the indexing).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    points: Vec<Point2>,
}

impl PointCloud {
    pub fn new(points: Vec<Point2>) -> Self {
        PointCloud { points }
    }

    pub fn as_slice(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_vec(self) -> Vec<Point2> {
        self.points
    }

    /// Minimum distance between two distinct sites, `+∞` when `N < 2`.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            for q in &self.points[i + 1..] {
                best = best.min(p.dist(*q));
            }
        }
        best
    }

    /// Cells `((2i+1)/(2n), (2j+1)/(2n))` of an `n × n` grid, scaled to the
    /// bounding box `[lo, hi]`. Points are listed row by row.
    pub fn grid(n: usize, lo: Point2, hi: Point2) -> Self {
        let mut points = Vec::with_capacity(n * n);
        let w = hi - lo;
        for j in 0..n {
            for i in 0..n {
                let fx = (2 * i + 1) as f64 / (2 * n) as f64;
                let fy = (2 * j + 1) as f64 / (2 * n) as f64;
                points.push(Point2::new(lo.x + fx * w.x, lo.y + fy * w.y));
            }
        }
        PointCloud { points }
    }

    /// `(1 − t) self + t other`, point by point.
    pub fn interpolate(&self, other: &PointCloud, t: f64) -> PointCloud {
        assert_eq!(self.len(), other.len());
        PointCloud::new(
            self.points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| a.lerp(*b, t))
                .collect(),
        )
    }

    pub fn translated(&self, v: Point2) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| *p + v).collect())
    }
}

impl std::ops::Deref for PointCloud {
    type Target = [Point2];
    fn deref(&self) -> &[Point2] {
        &self.points
    }
}

impl From<Vec<Point2>> for PointCloud {
    fn from(points: Vec<Point2>) -> Self {
        PointCloud { points }
    }
}

impl FromIterator<Point2> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point2>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// The closed half-plane `{x : normal · x ≤ offset}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane {
    pub normal: Point2,
    pub offset: f64,
}

impl HalfPlane {
    pub fn new(normal: Point2, offset: f64) -> Self {
        debug_assert!(normal.norm_sq() > 0.0, "half-plane normal must be nonzero");
        HalfPlane { normal, offset }
    }

    /// Signed slack `normal · p − offset`; non-positive inside.
    #[inline]
    pub fn eval(&self, p: Point2) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.eval(p) <= 0.0
    }
}

/// A convex polygon with counterclockwise vertices. The empty polygon has no
/// vertices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Wraps counterclockwise vertices. Convexity is not checked; see
    /// [`ConvexPolygon::is_convex`].
    pub fn new(vertices: Vec<Point2>) -> Self {
        ConvexPolygon { vertices }
    }

    pub fn empty() -> Self {
        ConvexPolygon::default()
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        ConvexPolygon::new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    pub fn unit_square() -> Self {
        ConvexPolygon::rectangle(0.0, 0.0, 1.0, 1.0)
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Area centroid; `None` for the empty or a zero-area polygon.
    pub fn centroid(&self) -> Option<Point2> {
        let m = raw_moments(&self.vertices, self.vertices.first().copied()?);
        if m[0] <= 0.0 {
            return None;
        }
        Some(self.vertices[0] + Point2::new(m[1], m[2]) / m[0])
    }

    /// Axis-aligned bounding box `(min, max)`; `None` when empty.
    pub fn bbox(&self) -> Option<(Point2, Point2)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (
                Point2::new(lo.x.min(p.x), lo.y.min(p.y)),
                Point2::new(hi.x.max(p.x), hi.y.max(p.y)),
            )
        }))
    }

    /// Largest vertex-to-vertex distance.
    pub fn diameter(&self) -> f64 {
        let v = &self.vertices;
        let mut d2: f64 = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                d2 = d2.max((v[i] - v[j]).norm_sq());
            }
        }
        d2.sqrt()
    }

    pub fn translated(&self, v: Point2) -> ConvexPolygon {
        ConvexPolygon::new(self.vertices.iter().map(|p| *p + v).collect())
    }

    /// Point-in-polygon test with an absolute tolerance on the edge
    /// distance.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let v = &self.vertices;
        if v.is_empty() {
            return false;
        }
        (0..v.len()).all(|k| {
            let a = v[k];
            let b = v[(k + 1) % v.len()];
            let e = b - a;
            let len = e.norm();
            len == 0.0 || e.cross(p - a) >= -tol * len
        })
    }

    /// Every vertex lies on or left of every directed edge, within
    /// `tol · diam`, and no two consecutive vertices coincide.
    pub fn is_convex(&self, tol: f64) -> bool {
        let v = &self.vertices;
        if v.is_empty() {
            return true;
        }
        if v.len() < 3 {
            return false;
        }
        let scale = tol * self.diameter().max(f64::MIN_POSITIVE);
        for k in 0..v.len() {
            let a = v[k];
            let b = v[(k + 1) % v.len()];
            let e = b - a;
            let len = e.norm();
            if len <= scale {
                return false;
            }
            if v.iter().any(|p| e.cross(*p - a) < -scale * len) {
                return false;
            }
        }
        true
    }
}

pub(crate) fn signed_area(v: &[Point2]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let o = v[0];
    let mut twice = 0.0;
    for k in 1..v.len() - 1 {
        twice += (v[k] - o).cross(v[k + 1] - o);
    }
    0.5 * twice
}

/// Green's-theorem moments of a polygon with respect to `origin`:
/// `[∫1, ∫x', ∫y', ∫(x'² + y'²)]` with `x' = x − origin`.
pub(crate) fn raw_moments(v: &[Point2], origin: Point2) -> [f64; 4] {
    let n = v.len();
    if n < 3 {
        return [0.0; 4];
    }
    let mut a = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sq = 0.0;
    let mut p = v[n - 1] - origin;
    for q in v {
        let q = *q - origin;
        let c = p.x * q.y - q.x * p.y;
        a += c;
        sx += (p.x + q.x) * c;
        sy += (p.y + q.y) * c;
        sq += (p.x * p.x + p.x * q.x + q.x * q.x + p.y * p.y + p.y * q.y + q.y * q.y) * c;
        p = q;
    }
    [a / 2.0, sx / 6.0, sy / 6.0, sq / 12.0]
}

/// Clips `src` by `normal · x ≤ offset` into `out` (untagged, for the
/// integration hot path). `out` is cleared first.
pub(crate) fn clip_into(src: &[Point2], normal: Point2, offset: f64, out: &mut Vec<Point2>) {
    out.clear();
    let n = src.len();
    if n == 0 {
        return;
    }
    let mut prev = src[n - 1];
    let mut prev_s = normal.dot(prev) - offset;
    for &cur in src {
        let cur_s = normal.dot(cur) - offset;
        let prev_in = prev_s <= 0.0;
        let cur_in = cur_s <= 0.0;
        if prev_in != cur_in {
            let t = prev_s / (prev_s - cur_s);
            out.push(prev.lerp(cur, t));
        }
        if cur_in {
            out.push(cur);
        }
        prev = cur;
        prev_s = cur_s;
    }
    if out.len() < 3 {
        out.clear();
    }
}

/// Result of a tagged clip.
enum ClipOutcome {
    Unchanged,
    Changed,
}

/// Clips a polygon whose edge `k` (from `v[k]` to `v[k+1]`) carries
/// `tags[k]`. New edges along the clipping line get `tag`. Vertices closer
/// than `merge_tol` are merged; a result with fewer than three vertices or
/// non-positive area becomes empty.
fn clip_tagged(
    verts: &mut Vec<Point2>,
    tags: &mut Vec<usize>,
    h: &HalfPlane,
    tag: usize,
    merge_tol: f64,
    scratch: &mut (Vec<Point2>, Vec<usize>),
) -> ClipOutcome {
    let n = verts.len();
    if n == 0 {
        return ClipOutcome::Unchanged;
    }
    let (out_v, out_t) = scratch;
    out_v.clear();
    out_t.clear();

    let mut any_out = false;
    let mut any_in = false;
    for v in verts.iter() {
        if h.eval(*v) <= 0.0 {
            any_in = true;
        } else {
            any_out = true;
        }
    }
    if !any_out {
        return ClipOutcome::Unchanged;
    }
    if !any_in {
        verts.clear();
        tags.clear();
        return ClipOutcome::Changed;
    }

    for k in 0..n {
        let a = verts[k];
        let b = verts[(k + 1) % n];
        let sa = h.eval(a);
        let sb = h.eval(b);
        let a_in = sa <= 0.0;
        let b_in = sb <= 0.0;
        if a_in {
            out_v.push(a);
            out_t.push(tags[k]);
            if !b_in {
                let t = sa / (sa - sb);
                out_v.push(a.lerp(b, t));
                out_t.push(tag);
            }
        } else if b_in {
            let t = sa / (sa - sb);
            out_v.push(a.lerp(b, t));
            out_t.push(tags[k]);
        }
    }

    merge_close(out_v, out_t, merge_tol);
    if out_v.len() < 3 || signed_area(out_v) <= 0.0 {
        verts.clear();
        tags.clear();
    } else {
        std::mem::swap(verts, out_v);
        std::mem::swap(tags, out_t);
    }
    ClipOutcome::Changed
}

/// Merges consecutive (cyclic) vertices closer than `tol`. When `v[k+1]` is
/// dropped its outgoing edge tag moves to `v[k]`.
fn merge_close(v: &mut Vec<Point2>, t: &mut Vec<usize>, tol: f64) {
    if v.len() < 2 {
        return;
    }
    let tol2 = tol * tol;
    let mut mv: Vec<Point2> = Vec::with_capacity(v.len());
    let mut mt: Vec<usize> = Vec::with_capacity(v.len());
    for (p, tag) in v.iter().zip(t.iter()) {
        match mv.last() {
            Some(last) if (*p - *last).norm_sq() <= tol2 => {
                *mt.last_mut().unwrap() = *tag;
            }
            _ => {
                mv.push(*p);
                mt.push(*tag);
            }
        }
    }
    while mv.len() >= 2 && (mv[mv.len() - 1] - mv[0]).norm_sq() <= tol2 {
        // the dropped vertex only owned the degenerate closing edge
        mv.pop();
        mt.pop();
    }
    *v = mv;
    *t = mt;
}

/// `poly ∩ {h.normal · x ≤ h.offset}`. Degenerate intersections are empty.
pub fn clip(poly: &ConvexPolygon, h: &HalfPlane) -> ConvexPolygon {
    let mut verts = poly.vertices.clone();
    let mut tags = vec![BOUNDARY; verts.len()];
    let tol = LENGTH_TOL * poly.diameter();
    let mut scratch = (Vec::new(), Vec::new());
    clip_tagged(&mut verts, &mut tags, h, 0, tol, &mut scratch);
    ConvexPolygon::new(verts)
}

/// Half-plane of points where site `i` beats site `j`, in coordinates
/// centered on `y_i`: `2 d · u ≤ ‖d‖² − φ_j + φ_i` with `d = y_j − y_i`.
#[inline]
fn local_bisector(d: Point2, phi_i: f64, phi_j: f64) -> HalfPlane {
    HalfPlane::new(d * 2.0, d.norm_sq() - phi_j + phi_i)
}

/// Half-plane `2(y_j − y_i)·x ≤ ‖y_j‖² − ‖y_i‖² − φ_j + φ_i` in global
/// coordinates.
pub fn power_half_plane(yi: Point2, yj: Point2, phi_i: f64, phi_j: f64) -> HalfPlane {
    HalfPlane::new((yj - yi) * 2.0, yj.norm_sq() - yi.norm_sq() - phi_j + phi_i)
}

fn check_sites(sites: &[Point2], phi: &[f64]) -> Result<()> {
    if sites.len() != phi.len() {
        return Err(Error::InvalidInput(format!(
            "{} sites but {} potentials",
            sites.len(),
            phi.len()
        )));
    }
    if sites.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    if let Some(i) = sites.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!("site {i} is not finite")));
    }
    if let Some(i) = phi.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!("potential {i} is not finite")));
    }
    Ok(())
}

/// Returns the first pair of exactly coinciding sites, if any.
pub fn find_duplicate(sites: &[Point2]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by(|&a, &b| {
        sites[a]
            .x
            .total_cmp(&sites[b].x)
            .then(sites[a].y.total_cmp(&sites[b].y))
    });
    order
        .windows(2)
        .find_map(|w| (sites[w[0]] == sites[w[1]]).then(|| (w[0].min(w[1]), w[0].max(w[1]))))
}

/// Power cell of site `i` clipped to `domain`, by brute force over all other
/// sites.
pub fn power_cell(
    i: usize,
    sites: &[Point2],
    phi: &[f64],
    domain: &ConvexPolygon,
) -> Result<ConvexPolygon> {
    check_sites(sites, phi)?;
    if i >= sites.len() {
        return Err(Error::InvalidInput(format!("site index {i} out of range")));
    }
    let yi = sites[i];
    let tol = LENGTH_TOL * domain.diameter();
    let mut verts: Vec<Point2> = domain.vertices.iter().map(|p| *p - yi).collect();
    let mut tags = vec![BOUNDARY; verts.len()];
    let mut scratch = (Vec::new(), Vec::new());
    for (j, yj) in sites.iter().enumerate() {
        if j == i {
            continue;
        }
        if *yj == yi {
            return Err(Error::DuplicateSites(i.min(j), i.max(j)));
        }
        let h = local_bisector(*yj - yi, phi[i], phi[j]);
        clip_tagged(&mut verts, &mut tags, &h, j, tol, &mut scratch);
    }
    let cell = ConvexPolygon::new(verts).translated(yi);
    if cell.area() < SLIVER_TOL * domain.area() {
        return Ok(ConvexPolygon::empty());
    }
    Ok(cell)
}

/// Boundary segment shared by cells `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub i: usize,
    pub j: usize,
    pub a: Point2,
    pub b: Point2,
}

impl Facet {
    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }
}

/// Power diagram of a weighted point cloud restricted to a convex domain.
#[derive(Clone, Debug, Default)]
pub struct PowerDiagram {
    pub cells: Vec<ConvexPolygon>,
    /// Sorted adjacency lists; symmetric.
    pub neighbors: Vec<Vec<usize>>,
    /// One entry per adjacent pair, sorted by `(i, j)` with `i < j`.
    pub facets: Vec<Facet>,
}

impl PowerDiagram {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn facet(&self, i: usize, j: usize) -> Option<&Facet> {
        let key = (i.min(j), i.max(j));
        self.facets
            .binary_search_by(|f| (f.i, f.j).cmp(&key))
            .ok()
            .map(|k| &self.facets[k])
    }

    /// Length of `∂P_i ∩ ∂P_j`, `None` when the cells are not adjacent.
    pub fn shared_edge_length(&self, i: usize, j: usize) -> Option<f64> {
        self.facet(i, j).map(Facet::length)
    }

    pub fn total_area(&self) -> f64 {
        self.cells.iter().map(ConvexPolygon::area).sum()
    }
}

/// Uniform bucket grid over the sites, used to visit competitors in rings of
/// increasing distance.
struct SiteGrid {
    origin: Point2,
    h: f64,
    nx: usize,
    ny: usize,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl SiteGrid {
    fn new(sites: &[Point2], domain: &ConvexPolygon) -> Self {
        let (mut lo, mut hi) = domain.bbox().unwrap_or((sites[0], sites[0]));
        for p in sites {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let ext = hi - lo;
        let area = (ext.x * ext.y).max(ext.x.max(ext.y).powi(2) * 1e-6);
        let mut h = (area / sites.len() as f64).sqrt();
        if !(h > 0.0) {
            h = 1.0;
        }
        let nx = ((ext.x / h).floor() as usize + 1).min(1 << 16);
        let ny = ((ext.y / h).floor() as usize + 1).min(1 << 16);
        let mut grid = SiteGrid {
            origin: lo,
            h,
            nx,
            ny,
            start: vec![0; nx * ny + 1],
            items: vec![0; sites.len()],
        };
        let keys: Vec<usize> = sites
            .iter()
            .map(|p| {
                let (ix, iy) = grid.bucket(*p);
                iy * nx + ix
            })
            .collect();
        for &k in &keys {
            grid.start[k + 1] += 1;
        }
        for k in 0..nx * ny {
            grid.start[k + 1] += grid.start[k];
        }
        let mut fill = grid.start.clone();
        for (i, &k) in keys.iter().enumerate() {
            grid.items[fill[k]] = i;
            fill[k] += 1;
        }
        grid
    }

    fn bucket(&self, p: Point2) -> (usize, usize) {
        let fx = ((p.x - self.origin.x) / self.h).floor();
        let fy = ((p.y - self.origin.y) / self.h).floor();
        (
            (fx.max(0.0) as usize).min(self.nx - 1),
            (fy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    fn bucket_items(&self, ix: isize, iy: isize) -> &[usize] {
        if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
            return &[];
        }
        let k = iy as usize * self.nx + ix as usize;
        &self.items[self.start[k]..self.start[k + 1]]
    }

    /// Calls `f` on every site in buckets at Chebyshev distance exactly `r`
    /// from `(cx, cy)`.
    fn for_ring(&self, cx: usize, cy: usize, r: usize, mut f: impl FnMut(usize)) {
        let (cx, cy, r) = (cx as isize, cy as isize, r as isize);
        if r == 0 {
            self.bucket_items(cx, cy).iter().for_each(|&j| f(j));
            return;
        }
        for ix in cx - r..=cx + r {
            self.bucket_items(ix, cy - r).iter().for_each(|&j| f(j));
            self.bucket_items(ix, cy + r).iter().for_each(|&j| f(j));
        }
        for iy in cy - r + 1..cy + r {
            self.bucket_items(cx - r, iy).iter().for_each(|&j| f(j));
            self.bucket_items(cx + r, iy).iter().for_each(|&j| f(j));
        }
    }
}

fn max_radius(verts: &[Point2]) -> f64 {
    verts.iter().map(|v| v.norm_sq()).fold(0.0, f64::max).sqrt()
}

type CellWithFacets = (ConvexPolygon, Vec<(usize, Point2, Point2)>);

#[allow(clippy::too_many_arguments)]
fn build_cell(
    i: usize,
    sites: &[Point2],
    phi: &[f64],
    phi_max: f64,
    domain: &ConvexPolygon,
    grid: &SiteGrid,
    merge_tol: f64,
    min_area: f64,
) -> CellWithFacets {
    let yi = sites[i];
    let phi_i = phi[i];
    let mut verts: Vec<Point2> = domain.vertices.iter().map(|p| *p - yi).collect();
    let mut tags = vec![BOUNDARY; verts.len()];
    let mut scratch = (Vec::new(), Vec::new());
    let mut radius = max_radius(&verts);
    let (cx, cy) = grid.bucket(yi);
    let max_ring = grid.nx.max(grid.ny);

    for r in 0..=max_ring {
        if verts.is_empty() {
            break;
        }
        // sites in ring r are at least (r − 1)·h away from y_i
        let reach = radius + (radius * radius + phi_max - phi_i).max(0.0).sqrt();
        if r > 0 && (r - 1) as f64 * grid.h > reach {
            break;
        }
        grid.for_ring(cx, cy, r, |j| {
            if j == i || verts.is_empty() {
                return;
            }
            let d = sites[j] - yi;
            let slack = radius * radius + phi[j] - phi_i;
            if slack <= 0.0 {
                return;
            }
            let dist = d.norm();
            if dist > radius && (dist - radius) * (dist - radius) >= slack {
                return;
            }
            let h = local_bisector(d, phi_i, phi[j]);
            if let ClipOutcome::Changed =
                clip_tagged(&mut verts, &mut tags, &h, j, merge_tol, &mut scratch)
            {
                radius = max_radius(&verts);
            }
        });
    }

    if verts.len() < 3 || signed_area(&verts) < min_area {
        return (ConvexPolygon::empty(), Vec::new());
    }
    let n = verts.len();
    let facets = (0..n)
        .filter(|&k| tags[k] != BOUNDARY)
        .map(|k| (tags[k], verts[k] + yi, verts[(k + 1) % n] + yi))
        .collect();
    (ConvexPolygon::new(verts).translated(yi), facets)
}

/// Power diagram of `(sites, phi)` restricted to `domain`.
pub fn power_diagram(
    sites: &[Point2],
    phi: &[f64],
    domain: &ConvexPolygon,
) -> Result<PowerDiagram> {
    check_sites(sites, phi)?;
    if let Some((i, j)) = find_duplicate(sites) {
        return Err(Error::DuplicateSites(i, j));
    }
    let diam = domain.diameter();
    let merge_tol = LENGTH_TOL * diam;
    let min_area = SLIVER_TOL * domain.area();
    let phi_max = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = SiteGrid::new(sites, domain);

    let built: Vec<CellWithFacets> = (0..sites.len())
        .into_par_iter()
        .map(|i| build_cell(i, sites, phi, phi_max, domain, &grid, merge_tol, min_area))
        .collect();

    // Pairs seen from both sides keep the segment computed by the lower index.
    let mut raw: Vec<(usize, usize, bool, Point2, Point2)> = Vec::new();
    for (i, (cell, facets)) in built.iter().enumerate() {
        if cell.is_empty() {
            continue;
        }
        for &(j, a, b) in facets {
            if built[j].0.is_empty() {
                continue;
            }
            raw.push((i.min(j), i.max(j), i > j, a, b));
        }
    }
    raw.sort_by_key(|x| (x.0, x.1, x.2));
    raw.dedup_by(|later, first| later.0 == first.0 && later.1 == first.1);

    let mut neighbors = vec![Vec::new(); sites.len()];
    let mut facets = Vec::with_capacity(raw.len());
    for (i, j, _, a, b) in raw {
        if a.dist(b) <= merge_tol {
            continue;
        }
        neighbors[i].push(j);
        neighbors[j].push(i);
        facets.push(Facet { i, j, a, b });
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    Ok(PowerDiagram {
        cells: built.into_iter().map(|(c, _)| c).collect(),
        neighbors,
        facets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn same_polygon(a: &ConvexPolygon, b: &ConvexPolygon, tol: f64) -> bool {
        a.len() == b.len()
            && a.vertices()
                .iter()
                .all(|p| b.vertices().iter().any(|q| p.dist(*q) <= tol))
    }

    #[test]
    fn clip_axis_aligned() {
        let sq = ConvexPolygon::unit_square();
        let half = clip(&sq, &HalfPlane::new(Point2::new(1.0, 0.0), 0.5));
        assert!(same_polygon(
            &half,
            &ConvexPolygon::rectangle(0.0, 0.0, 0.5, 1.0),
            1e-15
        ));
        let same = clip(&sq, &HalfPlane::new(Point2::new(1.0, 0.0), 2.0));
        assert_eq!(same, sq);
    }

    #[test]
    fn clip_diagonal_triangle() {
        let tri = clip(
            &ConvexPolygon::unit_square(),
            &HalfPlane::new(Point2::new(1.0, 1.0), 0.5),
        );
        assert_eq!(tri.len(), 3);
        assert!(approx(tri.area(), 0.125, 1e-15));
        assert!(tri.is_convex(1e-12));
    }

    #[test]
    fn clip_to_nothing_and_touching() {
        let sq = ConvexPolygon::unit_square();
        assert!(clip(&sq, &HalfPlane::new(Point2::new(1.0, 0.0), -0.1)).is_empty());
        // touches only the left edge
        assert!(clip(&sq, &HalfPlane::new(Point2::new(1.0, 0.0), 0.0)).is_empty());
        assert!(clip(
            &ConvexPolygon::empty(),
            &HalfPlane::new(Point2::new(1.0, 0.0), 1.0)
        )
        .is_empty());
    }

    #[test]
    fn bisector_cell() {
        let y = [Point2::new(0.25, 0.5), Point2::new(0.75, 0.5)];
        let c = power_cell(0, &y, &[0.0, 0.0], &ConvexPolygon::unit_square()).unwrap();
        assert!(same_polygon(
            &c,
            &ConvexPolygon::rectangle(0.0, 0.0, 0.5, 1.0),
            1e-15
        ));
    }

    #[test]
    fn shifted_bisector_cell() {
        let y = [Point2::new(0.25, 0.5), Point2::new(0.75, 0.5)];
        let c = power_cell(0, &y, &[0.25, 0.0], &ConvexPolygon::unit_square()).unwrap();
        assert!(same_polygon(
            &c,
            &ConvexPolygon::rectangle(0.0, 0.0, 0.75, 1.0),
            1e-14
        ));
    }

    #[test]
    fn single_site_owns_domain() {
        let y = [Point2::new(0.3, 0.1)];
        let dom = ConvexPolygon::unit_square();
        assert_eq!(power_cell(0, &y, &[1.0], &dom).unwrap(), dom);
        let d = power_diagram(&y, &[0.0], &dom).unwrap();
        assert_eq!(d.cells[0].area(), 1.0);
        assert!(d.neighbors[0].is_empty());
    }

    #[test]
    fn duplicate_sites_rejected() {
        let y = [
            Point2::new(0.5, 0.5),
            Point2::new(0.2, 0.2),
            Point2::new(0.5, 0.5),
        ];
        let dom = ConvexPolygon::unit_square();
        assert!(matches!(
            power_cell(0, &y, &[0.0; 3], &dom),
            Err(Error::DuplicateSites(0, 2))
        ));
        assert!(matches!(
            power_diagram(&y, &[0.0; 3], &dom),
            Err(Error::DuplicateSites(0, 2))
        ));
    }

    #[test]
    fn grid_of_four() {
        let y = PointCloud::grid(2, Point2::ZERO, Point2::new(1.0, 1.0));
        let d = power_diagram(&y, &[0.0; 4], &ConvexPolygon::unit_square()).unwrap();
        for (i, c) in d.cells.iter().enumerate() {
            assert!(approx(c.area(), 0.25, 1e-15));
            assert_eq!(d.neighbors[i].len(), 2);
            for &j in &d.neighbors[i] {
                assert!(approx(d.shared_edge_length(i, j).unwrap(), 0.5, 1e-15));
            }
        }
        // diagonal cells meet at a point only
        assert!(d.shared_edge_length(0, 3).is_none());
    }

    #[test]
    fn grid_finds_distant_competitors() {
        // one heavy potential lets a site reach far across the grid
        let y = PointCloud::grid(6, Point2::ZERO, Point2::new(1.0, 1.0));
        let mut phi = vec![0.0; y.len()];
        phi[0] = 0.3;
        let dom = ConvexPolygon::unit_square();
        let d = power_diagram(&y, &phi, &dom).unwrap();
        for i in 0..y.len() {
            let brute = power_cell(i, &y, &phi, &dom).unwrap();
            assert!(same_polygon(&d.cells[i], &brute, 1e-12), "cell {i}");
        }
        assert!(approx(d.total_area(), 1.0, 1e-12));
    }
}
