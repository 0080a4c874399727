//! Piecewise-constant probability densities on a pixel grid.
//!
//! Pixel `(c, r)` covers `[c·dx, (c+1)·dx] × [r·dy, (r+1)·dy]`; row 0 is at
//! the bottom of the domain. Integrals over convex polygons are exact up to
//! round-off: each pixel row is clipped out of the polygon, fully covered
//! pixels are summed from per-row prefix sums, and the remaining boundary
//! pixels are clipped individually and integrated with Green's formulas.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom2d::{clip_into, raw_moments, ConvexPolygon, Point2};

/// Integrals of `1`, `x` and `‖x‖²` against the density over a polygon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolygonMoments {
    pub mass: f64,
    pub first: Point2,
    pub second_trace: f64,
}

impl PolygonMoments {
    /// `first / mass`, `None` for a massless polygon.
    pub fn barycenter(&self) -> Option<Point2> {
        (self.mass > 0.0).then(|| self.first / self.mass)
    }

    /// `∫ ‖x − y‖² dρ`, expanded from the stored moments.
    pub fn cost_to(&self, y: Point2) -> f64 {
        if self.mass == 0.0 {
            return 0.0;
        }
        (self.second_trace - 2.0 * y.dot(self.first) + y.norm_sq() * self.mass).max(0.0)
    }

    fn add_local(&mut self, value: f64, m: [f64; 4], o: Point2) {
        // m holds moments relative to o; shift back to global coordinates
        let mass = value * m[0];
        let fx = value * m[1];
        let fy = value * m[2];
        self.mass += mass;
        self.first += Point2::new(fx + o.x * mass, fy + o.y * mass);
        self.second_trace += value * m[3] + 2.0 * (o.x * fx + o.y * fy) + o.norm_sq() * mass;
    }
}

impl std::ops::Add for PolygonMoments {
    type Output = PolygonMoments;
    fn add(self, o: PolygonMoments) -> PolygonMoments {
        PolygonMoments {
            mass: self.mass + o.mass,
            first: self.first + o.first,
            second_trace: self.second_trace + o.second_trace,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Density {
    width: usize,
    height: usize,
    dx: f64,
    dy: f64,
    /// Lower-left corner of the domain.
    origin: Point2,
    /// Row-major, bottom row first; normalized to unit mass.
    values: Vec<f64>,
    /// Per row, `width + 1` prefix sums of `v`, `v·cx` and `v·cx²`.
    prefix: Vec<[f64; 3]>,
    /// Cumulative pixel masses for sampling.
    cumulative: Vec<f64>,
    max_value: f64,
}

impl Density {
    /// Builds a density from nonnegative pixel values (bottom row first) on
    /// `[0, width·dx] × [0, height·dy]`, normalized to unit mass.
    pub fn from_values(
        width: usize,
        height: usize,
        dx: f64,
        dy: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "grid {width}x{height} does not match {} values",
                values.len()
            )));
        }
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidInput("pixel size must be positive".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(
                "pixel values must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = values.iter().sum::<f64>() * dx * dy;
        if !(total > 0.0) {
            return Err(Error::ZeroMass);
        }
        let values: Vec<f64> = values.into_iter().map(|v| v / total).collect();
        Ok(Self::assemble(width, height, dx, dy, values))
    }

    fn assemble(width: usize, height: usize, dx: f64, dy: f64, values: Vec<f64>) -> Self {
        let mut prefix = Vec::with_capacity(height * (width + 1));
        for r in 0..height {
            let mut acc = [0.0; 3];
            prefix.push(acc);
            for c in 0..width {
                let v = values[r * width + c];
                let cx = (c as f64 + 0.5) * dx;
                acc[0] += v;
                acc[1] += v * cx;
                acc[2] += v * cx * cx;
                prefix.push(acc);
            }
        }
        let mut cumulative = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for v in &values {
            acc += v * dx * dy;
            cumulative.push(acc);
        }
        let max_value = values.iter().copied().fold(0.0, f64::max);
        Density {
            width,
            height,
            dx,
            dy,
            origin: Point2::ZERO,
            values,
            prefix,
            cumulative,
            max_value,
        }
    }

    /// Uniform density on `[0,1]²`, stored as a single pixel.
    pub fn uniform() -> Self {
        Self::assemble(1, 1, 1.0, 1.0, vec![1.0])
    }

    /// Uniform density on `[0,1]²` stored on a `resolution²` grid.
    pub fn uniform_grid(resolution: usize) -> Self {
        let h = 1.0 / resolution as f64;
        Self::assemble(
            resolution,
            resolution,
            h,
            h,
            vec![1.0; resolution * resolution],
        )
    }

    /// Samples `f` at pixel centers of a `resolution²` grid on `[0,1]²`.
    pub fn from_fn(resolution: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let h = 1.0 / resolution as f64;
        let mut values = Vec::with_capacity(resolution * resolution);
        for r in 0..resolution {
            let y = (r as f64 + 0.5) * h;
            for c in 0..resolution {
                values.push(f((c as f64 + 0.5) * h, y));
            }
        }
        Self::from_values(resolution, resolution, h, h, values)
    }

    /// `exp(−k((x−½)² + (y−½)²))` on `[0,1]²`, rasterized at pixel centers.
    pub fn analytic_gaussian2(inv4sigma2: f64, resolution: usize) -> Result<Self> {
        if resolution < 16 {
            return Err(Error::InvalidInput("resolution must be at least 16".into()));
        }
        Self::from_fn(resolution, |x, y| {
            (-inv4sigma2 * ((x - 0.5) * (x - 0.5) + (y - 0.5) * (y - 0.5))).exp()
        })
    }

    /// Density of a grayscale image (top row first, as stored in image
    /// files) on `[0,1] × [0, H/W]`. With `gamma_dark`, darker pixels carry
    /// more mass (`255 − gray`).
    pub fn from_image(width: usize, height: usize, gray: &[u8], gamma_dark: bool) -> Result<Self> {
        if width == 0 || height == 0 || gray.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "image {width}x{height} does not match {} pixels",
                gray.len()
            )));
        }
        let mut values = Vec::with_capacity(gray.len());
        for r in 0..height {
            let row = &gray[(height - 1 - r) * width..(height - r) * width];
            values.extend(row.iter().map(|&g| {
                if gamma_dark {
                    f64::from(255 - g)
                } else {
                    f64::from(g)
                }
            }));
        }
        let h = 1.0 / width as f64;
        Self::from_values(width, height, h, h, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> (f64, f64) {
        (self.dx, self.dy)
    }

    /// Normalized pixel value at column `c`, row `r` (row 0 at the bottom).
    pub fn value(&self, c: usize, r: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// `‖ρ‖_∞`, the largest pixel value.
    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn domain(&self) -> ConvexPolygon {
        let o = self.origin;
        ConvexPolygon::rectangle(
            o.x,
            o.y,
            o.x + self.width as f64 * self.dx,
            o.y + self.height as f64 * self.dy,
        )
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    /// The same density moved by `v`.
    pub fn translated(&self, v: Point2) -> Self {
        Density {
            origin: self.origin + v,
            ..self.clone()
        }
    }

    /// Density at a point; points outside the domain read the nearest pixel.
    pub fn value_at(&self, p: Point2) -> f64 {
        self.value_at_local(p - self.origin)
    }

    fn value_at_local(&self, p: Point2) -> f64 {
        let c = clamp_index(p.x / self.dx, self.width);
        let r = clamp_index(p.y / self.dy, self.height);
        self.values[r * self.width + c]
    }

    /// Exact mass, first moment and second moment of the density over a
    /// convex polygon contained in the domain.
    pub fn polygon_moments(&self, poly: &ConvexPolygon) -> PolygonMoments {
        if self.origin == Point2::ZERO {
            return self.local_moments(poly.vertices());
        }
        let o = self.origin;
        let local: Vec<Point2> = poly.vertices().iter().map(|p| *p - o).collect();
        let m = self.local_moments(&local);
        PolygonMoments {
            mass: m.mass,
            first: m.first + o * m.mass,
            second_trace: m.second_trace + 2.0 * o.dot(m.first) + o.norm_sq() * m.mass,
        }
    }

    fn local_moments(&self, v: &[Point2]) -> PolygonMoments {
        let mut out = PolygonMoments::default();
        if v.len() < 3 {
            return out;
        }
        let (lo, hi) = bbox(v);
        let r0 = clamp_index(lo.y / self.dy, self.height);
        let r1 = clamp_index(hi.y / self.dy, self.height);
        let mut strip = Vec::with_capacity(v.len() + 2);
        let mut tmp = Vec::with_capacity(v.len() + 2);
        let mut piece = Vec::with_capacity(v.len() + 4);

        for r in r0..=r1 {
            let y0 = r as f64 * self.dy;
            let y1 = y0 + self.dy;
            let src: &[Point2] = if r0 == r1 {
                v
            } else {
                if r == r0 {
                    clip_into(v, Point2::new(0.0, 1.0), y1, &mut strip);
                } else if r == r1 {
                    clip_into(v, Point2::new(0.0, -1.0), -y0, &mut strip);
                } else {
                    clip_into(v, Point2::new(0.0, -1.0), -y0, &mut tmp);
                    clip_into(&tmp, Point2::new(0.0, 1.0), y1, &mut strip);
                }
                &strip
            };
            if src.len() < 3 {
                continue;
            }
            self.integrate_strip(src, r, y0, y1, &mut tmp, &mut piece, &mut out);
        }
        out
    }

    /// Integrates a convex polygon lying within pixel row `r`.
    #[allow(clippy::too_many_arguments)]
    fn integrate_strip(
        &self,
        q: &[Point2],
        r: usize,
        y0: f64,
        y1: f64,
        tmp: &mut Vec<Point2>,
        piece: &mut Vec<Point2>,
        out: &mut PolygonMoments,
    ) {
        let mut xmin = f64::INFINITY;
        let mut xmax = f64::NEG_INFINITY;
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for p in q {
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
        let c0 = clamp_index(xmin / self.dx, self.width);
        let c1 = clamp_index(xmax / self.dx, self.width);

        // Columns fully inside the strip polygon: the left boundary of a
        // convex region is convex in y, so its maximum is at a strip edge.
        let (mut full0, mut full1) = (c1 + 1, c1 + 1);
        let ytol = 1e-12 * self.dy;
        if ymin <= y0 + ytol && ymax >= y1 - ytol && c1 > c0 + 1 {
            let (bl, br) = x_extent_at(q, ymin);
            let (tl, tr) = x_extent_at(q, ymax);
            let inner_lo = bl.max(tl);
            let inner_hi = br.min(tr);
            let f0 = (inner_lo / self.dx).ceil().max(0.0) as usize;
            let f1 = ((inner_hi / self.dx).floor().max(0.0) as usize).min(self.width);
            if f1 > f0 {
                full0 = f0.max(c0);
                full1 = f1.min(c1 + 1);
            }
        }

        let row = &self.prefix[r * (self.width + 1)..(r + 1) * (self.width + 1)];
        if full1 > full0 && full0 <= c1 {
            let cell = self.dx * self.dy;
            let s0 = row[full1][0] - row[full0][0];
            let s1 = row[full1][1] - row[full0][1];
            let s2 = row[full1][2] - row[full0][2];
            let cy = 0.5 * (y0 + y1);
            let mass = cell * s0;
            out.mass += mass;
            out.first += Point2::new(cell * s1, cy * mass);
            out.second_trace += cell * (s2 + s0 * self.dx * self.dx / 12.0)
                + mass * (cy * cy + self.dy * self.dy / 12.0);
        } else {
            full0 = c1 + 1;
            full1 = c1 + 1;
        }

        let partial = (c0..full0.min(c1 + 1)).chain(full1.max(full0)..=c1);
        for c in partial {
            let value = self.values[r * self.width + c];
            if value == 0.0 {
                continue;
            }
            let x0 = c as f64 * self.dx;
            let x1 = x0 + self.dx;
            let src: &[Point2] = if c0 == c1 {
                q
            } else if c == c0 {
                clip_into(q, Point2::new(1.0, 0.0), x1, piece);
                piece
            } else if c == c1 {
                clip_into(q, Point2::new(-1.0, 0.0), -x0, piece);
                piece
            } else {
                clip_into(q, Point2::new(-1.0, 0.0), -x0, tmp);
                clip_into(tmp, Point2::new(1.0, 0.0), x1, piece);
                piece
            };
            if src.len() < 3 {
                continue;
            }
            let o = Point2::new(x0 + 0.5 * self.dx, 0.5 * (y0 + y1));
            out.add_local(value, raw_moments(src, o), o);
        }
    }

    /// `∫_{poly} ‖x − y‖² dρ(x)`.
    pub fn transport_cost_to_point(&self, poly: &ConvexPolygon, y: Point2) -> f64 {
        self.polygon_moments(poly).cost_to(y)
    }

    /// `∫_{[a,b]} ρ ds`, exact for the piecewise-constant density.
    pub fn segment_integral(&self, a: Point2, b: Point2) -> f64 {
        let (a, b) = (a - self.origin, b - self.origin);
        let len = a.dist(b);
        if len == 0.0 {
            return 0.0;
        }
        let d = b - a;
        let mut ts = vec![0.0, 1.0];
        push_crossings(a.x, d.x, self.dx, self.width, &mut ts);
        push_crossings(a.y, d.y, self.dy, self.height, &mut ts);
        ts.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        for w in ts.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                continue;
            }
            acc += self.value_at_local(a.lerp(b, 0.5 * (w[0] + w[1]))) * dt;
        }
        acc * len
    }

    /// Draws one point: a pixel by mass, then a uniform position inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        let total = *self.cumulative.last().expect("nonempty grid");
        let u: f64 = rng.random::<f64>() * total;
        let k = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.values.len() - 1);
        let (r, c) = (k / self.width, k % self.width);
        let ox: f64 = rng.random();
        let oy: f64 = rng.random();
        self.origin + Point2::new((c as f64 + ox) * self.dx, (r as f64 + oy) * self.dy)
    }
}

fn bbox(v: &[Point2]) -> (Point2, Point2) {
    v.iter().fold(
        (
            Point2::new(f64::INFINITY, f64::INFINITY),
            Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        ),
        |(lo, hi), p| {
            (
                Point2::new(lo.x.min(p.x), lo.y.min(p.y)),
                Point2::new(hi.x.max(p.x), hi.y.max(p.y)),
            )
        },
    )
}

fn clamp_index(t: f64, n: usize) -> usize {
    if !(t > 0.0) {
        0
    } else {
        (t.floor() as usize).min(n - 1)
    }
}

/// Horizontal extent of a convex polygon at height `y` (taken from its
/// vertices at that height, which exist because the strip was clipped there).
fn x_extent_at(q: &[Point2], y: f64) -> (f64, f64) {
    let tol = 1e-12 * (1.0 + y.abs());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in q {
        if (p.y - y).abs() <= tol {
            lo = lo.min(p.x);
            hi = hi.max(p.x);
        }
    }
    (lo, hi)
}

fn push_crossings(start: f64, delta: f64, step: f64, n: usize, ts: &mut Vec<f64>) {
    if delta == 0.0 {
        return;
    }
    let (lo, hi) = if delta > 0.0 {
        (start, start + delta)
    } else {
        (start + delta, start)
    };
    let k0 = (lo / step).ceil().max(1.0) as usize;
    let k1 = ((hi / step).floor().max(0.0) as usize).min(n.saturating_sub(1));
    for k in k0..=k1 {
        let t = (k as f64 * step - start) / delta;
        if t > 0.0 && t < 1.0 {
            ts.push(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SQ: fn() -> ConvexPolygon = ConvexPolygon::unit_square;

    #[test]
    fn single_pixel_image_is_uniform() {
        let d = Density::from_image(1, 1, &[77], false).unwrap();
        let m = d.polygon_moments(&d.domain());
        assert!((m.mass - 1.0).abs() < 1e-15);
        assert_eq!(d.domain(), SQ());
    }

    #[test]
    fn dark_pixel_takes_all_mass() {
        let d = Density::from_image(2, 1, &[0, 255], true).unwrap();
        let m = d.polygon_moments(&ConvexPolygon::rectangle(0.0, 0.0, 0.5, 0.5));
        assert!((m.mass - 1.0).abs() < 1e-15);
        assert_eq!(d.domain(), ConvexPolygon::rectangle(0.0, 0.0, 1.0, 0.5));
    }

    #[test]
    fn flat_image_splits_evenly() {
        let d = Density::from_image(2, 2, &[9; 4], false).unwrap();
        for (x, y) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)] {
            let m = d.polygon_moments(&ConvexPolygon::rectangle(x, y, x + 0.5, y + 0.5));
            assert!((m.mass - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn all_white_image_has_no_mass() {
        assert!(matches!(
            Density::from_image(2, 2, &[255; 4], true),
            Err(Error::ZeroMass)
        ));
    }

    #[test]
    fn image_rows_are_flipped() {
        // top row dark: mass sits in the upper half of the domain
        let d = Density::from_image(1, 2, &[0, 255], true).unwrap();
        let upper = d.polygon_moments(&ConvexPolygon::rectangle(0.0, 1.0, 1.0, 2.0));
        assert!((upper.mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_symmetries() {
        let d = Density::analytic_gaussian2(8.0, 64).unwrap();
        let n = 64;
        for r in 0..n {
            for c in 0..n {
                let v = d.value(c, r);
                assert!((v - d.value(n - 1 - c, r)).abs() <= 1e-12 * v);
                assert!((v - d.value(r, c)).abs() <= 1e-12 * v);
            }
        }
        let left = d.polygon_moments(&ConvexPolygon::rectangle(0.0, 0.0, 0.5, 1.0));
        assert!((left.mass - 0.5).abs() < 1e-12);
        let flat = Density::analytic_gaussian2(0.0, 16).unwrap();
        assert!((flat.max_value() - 1.0).abs() < 1e-12);
        assert!(Density::analytic_gaussian2(8.0, 8).is_err());
    }

    #[test]
    fn rectangle_moments() {
        for d in [Density::uniform(), Density::uniform_grid(7)] {
            let m = d.polygon_moments(&ConvexPolygon::rectangle(0.0, 0.0, 0.5, 1.0));
            assert!((m.mass - 0.5).abs() < 1e-14);
            assert!((m.first.x - 0.125).abs() < 1e-14);
            assert!((m.first.y - 0.25).abs() < 1e-14);
            // ∫∫ x² + y² over [0,½]×[0,1] = 1/24 + 1/6
            assert!((m.second_trace - (1.0 / 24.0 + 1.0 / 6.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn triangle_centroid() {
        let tri = ConvexPolygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ]);
        for d in [Density::uniform(), Density::uniform_grid(13)] {
            let m = d.polygon_moments(&tri);
            assert!((m.mass - 0.5).abs() < 1e-14);
            let b = m.barycenter().unwrap();
            assert!((b.x - 1.0 / 3.0).abs() < 1e-14 && (b.y - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_polygon_has_zero_moments() {
        let d = Density::analytic_gaussian2(8.0, 32).unwrap();
        assert_eq!(
            d.polygon_moments(&ConvexPolygon::empty()),
            PolygonMoments::default()
        );
        assert_eq!(
            d.transport_cost_to_point(&ConvexPolygon::empty(), Point2::new(0.3, 0.3)),
            0.0
        );
    }

    #[test]
    fn transport_cost_closed_forms() {
        let d = Density::uniform_grid(16);
        let c = d.transport_cost_to_point(&SQ(), Point2::new(0.5, 0.5));
        assert!((c - 1.0 / 6.0).abs() < 1e-14);
        let half = ConvexPolygon::rectangle(0.0, 0.0, 0.5, 1.0);
        let c = d.transport_cost_to_point(&half, Point2::new(0.25, 0.5));
        assert!((c - (1.0 / 96.0 + 0.5 / 12.0)).abs() < 1e-14);
    }

    #[test]
    fn segment_integral_matches_fine_sampling() {
        let d = Density::analytic_gaussian2(8.0, 32).unwrap();
        let a = Point2::new(0.05, 0.93);
        let b = Point2::new(0.81, 0.12);
        let n = 200_000;
        let brute: f64 = (0..n)
            .map(|k| d.value_at(a.lerp(b, (k as f64 + 0.5) / n as f64)))
            .sum::<f64>()
            * a.dist(b)
            / n as f64;
        assert!((d.segment_integral(a, b) - brute).abs() < 1e-4 * brute);
        // axis-aligned segments
        let v = d.segment_integral(Point2::new(0.5, 0.0), Point2::new(0.5, 1.0));
        assert!(v > 0.0);
    }

    #[test]
    fn sampling_stays_in_domain_and_follows_mass() {
        let d = Density::from_image(2, 1, &[0, 255], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = d.sample(&mut rng);
            assert!(p.x >= 0.0 && p.x <= 0.5 && p.y >= 0.0 && p.y <= 0.5);
        }
    }
}
