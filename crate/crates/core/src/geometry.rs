//! Planar geometry for text regions: polygons, axis-aligned boxes and bit
//! masks, with the intersection-over-union measures used for matching,
//! suppression and evaluation.
//!
//! Polygons are stored counter-clockwise (positive shoelace area in image
//! coordinates). Convex intersections use Sutherland-Hodgman clipping;
//! non-convex operands are split into ear-clipped triangles first and the
//! convex pieces are clipped pairwise.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Twice the signed area of triangle `(a, b, c)`; positive when counter-clockwise.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (points[i], points[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        })
        .sum();
    twice / 2.0
}

/// A simple polygon with counter-clockwise vertex order.
///
/// Vertices may touch at isolated points (as contours of diagonally connected
/// pixels do), but edges never properly cross.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Degenerate("polygon has non-finite coordinates".into()));
        }
        let mut vertices = vertices;
        vertices.dedup();
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::Degenerate(format!(
                "polygon needs at least 3 distinct vertices, got {}",
                vertices.len()
            )));
        }
        let area = signed_area(&vertices);
        if area == 0.0 {
            return Err(Error::Degenerate("polygon has zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        if let Some((i, j)) = first_crossing(&vertices) {
            return Err(Error::Degenerate(format!("polygon edges {i} and {j} cross")));
        }
        Ok(Self { vertices })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::from_coords(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    /// Wraps vertices already known to be counter-clockwise and convex.
    fn from_ccw_unchecked(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]) >= 0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }

    /// Uniform scaling about the origin; `factor` must be positive.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(invalid("polygon scale", format!("factor must be positive, got {factor}")));
        }
        Ok(Self {
            vertices: self.vertices.iter().map(|p| Point::new(p.x * factor, p.y * factor)).collect(),
        })
    }

    pub fn bounds(&self) -> AxisBox {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        AxisBox {
            xmin: x0,
            ymin: y0,
            xmax: x1,
            ymax: y1,
        }
    }

    /// Convex pieces whose interiors are disjoint and whose union is the polygon.
    fn convex_pieces(&self) -> Vec<Polygon> {
        if self.is_convex() {
            return vec![self.clone()];
        }
        triangulate(&self.vertices)
            .into_iter()
            .map(|t| Polygon::from_ccw_unchecked(t.to_vec()))
            .collect()
    }
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(a, b, c);
    let d2 = cross(a, b, d);
    let d3 = cross(c, d, a);
    let d4 = cross(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn first_crossing(v: &[Point]) -> Option<(usize, usize)> {
    let n = v.len();
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

fn in_triangle_closed(p: Point, a: Point, b: Point, c: Point) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a counter-clockwise simple polygon.
fn triangulate(vertices: &[Point]) -> Vec<[Point; 3]> {
    let mut ring: Vec<Point> = vertices.to_vec();
    let mut triangles = Vec::with_capacity(ring.len().saturating_sub(2));
    while ring.len() > 3 {
        let n = ring.len();
        let mut clipped = false;
        // zero-area corners carry no area and only confuse the ear test
        for i in 0..n {
            let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
            if cross(a, b, c) == 0.0 {
                ring.remove(i);
                clipped = true;
                break;
            }
        }
        if clipped {
            continue;
        }
        for i in 0..n {
            let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
            if cross(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = ring
                .iter()
                .any(|&p| p != a && p != b && p != c && in_triangle_closed(p, a, b, c));
            if !blocked {
                triangles.push([a, b, c]);
                ring.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            // numerically stuck: cut the most convex corner
            let i = (0..n)
                .max_by(|&i, &j| {
                    let ci = cross(ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
                    let cj = cross(ring[(j + n - 1) % n], ring[j], ring[(j + 1) % n]);
                    ci.total_cmp(&cj)
                })
                .unwrap();
            triangles.push([ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]]);
            ring.remove(i);
        }
    }
    if ring.len() == 3 && cross(ring[0], ring[1], ring[2]) > 0.0 {
        triangles.push([ring[0], ring[1], ring[2]]);
    }
    triangles
}

/// Sutherland-Hodgman: clip convex `subject` to convex counter-clockwise `clip`.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % m]);
        let input = std::mem::take(&mut output);
        let k = input.len();
        for i in 0..k {
            let (p, q) = (input[i], input[(i + 1) % k]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                output.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                output.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
            }
        }
    }
    output
}

fn boxes_touch(a: &AxisBox, b: &AxisBox) -> bool {
    a.xmin < b.xmax && b.xmin < a.xmax && a.ymin < b.ymax && b.ymin < a.ymax
}

/// Shoelace area of `p`: positive for counter-clockwise polygons.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

/// The intersection region of two polygons as a list of convex pieces with
/// disjoint interiors. Convex operands yield at most one piece.
pub fn polygon_intersection(a: &Polygon, b: &Polygon) -> Vec<Polygon> {
    if !boxes_touch(&a.bounds(), &b.bounds()) {
        return Vec::new();
    }
    let floor = 1e-12 * a.area().max(b.area());
    let pieces_a = a.convex_pieces();
    let pieces_b = b.convex_pieces();
    let bounds_b: Vec<AxisBox> = pieces_b.iter().map(Polygon::bounds).collect();
    let mut out = Vec::new();
    for pa in &pieces_a {
        let ba = pa.bounds();
        for (pb, bb) in pieces_b.iter().zip(&bounds_b) {
            if !boxes_touch(&ba, bb) {
                continue;
            }
            let mut clipped = clip_convex(pa.vertices(), pb.vertices());
            clipped.dedup();
            while clipped.len() > 1 && clipped.first() == clipped.last() {
                clipped.pop();
            }
            if clipped.len() >= 3 && signed_area(&clipped) > floor {
                out.push(Polygon::from_ccw_unchecked(clipped));
            }
        }
    }
    out
}

fn vertex_order(a: &Polygon, b: &Polygon) -> std::cmp::Ordering {
    let key = |p: &Polygon| -> Vec<(u64, u64)> {
        p.vertices.iter().map(|v| (v.x.to_bits(), v.y.to_bits())).collect()
    };
    key(a).cmp(&key(b))
}

/// `|a ∩ b| / |a ∪ b|` for two polygons.
///
/// Operands are put in a canonical order first, so the result is bitwise
/// symmetric in its arguments.
pub fn iou_polygon(a: &Polygon, b: &Polygon) -> Result<f64> {
    let (a, b) = if vertex_order(a, b).is_gt() { (b, a) } else { (a, b) };
    let inter: f64 = polygon_intersection(a, b).iter().map(Polygon::area).sum();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(Error::Degenerate("polygon union has zero area".into()));
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Axis-aligned box with `xmin < xmax` and `ymin < ymax`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl AxisBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let finite = [xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite());
        if !finite || xmin >= xmax || ymin >= ymax {
            return Err(Error::Degenerate(format!(
                "box [{xmin}, {ymin}, {xmax}, {ymax}] is empty or non-finite"
            )));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Self::new(self.xmin * factor, self.ymin * factor, self.xmax * factor, self.ymax * factor)
    }

    /// True when `inner` lies within `self` grown by `slack` on every side.
    pub fn encloses(&self, inner: &AxisBox, slack: f64) -> bool {
        inner.xmin >= self.xmin - slack
            && inner.ymin >= self.ymin - slack
            && inner.xmax <= self.xmax + slack
            && inner.ymax <= self.ymax + slack
    }
}

/// Standard interval-overlap IoU of two boxes.
pub fn iou_box(a: &AxisBox, b: &AxisBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A row-major binary raster of `width × height` pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width * height != bits.len() {
            return Err(Error::ShapeMismatch {
                op: "bitmask",
                dim: "pixel count",
                expected: width * height,
                found: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BitMask, op: &'static str) -> Result<()> {
        if self.width != other.width {
            return Err(Error::ShapeMismatch {
                op,
                dim: "width",
                expected: self.width,
                found: other.width,
            });
        }
        if self.height != other.height {
            return Err(Error::ShapeMismatch {
                op,
                dim: "height",
                expected: self.height,
                found: other.height,
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        self.check_dims(other, "mask and")?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn or(&self, other: &BitMask) -> Result<BitMask> {
        self.check_dims(other, "mask or")?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.width == other.width && self.height == other.height && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Pixel-aligned bounding box of the foreground, `None` when empty.
    pub fn bounding_box(&self) -> Option<AxisBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some(AxisBox {
            xmin: x0 as f64,
            ymin: y0 as f64,
            xmax: x1 as f64,
            ymax: y1 as f64,
        })
    }
}

/// `popcount(a ∧ b) / popcount(a ∨ b)`; two empty masks score 0.
pub fn iou_mask(a: &BitMask, b: &BitMask) -> Result<f64> {
    a.check_dims(b, "iou_mask")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Pixel-centre rasterisation with the even-odd rule.
///
/// Pixel `(x, y)` is set when `(x + 0.5, y + 0.5)` is inside `p`. Vertices may
/// stray at most one pixel outside the canvas.
pub fn polygon_to_mask(p: &Polygon, width: usize, height: usize) -> Result<BitMask> {
    if width == 0 || height == 0 {
        return Err(invalid("polygon_to_mask", "canvas has zero size"));
    }
    let b = p.bounds();
    if b.xmin < -1.0 || b.ymin < -1.0 || b.xmax > width as f64 + 1.0 || b.ymax > height as f64 + 1.0 {
        return Err(invalid(
            "polygon_to_mask",
            format!("polygon bounds {:?} exceed a {width}x{height} canvas", b.to_array()),
        ));
    }
    let mut mask = BitMask::empty(width, height);
    let v = p.vertices();
    let n = v.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let cy = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, c) = (v[i], v[(i + 1) % n]);
            if (a.y > cy) != (c.y > cy) {
                xs.push(a.x + (cy - a.y) / (c.y - a.y) * (c.x - a.x));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centres strictly right of the entering crossing, up to the leaving one
            let start = (pair[0] - 0.5).floor() + 1.0;
            let end = (pair[1] - 0.5).floor();
            let (start, end) = (start.max(0.0), end.min(width as f64 - 1.0));
            if start <= end {
                for x in start as usize..=end as usize {
                    mask.set(x, y, true);
                }
            }
        }
    }
    Ok(mask)
}

/// 8-connected foreground components, each as a list of pixel indices in scan order.
fn components(m: &BitMask) -> Vec<Vec<usize>> {
    let (w, h) = (m.width, m.height);
    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !m.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.bits[j] && label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(pixels);
    }
    out
}

type Vertex = (i64, i64);

/// Outer boundary of one component as a closed loop of grid vertices.
fn trace_outer(pixels: &[usize], width: usize) -> Option<Vec<Vertex>> {
    let inside: std::collections::HashSet<(i64, i64)> = pixels
        .iter()
        .map(|&i| ((i % width) as i64, (i / width) as i64))
        .collect();
    // directed unit edges with the component on their left
    let mut edges: Vec<(Vertex, Vertex)> = Vec::new();
    for &i in pixels {
        let (x, y) = ((i % width) as i64, (i / width) as i64);
        if !inside.contains(&(x, y - 1)) {
            edges.push(((x, y), (x + 1, y)));
        }
        if !inside.contains(&(x + 1, y)) {
            edges.push(((x + 1, y), (x + 1, y + 1)));
        }
        if !inside.contains(&(x, y + 1)) {
            edges.push(((x + 1, y + 1), (x, y + 1)));
        }
        if !inside.contains(&(x - 1, y)) {
            edges.push(((x, y + 1), (x, y)));
        }
    }
    let mut outgoing: HashMap<Vertex, Vec<usize>> = HashMap::new();
    for (k, e) in edges.iter().enumerate() {
        outgoing.entry(e.0).or_default().push(k);
    }
    let mut used = vec![false; edges.len()];
    let mut best: Option<(i64, Vec<Vertex>)> = None;
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut current = start;
        loop {
            used[current] = true;
            let (from, to) = edges[current];
            ring.push(from);
            let dir = (to.0 - from.0, to.1 - from.1);
            let candidates = &outgoing[&to];
            // at a pinch point turn right, which joins diagonally touching pixels
            let next = candidates
                .iter()
                .copied()
                .filter(|&k| !used[k] || k == start)
                .min_by_key(|&k| {
                    let (a, b) = edges[k];
                    let out = (b.0 - a.0, b.1 - a.1);
                    dir.0 * out.1 - dir.1 * out.0
                });
            match next {
                Some(k) if k == start => break,
                Some(k) => current = k,
                None => break,
            }
        }
        let twice: i64 = (0..ring.len())
            .map(|i| {
                let (p, q) = (ring[i], ring[(i + 1) % ring.len()]);
                p.0 * q.1 - q.0 * p.1
            })
            .sum();
        if twice > 0 && best.as_ref().is_none_or(|(a, _)| twice > *a) {
            best = Some((twice, ring));
        }
    }
    best.map(|(_, ring)| ring)
}

fn merge_collinear(ring: Vec<Vertex>) -> Vec<Vertex> {
    let mut ring = ring;
    loop {
        let n = ring.len();
        let keep: Vec<bool> = (0..n)
            .map(|i| {
                let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
                let d1 = (b.0 - a.0, b.1 - a.1);
                let d2 = (c.0 - b.0, c.1 - b.1);
                d1.0 * d2.1 - d1.1 * d2.0 != 0 || d1.0 * d2.0 + d1.1 * d2.1 < 0
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return ring;
        }
        ring = ring.into_iter().zip(keep).filter_map(|(v, k)| k.then_some(v)).collect();
    }
}

/// Outer contours of the 8-connected foreground components, one
/// counter-clockwise polygon per component in scan order of first pixel.
/// Contours follow pixel edges; holes are ignored.
pub fn mask_to_polygons(m: &BitMask) -> Vec<Polygon> {
    components(m)
        .iter()
        .filter_map(|pixels| trace_outer(pixels, m.width))
        .filter_map(|ring| {
            let points = merge_collinear(ring)
                .into_iter()
                .map(|(x, y)| Point::new(x as f64, y as f64))
                .collect();
            Polygon::new(points).ok()
        })
        .collect()
}

/// The contour enclosing the most area, first in scan order on ties.
pub fn largest_contour(m: &BitMask) -> Option<Polygon> {
    mask_to_polygons(m)
        .into_iter()
        .reduce(|best, p| if p.area() > best.area() { p } else { best })
}
