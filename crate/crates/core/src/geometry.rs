//! Random convex scatterers, affine transforms, and rasterization onto
//! square occupancy grids.
//!
//! World coordinates are meters with the object region centered at the
//! origin. Grid rows run along +y: row 0 holds the cells with the smallest
//! y coordinate, column 0 the smallest x.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Radius of the circle the generated vertices lie on (inscribed circle of
/// the 4 m x 4 m object region).
pub const VERTEX_RADIUS: f64 = 2.0;
/// Half side of the object region.
pub const OBJECT_HALF_EXTENT: f64 = 2.0;
pub const MIN_VERTICES: usize = 3;
pub const MAX_VERTICES: usize = 20;
pub const MIN_SCALE: f64 = 0.25;
pub const MAX_SCALE: f64 = 1.0;

const COLLINEAR_TOL: f64 = 1e-12;
const INSIDE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex polygon with counterclockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Builds a polygon from counterclockwise vertices, dropping repeated and
    /// collinear vertices. Fails unless at least three vertices survive and
    /// the result is strictly convex.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let vertices = eliminate_degenerate(vertices);
        if vertices.len() < MIN_VERTICES {
            return Err(Error::Geometry(format!(
                "polygon needs at least {MIN_VERTICES} non-degenerate vertices, got {}",
                vertices.len()
            )));
        }
        let poly = Self { vertices };
        if !poly.is_strictly_convex() {
            return Err(Error::Geometry(
                "vertices do not describe a strictly convex counterclockwise polygon".into(),
            ));
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Every consecutive edge pair turns left.
    pub fn is_strictly_convex(&self) -> bool {
        let n = self.vertices.len();
        n >= 3
            && (0..n).all(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let c = self.vertices[(i + 2) % n];
                cross(a, b, c) > 0.0
            })
    }

    /// Half-plane test against every edge; boundary points count as inside.
    pub fn contains(&self, p: Point) -> bool {
        self.edges().all(|(a, b)| cross(a, b, p) >= -INSIDE_TOL)
    }

    pub fn area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|(a, b)| a.x * b.y - b.x * a.y)
            .sum::<f64>()
    }

    /// (min_x, min_y, max_x, max_y)
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), v| (x0.min(v.x), y0.min(v.y), x1.max(v.x), y1.max(v.y)),
        )
    }

    /// Plain-text vertex list, one `x y` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("{:?} {:?}\n", v.x, v.y));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| {
                    Error::Parse(format!("line {}: expected `x y`, got `{line}`", lineno + 1))
                })
            };
            let x = parse(parts.next())?;
            let y = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse(format!("line {}: trailing tokens", lineno + 1)));
            }
            vertices.push(Point::new(x, y));
        }
        Self::new(vertices)
    }
}

impl fmt::Display for Polygon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn eliminate_degenerate(mut vertices: Vec<Point>) -> Vec<Point> {
    vertices.dedup_by(|a, b| a == b);
    while vertices.len() > 1 && vertices.first() == vertices.last() {
        vertices.pop();
    }
    loop {
        let n = vertices.len();
        if n < 3 {
            return vertices;
        }
        let degenerate = (0..n).find(|&i| {
            let prev = vertices[(i + n - 1) % n];
            let next = vertices[(i + 1) % n];
            cross(prev, vertices[i], next).abs() <= COLLINEAR_TOL
        });
        match degenerate {
            Some(i) => {
                vertices.remove(i);
            }
            None => return vertices,
        }
    }
}

fn check_vertex_count(n_vertices: usize) -> Result<()> {
    if !(MIN_VERTICES..=MAX_VERTICES).contains(&n_vertices) {
        return Err(Error::Parameter(format!(
            "vertex count must lie in [{MIN_VERTICES}, {MAX_VERTICES}], got {n_vertices}"
        )));
    }
    Ok(())
}

/// Polygon with vertices at sorted uniform angles on the radius-2 circle.
/// Draws that leave fewer than three distinct vertices are redrawn whole.
pub fn generate_convex_polygon_with<R: Rng + ?Sized>(n_vertices: usize, rng: &mut R) -> Result<Polygon> {
    check_vertex_count(n_vertices)?;
    loop {
        let mut angles: Vec<f64> = (0..n_vertices).map(|_| rng.gen_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles
            .iter()
            .map(|t| Point::new(VERTEX_RADIUS * t.cos(), VERTEX_RADIUS * t.sin()))
            .collect();
        if let Ok(poly) = Polygon::new(vertices) {
            return Ok(poly);
        }
    }
}

pub fn generate_convex_polygon(n_vertices: usize, seed: u64) -> Result<Polygon> {
    generate_convex_polygon_with(n_vertices, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Rotates about the origin, then scales each axis independently.
pub fn transform_polygon(p: &Polygon, rotation: f64, scale_x: f64, scale_y: f64) -> Result<Polygon> {
    for (name, s) in [("scale_x", scale_x), ("scale_y", scale_y)] {
        if !(MIN_SCALE..=MAX_SCALE).contains(&s) {
            return Err(Error::Parameter(format!(
                "{name} must lie in [{MIN_SCALE}, {MAX_SCALE}], got {s}"
            )));
        }
    }
    if !(0.0..TAU).contains(&rotation) {
        return Err(Error::Parameter(format!("rotation must lie in [0, 2pi), got {rotation}")));
    }
    let (sin, cos) = rotation.sin_cos();
    let vertices = p
        .vertices
        .iter()
        .map(|v| {
            let rx = cos * v.x - sin * v.y;
            let ry = sin * v.x + cos * v.y;
            Point::new(rx * scale_x, ry * scale_y)
        })
        .collect();
    Polygon::new(vertices)
}

/// The parameters drawn for one random scatterer, kept for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomObject {
    pub polygon: Polygon,
    pub base: Polygon,
    pub rotation: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

pub fn sample_random_object_with<R: Rng + ?Sized>(n_vertices: usize, rng: &mut R) -> Result<RandomObject> {
    let base = generate_convex_polygon_with(n_vertices, rng)?;
    let rotation = rng.gen_range(0.0..TAU);
    let scale_x = rng.gen_range(MIN_SCALE..=MAX_SCALE);
    let scale_y = rng.gen_range(MIN_SCALE..=MAX_SCALE);
    let polygon = transform_polygon(&base, rotation, scale_x, scale_y)?;
    Ok(RandomObject { polygon, base, rotation, scale_x, scale_y })
}

/// Generate, rotate uniformly in [0, 2pi), scale each axis uniformly in
/// [0.25, 1].
pub fn sample_random_object(n_vertices: usize, seed: u64) -> Result<Polygon> {
    Ok(sample_random_object_with(n_vertices, &mut ChaCha8Rng::seed_from_u64(seed))?.polygon)
}

/// Square raster centered on the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub extent: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, extent: f64) -> Result<Self> {
        if resolution == 0 || !resolution.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "grid resolution must be a power of two, got {resolution}"
            )));
        }
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::Parameter(format!("grid extent must be positive, got {extent}")));
        }
        Ok(Self { resolution, extent })
    }

    /// 64 x 64 pixels over the 16 m x 16 m extraction slice.
    pub fn desk() -> Self {
        Self { resolution: 64, extent: 16.0 }
    }

    pub fn spacing(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// World coordinate of the center of cell (col, row).
    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        let h = self.spacing();
        let x0 = -0.5 * self.extent;
        Point::new(x0 + (col as f64 + 0.5) * h, x0 + (row as f64 + 0.5) * h)
    }
}

/// Binary scatterer image, row-major with rows along +y.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    resolution: usize,
    extent_bits: u64,
    cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            resolution: spec.resolution,
            extent_bits: spec.extent.to_bits(),
            cells: vec![0; spec.cell_count()],
        }
    }

    /// Cells must be 0 or 1, `resolution^2` of them.
    pub fn from_cells(spec: GridSpec, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != spec.cell_count() {
            return Err(Error::Geometry(format!(
                "expected {} cells, got {}",
                spec.cell_count(),
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::Geometry("occupancy cells must be 0 or 1".into()));
        }
        Ok(Self { resolution: spec.resolution, extent_bits: spec.extent.to_bits(), cells })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec { resolution: self.resolution, extent: f64::from_bits(self.extent_bits) }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.cells[row * self.resolution + col] != 0
    }

    pub fn set(&mut self, col: usize, row: usize, occupied: bool) {
        self.cells[row * self.resolution + col] = occupied as u8;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    pub fn is_vacant(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }

    /// Occupied (col, row) bounding box, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let n = self.resolution;
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for row in 0..n {
            for col in 0..n {
                if self.get(col, row) {
                    bb = Some(match bb {
                        None => (col, row, col, row),
                        Some((c0, r0, c1, r1)) => (c0.min(col), r0.min(row), c1.max(col), r1.max(row)),
                    });
                }
            }
        }
        bb
    }

    /// Counterclockwise quarter turn about the grid center.
    pub fn rotate_quarter(&self) -> Self {
        let n = self.resolution;
        let mut out = self.clone();
        for row in 0..n {
            for col in 0..n {
                // (x, y) -> (-y, x)
                out.set(n - 1 - row, col, self.get(col, row));
            }
        }
        out
    }

    /// Mirror y -> -y.
    pub fn flip_y(&self) -> Self {
        let n = self.resolution;
        let mut out = self.clone();
        for row in 0..n {
            for col in 0..n {
                out.set(col, n - 1 - row, self.get(col, row));
            }
        }
        out
    }

    /// Mirror x -> -x.
    pub fn flip_x(&self) -> Self {
        let n = self.resolution;
        let mut out = self.clone();
        for row in 0..n {
            for col in 0..n {
                out.set(n - 1 - col, row, self.get(col, row));
            }
        }
        out
    }

    /// Bits packed LSB-first in row-major cell order.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.cells.len().div_ceil(8)];
        for (i, &c) in self.cells.iter().enumerate() {
            if c != 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bits(spec: GridSpec, bits: &[u8]) -> Result<Self> {
        let n = spec.cell_count();
        if bits.len() != n.div_ceil(8) {
            return Err(Error::Geometry(format!(
                "packed occupancy needs {} bytes, got {}",
                n.div_ceil(8),
                bits.len()
            )));
        }
        let cells = (0..n).map(|i| (bits[i / 8] >> (i % 8)) & 1).collect();
        Self::from_cells(spec, cells)
    }

    /// Each cell becomes a `factor x factor` block.
    pub fn upsample(&self, factor: usize) -> Vec<u8> {
        let n = self.resolution;
        let m = n * factor;
        let mut out = vec![0u8; m * m];
        for row in 0..m {
            for col in 0..m {
                out[row * m + col] = self.cells[(row / factor) * n + col / factor];
            }
        }
        out
    }
}

/// Cell is occupied iff its center lies inside or on the polygon.
pub fn rasterize(p: &Polygon, spec: GridSpec) -> Result<OccupancyGrid> {
    let half = 0.5 * spec.extent;
    let (x0, y0, x1, y1) = p.bounds();
    if x0 < -half || y0 < -half || x1 > half || y1 > half {
        return Err(Error::Geometry(format!(
            "polygon bounds [{x0}, {x1}] x [{y0}, {y1}] exceed grid extent +/-{half}"
        )));
    }
    let mut grid = OccupancyGrid::empty(spec);
    for row in 0..spec.resolution {
        for col in 0..spec.resolution {
            if p.contains(spec.cell_center(col, row)) {
                grid.set(col, row, true);
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CanonicalShape {
    Bar,
    Square,
    Circle,
    Ellipse,
}

impl CanonicalShape {
    pub const ALL: [CanonicalShape; 4] = [Self::Bar, Self::Square, Self::Circle, Self::Ellipse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bar => "bar",
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Ellipse => "ellipse",
        }
    }
}

impl fmt::Display for CanonicalShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CanonicalShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown shape `{s}` (bar, square, circle, ellipse)")))
    }
}

fn rectangle(half_w: f64, half_h: f64) -> Polygon {
    Polygon::new(vec![
        Point::new(-half_w, -half_h),
        Point::new(half_w, -half_h),
        Point::new(half_w, half_h),
        Point::new(-half_w, half_h),
    ])
    .expect("rectangle is convex")
}

fn ellipse_polygon(a: f64, b: f64, sides: usize) -> Polygon {
    let vertices = (0..sides)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / sides as f64;
            Point::new(a * t.cos(), b * t.sin())
        })
        .collect();
    Polygon::new(vertices).expect("regular polygon is convex")
}

/// Generalization-test shapes: 0.5 m x 3 m bar (long axis along y),
/// 2 m square, 64-gon circle of radius 1.5 m, 64-gon ellipse with semi-axes
/// 2 m (x) and 1 m (y).
pub fn canonical_shape(kind: CanonicalShape) -> Polygon {
    match kind {
        CanonicalShape::Bar => rectangle(0.25, 1.5),
        CanonicalShape::Square => rectangle(1.0, 1.0),
        CanonicalShape::Circle => ellipse_polygon(1.5, 1.5, 64),
        CanonicalShape::Ellipse => ellipse_polygon(2.0, 1.0, 64),
    }
}
