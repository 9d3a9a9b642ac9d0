//! Scribble strokes: geometry, rasterization, padded boxes and boundary cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Number of uniform parameter steps used to flatten a Bezier curve.
pub const BEZIER_SEGMENTS: usize = 64;

/// Fraction of each box dimension added as padding in total (split over both sides).
pub const DEFAULT_BBOX_PADDING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeKind {
    Polyline,
    Bezier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleGeometry {
    kind: StrokeKind,
    points: Vec<(f64, f64)>,
    thickness: u32,
}

impl ScribbleGeometry {
    pub fn new(kind: StrokeKind, points: Vec<(f64, f64)>, thickness: u32) -> Result<Self> {
        let min_points = match kind {
            StrokeKind::Polyline => 2,
            StrokeKind::Bezier => 3,
        };
        if points.len() < min_points {
            return Err(Error::Geometry(format!(
                "{kind:?} needs at least {min_points} points, got {}",
                points.len()
            )));
        }
        if thickness == 0 {
            return Err(Error::Geometry("thickness must be at least 1".into()));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Geometry("non-finite coordinate".into()));
        }
        if points.iter().all(|p| *p == points[0]) {
            return Err(Error::Geometry("all points identical".into()));
        }
        Ok(Self {
            kind,
            points,
            thickness,
        })
    }

    pub fn polyline(points: Vec<(f64, f64)>, thickness: u32) -> Result<Self> {
        Self::new(StrokeKind::Polyline, points, thickness)
    }

    pub fn bezier(points: Vec<(f64, f64)>, thickness: u32) -> Result<Self> {
        Self::new(StrokeKind::Bezier, points, thickness)
    }

    pub fn kind(&self) -> StrokeKind {
        self.kind
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn thickness(&self) -> u32 {
        self.thickness
    }

    /// The path as a polyline: Bezier curves are sampled at `BEZIER_SEGMENTS + 1` parameters.
    pub fn flatten(&self) -> Vec<(f64, f64)> {
        match self.kind {
            StrokeKind::Polyline => self.points.clone(),
            StrokeKind::Bezier => (0..=BEZIER_SEGMENTS)
                .map(|i| de_casteljau(&self.points, i as f64 / BEZIER_SEGMENTS as f64))
                .collect(),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        let thickness = ((self.thickness as f64) * sx.max(sy)).round().max(1.0) as u32;
        Self {
            kind: self.kind,
            points: self.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
            thickness,
        }
    }
}

fn de_casteljau(points: &[(f64, f64)], t: f64) -> (f64, f64) {
    let mut work = points.to_vec();
    for level in (1..work.len()).rev() {
        for i in 0..level {
            work[i] = (
                work[i].0 + (work[i + 1].0 - work[i].0) * t,
                work[i].1 + (work[i + 1].1 - work[i].1) * t,
            );
        }
    }
    work[0]
}

/// Integer cells of the segment between two cells, endpoints included.
fn bresenham(a: (i64, i64), b: (i64, i64), mut visit: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        visit(x, y);
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Strokes the geometry into a `width x height` mask.
///
/// Vertices are rounded to the nearest cell, consecutive vertices joined with
/// Bresenham lines, and every path cell dilated by a Chebyshev radius of
/// `thickness / 2`. Cells outside the image are dropped.
pub fn rasterize(geometry: &ScribbleGeometry, width: usize, height: usize) -> Result<Mask> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyGrid);
    }
    let path: Vec<(i64, i64)> = geometry
        .flatten()
        .into_iter()
        .map(|(x, y)| (x.round() as i64, y.round() as i64))
        .collect();
    let radius = (geometry.thickness / 2) as i64;
    let mut mask = Mask::new(width, height);
    let (w, h) = (width as i64, height as i64);
    let mut stamp = |cx: i64, cy: i64| {
        for y in (cy - radius).max(0)..=(cy + radius).min(h - 1) {
            for x in (cx - radius).max(0)..=(cx + radius).min(w - 1) {
                mask.set(x as usize, y as usize, true);
            }
        }
    };
    if path.len() == 1 {
        stamp(path[0].0, path[0].1);
    }
    for pair in path.windows(2) {
        bresenham(pair[0], pair[1], &mut stamp);
    }
    if mask.is_empty() {
        return Err(Error::Geometry("stroke lies entirely outside the image".into()));
    }
    Ok(mask)
}

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

pub fn tight_bbox(mask: &Mask) -> Result<BBox> {
    let mut cells = mask.cells();
    let (x, y) = cells.next().ok_or(Error::EmptyMask)?;
    let mut b = BBox {
        x0: x,
        y0: y,
        x1: x,
        y1: y,
    };
    for (x, y) in cells {
        b.x0 = b.x0.min(x);
        b.x1 = b.x1.max(x);
        b.y0 = b.y0.min(y);
        b.y1 = b.y1.max(y);
    }
    Ok(b)
}

/// Tight box of the set cells, each side pushed out by `pad_fraction / 2` of
/// the box extent (floor on the min side, ceil on the max side), then clipped.
pub fn padded_bbox(mask: &Mask, pad_fraction: f64) -> Result<BBox> {
    let b = tight_bbox(mask)?;
    let pad_x = 0.5 * pad_fraction * (b.x1 - b.x0) as f64;
    let pad_y = 0.5 * pad_fraction * (b.y1 - b.y0) as f64;
    let lo = |v: usize, pad: f64| (v as f64 - pad).floor().max(0.0) as usize;
    let hi = |v: usize, pad: f64, limit: usize| ((v as f64 + pad).ceil() as usize).min(limit - 1);
    Ok(BBox {
        x0: lo(b.x0, pad_x),
        y0: lo(b.y0, pad_y),
        x1: hi(b.x1, pad_x, mask.width()),
        y1: hi(b.y1, pad_y, mask.height()),
    })
}

#[inline]
pub(crate) fn neighbors8(
    x: usize,
    y: usize,
    width: usize,
    height: usize,
) -> impl Iterator<Item = Option<(usize, usize)>> {
    const OFFSETS: [(i64, i64); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (-1, 0),
        (1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
    ];
    OFFSETS.iter().map(move |&(dx, dy)| {
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        (nx >= 0 && ny >= 0 && nx < width as i64 && ny < height as i64)
            .then_some((nx as usize, ny as usize))
    })
}

/// Set cells with at least one unset 8-neighbour; outside the grid counts as unset.
pub fn boundary_anchors(region: &Mask) -> Result<Vec<(usize, usize)>> {
    if region.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (w, h) = region.shape();
    Ok(region
        .cells()
        .filter(|&(x, y)| {
            neighbors8(x, y, w, h).any(|n| match n {
                None => true,
                Some((nx, ny)) => !region.get(nx, ny),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scribble {
    pub geometry: ScribbleGeometry,
    pub mask: Mask,
    pub tokens: Vec<String>,
}

impl Scribble {
    pub fn new(geometry: ScribbleGeometry, tokens: Vec<String>, width: usize, height: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("scribble needs at least one token".into()));
        }
        let mask = rasterize(&geometry, width, height)?;
        Ok(Self {
            geometry,
            mask,
            tokens,
        })
    }

    /// Same scribble, different region (e.g. after propagation).
    pub fn with_mask(&self, mask: Mask) -> Self {
        Self {
            geometry: self.geometry.clone(),
            mask,
            tokens: self.tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleSet {
    width: usize,
    height: usize,
    scribbles: Vec<Scribble>,
}

impl ScribbleSet {
    pub fn new(width: usize, height: usize, scribbles: Vec<Scribble>) -> Result<Self> {
        if let Some(s) = scribbles.iter().find(|s| s.mask.shape() != (width, height)) {
            return Err(Error::ShapeMismatch(format!(
                "scribble mask {:?} in a {width}x{height} set",
                s.mask.shape()
            )));
        }
        if scribbles.iter().any(|s| s.mask.is_empty()) {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            width,
            height,
            scribbles,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scribbles(&self) -> &[Scribble] {
        &self.scribbles
    }

    pub fn len(&self) -> usize {
        self.scribbles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scribbles.is_empty()
    }

    /// Replaces every region, keeping geometry and tokens.
    pub fn with_masks(&self, masks: Vec<Mask>) -> Result<Self> {
        if masks.len() != self.scribbles.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} masks for {} scribbles",
                masks.len(),
                self.scribbles.len()
            )));
        }
        let scribbles = self
            .scribbles
            .iter()
            .zip(masks)
            .map(|(s, m)| s.with_mask(m))
            .collect();
        Self::new(self.width, self.height, scribbles)
    }

    /// Builds the set from a parsed scribble file, rescaling coordinates to `width x height`.
    pub fn from_file(file: &ScribbleFile, width: usize, height: usize) -> Result<Self> {
        if file.width == 0 || file.height == 0 {
            return Err(Error::EmptyGrid);
        }
        let sx = width as f64 / file.width as f64;
        let sy = height as f64 / file.height as f64;
        let scribbles = file
            .scribbles
            .iter()
            .map(|entry| {
                let points = entry.points.iter().map(|p| (p[0], p[1])).collect();
                let geometry = ScribbleGeometry::new(entry.kind, points, entry.thickness)?.scaled(sx, sy);
                Scribble::new(geometry, entry.tokens.clone(), width, height)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, scribbles)
    }
}

/// On-disk scribble description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScribbleFile {
    pub width: usize,
    pub height: usize,
    pub scribbles: Vec<ScribbleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScribbleEntry {
    pub tokens: Vec<String>,
    pub kind: StrokeKind,
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_thickness")]
    pub thickness: u32,
}

fn default_thickness() -> u32 {
    1
}

impl ScribbleFile {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
