//! Shape descriptors for the automatic mask filter.
//!
//! All descriptors are computed from exact integer sums where possible so that
//! translating a mask, or rotating its raster by 90°, reproduces the same
//! values bit for bit. Pixel `(r, c)` is treated as the unit square
//! `[c, c+1] × [r, r+1]` with its center at `(c + 0.5, r + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::mask::{connected_components, mask_to_bbox, BinaryMask, Connectivity, MaskError};

/// Identifies the perimeter, hull and symmetry conventions behind the
/// descriptor values. Stored alongside reference statistics.
pub const GEOMETRY_CONVENTION: &str =
    "geom-v1:8-connected-primary-component;crack-perimeter;corner-hull;principal-axis-reflective-iou";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptors {
    pub eccentricity: f64,
    pub circularity: f64,
    pub solidity: f64,
    pub symmetry: f64,
    pub extent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descriptor {
    Eccentricity,
    Circularity,
    Solidity,
    Symmetry,
    Extent,
}

impl Descriptor {
    pub const ALL: [Descriptor; 5] = [
        Descriptor::Eccentricity,
        Descriptor::Circularity,
        Descriptor::Solidity,
        Descriptor::Symmetry,
        Descriptor::Extent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Descriptor::Eccentricity => "eccentricity",
            Descriptor::Circularity => "circularity",
            Descriptor::Solidity => "solidity",
            Descriptor::Symmetry => "symmetry",
            Descriptor::Extent => "extent",
        }
    }
}

impl std::fmt::Display for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl ShapeDescriptors {
    pub fn get(&self, d: Descriptor) -> f64 {
        match d {
            Descriptor::Eccentricity => self.eccentricity,
            Descriptor::Circularity => self.circularity,
            Descriptor::Solidity => self.solidity,
            Descriptor::Symmetry => self.symmetry,
            Descriptor::Extent => self.extent,
        }
    }
}

/// Area, centroid and population covariance of pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub area: usize,
    pub centroid: (f64, f64),
    /// `[[cxx, cxy], [cxy, cyy]]`
    pub covariance: [[f64; 2]; 2],
}

/// Raw integer sums over doubled pixel centers `X = 2c + 1`, `Y = 2r + 1`.
#[derive(Debug, Clone, Copy)]
struct Sums {
    area: i128,
    sx: i128,
    sy: i128,
    sxx: i128,
    syy: i128,
    sxy: i128,
}

impl Sums {
    fn of(mask: &BinaryMask) -> Self {
        let mut s = Sums {
            area: 0,
            sx: 0,
            sy: 0,
            sxx: 0,
            syy: 0,
            sxy: 0,
        };
        for (r, c) in mask.foreground() {
            let x = 2 * c as i128 + 1;
            let y = 2 * r as i128 + 1;
            s.area += 1;
            s.sx += x;
            s.sy += y;
            s.sxx += x * x;
            s.syy += y * y;
            s.sxy += x * y;
        }
        s
    }

    /// Central second moments scaled by `4·A²`.
    fn scaled_cov(&self) -> (i128, i128, i128) {
        (
            self.area * self.sxx - self.sx * self.sx,
            self.area * self.syy - self.sy * self.sy,
            self.area * self.sxy - self.sx * self.sy,
        )
    }
}

pub fn moments(mask: &BinaryMask) -> Result<MomentSummary, MaskError> {
    let s = Sums::of(mask);
    if s.area == 0 {
        return Err(MaskError::EmptyMask);
    }
    let a = s.area as f64;
    let (cxx, cyy, cxy) = s.scaled_cov();
    let scale = 4.0 * a * a;
    Ok(MomentSummary {
        area: s.area as usize,
        centroid: (s.sx as f64 / (2.0 * a), s.sy as f64 / (2.0 * a)),
        covariance: [
            [cxx as f64 / scale, cxy as f64 / scale],
            [cxy as f64 / scale, cyy as f64 / scale],
        ],
    })
}

/// Eigenvalues `(λ1, λ2)` of a symmetric 2×2 matrix, `λ1 ≥ λ2`.
fn eigen2(cxx: f64, cyy: f64, cxy: f64) -> (f64, f64) {
    let half_tr = 0.5 * (cxx + cyy);
    let disc = (0.25 * (cxx - cyy) * (cxx - cyy) + cxy * cxy).sqrt();
    (half_tr + disc, half_tr - disc)
}

/// `sqrt(1 - λ2/λ1)`, or 0 for zero-variance shapes.
pub fn eccentricity(m: &MomentSummary) -> f64 {
    let [[cxx, cxy], [_, cyy]] = m.covariance;
    let (l1, l2) = eigen2(cxx, cyy, cxy);
    if l1 <= 0.0 {
        return 0.0;
    }
    (1.0 - (l2 / l1).clamp(0.0, 1.0)).sqrt()
}

fn eccentricity_exact(s: &Sums) -> f64 {
    let (cxx, cyy, cxy) = s.scaled_cov();
    let (l1, l2) = eigen2(cxx as f64, cyy as f64, cxy as f64);
    if l1 <= 0.0 {
        return 0.0;
    }
    (1.0 - (l2 / l1).clamp(0.0, 1.0)).sqrt()
}

/// Unit pixel edges between foreground and background or the raster border.
pub fn crack_perimeter(mask: &BinaryMask) -> usize {
    let (h, w) = mask.shape();
    let mut edges = 0;
    for (r, c) in mask.foreground() {
        if r == 0 || !mask.get(r - 1, c) {
            edges += 1;
        }
        if r + 1 == h || !mask.get(r + 1, c) {
            edges += 1;
        }
        if c == 0 || !mask.get(r, c - 1) {
            edges += 1;
        }
        if c + 1 == w || !mask.get(r, c + 1) {
            edges += 1;
        }
    }
    edges
}

/// `4π·Area / Perimeter²` with the crack perimeter.
pub fn circularity(mask: &BinaryMask) -> Result<f64, MaskError> {
    let area = mask.area();
    if area == 0 {
        return Err(MaskError::EmptyMask);
    }
    let p = crack_perimeter(mask) as f64;
    Ok(4.0 * std::f64::consts::PI * area as f64 / (p * p))
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (counter-clockwise, no collinear points) via monotone chain.
pub fn convex_hull(mut points: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    points.sort_unstable();
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * points.len());
    for &p in &points {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in points.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Twice the signed shoelace area.
fn shoelace2(poly: &[(i64, i64)]) -> i64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

/// Hull over pixel corners. Only the extreme pixels of each row can
/// contribute hull vertices.
fn corner_hull(mask: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = mask.shape();
    let mut pts = Vec::new();
    for r in 0..h {
        let row = &mask.data()[r * w..(r + 1) * w];
        let first = row.iter().position(|&v| v != 0);
        let last = row.iter().rposition(|&v| v != 0);
        if let (Some(lo), Some(hi)) = (first, last) {
            let (r, lo, hi) = (r as i64, lo as i64, hi as i64 + 1);
            pts.extend([(lo, r), (lo, r + 1), (hi, r), (hi, r + 1)]);
        }
    }
    convex_hull(pts)
}

/// Area of the convex hull of all foreground pixel corners.
pub fn hull_area(mask: &BinaryMask) -> Result<f64, MaskError> {
    if mask.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    Ok(shoelace2(&corner_hull(mask)).abs() as f64 / 2.0)
}

pub fn solidity(mask: &BinaryMask) -> Result<f64, MaskError> {
    let area = mask.area();
    if area == 0 {
        return Err(MaskError::EmptyMask);
    }
    let twice_hull = shoelace2(&corner_hull(mask)).abs();
    Ok((2 * area) as f64 / twice_hull as f64)
}

pub fn extent(mask: &BinaryMask) -> Result<f64, MaskError> {
    let bbox = mask_to_bbox(mask)?;
    Ok(mask.area() as f64 / bbox.area() as f64)
}

/// Candidate pixel indices for a coordinate given in units of `1 / scale`
/// pixels. A point exactly on a pixel edge touches both neighbours.
enum Cells {
    One(i64),
    Two(i64, i64),
}

fn cells_exact(v: i128, scale: i128) -> Cells {
    let k = v.div_euclid(scale) as i64;
    if v.rem_euclid(scale) == 0 {
        Cells::Two(k - 1, k)
    } else {
        Cells::One(k)
    }
}

fn cells_float(v: f64, scale: f64) -> Cells {
    let t = v / scale;
    let k = t.floor();
    if t == k {
        Cells::Two(k as i64 - 1, k as i64)
    } else {
        Cells::One(k as i64)
    }
}

impl Cells {
    fn iter(&self) -> impl Iterator<Item = i64> {
        match *self {
            Cells::One(a) => [Some(a), None],
            Cells::Two(a, b) => [Some(a), Some(b)],
        }
        .into_iter()
        .flatten()
    }
}

enum Reflection {
    /// Integer matrix entries (axis-aligned or diagonal axes).
    Exact([[i128; 2]; 2]),
    General([[f64; 2]; 2]),
}

fn principal_reflections(s: &Sums) -> [Reflection; 2] {
    let (cxx, cyy, cxy) = s.scaled_cov();
    let a = cxx - cyy;
    let b = 2 * cxy;
    if a == 0 && b == 0 {
        // isotropic: take the raster axes
        return [
            Reflection::Exact([[1, 0], [0, -1]]),
            Reflection::Exact([[-1, 0], [0, 1]]),
        ];
    }
    if b == 0 || a == 0 {
        // reflection across the axis at angle θ is [[cos2θ, sin2θ], [sin2θ, -cos2θ]]
        let (c, s) = (a.signum(), b.signum());
        return [
            Reflection::Exact([[c, s], [s, -c]]),
            Reflection::Exact([[-c, -s], [-s, c]]),
        ];
    }
    let (af, bf) = (a as f64, b as f64);
    let r = af.hypot(bf);
    let (c, s) = (af / r, bf / r);
    [
        Reflection::General([[c, s], [s, -c]]),
        Reflection::General([[-c, -s], [-s, c]]),
    ]
}

/// Reflective IoU against the better of the two principal axes through the
/// centroid. Each reflected pixel center is assigned to the pixel containing
/// it; a center landing exactly on a pixel edge counts as a hit if either
/// adjacent pixel is foreground. The score is `m / (2A - m)` with `m` the
/// number of reflected pixels that land on foreground, which is the IoU of
/// the mask with its rasterized reflection.
pub fn symmetry(mask: &BinaryMask) -> Result<f64, MaskError> {
    let s = Sums::of(mask);
    if s.area == 0 {
        return Err(MaskError::EmptyMask);
    }
    Ok(symmetry_with(mask, &s))
}

fn symmetry_with(mask: &BinaryMask, s: &Sums) -> f64 {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let hit = |cx: &Cells, cy: &Cells| {
        cy.iter().any(|y| {
            cx.iter()
                .any(|x| x >= 0 && y >= 0 && x < w && y < h && mask.get(y as usize, x as usize))
        })
    };
    // Coordinates scaled by 2A: a pixel center maps to A·X, the centroid to
    // (sx, sy), and pixel k spans [2A·k, 2A·(k+1)].
    let scale = 2 * s.area;
    let area = s.area;
    let mut best = 0.0f64;
    for refl in principal_reflections(s) {
        let mut matched = 0i128;
        for (r, c) in mask.foreground() {
            let qx = area * (2 * c as i128 + 1) - s.sx;
            let qy = area * (2 * r as i128 + 1) - s.sy;
            let (cx, cy) = match &refl {
                Reflection::Exact(m) => (
                    cells_exact(s.sx + m[0][0] * qx + m[0][1] * qy, scale),
                    cells_exact(s.sy + m[1][0] * qx + m[1][1] * qy, scale),
                ),
                Reflection::General(m) => {
                    let (qx, qy) = (qx as f64, qy as f64);
                    (
                        cells_float(s.sx as f64 + (m[0][0] * qx + m[0][1] * qy), scale as f64),
                        cells_float(s.sy as f64 + (m[1][0] * qx + m[1][1] * qy), scale as f64),
                    )
                }
            };
            if hit(&cx, &cy) {
                matched += 1;
            }
        }
        let iou = matched as f64 / (2 * area - matched) as f64;
        best = best.max(iou);
    }
    best
}

/// All five descriptors on the mask as given (no component extraction).
pub fn describe_component(mask: &BinaryMask) -> Result<ShapeDescriptors, MaskError> {
    let s = Sums::of(mask);
    if s.area == 0 {
        return Err(MaskError::EmptyMask);
    }
    Ok(ShapeDescriptors {
        eccentricity: eccentricity_exact(&s),
        circularity: circularity(mask)?,
        solidity: solidity(mask)?,
        symmetry: symmetry_with(mask, &s),
        extent: extent(mask)?,
    })
}

/// Extracts the largest 8-connected component (ties go to the component
/// encountered first in a row-major scan) and describes it.
pub fn describe(mask: &BinaryMask) -> Result<ShapeDescriptors, MaskError> {
    describe_with(mask, Connectivity::Eight)
}

pub fn describe_with(mask: &BinaryMask, connectivity: Connectivity) -> Result<ShapeDescriptors, MaskError> {
    let labeling = connected_components(mask, connectivity);
    let primary = labeling.largest().ok_or(MaskError::EmptyMask)?;
    if labeling.count() == 1 {
        return describe_component(mask);
    }
    describe_component(&labeling.component_mask(primary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn m(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::from_rows(rows).unwrap()
    }

    fn tromino() -> BinaryMask {
        m(&[&[1, 1], &[1, 0]])
    }

    #[test]
    fn moments_examples() {
        let one = moments(&m(&[&[1, 0], &[0, 0]])).unwrap();
        assert_eq!(one.area, 1);
        assert_eq!(one.centroid, (0.5, 0.5));
        assert_eq!(one.covariance, [[0.0; 2]; 2]);

        let sq = moments(&BinaryMask::ones(2, 2).unwrap()).unwrap();
        assert_eq!(sq.area, 4);
        assert_eq!(sq.centroid, (1.0, 1.0));

        let bar = moments(&BinaryMask::ones(1, 3).unwrap()).unwrap();
        // variance of {0.5, 1.5, 2.5} about 1.5
        assert!((bar.covariance[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bar.covariance[1][1], 0.0);
        assert_eq!(bar.covariance[0][1], 0.0);

        assert_eq!(moments(&BinaryMask::zeros(2, 2).unwrap()), Err(MaskError::EmptyMask));
    }

    #[test]
    fn eccentricity_examples() {
        for s in 1..6 {
            let sq = moments(&BinaryMask::ones(s, s).unwrap()).unwrap();
            assert_eq!(eccentricity(&sq), 0.0);
        }
        for n in 2..6 {
            let bar = moments(&BinaryMask::ones(1, n).unwrap()).unwrap();
            assert_eq!(eccentricity(&bar), 1.0);
        }
        let px = moments(&BinaryMask::ones(1, 1).unwrap()).unwrap();
        assert_eq!(eccentricity(&px), 0.0);
    }

    #[test]
    fn circularity_examples() {
        let sq = BinaryMask::ones(4, 4).unwrap();
        assert_eq!(crack_perimeter(&sq), 16);
        assert!((circularity(&sq).unwrap() - PI / 4.0).abs() < 1e-12);
        assert!((circularity(&BinaryMask::ones(1, 1).unwrap()).unwrap() - PI / 4.0).abs() < 1e-12);
        let bar = BinaryMask::ones(1, 2).unwrap();
        assert_eq!(crack_perimeter(&bar), 6);
        assert!((circularity(&bar).unwrap() - 8.0 * PI / 36.0).abs() < 1e-12);
    }

    #[test]
    fn solidity_examples() {
        for (h, w) in [(1, 1), (3, 5), (4, 4), (7, 2)] {
            assert_eq!(solidity(&BinaryMask::ones(h, w).unwrap()).unwrap(), 1.0);
        }
        assert_eq!(hull_area(&tromino()).unwrap(), 3.5);
        assert!((solidity(&tromino()).unwrap() - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn hull_drops_collinear_points() {
        let hull = convex_hull(vec![(0, 0), (1, 0), (2, 0), (2, 2), (0, 2), (1, 1)]);
        assert_eq!(hull, vec![(0, 0), (2, 0), (2, 2), (0, 2)]);
    }

    #[test]
    fn symmetry_examples() {
        assert_eq!(symmetry(&BinaryMask::ones(3, 3).unwrap()).unwrap(), 1.0);
        assert_eq!(symmetry(&BinaryMask::ones(1, 2).unwrap()).unwrap(), 1.0);
        assert_eq!(symmetry(&tromino()).unwrap(), 1.0);
        // an L with unequal arms has no mirror axis
        let l = BinaryMask::from_fn(8, 8, |r, c| c < 2 || (r >= 6 && c < 4)).unwrap();
        let s = symmetry(&l).unwrap();
        assert!(s < 1.0 && s > 0.0, "{s}");
    }

    #[test]
    fn extent_examples() {
        assert_eq!(extent(&BinaryMask::ones(3, 4).unwrap()).unwrap(), 1.0);
        assert_eq!(extent(&tromino()).unwrap(), 0.75);
        assert_eq!(extent(&m(&[&[0, 1]])).unwrap(), 1.0);
    }

    #[test]
    fn describe_square_and_speck() {
        let sq = BinaryMask::ones(4, 4).unwrap();
        let d = describe(&sq).unwrap();
        assert_eq!(d.eccentricity, 0.0);
        assert!((d.circularity - PI / 4.0).abs() < 1e-12);
        assert_eq!((d.solidity, d.symmetry, d.extent), (1.0, 1.0, 1.0));

        let nine = BinaryMask::ones(3, 3).unwrap();
        let canvas = BinaryMask::from_fn(8, 8, |r, c| (2..5).contains(&r) && (3..6).contains(&c) || (r, c) == (7, 0))
            .unwrap();
        assert_eq!(describe(&canvas).unwrap(), describe(&nine).unwrap());
        assert_eq!(describe(&BinaryMask::zeros(3, 3).unwrap()), Err(MaskError::EmptyMask));
    }
}
