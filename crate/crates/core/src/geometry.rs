//! Planar rigid frames, point sets and BEV occupancy grids.
//!
//! Everything lives in the ground plane; height is dropped. A transform
//! named `a_from_b` maps coordinates expressed in frame `b` into frame `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// SE(2) element `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    rotation: [[f64; 2]; 2],
    translation: [f64; 2],
}

impl Default for RigidTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform2D {
    pub fn identity() -> Self {
        RigidTransform2D {
            rotation: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    /// Rotation by `theta` radians (counter-clockwise) followed by translation.
    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        RigidTransform2D {
            rotation: [[c, -s], [s, c]],
            translation: [tx, ty],
        }
    }

    /// Builds a transform from an explicit rotation matrix, which must be
    /// orthonormal with determinant +1 to within 1e-12.
    pub fn from_parts(rotation: [[f64; 2]; 2], translation: [f64; 2]) -> Result<Self> {
        let t = RigidTransform2D {
            rotation,
            translation,
        };
        if !t.is_valid(1e-12) {
            return Err(Error::Contract("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(t)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let rtr = [
            [r[0][0] * r[0][0] + r[1][0] * r[1][0], r[0][0] * r[0][1] + r[1][0] * r[1][1]],
            [r[0][1] * r[0][0] + r[1][1] * r[1][0], r[0][1] * r[0][1] + r[1][1] * r[1][1]],
        ];
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        let finite = r.iter().flatten().chain(&self.translation).all(|v| v.is_finite());
        finite
            && (rtr[0][0] - 1.0).abs() <= tol
            && (rtr[1][1] - 1.0).abs() <= tol
            && rtr[0][1].abs() <= tol
            && rtr[1][0].abs() <= tol
            && (det - 1.0).abs() <= tol
    }

    pub fn rotation(&self) -> [[f64; 2]; 2] {
        self.rotation
    }

    pub fn translation(&self) -> [f64; 2] {
        self.translation
    }

    pub fn angle(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + self.translation[1],
        ]
    }

    /// Rotates a direction without translating it.
    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let r = &self.rotation;
        [r[0][0] * v[0] + r[0][1] * v[1], r[1][0] * v[0] + r[1][1] * v[1]]
    }

    pub fn apply(&self, pts: &PointSet2D) -> PointSet2D {
        PointSet2D {
            points: pts.points.iter().map(|&p| self.apply_point(p)).collect(),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform2D) -> RigidTransform2D {
        let a = &self.rotation;
        let b = &other.rotation;
        let rotation = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        RigidTransform2D {
            rotation,
            translation: self.apply_point(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform2D {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
        let t = self.translation;
        RigidTransform2D {
            rotation: rt,
            translation: [
                -(rt[0][0] * t[0] + rt[0][1] * t[1]),
                -(rt[1][0] * t[0] + rt[1][1] * t[1]),
            ],
        }
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn with_scaled_translation(&self, s: f64) -> RigidTransform2D {
        RigidTransform2D {
            rotation: self.rotation,
            translation: [self.translation[0] * s, self.translation[1] * s],
        }
    }

    /// 1x6 row: rotation in row-major order, then translation.
    pub fn rot_feature(&self) -> Matrix {
        let r = &self.rotation;
        Matrix::row_vector(&[
            r[0][0],
            r[0][1],
            r[1][0],
            r[1][1],
            self.translation[0],
            self.translation[1],
        ])
    }
}

pub fn apply(t: &RigidTransform2D, pts: &PointSet2D) -> PointSet2D {
    t.apply(pts)
}

pub fn compose(a: &RigidTransform2D, b: &RigidTransform2D) -> RigidTransform2D {
    a.compose(b)
}

pub fn invert(t: &RigidTransform2D) -> RigidTransform2D {
    t.inverse()
}

pub fn rot_feature(t: &RigidTransform2D) -> Matrix {
    t.rot_feature()
}

/// Ordered planar points in metres.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet2D {
    pub points: Vec<[f64; 2]>,
}

impl PointSet2D {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite point coordinate".into()));
        }
        Ok(PointSet2D { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// n×2 matrix, one point per row.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.points.len(),
            2,
            self.points.iter().flat_map(|p| [p[0], p[1]]).collect(),
        )
        .expect("finite points")
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols() != 2 {
            return Err(Error::dim("PointSet2D::from_matrix", "expected two columns"));
        }
        Self::new((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1)]).collect())
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]` in an agent's frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRange {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PerceptionRange {
    pub const EGO: PerceptionRange = PerceptionRange {
        x_min: -51.2,
        y_min: -51.2,
        x_max: 51.2,
        y_max: 51.2,
    };
    pub const INFRASTRUCTURE: PerceptionRange = PerceptionRange {
        x_min: 0.0,
        y_min: -51.2,
        x_max: 102.4,
        y_max: 51.2,
    };

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0]
    }

    pub fn half_extent(&self) -> [f64; 2] {
        [(self.x_max - self.x_min) / 2.0, (self.y_max - self.y_min) / 2.0]
    }
}

/// Probability grid over the ground plane.
///
/// Cell `(r, c)` covers `x ∈ origin.x + [c, c+1)·cell_size` and
/// `y ∈ origin.y + [r, r+1)·cell_size`; storage is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    height: usize,
    width: usize,
    cell_size: f64,
    origin: [f64; 2],
    probs: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(height: usize, width: usize, cell_size: f64, origin: [f64; 2]) -> Result<Self> {
        Self::from_probs(height, width, cell_size, origin, vec![0.0; height * width])
    }

    pub fn from_probs(
        height: usize,
        width: usize,
        cell_size: f64,
        origin: [f64; 2],
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::dim(
                "OccupancyGrid",
                format!("{} cells for {height}x{width}", probs.len()),
            ));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("invalid grid geometry".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("occupancy probabilities must lie in [0, 1]".into()));
        }
        Ok(OccupancyGrid {
            height,
            width,
            cell_size,
            origin,
            probs,
        })
    }

    /// Grid exactly covering `range` with `height × width` square cells.
    pub fn covering(range: &PerceptionRange, height: usize, width: usize) -> Result<Self> {
        let cell = (range.x_max - range.x_min) / width as f64;
        let cell_y = (range.y_max - range.y_min) / height as f64;
        if (cell - cell_y).abs() > 1e-9 {
            return Err(Error::Config("perception range does not tile into square cells".into()));
        }
        Self::new(height, width, cell, [range.x_min, range.y_min])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.probs[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, p: f64) {
        assert!((0.0..=1.0).contains(&p), "probability {p} out of range");
        self.probs[r * self.width + c] = p;
    }

    pub fn same_layout(&self, other: &OccupancyGrid) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.cell_size == other.cell_size
            && self.origin == other.origin
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell_size,
            self.origin[1] + (r as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cell containing `p`, if any.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let r = ((p[1] - self.origin[1]) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// 0/1 grid with `1` where the probability strictly exceeds `tau`.
    pub fn threshold(&self, tau: f64) -> OccupancyGrid {
        OccupancyGrid {
            probs: self
                .probs
                .iter()
                .map(|&p| if p > tau { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone()
        }
    }

    /// Whether cell `(r, c)` counts as set in a binary grid.
    pub fn is_set(&self, r: usize, c: usize) -> bool {
        self.get(r, c) > 0.5
    }

    pub fn count_set(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.5).count()
    }
}
