//! Geometric and mask value types shared across the pipeline.
//!
//! Conventions: the world frame is right-handed with +z up, the camera frame
//! is right-handed with +z forward (x right, y down in the image), and a
//! depth sample of 0 means "no measurement".

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type Vec3 = Vector3<f64>;

/// Per-pixel depth in meters, `0.0` marks a hole.
pub type DepthImage = Grid<f32>;

/// Per-pixel binary segmentation.
pub type BinaryMask = Grid<bool>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePointCloud {
    pub positions: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<[f32; 3]>>,
}

impl ScenePointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Option<Vec<[f32; 3]>>) -> Result<Self> {
        let cloud = ScenePointCloud { positions, colors };
        let issues = cloud.issues();
        if issues.is_empty() {
            Ok(cloud)
        } else {
            Err(Error::InvalidInput(issues.join("; ")))
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.positions.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        sum / self.positions.len().max(1) as f64
    }

    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        aabb_of(self.positions.iter().copied())
    }

    fn issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.positions.is_empty() {
            issues.push("point cloud is empty".to_string());
        }
        let bad = self
            .positions
            .iter()
            .filter(|p| !p.iter().all(|c| c.is_finite()))
            .count();
        if bad > 0 {
            issues.push(format!("{bad} non-finite point coordinates"));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.positions.len() {
                issues.push(format!(
                    "colors length {} does not match {} points",
                    colors.len(),
                    self.positions.len()
                ));
            }
        }
        issues
    }
}

pub fn aabb_of(points: impl IntoIterator<Item = Vec3>) -> Option<(Vec3, Vec3)> {
    let mut it = points.into_iter();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    fn issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if !(self.fx > 0.0 && self.fy > 0.0) {
            issues.push(format!(
                "intrinsics focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            ));
        }
        if self.width == 0 || self.height == 0 {
            issues.push("intrinsics image size must be positive".to_string());
        }
        issues
    }
}

/// World-to-camera rigid transform: `p_cam = rotation * p_world + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with world +z as the up hint.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vec3::z());
        if right.norm() < 1e-9 {
            right = Vec3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        CameraExtrinsics {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        CameraExtrinsics {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    fn issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            issues.push("extrinsics contain non-finite values".to_string());
            return issues;
        }
        let gram = self.rotation.transpose() * self.rotation;
        if (gram - Matrix3::identity()).amax() > 1e-6 {
            issues.push("extrinsics not orthonormal".to_string());
        } else if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            issues.push("extrinsics rotation is a reflection (det != +1)".to_string());
        }
        issues
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosedFrame {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub depth: DepthImage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Grid<[u8; 3]>>,
}

impl PosedFrame {
    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    fn issues(&self) -> Vec<String> {
        let mut issues = self.intrinsics.issues();
        issues.extend(self.extrinsics.issues());
        if self.depth.width() != self.width() || self.depth.height() != self.height() {
            issues.push(format!(
                "depth dimension mismatch: depth is {}x{}, intrinsics are {}x{}",
                self.depth.width(),
                self.depth.height(),
                self.width(),
                self.height()
            ));
        }
        let bad = self
            .depth
            .data()
            .iter()
            .filter(|d| !(d.is_finite() && **d >= 0.0))
            .count();
        if bad > 0 {
            issues.push(format!("{bad} negative or non-finite depth samples"));
        }
        if let Some(color) = &self.color {
            if !color.same_shape(&self.depth) {
                issues.push("color dimension mismatch".to_string());
            }
        }
        issues
            .into_iter()
            .map(|s| format!("frame {}: {s}", self.frame_id))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// Extent along x, y, z.
    pub size: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_hint: Option<u32>,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3) -> Self {
        Box3D {
            center,
            size,
            label_hint: None,
        }
    }

    pub fn from_min_max(lo: Vec3, hi: Vec3) -> Self {
        Box3D::new((lo + hi) * 0.5, hi - lo)
    }

    /// Tight axis-aligned box around the points; `None` for an empty set.
    pub fn enclosing(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        aabb_of(points).map(|(lo, hi)| Box3D::from_min_max(lo, hi))
    }

    pub fn min(&self) -> Vec3 {
        self.center - self.size * 0.5
    }

    pub fn max(&self) -> Vec3 {
        self.center + self.size * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.size.norm()
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| *s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite())
    }

    /// Grow every face outward by `margin` meters.
    pub fn expanded(&self, margin: f64) -> Box3D {
        Box3D {
            center: self.center,
            size: self.size.add_scalar(2.0 * margin),
            label_hint: self.label_hint,
        }
    }

    /// Grow every extent so it is at least `min_extent`.
    pub fn with_min_extent(mut self, min_extent: f64) -> Box3D {
        self.size = self.size.map(|s| s.max(min_extent));
        self
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let lo = self.min();
        let hi = self.max();
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            );
        }
        out
    }
}

/// Pixel rectangle with top-left `(u, v)` and extent `w x h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn center(&self) -> (f64, f64) {
        (self.u + self.w * 0.5, self.v + self.h * 0.5)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u && u <= self.u + self.w && v >= self.v && v <= self.v + self.h
    }

    /// Integer pixel range `(row_lo, row_hi, col_lo, col_hi)`, half-open, clamped to the image.
    pub fn pixel_range(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clamp = |x: f64, hi: usize| x.max(0.0).min(hi as f64) as usize;
        let c0 = clamp(self.u.floor(), width);
        let c1 = clamp((self.u + self.w).ceil(), width);
        let r0 = clamp(self.v.floor(), height);
        let r1 = clamp((self.v + self.h).ceil(), height);
        (r0, r1, c0, c1)
    }
}

/// Integer label image for one frame; 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask2D {
    pub frame_id: u32,
    pub labels: Grid<u32>,
}

impl Mask2D {
    pub fn empty(frame_id: u32, width: usize, height: usize) -> Self {
        Mask2D {
            frame_id,
            labels: Grid::filled(width, height, 0),
        }
    }
}

/// Per-point instance labels; 0 = unassigned, instances are `1..=num_instances`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLabeling3D {
    pub labels: Vec<u32>,
    pub num_instances: u32,
}

impl InstanceLabeling3D {
    pub fn unassigned(n: usize) -> Self {
        InstanceLabeling3D {
            labels: vec![0; n],
            num_instances: 0,
        }
    }

    /// Relabel arbitrary ids to a gap-free `1..=K` range, ordered by raw id.
    pub fn from_raw(raw: &[u32]) -> Self {
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        for &l in raw.iter().filter(|l| **l != 0) {
            remap.entry(l).or_insert(0);
        }
        for (i, v) in remap.values_mut().enumerate() {
            *v = i as u32 + 1;
        }
        InstanceLabeling3D {
            labels: raw.iter().map(|l| if *l == 0 { 0 } else { remap[l] }).collect(),
            num_instances: remap.len() as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Point indices per instance; entry `k` holds label `k + 1`.
    pub fn instances(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_instances as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }

    /// Checks `labels ⊆ {0} ∪ 1..=K` and that every id in `1..=K` is used.
    pub fn is_compact(&self) -> bool {
        let mut seen = vec![false; self.num_instances as usize];
        for &l in &self.labels {
            if l > self.num_instances {
                return false;
            }
            if l > 0 {
                seen[l as usize - 1] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.issues.iter().any(|s| s.contains(needle))
    }
}

/// Collect every invariant violation in a cloud and its frames.
pub fn validate_scene(cloud: &ScenePointCloud, frames: &[PosedFrame]) -> ValidationReport {
    let mut issues = cloud.issues();
    for frame in frames {
        issues.extend(frame.issues());
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(depth_w: usize, depth_h: usize, size: u32) -> PosedFrame {
        PosedFrame {
            frame_id: 0,
            intrinsics: CameraIntrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                width: size,
                height: size,
            },
            extrinsics: CameraExtrinsics::identity(),
            depth: Grid::filled(depth_w, depth_h, 1.0),
            color: None,
        }
    }

    fn cloud(n: usize) -> ScenePointCloud {
        ScenePointCloud::new((0..n).map(|i| Vec3::new(i as f64, 0.5, 1.0)).collect(), None).unwrap()
    }

    #[test]
    fn well_formed_scene_has_empty_report() {
        let mut f1 = frame(64, 64, 64);
        f1.frame_id = 1;
        let report = validate_scene(&cloud(10), &[frame(64, 64, 64), f1]);
        assert!(report.is_empty(), "{:?}", report);
    }

    #[test]
    fn scaled_rotation_row_is_reported() {
        let mut f = frame(64, 64, 64);
        f.extrinsics.rotation.row_mut(1).scale_mut(2.0);
        let report = validate_scene(&cloud(10), &[f]);
        assert!(report.mentions("extrinsics not orthonormal"), "{:?}", report);
    }

    #[test]
    fn depth_size_mismatch_is_reported() {
        let report = validate_scene(&cloud(10), &[frame(64, 64, 128)]);
        assert!(report.mentions("dimension mismatch"), "{:?}", report);
    }

    #[test]
    fn reflection_and_non_finite_points_are_reported() {
        let mut f = frame(8, 8, 8);
        f.extrinsics.rotation = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let mut c = cloud(3);
        c.positions[1].x = f64::NAN;
        let report = validate_scene(&c, &[f]);
        assert!(report.mentions("reflection"));
        assert!(report.mentions("non-finite point"));
        assert!(ScenePointCloud::new(vec![], None).is_err());
    }

    #[test]
    fn look_at_puts_target_on_the_optical_axis() {
        let eye = Vec3::new(3.0, -2.0, 2.0);
        let target = Vec3::new(0.5, 0.5, 0.0);
        let e = CameraExtrinsics::look_at(eye, target);
        assert!(validate_scene(
            &cloud(1),
            &[PosedFrame {
                extrinsics: e,
                ..frame(8, 8, 8)
            }]
        )
        .is_empty());
        let pc = e.apply(&target);
        assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9 && pc.z > 0.0);
        assert!((e.center() - eye).norm() < 1e-9);
        // World up should map to image-up (negative camera y).
        let above = e.apply(&(target + Vec3::z()));
        assert!(above.y < 0.0);
        let m = e.to_matrix4();
        assert_eq!(CameraExtrinsics::from_matrix4(&m), e);
    }

    #[test]
    fn from_raw_compacts_labels() {
        let l = InstanceLabeling3D::from_raw(&[0, 7, 7, 3, 0, 12]);
        assert_eq!(l.labels, vec![0, 2, 2, 1, 0, 3]);
        assert_eq!(l.num_instances, 3);
        assert!(l.is_compact());
        assert!(!InstanceLabeling3D {
            labels: vec![0, 2],
            num_instances: 2
        }
        .is_compact());
    }

    #[test]
    fn box_helpers() {
        let b = Box3D::from_min_max(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 3.0));
        assert!(b.contains(&Vec3::new(1.0, 2.0, 3.0)));
        assert!(!b.contains(&Vec3::new(1.01, 2.0, 3.0)));
        assert!(b.expanded(0.1).contains(&Vec3::new(1.05, 2.0, 3.0)));
        let corners = b.corners();
        assert_eq!(Box3D::enclosing(corners).unwrap(), b);
    }
}
