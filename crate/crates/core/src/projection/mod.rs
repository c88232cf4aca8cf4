//! Pinhole projection of points and boxes, and depth-tested visibility.

mod views;

pub use views::{fuse_multiview_logits, render_depth_views, DepthView, DepthViewSet, FusedLogits, ViewParams};

use serde::{Deserialize, Serialize};

use crate::scene_model::{Box2D, Box3D, PosedFrame, Vec3};

/// Near-plane distance used when clipping box edges that cross behind the camera.
const NEAR_PLANE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub inside: bool,
}

impl ProjectedPoint {
    /// Nearest pixel `(row, col)` clamped to the image.
    pub fn pixel(&self, width: usize, height: usize) -> (usize, usize) {
        round_clamped(self.u, self.v, width, height)
    }
}

#[inline]
pub(crate) fn round_clamped(u: f64, v: f64, width: usize, height: usize) -> (usize, usize) {
    let col = u.round().clamp(0.0, width.saturating_sub(1) as f64) as usize;
    let row = v.round().clamp(0.0, height.saturating_sub(1) as f64) as usize;
    (row, col)
}

#[inline]
fn pinhole(pc: &Vec3, frame: &PosedFrame) -> (f64, f64) {
    let k = &frame.intrinsics;
    (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
}

pub fn project_point(p: &Vec3, frame: &PosedFrame) -> ProjectedPoint {
    let pc = frame.extrinsics.apply(p);
    let depth = pc.z;
    if depth <= 0.0 {
        return ProjectedPoint {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            inside: false,
        };
    }
    let (u, v) = pinhole(&pc, frame);
    let inside = u >= 0.0 && v >= 0.0 && u < frame.width() as f64 && v < frame.height() as f64;
    ProjectedPoint { u, v, depth, inside }
}

/// Visible when the point lands inside the image and agrees with the recorded
/// depth at its nearest pixel to within `depth_tol` meters.
pub fn is_visible(p: &Vec3, frame: &PosedFrame, depth_tol: f64) -> bool {
    visible_projection(p, frame, depth_tol).is_some()
}

/// The projection of `p` when it is visible, `None` otherwise.
pub fn visible_projection(p: &Vec3, frame: &PosedFrame, depth_tol: f64) -> Option<ProjectedPoint> {
    let proj = project_point(p, frame);
    if !proj.inside {
        return None;
    }
    let (row, col) = proj.pixel(frame.width(), frame.height());
    let recorded = *frame.depth.get(row, col) as f64;
    (recorded > 0.0 && (proj.depth - recorded).abs() <= depth_tol).then_some(proj)
}

/// Pixel rectangle covering the projected box, clipped to the image.
///
/// Edges crossing behind the camera are clipped at a near plane so that a box
/// straddling the camera still yields its visible footprint.
pub fn project_box(b: &Box3D, frame: &PosedFrame) -> Option<Box2D> {
    let corners: Vec<Vec3> = b.corners().iter().map(|c| frame.extrinsics.apply(c)).collect();
    let mut front: Vec<Vec3> = corners.iter().filter(|c| c.z > NEAR_PLANE).copied().collect();
    if front.is_empty() {
        return None;
    }
    if front.len() < 8 {
        // Corner i and i ^ (1 << axis) share an edge.
        for i in 0..8usize {
            for axis in 0..3 {
                let j = i ^ (1 << axis);
                if j < i {
                    continue;
                }
                let (a, c) = (corners[i], corners[j]);
                if (a.z > NEAR_PLANE) != (c.z > NEAR_PLANE) {
                    let t = (NEAR_PLANE - a.z) / (c.z - a.z);
                    front.push(a + (c - a) * t);
                }
            }
        }
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for pc in &front {
        let (u, v) = pinhole(pc, frame);
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let (u0, v0) = (u0.max(0.0), v0.max(0.0));
    let (u1, v1) = (u1.min(w), v1.min(h));
    (u1 > u0 && v1 > v0).then_some(Box2D {
        u: u0,
        v: v0,
        w: u1 - u0,
        h: v1 - v0,
    })
}
