//! Orthographic multi-view depth rendering of a point cloud and back-projection
//! of per-view scores onto the points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene_model::{ScenePointCloud, Vec3};
use nalgebra::Matrix3;

const NO_POINT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    /// Grid rows.
    pub height: usize,
    /// Grid columns.
    pub width: usize,
    /// Depth bins.
    pub depth_bins: usize,
    /// Shape scale `s` in `(0, 1]`.
    pub scale: f64,
    pub num_views: usize,
    pub elevation_deg: f64,
    pub densify_kernel: usize,
    pub smooth_sigma: f64,
    /// Normalized-depth tolerance for a point to share its cell's score.
    pub fuse_tol: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            height: 128,
            width: 128,
            depth_bins: 64,
            scale: 0.9,
            num_views: 6,
            elevation_deg: 30.0,
            densify_kernel: 3,
            smooth_sigma: 1.0,
            fuse_tol: 0.02,
        }
    }
}

impl ViewParams {
    fn check(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.depth_bins < 8 {
            return Err(Error::InvalidInput(format!(
                "view grid must be at least 8x8x8, got {}x{}x{}",
                self.height, self.width, self.depth_bins
            )));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidInput(format!("view scale {} outside (0, 1]", self.scale)));
        }
        if self.num_views == 0 {
            return Err(Error::InvalidInput("at least one view is required".into()));
        }
        if self.densify_kernel.is_multiple_of(2) {
            return Err(Error::InvalidInput("densify kernel must be odd".into()));
        }
        Ok(())
    }

    /// Rotation rows are (image-down, image-right, forward).
    fn rotations(&self) -> Vec<Matrix3<f64>> {
        let (azimuths, top_down) = if self.num_views >= 5 {
            (self.num_views - 1, true)
        } else {
            (self.num_views, false)
        };
        let elev = self.elevation_deg.to_radians();
        let mut out = Vec::with_capacity(self.num_views);
        for k in 0..azimuths {
            let az = std::f64::consts::TAU * k as f64 / azimuths as f64;
            let toward_eye = Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            out.push(view_rotation(-toward_eye));
        }
        if top_down {
            out.push(view_rotation(-Vec3::z()));
        }
        out
    }
}

fn view_rotation(forward: Vec3) -> Matrix3<f64> {
    let mut right = forward.cross(&Vec3::z());
    if right.norm() < 1e-9 {
        right = Vec3::x();
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Matrix3::from_rows(&[down.transpose(), right.transpose(), forward.transpose()])
}

/// One rendered view plus the bookkeeping needed to back-project onto points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthView {
    /// World → view rotation (rows: down, right, forward).
    pub rotation: Matrix3<f64>,
    /// View-frame midpoint subtracted before normalization.
    pub offset: Vec3,
    /// Uniform normalization extent (meters).
    pub extent: f64,
    /// Final depth map in `[0, 1]`; meaningful where `valid` is set.
    pub map: Grid<f32>,
    pub valid: Grid<bool>,
    /// Cells that received at least one point before densification.
    pub occupied: Grid<bool>,
    /// Minimum normalized depth per occupied cell.
    pub zbuffer: Grid<f32>,
    /// Point index that won each occupied cell.
    pub winner: Grid<u32>,
    /// `(row, col, depth_bin)` per input point.
    pub point_cells: Vec<(u32, u32, u32)>,
    /// Normalized depth per input point.
    pub point_depth: Vec<f32>,
}

impl DepthView {
    pub fn valid_fraction(&self) -> f64 {
        let n = self.valid.data().iter().filter(|v| **v).count();
        n as f64 / self.valid.data().len() as f64
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupied.data().iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthViewSet {
    pub params: ViewParams,
    pub views: Vec<DepthView>,
}

/// Render `params.num_views` orthographic depth maps of the cloud.
///
/// Each view normalizes the rotated coordinates into `[0, 1]` with a single
/// extent, fills cell `(⌈sHx⌉, ⌈sWy⌉)` with the nearest depth, then densifies
/// holes with a max filter, smooths with a masked Gaussian and min-max
/// normalizes the result.
pub fn render_depth_views(cloud: &ScenePointCloud, params: &ViewParams) -> Result<DepthViewSet> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty point cloud".into()));
    }
    params.check()?;
    let centroid = cloud.centroid();
    let views = params
        .rotations()
        .into_par_iter()
        .map(|rot| render_one(cloud, centroid, rot, params))
        .collect();
    Ok(DepthViewSet { params: *params, views })
}

fn render_one(cloud: &ScenePointCloud, centroid: Vec3, rotation: Matrix3<f64>, params: &ViewParams) -> DepthView {
    let q: Vec<Vec3> = cloud.positions.iter().map(|p| rotation * (p - centroid)).collect();
    let (lo, hi) = crate::scene_model::aabb_of(q.iter().copied()).expect("non-empty cloud");
    let offset = (lo + hi) * 0.5;
    let extent = (hi - lo).max();
    let (h, w, d) = (params.height, params.width, params.depth_bins);
    let s = params.scale;

    let mut zbuffer = Grid::filled(w, h, f32::INFINITY);
    let mut winner = Grid::filled(w, h, NO_POINT);
    let mut point_cells = Vec::with_capacity(q.len());
    let mut point_depth = Vec::with_capacity(q.len());
    for (i, qi) in q.iter().enumerate() {
        let n = if extent > 0.0 {
            (qi - offset) / extent + Vec3::repeat(0.5)
        } else {
            Vec3::repeat(0.5)
        };
        let row = ((s * h as f64 * n.x).ceil().max(0.0) as usize).min(h - 1);
        let col = ((s * w as f64 * n.y).ceil().max(0.0) as usize).min(w - 1);
        let bin = ((d as f64 * n.z).ceil().max(0.0) as usize).min(d - 1);
        let z = n.z as f32;
        point_cells.push((row as u32, col as u32, bin as u32));
        point_depth.push(z);
        if z < *zbuffer.get(row, col) {
            zbuffer.set(row, col, z);
            winner.set(row, col, i as u32);
        }
    }
    let occupied = winner.map(|wi| *wi != NO_POINT);

    let (dense, valid) = densify(&zbuffer, &occupied, params.densify_kernel);
    let smooth = masked_gaussian(&dense, &valid, params.smooth_sigma);
    let map = squeeze(&smooth, &valid);
    DepthView {
        rotation,
        offset,
        extent,
        map,
        valid,
        occupied,
        zbuffer,
        winner,
        point_cells,
        point_depth,
    }
}

/// Fill empty cells with the max over occupied cells in a `k x k` window.
fn densify(depth: &Grid<f32>, occupied: &Grid<bool>, k: usize) -> (Grid<f32>, Grid<bool>) {
    let r = (k / 2) as isize;
    let (h, w) = (depth.height() as isize, depth.width() as isize);
    let mut out = depth.clone();
    let mut valid = occupied.clone();
    for row in 0..h {
        for col in 0..w {
            if *occupied.get(row as usize, col as usize) {
                continue;
            }
            let mut best = f32::NEG_INFINITY;
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    if *occupied.get(rr as usize, cc as usize) {
                        best = best.max(*depth.get(rr as usize, cc as usize));
                    }
                }
            }
            if best.is_finite() {
                out.set(row as usize, col as usize, best);
                valid.set(row as usize, col as usize, true);
            }
        }
    }
    (out, valid)
}

fn masked_gaussian(values: &Grid<f32>, valid: &Grid<bool>, sigma: f64) -> Grid<f32> {
    if sigma <= 0.0 {
        return values.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = (values.height() as isize, values.width() as isize);
    Grid::from_fn(w as usize, h as usize, |row, col| {
        if !*valid.get(row, col) {
            return 0.0;
        }
        let (mut acc, mut norm) = (0.0f64, 0.0f64);
        for dr in -radius..=radius {
            let rr = row as isize + dr;
            if rr < 0 || rr >= h {
                continue;
            }
            for dc in -radius..=radius {
                let cc = col as isize + dc;
                if cc < 0 || cc >= w || !*valid.get(rr as usize, cc as usize) {
                    continue;
                }
                let wgt = kernel[(dr + radius) as usize] * kernel[(dc + radius) as usize];
                acc += wgt * *values.get(rr as usize, cc as usize) as f64;
                norm += wgt;
            }
        }
        (acc / norm) as f32
    })
}

fn squeeze(values: &Grid<f32>, valid: &Grid<bool>) -> Grid<f32> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (v, ok) in values.data().iter().zip(valid.data()) {
        if *ok {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = hi - lo;
    Grid::from_fn(values.width(), values.height(), |r, c| {
        if !*valid.get(r, c) || span.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            0.0
        } else {
            (*values.get(r, c) - lo) / span
        }
    })
}

/// Per-cell class scores for one view (`height x width x classes`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        ScoreMap {
            height,
            width,
            classes,
            data: vec![0.0; height * width * classes],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.classes;
        &self.data[i..i + self.classes]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.classes;
        &mut self.data[i..i + self.classes]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedLogits {
    pub classes: usize,
    /// Row-major `N x classes`.
    pub logits: Vec<f64>,
    /// Points seen by no view; their logits are uniform.
    pub unseen: Vec<bool>,
}

impl FusedLogits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }
}

/// Whether point `i` owns (or ties within tolerance with) its cell's z-buffer entry.
#[inline]
pub(crate) fn point_sees_view(view: &DepthView, i: usize, tol: f64) -> Option<(usize, usize)> {
    let (row, col, _) = view.point_cells[i];
    let (row, col) = (row as usize, col as usize);
    let best = *view.zbuffer.get(row, col);
    ((view.point_depth[i] - best) as f64 <= tol).then_some((row, col))
}

/// Average each point's cell scores over the views in which it is visible.
pub fn fuse_multiview_logits(
    views: &DepthViewSet,
    per_view_scores: &[ScoreMap],
    cloud: &ScenePointCloud,
) -> Result<FusedLogits> {
    if per_view_scores.len() != views.views.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} score maps for {} views",
            per_view_scores.len(),
            views.views.len()
        )));
    }
    let classes = per_view_scores.first().map_or(0, |s| s.classes);
    for s in per_view_scores {
        if s.height != views.params.height || s.width != views.params.width || s.classes != classes {
            return Err(Error::DimensionMismatch(format!(
                "score map {}x{}x{} does not match view grid {}x{}x{}",
                s.height, s.width, s.classes, views.params.height, views.params.width, classes
            )));
        }
    }
    if classes == 0 {
        return Err(Error::DimensionMismatch("score maps have zero classes".into()));
    }
    if views.views.iter().any(|v| v.point_cells.len() != cloud.len()) {
        return Err(Error::DimensionMismatch(
            "views were rendered from a different cloud".into(),
        ));
    }
    let n = cloud.len();
    let tol = views.params.fuse_tol;
    let rows: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; classes];
            let mut count = 0usize;
            for (view, scores) in views.views.iter().zip(per_view_scores) {
                if let Some((row, col)) = point_sees_view(view, i, tol) {
                    for (a, s) in acc.iter_mut().zip(scores.at(row, col)) {
                        *a += s;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                (vec![1.0 / classes as f64; classes], true)
            } else {
                acc.iter_mut().for_each(|a| *a /= count as f64);
                (acc, false)
            }
        })
        .collect();
    let mut logits = Vec::with_capacity(n * classes);
    let mut unseen = Vec::with_capacity(n);
    for (row, u) in rows {
        logits.extend(row);
        unseen.push(u);
    }
    Ok(FusedLogits {
        classes,
        logits,
        unseen,
    })
}
