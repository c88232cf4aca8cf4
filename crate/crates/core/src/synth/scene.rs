//! Room-scale scenes of primitive objects, surface-sampled and rendered from an
//! orbiting camera by point splatting.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, ShapeKind};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::projection::project_point;
use crate::scene_model::{CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D, PosedFrame, ScenePointCloud, Vec3};

const PLACEMENT_RETRIES: usize = 1000;
/// Gap between instance footprints and the walls (m).
const WALL_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_instances: usize,
    pub shapes: Vec<ShapeKind>,
    /// Room extent along x, y and its height (m).
    pub room: [f64; 3],
    pub points_per_instance: usize,
    /// Fraction of all points that are unlabeled clutter.
    pub clutter_rate: f64,
    /// Range of object extents (m).
    pub size_range: [f64; 2],
    /// Minimum footprint separation between objects (m).
    pub min_gap: f64,
    pub num_frames: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Splat half-width in pixels.
    pub splat_radius: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_instances: 6,
            shapes: ShapeKind::ALL.to_vec(),
            room: [6.0, 6.0, 3.0],
            points_per_instance: 2000,
            clutter_rate: 0.2,
            size_range: [0.4, 1.2],
            min_gap: 0.2,
            num_frames: 20,
            image_width: 160,
            image_height: 120,
            focal: 115.0,
            splat_radius: 1,
        }
    }
}

impl SceneSpec {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scene spec: {m}")));
        if self.num_instances > 0 && self.shapes.is_empty() {
            return bad("no shapes to draw from");
        }
        if self.room.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("room extents must be positive");
        }
        if !(0.0..1.0).contains(&self.clutter_rate) {
            return bad("clutter rate must be in [0, 1)");
        }
        if !(self.size_range[0] > 0.0 && self.size_range[0] <= self.size_range[1]) {
            return bad("size range must be positive and ordered");
        }
        if self.num_instances > 0 && self.points_per_instance == 0 {
            return bad("instances need points");
        }
        if self.image_width == 0 || self.image_height == 0 || self.focal <= 0.0 {
            return bad("camera parameters must be positive");
        }
        Ok(())
    }

    fn clutter_points(&self) -> usize {
        if self.num_instances == 0 {
            return self.points_per_instance.max(1000);
        }
        let inst = (self.num_instances * self.points_per_instance) as f64;
        (inst * self.clutter_rate / (1.0 - self.clutter_rate)).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub cloud: ScenePointCloud,
    pub frames: Vec<PosedFrame>,
    pub truth: GroundTruth,
    pub seed: u64,
    pub spec: SceneSpec,
}

impl SyntheticScene {
    pub fn gt(&self) -> &InstanceLabeling3D {
        &self.truth.labels
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: ShapeKind,
    center: Vec3,
    size: Vec3,
}

impl Placed {
    fn footprint_overlaps(&self, other: &Placed, gap: f64) -> bool {
        (0..2).all(|k| (self.center[k] - other.center[k]).abs() < 0.5 * (self.size[k] + other.size[k]) + gap)
    }
}

fn sample_size(shape: ShapeKind, range: [f64; 2], rng: &mut ChaCha8Rng) -> Vec3 {
    let mut draw = || rng.random_range(range[0]..=range[1]);
    match shape {
        ShapeKind::Box => Vec3::new(draw(), draw(), draw()),
        ShapeKind::Sphere => Vec3::repeat(draw()),
        ShapeKind::Cylinder => {
            let d = draw();
            Vec3::new(d, d, draw())
        }
    }
}

/// Uniform surface samples; bottoms resting on the floor are omitted.
fn sample_surface(obj: &Placed, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let lo = obj.center - obj.size * 0.5;
    let s = obj.size;
    let mut out = Vec::with_capacity(n);
    match obj.shape {
        ShapeKind::Box => {
            // Top, then the four sides, weighted by area.
            let areas = [s.x * s.y, s.x * s.z, s.x * s.z, s.y * s.z, s.y * s.z];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                while face < 4 && pick >= areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                let p = match face {
                    0 => Vec3::new(lo.x + a * s.x, lo.y + b * s.y, lo.z + s.z),
                    1 => Vec3::new(lo.x + a * s.x, lo.y, lo.z + b * s.z),
                    2 => Vec3::new(lo.x + a * s.x, lo.y + s.y, lo.z + b * s.z),
                    3 => Vec3::new(lo.x, lo.y + a * s.y, lo.z + b * s.z),
                    _ => Vec3::new(lo.x + s.x, lo.y + a * s.y, lo.z + b * s.z),
                };
                out.push(p);
            }
        }
        ShapeKind::Sphere => {
            let r = 0.5 * s.x;
            for _ in 0..n {
                // Archimedes: uniform height and azimuth give uniform area.
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi = rng.random_range(0.0..2.0 * PI);
                let q = (1.0 - z * z).sqrt();
                out.push(obj.center + Vec3::new(r * q * phi.cos(), r * q * phi.sin(), r * z));
            }
        }
        ShapeKind::Cylinder => {
            let r = 0.5 * s.x;
            let side = 2.0 * PI * r * s.z;
            let top = PI * r * r;
            for _ in 0..n {
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..side + top) < side {
                    let z = lo.z + rng.random::<f64>() * s.z;
                    out.push(Vec3::new(obj.center.x + r * phi.cos(), obj.center.y + r * phi.sin(), z));
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    out.push(Vec3::new(
                        obj.center.x + rho * phi.cos(),
                        obj.center.y + rho * phi.sin(),
                        lo.z + s.z,
                    ));
                }
            }
        }
    }
    out
}

/// Floor and wall points; walls only up to a meter so the orbit looks over them.
fn sample_clutter(room: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let [x, y, z] = room;
    let wall_h = z.min(1.0);
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            match rng.random_range(0..10) {
                0..7 => Vec3::new(a * x, b * y, 0.0),
                7 => Vec3::new(a * x, 0.0, b * wall_h),
                8 => Vec3::new(0.0, a * y, b * wall_h),
                _ => Vec3::new(a * x, y, b * wall_h),
            }
        })
        .collect()
}

fn orbit_frames(spec: &SceneSpec) -> Vec<(CameraIntrinsics, CameraExtrinsics)> {
    let [x, y, _] = spec.room;
    let center = Vec3::new(0.5 * x, 0.5 * y, 0.0);
    let radius = 0.45 * x.min(y);
    let intrinsics = CameraIntrinsics {
        fx: spec.focal,
        fy: spec.focal,
        cx: spec.image_width as f64 / 2.0,
        cy: spec.image_height as f64 / 2.0,
        width: spec.image_width,
        height: spec.image_height,
    };
    (0..spec.num_frames)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / spec.num_frames.max(1) as f64;
            let eye = center + Vec3::new(radius * t.cos(), radius * t.sin(), 1.9 + 0.3 * (3.0 * t).sin());
            // Aim past the center, swinging a little so neighbouring frames differ.
            let aim = 0.25 * x.min(y);
            let target = center
                + Vec3::new(
                    -aim * (t + 0.4 * (2.0 * t).sin()).cos(),
                    -aim * (t + 0.4 * (2.0 * t).sin()).sin(),
                    0.2,
                );
            (intrinsics, CameraExtrinsics::look_at(eye, target))
        })
        .collect()
}

/// Splat every point into a `(2r+1)^2` window with a depth test; returns the
/// depth image and the winning point per pixel.
pub fn render_frame(
    cloud: &ScenePointCloud,
    intrinsics: &CameraIntrinsics,
    extrinsics: &CameraExtrinsics,
    frame_id: u32,
    splat_radius: usize,
) -> (PosedFrame, Grid<Option<u32>>) {
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let mut frame = PosedFrame {
        frame_id,
        intrinsics: *intrinsics,
        extrinsics: *extrinsics,
        depth: Grid::filled(w, h, 0.0),
        color: None,
    };
    let mut zbuf = Grid::filled(w, h, f64::INFINITY);
    let mut winner: Grid<Option<u32>> = Grid::filled(w, h, None);
    let r = splat_radius as i64;
    for (i, p) in cloud.positions.iter().enumerate() {
        let proj = project_point(p, &frame);
        if !proj.inside {
            continue;
        }
        let (row, col) = proj.pixel(w, h);
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                if proj.depth < *zbuf.get(rr, cc) {
                    zbuf.set(rr, cc, proj.depth);
                    winner.set(rr, cc, Some(i as u32));
                }
            }
        }
    }
    frame.depth = zbuf.map(|d| if d.is_finite() { *d as f32 } else { 0.0 });
    (frame, winner)
}

/// Deterministic scene for `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [rx, ry, _] = spec.room;

    let mut placed: Vec<Placed> = Vec::with_capacity(spec.num_instances);
    for k in 0..spec.num_instances {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = sample_size(shape, spec.size_range, &mut rng);
            let (hx, hy) = (0.5 * size.x + WALL_MARGIN, 0.5 * size.y + WALL_MARGIN);
            if 2.0 * hx >= rx || 2.0 * hy >= ry {
                continue;
            }
            let cand = Placed {
                shape,
                center: Vec3::new(
                    rng.random_range(hx..rx - hx),
                    rng.random_range(hy..ry - hy),
                    0.5 * size.z,
                ),
                size,
            };
            if placed.iter().all(|o| !o.footprint_overlaps(&cand, spec.min_gap)) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place instance {} of {} without overlap",
                    k + 1,
                    spec.num_instances
                )))
            }
        }
    }

    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut colors = Vec::new();
    for (k, obj) in placed.iter().enumerate() {
        let pts = sample_surface(obj, spec.points_per_instance, &mut rng);
        let color = [
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
        ];
        labels.extend(std::iter::repeat_n(k as u32 + 1, pts.len()));
        colors.extend(std::iter::repeat_n(color, pts.len()));
        positions.extend(pts);
    }
    let clutter = sample_clutter(spec.room, spec.clutter_points(), &mut rng);
    labels.extend(std::iter::repeat_n(0u32, clutter.len()));
    colors.extend(std::iter::repeat_n([0.5f32, 0.5, 0.5], clutter.len()));
    positions.extend(clutter);

    let cloud = ScenePointCloud::new(positions, Some(colors))?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut id_images = Vec::with_capacity(spec.num_frames);
    for (k, (intr, extr)) in orbit_frames(spec).into_iter().enumerate() {
        let (frame, winner) = render_frame(&cloud, &intr, &extr, k as u32, spec.splat_radius);
        id_images.push(winner.map(|w| w.map_or(0, |i| labels[i as usize])));
        frames.push(frame);
    }
    Ok(SyntheticScene {
        cloud,
        frames,
        truth: GroundTruth {
            labels: InstanceLabeling3D {
                labels,
                num_instances: spec.num_instances as u32,
            },
            shapes: placed.iter().map(|p| p.shape).collect(),
            id_images,
        },
        seed,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::visible_projection;
    use crate::scene_model::validate_scene;

    fn small() -> SceneSpec {
        SceneSpec {
            num_instances: 5,
            points_per_instance: 2000,
            num_frames: 6,
            ..Default::default()
        }
    }

    #[test]
    fn instance_counts_and_validity() {
        let s = generate_scene(&small(), 1).unwrap();
        assert!(s.gt().is_compact());
        assert_eq!(s.gt().num_instances, 5);
        for inst in s.gt().instances() {
            assert_eq!(inst.len(), 2000);
        }
        let clutter = s.gt().labels.iter().filter(|l| **l == 0).count();
        assert_eq!(clutter, 2500);
        assert!(validate_scene(&s.cloud, &s.frames).is_empty());
    }

    #[test]
    fn empty_scene_is_clutter_only() {
        let spec = SceneSpec {
            num_instances: 0,
            num_frames: 2,
            ..Default::default()
        };
        let s = generate_scene(&spec, 4).unwrap();
        assert!(s.gt().labels.iter().all(|l| *l == 0));
        assert_eq!(s.gt().num_instances, 0);
        assert!(!s.cloud.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(), 9).unwrap();
        let b = generate_scene(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small(), 10).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn crowded_room_is_infeasible() {
        let spec = SceneSpec {
            num_instances: 40,
            room: [2.0, 2.0, 3.0],
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn instances_do_not_overlap() {
        let s = generate_scene(
            &SceneSpec {
                num_instances: 8,
                num_frames: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let boxes: Vec<_> = s
            .gt()
            .instances()
            .iter()
            .map(|inst| crate::scene_model::aabb_of(inst.iter().map(|&i| s.cloud.positions[i])).unwrap())
            .collect();
        for a in 0..boxes.len() {
            for b in a + 1..boxes.len() {
                let sep = (0..2).any(|k| boxes[a].1[k] < boxes[b].0[k] || boxes[b].1[k] < boxes[a].0[k]);
                assert!(sep, "instances {a} and {b} overlap");
            }
        }
    }

    /// For each valid pixel, the nearest projected point within one pixel and
    /// the depth tolerance should carry the pixel's id.
    #[test]
    fn id_images_agree_with_projected_points() {
        let s = generate_scene(&small(), 2).unwrap();
        let tol = 0.05;
        for (frame, ids) in s.frames.iter().zip(&s.truth.id_images) {
            let (w, h) = (frame.width(), frame.height());
            let mut near: Vec<Vec<(f64, f64, u32)>> = vec![Vec::new(); w * h];
            for (i, p) in s.cloud.positions.iter().enumerate() {
                let proj = project_point(p, frame);
                if !proj.inside {
                    continue;
                }
                let (row, col) = proj.pixel(w, h);
                for rr in row.saturating_sub(1)..(row + 2).min(h) {
                    for cc in col.saturating_sub(1)..(col + 2).min(w) {
                        let d2 = (proj.u - cc as f64).powi(2) + (proj.v - rr as f64).powi(2);
                        near[rr * w + cc].push((d2, proj.depth, s.gt().labels[i]));
                    }
                }
            }
            let (mut valid, mut agree) = (0usize, 0usize);
            for r in 0..h {
                for c in 0..w {
                    let d = *frame.depth.get(r, c) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    valid += 1;
                    let best = near[r * w + c]
                        .iter()
                        .filter(|e| (e.1 - d).abs() <= tol)
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    if best.is_some_and(|e| e.2 == *ids.get(r, c)) {
                        agree += 1;
                    }
                }
            }
            assert!(valid > 0);
            assert!(agree as f64 >= 0.99 * valid as f64, "{agree}/{valid}");
        }
    }

    #[test]
    fn instances_are_seen() {
        let s = generate_scene(
            &SceneSpec {
                num_instances: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        for inst in s.gt().instances() {
            let frames_seeing = s
                .frames
                .iter()
                .filter(|f| {
                    inst.iter()
                        .filter(|&&i| visible_projection(&s.cloud.positions[i], f, 0.05).is_some())
                        .count()
                        >= 20
                })
                .count();
            assert!(frames_seeing >= 3, "instance seen in {frames_seeing} frames");
        }
    }
}
