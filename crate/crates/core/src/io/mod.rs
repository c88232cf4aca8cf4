//! On-disk formats: PLY clouds, depth and id images, label files, and the
//! scene directory manifest shared by real and synthetic scenes.

pub mod ply;

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene_model::{
    CameraExtrinsics, CameraIntrinsics, DepthImage, InstanceLabeling3D, PosedFrame, ScenePointCloud,
};
use crate::synth::{GroundTruth, ShapeKind};

pub use ply::{read_ply, write_ply, PlyFormat};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Millimeters, the usual RGB-D sensor convention.
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

pub fn read_ply_file(path: &Path) -> Result<ScenePointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(BufReader::new(file))
}

pub fn write_ply_file(path: &Path, cloud: &ScenePointCloud, format: PlyFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(BufWriter::new(file), cloud, format)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decode a single-channel 16-bit grayscale PNG.
pub fn decode_png16(bytes: &[u8]) -> Result<Grid<u16>> {
    let bad = |m: String| Error::format("16-bit PNG", m);
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(bad(format!(
            "expected 16-bit grayscale, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Grid::from_vec(w, h, data).ok_or_else(|| bad("pixel count does not match header".into()))
}

pub fn encode_png16(img: &Grid<u16>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format("16-bit PNG", e.to_string()))?;
        let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_be_bytes()).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::format("16-bit PNG", e.to_string()))?;
    }
    Ok(out)
}

/// Depth from a 16-bit PNG storing `meters * scale`.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<DepthImage> {
    Ok(decode_png16(&read_bytes(path)?)?.map(|v| (*v as f64 / scale) as f32))
}

pub fn write_depth_png(path: &Path, depth: &DepthImage, scale: f64) -> Result<()> {
    let img = depth.map(|d| (*d as f64 * scale).round().clamp(0.0, u16::MAX as f64) as u16);
    write_bytes(path, &encode_png16(&img)?)
}

/// Depth as raw little-endian `f32`, row-major.
pub fn read_depth_f32(path: &Path, width: usize, height: usize) -> Result<DepthImage> {
    let bytes = read_bytes(path)?;
    if bytes.len() != width * height * 4 {
        return Err(Error::format(
            "float32 depth",
            format!(
                "{} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                width * height * 4
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Grid::from_vec(width, height, data).expect("length checked"))
}

pub fn write_depth_f32(path: &Path, depth: &DepthImage) -> Result<()> {
    let bytes: Vec<u8> = depth.data().iter().flat_map(|d| d.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_u32_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            "u32 label file",
            format!("{} bytes is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_u32_file(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

/// Read a flat label file; ids are compacted to `1..=K` preserving their order.
pub fn read_labels(path: &Path) -> Result<InstanceLabeling3D> {
    Ok(InstanceLabeling3D::from_raw(&read_u32_file(path)?))
}

/// A copy of `cloud` colored by instance: unlabeled points gray, labels
/// spread around the hue circle by the golden angle.
pub fn colorize(cloud: &ScenePointCloud, labels: &InstanceLabeling3D) -> Result<ScenePointCloud> {
    if labels.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let colors = labels.labels.iter().map(|&l| label_color(l)).collect();
    Ok(ScenePointCloud {
        positions: cloud.positions.clone(),
        colors: Some(colors),
    })
}

fn label_color(label: u32) -> [f32; 3] {
    if label == 0 {
        return [0.5, 0.5, 0.5];
    }
    let h = (label as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = (1.0 - ((h % 2.0) - 1.0).abs()) as f32;
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// One predicted instance in the label sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub label: u32,
    pub num_points: usize,
    pub score: f64,
    /// Prompt pairs merged into this instance.
    pub pairs: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub num_points: usize,
    pub num_instances: u32,
    pub instances: Vec<InstanceRecord>,
}

impl LabelSidecar {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path, "label sidecar")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self, "label sidecar")
    }

    /// Per-instance scores indexed by `label - 1`.
    pub fn scores(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_instances as usize];
        for r in &self.instances {
            if r.label >= 1 && r.label <= self.num_instances {
                out[r.label as usize - 1] = r.score;
            }
        }
        out
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(what, format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, what: &'static str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(what, e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics,
    /// Row-major 4x4 world-to-camera transform.
    pub world_to_camera: [f64; 16],
    /// `.png` (16-bit, scaled by `depth_scale`) or anything else as raw `f32`.
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
    /// Optional 16-bit PNG of ground-truth instance ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_ids: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    /// Flat little-endian `u32` per-point labels.
    pub labels: String,
    #[serde(default)]
    pub shapes: Vec<ShapeKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub cloud: String,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
}

/// A scene as loaded from disk.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub cloud: ScenePointCloud,
    pub frames: Vec<PosedFrame>,
    pub truth: Option<GroundTruth>,
}

fn matrix_from_row_major(m: &[f64; 16]) -> Matrix4<f64> {
    Matrix4::from_row_slice(m)
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Load `dir/manifest.json` and everything it references.
pub fn load_scene_dir(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join(MANIFEST_NAME), "scene manifest")?;
    let cloud = read_ply_file(&resolve(dir, &manifest.cloud))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut id_images = Vec::new();
    for entry in &manifest.frames {
        let (w, h) = (entry.intrinsics.width as usize, entry.intrinsics.height as usize);
        let path = resolve(dir, &entry.depth);
        let depth = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            read_depth_png(&path, entry.depth_scale.unwrap_or(DEFAULT_DEPTH_SCALE))?
        } else {
            read_depth_f32(&path, w, h)?
        };
        if let Some(ids) = &entry.gt_ids {
            id_images.push(decode_png16(&read_bytes(&resolve(dir, ids))?)?.map(|v| *v as u32));
        }
        frames.push(PosedFrame {
            frame_id: entry.frame_id,
            intrinsics: entry.intrinsics,
            extrinsics: CameraExtrinsics::from_matrix4(&matrix_from_row_major(&entry.world_to_camera)),
            depth,
            color: None,
        });
    }
    let truth = match &manifest.ground_truth {
        None => None,
        Some(gt) => {
            let labels = read_labels(&resolve(dir, &gt.labels))?;
            if labels.len() != cloud.len() {
                return Err(Error::DimensionMismatch(format!(
                    "ground truth has {} labels for {} points",
                    labels.len(),
                    cloud.len()
                )));
            }
            if !id_images.is_empty() && id_images.len() != frames.len() {
                return Err(Error::format(
                    "scene manifest",
                    "gt_ids must be given for all frames or none",
                ));
            }
            Some(GroundTruth {
                labels,
                shapes: gt.shapes.clone(),
                id_images,
            })
        }
    };
    Ok(SceneData { cloud, frames, truth })
}

/// Write a scene directory: `cloud.ply`, `depth/NNNN.png`, optional
/// `gt/NNNN.png` id images, `gt_labels.bin`, and the manifest.
pub fn save_scene_dir(
    dir: &Path,
    cloud: &ScenePointCloud,
    frames: &[PosedFrame],
    truth: Option<&GroundTruth>,
) -> Result<()> {
    fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
    write_ply_file(&dir.join("cloud.ply"), cloud, PlyFormat::BinaryLittleEndian)?;
    let with_ids = truth.is_some_and(|t| t.id_images.len() == frames.len());
    if with_ids {
        fs::create_dir_all(dir.join("gt")).map_err(|e| Error::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let depth_name = format!("depth/{:04}.png", frame.frame_id);
        write_depth_png(&dir.join(&depth_name), &frame.depth, DEFAULT_DEPTH_SCALE)?;
        let gt_ids = if with_ids {
            let ids = &truth.expect("checked").id_images[k];
            if ids.data().iter().any(|v| *v > u16::MAX as u32) {
                return Err(Error::InvalidInput("instance id exceeds 16-bit PNG range".into()));
            }
            let name = format!("gt/{:04}.png", frame.frame_id);
            write_bytes(&dir.join(&name), &encode_png16(&ids.map(|v| *v as u16))?)?;
            Some(name)
        } else {
            None
        };
        let m = frame.extrinsics.to_matrix4();
        let mut world_to_camera = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                world_to_camera[r * 4 + c] = m[(r, c)];
            }
        }
        entries.push(FrameEntry {
            frame_id: frame.frame_id,
            intrinsics: frame.intrinsics,
            world_to_camera,
            depth: depth_name,
            depth_scale: Some(DEFAULT_DEPTH_SCALE),
            gt_ids,
        });
    }
    let ground_truth = match truth {
        Some(t) => {
            write_u32_file(&dir.join("gt_labels.bin"), &t.labels.labels)?;
            Some(GroundTruthEntry {
                labels: "gt_labels.bin".into(),
                shapes: t.shapes.clone(),
            })
        }
        None => None,
    };
    let manifest = SceneManifest {
        cloud: "cloud.ply".into(),
        frames: entries,
        ground_truth,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest, "scene manifest")
}
