//! Out-of-process prompt backend speaking a JSON file protocol.
//!
//! The cloud is written as binary PLY, an external command is invoked as
//! `<command...> <cloud.ply> <output.json>`, and the output is parsed as
//! [`ExchangeFile`]. With no `command` parameter the backend just reads an
//! existing `output` file, which is handy for precomputed predictions.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{BoxBranchOutput, BoxPromptBackend, PointBranchOutput, PointPromptBackend, PromptBackendSpec};
use crate::error::{Error, Result};
use crate::io::ply::{write_ply, PlyFormat};
use crate::scene_model::{Box3D, ScenePointCloud, Vec3};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_hint: Option<u32>,
}

/// `{"groups": [[...]], "group_features": [[...]], "boxes": [{"center": [x,y,z], "size": [w,h,l]}], "box_features": [[...]]}`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeFile {
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub group_features: Vec<Vec<f64>>,
    #[serde(default)]
    pub boxes: Vec<ExchangeBox>,
    #[serde(default)]
    pub box_features: Vec<Vec<f64>>,
}

impl ExchangeFile {
    pub fn from_outputs(points: Option<&PointBranchOutput>, boxes: Option<&BoxBranchOutput>) -> Self {
        let mut f = ExchangeFile::default();
        if let Some(p) = points {
            f.groups = p.groups.clone();
            f.group_features = p.features.clone();
        }
        if let Some(b) = boxes {
            f.boxes = b
                .boxes
                .iter()
                .map(|b| ExchangeBox {
                    center: b.center.into(),
                    size: b.size.into(),
                    label_hint: b.label_hint,
                })
                .collect();
            f.box_features = b.features.clone();
        }
        f
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format("exchange JSON", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| Error::format("exchange JSON", e.to_string()))
    }

    pub fn point_output(&self) -> PointBranchOutput {
        PointBranchOutput {
            classes: 0,
            logits: Vec::new(),
            groups: self.groups.clone(),
            features: self.group_features.clone(),
        }
    }

    pub fn box_output(&self) -> BoxBranchOutput {
        BoxBranchOutput {
            boxes: self
                .boxes
                .iter()
                .map(|b| Box3D {
                    center: Vec3::from(b.center),
                    size: Vec3::from(b.size),
                    label_hint: b.label_hint,
                })
                .collect(),
            features: self.box_features.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExchangeBackend {
    command: Vec<String>,
    output: Option<PathBuf>,
    workdir: Option<PathBuf>,
}

impl ExchangeBackend {
    pub fn from_spec(spec: &PromptBackendSpec) -> Result<Self> {
        let command = match spec.params.get("command") {
            None => Vec::new(),
            Some(serde_json::Value::String(s)) => s.split_whitespace().map(str::to_string).collect(),
            Some(serde_json::Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Config("exchange `command` entries must be strings".into()))
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::Config("exchange `command` must be a string or array".into())),
        };
        let output = spec.str_param("output").map(PathBuf::from);
        if command.is_empty() && output.is_none() {
            return Err(Error::Config("exchange backend needs `command` or `output`".into()));
        }
        Ok(ExchangeBackend {
            command,
            output,
            workdir: spec.str_param("workdir").map(PathBuf::from),
        })
    }

    fn exchange(&self, cloud: &ScenePointCloud) -> Result<ExchangeFile> {
        if self.command.is_empty() {
            return ExchangeFile::read(self.output.as_deref().expect("checked in from_spec"));
        }
        let dir = match &self.workdir {
            Some(d) => d.clone(),
            None => std::env::temp_dir().join(format!("sceneseg-exchange-{}", std::process::id())),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cloud_path = dir.join("cloud.ply");
        let out_path = self.output.clone().unwrap_or_else(|| dir.join("prompts.json"));
        let file = fs::File::create(&cloud_path).map_err(|e| Error::io(&cloud_path, e))?;
        write_ply(BufWriter::new(file), cloud, PlyFormat::BinaryLittleEndian)?;
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&cloud_path)
            .arg(&out_path)
            .status()
            .map_err(|e| Error::backend("exchange", format!("cannot launch `{}`: {e}", self.command[0])))?;
        if !status.success() {
            return Err(Error::backend(
                "exchange",
                format!("`{}` exited with {status}", self.command.join(" ")),
            ));
        }
        ExchangeFile::read(&out_path)
    }
}

impl PointPromptBackend for ExchangeBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<PointBranchOutput> {
        Ok(self.exchange(cloud)?.point_output())
    }
}

impl BoxPromptBackend for ExchangeBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<BoxBranchOutput> {
        Ok(self.exchange(cloud)?.box_output())
    }
}
