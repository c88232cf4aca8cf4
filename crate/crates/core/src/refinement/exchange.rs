//! Out-of-process segmenter: one request/response JSON file pair per call.
//!
//! The command is run as `<command...> <request.json> <response.json>`.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::morphology::RleMask;
use super::{FramePrompt, Segmenter, SegmenterSpec};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::scene_model::{BinaryMask, PosedFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    /// `(u, v)` pixel.
    pub pixel: [u32; 2],
    /// `[u, v, w, h]`.
    #[serde(rename = "box")]
    pub box2d: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<RleMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: RleMask,
}

pub struct ExchangeSegmenter {
    command: Vec<String>,
    workdir: PathBuf,
    counter: AtomicU64,
}

impl ExchangeSegmenter {
    pub fn from_spec(spec: &SegmenterSpec) -> Result<Self> {
        let command: Vec<String> = match spec.params.get("command") {
            Some(serde_json::Value::String(s)) => s.split_whitespace().map(str::to_string).collect(),
            Some(serde_json::Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Config("segmenter `command` entries must be strings".into()))
                })
                .collect::<Result<_>>()?,
            _ => return Err(Error::Config("exchange segmenter needs a `command`".into())),
        };
        if command.is_empty() {
            return Err(Error::Config("exchange segmenter `command` is empty".into()));
        }
        let workdir = spec
            .str_param("workdir")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join(format!("sceneseg-segment-{}", std::process::id())));
        Ok(ExchangeSegmenter {
            command,
            workdir,
            counter: AtomicU64::new(0),
        })
    }
}

impl Segmenter for ExchangeSegmenter {
    fn segment(&self, prompt: &FramePrompt, frame: &PosedFrame, prior: Option<&BinaryMask>) -> Result<BinaryMask> {
        fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let req_path = self.workdir.join(format!("request-{n}.json"));
        let resp_path = self.workdir.join(format!("response-{n}.json"));
        let b = prompt.box2d;
        let request = SegmentRequest {
            frame_id: frame.frame_id,
            width: frame.width(),
            height: frame.height(),
            pixel: [prompt.pixel.0, prompt.pixel.1],
            box2d: [b.u, b.v, b.w, b.h],
            prior: prior.map(RleMask::encode),
        };
        write_json(&req_path, &request, "segment request")?;
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&req_path)
            .arg(&resp_path)
            .status()
            .map_err(|e| Error::backend("exchange", format!("cannot launch `{}`: {e}", self.command[0])))?;
        if !status.success() {
            return Err(Error::backend("exchange", format!("segmenter exited with {status}")));
        }
        let response: SegmentResponse = read_json(&resp_path, "segment response")?;
        let _ = fs::remove_file(&req_path);
        let _ = fs::remove_file(&resp_path);
        response.mask.decode()
    }

    fn is_concurrent(&self) -> bool {
        false
    }
}
