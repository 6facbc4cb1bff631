//! Perception traces and their line-oriented file format.
//!
//! A trace file is JSON Lines. The first line is a header record, every
//! following line is exactly one frame:
//!
//! ```text
//! {"record":"header","schema_version":1,"demo_id":"drawer-0007","fps":30.0,"frame_count":75,"object_parts":{...}}
//! {"record":"frame","index":0,"t":0.0,"hand_pose":{...},"hand_cloud":{...},"object_poses":{...},"object_clouds":{...}}
//! ```
//!
//! `object_parts` is optional and lists named object-frame boxes per object.
//! Poses are `{"position":{"x","y","z"},"orientation":{"w","x","y","z"}}` in
//! meters, world frame. Clouds are `{"points":[{"x","y","z"},...],"frame":"world"}`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Part, PointCloud, Pose};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub hand_pose: Pose,
    pub hand_cloud: PointCloud,
    pub object_poses: BTreeMap<String, Pose>,
    pub object_clouds: BTreeMap<String, PointCloud>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionTrace {
    pub demo_id: String,
    pub fps: f64,
    pub frames: Vec<Frame>,
    /// Visually identified sub-parts per object, in the object frame.
    #[serde(default)]
    pub object_parts: BTreeMap<String, Vec<Part>>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace '{demo_id}' invalid: {reason}")]
    Invalid { demo_id: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported trace schema version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PerceptionTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        let invalid = |reason: String| TraceError::Invalid { demo_id: self.demo_id.clone(), reason };
        if self.frames.len() < 2 {
            return Err(invalid(format!("{} frames, need at least 2", self.frames.len())));
        }
        for (i, pair) in self.frames.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(invalid(format!("timestamps not increasing at frame {}", i + 1)));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            if let Some(id) = f.object_poses.keys().find(|id| !f.object_clouds.contains_key(*id)) {
                return Err(invalid(format!("frame {i}: object '{id}' has a pose but no cloud")));
            }
        }
        Ok(())
    }

    /// Object ids seen in any frame, sorted.
    pub fn object_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .frames
            .iter()
            .flat_map(|f| f.object_poses.keys().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Applies one rigid transform to every world-frame quantity.
    pub fn transformed(&self, pose: &Pose) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                t: f.t,
                hand_pose: pose.mul_pose(&f.hand_pose),
                hand_cloud: f.hand_cloud.transformed(pose, f.hand_cloud.frame.clone()),
                object_poses: f.object_poses.iter().map(|(k, p)| (k.clone(), pose.mul_pose(p))).collect(),
                object_clouds: f
                    .object_clouds
                    .iter()
                    .map(|(k, c)| (k.clone(), c.transformed(pose, c.frame.clone())))
                    .collect(),
            })
            .collect();
        Self { demo_id: self.demo_id.clone(), fps: self.fps, frames, object_parts: self.object_parts.clone() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        schema_version: u32,
        demo_id: String,
        fps: f64,
        frame_count: usize,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        object_parts: BTreeMap<String, Vec<Part>>,
    },
    Frame { index: usize, #[serde(flatten)] frame: Frame },
}

pub fn write_trace(trace: &PerceptionTrace, mut out: impl Write) -> Result<(), TraceError> {
    let header = Record::Header {
        schema_version: TRACE_SCHEMA_VERSION,
        demo_id: trace.demo_id.clone(),
        fps: trace.fps,
        frame_count: trace.frames.len(),
        object_parts: trace.object_parts.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;
    for (index, frame) in trace.frames.iter().enumerate() {
        let rec = Record::Frame { index, frame: frame.clone() };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable"))?;
    }
    Ok(())
}

type Header = (String, f64, usize, BTreeMap<String, Vec<Part>>);

pub fn read_trace(input: impl BufRead) -> Result<PerceptionTrace, TraceError> {
    let mut header: Option<Header> = None;
    let mut frames = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| TraceError::Parse { line: line_no, reason: e.to_string() })?;
        match rec {
            Record::Header { schema_version, demo_id, fps, frame_count, object_parts } => {
                if header.is_some() {
                    return Err(TraceError::Parse { line: line_no, reason: "duplicate header".into() });
                }
                if schema_version != TRACE_SCHEMA_VERSION {
                    return Err(TraceError::Version(schema_version));
                }
                header = Some((demo_id, fps, frame_count, object_parts));
            }
            Record::Frame { index, frame } => {
                if header.is_none() {
                    return Err(TraceError::Parse { line: line_no, reason: "frame before header".into() });
                }
                if index != frames.len() {
                    return Err(TraceError::Parse {
                        line: line_no,
                        reason: format!("expected frame index {}, found {index}", frames.len()),
                    });
                }
                frames.push(frame);
            }
        }
    }
    let (demo_id, fps, frame_count, object_parts) =
        header.ok_or(TraceError::Parse { line: 1, reason: "missing header".into() })?;
    if frame_count != frames.len() {
        return Err(TraceError::Parse {
            line: frames.len() + 1,
            reason: format!("header announces {frame_count} frames, found {}", frames.len()),
        });
    }
    let trace = PerceptionTrace { demo_id, fps, frames, object_parts };
    trace.validate()?;
    Ok(trace)
}
