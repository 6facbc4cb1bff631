//! Segment a perception trace into grasping and manipulation subtasks and
//! extract object-centric interactions.
//!
//! Contact is detected per object from the hand-to-object cloud distance
//! series. Every contact interval yields two candidate windows: the reach
//! that ends at contact onset (a grasping subtask) and the contact itself
//! (a manipulation subtask). Windows whose hand path is shorter than `gamma`
//! are dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoner::{ask, Payload, QueryKind, Reasoner, ReasonerError, ReasonerQuery};
use crate::scene::{Scene, SceneObject};
use crate::trace::PerceptionTrace;
use crate::{cloud_distance, compute_bbox, relative_pose, ObjectProperties, Pose, Vec3, HAND};

pub use crate::reasoner::TaskObject;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Grasping,
    Manipulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub demo_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub start_frame: usize,
    pub end_frame: usize,
    pub phase: Phase,
    pub master_id: String,
    pub slave_id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Interaction {
    /// Gripper poses in the master object's frame.
    Grasp { grasp_poses: Vec<Pose> },
    /// Slave pose relative to the master, with timestamps.
    Manipulation { trajectory: Vec<(f64, Pose)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecognition {
    pub task_text: String,
    pub objects: Vec<TaskObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub epsilon: f64,
    pub gamma: f64,
    /// Contact intervals shorter than this many frames are noise.
    pub debounce_frames: usize,
    /// Gaps shorter than this many frames between contacts with the same
    /// object are bridged.
    pub bridge_frames: usize,
    /// Hand frame to gripper frame.
    pub hand_to_gripper: Pose,
    pub max_waypoints: usize,
    /// Displacement above which an object counts as moved (m).
    pub move_threshold: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            gamma: 0.05,
            debounce_frames: 3,
            bridge_frames: 3,
            hand_to_gripper: Pose::identity(),
            max_waypoints: 100,
            move_threshold: 0.01,
        }
    }
}

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("object '{object}' missing at frame {frame}")]
    Gap { object: String, frame: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("ambiguous segment: reasoner says {reasoner}, kinematic evidence says {kinematic}")]
    Ambiguity { reasoner: String, kinematic: String },
    #[error(transparent)]
    Reasoner(ReasonerError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

impl From<ReasonerError> for GroundingError {
    fn from(e: ReasonerError) -> Self {
        match e {
            ReasonerError::UnknownReference { names, .. } => {
                GroundingError::Validation(format!("reasoner referenced unknown objects: {}", names.join(", ")))
            }
            other => GroundingError::Reasoner(other),
        }
    }
}

/// Object box and cloud in the object's own frame at one frame of the trace.
pub fn object_properties(trace: &PerceptionTrace, id: &str, frame: usize) -> Result<ObjectProperties, GroundingError> {
    let gap = || GroundingError::Gap { object: id.to_string(), frame };
    let f = trace.frames.get(frame).ok_or_else(gap)?;
    let pose = f.object_poses.get(id).ok_or_else(gap)?;
    let cloud = f.object_clouds.get(id).ok_or_else(gap)?;
    let local = cloud.transformed(&pose.inverse(), id);
    let mut props = compute_bbox(id, &local).map_err(|e| GroundingError::Validation(e.to_string()))?;
    props.parts = trace.object_parts.get(id).cloned().unwrap_or_default();
    Ok(props)
}

fn scene_at(trace: &PerceptionTrace, frame: usize) -> Result<Scene, GroundingError> {
    let f = &trace.frames[frame];
    let objects = f
        .object_poses
        .iter()
        .map(|(id, pose)| Ok(SceneObject::from_props(&object_properties(trace, id, frame)?, *pose)))
        .collect::<Result<Vec<_>, GroundingError>>()?;
    Ok(Scene { objects, ..Default::default() })
}

/// Objects that moved more than `threshold` over frames `[a, b]`, largest first.
const MOTION_WINDOW: usize = 5;

/// Objects whose windowed mean position leaves the starting window's mean by
/// more than `threshold`, largest displacement first.
fn moved_objects(trace: &PerceptionTrace, a: usize, b: usize, threshold: f64) -> Vec<(String, f64)> {
    let frames = &trace.frames[a..=b];
    let w = MOTION_WINDOW.min(frames.len());
    let mut out: Vec<(String, f64)> = trace.frames[a]
        .object_poses
        .keys()
        .filter_map(|id| {
            let path: Vec<Vec3> = frames.iter().filter_map(|f| f.object_poses.get(id)).map(|p| p.position).collect();
            let means: Vec<Vec3> =
                path.windows(w.min(path.len()).max(1)).map(|win| win.iter().fold(Vec3::zero(), |acc, p| acc + *p) / win.len() as f64).collect();
            let p0 = *means.first()?;
            let disp = means.iter().map(|m| m.distance(p0)).fold(0.0, f64::max);
            (disp > threshold).then(|| (id.clone(), disp))
        })
        .collect();
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

/// Recognizes the demonstrated task and its objects.
pub fn recognize_task(trace: &PerceptionTrace, reasoner: &dyn Reasoner) -> Result<TaskRecognition, GroundingError> {
    trace.validate().map_err(|e| GroundingError::Validation(e.to_string()))?;
    if trace.object_ids().is_empty() {
        return Err(GroundingError::Validation("trace has no detected objects".into()));
    }
    let mut scene = scene_at(trace, 0)?;
    let last = trace.frames.len() - 1;
    let moved: Vec<String> = moved_objects(trace, 0, last, 0.01).into_iter().map(|(id, _)| id).collect();
    scene.set_fact("moved_objects", moved);
    let resp = ask(reasoner, &ReasonerQuery::new(QueryKind::TaskRecognition, scene))?;
    let Payload::Task { task_text, objects } = resp.payload else { unreachable!("validated kind") };
    Ok(TaskRecognition { task_text, objects })
}

/// Hand-to-object cloud distance at every frame.
pub fn interaction_distance_series(trace: &PerceptionTrace, candidate_id: &str) -> Result<Vec<(f64, f64)>, GroundingError> {
    trace
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cloud = f
                .object_clouds
                .get(candidate_id)
                .ok_or_else(|| GroundingError::Gap { object: candidate_id.to_string(), frame: i })?;
            let d = cloud_distance(&f.hand_cloud, cloud).map_err(|e| GroundingError::Validation(format!("frame {i}: {e}")))?;
            Ok((f.t, d))
        })
        .collect()
}

/// Contact onsets (`d[t-1] > eps` and `d[t] < eps`) paired in order with the
/// following release (`d[t-1] < eps` and `d[t] > eps`). An interaction still
/// open at the end closes at the last index.
pub fn detect_markers(series: &[f64], epsilon: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for t in 1..series.len() {
        let (prev, cur) = (series[t - 1], series[t]);
        match open {
            None if prev > epsilon && cur < epsilon => open = Some(t),
            Some(start) if prev < epsilon && cur > epsilon => {
                out.push((start, t));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        if start < series.len() - 1 {
            out.push((start, series.len() - 1));
        }
    }
    out
}

fn hand_path_length(trace: &PerceptionTrace, a: usize, b: usize) -> f64 {
    trace.frames[a..=b].windows(2).map(|w| w[0].hand_pose.position.distance(w[1].hand_pose.position)).sum()
}

/// Contact intervals per object after debouncing and gap bridging, merged
/// across objects in time order with overlaps dropped.
fn contact_intervals(trace: &PerceptionTrace, cfg: &GroundingConfig) -> Result<Vec<(usize, usize, String)>, GroundingError> {
    let mut all = Vec::new();
    for id in trace.object_ids() {
        let series: Vec<f64> = interaction_distance_series(trace, &id)?.into_iter().map(|(_, d)| d).collect();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (a, b) in detect_markers(&series, cfg.epsilon) {
            match pairs.last_mut() {
                Some(last) if a - last.1 < cfg.bridge_frames => last.1 = b,
                _ => pairs.push((a, b)),
            }
        }
        all.extend(pairs.into_iter().filter(|(a, b)| b - a >= cfg.debounce_frames).map(|(a, b)| (a, b, id.clone())));
    }
    all.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)).then_with(|| x.2.cmp(&y.2)));
    let mut kept: Vec<(usize, usize, String)> = Vec::new();
    for iv in all {
        if kept.last().is_none_or(|k| iv.0 >= k.1) {
            kept.push(iv);
        }
    }
    Ok(kept)
}

/// Reach and contact windows for every contact interval, filtered by hand
/// path length. Phase and roles are provisional until [`classify_segment`].
pub fn parse_segments(trace: &PerceptionTrace, epsilon: f64, gamma: f64) -> Result<Vec<Segment>, GroundingError> {
    let cfg = GroundingConfig { epsilon, gamma, ..Default::default() };
    parse_segments_with(trace, &cfg)
}

pub fn parse_segments_with(trace: &PerceptionTrace, cfg: &GroundingConfig) -> Result<Vec<Segment>, GroundingError> {
    if !(cfg.epsilon > 0.0 && cfg.gamma > 0.0) {
        return Err(GroundingError::Parameter(format!("epsilon {} and gamma {} must be positive", cfg.epsilon, cfg.gamma)));
    }
    trace.validate().map_err(|e| GroundingError::Validation(e.to_string()))?;
    let mut out = Vec::new();
    let mut prev_end = 0usize;
    for (a, b, id) in contact_intervals(trace, cfg)? {
        let windows = [(prev_end, a, Phase::Grasping), (a, b, Phase::Manipulation)];
        for (s, e, phase) in windows {
            if e <= s || hand_path_length(trace, s, e) < cfg.gamma {
                continue;
            }
            out.push(Segment {
                demo_id: trace.demo_id.clone(),
                t_start: trace.frames[s].t,
                t_end: trace.frames[e].t,
                start_frame: s,
                end_frame: e,
                phase,
                master_id: id.clone(),
                slave_id: HAND.to_string(),
                description: String::new(),
            });
        }
        prev_end = b;
    }
    Ok(out)
}

/// Kinematic reading of a segment: (phase, master, slave).
fn kinematic_evidence(
    segment: &Segment,
    trace: &PerceptionTrace,
    cfg: &GroundingConfig,
    moved: &[(String, f64)],
) -> Result<(Phase, String, String), GroundingError> {
    let (a, b) = (segment.start_frame, segment.end_frame);
    if moved.is_empty() {
        let f = &trace.frames[b];
        let mut best: Option<(f64, &String)> = None;
        for (id, cloud) in &f.object_clouds {
            let d = cloud_distance(&f.hand_cloud, cloud).map_err(|e| GroundingError::Validation(e.to_string()))?;
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, id));
            }
        }
        return match best {
            Some((d, id)) if d < cfg.epsilon => Ok((Phase::Grasping, id.clone(), HAND.to_string())),
            _ => Err(GroundingError::Ambiguity {
                reasoner: "not consulted".into(),
                kinematic: "no object moved and the hand contacts nothing".into(),
            }),
        };
    }
    let mut slave: Option<(f64, &String)> = None;
    for (id, _) in moved {
        let rel: Vec<Vec3> = trace.frames[a..=b]
            .iter()
            .filter_map(|f| f.object_poses.get(id).map(|p| f.hand_pose.inverse().transform_point(p.position)))
            .collect();
        let n = rel.len().max(1) as f64;
        let mean = rel.iter().fold(Vec3::zero(), |acc, p| acc + *p) / n;
        let var = rel.iter().map(|p| (*p - mean).norm_squared()).sum::<f64>() / n;
        if slave.is_none_or(|(v, _)| var < v) {
            slave = Some((var, id));
        }
    }
    let slave = slave.expect("moved non-empty").1.clone();
    let mut master: Option<(f64, String)> = None;
    for f in &trace.frames[a..=b] {
        let Some(sc) = f.object_clouds.get(&slave) else { continue };
        for (id, cloud) in f.object_clouds.iter().filter(|(id, _)| **id != slave) {
            let d = cloud_distance(sc, cloud).map_err(|e| GroundingError::Validation(e.to_string()))?;
            if master.as_ref().is_none_or(|(bd, bid)| d < *bd || (d == *bd && id < bid)) {
                master = Some((d, id.clone()));
            }
        }
    }
    match master {
        Some((_, m)) => Ok((Phase::Manipulation, m, slave)),
        None => Err(GroundingError::Ambiguity {
            reasoner: "not consulted".into(),
            kinematic: format!("'{slave}' moved but no other object to act on"),
        }),
    }
}

fn label(phase: Phase, master: &str, slave: &str) -> String {
    format!("{phase:?}(master={master}, slave={slave})")
}

/// Fills phase, roles and description, cross-checking the reasoner against
/// the kinematic evidence.
pub fn classify_segment(
    segment: &Segment,
    trace: &PerceptionTrace,
    reasoner: &dyn Reasoner,
    cfg: &GroundingConfig,
) -> Result<Segment, GroundingError> {
    let (a, b) = (segment.start_frame, segment.end_frame);
    if a >= b || b >= trace.frames.len() {
        return Err(GroundingError::Validation(format!("segment frames {a}..{b} outside trace")));
    }
    let moved = moved_objects(trace, a, b, cfg.move_threshold);
    let kinematic = kinematic_evidence(segment, trace, cfg, &moved)?;

    let mut scene = scene_at(trace, a)?;
    let end = &trace.frames[b];
    let mut contact: Option<(f64, String)> = None;
    for (id, cloud) in &end.object_clouds {
        let d = cloud_distance(&end.hand_cloud, cloud).map_err(|e| GroundingError::Validation(e.to_string()))?;
        if d < cfg.epsilon && contact.as_ref().is_none_or(|(bd, _)| d < *bd) {
            contact = Some((d, id.clone()));
        }
    }
    if let Some((_, id)) = &contact {
        let props = object_properties(trace, id, b)?;
        let local = end.object_poses[id].inverse().transform_point(end.hand_pose.position);
        if let Some(p) = props.parts.iter().find(|p| p.contains(local, 0.01)) {
            scene.set_fact("contact_part", &p.name);
        }
        scene.set_fact("contact_object", id);
    }
    let moved_ids: Vec<&String> = moved.iter().map(|(id, _)| id).collect();
    scene.set_fact("moved_objects", &moved_ids);
    if let Some(first) = moved_ids.first() {
        let f = &trace.frames[b];
        let mut nearest: Option<(f64, &String)> = None;
        for (id, cloud) in f.object_clouds.iter().filter(|(id, _)| id != first) {
            let d = cloud_distance(&f.object_clouds[*first], cloud).map_err(|e| GroundingError::Validation(e.to_string()))?;
            if nearest.is_none_or(|(bd, _)| d < bd) {
                nearest = Some((d, id));
            }
        }
        if let Some((_, id)) = nearest {
            scene.set_fact("nearest_to_moved", id);
        }
    }
    let resp = ask(reasoner, &ReasonerQuery::new(QueryKind::SubtaskRecognition, scene))?;
    let Payload::Subtask { phase, master, slave, description } = resp.payload else { unreachable!("validated kind") };
    if (phase, master.as_str(), slave.as_str()) != (kinematic.0, kinematic.1.as_str(), kinematic.2.as_str()) {
        return Err(GroundingError::Ambiguity {
            reasoner: label(phase, &master, &slave),
            kinematic: label(kinematic.0, &kinematic.1, &kinematic.2),
        });
    }
    Ok(Segment { phase, master_id: master, slave_id: slave, description, ..segment.clone() })
}

fn pose_at(trace: &PerceptionTrace, id: &str, frame: usize) -> Result<Pose, GroundingError> {
    trace.frames[frame].object_poses.get(id).copied().ok_or_else(|| GroundingError::Gap { object: id.to_string(), frame })
}

/// Evenly spaced indices into `0..n`, at most `cap`, first and last included.
pub fn downsample_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..cap).map(|k| ((k as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// Grasp pose at contact onset, or the slave-in-master trajectory over the window.
pub fn extract_interaction(segment: &Segment, trace: &PerceptionTrace, cfg: &GroundingConfig) -> Result<Interaction, GroundingError> {
    let (a, b) = (segment.start_frame, segment.end_frame);
    if b >= trace.frames.len() || a >= b {
        return Err(GroundingError::Validation(format!("segment frames {a}..{b} outside trace")));
    }
    let rel = |m: &Pose, s: &Pose| relative_pose(m, s).map_err(|e| GroundingError::Validation(e.to_string()));
    match segment.phase {
        Phase::Grasping => {
            let master = pose_at(trace, &segment.master_id, b)?;
            let hand = trace.frames[b].hand_pose;
            let grasp = rel(&master, &hand)?.mul_pose(&cfg.hand_to_gripper);
            Ok(Interaction::Grasp { grasp_poses: vec![grasp] })
        }
        Phase::Manipulation => {
            let mut traj = Vec::with_capacity(b - a + 1);
            for i in a..=b {
                let m = pose_at(trace, &segment.master_id, i)?;
                let s = pose_at(trace, &segment.slave_id, i)?;
                traj.push((trace.frames[i].t, rel(&m, &s)?));
            }
            let idx = downsample_indices(traj.len(), cfg.max_waypoints.max(2));
            Ok(Interaction::Manipulation { trajectory: idx.into_iter().map(|i| traj[i]).collect() })
        }
    }
}

/// Everything grounding produces for one demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedDemo {
    pub demo_id: String,
    pub task: TaskRecognition,
    pub segments: Vec<Segment>,
    pub interactions: Vec<Interaction>,
    /// Master object properties per segment, observed at the segment start.
    pub masters: Vec<ObjectProperties>,
}

pub fn ground_demo(trace: &PerceptionTrace, reasoner: &dyn Reasoner, cfg: &GroundingConfig) -> Result<GroundedDemo, GroundingError> {
    let task = recognize_task(trace, reasoner)?;
    let mut segments = Vec::new();
    let mut interactions = Vec::new();
    let mut masters = Vec::new();
    for raw in parse_segments_with(trace, cfg)? {
        let seg = classify_segment(&raw, trace, reasoner, cfg)?;
        interactions.push(extract_interaction(&seg, trace, cfg)?);
        masters.push(object_properties(trace, &seg.master_id, seg.start_frame)?);
        segments.push(seg);
    }
    Ok(GroundedDemo { demo_id: trace.demo_id.clone(), task, segments, interactions, masters })
}
