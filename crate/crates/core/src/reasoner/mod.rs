//! The reasoner contract: typed queries over an annotated scene and typed,
//! schema-checked responses.
//!
//! Two backends implement [`Reasoner`]: [`ScriptedReasoner`], a rule table
//! that is a pure function of the query, and [`RemoteReasoner`], which talks
//! to a chat-completion HTTP endpoint.

mod prompt;
mod remote;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::Phase;
use crate::learner::Curve;
use crate::scene::{RasterImage, Scene};

pub use prompt::{render_prompt, PROMPT_VERSION};
pub use remote::{HttpTransport, RemoteConfig, RemoteReasoner, UreqTransport};
pub use scripted::ScriptedReasoner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    TaskRecognition,
    SubtaskRecognition,
    SemanticLearning,
    GraspGrouping,
    GraspRegionSelection,
    ManipulationComparison,
    HighLevelPlanning,
    FailureReasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerQuery {
    pub kind: QueryKind,
    pub scene: Scene,
    #[serde(default)]
    pub images: Vec<RasterImage>,
    #[serde(default)]
    pub context: Vec<String>,
    pub sample_count: usize,
}

impl ReasonerQuery {
    pub fn new(kind: QueryKind, scene: Scene) -> Self {
        Self { kind, scene, images: Vec::new(), context: Vec::new(), sample_count: 1 }
    }

    pub fn with_context(mut self, context: Vec<String>) -> Self {
        self.context = context;
        self
    }

    pub fn with_samples(mut self, k: usize) -> Self {
        self.sample_count = k;
        self
    }

    pub fn validate(&self) -> Result<(), ReasonerError> {
        if self.sample_count == 0 {
            return Err(ReasonerError::InvalidQuery("sample_count must be at least 1".into()));
        }
        self.scene.validate().map_err(ReasonerError::InvalidQuery)?;
        let need_grid = self.kind == QueryKind::GraspRegionSelection;
        if need_grid && self.scene.grid.is_none() {
            return Err(ReasonerError::InvalidQuery("grasp region selection needs a grid".into()));
        }
        if matches!(self.kind, QueryKind::GraspGrouping) && self.scene.notations.is_empty() {
            return Err(ReasonerError::InvalidQuery("grasp grouping needs notations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskObject {
    pub name: String,
    pub spatial_relation: String,
}

/// One sample of a grasp region selection: a cell or cell rectangle per
/// perspective, in perspective order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellSelection {
    pub perspective_a: String,
    pub perspective_b: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectiveAction {
    ReGrasp,
    RePlanTrajectory,
    ReLocalize,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Task { task_text: String, objects: Vec<TaskObject> },
    Subtask { phase: Phase, master: String, slave: String, description: String },
    Semantic { statements: Vec<String>, trajectory_class: String },
    Groups { statements: Vec<String>, groups: Vec<Vec<usize>> },
    GridCells { samples: Vec<CellSelection> },
    Manipulation { statements: Vec<String>, trajectory_class: String, curve: Curve },
    Plan { steps: Vec<String>, objects: Vec<String> },
    Correction { actions: Vec<CorrectiveAction>, rationale: String },
}

impl Payload {
    pub fn kind(&self) -> QueryKind {
        match self {
            Payload::Task { .. } => QueryKind::TaskRecognition,
            Payload::Subtask { .. } => QueryKind::SubtaskRecognition,
            Payload::Semantic { .. } => QueryKind::SemanticLearning,
            Payload::Groups { .. } => QueryKind::GraspGrouping,
            Payload::GridCells { .. } => QueryKind::GraspRegionSelection,
            Payload::Manipulation { .. } => QueryKind::ManipulationComparison,
            Payload::Plan { .. } => QueryKind::HighLevelPlanning,
            Payload::Correction { .. } => QueryKind::FailureReasoning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerResponse {
    pub payload: Payload,
    pub transcript: String,
}

#[derive(Debug, Clone, Error)]
pub enum ReasonerError {
    #[error("reasoner transport failed: {0}")]
    Transport(String),
    #[error("reasoner response failed schema check: {message}")]
    Schema { message: String, transcript: String },
    #[error("reasoner referenced unknown names: {}", names.join(", "))]
    UnknownReference { names: Vec<String>, transcript: String },
    #[error("reasoner cannot answer {0:?} for this scene")]
    Unsupported(QueryKind),
    #[error("invalid reasoner query: {0}")]
    InvalidQuery(String),
}

impl ReasonerError {
    pub fn transcript(&self) -> Option<&str> {
        match self {
            ReasonerError::Schema { transcript, .. } | ReasonerError::UnknownReference { transcript, .. } => {
                Some(transcript)
            }
            _ => None,
        }
    }
}

pub trait Reasoner: Send + Sync {
    fn name(&self) -> &str;
    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError>;
}

impl<R: Reasoner + ?Sized> Reasoner for &R {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
        (**self).query(q)
    }
}

impl<R: Reasoner + ?Sized> Reasoner for Box<R> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
        (**self).query(q)
    }
}

/// Trajectory classes the learner can fit, with their primitive family.
pub const TRAJECTORY_CLASSES: [(&str, &str); 7] = [
    ("linear-pull", "line"),
    ("linear-wipe", "line"),
    ("arc-about-hinge", "arc"),
    ("arc-pour", "arc"),
    ("screw-twist", "screw"),
    ("lift-move-place", "piecewise-line"),
    ("piecewise", "piecewise-line"),
];

/// Checks a payload against the query it answers: kind match, cardinality,
/// and that every referenced id or label exists in the query scene.
pub fn validate_response(q: &ReasonerQuery, payload: &Payload, transcript: &str) -> Result<(), ReasonerError> {
    let schema = |message: String| ReasonerError::Schema { message, transcript: transcript.to_string() };
    let unknown = |names: Vec<String>| ReasonerError::UnknownReference { names, transcript: transcript.to_string() };
    if payload.kind() != q.kind {
        return Err(schema(format!("expected a {:?} payload, got {:?}", q.kind, payload.kind())));
    }
    let scene = &q.scene;
    let missing = |ids: &mut dyn Iterator<Item = &String>| -> Vec<String> {
        ids.filter(|id| !scene.has_object(id) && id.as_str() != crate::HAND).cloned().collect()
    };
    match payload {
        Payload::Task { task_text, objects } => {
            if task_text.trim().is_empty() {
                return Err(schema("empty task text".into()));
            }
            let mut names: Vec<&String> = objects.iter().map(|o| &o.name).collect();
            let before = names.len();
            names.sort();
            names.dedup();
            if names.len() != before {
                return Err(schema("duplicate task objects".into()));
            }
            let bad = missing(&mut objects.iter().map(|o| &o.name));
            if !bad.is_empty() {
                return Err(unknown(bad));
            }
        }
        Payload::Subtask { phase, master, slave, description } => {
            if description.trim().is_empty() {
                return Err(schema("empty subtask description".into()));
            }
            if *phase == Phase::Grasping && slave != crate::HAND {
                return Err(schema(format!("grasping phase must have slave '{}'", crate::HAND)));
            }
            let bad = missing(&mut [master, slave].into_iter());
            if !bad.is_empty() {
                return Err(unknown(bad));
            }
        }
        Payload::Semantic { statements, trajectory_class } | Payload::Manipulation { statements, trajectory_class, .. } => {
            if statements.is_empty() {
                return Err(schema("no statements".into()));
            }
            if !TRAJECTORY_CLASSES.iter().any(|(c, _)| c == trajectory_class) {
                return Err(schema(format!("unknown trajectory class '{trajectory_class}'")));
            }
            if let Payload::Manipulation { curve, .. } = payload {
                curve.validate().map_err(schema)?;
            }
        }
        Payload::Groups { statements, groups } => {
            if statements.is_empty() {
                return Err(schema("no statements".into()));
            }
            let n = scene.notations.len();
            let mut seen = vec![false; n];
            for g in groups {
                if g.is_empty() {
                    return Err(schema("empty group".into()));
                }
                for &i in g {
                    if i == 0 || i > n {
                        return Err(unknown(vec![i.to_string()]));
                    }
                    if std::mem::replace(&mut seen[i - 1], true) {
                        return Err(schema(format!("pose {i} in more than one group")));
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(schema("groups do not cover every pose".into()));
            }
        }
        Payload::GridCells { samples } => {
            let grid = scene.grid.as_ref().expect("validated query has a grid");
            if samples.len() != q.sample_count {
                return Err(schema(format!("expected {} samples, got {}", q.sample_count, samples.len())));
            }
            let bad: Vec<String> = samples
                .iter()
                .flat_map(|s| [&s.perspective_a, &s.perspective_b])
                .filter(|sel| grid.parse_selection(sel).is_none())
                .cloned()
                .collect();
            if !bad.is_empty() {
                return Err(schema(format!("invalid grid cells: {}", bad.join(", "))));
            }
        }
        Payload::Plan { steps, objects } => {
            if steps.is_empty() || steps.iter().any(|s| s.trim().is_empty()) {
                return Err(schema("plan needs non-empty steps".into()));
            }
            let bad = missing(&mut objects.iter());
            if !bad.is_empty() {
                return Err(unknown(bad));
            }
        }
        Payload::Correction { actions, .. } => {
            if actions.is_empty() {
                return Err(schema("no corrective action".into()));
            }
        }
    }
    Ok(())
}

/// Query, then validate the payload against the query.
pub fn ask(reasoner: &dyn Reasoner, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
    q.validate()?;
    let resp = reasoner.query(q)?;
    validate_response(q, &resp.payload, &resp.transcript)?;
    Ok(resp)
}
