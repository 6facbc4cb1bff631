use super::{QueryKind, ReasonerQuery};

pub const PROMPT_VERSION: &str = "v1";

const SYSTEM: &str = "You are the perception and reasoning module of a robot that learns manipulation \
skills from human demonstrations. You are shown a structured scene. Answer with a single JSON object \
and nothing else. Only use object ids, notation labels and grid cells that appear in the scene.";

fn instruction(kind: QueryKind) -> &'static str {
    match kind {
        QueryKind::TaskRecognition => {
            "Name the task the demonstrator performed and the task-related objects.\n\
             Schema: {\"kind\":\"task\",\"task_text\":string,\"objects\":[{\"name\":id,\"spatial_relation\":string}]}"
        }
        QueryKind::SubtaskRecognition => {
            "Classify the segment as grasping (hand reaches an object) or manipulation (a held object moves \
             relative to another). For grasping the slave is \"hand\".\n\
             Schema: {\"kind\":\"subtask\",\"phase\":\"grasping\"|\"manipulation\",\"master\":id,\"slave\":id,\"description\":string}"
        }
        QueryKind::SemanticLearning => {
            "Summarize what the trajectory must achieve and pick its trajectory class from: linear-pull, \
             linear-wipe, arc-about-hinge, arc-pour, screw-twist, lift-move-place, piecewise.\n\
             Schema: {\"kind\":\"semantic\",\"statements\":[string],\"trajectory_class\":string}"
        }
        QueryKind::GraspGrouping => {
            "Group the numbered grasp poses that serve the same purpose and state each group's constraint. \
             Every pose index (1-based) must appear in exactly one group.\n\
             Schema: {\"kind\":\"groups\",\"statements\":[string],\"groups\":[[int]]}"
        }
        QueryKind::GraspRegionSelection => {
            "Compare the target object with the reference grasp constraints in the context and select the \
             grid cells to grasp, once per perspective. Return exactly the requested number of independent \
             samples. A selection is a cell like \"C4\" or a rectangle like \"C4:E6\".\n\
             Schema: {\"kind\":\"grid_cells\",\"samples\":[{\"perspective_a\":cells,\"perspective_b\":cells}]}"
        }
        QueryKind::ManipulationComparison => {
            "Compare the current trajectory keypoints with the reference interaction and revise the \
             trajectory for the target scene. Give metric parameters in the master object frame.\n\
             Schema: {\"kind\":\"manipulation\",\"statements\":[string],\"trajectory_class\":string,\
             \"curve\":{\"type\":\"line\"|\"arc\"|\"screw\"|\"piecewise_line\",...}}"
        }
        QueryKind::HighLevelPlanning => {
            "Decompose the task into an ordered list of subtasks, using the retrieved plans in the context \
             as examples, and list the objects involved.\n\
             Schema: {\"kind\":\"plan\",\"steps\":[string],\"objects\":[id]}"
        }
        QueryKind::FailureReasoning => {
            "Diagnose the failed execution from the perceptual evidence and choose corrective actions from: \
             re-grasp, re-plan-trajectory, re-localize, abort.\n\
             Schema: {\"kind\":\"correction\",\"actions\":[action],\"rationale\":string}"
        }
    }
}

/// System and user messages for a query.
pub fn render_prompt(q: &ReasonerQuery) -> (String, String) {
    let mut user = format!("prompt-version: {PROMPT_VERSION}\ntask: {}\n", instruction(q.kind));
    if q.sample_count > 1 {
        user.push_str(&format!("samples: {}\n", q.sample_count));
    }
    user.push_str("\nscene:\n");
    user.push_str(&q.scene.to_text());
    if !q.context.is_empty() {
        user.push_str("\ncontext:\n");
        for c in &q.context {
            user.push_str(c);
            user.push('\n');
        }
    }
    if !q.images.is_empty() {
        user.push_str(&format!("\n{} projection image(s) attached.\n", q.images.len()));
    }
    (SYSTEM.to_string(), user)
}
