use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use skillgraft::adapter::{
    adapt_grasp, adapt_manipulation, check_convergence, compose_task_delta, failure_reason, plan_high_level, AdaptConfig, AdaptError,
    AdaptationState, FailureClass, FailureReport, TargetContext,
};
use skillgraft::bank::{BankHandle, PlanRecord};
use skillgraft::grounding::{ground_demo, GroundedDemo, GroundingConfig, Phase};
use skillgraft::learner::{learn_skill, Curve, Demonstrated, Geometric, Skill};
use skillgraft::reasoner::{
    CellSelection, CorrectiveAction, Payload, QueryKind, Reasoner, ReasonerError, ReasonerQuery, ReasonerResponse, ScriptedReasoner,
};
use skillgraft::scene::{Cell, GraspGrid};
use skillgraft::simenv::{self, DoorVariant, NoiseModel, TemplateId};
use skillgraft::world::Kinematic;
use skillgraft::{ObjectProperties, Part, Pose, Vec3};

fn grounded(t: TemplateId) -> GroundedDemo {
    ground_demo(&simenv::generate_demo(t, 11, NoiseModel::default()).trace, &ScriptedReasoner::new(), &GroundingConfig::default()).unwrap()
}

fn skill_at(d: &GroundedDemo, phase: Phase) -> (usize, Skill) {
    let i = d.segments.iter().position(|s| s.phase == phase).unwrap();
    let ds = [Demonstrated { segment: &d.segments[i], interaction: &d.interactions[i], master: &d.masters[i] }];
    (i, learn_skill(&ds, &ScriptedReasoner::new(), None).unwrap())
}

fn context(t: TemplateId, d: &GroundedDemo, i: usize, delta: &str) -> TargetContext {
    TargetContext::from_world(&simenv::build_world(t, 11), &d.segments[i].master_id, &d.segments[i].slave_id, delta).unwrap()
}

/// Scripted answers with the last `dissent` grid samples replaced by `other`.
struct Dissenting {
    inner: ScriptedReasoner,
    dissent: usize,
    other: Option<CellSelection>,
    calls: AtomicUsize,
}

impl Dissenting {
    fn new(dissent: usize, other: Option<CellSelection>) -> Self {
        Self { inner: ScriptedReasoner::new(), dissent, other, calls: AtomicUsize::new(0) }
    }
}

impl Reasoner for Dissenting {
    fn name(&self) -> &str {
        "dissenting"
    }

    fn query(&self, q: &ReasonerQuery) -> Result<ReasonerResponse, ReasonerError> {
        let mut r = self.inner.query(q)?;
        if q.kind == QueryKind::GraspRegionSelection {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Payload::GridCells { samples } = &mut r.payload {
                let n = samples.len();
                for s in samples.iter_mut().skip(n - self.dissent) {
                    *s = self.other.clone().unwrap_or_else(|| CellSelection { perspective_a: "A1".into(), perspective_b: "J10".into() });
                }
            }
        }
        Ok(r)
    }
}

#[test]
fn majority_cell_survives_one_dissent() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Grasping);
    let cfg = AdaptConfig::default();
    let plain = adapt_grasp(&skill, &d.masters[i], &ScriptedReasoner::new(), &cfg).unwrap();
    let other = CellSelection { perspective_a: "B2".into(), perspective_b: "B3".into() };
    let noisy = adapt_grasp(&skill, &d.masters[i], &Dissenting::new(1, Some(other)), &cfg).unwrap();
    assert_eq!(noisy.result, plain.result);
}

#[test]
fn tied_votes_requery_then_fail_with_transcripts() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Grasping);
    let cfg = AdaptConfig { samples: 4, ..AdaptConfig::default() };
    let other = CellSelection { perspective_a: "B2".into(), perspective_b: "B3".into() };
    let r = Dissenting::new(2, Some(other));
    match adapt_grasp(&skill, &d.masters[i], &r, &cfg) {
        Err(AdaptError::Adaptation { transcripts, .. }) => assert_eq!(transcripts.len(), 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(r.calls.load(Ordering::SeqCst), 1 + cfg.max_requeries);
}

#[test]
fn inconsistent_perspectives_rejected() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Grasping);
    let cfg = AdaptConfig::default();
    let r = Dissenting::new(cfg.samples, None);
    assert!(matches!(adapt_grasp(&skill, &d.masters[i], &r, &cfg), Err(AdaptError::Adaptation { .. })));
}

fn vmin(a: Vec3, b: Vec3) -> Vec3 {
    Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z))
}

fn vmax(a: Vec3, b: Vec3) -> Vec3 {
    Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z))
}

fn relocate_to_side(master: &ObjectProperties) -> (ObjectProperties, Vec3) {
    let mut target = master.clone();
    let k = target.parts.iter().position(|p| p.name == "handle").expect("drawer has a handle");
    let (a, b) = (master.normalize(target.parts[k].lo), master.normalize(target.parts[k].hi));
    let (lo, hi) = (vmin(a, b), vmax(a, b));
    let depth = hi.y - lo.y;
    let corners = [Vec3::new(0.5 - depth, lo.x.max(-0.3), lo.z), Vec3::new(0.5, hi.x.min(0.3), hi.z)].map(|n| target.denormalize(n));
    target.parts[k] = Part { name: "handle".into(), lo: vmin(corners[0], corners[1]), hi: vmax(corners[0], corners[1]) };
    let center = target.normalize(target.parts[k].center());
    (target, center)
}

#[test]
fn handle_on_side_face_moves_region() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Grasping);
    let reference = skill.grasp_regions().unwrap().regions[0].clone();
    assert!(reference.center().y < -0.3, "{:?}", reference.center());
    let (target, handle) = relocate_to_side(&d.masters[i]);
    let truth = Vec3::new(0.5 - (reference.center().y + 0.5), handle.y, handle.z);
    let a = adapt_grasp(&skill, &target, &ScriptedReasoner::new(), &AdaptConfig::default()).unwrap();
    let region = &a.result.regions[0];
    assert!(region.center().x > 0.3, "{:?}", region.center());
    for k in 0..3 {
        assert!(region.position_lo[k] - 1e-9 <= truth[k] && truth[k] <= region.position_hi[k] + 1e-9, "axis {k}: {truth:?} {region:?}");
    }
    assert!(a.iterations() <= AdaptConfig::default().max_iterations);
}

#[test]
fn grid_selection_holds_one_overlap_interval() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Grasping);
    let (target, _) = relocate_to_side(&d.masters[i]);
    let cfg = AdaptConfig::default();
    let a = adapt_grasp(&skill, &target, &ScriptedReasoner::new(), &cfg).unwrap();
    let grid = GraspGrid::new(cfg.grid_m, cfg.grid_n).unwrap();
    let row = grid.overlap_axis();
    let region = &a.result.regions[0];
    let cells = GraspGrid::cover(cfg.grid_m, region.position_lo[row], region.position_hi[row]);
    let (lo, hi) = GraspGrid::span(cfg.grid_m, cells.0, cells.1);
    assert!((lo - region.position_lo[row]).abs() <= 1.0 / cfg.grid_m as f64);
    assert!((hi - region.position_hi[row]).abs() <= 1.0 / cfg.grid_m as f64);
    assert_eq!(grid.parse_cell(&grid.label(Cell { row: 2, col: 7 })), Some(Cell { row: 2, col: 7 }));
}

#[test]
fn deeper_drawer_opened_fully_doubles_length() {
    let d = grounded(TemplateId::Drawer);
    let (i, skill) = skill_at(&d, Phase::Manipulation);
    let base = context(TemplateId::Drawer, &d, i, "open the drawer fully");
    let Some(Kinematic::Prismatic { axis, range }) = base.articulation.clone() else { panic!("prismatic drawer") };
    let mut deep = base.clone();
    deep.master = base.master.scaled(Vec3::new(1.0, 2.0, 1.0));
    deep.articulation = Some(Kinematic::Prismatic { axis, range: (range.0, 2.0 * range.1) });
    let cfg = AdaptConfig::default();
    let r = ScriptedReasoner::new();
    let a = adapt_manipulation(&skill, &base, &r, &cfg).unwrap();
    let b = adapt_manipulation(&skill, &deep, &r, &cfg).unwrap();
    let (la, lb) = (a.result.curve(&base.master).unwrap().path_length(), b.result.curve(&deep.master).unwrap().path_length());
    assert!((la - range.1).abs() < 1e-9, "{la} vs {}", range.1);
    assert!((lb - 2.0 * la).abs() < 1e-9, "{lb} vs {la}");
}

#[test]
fn mirrored_hinge_flips_arc_axis() {
    let t = TemplateId::HingedDoor(DoorVariant::Microwave);
    let d = grounded(t);
    let (i, skill) = skill_at(&d, Phase::Manipulation);
    let base = context(t, &d, i, t.task_text());
    let Some(Kinematic::Hinged { axis, origin, range }) = base.articulation.clone() else { panic!("hinged door") };
    let mut mirrored = base.clone();
    mirrored.articulation = Some(Kinematic::Hinged { axis: -axis, origin, range });
    let r = ScriptedReasoner::new();
    let cfg = AdaptConfig::default();
    let axis_of = |ctx: &TargetContext| match adapt_manipulation(&skill, ctx, &r, &cfg).unwrap().result.curve(&ctx.master).unwrap() {
        Curve::Arc { axis, .. } => axis.try_normalize().unwrap(),
        other => panic!("{other:?}"),
    };
    let (a, b) = (axis_of(&base), axis_of(&mirrored));
    assert!((a + b).norm() < 1e-9, "{a:?} {b:?}");
}

#[test]
fn wrong_phase_is_validation_error() {
    let d = grounded(TemplateId::Drawer);
    let (gi, grasp) = skill_at(&d, Phase::Grasping);
    let (mi, pull) = skill_at(&d, Phase::Manipulation);
    let cfg = AdaptConfig::default();
    let r = ScriptedReasoner::new();
    assert!(matches!(adapt_grasp(&pull, &d.masters[gi], &r, &cfg), Err(AdaptError::Validation(_))));
    let ctx = context(TemplateId::Drawer, &d, mi, "open the drawer");
    assert!(matches!(adapt_manipulation(&grasp, &ctx, &r, &cfg), Err(AdaptError::Validation(_))));
}

#[test]
fn convergence_is_strict() {
    let d = grounded(TemplateId::Drawer);
    let (_, skill) = skill_at(&d, Phase::Grasping);
    let a = AdaptationState::initial(&skill);
    assert!(check_convergence(&a, &a.clone(), 1e-3));
    let shifted = |dx: f64| {
        let mut s = a.clone();
        let Geometric::Grasp(g) = &mut s.geometric else { unreachable!() };
        g.regions[0].position_lo.x += dx;
        s
    };
    assert!(!check_convergence(&a, &shifted(0.5), 1e-3));
    let b = shifted(0.125);
    let gap = (b.geometric.to_vector()[0] - a.geometric.to_vector()[0]).abs();
    assert!(!check_convergence(&a, &b, gap));
    assert!(check_convergence(&a, &b, gap * 1.000001));
    let mut c = a.clone();
    c.semantic.statements.push("also".into());
    assert!(!check_convergence(&a, &c, 1.0));
}

fn drawer_bank(dir: &std::path::Path) -> BankHandle {
    let bank = BankHandle::open(dir).unwrap();
    bank.store_plan(&PlanRecord {
        task_text: "open the drawer".into(),
        steps: vec!["grasp the drawer handle".into(), "pull the drawer".into()],
        objects: vec!["cabinet".into(), "drawer".into()],
    })
    .unwrap();
    bank
}

#[test]
fn exact_task_recalls_stored_plan() {
    let dir = tempfile::tempdir().unwrap();
    let bank = drawer_bank(dir.path());
    let out = plan_high_level("open the drawer", &simenv::build_world(TemplateId::Drawer, 2), &bank, &ScriptedReasoner::new()).unwrap();
    assert_eq!(out.steps, ["grasp the drawer handle", "pull the drawer"]);
}

#[test]
fn novel_task_composes_stored_plan() {
    let dir = tempfile::tempdir().unwrap();
    let bank = drawer_bank(dir.path());
    let mut world = simenv::build_world(TemplateId::Drawer, 2);
    let block = simenv::build_world(TemplateId::PickPlace, 2).objects.remove("block").unwrap();
    world.objects.insert("block".into(), block);
    let out = plan_high_level("put the red block in the drawer", &world, &bank, &ScriptedReasoner::new()).unwrap();
    assert_eq!(out.steps, ["grasp the drawer handle", "pull the drawer", "grasp the block", "place the block in the drawer"]);
    assert!(out.objects.iter().all(|o| world.objects.contains_key(o)));

    let mut bare = world.clone();
    bare.objects.remove("drawer");
    assert!(matches!(plan_high_level("open the drawer", &bare, &bank, &ScriptedReasoner::new()), Err(AdaptError::Validation(_))));
    bare.objects.clear();
    assert!(matches!(plan_high_level("open the drawer", &bare, &bank, &ScriptedReasoner::new()), Err(AdaptError::Planning(_))));
}

#[test]
fn failure_corrections_follow_rules() {
    let d = grounded(TemplateId::Drawer);
    let (_, skill) = skill_at(&d, Phase::Manipulation);
    let r = ScriptedReasoner::new();
    let miss = FailureReport::classified("grasp the drawer handle", vec![], vec![], BTreeMap::new(), FailureClass::GraspMiss);
    assert_eq!(failure_reason(&miss, &skill, &r, 0, 2), [CorrectiveAction::ReGrasp]);
    let moved = BTreeMap::from([(skill.master_id.clone(), Pose::from_translation(Vec3::new(0.1, 0.0, 0.0)))]);
    let dev = FailureReport::classified("pull the drawer", vec![], vec![], moved, FailureClass::TrajectoryDeviation);
    assert_eq!(failure_reason(&dev, &skill, &r, 1, 2), [CorrectiveAction::ReLocalize, CorrectiveAction::RePlanTrajectory]);
    assert_eq!(failure_reason(&dev, &skill, &r, 2, 2), [CorrectiveAction::Abort]);
    let unclassified = FailureReport { classification: None, ..miss };
    assert_eq!(failure_reason(&unclassified, &skill, &r, 0, 2), [CorrectiveAction::Abort]);
}

#[test]
fn task_delta_lists_object_sizes() {
    let d = grounded(TemplateId::Drawer);
    let text = compose_task_delta("open the drawer", &[&d.masters[0]]);
    assert!(text.starts_with("open the drawer; "));
    assert!(text.contains(&d.masters[0].object_id));
    assert!(text.ends_with(" m"));
}
