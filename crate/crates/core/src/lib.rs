//! Learn manipulation skills from recorded demonstration traces, store them
//! in a knowledge bank, and adapt and execute them in new scenes.
//!
//! The pipeline runs in stages:
//!
//! * [`grounding`] segments a [`trace::PerceptionTrace`] into subtasks and
//!   extracts object-centric interactions.
//! * [`learner`] turns interactions into grasp regions and trajectory
//!   programs, with text constraints obtained from a [`reasoner`].
//! * [`bank`] persists plans and skills and retrieves them by similarity.
//! * [`adapter`] revises retrieved skills against a new scene, and
//!   [`executor`] samples, scores and runs them in a [`world::WorldState`].
//! * [`simenv`] generates synthetic demonstrations and worlds; [`evaluation`]
//!   ties everything together into success-rate tables.
//!
//! The geometry kernel is generic over the scalar type; the pipeline itself
//! works in `f64` through the aliases below.

pub mod adapter;
pub mod bank;
pub mod config;
pub mod evaluation;
pub mod executor;
pub mod geometry;
pub mod grounding;
pub mod learner;
pub mod reasoner;
pub mod scene;
pub mod simenv;
pub mod trace;
pub mod world;

pub type Vec3 = geometry::Vec3<f64>;
pub type Quat = geometry::Quat<f64>;
pub type Pose = geometry::Pose<f64>;
pub type PointCloud = geometry::PointCloud<f64>;
pub type ObjectProperties = geometry::ObjectProperties<f64>;
pub type Part = geometry::Part<f64>;

pub use geometry::{cloud_distance, compute_bbox, relative_pose, GeometryError, Real};

/// Frame label used for world-frame clouds in traces.
pub const WORLD_FRAME: &str = "world";
/// Entity name of the demonstrator's hand.
pub const HAND: &str = "hand";
