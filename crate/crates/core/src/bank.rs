//! Persistent key-value store of task plans and skills.
//!
//! Layout under the bank root:
//!
//! ```text
//! index.json            rebuildable summary of every record
//! plans/<id>.json       one plan record per file
//! skills/<id>.json      one skill record per file
//! ```
//!
//! Every record file is `{"schema_version": 1, "record": ...}` and its id is
//! the SHA-256 of the serialized record. Writes go to a temporary file that is
//! renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::learner::Skill;
use crate::Vec3;

pub const SCHEMA_VERSION: u32 = 1;
pub const TEXT_WEIGHT: f64 = 0.7;
pub const OBJECT_WEIGHT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("storage error at {path}: {source}")]
    Storage { path: PathBuf, source: std::io::Error },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("retrieval needs k >= 1")]
    ZeroK,
    #[error("no record with id {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub task_text: String,
    pub steps: Vec<String>,
    /// Object ids the plan refers to.
    #[serde(default)]
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSignature {
    pub name: String,
    pub bbox_extents: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRecord {
    pub subtask_text: String,
    pub object: ObjectSignature,
    pub skill: Skill,
}

impl PlanRecord {
    fn validate(&self) -> Result<(), BankError> {
        if self.task_text.trim().is_empty() || self.steps.is_empty() {
            return Err(BankError::Invalid("plan needs a task text and at least one step".into()));
        }
        Ok(())
    }
}

impl SkillRecord {
    fn validate(&self) -> Result<(), BankError> {
        if self.subtask_text.trim().is_empty() || self.object.name.trim().is_empty() {
            return Err(BankError::Invalid("skill key needs subtask text and object name".into()));
        }
        Ok(())
    }
}

/// Text similarity in `[0, 1]`; identical strings score 1.
pub trait TextSimilarity: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Token-set Jaccard over lowercase alphanumeric words.
#[derive(Debug, Clone, Copy, Default)]
pub struct Jaccard;

pub fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

impl TextSimilarity for Jaccard {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let (ta, tb) = (tokens(a), tokens(b));
        let union = ta.union(&tb).count();
        if union == 0 {
            return 1.0;
        }
        ta.intersection(&tb).count() as f64 / union as f64
    }
}

/// Half name equality, half mean per-axis extent ratio.
pub fn object_similarity(a: &ObjectSignature, b: &ObjectSignature) -> f64 {
    let name = if a.name == b.name { 1.0 } else { 0.0 };
    let ratio = (0..3)
        .map(|i| {
            let (x, y) = (a.bbox_extents[i].abs(), b.bbox_extents[i].abs());
            if x.max(y) <= 0.0 {
                1.0
            } else {
                x.min(y) / x.max(y)
            }
        })
        .sum::<f64>()
        / 3.0;
    0.5 * name + 0.5 * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Plan,
    Skill,
}

impl RecordKind {
    fn dir(self) -> &'static str {
        match self {
            RecordKind::Plan => "plans",
            RecordKind::Skill => "skills",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub kind: RecordKind,
    pub key: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    record: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked<T> {
    pub id: String,
    pub record: T,
    pub score: f64,
}

#[derive(Default)]
struct Index {
    plans: BTreeMap<String, PlanRecord>,
    skills: BTreeMap<String, SkillRecord>,
}

pub struct BankHandle {
    root: PathBuf,
    index: RwLock<Index>,
    text_sim: Box<dyn TextSimilarity>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Storage { path: path.to_path_buf(), source }
}

fn record_id<T: Serialize>(record: &T) -> String {
    let bytes = serde_json::to_vec(record).expect("records serialize");
    hex::encode(Sha256::digest(bytes))
}

fn load_dir<T: DeserializeOwned>(dir: &Path) -> Result<BTreeMap<String, T>, BankError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        match serde_json::from_str::<Envelope<T>>(&text) {
            Ok(env) if env.schema_version == SCHEMA_VERSION => {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                out.insert(id, env.record);
            }
            Ok(env) => log::warn!("skipping {}: schema version {}", path.display(), env.schema_version),
            Err(e) => log::warn!("skipping unreadable record {}: {e}", path.display()),
        }
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BankError> {
    let tmp = path.with_extension("json.tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn rank<T: Clone>(records: &BTreeMap<String, T>, k: usize, score: impl Fn(&T) -> f64) -> Vec<Ranked<T>> {
    let mut out: Vec<Ranked<T>> =
        records.iter().map(|(id, r)| Ranked { id: id.clone(), record: r.clone(), score: score(r).clamp(0.0, 1.0) }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    out.truncate(k);
    out
}

impl BankHandle {
    /// Opens (creating if needed) a bank and rebuilds its index from the record files.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::open_with(root, Box::new(Jaccard))
    }

    pub fn open_with(root: impl AsRef<Path>, text_sim: Box<dyn TextSimilarity>) -> Result<Self, BankError> {
        let root = root.as_ref().to_path_buf();
        for kind in [RecordKind::Plan, RecordKind::Skill] {
            let dir = root.join(kind.dir());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let index = Index { plans: load_dir(&root.join("plans"))?, skills: load_dir(&root.join("skills"))? };
        let bank = Self { root, index: RwLock::new(index), text_sim };
        bank.write_index(&bank.index.read().expect("bank lock"))?;
        Ok(bank)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_index(&self, idx: &Index) -> Result<(), BankError> {
        let mut entries: Vec<IndexEntry> = idx
            .plans
            .iter()
            .map(|(id, r)| IndexEntry { id: id.clone(), kind: RecordKind::Plan, key: r.task_text.clone() })
            .chain(idx.skills.iter().map(|(id, r)| IndexEntry {
                id: id.clone(),
                kind: RecordKind::Skill,
                key: format!("{} | {}", r.subtask_text, r.object.name),
            }))
            .collect();
        entries.sort_by(|a, b| (a.kind, &a.id).cmp(&(b.kind, &b.id)));
        let body = serde_json::json!({ "schema_version": SCHEMA_VERSION, "entries": entries });
        write_atomic(&self.root.join("index.json"), serde_json::to_string_pretty(&body).expect("index serializes").as_bytes())
    }

    fn store<T: Serialize + Clone>(
        &self,
        kind: RecordKind,
        record: &T,
        insert: impl FnOnce(&mut Index, String, T) -> bool,
    ) -> Result<String, BankError> {
        let id = record_id(record);
        let mut idx = self.index.write().expect("bank lock");
        let path = self.root.join(kind.dir()).join(format!("{id}.json"));
        let env = Envelope { schema_version: SCHEMA_VERSION, record };
        write_atomic(&path, serde_json::to_string_pretty(&env).expect("record serializes").as_bytes())?;
        if insert(&mut idx, id.clone(), record.clone()) {
            self.write_index(&idx)?;
        }
        Ok(id)
    }

    pub fn store_plan(&self, record: &PlanRecord) -> Result<String, BankError> {
        record.validate()?;
        self.store(RecordKind::Plan, record, |idx, id, r| idx.plans.insert(id, r).is_none())
    }

    pub fn store_skill(&self, record: &SkillRecord) -> Result<String, BankError> {
        record.validate()?;
        self.store(RecordKind::Skill, record, |idx, id, r| idx.skills.insert(id, r).is_none())
    }

    pub fn retrieve_plan(&self, query: &str, k: usize) -> Result<Vec<Ranked<PlanRecord>>, BankError> {
        if k == 0 {
            return Err(BankError::ZeroK);
        }
        let idx = self.index.read().expect("bank lock");
        Ok(rank(&idx.plans, k, |r| self.text_sim.similarity(query, &r.task_text)))
    }

    pub fn retrieve_skill(
        &self,
        subtask_text: &str,
        object: &ObjectSignature,
        k: usize,
    ) -> Result<Vec<Ranked<SkillRecord>>, BankError> {
        if k == 0 {
            return Err(BankError::ZeroK);
        }
        let idx = self.index.read().expect("bank lock");
        Ok(rank(&idx.skills, k, |r| {
            TEXT_WEIGHT * self.text_sim.similarity(subtask_text, &r.subtask_text)
                + OBJECT_WEIGHT * object_similarity(object, &r.object)
        }))
    }

    pub fn plan_count(&self) -> usize {
        self.index.read().expect("bank lock").plans.len()
    }

    pub fn skill_count(&self) -> usize {
        self.index.read().expect("bank lock").skills.len()
    }

    pub fn entries(&self) -> Vec<IndexEntry> {
        let idx = self.index.read().expect("bank lock");
        let mut out: Vec<IndexEntry> = idx
            .plans
            .iter()
            .map(|(id, r)| IndexEntry { id: id.clone(), kind: RecordKind::Plan, key: r.task_text.clone() })
            .collect();
        out.extend(idx.skills.iter().map(|(id, r)| IndexEntry {
            id: id.clone(),
            kind: RecordKind::Skill,
            key: format!("{} | {}", r.subtask_text, r.object.name),
        }));
        out
    }

    /// Raw on-disk JSON of a record.
    pub fn inspect(&self, id: &str) -> Result<String, BankError> {
        for kind in [RecordKind::Plan, RecordKind::Skill] {
            let path = self.root.join(kind.dir()).join(format!("{id}.json"));
            if path.exists() {
                return fs::read_to_string(&path).map_err(io_err(&path));
            }
        }
        Err(BankError::NotFound(id.into()))
    }

    pub fn plan(&self, id: &str) -> Option<PlanRecord> {
        self.index.read().expect("bank lock").plans.get(id).cloned()
    }

    pub fn skill(&self, id: &str) -> Option<SkillRecord> {
        self.index.read().expect("bank lock").skills.get(id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_values() {
        assert_eq!(Jaccard.similarity("open the drawer", "open the drawer"), 1.0);
        assert_eq!(Jaccard.similarity("open the drawer", "close the door"), 0.2);
        assert_eq!(Jaccard.similarity("", ""), 1.0);
    }

    #[test]
    fn plan_roundtrip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let bank = BankHandle::open(dir.path()).unwrap();
        let rec = PlanRecord { task_text: "open the drawer".into(), steps: vec!["grasp the drawer handle".into()], objects: vec![] };
        let a = bank.store_plan(&rec).unwrap();
        let b = bank.store_plan(&rec).unwrap();
        assert_eq!(a, b);
        assert_eq!(bank.plan_count(), 1);
        let top = bank.retrieve_plan("open the drawer", 3).unwrap();
        assert_eq!((top[0].score, &top[0].record), (1.0, &rec));
        let reopened = BankHandle::open(dir.path()).unwrap();
        assert_eq!(reopened.plan(&a), Some(rec));
    }

    #[test]
    fn empty_plan_rejected_and_zero_k() {
        let dir = tempfile::tempdir().unwrap();
        let bank = BankHandle::open(dir.path()).unwrap();
        let rec = PlanRecord { task_text: "x".into(), steps: vec![], objects: vec![] };
        assert!(matches!(bank.store_plan(&rec), Err(BankError::Invalid(_))));
        assert!(matches!(bank.retrieve_plan("x", 0), Err(BankError::ZeroK)));
        assert!(bank.retrieve_plan("x", 1).unwrap().is_empty());
    }
}
