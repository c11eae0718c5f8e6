//! Review sessions: an append-only action log folded over a processed case.
//!
//! On disk a session is a directory holding `meta.json`, `actions.jsonl` and, every
//! few actions, `snapshot.json`. Loading replays the log suffix after the snapshot.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grader::GradeResult;
use crate::review::{apply_action, derive, ActionBody, DerivedState, ProcessedCase, ReviewState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub seq: u64,
    #[serde(flatten)]
    pub body: ActionBody,
    #[serde(default)]
    pub actor: String,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub case_id: String,
    pub created_ms: u64,
}

/// Materialized session state; a pure function of the meta, the case and the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub case_id: String,
    pub seq: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub review: ReviewState,
    pub derived: DerivedState,
}

impl SessionState {
    pub fn initial(meta: &SessionMeta, pc: &ProcessedCase) -> Result<Self> {
        let review = ReviewState::default();
        let derived = derive(pc, &review)?;
        Ok(SessionState {
            session_id: meta.session_id.clone(),
            case_id: meta.case_id.clone(),
            seq: 0,
            created_ms: meta.created_ms,
            updated_ms: meta.created_ms,
            review,
            derived,
        })
    }

    /// Applies one action; on error `self` is untouched.
    pub fn apply(&self, pc: &ProcessedCase, action: &Action) -> Result<SessionState> {
        if action.seq != self.seq + 1 {
            return Err(Error::Corruption(format!("expected seq {}, found {}", self.seq + 1, action.seq)));
        }
        let review = apply_action(pc, &self.review, &self.derived, &action.body, action.seq)?;
        let derived = derive(pc, &review)?;
        Ok(SessionState { seq: action.seq, updated_ms: action.timestamp_ms, review, derived, ..self.clone() })
    }

    pub fn grade(&self) -> &GradeResult {
        &self.derived.grade
    }
}

/// Folds a log over a starting state. Sequence gaps are corruption.
pub fn replay_from(pc: &ProcessedCase, start: SessionState, log: &[Action]) -> Result<SessionState> {
    log.iter().try_fold(start, |st, a| {
        st.apply(pc, a).map_err(|e| match e {
            Error::Corruption(_) => e,
            other => Error::Corruption(format!("action {} does not replay: {other}", a.seq)),
        })
    })
}

pub fn replay(pc: &ProcessedCase, meta: &SessionMeta, log: &[Action]) -> Result<SessionState> {
    replay_from(pc, SessionState::initial(meta, pc)?, log)
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Session {
    dir: PathBuf,
    pc: Arc<ProcessedCase>,
    state: SessionState,
}

impl Session {
    fn append(&self, action: &Action) -> Result<()> {
        let path = self.dir.join("actions.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(action)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn read_log(path: &Path) -> Result<Vec<Action>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Corruption(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Owns every live session. Mutations of one session are serialized by its mutex;
/// distinct sessions proceed independently.
pub struct SessionManager {
    root: PathBuf,
    snapshot_every: u64,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionManager {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(SessionManager { root, snapshot_every: 10, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id)
    }

    pub fn create(&self, pc: Arc<ProcessedCase>) -> Result<SessionState> {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        let mut n = 1;
        let session_id = loop {
            let id = format!("{}-s{n}", pc.case_id);
            if !sessions.contains_key(&id) && !self.session_dir(&id).exists() {
                break id;
            }
            n += 1;
        };
        let meta = SessionMeta { session_id: session_id.clone(), case_id: pc.case_id.clone(), created_ms: now_ms() };
        let state = SessionState::initial(&meta, &pc)?;
        let dir = self.session_dir(&session_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("meta.json"), &meta)?;
        sessions.insert(session_id, Arc::new(Mutex::new(Session { dir, pc, state: state.clone() })));
        Ok(state)
    }

    fn handle(&self, session_id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))
    }

    /// Restores a session from disk: latest snapshot plus the remaining log.
    pub fn load(&self, session_id: &str, pc: Arc<ProcessedCase>) -> Result<SessionState> {
        if let Ok(h) = self.handle(session_id) {
            return Ok(h.lock().expect("session poisoned").state.clone());
        }
        let dir = self.session_dir(session_id);
        let meta: SessionMeta = read_json(&dir.join("meta.json"))?;
        if meta.case_id != pc.case_id {
            return Err(Error::Validation(format!("session `{session_id}` belongs to case `{}`", meta.case_id)));
        }
        let log = read_log(&dir.join("actions.jsonl"))?;
        let snap_path = dir.join("snapshot.json");
        let state = if snap_path.exists() {
            let snap: SessionState = read_json(&snap_path)?;
            let suffix: Vec<Action> = log.iter().filter(|a| a.seq > snap.seq).cloned().collect();
            replay_from(&pc, snap, &suffix)?
        } else {
            replay(&pc, &meta, &log)?
        };
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(session_id.to_string(), Arc::new(Mutex::new(Session { dir, pc, state: state.clone() })));
        Ok(state)
    }

    pub fn get(&self, session_id: &str) -> Result<SessionState> {
        Ok(self.handle(session_id)?.lock().expect("session poisoned").state.clone())
    }

    pub fn case_of(&self, session_id: &str) -> Result<Arc<ProcessedCase>> {
        Ok(self.handle(session_id)?.lock().expect("session poisoned").pc.clone())
    }

    /// Validates, persists and applies one action. A rejected action leaves log and state unchanged.
    pub fn submit(&self, session_id: &str, body: ActionBody, actor: &str) -> Result<SessionState> {
        let h = self.handle(session_id)?;
        let mut s = h.lock().expect("session poisoned");
        let action = Action {
            seq: s.state.seq + 1,
            body,
            actor: actor.to_string(),
            timestamp_ms: now_ms().max(s.state.updated_ms),
        };
        let next = s.state.apply(&s.pc, &action)?;
        s.append(&action)?;
        if next.seq % self.snapshot_every == 0 {
            write_json(&s.dir.join("snapshot.json"), &next)?;
        }
        s.state = next.clone();
        Ok(next)
    }

    pub fn log(&self, session_id: &str) -> Result<Vec<Action>> {
        read_log(&self.session_dir(session_id).join("actions.jsonl"))
    }

    pub fn meta(&self, session_id: &str) -> Result<SessionMeta> {
        read_json(&self.session_dir(session_id).join("meta.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grader::Grade;
    use crate::model::{CriterionKind, ReviewStatus};
    use crate::review::fixtures::{case, presence};
    use crate::review::EvidenceVerb;
    use rand::{Rng, SeedableRng};
    use serde_json::json;

    fn pc() -> Arc<ProcessedCase> {
        Arc::new(case(4, vec![presence("he", CriterionKind::Sheeting, 8192, 8192, 0.7)]))
    }

    fn random_body(rng: &mut impl Rng, pc: &ProcessedCase, st: &SessionState) -> ActionBody {
        let ids: Vec<String> = crate::review::known_evidence_ids(pc, &st.review, &st.derived).into_iter().collect();
        match rng.gen_range(0..5) {
            0 | 1 => ActionBody::EvidenceAction {
                evidence_id: ids[rng.gen_range(0..ids.len())].clone(),
                action: [EvidenceVerb::Approve, EvidenceVerb::Decline, EvidenceVerb::Uncertain][rng.gen_range(0..3)],
            },
            2 => ActionBody::Override {
                criterion: ["Necrosis", "Sheeting", "BrainInvasion", "SmallCell"][rng.gen_range(0..4)].into(),
                value: json!(["found", "not_found", "uncertain"][rng.gen_range(0..3)]),
            },
            3 => ActionBody::ClearOverride { criterion: ["Necrosis", "Sheeting"][rng.gen_range(0..2)].into() },
            _ => ActionBody::ManualAdd {
                slide_id: "he".into(),
                criterion: None,
                x: rng.gen_range(0..15000),
                y: rng.gen_range(0..15000),
                w: None,
                h: None,
            },
        }
    }

    #[test]
    fn live_equals_replay_for_random_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = SessionManager::new(dir.path()).unwrap().with_snapshot_every(7);
        let pc = pc();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let st = mgr.create(pc.clone()).unwrap();
        let sid = st.session_id.clone();
        let mut live = st;
        for _ in 0..50 {
            let body = random_body(&mut rng, &pc, &live);
            live = mgr.submit(&sid, body, "tester").unwrap();
            let replayed = replay(&pc, &mgr.meta(&sid).unwrap(), &mgr.log(&sid).unwrap()).unwrap();
            assert_eq!(serde_json::to_vec(&replayed).unwrap(), serde_json::to_vec(&live).unwrap());
        }
        assert_eq!(live.seq, 50);
        let fresh = SessionManager::new(dir.path()).unwrap();
        let loaded = fresh.load(&sid, pc.clone()).unwrap();
        assert_eq!(serde_json::to_vec(&loaded).unwrap(), serde_json::to_vec(&live).unwrap());
    }

    #[test]
    fn rejected_action_is_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = SessionManager::new(dir.path()).unwrap();
        let st = mgr.create(pc()).unwrap();
        let sid = st.session_id;
        let err = mgr.submit(&sid, ActionBody::Override { criterion: "MitoticCount".into(), value: json!(3) }, "t");
        assert!(matches!(err, Err(Error::Validation(_))));
        assert!(mgr.log(&sid).unwrap().is_empty());
        assert_eq!(mgr.get(&sid).unwrap().seq, 0);
    }

    #[test]
    fn sessions_are_independent_and_grade_flows() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = SessionManager::new(dir.path()).unwrap();
        let pc = pc();
        let a = mgr.create(pc.clone()).unwrap();
        let b = mgr.create(pc.clone()).unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(a.grade().grade, Grade::II);
        let first = pc.detections[0].detection_id.clone();
        let a2 = mgr
            .submit(&a.session_id, ActionBody::EvidenceAction { evidence_id: first.clone(), action: EvidenceVerb::Decline }, "t")
            .unwrap();
        assert_eq!(a2.grade().grade, Grade::I);
        assert_eq!(a2.review.statuses[&first], ReviewStatus::Declined);
        assert_eq!(mgr.get(&b.session_id).unwrap().grade().grade, Grade::II);
    }

    #[test]
    fn replay_rejects_gaps() {
        let pc = pc();
        let meta = SessionMeta { session_id: "x".into(), case_id: "c1".into(), created_ms: 0 };
        assert_eq!(replay(&pc, &meta, &[]).unwrap(), SessionState::initial(&meta, &pc).unwrap());
        let a = |seq| Action {
            seq,
            body: ActionBody::ClearOverride { criterion: "Necrosis".into() },
            actor: String::new(),
            timestamp_ms: 1,
        };
        assert!(replay(&pc, &meta, &[a(1), a(2)]).is_ok());
        assert!(matches!(replay(&pc, &meta, &[a(1), a(3)]), Err(Error::Corruption(_))));
    }

    #[test]
    fn action_line_shape() {
        let a = Action {
            seq: 3,
            body: ActionBody::EvidenceAction { evidence_id: "e".into(), action: EvidenceVerb::Approve },
            actor: "dr".into(),
            timestamp_ms: 9,
        };
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["kind"], "evidence_action");
        assert_eq!(v["payload"]["action"], "approve");
        assert_eq!(serde_json::from_value::<Action>(v).unwrap(), a);
    }

    #[test]
    fn concurrent_submissions_serialize() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = Arc::new(SessionManager::new(dir.path()).unwrap());
        let sid = mgr.create(pc()).unwrap().session_id;
        let threads: Vec<_> = (0..4)
            .map(|t| {
                let (mgr, sid) = (mgr.clone(), sid.clone());
                std::thread::spawn(move || {
                    for i in 0..10 {
                        let c = if (t + i) % 2 == 0 { "Necrosis" } else { "Sheeting" };
                        mgr.submit(&sid, ActionBody::Override { criterion: c.into(), value: json!("found") }, "t").unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let log = mgr.log(&sid).unwrap();
        assert_eq!(log.iter().map(|a| a.seq).collect::<Vec<_>>(), (1..=40).collect::<Vec<_>>());
    }
}
