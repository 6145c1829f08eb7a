use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use coldstart_core::interview::{run_interview, InterviewState, MAX_RATING};
use coldstart_core::ModelBundle;
use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AskedQuestion {
    pub slot: usize,
    pub movie: u32,
    /// `None` while the question awaits an answer.
    pub answer: Option<u8>,
}

/// One live interview. The state is always the fold of the answered questions.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub state: InterviewState,
    pub asked: Vec<AskedQuestion>,
    pub k_target: usize,
    pub created_at: SystemTime,
    pub last_active: Instant,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub movie_id: u32,
    pub title: String,
    pub predicted_rating: f64,
}

fn next_slot(bundle: &ModelBundle, state: &InterviewState) -> Result<usize, ApiError> {
    bundle.policy_for(0).choose(state).map_err(ApiError::internal)
}

impl Session {
    pub fn start(id: String, bundle: &ModelBundle, k: usize) -> Result<Self, ApiError> {
        if k == 0 || k > bundle.action_space.len() {
            return Err(ApiError::bad_request(format!(
                "k must be between 1 and {}",
                bundle.action_space.len()
            )));
        }
        let state = bundle.action_space.initial_state();
        let slot = next_slot(bundle, &state)?;
        Ok(Session {
            id,
            asked: vec![AskedQuestion {
                slot,
                movie: bundle.action_space.movies()[slot],
                answer: None,
            }],
            state,
            k_target: k,
            created_at: SystemTime::now(),
            last_active: Instant::now(),
            finished: false,
        })
    }

    pub fn pending(&self) -> Option<&AskedQuestion> {
        self.asked.last().filter(|q| q.answer.is_none())
    }

    pub fn answered(&self) -> usize {
        self.asked.iter().filter(|q| q.answer.is_some()).count()
    }

    pub fn answers(&self) -> Vec<u8> {
        self.asked.iter().filter_map(|q| q.answer).collect()
    }

    pub fn answer(&mut self, bundle: &ModelBundle, rating: i64) -> Result<(), ApiError> {
        if self.finished {
            return Err(ApiError::conflict("interview already finished"));
        }
        if !(0..=i64::from(MAX_RATING)).contains(&rating) {
            return Err(ApiError::bad_request(format!(
                "rating must be between 0 and {MAX_RATING}, got {rating}"
            )));
        }
        let rating = rating as u8;
        let slot = self
            .pending()
            .map(|q| q.slot)
            .ok_or_else(|| ApiError::internal("session has no pending question"))?;
        self.state = self.state.step(slot, rating).map_err(ApiError::internal)?;
        self.asked.last_mut().expect("pending question").answer = Some(rating);
        if self.answered() == self.k_target {
            self.finished = true;
        } else {
            let next = next_slot(bundle, &self.state)?;
            self.asked.push(AskedQuestion {
                slot: next,
                movie: bundle.action_space.movies()[next],
                answer: None,
            });
        }
        Ok(())
    }

    /// Top `n` movies by predicted rating, excluding movies rated 1 or more
    /// during the interview. Ties go to the lower movie id.
    pub fn recommendations(&self, bundle: &ModelBundle, n: usize) -> Result<Vec<Recommendation>, ApiError> {
        if !self.finished {
            return Err(ApiError::conflict("interview not finished"));
        }
        let predicted = bundle.predict_all(&self.state).map_err(ApiError::internal)?;
        let mut ranked: Vec<(u32, f64)> = predicted
            .into_iter()
            .enumerate()
            .filter(|&(m, _)| {
                !self
                    .asked
                    .iter()
                    .any(|q| q.movie == m as u32 && q.answer.unwrap_or(0) >= 1)
            })
            .map(|(m, p)| (m as u32, p))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| {
                bundle.catalog[a.0 as usize]
                    .movie_id
                    .cmp(&bundle.catalog[b.0 as usize].movie_id)
            })
        });
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(m, p)| {
                let entry = &bundle.catalog[m as usize];
                Recommendation {
                    movie_id: entry.movie_id,
                    title: entry.title.clone(),
                    predicted_rating: p,
                }
            })
            .collect())
    }
}

/// Re-runs the interview from an answer list through the interview module.
pub fn replay(bundle: &ModelBundle, answers: &[u8]) -> coldstart_core::Result<InterviewState> {
    let mut policy = bundle.policy_for(0);
    let mut next = answers.iter().copied();
    let mut source = |_slot: usize, _movie: u32| Ok(next.next().unwrap_or(0));
    Ok(run_interview(&bundle.action_space, policy.as_mut(), &mut source, answers.len())?.terminal)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum JournalEntry {
    Create { t: u64, id: String, k: usize },
    Answer { t: u64, id: String, rating: u8 },
}

fn unix_seconds(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// In-memory sessions with idle expiry and an optional append-only journal.
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    idle_timeout: Duration,
    journal: Option<Mutex<BufWriter<File>>>,
}

impl SessionStore {
    pub fn new(idle_timeout: Duration) -> Self {
        SessionStore {
            sessions: Mutex::new(HashMap::new()),
            idle_timeout,
            journal: None,
        }
    }

    /// Replays `path` (if it exists) and appends future events to it.
    /// Unreadable lines, such as one cut short by a crash, are skipped.
    pub fn with_journal(idle_timeout: Duration, path: &Path, bundle: Option<&ModelBundle>) -> std::io::Result<Self> {
        let mut store = SessionStore::new(idle_timeout);
        if let (Some(bundle), true) = (bundle, path.exists()) {
            store.recover(path, bundle)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.journal = Some(Mutex::new(BufWriter::new(file)));
        Ok(store)
    }

    fn recover(&mut self, path: &Path, bundle: &ModelBundle) -> std::io::Result<()> {
        let mut recovered: HashMap<String, (Session, u64)> = HashMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let entry: JournalEntry = match serde_json::from_str(&line) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("journal line {} skipped: {e}", i + 1);
                    continue;
                }
            };
            match entry {
                JournalEntry::Create { t, id, k } => match Session::start(id.clone(), bundle, k) {
                    Ok(s) => {
                        recovered.insert(id, (s, t));
                    }
                    Err(e) => log::warn!("journal line {}: {}", i + 1, e.message),
                },
                JournalEntry::Answer { t, id, rating } => {
                    if let Some((s, last)) = recovered.get_mut(&id) {
                        if let Err(e) = s.answer(bundle, i64::from(rating)) {
                            log::warn!("journal line {}: {}", i + 1, e.message);
                        }
                        *last = t;
                    }
                }
            }
        }
        let now = SystemTime::now();
        let live = self.sessions.get_mut().expect("session map");
        for (id, (mut session, last)) in recovered {
            let idle = now
                .duration_since(UNIX_EPOCH + Duration::from_secs(last))
                .unwrap_or_default();
            if idle >= self.idle_timeout {
                continue;
            }
            session.last_active = Instant::now().checked_sub(idle).unwrap_or_else(Instant::now);
            live.insert(id, Arc::new(Mutex::new(session)));
        }
        log::info!("recovered {} sessions from {}", live.len(), path.display());
        Ok(())
    }

    fn log(&self, entry: &JournalEntry) {
        if let Some(journal) = &self.journal {
            let mut w = journal.lock().expect("journal lock");
            let written = serde_json::to_writer(&mut *w, entry)
                .map_err(std::io::Error::from)
                .and_then(|_| writeln!(w))
                .and_then(|_| w.flush());
            if let Err(e) = written {
                log::error!("journal write failed: {e}");
            }
        }
    }

    pub fn create(&self, bundle: &ModelBundle, k: usize) -> Result<Arc<Mutex<Session>>, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::start(id.clone(), bundle, k)?;
        self.log(&JournalEntry::Create {
            t: unix_seconds(session.created_at),
            id: id.clone(),
            k,
        });
        let handle = Arc::new(Mutex::new(session));
        self.sessions.lock().expect("session map").insert(id, handle.clone());
        Ok(handle)
    }

    /// Looks a session up, dropping it if it has been idle too long.
    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().expect("session map");
        let handle = map
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        let expired = handle.lock().expect("session lock").last_active.elapsed() >= self.idle_timeout;
        if expired {
            map.remove(id);
            return Err(ApiError::not_found(format!("session {id} expired")));
        }
        Ok(handle)
    }

    pub fn answer(&self, bundle: &ModelBundle, id: &str, rating: i64) -> Result<Arc<Mutex<Session>>, ApiError> {
        let handle = self.get(id)?;
        {
            let mut s = handle.lock().expect("session lock");
            s.answer(bundle, rating)?;
            s.last_active = Instant::now();
            self.log(&JournalEntry::Answer {
                t: unix_seconds(SystemTime::now()),
                id: id.to_string(),
                rating: rating as u8,
            });
        }
        Ok(handle)
    }

    /// Removes idle sessions; returns how many were dropped.
    pub fn sweep(&self) -> usize {
        let mut map = self.sessions.lock().expect("session map");
        let before = map.len();
        map.retain(|_, s| s.lock().expect("session lock").last_active.elapsed() < self.idle_timeout);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn journal_lines_are_tagged() {
        let line = serde_json::to_string(&JournalEntry::Answer {
            t: 7,
            id: "ab".into(),
            rating: 0,
        })
        .unwrap();
        assert_eq!(line, r#"{"event":"answer","t":7,"id":"ab","rating":0}"#);
        assert!(serde_json::from_str::<JournalEntry>(r#"{"event":"create","t":1,"id"#).is_err());
    }

    #[test]
    fn unix_seconds_of_epoch_is_zero() {
        assert_eq!(unix_seconds(UNIX_EPOCH), 0);
        assert_eq!(unix_seconds(UNIX_EPOCH + Duration::from_secs(90)), 90);
    }
}
