//! In-memory session store: models and episode transcripts under random
//! 128-bit ids, with least-recently-used eviction.
//!
//! Lookups take `&self` and record recency in atomics, so the store can sit
//! behind a readers-writer lock and reads never need the write side.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use arbor_core::orchestrator::EpisodeTranscript;
use arbor_core::tree::{deserialize_model, serialize_model, Model};
use arbor_core::types::{canonical_json, digest};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A fresh opaque id: 128 random bits from the thread CSPRNG, as hex.
pub fn fresh_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreLimits {
    pub max_models: usize,
    pub max_episodes: usize,
    /// Entries younger than this are never evicted, even over capacity.
    pub retention_secs: f64,
}

impl Default for StoreLimits {
    fn default() -> Self {
        Self {
            max_models: 64,
            max_episodes: 1024,
            retention_secs: 300.0,
        }
    }
}

/// One provenance-stamped what-if probe against a stored episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfLogEntry {
    pub index: usize,
    pub modifications: BTreeMap<String, Value>,
    pub before_outcome: String,
    pub after_outcome: String,
    pub divergence_index: Option<usize>,
    /// Digest of the stored transcript when the probe ran.
    pub transcript_digest: String,
    /// Digest of this entry with `digest` empty.
    pub digest: String,
}

impl WhatIfLogEntry {
    pub fn stamp(mut self) -> Self {
        self.digest = String::new();
        self.digest = digest(canonical_json(&self).as_bytes());
        self
    }
}

#[derive(Debug)]
pub struct ModelEntry {
    pub model: Arc<Model>,
    created: Instant,
    last_used: AtomicU64,
}

#[derive(Debug)]
pub struct EpisodeEntry {
    pub transcript: Arc<EpisodeTranscript>,
    pub model_id: String,
    /// Kept with the episode so what-if keeps working after model eviction.
    pub model: Arc<Model>,
    pub whatif_log: Mutex<Vec<WhatIfLogEntry>>,
    created: Instant,
    last_used: AtomicU64,
}

#[derive(Debug, Default)]
pub struct SessionStore {
    limits: StoreLimits,
    clock: AtomicU64,
    models: HashMap<String, ModelEntry>,
    episodes: HashMap<String, EpisodeEntry>,
}

trait Aged {
    fn created(&self) -> Instant;
    fn last_used(&self) -> u64;
}

impl Aged for ModelEntry {
    fn created(&self) -> Instant {
        self.created
    }
    fn last_used(&self) -> u64 {
        self.last_used.load(Ordering::Relaxed)
    }
}

impl Aged for EpisodeEntry {
    fn created(&self) -> Instant {
        self.created
    }
    fn last_used(&self) -> u64 {
        self.last_used.load(Ordering::Relaxed)
    }
}

/// Evicts least-recently-used entries older than `floor` until `map` holds
/// at most `cap` entries or nothing else may go.
fn evict<T: Aged>(map: &mut HashMap<String, T>, cap: usize, floor: Duration, now: Instant) -> Vec<String> {
    let mut gone = Vec::new();
    while map.len() > cap {
        let victim = map
            .iter()
            .filter(|(_, e)| now.saturating_duration_since(e.created()) >= floor)
            .min_by_key(|(id, e)| (e.last_used(), (*id).clone()))
            .map(|(id, _)| id.clone());
        match victim {
            Some(id) => {
                map.remove(&id);
                gone.push(id);
            }
            None => break,
        }
    }
    gone
}

impl SessionStore {
    pub fn new(limits: StoreLimits) -> Self {
        Self {
            limits,
            ..Self::default()
        }
    }

    pub fn limits(&self) -> StoreLimits {
        self.limits
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn floor(&self) -> Duration {
        Duration::from_secs_f64(self.limits.retention_secs.max(0.0))
    }

    pub fn insert_model(&mut self, model: Model) -> String {
        self.insert_model_at(model, Instant::now())
    }

    pub fn insert_model_at(&mut self, model: Model, now: Instant) -> String {
        let id = fresh_id();
        let entry = ModelEntry {
            model: Arc::new(model),
            created: now,
            last_used: AtomicU64::new(self.tick()),
        };
        self.models.insert(id.clone(), entry);
        let floor = self.floor();
        evict(&mut self.models, self.limits.max_models, floor, now);
        id
    }

    pub fn model(&self, id: &str) -> Option<Arc<Model>> {
        let e = self.models.get(id)?;
        e.last_used.store(self.tick(), Ordering::Relaxed);
        Some(Arc::clone(&e.model))
    }

    /// `(id, model)` pairs ordered by id.
    pub fn models(&self) -> Vec<(String, Arc<Model>)> {
        let mut out: Vec<_> = self.models.iter().map(|(k, e)| (k.clone(), Arc::clone(&e.model))).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn insert_episode(&mut self, transcript: EpisodeTranscript, model_id: &str, model: Arc<Model>) -> String {
        self.insert_episode_at(transcript, model_id, model, Instant::now())
    }

    pub fn insert_episode_at(
        &mut self,
        transcript: EpisodeTranscript,
        model_id: &str,
        model: Arc<Model>,
        now: Instant,
    ) -> String {
        let id = fresh_id();
        let entry = EpisodeEntry {
            transcript: Arc::new(transcript),
            model_id: model_id.into(),
            model,
            whatif_log: Mutex::new(Vec::new()),
            created: now,
            last_used: AtomicU64::new(self.tick()),
        };
        self.episodes.insert(id.clone(), entry);
        let floor = self.floor();
        evict(&mut self.episodes, self.limits.max_episodes, floor, now);
        id
    }

    pub fn episode(&self, id: &str) -> Option<&EpisodeEntry> {
        let e = self.episodes.get(id)?;
        e.last_used.store(self.tick(), Ordering::Relaxed);
        Some(e)
    }

    pub fn model_count(&self) -> usize {
        self.models.len()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            models: self
                .models
                .iter()
                .map(|(id, e)| (id.clone(), raw_model(&e.model)))
                .collect(),
            episodes: self
                .episodes
                .iter()
                .map(|(id, e)| {
                    (
                        id.clone(),
                        SnapshotEpisode {
                            model_id: e.model_id.clone(),
                            model: raw_model(&e.model),
                            transcript: (*e.transcript).clone(),
                            whatif_log: e.whatif_log.lock().expect("log lock").clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn restore(limits: StoreLimits, snap: Snapshot) -> Result<Self, String> {
        let mut store = Self::new(limits);
        let now = Instant::now();
        for (id, raw) in snap.models {
            let model = parse_model(&raw).map_err(|e| format!("model {id}: {e}"))?;
            store.models.insert(
                id,
                ModelEntry {
                    model: Arc::new(model),
                    created: now,
                    last_used: AtomicU64::new(store.tick()),
                },
            );
        }
        for (id, ep) in snap.episodes {
            let model = parse_model(&ep.model).map_err(|e| format!("episode {id}: {e}"))?;
            store.episodes.insert(
                id,
                EpisodeEntry {
                    transcript: Arc::new(ep.transcript),
                    model_id: ep.model_id,
                    model: Arc::new(model),
                    whatif_log: Mutex::new(ep.whatif_log),
                    created: now,
                    last_used: AtomicU64::new(store.tick()),
                },
            );
        }
        Ok(store)
    }
}

fn raw_model(m: &Model) -> Value {
    serde_json::from_slice(&serialize_model(m)).expect("model JSON is valid")
}

fn parse_model(v: &Value) -> Result<Model, String> {
    deserialize_model(v.to_string().as_bytes()).map_err(|e| e.to_string())
}

/// JSON image of the store, written on shutdown when configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub models: BTreeMap<String, Value>,
    pub episodes: BTreeMap<String, SnapshotEpisode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEpisode {
    pub model_id: String,
    pub model: Value,
    pub transcript: EpisodeTranscript,
    pub whatif_log: Vec<WhatIfLogEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use arbor_core::tree::{train_cart, Dataset, TrainParams};
    use arbor_core::types::{FeatureDef, FeatureValue, LabelDef, Schema, StructuredInput};

    fn stump() -> Model {
        let schema = Schema::new(
            vec![FeatureDef::numeric("x")],
            LabelDef {
                name: "y".into(),
                vocabulary: vec!["a".into(), "b".into()],
            },
        )
        .unwrap();
        let rows = (0..2)
            .map(|i| StructuredInput::new(vec![FeatureValue::Numeric(i as f64)], format!("r{i}")))
            .collect();
        Model::Tree(train_cart(&Dataset::new(schema, rows, &["a", "b"]).unwrap(), &TrainParams::default()).unwrap())
    }

    #[test]
    fn ids_are_distinct_and_opaque() {
        let a = fresh_id();
        let b = fresh_id();
        assert_ne!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn lru_eviction_skips_young_entries() {
        let t0 = Instant::now();
        let mut s = SessionStore::new(StoreLimits {
            max_models: 3,
            max_episodes: 2,
            retention_secs: 10.0,
        });
        let a = s.insert_model_at(stump(), t0);
        let b = s.insert_model_at(stump(), t0);
        let c = s.insert_model_at(stump(), t0 + Duration::from_secs(1));
        let e = s.insert_model_at(stump(), t0 + Duration::from_secs(2));
        // everything is inside the retention floor
        assert_eq!(s.model_count(), 4);
        s.model(&a);
        let d = s.insert_model_at(stump(), t0 + Duration::from_secs(20));
        // the two least recently used old entries go; the touched one stays
        assert_eq!(s.model_count(), 3);
        assert!(s.model(&b).is_none() && s.model(&c).is_none());
        assert!(s.model(&a).is_some() && s.model(&e).is_some() && s.model(&d).is_some());
        let _ = s.insert_model_at(stump(), t0 + Duration::from_secs(25));
        assert_eq!(s.model_count(), 3);
        assert!(s.model(&d).is_some(), "d is still young");
    }
}
