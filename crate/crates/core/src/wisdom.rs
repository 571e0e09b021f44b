//! Persistent cross-task wisdom (L3) with threshold prefetch.

use std::cmp::Ordering;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STORE_FILE: &str = "wisdom.jsonl";
pub const META_FILE: &str = "wisdom.meta.json";

#[derive(Debug, Error)]
pub enum WisdomError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("task {0:?} is already in the store")]
    DuplicateTask(String),
    #[error("no task {0:?} in the store")]
    UnknownTask(String),
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, WisdomError> {
    if u.len() != v.len() {
        return Err(WisdomError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(WisdomError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WisdomEntry {
    pub task_id: String,
    pub descriptor: String,
    pub embedding: Vec<f64>,
    pub wisdom: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OverwritePolicy {
    #[default]
    Reject,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrefetchConfig {
    pub delta: f64,
    pub max_prefetch: usize,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        Self {
            delta: 0.60,
            max_prefetch: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefetched<'a> {
    pub entry: &'a WisdomEntry,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    dimension: usize,
    version: u64,
    count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WisdomStore {
    entries: Vec<WisdomEntry>,
    dimension: usize,
    version: u64,
}

impl WisdomStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            entries: Vec::new(),
            dimension,
            version: 0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[WisdomEntry] {
        &self.entries
    }

    pub fn get(&self, task_id: &str) -> Option<&WisdomEntry> {
        self.entries.iter().find(|e| e.task_id == task_id)
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.get(task_id).is_some()
    }

    /// Inserts an entry; the embedding is stored unit-normalized.
    pub fn insert(
        &mut self,
        task_id: &str,
        descriptor: &str,
        embedding: &[f64],
        wisdom: &str,
        policy: OverwritePolicy,
    ) -> Result<&WisdomEntry, WisdomError> {
        if embedding.len() != self.dimension {
            return Err(WisdomError::DimensionMismatch {
                expected: self.dimension,
                got: embedding.len(),
            });
        }
        if task_id.is_empty() || descriptor.trim().is_empty() || wisdom.trim().is_empty() {
            return Err(WisdomError::InvalidEntry(
                "task id, descriptor and wisdom must be non-empty".into(),
            ));
        }
        let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(WisdomError::ZeroVector);
        }
        let entry = WisdomEntry {
            task_id: task_id.to_string(),
            descriptor: descriptor.to_string(),
            embedding: embedding.iter().map(|x| x / norm).collect(),
            wisdom: wisdom.to_string(),
        };
        let slot = match self.entries.iter().position(|e| e.task_id == task_id) {
            Some(_) if policy == OverwritePolicy::Reject => {
                return Err(WisdomError::DuplicateTask(task_id.to_string()))
            }
            Some(n) => {
                self.entries[n] = entry;
                n
            }
            None => {
                self.entries.push(entry);
                self.entries.len() - 1
            }
        };
        self.version += 1;
        Ok(&self.entries[slot])
    }

    pub fn remove(&mut self, task_id: &str) -> Result<WisdomEntry, WisdomError> {
        let n = self
            .entries
            .iter()
            .position(|e| e.task_id == task_id)
            .ok_or_else(|| WisdomError::UnknownTask(task_id.to_string()))?;
        self.version += 1;
        Ok(self.entries.remove(n))
    }

    /// Every entry with similarity to `query`, in store order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<Prefetched<'_>>, WisdomError> {
        if query.len() != self.dimension {
            return Err(WisdomError::DimensionMismatch {
                expected: self.dimension,
                got: query.len(),
            });
        }
        self.entries
            .iter()
            .map(|entry| {
                Ok(Prefetched {
                    entry,
                    similarity: cosine(query, &entry.embedding)?,
                })
            })
            .collect()
    }

    /// Entries with similarity strictly above `delta`, most similar first,
    /// at most `max_prefetch` of them.
    pub fn prefetch(&self, query: &[f64], cfg: PrefetchConfig) -> Result<Vec<Prefetched<'_>>, WisdomError> {
        let mut hits: Vec<_> = self
            .similarities(query)?
            .into_iter()
            .filter(|p| p.similarity > cfg.delta)
            .collect();
        hits.sort_by(|a, b| b.similarity.partial_cmp(&a.similarity).unwrap_or(Ordering::Equal));
        hits.truncate(cfg.max_prefetch);
        Ok(hits)
    }

    pub fn save(&self, dir: &Path) -> Result<(), WisdomError> {
        fs::create_dir_all(dir)?;
        let mut body = String::new();
        for e in &self.entries {
            body.push_str(&serde_json::to_string(e).map_err(io::Error::other)?);
            body.push('\n');
        }
        let meta = Meta {
            dimension: self.dimension,
            version: self.version,
            count: self.entries.len(),
        };
        write_atomic(&dir.join(STORE_FILE), body.as_bytes())?;
        let meta = serde_json::to_string_pretty(&meta).map_err(io::Error::other)?;
        write_atomic(&dir.join(META_FILE), meta.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, WisdomError> {
        let meta_text = fs::read_to_string(dir.join(META_FILE))?;
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| WisdomError::CorruptStore(format!("{META_FILE}: {e}")))?;
        let body = match fs::read_to_string(dir.join(STORE_FILE)) {
            Ok(body) => body,
            Err(e) if e.kind() == io::ErrorKind::NotFound && meta.count == 0 => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut entries = Vec::with_capacity(meta.count);
        for (n, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: WisdomEntry = serde_json::from_str(line)
                .map_err(|e| WisdomError::CorruptStore(format!("{STORE_FILE} line {}: {e}", n + 1)))?;
            if entry.embedding.len() != meta.dimension {
                return Err(WisdomError::DimensionMismatch {
                    expected: meta.dimension,
                    got: entry.embedding.len(),
                });
            }
            entries.push(entry);
        }
        if entries.len() != meta.count {
            return Err(WisdomError::CorruptStore(format!(
                "header declares {} entries, found {}",
                meta.count,
                entries.len()
            )));
        }
        Ok(Self {
            entries,
            dimension: meta.dimension,
            version: meta.version,
        })
    }

    /// Loads the store in `dir`, or starts an empty one if none exists yet.
    pub fn open_or_create(dir: &Path, dimension: usize) -> Result<Self, WisdomError> {
        if !dir.join(META_FILE).exists() {
            return Ok(Self::new(dimension));
        }
        let store = Self::load(dir)?;
        if store.dimension != dimension {
            return Err(WisdomError::DimensionMismatch {
                expected: dimension,
                got: store.dimension,
            });
        }
        Ok(store)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(vectors: &[(&str, Vec<f64>)]) -> WisdomStore {
        let mut s = WisdomStore::new(vectors[0].1.len());
        for (id, v) in vectors {
            s.insert(id, "d", v, "w", OverwritePolicy::Reject).unwrap();
        }
        s
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let oracle = 1.0 / 2f64.sqrt();
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - oracle).abs() < 1e-8);
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(WisdomError::DimensionMismatch { .. })));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(WisdomError::ZeroVector)));
    }

    #[test]
    fn empty_store_prefetches_nothing() {
        let s = WisdomStore::new(2);
        assert!(s.prefetch(&[1.0, 0.0], PrefetchConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        // Unit vectors at the requested angles to the query (1, 0).
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let s = store_with(&[("a", at(0.91)), ("b", vec![3.0, 4.0]), ("c", at(0.58))]);
        let query = [1.0, 0.0];
        let sims: Vec<f64> = s.similarities(&query).unwrap().iter().map(|p| p.similarity).collect();
        assert!((sims[1] - 0.60).abs() < 1e-12);
        let cfg = PrefetchConfig { delta: sims[1], max_prefetch: 3 };
        let hits = s.prefetch(&query, cfg).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry.task_id, "a");
    }

    #[test]
    fn zero_delta_excludes_orthogonal() {
        let s = store_with(&[("a", vec![1.0, 4.0]), ("b", vec![0.0, 1.0])]);
        let hits = s.prefetch(&[1.0, 0.0], PrefetchConfig { delta: 0.0, max_prefetch: 3 }).unwrap();
        assert_eq!(hits.iter().map(|h| h.entry.task_id.as_str()).collect::<Vec<_>>(), ["a"]);
    }

    #[test]
    fn insert_rules() {
        let mut s = WisdomStore::new(2);
        s.insert("t", "d", &[2.0, 0.0], "w", OverwritePolicy::Reject).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get("t").unwrap().embedding, vec![1.0, 0.0]);
        assert!(matches!(
            s.insert("t", "d", &[1.0, 0.0], "w", OverwritePolicy::Reject),
            Err(WisdomError::DuplicateTask(_))
        ));
        s.insert("t", "d2", &[0.0, 1.0], "w", OverwritePolicy::Replace).unwrap();
        assert_eq!((s.len(), s.version()), (1, 2));
        assert!(matches!(
            s.insert("u", "d", &[1.0], "w", OverwritePolicy::Reject),
            Err(WisdomError::DimensionMismatch { expected: 2, got: 1 })
        ));
        let hit = s.prefetch(&[0.0, 7.0], PrefetchConfig { delta: 0.5, max_prefetch: 3 }).unwrap();
        assert!((hit[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let s = store_with(&[("a", vec![0.1, 0.7, 0.3]), ("b", vec![1.0 / 3.0, 2.0, -0.25])]);
        s.save(dir.path()).unwrap();
        assert_eq!(WisdomStore::load(dir.path()).unwrap(), s);

        let path = dir.path().join(STORE_FILE);
        let body = fs::read_to_string(&path).unwrap();
        fs::write(&path, &body[..body.len() - 20]).unwrap();
        assert!(matches!(WisdomStore::load(dir.path()), Err(WisdomError::CorruptStore(_))));

        let first = body.lines().next().unwrap();
        let mixed = WisdomEntry { task_id: "c".into(), descriptor: "d".into(), embedding: vec![1.0], wisdom: "w".into() };
        fs::write(&path, format!("{first}\n{}\n", serde_json::to_string(&mixed).unwrap())).unwrap();
        assert!(matches!(WisdomStore::load(dir.path()), Err(WisdomError::DimensionMismatch { .. })));
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn prefetch_matches_brute_force(
            vectors in prop::collection::vec(vec_strategy(8), 0..40),
            query in vec_strategy(8),
            delta in 0.0f64..0.99,
            cap in 1usize..6,
        ) {
            let mut s = WisdomStore::new(8);
            for (n, v) in vectors.iter().enumerate() {
                s.insert(&n.to_string(), "d", v, "w", OverwritePolicy::Reject).unwrap();
            }
            let before = s.clone();
            let got: Vec<(String, f64)> = s
                .prefetch(&query, PrefetchConfig { delta, max_prefetch: cap })
                .unwrap()
                .into_iter()
                .map(|p| (p.entry.task_id.clone(), p.similarity))
                .collect();
            let mut oracle: Vec<(String, f64)> = vectors
                .iter()
                .enumerate()
                .map(|(n, v)| {
                    let dot: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
                    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
                    (n.to_string(), dot / (norm(v) * norm(&query)))
                })
                .filter(|(_, sim)| *sim > delta)
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            oracle.truncate(cap);
            prop_assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert!((g.1 - o.1).abs() < 1e-9);
            }
            prop_assert_eq!(s, before);
        }

        #[test]
        fn positive_rescaling_does_not_change_prefetch(
            vectors in prop::collection::vec(vec_strategy(4), 1..20),
            query in vec_strategy(4),
            scale in 0.01f64..100.0,
        ) {
            let build = |k: f64| {
                let mut s = WisdomStore::new(4);
                for (n, v) in vectors.iter().enumerate() {
                    let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
                    s.insert(&n.to_string(), "d", &scaled, "w", OverwritePolicy::Reject).unwrap();
                }
                s
            };
            let (a, b) = (build(1.0), build(scale));
            let ids = |s: &WisdomStore| -> Vec<String> {
                s.prefetch(&query, PrefetchConfig { delta: 0.3, max_prefetch: 5 })
                    .unwrap()
                    .into_iter()
                    .map(|p| p.entry.task_id.clone())
                    .collect()
            };
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }
}
