//! Pluggable external-capability clients: semantic embedding providers and
//! relation-labeling oracles.
//!
//! Each capability ships in three flavors: a remote HTTP client, a
//! file-backed store, and a deterministic offline fallback. Embeddings are
//! hard-required (the metric is meaningless without them); relation labels
//! degrade to NEUTRAL on failure.
//!
//! Remote wire formats:
//! - embeddings: POST `{"model": m, "inputs": [s...]}` -> `{"vectors": [[f...]...]}`
//! - relations:  POST `{"pairs": [{"a": s, "b": s}...]}` -> `{"codes": [c...]}`
//!
//! Endpoints and credentials come from `EMBED_URL`/`EMBED_KEY` and
//! `RELATION_URL`/`RELATION_KEY`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::canon::{canon_hash, token_set};
use crate::error::{Error, Result};
use crate::relation::RelationCode;

pub const FALLBACK_DIMENSION: usize = 64;
pub const DEFAULT_BUDGET_CAP: u32 = 19;

/// Produces unit-L2-norm semantic vectors for canon strings.
pub trait Embedder: Send + Sync {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>>;
    fn dimension(&self) -> usize;
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Provider("cannot normalize zero/non-finite vector".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// FNV-1a, 64-bit. Used instead of the std hasher so bucket assignment is
/// bit-stable across runs and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic offline embedder: hashes tokens into `dimension` count
/// buckets, then L2-normalizes once.
#[derive(Debug, Clone)]
pub struct FallbackEmbedder {
    pub dimension: usize,
}

impl Default for FallbackEmbedder {
    fn default() -> Self {
        FallbackEmbedder {
            dimension: FALLBACK_DIMENSION,
        }
    }
}

impl Embedder for FallbackEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|s| {
                let mut counts = vec![0u64; self.dimension];
                let mut any = false;
                for tok in token_set(s) {
                    counts[(fnv1a(tok.as_bytes()) % self.dimension as u64) as usize] += 1;
                    any = true;
                }
                if !any {
                    counts[0] = 1; // tokenless input still gets a valid unit vector
                }
                let mut v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
                l2_normalize(&mut v)?;
                Ok(v)
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredVector {
    canon_hash: String,
    vector: Vec<f64>,
}

/// Embeddings preloaded from a JSONL file of `{canon_hash, vector}` records.
pub struct FileEmbedder {
    map: HashMap<String, Vec<f64>>,
    dimension: usize,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        let mut dimension = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoredVector = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            let mut v = rec.vector;
            l2_normalize(&mut v)?;
            dimension = v.len();
            map.insert(rec.canon_hash, v);
        }
        Ok(FileEmbedder { map, dimension })
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|s| {
                let key = canon_hash(s);
                self.map
                    .get(&key)
                    .cloned()
                    .ok_or(Error::MissingEmbedding(key))
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_base: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = None;
        for attempt in 0..self.attempts.max(1) {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last = Some(e);
                    if attempt + 1 < self.attempts {
                        std::thread::sleep(self.backoff_base * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Provider("retry loop ran zero attempts".into())))
    }
}

fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote embedding client speaking the batch wire format above.
pub struct RemoteEmbedder {
    url: String,
    key: Option<String>,
    model: String,
    dimension: usize,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn from_env(model: &str, dimension: usize) -> Result<Self> {
        let url = std::env::var("EMBED_URL")
            .map_err(|_| Error::Config("EMBED_URL not set for remote embed mode".into()))?;
        let key = std::env::var("EMBED_KEY").ok();
        Ok(Self::new(url, key, model.to_string(), dimension, RetryPolicy::default()))
    }

    pub fn new(
        url: String,
        key: Option<String>,
        model: String,
        dimension: usize,
        retry: RetryPolicy,
    ) -> Self {
        RemoteEmbedder {
            url,
            key,
            model,
            dimension,
            retry,
            agent: http_agent(),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbedRequest {
            model: &self.model,
            inputs,
        };
        let resp: EmbedResponse = self.retry.run(|| {
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.key {
                req = req.header("authorization", &format!("Bearer {key}"));
            }
            let mut res = req
                .send_json(&body)
                .map_err(|e| Error::Provider(format!("embed request failed: {e}")))?;
            res.body_mut()
                .read_json()
                .map_err(|e| Error::Provider(format!("embed response unreadable: {e}")))
        })?;
        if resp.vectors.len() != inputs.len() {
            return Err(Error::Provider(format!(
                "embed response returned {} vectors for {} inputs",
                resp.vectors.len(),
                inputs.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|mut v| {
                l2_normalize(&mut v)?;
                Ok(v)
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Wraps any embedder with an append-only JSONL cache keyed by canon hash.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    state: Mutex<CacheState>,
    path: PathBuf,
}

struct CacheState {
    map: HashMap<String, Vec<f64>>,
}

impl CachedEmbedder {
    pub fn open(inner: Box<dyn Embedder>, path: PathBuf) -> Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StoredVector = serde_json::from_str(line)?;
                map.insert(rec.canon_hash, rec.vector);
            }
        }
        Ok(CachedEmbedder {
            inner,
            state: Mutex::new(CacheState { map }),
            path,
        })
    }
}

impl Embedder for CachedEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        let keys: Vec<String> = inputs.iter().map(|s| canon_hash(s)).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let state = self.state.lock().unwrap();
            for (i, key) in keys.iter().enumerate() {
                if !state.map.contains_key(key) {
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let to_embed: Vec<String> = missing.iter().map(|&i| inputs[i].clone()).collect();
            let fresh = self.inner.embed(&to_embed)?;
            let mut state = self.state.lock().unwrap();
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?;
            for (&i, v) in missing.iter().zip(fresh) {
                let rec = StoredVector {
                    canon_hash: keys[i].clone(),
                    vector: v.clone(),
                };
                writeln!(file, "{}", serde_json::to_string(&rec)?)?;
                state.map.insert(keys[i].clone(), v);
            }
        }
        let state = self.state.lock().unwrap();
        Ok(keys.iter().map(|k| state.map[k].clone()).collect())
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
}

/// Atomic request budget. When `enforced`, acquisitions beyond the cap are
/// denied (callers degrade to NEUTRAL); otherwise it only counts.
#[derive(Debug)]
pub struct Budget {
    cap: u32,
    used: AtomicU32,
    enforced: bool,
}

impl Budget {
    pub fn new(cap: u32, enforced: bool) -> Self {
        Budget {
            cap,
            used: AtomicU32::new(0),
            enforced,
        }
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    /// Reserves one call. Returns false when the enforced cap is exhausted.
    pub fn try_acquire(&self) -> bool {
        if !self.enforced {
            self.used.fetch_add(1, Ordering::SeqCst);
            return true;
        }
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                if u < self.cap {
                    Some(u + 1)
                } else {
                    None
                }
            })
            .is_ok()
    }

    pub fn used(&self) -> u32 {
        self.used.load(Ordering::SeqCst)
    }
}

/// One candidate pair as presented to a labeling oracle.
#[derive(Debug, Clone, Copy)]
pub struct PairPayload<'a> {
    pub text_a: &'a str,
    pub text_b: &'a str,
    pub canon_a: &'a str,
    pub canon_b: &'a str,
}

/// Labels for one chunk plus the count of slots that fell back to NEUTRAL
/// because the oracle's answer was unusable.
#[derive(Debug, Clone)]
pub struct ChunkOutcome {
    pub codes: Vec<RelationCode>,
    pub warnings: usize,
}

pub trait RelationOracle: Send + Sync {
    /// Labels every pair of one chunk in order. A transport-level failure
    /// (after retries) is an `Err`; per-slot garbage degrades to NEUTRAL
    /// inside a successful outcome.
    fn label_chunk(&self, pairs: &[PairPayload<'_>]) -> Result<ChunkOutcome>;
}

/// Antonym pairs checked by the rule oracle. Small on purpose: this is a
/// deterministic stand-in for a remote labeler, not an NLI model.
const ANTONYMS: &[(&str, &str)] = &[
    ("true", "false"),
    ("yes", "no"),
    ("even", "odd"),
    ("positive", "negative"),
    ("increases", "decreases"),
    ("always", "never"),
    ("possible", "impossible"),
];

/// Deterministic offline labeler.
///
/// SUPPORT when canons are equal or one token set contains the other;
/// REFUTE when both are single-equation forms with the same left-hand side
/// but different numeric right-hand sides, when the texts differ only by a
/// "not", or when they contain opposite members of a small antonym lexicon;
/// NEUTRAL otherwise.
#[derive(Debug, Default, Clone)]
pub struct RuleOracle;

use crate::canon::equation_claims;

impl RuleOracle {
    fn label_one(a: &str, b: &str) -> RelationCode {
        if a == b {
            return RelationCode::Support;
        }
        let ta = token_set(a);
        let tb = token_set(b);
        // contradiction checks come before the subset rule: "x is prime"
        // is a token subset of "x is not prime" yet refutes it
        for (head_a, val_a) in equation_claims(a) {
            for (head_b, val_b) in equation_claims(b) {
                if head_a == head_b && val_a != val_b {
                    return RelationCode::Refute;
                }
            }
        }
        let not = "not";
        let strip =
            |t: &std::collections::BTreeSet<&str>| -> std::collections::BTreeSet<String> {
                t.iter().filter(|w| **w != not).map(|w| w.to_string()).collect()
            };
        if ta.contains(not) != tb.contains(not) && strip(&ta) == strip(&tb) {
            return RelationCode::Refute;
        }
        for (w1, w2) in ANTONYMS {
            if (ta.contains(w1) && tb.contains(w2)) || (ta.contains(w2) && tb.contains(w1)) {
                return RelationCode::Refute;
            }
        }
        if !ta.is_empty() && !tb.is_empty() && (ta.is_subset(&tb) || tb.is_subset(&ta)) {
            return RelationCode::Support;
        }
        RelationCode::Neutral
    }
}

impl RelationOracle for RuleOracle {
    fn label_chunk(&self, pairs: &[PairPayload<'_>]) -> Result<ChunkOutcome> {
        Ok(ChunkOutcome {
            codes: pairs
                .iter()
                .map(|p| RuleOracle::label_one(p.canon_a, p.canon_b))
                .collect(),
            warnings: 0,
        })
    }
}

#[derive(Serialize)]
struct RelationRequest<'a> {
    pairs: Vec<RelationPairBody<'a>>,
}

#[derive(Serialize)]
struct RelationPairBody<'a> {
    a: &'a str,
    b: &'a str,
}

#[derive(Deserialize)]
struct RelationResponse {
    codes: Vec<String>,
}

/// Remote relation labeler; sends surface texts, expects one code per pair.
pub struct RemoteRelationOracle {
    url: String,
    key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl RemoteRelationOracle {
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("RELATION_URL")
            .map_err(|_| Error::Config("RELATION_URL not set for remote relation mode".into()))?;
        let key = std::env::var("RELATION_KEY").ok();
        Ok(Self::new(url, key, RetryPolicy::default()))
    }

    pub fn new(url: String, key: Option<String>, retry: RetryPolicy) -> Self {
        RemoteRelationOracle {
            url,
            key,
            retry,
            agent: http_agent(),
        }
    }
}

impl RelationOracle for RemoteRelationOracle {
    fn label_chunk(&self, pairs: &[PairPayload<'_>]) -> Result<ChunkOutcome> {
        let body = RelationRequest {
            pairs: pairs
                .iter()
                .map(|p| RelationPairBody {
                    a: p.text_a,
                    b: p.text_b,
                })
                .collect(),
        };
        let resp: RelationResponse = self.retry.run(|| {
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.key {
                req = req.header("authorization", &format!("Bearer {key}"));
            }
            let mut res = req
                .send_json(&body)
                .map_err(|e| Error::Provider(format!("relation request failed: {e}")))?;
            res.body_mut()
                .read_json()
                .map_err(|e| Error::Provider(format!("relation response unreadable: {e}")))
        })?;
        let mut codes = Vec::with_capacity(pairs.len());
        let mut warnings = 0;
        for i in 0..pairs.len() {
            let code = resp.codes.get(i).and_then(|c| match c.trim() {
                "SUPPORT" => Some(RelationCode::Support),
                "REFUTE" => Some(RelationCode::Refute),
                "NEUTRAL" => Some(RelationCode::Neutral),
                _ => None,
            });
            match code {
                Some(c) => codes.push(c),
                None => {
                    codes.push(RelationCode::Neutral);
                    warnings += 1;
                }
            }
        }
        Ok(ChunkOutcome { codes, warnings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_identical_inputs_identical_vectors() {
        let e = FallbackEmbedder::default();
        let v = e.embed(&["a b c".into(), "a b c".into()]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn fallback_vectors_are_unit_norm() {
        let e = FallbackEmbedder::default();
        for s in ["", "one", "one two three four five six"] {
            let v = &e.embed(&[s.to_string()]).unwrap()[0];
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for {s:?}");
        }
    }

    #[test]
    fn fallback_disjoint_tokens_near_orthogonal() {
        let e = FallbackEmbedder::default();
        let v = e
            .embed(&["alpha beta gamma".into(), "delta epsilon zeta".into()])
            .unwrap();
        let dot: f64 = v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum();
        // counts are non-negative, so cosine is never negative; with six
        // distinct tokens in 64 buckets these happen to avoid collisions
        assert!(dot >= 0.0);
        assert!(dot < 1e-12, "unexpected collision, dot {dot}");
    }

    #[test]
    fn budget_enforced_cap() {
        let b = Budget::new(3, true);
        assert!(b.try_acquire());
        assert!(b.try_acquire());
        assert!(b.try_acquire());
        assert!(!b.try_acquire());
        assert_eq!(b.used(), 3);
    }

    #[test]
    fn budget_exact_under_concurrency() {
        let b = std::sync::Arc::new(Budget::new(50, true));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let b = b.clone();
            handles.push(std::thread::spawn(move || {
                let mut got = 0;
                for _ in 0..20 {
                    if b.try_acquire() {
                        got += 1;
                    }
                }
                got
            }));
        }
        let total: u32 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(total, 50);
        assert_eq!(b.used(), 50);
    }

    #[test]
    fn rule_oracle_table() {
        assert_eq!(RuleOracle::label_one("x=3", "x=5"), RelationCode::Refute);
        assert_eq!(RuleOracle::label_one("x=3", "x=3"), RelationCode::Support);
        assert_eq!(
            RuleOracle::label_one("x=3", "so x=3 holds"),
            RelationCode::Support
        );
        assert_eq!(
            RuleOracle::label_one("n is even", "n is odd"),
            RelationCode::Refute
        );
        assert_eq!(
            RuleOracle::label_one("the sky is blue", "fish swim fast"),
            RelationCode::Neutral
        );
        assert_eq!(
            RuleOracle::label_one("it is prime", "it is not prime"),
            RelationCode::Refute
        );
    }

    #[test]
    fn file_embedder_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let rec = StoredVector {
            canon_hash: canon_hash("known"),
            vector: vec![3.0, 4.0],
        };
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&rec).unwrap())).unwrap();
        let e = FileEmbedder::load(&path).unwrap();
        let v = e.embed(&["known".into()]).unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-12); // normalized on load
        match e.embed(&["unknown".into()]) {
            Err(Error::MissingEmbedding(key)) => assert_eq!(key, canon_hash("unknown")),
            other => panic!("expected MissingEmbedding, got {other:?}"),
        }
    }

    #[test]
    fn cached_embedder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let first = {
            let c = CachedEmbedder::open(Box::new(FallbackEmbedder::default()), path.clone())
                .unwrap();
            c.embed(&["hello world".into()]).unwrap()
        };
        // Reopen: vector must come back bit-identical from the file.
        struct Poisoned;
        impl Embedder for Poisoned {
            fn embed(&self, _: &[String]) -> Result<Vec<Vec<f64>>> {
                Err(Error::Provider("inner should not be called".into()))
            }
            fn dimension(&self) -> usize {
                FALLBACK_DIMENSION
            }
        }
        let c = CachedEmbedder::open(Box::new(Poisoned), path).unwrap();
        let second = c.embed(&["hello world".into()]).unwrap();
        assert_eq!(first, second);
    }
}
