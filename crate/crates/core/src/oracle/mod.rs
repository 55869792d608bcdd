//! The expensive, assumed-correct labeler behind the cascade.
//!
//! Two implementations share the [`Oracle`] contract: [`MockOracle`] answers
//! from a label file, [`HttpOracle`] asks a chat-completion endpoint. Wrap
//! either in [`MemoOracle`] so each (query, document) pair is asked at most once.

mod http;
mod rate_limit;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use tokio::sync::OnceCell;

use crate::store::LabelSet;

pub use http::{parse_reply, EndpointConfig, HttpOracle, HttpOracleConfig, PromptTemplate};
pub use rate_limit::{estimate_tokens, Clock, RateLimitPolicy, RateLimiter, RetryPolicy, SystemClock, VirtualClock};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("oracle has no label for doc_id {0:?}")]
    UnknownDoc(String),

    #[error("no document text available for doc_id {0:?}")]
    MissingText(String),

    #[error("unparseable oracle reply after {attempts} attempts: {reply:?}")]
    Unparseable { reply: String, attempts: u32 },

    #[error("oracle request failed after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },

    #[error("request of ~{tokens} tokens exceeds the per-minute budget of {budget}")]
    RequestTooLarge { tokens: u64, budget: u64 },

    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
}

#[async_trait]
pub trait Oracle: Send + Sync {
    /// Whether `doc_id` satisfies the predicate `query`.
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError>;
}

#[async_trait]
impl<T: Oracle + ?Sized> Oracle for Arc<T> {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        (**self).label(query, doc_id).await
    }
}

#[async_trait]
impl<T: Oracle + ?Sized> Oracle for &T {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        (**self).label(query, doc_id).await
    }
}

#[async_trait]
impl<T: Oracle + ?Sized> Oracle for Box<T> {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        (**self).label(query, doc_id).await
    }
}

pub fn mock_label(labels: &LabelSet, _query: &str, doc_id: &str) -> Result<bool, OracleError> {
    labels
        .get(doc_id)
        .ok_or_else(|| OracleError::UnknownDoc(doc_id.to_string()))
}

/// Ground-truth stand-in: answers from a label set, no network traffic.
#[derive(Debug)]
pub struct MockOracle {
    labels: LabelSet,
    lookups: AtomicUsize,
}

impl MockOracle {
    pub fn new(labels: LabelSet) -> Self {
        Self {
            labels,
            lookups: AtomicUsize::new(0),
        }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    /// Number of label lookups served so far.
    pub fn lookups(&self) -> usize {
        self.lookups.load(Ordering::Relaxed)
    }
}

#[async_trait]
impl Oracle for MockOracle {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        mock_label(&self.labels, query, doc_id)
    }
}

type PairKey = (String, String);

/// Memoizes an oracle per (query, doc_id). Concurrent requests for the same
/// pair share one underlying call; failed calls are not cached.
pub struct MemoOracle<O> {
    inner: O,
    cells: Mutex<HashMap<PairKey, Arc<OnceCell<bool>>>>,
    invocations: AtomicUsize,
}

impl<O: Oracle> MemoOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cells: Mutex::new(HashMap::new()),
            invocations: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    /// Calls that reached the wrapped oracle.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn cached(&self, query: &str, doc_id: &str) -> Option<bool> {
        let cells = self.cells.lock().expect("memo lock");
        cells
            .get(&(query.to_string(), doc_id.to_string()))
            .and_then(|c| c.get().copied())
    }

    /// Every label obtained so far for `query`.
    pub fn known_labels(&self, query: &str) -> LabelSet {
        let cells = self.cells.lock().expect("memo lock");
        cells
            .iter()
            .filter(|((q, _), _)| q == query)
            .filter_map(|((_, d), c)| c.get().map(|&l| (d.clone(), l)))
            .collect()
    }
}

#[async_trait]
impl<O: Oracle> Oracle for MemoOracle<O> {
    async fn label(&self, query: &str, doc_id: &str) -> Result<bool, OracleError> {
        let cell = {
            let mut cells = self.cells.lock().expect("memo lock");
            cells
                .entry((query.to_string(), doc_id.to_string()))
                .or_default()
                .clone()
        };
        cell.get_or_try_init(|| async {
            self.invocations.fetch_add(1, Ordering::Relaxed);
            self.inner.label(query, doc_id).await
        })
        .await
        .copied()
    }
}

/// Batch labeling stopped by an oracle failure.
#[derive(Debug, thiserror::Error)]
#[error("oracle failed on {failed_doc} ({} labels completed): {source}", completed.len())]
pub struct BatchFailure {
    pub completed: BTreeMap<String, bool>,
    pub failed_doc: String,
    #[source]
    pub source: OracleError,
}

/// Labels `doc_ids` with at most `max_concurrent` requests in flight. Results
/// are keyed by doc_id, so completion order does not matter. On failure the
/// error reports the first failing id in input order plus every success.
pub async fn label_batch(
    oracle: &dyn Oracle,
    query: &str,
    doc_ids: &[String],
    max_concurrent: usize,
) -> Result<BTreeMap<String, bool>, BatchFailure> {
    let mut results: Vec<(usize, Result<bool, OracleError>)> = stream::iter(doc_ids.iter().enumerate())
        .map(|(i, id)| async move { (i, oracle.label(query, id).await) })
        .buffer_unordered(max_concurrent.max(1))
        .collect()
        .await;
    results.sort_by_key(|(i, _)| *i);
    let mut completed = BTreeMap::new();
    let mut failure = None;
    for (i, r) in results {
        match r {
            Ok(label) => {
                completed.insert(doc_ids[i].clone(), label);
            }
            Err(e) if failure.is_none() => failure = Some((doc_ids[i].clone(), e)),
            Err(_) => {}
        }
    }
    match failure {
        None => Ok(completed),
        Some((failed_doc, source)) => Err(BatchFailure {
            completed,
            failed_doc,
            source,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn labels() -> LabelSet {
        [("d1".to_string(), true), ("d2".to_string(), false)].into_iter().collect()
    }

    #[tokio::test]
    async fn mock_answers_from_labels() {
        let oracle = MockOracle::new(labels());
        assert!(oracle.label("q", "d1").await.unwrap());
        assert!(!oracle.label("q", "d2").await.unwrap());
        let err = oracle.label("q", "d9").await.unwrap_err();
        assert_eq!(err, OracleError::UnknownDoc("d9".into()));
        assert!(err.to_string().contains("d9"));
    }

    #[tokio::test]
    async fn memo_calls_through_once_per_pair() {
        let memo = MemoOracle::new(MockOracle::new(labels()));
        assert!(memo.label("q", "d1").await.unwrap());
        assert!(memo.label("q", "d1").await.unwrap());
        assert_eq!(memo.inner().lookups(), 1);
        assert!(!memo.label("other query", "d2").await.unwrap());
        assert_eq!(memo.invocations(), 2);
        assert_eq!(memo.cached("q", "d1"), Some(true));
        assert_eq!(memo.cached("q", "d2"), None);
        assert_eq!(memo.known_labels("q").len(), 1);
    }

    struct Slow {
        calls: AtomicUsize,
    }

    #[async_trait]
    impl Oracle for Slow {
        async fn label(&self, _query: &str, doc_id: &str) -> Result<bool, OracleError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(5)).await;
            Ok(doc_id.ends_with('1'))
        }
    }

    #[tokio::test]
    async fn concurrent_duplicates_share_one_call() {
        let memo = MemoOracle::new(Slow {
            calls: AtomicUsize::new(0),
        });
        let ids: Vec<String> = (0..40).map(|i| format!("d{}", i % 4)).collect();
        let out = label_batch(&memo, "q", &ids, 16).await.unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(memo.inner().calls.load(Ordering::SeqCst), 4);
        assert_eq!(memo.invocations(), 4);
    }

    #[tokio::test]
    async fn batch_failure_reports_first_failing_id() {
        let oracle = MockOracle::new(labels());
        let ids = vec!["d1".to_string(), "zz".to_string(), "d2".to_string(), "aa".to_string()];
        let err = label_batch(&oracle, "q", &ids, 2).await.unwrap_err();
        assert_eq!(err.failed_doc, "zz");
        assert_eq!(err.completed.len(), 2);
    }
}
