//! Exact cosine search over the dynamic reference library.

use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::store::CacheKey;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalQuery {
    /// Mean-pooled final hidden state of the query text.
    pub embedding: Vec<f32>,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub key: CacheKey,
    pub similarity: f64,
}

#[derive(Clone, Debug)]
struct Indexed {
    key: CacheKey,
    embedding: Vec<f32>,
    norm: f64,
}

/// Readers clone the current snapshot; writers swap in a new one.
#[derive(Debug)]
pub struct Retriever {
    dim: usize,
    snapshot: RwLock<Arc<Vec<Indexed>>>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl Retriever {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            snapshot: RwLock::new(Arc::new(Vec::new())),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `key`, replacing any previous embedding for it.
    pub fn index(&self, key: CacheKey, embedding: Vec<f32>) -> Result<()> {
        self.check_dim(&embedding)?;
        let item = Indexed {
            norm: norm(&embedding),
            key,
            embedding,
        };
        let mut guard = self.snapshot.write();
        let mut next: Vec<Indexed> = guard.iter().filter(|i| i.key != item.key).cloned().collect();
        next.push(item);
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn remove(&self, key: &CacheKey) -> bool {
        let mut guard = self.snapshot.write();
        if !guard.iter().any(|i| &i.key == key) {
            return false;
        }
        *guard = Arc::new(guard.iter().filter(|i| &i.key != key).cloned().collect());
        true
    }

    pub fn len(&self) -> usize {
        self.snapshot.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top `top_k` keys by cosine similarity, ties to the lowest key.
    pub fn retrieve(&self, query: &RetrievalQuery) -> Result<Vec<Hit>> {
        self.check_dim(&query.embedding)?;
        if query.top_k == 0 {
            return Err(Error::Validation("top_k must be at least 1".into()));
        }
        let snapshot = self.snapshot.read().clone();
        let qn = norm(&query.embedding);
        let mut hits: Vec<Hit> = snapshot
            .iter()
            .map(|i| {
                let similarity = if qn == 0.0 || i.norm == 0.0 {
                    0.0
                } else {
                    let dot: f64 = query
                        .embedding
                        .iter()
                        .zip(&i.embedding)
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum();
                    dot / (qn * i.norm)
                };
                Hit {
                    key: i.key.clone(),
                    similarity,
                }
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.key.cmp(&b.key)));
        hits.truncate(query.top_k);
        Ok(hits)
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Validation(format!(
                "embedding has {} dimensions, index expects {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Retrieval fires when the model emits the reserved sentinel id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentinelTrigger {
    pub sentinel: u32,
}

impl SentinelTrigger {
    pub fn new(sentinel: u32) -> Self {
        Self { sentinel }
    }

    /// Looks only at the last emitted token; called once per decode step.
    pub fn fires(&self, partial_output: &[u32]) -> bool {
        partial_output.last() == Some(&self.sentinel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u8) -> CacheKey {
        CacheKey::for_bytes(&[i], 1, "dynamic")
    }

    fn q(v: &[f32], k: usize) -> RetrievalQuery {
        RetrievalQuery {
            embedding: v.to_vec(),
            top_k: k,
        }
    }

    #[test]
    fn self_similarity_ranks_first() {
        let r = Retriever::new(3);
        r.index(key(1), vec![1.0, 0.0, 0.0]).unwrap();
        r.index(key(2), vec![0.3, 1.0, 0.0]).unwrap();
        let hits = r.retrieve(&q(&[0.3, 1.0, 0.0], 1)).unwrap();
        assert_eq!(hits[0].key, key(2));
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_index_and_clamp() {
        let r = Retriever::new(2);
        assert!(r.retrieve(&q(&[1.0, 0.0], 3)).unwrap().is_empty());
        r.index(key(1), vec![1.0, 1.0]).unwrap();
        assert_eq!(r.retrieve(&q(&[1.0, 0.0], 5)).unwrap().len(), 1);
    }

    #[test]
    fn query_matching_a_ranks_a_then_b() {
        let r = Retriever::new(2);
        let (a, b) = (vec![1.0, 0.2], vec![-0.5, 1.0]);
        r.index(key(9), b).unwrap();
        r.index(key(8), a.clone()).unwrap();
        let hits = r.retrieve(&q(&a, 2)).unwrap();
        assert_eq!(hits.iter().map(|h| h.key.clone()).collect::<Vec<_>>(), vec![key(8), key(9)]);
    }

    #[test]
    fn orthogonal_query_orders_by_key() {
        let r = Retriever::new(3);
        let mut keys: Vec<CacheKey> = (0..4).map(key).collect();
        for k in &keys {
            r.index(k.clone(), vec![1.0, 0.0, 0.0]).unwrap();
        }
        keys.sort();
        let hits = r.retrieve(&q(&[0.0, 0.0, 1.0], 4)).unwrap();
        assert!(hits.iter().all(|h| h.similarity == 0.0));
        assert_eq!(hits.into_iter().map(|h| h.key).collect::<Vec<_>>(), keys);
    }

    #[test]
    fn reindex_replaces_and_remove_deletes() {
        let r = Retriever::new(2);
        r.index(key(1), vec![1.0, 0.0]).unwrap();
        r.index(key(1), vec![0.0, 1.0]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.retrieve(&q(&[0.0, 1.0], 1)).unwrap()[0].similarity > 0.99);
        assert!(r.remove(&key(1)));
        assert!(!r.remove(&key(1)));
        assert!(r.is_empty());
    }

    #[test]
    fn dimension_and_top_k_validation() {
        let r = Retriever::new(2);
        assert!(r.index(key(1), vec![1.0]).is_err());
        assert!(r.retrieve(&q(&[1.0, 2.0, 3.0], 1)).is_err());
        assert!(r.retrieve(&q(&[1.0, 2.0], 0)).is_err());
    }

    #[test]
    fn sentinel_trigger() {
        let t = SentinelTrigger::new(255);
        assert!(t.fires(&[3, 4, 255]));
        assert!(!t.fires(&[3, 4, 5]));
        assert!(!t.fires(&[]));
    }
}
