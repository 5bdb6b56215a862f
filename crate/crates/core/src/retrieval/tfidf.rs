//! TF-IDF keyword matching.
//!
//! Raw term counts, smoothed idf `ln((1 + N) / (1 + df)) + 1`, L2-normalized
//! vectors, cosine ranking with the same tie rule as dense retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RankedList, Ranking, RetrievalError};
use crate::corpus::{DialoguePoint, LabelCatalog};
use crate::embedder::{tokenize, EmbedError, Embedder, EmbeddingVector};
use crate::stages;

/// Sparse vector as `(term index, weight)` pairs sorted by index.
pub type SparseVector = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    n_docs: usize,
}

pub fn tfidf_fit(documents: &[&str]) -> Result<TfIdfModel, RetrievalError> {
    TfIdfModel::fit(documents)
}

impl TfIdfModel {
    pub fn fit(documents: &[&str]) -> Result<Self, RetrievalError> {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in documents {
            let mut tokens = tokenize(doc);
            tokens.sort();
            tokens.dedup();
            for t in tokens {
                *df.entry(t).or_default() += 1;
            }
        }
        if df.is_empty() {
            return Err(RetrievalError::EmptyDocuments);
        }
        let n = documents.len() as f64;
        let mut vocabulary = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (token, count)) in df.into_iter().enumerate() {
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
            vocabulary.insert(token, i);
        }
        Ok(Self { vocabulary, idf, n_docs: documents.len() })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn vocab_len(&self) -> usize {
        self.idf.len()
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.vocabulary.get(token).map(|&i| self.idf[i])
    }

    /// Normalized tf-idf vector; empty when no token is in the vocabulary.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&token) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut weights: SparseVector = counts.into_iter().map(|(i, tf)| (i, tf * self.idf[i])).collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Vec::new();
        }
        for (_, w) in &mut weights {
            *w /= norm;
        }
        weights
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("tf-idf model always serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

/// A fitted model with precomputed label vectors.
#[derive(Debug, Clone)]
pub struct TfIdfRanker {
    model: TfIdfModel,
    labels: Vec<SparseVector>,
}

impl TfIdfRanker {
    pub fn new(model: TfIdfModel, catalog: &LabelCatalog) -> Self {
        let labels = catalog.iter().map(|(_, text)| model.transform(text)).collect();
        Self { model, labels }
    }

    pub fn model(&self) -> &TfIdfModel {
        &self.model
    }

    /// Cosine ranking of all labels; a query with no known tokens scores 0
    /// everywhere and so falls back to ascending label id.
    pub fn rank_text(&self, text: &str) -> Ranking {
        let query = self.model.transform(text);
        Ranking::from_scores(self.labels.iter().map(|l| sparse_dot(&query, l)).collect())
    }
}

/// Ranks the catalog against the student's turns by keyword overlap.
pub fn tfidf_rank(point: &DialoguePoint, ranker: &TfIdfRanker) -> RankedList {
    ranker.rank_text(&stages::serialize_dialogue(point)).for_point(point)
}

/// Dense view of a tf-idf model for use wherever an [`Embedder`] is expected.
#[derive(Debug, Clone)]
pub struct TfIdfEmbedder {
    model: TfIdfModel,
}

impl TfIdfEmbedder {
    pub fn new(model: TfIdfModel) -> Self {
        Self { model }
    }
}

impl Embedder for TfIdfEmbedder {
    fn dim(&self) -> usize {
        self.model.vocab_len()
    }

    fn fingerprint(&self) -> String {
        format!("tfidf:{}", self.model.digest())
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, text)| {
                if tokenize(text).is_empty() {
                    return Err(EmbedError::EmptyText { index });
                }
                let mut dense = vec![0.0; self.dim()];
                for (i, w) in self.model.transform(text) {
                    dense[i] = w;
                }
                EmbeddingVector::new(dense)
            })
            .collect()
    }
}
