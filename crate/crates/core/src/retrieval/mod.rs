//! Exact top-k retrieval over the label catalog, plus the lexical and
//! direct-embedding baselines.

pub mod tfidf;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DialoguePoint, LabelCatalog};
use crate::embedder::{cosine_similarity, EmbedError, Embedder, EmbeddingVector};
use crate::stages;

pub use tfidf::{tfidf_fit, tfidf_rank, TfIdfEmbedder, TfIdfModel, TfIdfRanker};

/// Rerank handoff depth; also the zero-shot parse depth.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("label catalog is empty")]
    EmptyCatalog,
    #[error("embedding label {label_id}: {source}")]
    LabelEmbedding {
        label_id: usize,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index was built with {index} but queried with {query}")]
    FingerprintMismatch { index: String, query: String },
    #[error("query has dimension {query}, index has {index}")]
    DimensionMismatch { index: usize, query: usize },
    #[error("index covers {index} labels but the catalog has {catalog}")]
    CatalogMismatch { index: usize, catalog: usize },
    #[error("all documents are empty")]
    EmptyDocuments,
    #[error("invalid ranked list: {0}")]
    InvalidRanking(String),
    #[error("index file {path}: {reason}")]
    IndexFile { path: PathBuf, reason: String },
}

/// Hex SHA-256 over the catalog's label texts in id order.
pub fn catalog_digest(catalog: &LabelCatalog) -> String {
    let mut hasher = Sha256::new();
    for (_, text) in catalog.iter() {
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// One L2-normalized vector per catalog label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelIndex {
    pub dim: usize,
    pub fingerprint: String,
    pub catalog_digest: String,
    pub vectors: Vec<EmbeddingVector>,
}

impl LabelIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, label_id: usize) -> Option<&EmbeddingVector> {
        self.vectors.get(label_id)
    }

    pub fn check_catalog(&self, catalog: &LabelCatalog) -> Result<(), RetrievalError> {
        if self.len() != catalog.len() || self.catalog_digest != catalog_digest(catalog) {
            return Err(RetrievalError::CatalogMismatch { index: self.len(), catalog: catalog.len() });
        }
        Ok(())
    }

    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), RetrievalError> {
        let query = embedder.fingerprint();
        if query != self.fingerprint {
            return Err(RetrievalError::FingerprintMismatch { index: self.fingerprint.clone(), query });
        }
        Ok(())
    }

    /// Floats are written by `serde_json` in shortest round-trip form.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let err = |reason: String| RetrievalError::IndexFile { path: path.to_path_buf(), reason };
        let json = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let err = |reason: String| RetrievalError::IndexFile { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let index: LabelIndex = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if let Some(bad) = index.vectors.iter().position(|v| v.dim() != index.dim) {
            return Err(err(format!("vector {bad} does not have dimension {}", index.dim)));
        }
        Ok(index)
    }
}

pub fn build_index(catalog: &LabelCatalog, embedder: &dyn Embedder) -> Result<LabelIndex, RetrievalError> {
    if catalog.is_empty() {
        return Err(RetrievalError::EmptyCatalog);
    }
    let texts: Vec<&str> = catalog.texts().iter().map(String::as_str).collect();
    let raw = embedder.embed_batch(&texts).map_err(|e| match e {
        EmbedError::EmptyText { index } => RetrievalError::LabelEmbedding { label_id: index, source: e },
        other => RetrievalError::Embed(other),
    })?;
    let vectors = raw
        .iter()
        .enumerate()
        .map(|(label_id, v)| {
            if v.dim() != embedder.dim() {
                return Err(RetrievalError::DimensionMismatch { index: embedder.dim(), query: v.dim() });
            }
            v.normalized().map_err(|source| RetrievalError::LabelEmbedding { label_id, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelIndex {
        dim: embedder.dim(),
        fingerprint: embedder.fingerprint(),
        catalog_digest: catalog_digest(catalog),
        vectors,
    })
}

/// Label ids by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ordering: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Sorts `scores[id]` into a ranking.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let ordered = ids.iter().map(|&i| scores[i]).collect();
        Self { ordering: ids, scores: ordered }
    }

    pub fn for_point(self, point: &DialoguePoint) -> RankedList {
        RankedList {
            point_id: point.id.clone(),
            true_label: point.misconception_id,
            ordering: self.ordering,
            scores: Some(self.scores),
        }
    }
}

/// A method's ordering of label ids for one datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub point_id: String,
    pub true_label: usize,
    pub ordering: Vec<usize>,
    /// Parallel to `ordering`; dropped once an LLM reorders the list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl RankedList {
    pub fn new(point_id: impl Into<String>, true_label: usize, ordering: Vec<usize>) -> Result<Self, RetrievalError> {
        let list = Self { point_id: point_id.into(), true_label, ordering, scores: None };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let mut seen = HashSet::with_capacity(self.ordering.len());
        if let Some(dup) = self.ordering.iter().find(|id| !seen.insert(**id)) {
            return Err(RetrievalError::InvalidRanking(format!("label {dup} appears twice")));
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.ordering.len() {
                return Err(RetrievalError::InvalidRanking("scores and ordering differ in length".into()));
            }
        }
        Ok(())
    }

    /// 1-based position of the true label, if it was ranked at all.
    pub fn true_rank(&self) -> Option<usize> {
        self.ordering.iter().position(|&id| id == self.true_label).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.ordering[..k.min(self.ordering.len())]
    }
}

/// Scores every label by cosine similarity with `query`.
pub fn rank_all(query: &EmbeddingVector, index: &LabelIndex) -> Result<Ranking, RetrievalError> {
    if query.dim() != index.dim {
        return Err(RetrievalError::DimensionMismatch { index: index.dim, query: query.dim() });
    }
    let scores = index.vectors.iter().map(|v| cosine_similarity(query, v)).collect::<Result<Vec<_>, _>>()?;
    Ok(Ranking::from_scores(scores))
}

/// Embeds `text` with `embedder` and ranks the catalog for `point`.
pub fn rank_text(
    text: &str,
    point: &DialoguePoint,
    index: &LabelIndex,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    index.check_embedder(embedder)?;
    let query = embedder.embed(text)?;
    Ok(rank_all(&query, index)?.for_point(point))
}

/// Ranks labels against the student's own words, skipping generation.
pub fn direct_embedding_baseline(
    point: &DialoguePoint,
    index: &LabelIndex,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    rank_text(&stages::serialize_dialogue(point), point, index, embedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerOption, Likelihood, Speaker, Turn};
    use crate::embedder::HashEmbedder;

    fn catalog(texts: &[&str]) -> LabelCatalog {
        LabelCatalog::from_texts(texts).unwrap()
    }

    fn point_saying(student: &str, label: usize) -> DialoguePoint {
        DialoguePoint {
            id: "p".into(),
            question: "Q".into(),
            options: vec![AnswerOption { key: "A".into(), text: "1".into() }],
            chosen: "A".into(),
            dialogue: vec![
                Turn { speaker: Speaker::Tutor, text: "Why?".into() },
                Turn { speaker: Speaker::Student, text: student.into() },
            ],
            misconception_id: label,
            likelihood: Likelihood::new(100).unwrap(),
        }
    }

    #[test]
    fn index_has_one_vector_per_label() {
        let cat = catalog(&["a b", "c d", "e f", "g h", "i j", "k l", "m n", "o p", "q r", "s t"]);
        let e = HashEmbedder::new(64, 2).unwrap();
        let index = build_index(&cat, &e).unwrap();
        assert_eq!(index.len(), 10);
        assert!(index.vectors.iter().all(|v| v.dim() == 64 && (v.norm() - 1.0).abs() < 1e-9));
        assert_eq!(build_index(&cat, &e).unwrap(), index);
        index.check_catalog(&cat).unwrap();
    }

    #[test]
    fn empty_catalog_and_bad_label() {
        let e = HashEmbedder::new(64, 2).unwrap();
        assert!(matches!(build_index(&LabelCatalog::new(), &e), Err(RetrievalError::EmptyCatalog)));
        let cat = catalog(&["fine", "???"]);
        assert!(matches!(build_index(&cat, &e), Err(RetrievalError::LabelEmbedding { label_id: 1, .. })));
    }

    #[test]
    fn self_query_ranks_first() {
        let cat = catalog(&["adds the numerators", "multiplies by ten", "rounds down", "ignores the sign"]);
        let e = HashEmbedder::new(128, 2).unwrap();
        let index = build_index(&cat, &e).unwrap();
        let ranking = rank_all(index.vector(3).unwrap(), &index).unwrap();
        assert_eq!(ranking.ordering[0], 3);
    }

    #[test]
    fn hand_built_vectors_match_brute_force() {
        let vecs = [[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.0, 1.0]];
        let index = LabelIndex {
            dim: 3,
            fingerprint: "test".into(),
            catalog_digest: String::new(),
            vectors: vecs.iter().map(|v| EmbeddingVector::new(v.to_vec()).unwrap()).collect(),
        };
        let query = EmbeddingVector::new(vec![0.8, 0.6, 0.0]).unwrap();
        // cosines: 0.8, 0.96, 0.6, 0.96, 0.0 -> 1 and 3 tie, smaller id first
        assert_eq!(rank_all(&query, &index).unwrap().ordering, vec![1, 3, 0, 2, 4]);
        let wrong_dim = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(rank_all(&wrong_dim, &index), Err(RetrievalError::DimensionMismatch { .. })));
    }

    #[test]
    fn identical_vectors_tie_toward_smaller_id() {
        // the two labels differ only in casing, which tokenization removes
        let cat = catalog(&["rounds to zero", "misreads scale", "Rounds To Zero"]);
        let e = HashEmbedder::new(64, 1).unwrap();
        let index = build_index(&cat, &e).unwrap();
        assert_eq!(index.vectors[0], index.vectors[2]);
        let ranking = rank_all(&e.embed("rounds to zero").unwrap(), &index).unwrap();
        assert_eq!(&ranking.ordering[..2], &[0, 2]);
    }

    #[test]
    fn verbatim_quote_ranks_label_first() {
        let cat = catalog(&[
            "adds the numerators and denominators",
            "multiplies by ten instead of dividing",
            "rounds decimals down",
        ]);
        let e = HashEmbedder::new(256, 2).unwrap();
        let index = build_index(&cat, &e).unwrap();
        let p = point_saying("I just multiplies by ten instead of dividing", 1);
        let list = direct_embedding_baseline(&p, &index, &e).unwrap();
        assert_eq!(list.true_rank(), Some(1));
        let p_empty = point_saying("  ", 1);
        assert!(matches!(
            direct_embedding_baseline(&p_empty, &index, &e),
            Err(RetrievalError::Embed(EmbedError::EmptyText { .. }))
        ));
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let cat = catalog(&["a", "b"]);
        let index = build_index(&cat, &HashEmbedder::new(64, 2).unwrap()).unwrap();
        let p = point_saying("a", 0);
        assert!(matches!(
            direct_embedding_baseline(&p, &index, &HashEmbedder::new(64, 1).unwrap()),
            Err(RetrievalError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn ranked_list_rejects_duplicates() {
        assert!(RankedList::new("p", 0, vec![0, 1, 0]).is_err());
        let list = RankedList::new("p", 5, vec![2, 5, 1]).unwrap();
        assert_eq!(list.true_rank(), Some(2));
        assert_eq!(RankedList::new("p", 9, vec![2, 5]).unwrap().true_rank(), None);
    }

    #[test]
    fn index_file_round_trip() {
        let cat = catalog(&["one third", "two fifths", "seven eighths"]);
        let index = build_index(&cat, &HashEmbedder::new(32, 2).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        assert_eq!(LabelIndex::load(&path).unwrap(), index);
    }
}
