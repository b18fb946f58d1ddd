//! Semantic operations over a single cut: the transformation registry, a
//! deterministic embedder, exact cosine top-k search, and prototype
//! classification.
//!
//! Search is an exhaustive scan of the semantic layer at the requested cut.
//! There is no auxiliary index, so results can never mix cuts.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{CutId, Layer};
use crate::layers::{ContextLake, Episode, SemanticRecord};

pub const EMBEDDING_DIM: usize = 64;

/// One key/interpretation pair produced by a transformation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticOutput {
    pub key: Vec<u8>,
    pub interpretation: Vec<u8>,
}

pub type TransformFn = Arc<dyn Fn(&[Episode]) -> Vec<SemanticOutput> + Send + Sync>;

/// A versioned, deterministic interpretation of episodes. Bump `version`
/// whenever the function's behavior changes.
#[derive(Clone)]
pub struct Transformation {
    pub id: String,
    pub version: u32,
    apply: TransformFn,
}

impl Transformation {
    pub fn new<F>(id: impl Into<String>, version: u32, apply: F) -> Self
    where
        F: Fn(&[Episode]) -> Vec<SemanticOutput> + Send + Sync + 'static,
    {
        Self { id: id.into(), version, apply: Arc::new(apply) }
    }

    pub fn apply(&self, episodes: &[Episode]) -> Vec<SemanticOutput> {
        (self.apply)(episodes)
    }
}

impl fmt::Debug for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transformation").field("id", &self.id).field("version", &self.version).finish()
    }
}

/// The set of permitted semantic write authorities, plus label prototypes.
#[derive(Debug, Default)]
pub struct Registry {
    transforms: RwLock<BTreeMap<(String, u32), Transformation>>,
    prototypes: RwLock<BTreeMap<String, String>>,
}

impl Registry {
    pub fn register_transformation(&self, t: Transformation) -> Result<()> {
        let mut transforms = self.transforms.write();
        let key = (t.id.clone(), t.version);
        if transforms.contains_key(&key) {
            return Err(Error::DuplicateVersion { id: t.id, version: t.version });
        }
        transforms.insert(key, t);
        Ok(())
    }

    pub fn is_registered(&self, id: &str, version: u32) -> bool {
        self.transforms.read().contains_key(&(id.to_string(), version))
    }

    pub fn get(&self, id: &str, version: u32) -> Option<Transformation> {
        self.transforms.read().get(&(id.to_string(), version)).cloned()
    }

    pub fn transforms(&self) -> Vec<(String, u32)> {
        self.transforms.read().keys().cloned().collect()
    }

    /// Registers (or replaces) the prototype text for `label`.
    pub fn register_prototype(&self, label: impl Into<String>, text: impl Into<String>) {
        self.prototypes.write().insert(label.into(), text.into());
    }

    pub fn prototype(&self, label: &str) -> Option<String> {
        self.prototypes.read().get(label).cloned()
    }
}

/// Label prototypes as loaded from scenario config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeSet {
    pub labels: Vec<PrototypeLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeLabel {
    pub label: String,
    pub prototype: String,
}

impl PrototypeSet {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn install(&self, registry: &Registry) {
        for l in &self.labels {
            registry.register_prototype(l.label.clone(), l.prototype.clone());
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.label.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    components: Vec<f64>,
}

impl EmbeddingVector {
    pub fn zero(dim: usize) -> Self {
        Self { components: vec![0.0; dim] }
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|c| *c == 0.0)
    }

    /// Cosine similarity; zero when either side is the zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.components.iter().zip(&other.components).map(|(a, b)| a * b).sum();
        dot / (na * nb)
    }
}

/// Maps text to a fixed-dimension vector. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &[u8]) -> EmbeddingVector;

    /// Upper bound on embedding latency in logical milliseconds.
    fn latency_bound_ms(&self) -> u64 {
        0
    }
}

/// Signed feature hashing over lowercase alphanumeric tokens, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn tokens(text: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split(|b| !b.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &[u8]) -> EmbeddingVector {
        let mut components = vec![0.0; EMBEDDING_DIM];
        for token in tokens(text) {
            let h = fnv1a(&token);
            let slot = (h % EMBEDDING_DIM as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            components[slot] += sign;
        }
        let mut v = EmbeddingVector { components };
        let norm = v.norm();
        if norm > 0.0 {
            v.components.iter_mut().for_each(|c| *c /= norm);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub key: Vec<u8>,
    pub score: f64,
}

/// Orders hits by descending score, then ascending key.
pub fn rank_hits(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
}

impl ContextLake {
    pub fn register_transformation(&self, t: Transformation) -> Result<()> {
        self.registry().register_transformation(t)
    }

    pub fn embed(&self, text: &[u8]) -> EmbeddingVector {
        self.embedder().embed(text)
    }

    /// Exact top-k over every embedded semantic record visible at `cut`.
    pub fn similarity_search(
        &self,
        cut: CutId,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<SearchHit>> {
        self.similarity_search_prefix(cut, b"", query, k)
    }

    pub fn similarity_search_prefix(
        &self,
        cut: CutId,
        prefix: &[u8],
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::ZeroK);
        }
        let rows = self.kernel().scan_prefix(cut, Layer::Semantic, prefix)?;
        let mut hits: Vec<SearchHit> = rows
            .into_iter()
            .filter_map(|(key, value)| {
                let record = SemanticRecord::decode(&key, &value).ok()?;
                let embedding = self.embed(&record.interpretation);
                (!embedding.is_zero()).then(|| SearchHit { score: query.cosine(&embedding), key })
            })
            .collect();
        rank_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Nearest prototype by cosine; ties go to the earliest label in `labels`.
    pub fn classify(&self, cut: CutId, text: &[u8], labels: &[&str]) -> Result<String> {
        self.kernel().check_cut(cut)?;
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        let query = self.embed(text);
        let mut best: Option<(&str, f64)> = None;
        for label in labels {
            let proto = self
                .registry()
                .prototype(label)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            let score = query.cosine(&self.embed(proto.as_bytes()));
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((label, score));
            }
        }
        Ok(best.map(|(l, _)| l.to_string()).expect("labels is non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_embeds_to_zero() {
        let v = HashEmbedder.embed(b"");
        assert!(v.is_zero());
        assert_eq!(v.components().len(), EMBEDDING_DIM);
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn embedding_is_deterministic_and_normalized() {
        let a = HashEmbedder.embed(b"Direct arrival on checkout URL");
        let b = HashEmbedder.embed(b"Direct arrival on checkout URL");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_ignores_case_and_punctuation() {
        assert_eq!(HashEmbedder.embed(b"Fraud, PATTERN!"), HashEmbedder.embed(b"fraud pattern"));
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let registry = Registry::default();
        let t = Transformation::new("behavior_patterns", 1, |_| Vec::new());
        registry.register_transformation(t.clone()).unwrap();
        assert_eq!(
            registry.register_transformation(t),
            Err(Error::DuplicateVersion { id: "behavior_patterns".into(), version: 1 })
        );
        registry.register_transformation(Transformation::new("behavior_patterns", 2, |_| Vec::new())).unwrap();
        assert!(registry.is_registered("behavior_patterns", 1));
        assert!(registry.is_registered("behavior_patterns", 2));
        assert!(!registry.is_registered("behavior_patterns", 3));
    }

    #[test]
    fn ranking_breaks_ties_by_key() {
        let mut hits = vec![
            SearchHit { key: b"b".to_vec(), score: 0.5 },
            SearchHit { key: b"a".to_vec(), score: 0.5 },
            SearchHit { key: b"c".to_vec(), score: 0.9 },
        ];
        rank_hits(&mut hits);
        let keys: Vec<_> = hits.iter().map(|h| h.key.clone()).collect();
        assert_eq!(keys, vec![b"c".to_vec(), b"a".to_vec(), b"b".to_vec()]);
    }

    #[test]
    fn prototype_set_parses_and_rejects_unknown_fields() {
        let set = PrototypeSet::from_json(r#"{"labels":[{"label":"a","prototype":"x y"}]}"#).unwrap();
        assert_eq!(set.label_names(), vec!["a".to_string()]);
        assert!(PrototypeSet::from_json(r#"{"labels":[],"extra":1}"#).is_err());
    }
}
