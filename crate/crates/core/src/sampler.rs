//! Consistency/diversity scoring of generated templates and the per-task
//! sampling distribution over original and generated templates.
//!
//! Originals share a fixed mass `epsilon` uniformly. Generated templates
//! share `1 - epsilon` through a softmax over their scores, where a score
//! rewards similarity to the origin template and penalizes similarity to
//! sibling rewrites of the same origin.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::Duration;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::seed::{stable_hash, stream_rng};
use crate::template::InstructionTemplate;

pub const STUB_DIM: usize = 64;
pub const DEFAULT_N_SIBLINGS: usize = 8;
pub const ENV_EMB_URL: &str = "INSTREXP_EMB_URL";
pub const ENV_EMB_KEY: &str = "INSTREXP_EMB_KEY";
pub const ENV_EMB_MODEL: &str = "INSTREXP_EMB_MODEL";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite embedding component")]
    NonFinite,
    #[error("task pool `{0}` has no templates")]
    EmptyPool(String),
    #[error("epsilon {epsilon} is inconsistent with pool `{task_id}`: {reason}")]
    InconsistentEpsilon { task_id: String, epsilon: f64, reason: String },
    #[error("distribution for pool `{0}` has not been built")]
    DistributionUnbuilt(String),
    #[error("no embedding for template `{0}`")]
    MissingEmbedding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SamplerError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
///
/// Norms are taken as `sqrt(|a|^2 |b|^2)` so that `cos(v, v)` is exactly 1.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SamplerError> {
    if a.dim() != b.dim() {
        return Err(SamplerError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let aa = dot(&a.values, &a.values);
    let bb = dot(&b.values, &b.values);
    if aa == 0.0 || bb == 0.0 {
        return Err(SamplerError::ZeroVector);
    }
    Ok((dot(&a.values, &b.values) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SamplerError>;
}

/// Deterministic test double: lower-cased word unigrams and bigrams hashed
/// into `dim` buckets, then L2-normalized. Never returns a zero vector.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self { dim: STUB_DIM }
    }
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let mut grams: Vec<String> = tokens.iter().map(|t| format!("1:{t}")).collect();
        grams.extend(tokens.windows(2).map(|w| format!("2:{} {}", w[0], w[1])));
        if grams.is_empty() {
            grams.push("0:<empty>".into());
        }
        let mut v = vec![0.0; self.dim];
        for g in &grams {
            let h = stable_hash(g.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            // Second hash byte spreads weights so colliding grams still differ.
            let weight = 1.0 + ((h >> 32) & 0xff) as f64 / 255.0;
            v[bucket] += weight;
        }
        let norm = dot(&v, &v).sqrt();
        EmbeddingVector { values: v.into_iter().map(|x| x / norm).collect() }
    }
}

impl Embedder for StubEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SamplerError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
    session_dim: Mutex<Option<usize>>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/embeddings") { base.to_string() } else { format!("{base}/embeddings") };
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        Self { endpoint, api_key, model: model.into(), agent, session_dim: Mutex::new(None) }
    }

    pub fn from_env() -> Result<Self, SamplerError> {
        let url = std::env::var(ENV_EMB_URL)
            .map_err(|_| SamplerError::BackendUnavailable(format!("{ENV_EMB_URL} is not set")))?;
        let key = std::env::var(ENV_EMB_KEY).ok().filter(|k| !k.is_empty());
        Ok(Self::new(&url, key, std::env::var(ENV_EMB_MODEL).unwrap_or_default()))
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SamplerError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let value: serde_json::Value = call
            .send_json(json!({ "model": self.model, "input": texts }))
            .map_err(|e| SamplerError::BackendUnavailable(e.to_string()))?
            .into_json()
            .map_err(|e| SamplerError::BackendUnavailable(e.to_string()))?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| SamplerError::BackendUnavailable("response has no `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(SamplerError::BackendUnavailable(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| SamplerError::BackendUnavailable("item has no `embedding`".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or(SamplerError::NonFinite))
                .collect::<Result<_, _>>()?;
            let v = EmbeddingVector::new(values)?;
            let mut dim = self.session_dim.lock().unwrap();
            match *dim {
                Some(d) if d != v.dim() => return Err(SamplerError::DimensionMismatch { expected: d, got: v.dim() }),
                None => *dim = Some(v.dim()),
                _ => {}
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// `origin_sim - mean(sibling_sims)`; the diversity term is 0 with no siblings.
pub fn consistency_diversity_score(origin_sim: f64, sibling_sims: &[f64]) -> f64 {
    if sibling_sims.is_empty() {
        return origin_sim;
    }
    origin_sim - sibling_sims.iter().sum::<f64>() / sibling_sims.len() as f64
}

/// Scores generated template `j` against its origin and up to `n_siblings`
/// siblings drawn uniformly without replacement.
pub fn score_generated<R: Rng + ?Sized>(
    j: &str,
    origin: &str,
    siblings: &[String],
    n_siblings: usize,
    embeddings: &HashMap<String, EmbeddingVector>,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    let get = |id: &str| embeddings.get(id).ok_or_else(|| SamplerError::MissingEmbedding(id.to_string()));
    let e_j = get(j)?;
    let origin_sim = cosine_similarity(e_j, get(origin)?)?;
    let n = n_siblings.min(siblings.len());
    let mut picked: Vec<usize> = if n == 0 { Vec::new() } else { sample_indices(rng, siblings.len(), n).into_vec() };
    picked.sort_unstable();
    let sims = picked
        .into_iter()
        .map(|i| cosine_similarity(e_j, get(&siblings[i])?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(consistency_diversity_score(origin_sim, &sims))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub template_id: String,
    /// Raw template this one descends from.
    pub origin_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPool {
    pub task_id: String,
    pub originals: Vec<String>,
    pub generated: Vec<GeneratedEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub probabilities: BTreeMap<String, f64>,
}

impl TaskPool {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self { task_id: task_id.into(), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.originals.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_built(&self) -> bool {
        self.epsilon.is_some() && !self.probabilities.is_empty()
    }

    /// Template ids in sampling order: originals, then generated.
    pub fn template_ids(&self) -> impl Iterator<Item = &str> {
        self.originals.iter().map(String::as_str).chain(self.generated.iter().map(|g| g.template_id.as_str()))
    }
}

/// `|orig| / (|orig| + |gen|)`
pub fn default_epsilon(pool: &TaskPool) -> Result<f64, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool(pool.task_id.clone()));
    }
    Ok(pool.originals.len() as f64 / pool.len() as f64)
}

/// How epsilon is chosen per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum EpsilonMode {
    #[default]
    Default,
    Fixed(f64),
    /// Multiple of the default, clamped to [0, 1].
    Scaled(f64),
}

impl std::str::FromStr for EpsilonMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self::Default),
            "half" => Ok(Self::Scaled(0.5)),
            "double" => Ok(Self::Scaled(2.0)),
            other => {
                let (kind, v) = other.split_once(':').ok_or_else(|| format!("unknown epsilon mode `{other}`"))?;
                let v: f64 = v.parse().map_err(|e| format!("epsilon `{other}`: {e}"))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(format!("epsilon `{other}` must be a nonnegative number"));
                }
                match kind {
                    "fixed" if v > 1.0 => Err(format!("epsilon `{other}` must lie in [0, 1]")),
                    "fixed" => Ok(Self::Fixed(v)),
                    "scaled" => Ok(Self::Scaled(v)),
                    _ => Err(format!("unknown epsilon mode `{other}`")),
                }
            }
        }
    }
}

/// Resolves the epsilon for one pool. Pools missing one side get all mass
/// on the other side regardless of mode.
pub fn resolve_epsilon(mode: EpsilonMode, pool: &TaskPool) -> Result<f64, SamplerError> {
    let eps0 = default_epsilon(pool)?;
    if pool.generated.is_empty() {
        return Ok(1.0);
    }
    if pool.originals.is_empty() {
        return Ok(0.0);
    }
    Ok(match mode {
        EpsilonMode::Default => eps0,
        EpsilonMode::Fixed(v) => v,
        EpsilonMode::Scaled(f) => f * eps0,
    }
    .clamp(0.0, 1.0))
}

/// Fills `probabilities` for every template in the pool.
pub fn build_distribution(pool: &TaskPool, epsilon: f64, softmax_temp: f64) -> Result<TaskPool, SamplerError> {
    let inconsistent = |reason: &str| SamplerError::InconsistentEpsilon {
        task_id: pool.task_id.clone(),
        epsilon,
        reason: reason.to_string(),
    };
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool(pool.task_id.clone()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(inconsistent("epsilon must lie in [0, 1]"));
    }
    if !(softmax_temp > 0.0) || !softmax_temp.is_finite() {
        return Err(inconsistent("softmax temperature must be positive"));
    }
    if epsilon < 1.0 && pool.generated.is_empty() {
        return Err(inconsistent("mass left for generated templates but there are none"));
    }
    if epsilon > 0.0 && pool.originals.is_empty() {
        return Err(inconsistent("mass left for original templates but there are none"));
    }

    let mut out = pool.clone();
    out.epsilon = Some(epsilon);
    out.probabilities.clear();
    if !pool.originals.is_empty() {
        let each = epsilon / pool.originals.len() as f64;
        for id in &pool.originals {
            out.probabilities.insert(id.clone(), each);
        }
    }
    if !pool.generated.is_empty() {
        let scores = pool
            .generated
            .iter()
            .map(|g| pool.scores.get(&g.template_id).copied().ok_or_else(|| SamplerError::MissingEmbedding(g.template_id.clone())))
            .collect::<Result<Vec<f64>, _>>()?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / softmax_temp).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (g, w) in pool.generated.iter().zip(weights) {
            out.probabilities.insert(g.template_id.clone(), (1.0 - epsilon) * w / total);
        }
    }
    Ok(out)
}

/// Draws template ids from a built pool.
#[derive(Debug, Clone)]
pub struct TemplateSampler {
    ids: Vec<String>,
    index: WeightedIndex<f64>,
}

impl TemplateSampler {
    pub fn new(pool: &TaskPool) -> Result<Self, SamplerError> {
        if !pool.is_built() {
            return Err(SamplerError::DistributionUnbuilt(pool.task_id.clone()));
        }
        let mut ids = Vec::new();
        let mut weights = Vec::new();
        for id in pool.template_ids() {
            let p = *pool.probabilities.get(id).ok_or_else(|| SamplerError::DistributionUnbuilt(pool.task_id.clone()))?;
            ids.push(id.to_string());
            weights.push(p);
        }
        let index = WeightedIndex::new(&weights).map_err(|_| SamplerError::DistributionUnbuilt(pool.task_id.clone()))?;
        Ok(Self { ids, index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        &self.ids[self.index.sample(rng)]
    }
}

pub fn sample_template<R: Rng + ?Sized>(pool: &TaskPool, rng: &mut R) -> Result<String, SamplerError> {
    Ok(TemplateSampler::new(pool)?.sample(rng).to_string())
}

/// Builds one scored pool per task.
///
/// Siblings of a generated template are the other generated templates with
/// the same raw origin; they are drawn once per template from a per-task
/// stream seeded by `seed`.
pub fn score_pools(
    raw: &[InstructionTemplate],
    generated: &[InstructionTemplate],
    embedder: &dyn Embedder,
    n_siblings: usize,
    seed: u64,
) -> Result<Vec<TaskPool>, SamplerError> {
    let mut pools: BTreeMap<String, TaskPool> = BTreeMap::new();
    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    for t in raw {
        pools.entry(t.task_id.clone()).or_insert_with(|| TaskPool::new(&t.task_id)).originals.push(t.template_id.clone());
        texts.insert(t.template_id.clone(), t.render());
    }
    for t in generated {
        let origin = t
            .lineage
            .as_ref()
            .map(|l| l.root_template_id.clone())
            .ok_or_else(|| SamplerError::MissingEmbedding(format!("{} (no lineage)", t.template_id)))?;
        pools
            .entry(t.task_id.clone())
            .or_insert_with(|| TaskPool::new(&t.task_id))
            .generated
            .push(GeneratedEntry { template_id: t.template_id.clone(), origin_id: origin });
        texts.insert(t.template_id.clone(), t.render());
    }

    let ids: Vec<String> = texts.keys().cloned().collect();
    let vectors = embedder.embed(&texts.values().cloned().collect::<Vec<_>>())?;
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(SamplerError::DimensionMismatch { expected: first.dim(), got: bad.dim() });
        }
    }
    let embeddings: HashMap<String, EmbeddingVector> = ids.into_iter().zip(vectors).collect();

    let mut out = Vec::with_capacity(pools.len());
    for (task_id, mut pool) in pools {
        pool.originals.sort();
        pool.generated.sort_by(|a, b| a.template_id.cmp(&b.template_id));
        let mut by_origin: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for g in &pool.generated {
            by_origin.entry(g.origin_id.as_str()).or_default().push(g.template_id.clone());
        }
        let mut rng = stream_rng(seed, &task_id);
        let mut scores = BTreeMap::new();
        for g in &pool.generated {
            let siblings: Vec<String> =
                by_origin[g.origin_id.as_str()].iter().filter(|s| **s != g.template_id).cloned().collect();
            let s = score_generated(&g.template_id, &g.origin_id, &siblings, n_siblings, &embeddings, &mut rng)?;
            scores.insert(g.template_id.clone(), s);
        }
        pool.scores = scores;
        out.push(pool);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    fn pool(n_orig: usize, gen_scores: &[f64]) -> TaskPool {
        let mut p = TaskPool::new("t");
        p.originals = (0..n_orig).map(|i| format!("o{i}")).collect();
        for (i, s) in gen_scores.iter().enumerate() {
            let id = format!("g{i}");
            p.generated.push(GeneratedEntry { template_id: id.clone(), origin_id: "o0".into() });
            p.scores.insert(id, *s);
        }
        p
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.7, 2.2]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let c = cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((c - 0.974_631_846_197_076).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(SamplerError::ZeroVector));
        assert!(matches!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])), Err(SamplerError::DimensionMismatch { .. })));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN]), Err(SamplerError::NonFinite));
    }

    #[test]
    fn stub_embedder_properties() {
        let e = StubEmbedder::default();
        let texts = vec!["a".to_string(), "b".to_string(), "a".to_string(), String::new()];
        let out = e.embed(&texts).unwrap();
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        assert_eq!(out[0].dim(), STUB_DIM);
        assert!(cosine_similarity(&out[3], &out[3]).is_ok());
        assert!(e.embed(&[]).unwrap().is_empty());
    }

    #[test]
    fn score_examples() {
        assert_eq!(consistency_diversity_score(0.9, &[0.5, 0.7]), 0.9 - 0.6);
        assert!((consistency_diversity_score(0.9, &[0.5, 0.7]) - 0.3).abs() < 1e-15);
        assert_eq!(consistency_diversity_score(0.42, &[]), 0.42);

        let same = v(&[0.1, 0.2, 0.3]);
        let emb: HashMap<String, EmbeddingVector> =
            ["j", "o", "s1", "s2", "s3"].iter().map(|k| (k.to_string(), same.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sibs = vec!["s1".to_string(), "s2".to_string(), "s3".to_string()];
        assert_eq!(score_generated("j", "o", &sibs, 8, &emb, &mut rng).unwrap(), 0.0);
        assert_eq!(score_generated("j", "o", &[], 8, &emb, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn epsilon_defaults() {
        assert_eq!(default_epsilon(&pool(5, &[0.0; 15])).unwrap(), 0.25);
        assert_eq!(default_epsilon(&pool(3, &[])).unwrap(), 1.0);
        let p = pool(329, &vec![0.0; 1526]);
        assert_eq!(default_epsilon(&p).unwrap(), 329.0 / 1855.0);
        assert!((default_epsilon(&p).unwrap() - 0.177_36).abs() < 1e-5);
        assert!(matches!(default_epsilon(&TaskPool::new("e")), Err(SamplerError::EmptyPool(_))));
    }

    #[test]
    fn distribution_examples() {
        let d = build_distribution(&pool(2, &[0.3, 0.3]), 0.5, 1.0).unwrap();
        for p in d.probabilities.values() {
            assert!((p - 0.25).abs() < 1e-15);
        }

        let d = build_distribution(&pool(2, &[0.1, 0.9]), 1.0, 1.0).unwrap();
        assert_eq!(d.probabilities["o0"], 0.5);
        assert_eq!(d.probabilities["g0"], 0.0);
        assert_eq!(d.probabilities["g1"], 0.0);

        let d = build_distribution(&pool(1, &[2f64.ln(), 1f64.ln()]), 0.4, 1.0).unwrap();
        assert_eq!(d.probabilities["o0"], 0.4);
        assert!((d.probabilities["g0"] - 0.4).abs() < 1e-15);
        assert!((d.probabilities["g1"] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn distribution_preconditions() {
        assert!(matches!(build_distribution(&pool(2, &[]), 0.0, 1.0), Err(SamplerError::InconsistentEpsilon { .. })));
        assert!(build_distribution(&pool(2, &[]), 1.0, 1.0).is_ok());
        assert!(matches!(build_distribution(&pool(0, &[0.1]), 0.5, 1.0), Err(SamplerError::InconsistentEpsilon { .. })));
        assert!(build_distribution(&pool(0, &[0.1]), 0.0, 1.0).is_ok());
        assert!(build_distribution(&pool(1, &[0.1]), 1.5, 1.0).is_err());
    }

    #[test]
    fn epsilon_modes() {
        let p = pool(1, &[0.0, 0.0, 0.0]);
        assert_eq!(resolve_epsilon(EpsilonMode::Default, &p).unwrap(), 0.25);
        assert_eq!(resolve_epsilon("half".parse().unwrap(), &p).unwrap(), 0.125);
        assert_eq!(resolve_epsilon("double".parse().unwrap(), &p).unwrap(), 0.5);
        assert_eq!(resolve_epsilon("fixed:0".parse().unwrap(), &p).unwrap(), 0.0);
        assert_eq!(resolve_epsilon("scaled:10".parse().unwrap(), &p).unwrap(), 1.0);
        assert_eq!(resolve_epsilon(EpsilonMode::Fixed(0.0), &pool(2, &[])).unwrap(), 1.0);
        assert!("bogus".parse::<EpsilonMode>().is_err());
        assert!("fixed:-1".parse::<EpsilonMode>().is_err());
    }

    #[test]
    fn sampling_contract() {
        let single = build_distribution(&pool(1, &[]), 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_template(&single, &mut rng).unwrap(), "o0");
        }
        let eps1 = build_distribution(&pool(3, &[5.0, 1.0]), 1.0, 1.0).unwrap();
        let s = TemplateSampler::new(&eps1).unwrap();
        for _ in 0..1000 {
            assert!(s.sample(&mut rng).starts_with('o'));
        }
        assert!(matches!(sample_template(&pool(1, &[]), &mut rng), Err(SamplerError::DistributionUnbuilt(_))));
    }

    #[test]
    fn score_pools_groups_by_task_and_origin() {
        let raw = vec![
            InstructionTemplate::new("r1", "a", "Describe the image.").unwrap(),
            InstructionTemplate::new("r2", "b", "What is {x}?").unwrap(),
        ];
        let lineage = |root: &str| crate::template::Lineage {
            parent_template_id: root.into(),
            root_template_id: root.into(),
            guiding_id: "g".into(),
            temperature: 0.6,
            iteration: 0,
        };
        let gen = vec![
            InstructionTemplate::generated("r1|g1", "a", "Describe this image.", lineage("r1")).unwrap(),
            InstructionTemplate::generated("r1|g2", "a", "Give a description of the image.", lineage("r1")).unwrap(),
        ];
        let pools = score_pools(&raw, &gen, &StubEmbedder::default(), 8, 7).unwrap();
        assert_eq!(pools.len(), 2);
        assert_eq!(pools[0].task_id, "a");
        assert_eq!(pools[0].scores.len(), 2);
        assert!(pools[1].generated.is_empty());
        let again = score_pools(&raw, &gen, &StubEmbedder::default(), 8, 7).unwrap();
        assert_eq!(pools, again);
    }
}
