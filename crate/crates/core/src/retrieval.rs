//! Sector-contrastive adapter over frozen embeddings and top-N retrieval of
//! company news by profile-component queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, embed, normalize, EmbedError, EmbeddingProvider};
use crate::filing::CompanyProfile;
use crate::optim::Adam;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("training: {0}")]
    Training(String),
    #[error("adapter file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Square linear map applied to base embeddings; outputs are re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    dim: usize,
    /// Row-major `dim × dim`.
    weights: Vec<f64>,
}

impl Adapter {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self { dim, weights }
    }

    pub fn from_weights(dim: usize, weights: Vec<f64>) -> Result<Self, RetrievalError> {
        if weights.len() != dim * dim {
            return Err(RetrievalError::Usage(format!(
                "{} weights for a {dim}x{dim} adapter",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(RetrievalError::Usage("adapter weights must be finite".into()));
        }
        Ok(Self { dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `W x` without normalization.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "embedding dimension mismatch");
        self.weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.project(x);
        normalize(&mut z);
        z
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(4 + 8 * self.weights.len());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in &self.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        crate::llm::cache::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 4 {
            return Err(RetrievalError::Usage("adapter file too short".into()));
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if body.len() != dim * dim * 8 {
            return Err(RetrievalError::Usage(format!(
                "adapter file holds {} bytes, expected {}",
                body.len(),
                dim * dim * 8
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(dim, weights)
    }
}

/// Why a batch contributes nothing to training.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchSkip {
    #[error("batch has fewer than 2 items")]
    TooSmall,
    #[error("batch has fewer than 2 sectors")]
    OneSector,
    #[error("no item has a same-sector partner")]
    NoAnchors,
}

/// Multi-positive NT-Xent over cosine similarities of adapter outputs.
///
/// Anchors are items with at least one same-sector partner in the batch; the
/// loss is the mean over anchors. Returns the loss and its gradient with
/// respect to the adapter weights, laid out like [`Adapter::weights`].
pub fn nt_xent_loss<L: PartialEq>(
    embeddings: &[Vec<f64>],
    labels: &[L],
    adapter: &Adapter,
    tau: f64,
) -> Result<(f64, Vec<f64>), BatchSkip> {
    assert_eq!(embeddings.len(), labels.len());
    assert!(tau > 0.0, "temperature must be positive");
    let b = embeddings.len();
    if b < 2 {
        return Err(BatchSkip::TooSmall);
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(BatchSkip::OneSector);
    }
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let anchors: Vec<usize> = (0..b).filter(|&i| !positives[i].is_empty()).collect();
    if anchors.is_empty() {
        return Err(BatchSkip::NoAnchors);
    }
    let d = adapter.dim;
    let z: Vec<Vec<f64>> = embeddings.iter().map(|x| adapter.project(x)).collect();
    let norms: Vec<f64> = z.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let u: Vec<Vec<f64>> = z
        .iter()
        .zip(&norms)
        .map(|(v, n)| v.iter().map(|x| x / n).collect())
        .collect();
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = u[i].iter().zip(&u[j]).map(|(p, q)| p * q).sum();
        }
    }

    let a = anchors.len() as f64;
    let mut loss = 0.0;
    // dL/ds_ij, with i the anchor row.
    let mut m = vec![0.0; b * b];
    for &i in &anchors {
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| s[i * b + j] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| (s[i * b + j] / tau - max).exp())
            .sum();
        let log_denom = max + denom.ln();
        let p = &positives[i];
        let np = p.len() as f64;
        loss += log_denom - p.iter().map(|&j| s[i * b + j] / tau).sum::<f64>() / np;
        for j in (0..b).filter(|&j| j != i) {
            let softmax = (s[i * b + j] / tau - log_denom).exp();
            m[i * b + j] += softmax / (tau * a);
        }
        for &j in p {
            m[i * b + j] -= 1.0 / (np * tau * a);
        }
    }
    loss /= a;

    let mut grad = vec![0.0; d * d];
    for i in 0..b {
        let mut g = vec![0.0; d];
        for j in 0..b {
            let coef = m[i * b + j] + m[j * b + i];
            if coef != 0.0 {
                for (gk, uk) in g.iter_mut().zip(&u[j]) {
                    *gk += coef * uk;
                }
            }
        }
        let ug: f64 = u[i].iter().zip(&g).map(|(p, q)| p * q).sum();
        for k in 0..d {
            let dz = (g[k] - u[i][k] * ug) / norms[i];
            let row = &mut grad[k * d..(k + 1) * d];
            for (w, x) in row.iter_mut().zip(&embeddings[i]) {
                *w += dz * x;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    #[serde(default = "default_tau")]
    pub temperature: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_adapter_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> f64 {
    0.07
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    50
}
fn default_adapter_lr() -> f64 {
    5e-3
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: default_tau(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            learning_rate: default_adapter_lr(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub batches: usize,
    pub skipped: usize,
}

/// Trains an adapter from the identity with Adam on shuffled mini-batches.
pub fn train_adapter<L: PartialEq + Ord + Clone>(
    embeddings: &[Vec<f64>],
    labels: &[L],
    config: &ContrastiveConfig,
) -> Result<(Adapter, Vec<AdapterEpoch>), RetrievalError> {
    if embeddings.len() != labels.len() {
        return Err(RetrievalError::Usage("one label per embedding required".into()));
    }
    if !(config.temperature > 0.0) || config.batch_size < 2 || !(config.learning_rate > 0.0) {
        return Err(RetrievalError::Usage(
            "temperature and learning rate must be positive, batch size at least 2".into(),
        ));
    }
    let distinct: BTreeSet<&L> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(RetrievalError::Training(format!(
            "need at least 2 sectors, found {}",
            distinct.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(RetrievalError::Usage("embeddings differ in dimension".into()));
    }
    let mut adapter = Adapter::identity(dim);
    let mut adam = Adam::new(dim * dim, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
            let ls: Vec<L> = chunk.iter().map(|&i| labels[i].clone()).collect();
            match nt_xent_loss(&xs, &ls, &adapter, config.temperature) {
                Ok((loss, grad)) => {
                    if !loss.is_finite() {
                        return Err(RetrievalError::Training(format!("non-finite loss at epoch {epoch}")));
                    }
                    adam.step(&mut adapter.weights, &grad);
                    total += loss;
                    batches += 1;
                }
                Err(_) => skipped += 1,
            }
        }
        let loss = if batches > 0 { total / batches as f64 } else { 0.0 };
        log::debug!("adapter epoch {epoch}: loss {loss:.6} over {batches} batch(es), {skipped} skipped");
        log.push(AdapterEpoch {
            epoch,
            loss,
            batches,
            skipped,
        });
    }
    Ok((adapter, log))
}

/// Mean same-label cosine minus mean cross-label cosine over all pairs.
pub fn sector_gap<L: PartialEq>(vectors: &[Vec<f64>], labels: &[L]) -> f64 {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    intra / n_intra.max(1) as f64 - inter / n_inter.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub article_id: String,
    /// Best cosine over the queries that selected this article.
    pub score: f64,
    pub query: usize,
    pub rank: usize,
}

/// Union of per-query top-`n` lists.
///
/// Each query ranks the pool by cosine descending, ties by ascending
/// `article_id`. Articles selected by several queries keep their best entry.
/// The result is ordered by score descending, then `article_id`.
pub fn retrieve_top_n(queries: &[Vec<f64>], pool: &[(String, Vec<f64>)], n: usize) -> Vec<Retrieved> {
    if n == 0 || pool.is_empty() {
        return Vec::new();
    }
    let mut best: BTreeMap<&str, Retrieved> = BTreeMap::new();
    for (q, query) in queries.iter().enumerate() {
        let mut scored: Vec<(f64, &str)> = pool
            .iter()
            .map(|(id, v)| (cosine(query, v), id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for (rank, (score, id)) in scored.into_iter().take(n).enumerate() {
            let entry = Retrieved {
                article_id: id.to_string(),
                score,
                query: q,
                rank,
            };
            best.entry(id)
                .and_modify(|cur| {
                    if score > cur.score {
                        *cur = entry.clone();
                    }
                })
                .or_insert(entry);
        }
    }
    let mut out: Vec<Retrieved> = best.into_values().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.article_id.cmp(&b.article_id)));
    out
}

/// Adapter-transformed embeddings of the profile's non-empty components.
pub fn profile_queries(
    profile: &CompanyProfile,
    provider: &dyn EmbeddingProvider,
    model_id: &str,
    adapter: &Adapter,
) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let texts: Vec<String> = profile.non_empty().map(|(_, t)| t.to_string()).collect();
    Ok(embed(&texts, provider, model_id)?
        .iter()
        .map(|v| adapter.apply(v))
        .collect())
}

/// Fraction of days whose retrieved set contains at least one target article.
pub fn hit_rate<'a>(
    days: impl IntoIterator<Item = (&'a [String], &'a BTreeSet<String>)>,
) -> Result<f64, RetrievalError> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (retrieved, targets) in days {
        total += 1;
        if retrieved.iter().any(|id| targets.contains(id)) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(RetrievalError::Usage("hit rate over zero evaluated days".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_log_two() {
        let x = vec![vec![0.6, 0.8]; 3];
        let (loss, _) = nt_xent_loss(&x, &["a", "a", "b"], &Adapter::identity(2), 0.5).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_set_cosines() {
        // u_i·u_p = 0.9, u_i·u_n = 0.1, u_p·u_n = 0.1 in three dimensions.
        let i = vec![1.0, 0.0, 0.0];
        let p = vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0];
        let n1 = 0.1;
        let n2 = (0.1 - 0.9 * 0.1) / p[1];
        let n = vec![n1, n2, (1.0 - n1 * n1 - n2 * n2).sqrt()];
        let (loss, _) = nt_xent_loss(&[i, p, n], &[0, 0, 1], &Adapter::identity(3), 1.0).unwrap();
        let want = -(0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp())).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.3711).abs() < 1e-4);
    }

    #[test]
    fn skip_conditions() {
        let a = Adapter::identity(2);
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(nt_xent_loss(&x[..1], &[0], &a, 0.1).unwrap_err(), BatchSkip::TooSmall);
        assert_eq!(nt_xent_loss(&x, &[0, 0], &a, 0.1).unwrap_err(), BatchSkip::OneSector);
        assert_eq!(nt_xent_loss(&x, &[0, 1], &a, 0.1).unwrap_err(), BatchSkip::NoAnchors);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = ContrastiveConfig {
            epochs: 0,
            ..Default::default()
        };
        let (adapter, log) = train_adapter(&x, &[0, 1], &cfg).unwrap();
        assert_eq!(adapter, Adapter::identity(2));
        assert!(log.is_empty());
    }

    #[test]
    fn one_sector_is_a_training_error() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = train_adapter(&x, &[3, 3], &ContrastiveConfig::default());
        assert!(matches!(r, Err(RetrievalError::Training(_))));
    }

    #[test]
    fn definition_case_and_zero_n() {
        let pool = vec![
            ("c".to_string(), vec![0.1, (1.0f64 - 0.01).sqrt()]),
            ("a".to_string(), vec![0.9, (1.0f64 - 0.81).sqrt()]),
            ("b".to_string(), vec![0.5, (1.0f64 - 0.25).sqrt()]),
        ];
        let q = vec![vec![1.0, 0.0]];
        let ids: Vec<String> = retrieve_top_n(&q, &pool, 2).into_iter().map(|r| r.article_id).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(retrieve_top_n(&q, &pool, 0).is_empty());
    }

    #[test]
    fn ties_break_by_article_id() {
        let pool = vec![
            ("z".to_string(), vec![1.0, 0.0]),
            ("m".to_string(), vec![1.0, 0.0]),
            ("a".to_string(), vec![0.0, 1.0]),
        ];
        let ids: Vec<String> = retrieve_top_n(&[vec![1.0, 0.0]], &pool, 1)
            .into_iter()
            .map(|r| r.article_id)
            .collect();
        assert_eq!(ids, ["m"]);
    }

    #[test]
    fn adapter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let a = Adapter::from_weights(2, vec![1.0, -2.5, 0.25, 3.0]).unwrap();
        a.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 * 8);
        assert_eq!(Adapter::load(&path).unwrap(), a);
    }

    #[test]
    fn hit_rate_counts_days() {
        let t: BTreeSet<String> = ["x".to_string()].into();
        let hit = vec!["x".to_string()];
        let miss = vec!["y".to_string()];
        let days = [(hit.as_slice(), &t), (miss.as_slice(), &t), (hit.as_slice(), &t)];
        assert!((hit_rate(days).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let empty: Vec<String> = Vec::new();
        assert_eq!(hit_rate([(empty.as_slice(), &t)]).unwrap(), 0.0);
        assert!(hit_rate(std::iter::empty()).is_err());
    }
}
