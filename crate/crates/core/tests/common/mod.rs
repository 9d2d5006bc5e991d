//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use textseries::retrieval::Retrieved;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Full sort per query, then a per-article scan for the best (score, query)
/// pair. Earlier queries win exact score ties.
pub fn brute_force_top_n(queries: &[Vec<f64>], pool: &[(String, Vec<f64>)], n: usize) -> Vec<Retrieved> {
    let mut picked: BTreeMap<String, Retrieved> = BTreeMap::new();
    for (q, query) in queries.iter().enumerate() {
        let mut all: Vec<(String, f64)> = pool.iter().map(|(id, v)| (id.clone(), cos(query, v))).collect();
        all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
            std::cmp::Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        for (rank, (id, score)) in all.into_iter().enumerate() {
            if rank >= n {
                break;
            }
            let replace = match picked.get(&id) {
                None => true,
                Some(cur) => score > cur.score,
            };
            if replace {
                picked.insert(
                    id.clone(),
                    Retrieved {
                        article_id: id,
                        score,
                        query: q,
                        rank,
                    },
                );
            }
        }
    }
    let mut out: Vec<Retrieved> = picked.into_values().collect();
    out.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap() {
        std::cmp::Ordering::Equal => a.article_id.cmp(&b.article_id),
        o => o,
    });
    out
}

/// A random retrieval instance. Some pool vectors are exact copies of others
/// or of a query, so cosine ties are common.
pub fn retrieval_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<(String, Vec<f64>)>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=12);
    let n_queries = rng.random_range(1..=5);
    let n_pool = rng.random_range(1..=1000);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let queries: Vec<Vec<f64>> = (0..n_queries).map(|_| vec(&mut rng)).collect();
    let mut pool: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_pool);
    for i in 0..n_pool {
        let v = match rng.random_range(0..10) {
            0 if !pool.is_empty() => pool[rng.random_range(0..pool.len())].1.clone(),
            1 => queries[rng.random_range(0..queries.len())].clone(),
            2 => vec![0.0; dim],
            _ => vec(&mut rng),
        };
        // Ids are shuffled relative to insertion order.
        pool.push((format!("a{:05}", (i * 7919) % 100_000), v));
    }
    let n = rng.random_range(0..=25);
    (queries, pool, n)
}

/// `n_per` points around each of `k` random centers in `dim` dimensions,
/// with a shared offset so raw cosines are high across clusters too.
pub fn clustered_points(k: usize, n_per: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let offset: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per {
            points.push(
                offset
                    .iter()
                    .zip(center)
                    .map(|(o, m)| o + m + spread * normal(&mut rng))
                    .collect(),
            );
            labels.push(c);
        }
    }
    (points, labels)
}

/// Largest relative gap between `analytic` and central differences of
/// `loss` at `x`.
pub fn max_rel_error(x: &[f64], analytic: &[f64], eps: f64, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = loss(&probe);
        probe[i] = x[i] - eps;
        let down = loss(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}
