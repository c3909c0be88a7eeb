use serde::{Deserialize, Serialize};

use super::Backend;
use crate::corpus::{Demonstration, Query};
use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Recency decay applied per position back from the query.
    pub gamma: f64,
    /// Logit scale.
    pub alpha: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 4.0,
        }
    }
}

/// Deterministic stand-in language model.
///
/// Each demonstration votes for its own label with weight
/// `alpha * gamma^(distance from query) * cos(query, demo)`, so the last
/// demonstration carries the most weight. Embeddings are `[features ; onehot(label)]`
/// for demonstrations and `[features ; 0]` for queries.
#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: ToyConfig,
    num_classes: usize,
    feature_dim: usize,
    corpus: Vec<Demonstration>,
    demo_embeddings: Vec<Vec<f64>>,
}

impl ToyLm {
    pub fn new(corpus: Vec<Demonstration>, num_classes: usize, cfg: ToyConfig) -> Result<Self> {
        if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", cfg.gamma)));
        }
        if cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", cfg.alpha)));
        }
        let feature_dim = corpus.first().map_or(0, |d| d.features.len());
        for (i, d) in corpus.iter().enumerate() {
            if d.id != i {
                return Err(Error::InvalidId { id: d.id, size: corpus.len() });
            }
            if d.label >= num_classes {
                return Err(Error::InvalidSpec(format!(
                    "demonstration {} has label {} but only {num_classes} classes",
                    d.id, d.label
                )));
            }
            if d.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "demonstration features",
                    expected: feature_dim,
                    got: d.features.len(),
                });
            }
        }
        let mut lm = Self {
            cfg,
            num_classes,
            feature_dim,
            corpus,
            demo_embeddings: Vec::new(),
        };
        lm.demo_embeddings = lm.corpus.iter().map(|d| lm.embed_demo(d)).collect();
        Ok(lm)
    }

    pub fn config(&self) -> ToyConfig {
        self.cfg
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for (j, &id) in ids.iter().enumerate() {
            if id >= self.corpus.len() {
                return Err(Error::InvalidId { id, size: self.corpus.len() });
            }
            if ids[..j].contains(&id) {
                return Err(Error::RepeatedId(id));
            }
        }
        Ok(())
    }

    fn check_query(&self, query: &Query) -> Result<()> {
        if query.features.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "query features",
                expected: self.feature_dim,
                got: query.features.len(),
            });
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

impl Backend for ToyLm {
    fn dim(&self) -> usize {
        self.feature_dim + self.num_classes
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn corpus(&self) -> &[Demonstration] {
        &self.corpus
    }

    fn embed_demo(&self, demo: &Demonstration) -> Vec<f64> {
        let mut e = demo.features.clone();
        e.resize(self.feature_dim + self.num_classes, 0.0);
        e[self.feature_dim + demo.label] = 1.0;
        e
    }

    fn embed_query(&self, query: &Query) -> Vec<f64> {
        let mut e = query.features.clone();
        e.resize(self.feature_dim + self.num_classes, 0.0);
        e
    }

    fn pool(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        self.check_ids(ids)?;
        let mut h = self.embed_query(query);
        for &id in ids {
            for (a, b) in h.iter_mut().zip(&self.demo_embeddings[id]) {
                *a += b;
            }
        }
        let n = (ids.len() + 1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        Ok(h)
    }

    fn score(&self, query: &Query, ids: &[usize]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        self.check_ids(ids)?;
        let mut logits = vec![0.0; self.num_classes];
        let mut weight = self.cfg.alpha;
        for &id in ids.iter().rev() {
            let d = &self.corpus[id];
            logits[d.label] += weight * cosine(&query.features, &d.features);
            weight *= self.cfg.gamma;
        }
        log_softmax(&logits, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(id: usize, features: Vec<f64>, label: usize) -> Demonstration {
        Demonstration { id, features, label, text: None }
    }

    fn query(features: Vec<f64>, gold: usize) -> Query {
        Query { id: 100, features, gold_label: gold, text: None }
    }

    fn log_sum_exp(v: &[f64]) -> f64 {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn embeddings_append_label_onehot() {
        let lm = ToyLm::new(
            vec![demo(0, vec![1.0, 0.0], 1), demo(1, vec![1.0, 0.0], 0)],
            2,
            ToyConfig::default(),
        )
        .unwrap();
        assert_eq!(lm.embed_demo(&lm.corpus()[0]), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(lm.embed_query(&query(vec![0.0, 1.0], 0)), vec![0.0, 1.0, 0.0, 0.0]);
        let (a, b) = (lm.embed_demo(&lm.corpus()[0]), lm.embed_demo(&lm.corpus()[1]));
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2..], b[2..]);
    }

    #[test]
    fn pooling_is_the_mean_of_embeddings() {
        let lm = ToyLm::new(
            vec![demo(0, vec![0.0, 1.0], 1), demo(1, vec![1.0, 0.0], 0)],
            2,
            ToyConfig::default(),
        )
        .unwrap();
        let q = query(vec![1.0, 0.0], 0);
        assert_eq!(lm.pool(&q, &[]).unwrap(), lm.embed_query(&q));
        assert_eq!(lm.pool(&q, &[0]).unwrap(), vec![0.5, 0.5, 0.0, 0.5]);
        assert!(matches!(lm.pool(&q, &[7]), Err(Error::InvalidId { id: 7, .. })));
    }

    #[test]
    fn pooling_keeps_a_shared_feature_block() {
        let lm = ToyLm::new(vec![demo(0, vec![0.6, 0.8], 0)], 2, ToyConfig::default()).unwrap();
        let q = query(vec![0.6, 0.8], 0);
        let h = lm.pool(&q, &[0]).unwrap();
        assert_eq!(h[..2], [0.6, 0.8]);
        assert_eq!(h[2..], [0.5, 0.0]);
    }

    #[test]
    fn empty_context_is_uniform() {
        let lm = ToyLm::new(vec![demo(0, vec![1.0, 0.0], 0)], 3, ToyConfig::default()).unwrap();
        let s = lm.score(&query(vec![1.0, 0.0], 0), &[]).unwrap();
        for v in s {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn order_changes_the_gold_probability() {
        let lm = ToyLm::new(
            vec![demo(0, vec![1.0, 0.0], 0), demo(1, vec![0.0, 1.0], 1)],
            3,
            ToyConfig::default(),
        )
        .unwrap();
        let q = query(vec![1.0, 0.0], 0);
        let ab = lm.gold_logprob(&q, &[0, 1]).unwrap().exp();
        let ba = lm.gold_logprob(&q, &[1, 0]).unwrap().exp();
        let e2 = 2f64.exp();
        let e4 = 4f64.exp();
        assert!((ab - e2 / (e2 + 2.0)).abs() < 1e-12);
        assert!((ba - e4 / (e4 + 2.0)).abs() < 1e-12);
        assert!((ab - 0.7870).abs() < 1e-4 && (ba - 0.9647).abs() < 1e-4);
    }

    #[test]
    fn same_label_same_similarity_is_order_free() {
        let lm = ToyLm::new(
            vec![
                demo(0, vec![0.6, 0.8], 1),
                demo(1, vec![0.6, -0.8], 1),
                demo(2, vec![0.6, 0.8], 1),
            ],
            2,
            ToyConfig::default(),
        )
        .unwrap();
        let q = query(vec![1.0, 0.0], 0);
        let a = lm.score(&q, &[0, 1, 2]).unwrap();
        let b = lm.score(&q, &[2, 0, 1]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_ids_are_rejected() {
        let lm = ToyLm::new(vec![demo(0, vec![1.0], 0), demo(1, vec![1.0], 1)], 2, ToyConfig::default())
            .unwrap();
        assert!(matches!(lm.score(&query(vec![1.0], 0), &[1, 1]), Err(Error::RepeatedId(1))));
    }

    #[test]
    fn constructor_validates_labels_and_config() {
        assert!(ToyLm::new(vec![demo(0, vec![1.0], 3)], 2, ToyConfig::default()).is_err());
        let bad = ToyConfig { gamma: 1.0, alpha: 4.0 };
        assert!(ToyLm::new(vec![demo(0, vec![1.0], 0)], 2, bad).is_err());
    }

    proptest! {
        #[test]
        fn scores_are_log_distributions(
            feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 6),
            labels in prop::collection::vec(0usize..4, 6),
            q in prop::collection::vec(-1.0f64..1.0, 3),
            perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
            t in 0usize..=6,
        ) {
            let corpus = feats.into_iter().zip(labels).enumerate()
                .map(|(i, (f, l))| demo(i, f, l)).collect();
            let lm = ToyLm::new(corpus, 4, ToyConfig::default()).unwrap();
            let s = lm.score(&query(q, 0), &perm[..t]).unwrap();
            prop_assert!(s.iter().all(|v| v.is_finite()));
            prop_assert!(log_sum_exp(&s).abs() < 1e-9);
        }
    }
}
