//! Demonstrations, queries, and the synthetic spherical-prototype task.
//!
//! Each class owns a random unit-vector prototype; items are noisy copies of
//! their class prototype, re-projected onto the unit sphere. Corpus,
//! training queries and test queries are generated independently, so the
//! three sets never share an item.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norm tolerance for features considered exactly unit length.
pub const UNIT_TOL: f64 = 1e-9;
/// Loaded features within this distance of unit norm are renormalized.
pub const RENORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: usize,
    pub features: Vec<f64>,
    #[serde(rename = "label")]
    pub gold_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub corpus_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub prototype_noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl TaskSpec {
    /// Desk-scale default: 50 demonstrations, 3 classes in 8 dimensions.
    pub fn toy() -> Self {
        Self {
            dim: 8,
            num_classes: 3,
            corpus_size: 50,
            n_train: 200,
            n_test: 100,
            prototype_noise: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototype_noise.is_nan() || self.prototype_noise < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "prototype noise must be >= 0, got {}",
                self.prototype_noise
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        if self.num_classes > self.corpus_size {
            return Err(Error::InvalidSpec(format!(
                "{} classes cannot be covered by a corpus of {}",
                self.num_classes, self.corpus_size
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidSpec("feature dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub prototypes: Vec<Vec<f64>>,
    pub corpus: Vec<Demonstration>,
    pub train: Vec<Query>,
    pub test: Vec<Query>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Bag-of-tokens rendering of a feature vector: a sign token per
/// coordinate plus a magnitude token for the large ones.
pub fn render_tokens(features: &[f64], label: Option<usize>) -> String {
    let mut toks = Vec::with_capacity(features.len() * 2 + 1);
    for (j, &v) in features.iter().enumerate() {
        let sign = if v >= 0.0 { 'p' } else { 'n' };
        toks.push(format!("d{j}{sign}"));
        if v.abs() > 0.35 {
            toks.push(format!("d{j}{sign}x"));
        }
    }
    if let Some(c) = label {
        toks.push(format!("y{c}"));
    }
    toks.join(" ")
}

/// Builds a synthetic task; a pure function of `spec`.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaussian = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    };

    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut p = gaussian(&mut rng, spec.dim);
            normalize(&mut p);
            p
        })
        .collect();

    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, usize)> {
        let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|c| {
                let f = if spec.prototype_noise == 0.0 {
                    prototypes[c].clone()
                } else {
                    let mut f: Vec<f64> = gaussian(rng, spec.dim)
                        .iter()
                        .zip(&prototypes[c])
                        .map(|(n, p)| p + spec.prototype_noise * n)
                        .collect();
                    normalize(&mut f);
                    f
                };
                (f, c)
            })
            .collect()
    };

    let corpus = draw(spec.corpus_size, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(id, (features, label))| Demonstration {
            text: Some(render_tokens(&features, Some(label))),
            id,
            features,
            label,
        })
        .collect();
    let mut next_id = spec.corpus_size;
    let mut queries = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Query> {
        draw(count, rng)
            .into_iter()
            .map(|(features, gold_label)| {
                let id = next_id;
                next_id += 1;
                Query {
                    text: Some(render_tokens(&features, None)),
                    id,
                    features,
                    gold_label,
                }
            })
            .collect()
    };
    let train = queries(spec.n_train, &mut rng);
    let test = queries(spec.n_test, &mut rng);
    Ok(Task {
        prototypes,
        corpus,
        train,
        test,
    })
}

/// Stable digest of a corpus, stored in checkpoints.
pub fn fingerprint(corpus: &[Demonstration]) -> String {
    let mut h = Sha256::new();
    for d in corpus {
        h.update(serde_json::to_vec(d).expect("demonstrations serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&mut T) -> std::result::Result<(), String>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let mut item: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        check(&mut item).map_err(parse_err)?;
        out.push(item);
    }
    Ok(out)
}

fn check_features(features: &mut [f64], dim: &mut Option<usize>) -> std::result::Result<(), String> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err("features must be finite".into());
    }
    match *dim {
        Some(d) if d != features.len() => {
            return Err(format!("feature dimension {} differs from {}", features.len(), d))
        }
        None => *dim = Some(features.len()),
        _ => {}
    }
    let n = norm(features);
    if (n - 1.0).abs() <= UNIT_TOL {
        Ok(())
    } else if (n - 1.0).abs() <= RENORM_TOL {
        normalize(features);
        Ok(())
    } else {
        Err(format!("feature norm {n} is not within {RENORM_TOL} of 1"))
    }
}

/// Loads and validates a demonstration corpus. Ids must be exactly `0..N`.
pub fn load_corpus(path: &Path) -> Result<Vec<Demonstration>> {
    let mut seen = HashSet::new();
    let mut dim = None;
    let mut demos = read_jsonl(path, |d: &mut Demonstration| {
        if !seen.insert(d.id) {
            return Err(format!("duplicate id {}", d.id));
        }
        check_features(&mut d.features, &mut dim)
    })?;
    demos.sort_by_key(|d| d.id);
    if let Some((pos, d)) = demos.iter().enumerate().find(|(i, d)| d.id != *i) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("ids must be dense 0..{}; missing id {pos} (found {})", demos.len(), d.id),
        });
    }
    if demos.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty corpus".into(),
        });
    }
    Ok(demos)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut dim = None;
    read_jsonl(path, |q: &mut Query| {
        if !seen.insert(q.id) {
            return Err(format!("duplicate id {}", q.id));
        }
        check_features(&mut q.features, &mut dim)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(sigma: f64) -> TaskSpec {
        TaskSpec {
            dim: 8,
            num_classes: 3,
            corpus_size: 50,
            n_train: 30,
            n_test: 20,
            prototype_noise: sigma,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_items_equal_their_prototype() {
        let task = generate_task(&spec(0.0)).unwrap();
        for d in &task.corpus {
            assert_eq!(d.features, task.prototypes[d.label]);
        }
        for q in task.train.iter().chain(&task.test) {
            assert_eq!(q.features, task.prototypes[q.gold_label]);
        }
    }

    #[test]
    fn nearest_prototype_recovers_every_label() {
        let s = TaskSpec {
            dim: 8,
            num_classes: 3,
            corpus_size: 50,
            ..spec(0.1)
        };
        let task = generate_task(&s).unwrap();
        for d in &task.corpus {
            let nearest = (0..s.num_classes)
                .max_by(|&a, &b| {
                    let da: f64 = task.prototypes[a].iter().zip(&d.features).map(|(x, y)| x * y).sum();
                    let db: f64 = task.prototypes[b].iter().zip(&d.features).map(|(x, y)| x * y).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, d.label);
        }
    }

    #[test]
    fn ids_are_dense_and_splits_disjoint() {
        let task = generate_task(&spec(0.1)).unwrap();
        let ids: Vec<usize> = task.corpus.iter().map(|d| d.id).collect();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        let q: HashSet<usize> = task.train.iter().chain(&task.test).map(|q| q.id).collect();
        assert_eq!(q.len(), 50);
        assert!(q.iter().all(|&id| id >= 50));
    }

    #[test]
    fn classes_are_balanced() {
        let task = generate_task(&spec(0.1)).unwrap();
        let mut counts = [0usize; 3];
        task.corpus.iter().for_each(|d| counts[d.label] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_task(&spec(-0.1)).is_err());
        let s = TaskSpec {
            num_classes: 60,
            ..spec(0.1)
        };
        assert!(generate_task(&s).is_err());
        let s = TaskSpec {
            num_classes: 1,
            ..spec(0.1)
        };
        assert!(generate_task(&s).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let task = generate_task(&spec(0.1)).unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_jsonl(&a, &task.corpus).unwrap();
        save_jsonl(&b, &generate_task(&spec(0.1)).unwrap().corpus).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_corpus(&a).unwrap(), task.corpus);

        let q = dir.path().join("q.jsonl");
        save_jsonl(&q, &task.test).unwrap();
        assert_eq!(load_queries(&q).unwrap(), task.test);
        let raw = std::fs::read_to_string(&q).unwrap();
        assert!(raw.lines().next().unwrap().contains("\"label\""));
    }

    #[test]
    fn slightly_off_unit_features_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":0,\"features\":[1.0005,0.0],\"label\":0}\n").unwrap();
        let c = load_corpus(&p).unwrap();
        assert!((norm(&c[0].features) - 1.0).abs() < UNIT_TOL);

        std::fs::write(&p, "{\"id\":0,\"features\":[1.01,0.0],\"label\":0}\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"id\":0,\"features\":[1.0,0.0],\"label\":0}\n{\"id\":0,\"features\":[0.0,1.0],\"label\":1}\n",
        )
        .unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn malformed_json_and_gaps_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":0,\"features\":[1.0,0.0],\"label\":0}\nnot json\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "{\"id\":1,\"features\":[1.0,0.0],\"label\":0}\n").unwrap();
        assert!(load_corpus(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generation_is_a_pure_function_of_the_spec(seed in any::<u64>(), sigma in 0.0f64..1.0) {
            let s = TaskSpec { seed, prototype_noise: sigma, ..spec(0.1) };
            let a = generate_task(&s).unwrap();
            let b = generate_task(&s).unwrap();
            prop_assert_eq!(&a, &b);
            for d in &a.corpus {
                prop_assert!((norm(&d.features) - 1.0).abs() < UNIT_TOL);
            }
        }
    }
}
