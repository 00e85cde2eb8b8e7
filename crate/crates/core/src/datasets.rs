//! Analogical-reasoning and two-hop corpora built from knowledge triples.
//!
//! Entities and relations are tokens of one orthonormal table. Attributes
//! (`b_i`, `c_i`) are class indices: `I(b_i) = i - 1`, `I(c_i) = N + i - 1`.
//! In the two-hop task `b_i` is also a prompt token, so it appears both as an
//! embedding and as a label.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::{sample_orthonormal_system, EmbeddingTable, SeededRng};
use crate::error::{Error, Result};
use crate::model::{LabeledExample, Prompt};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Analogical,
    TwoHop { bridge: bool },
}

/// A prompt `[entity, relation]` with its class label, by token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenExample {
    pub entity: usize,
    pub relation: usize,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus<T> {
    pub task: Task,
    pub n_entities: usize,
    pub embeddings: EmbeddingTable<T>,
    pub train_sets: BTreeMap<String, Vec<TokenExample>>,
    pub test_name: String,
    pub test_set: Vec<TokenExample>,
    pub label_map: BTreeMap<String, usize>,
}

impl<T: Scalar> Corpus<T> {
    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn train_set(&self, name: &str) -> Option<&[TokenExample]> {
        self.train_sets.get(name).map(Vec::as_slice)
    }

    pub fn materialize(&self, examples: &[TokenExample]) -> Vec<LabeledExample<T>> {
        examples
            .iter()
            .map(|e| {
                let prompt = Prompt::from_views(
                    self.embeddings.vector(e.entity),
                    self.embeddings.vector(e.relation),
                )
                .expect("tokens share the table dimension");
                LabeledExample::new(prompt, e.label)
            })
            .collect()
    }

    pub fn test_examples(&self) -> Vec<LabeledExample<T>> {
        self.materialize(&self.test_set)
    }

    /// Token pairs whose value-space images should align: `(a_i, a'_i)` for
    /// the analogical task, `(a_i, b_i)` for two-hop.
    pub fn similarity_pairs(&self) -> Vec<(usize, usize)> {
        let partner = match self.task {
            Task::Analogical => "a'",
            Task::TwoHop { .. } => "b",
        };
        (1..=self.n_entities)
            .map(|i| {
                let a = self.embeddings.id(&format!("a_{i}")).expect("a_i present");
                let b = self.embeddings.id(&format!("{partner}_{i}")).expect("partner present");
                (a, b)
            })
            .collect()
    }

    /// Entity-like tokens whose value images are tracked by diagnostics.
    pub fn entity_tokens(&self) -> Vec<usize> {
        self.similarity_pairs().into_iter().flat_map(|(a, b)| [a, b]).collect()
    }

    pub fn dump_json(&self) -> Result<String> {
        let name = |id: usize| self.embeddings.name(id).to_owned();
        let render = |list: &[TokenExample]| -> Vec<ExampleDump> {
            list.iter()
                .map(|e| ExampleDump { entity: name(e.entity), relation: name(e.relation), label: e.label })
                .collect()
        };
        let dump = CorpusDump {
            task: self.task,
            n_entities: self.n_entities,
            dim: self.dim(),
            tokens: self.embeddings.names().to_vec(),
            label_map: self.label_map.clone(),
            train_sets: self.train_sets.iter().map(|(k, v)| (k.clone(), render(v))).collect(),
            test_set: TestDump { name: self.test_name.clone(), examples: render(&self.test_set) },
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ExampleDump {
    entity: String,
    relation: String,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct TestDump {
    name: String,
    examples: Vec<ExampleDump>,
}

#[derive(Serialize, Deserialize)]
struct CorpusDump {
    task: Task,
    n_entities: usize,
    dim: usize,
    tokens: Vec<String>,
    label_map: BTreeMap<String, usize>,
    train_sets: BTreeMap<String, Vec<ExampleDump>>,
    test_set: TestDump,
}

fn label_map(n: usize) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for i in 1..=n {
        map.insert(format!("b_{i}"), i - 1);
        map.insert(format!("c_{i}"), n + i - 1);
    }
    map
}

fn check_capacity(n: usize, tokens: usize, dim: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Parameter { name: "N", reason: "need at least one entity tuple".into() });
    }
    let needed = tokens.max(2 * n);
    if needed > dim {
        return Err(Error::Capacity { needed, dim });
    }
    Ok(())
}

/// Similarity premises S1, S2, attribution premise S3 and the conclusion
/// test set A.
pub fn build_analogical<T: Scalar>(n: usize, dim: usize, rng: &mut SeededRng) -> Result<Corpus<T>> {
    check_capacity(n, 2 * n + 2, dim)?;
    let mut names: Vec<String> = (1..=n).map(|i| format!("a_{i}")).collect();
    names.extend((1..=n).map(|i| format!("a'_{i}")));
    names.push("r_1".into());
    names.push("r_2".into());
    let table = sample_orthonormal_system::<T>(names.len(), dim, rng)?.with_names(&names)?;
    let a = |i: usize| i;
    let ap = |i: usize| n + i;
    let (r1, r2) = (2 * n, 2 * n + 1);
    let ex = |entity, relation, label| TokenExample { entity, relation, label };

    let s1 = (0..n).map(|i| ex(a(i), r1, i)).collect();
    let s2 = (0..n).map(|i| ex(ap(i), r1, i)).collect();
    let s3 = (0..n).map(|i| ex(ap(i), r2, n + i)).collect();
    let test = (0..n).map(|i| ex(a(i), r2, n + i)).collect();

    let mut train_sets = BTreeMap::new();
    train_sets.insert("S1".to_owned(), s1);
    train_sets.insert("S2".to_owned(), s2);
    train_sets.insert("S3".to_owned(), s3);
    Ok(Corpus {
        task: Task::Analogical,
        n_entities: n,
        embeddings: table,
        train_sets,
        test_name: "A".into(),
        test_set: test,
        label_map: label_map(n),
    })
}

/// First-hop H1, second-hop H2, optional identity bridges IB and the
/// composition test set R.
pub fn build_two_hop<T: Scalar>(
    n: usize,
    dim: usize,
    include_bridge: bool,
    rng: &mut SeededRng,
) -> Result<Corpus<T>> {
    check_capacity(n, 2 * n + 3, dim)?;
    let mut names: Vec<String> = (1..=n).map(|i| format!("a_{i}")).collect();
    names.extend((1..=n).map(|i| format!("b_{i}")));
    names.extend(["r_1", "r_2", "r_3"].map(String::from));
    let table = sample_orthonormal_system::<T>(names.len(), dim, rng)?.with_names(&names)?;
    let a = |i: usize| i;
    let b = |i: usize| n + i;
    let (r1, r2, r3) = (2 * n, 2 * n + 1, 2 * n + 2);
    let ex = |entity, relation, label| TokenExample { entity, relation, label };

    let mut train_sets = BTreeMap::new();
    train_sets.insert("H1".to_owned(), (0..n).map(|i| ex(a(i), r1, i)).collect());
    train_sets.insert("H2".to_owned(), (0..n).map(|i| ex(b(i), r2, n + i)).collect());
    if include_bridge {
        train_sets.insert("IB".to_owned(), (0..n).map(|i| ex(b(i), r3, i)).collect());
    }
    Ok(Corpus {
        task: Task::TwoHop { bridge: include_bridge },
        n_entities: n,
        embeddings: table,
        train_sets,
        test_name: "R".into(),
        test_set: (0..n).map(|i| ex(a(i), r2, n + i)).collect(),
        label_map: label_map(n),
    })
}

/// Named training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// kappa copies of (S1 u S2), plus S3
    JointAnalogical,
    Phase1S1S2,
    Phase2S3,
    Phase1S1S3,
    Phase2S2,
    /// kappa copies of (H1 u IB), plus H2
    JointTwohopBridge,
    /// H1 u H2
    JointTwohopNobridge,
}

impl Recipe {
    pub const ALL: [Recipe; 7] = [
        Recipe::JointAnalogical,
        Recipe::Phase1S1S2,
        Recipe::Phase2S3,
        Recipe::Phase1S1S3,
        Recipe::Phase2S2,
        Recipe::JointTwohopBridge,
        Recipe::JointTwohopNobridge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::JointAnalogical => "joint_analogical",
            Recipe::Phase1S1S2 => "phase1_S1S2",
            Recipe::Phase2S3 => "phase2_S3",
            Recipe::Phase1S1S3 => "phase1_S1S3",
            Recipe::Phase2S2 => "phase2_S2",
            Recipe::JointTwohopBridge => "joint_twohop_bridge",
            Recipe::JointTwohopNobridge => "joint_twohop_nobridge",
        }
    }

    /// (set name, replicated by kappa?)
    fn parts(self) -> &'static [(&'static str, bool)] {
        match self {
            Recipe::JointAnalogical => &[("S1", true), ("S2", true), ("S3", false)],
            Recipe::Phase1S1S2 => &[("S1", false), ("S2", false)],
            Recipe::Phase2S3 => &[("S3", false)],
            Recipe::Phase1S1S3 => &[("S1", false), ("S3", false)],
            Recipe::Phase2S2 => &[("S2", false)],
            Recipe::JointTwohopBridge => &[("H1", true), ("IB", true), ("H2", false)],
            Recipe::JointTwohopNobridge => &[("H1", false), ("H2", false)],
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Recipe { recipe: s.to_owned(), reason: "unknown recipe".into() })
    }
}

/// Example lists with multiplicities; the effective size is
/// `sum multiplicity * len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMultiset<T> {
    pub components: Vec<(Vec<LabeledExample<T>>, usize)>,
}

impl<T: Scalar> TrainMultiset<T> {
    pub fn new(components: Vec<(Vec<LabeledExample<T>>, usize)>) -> Result<Self> {
        if components.iter().any(|(_, k)| *k == 0) {
            return Err(Error::Parameter { name: "multiplicity", reason: "must be at least 1".into() });
        }
        Ok(Self { components })
    }

    pub fn effective_size(&self) -> usize {
        self.components.iter().map(|(list, k)| list.len() * k).sum()
    }

    pub fn distinct_len(&self) -> usize {
        self.components.iter().map(|(list, _)| list.len()).sum()
    }

    /// Each distinct example with its multiplicity.
    pub fn iter_weighted(&self) -> impl Iterator<Item = (&LabeledExample<T>, usize)> {
        self.components.iter().flat_map(|(list, k)| list.iter().map(move |e| (e, *k)))
    }
}

pub fn assemble_train<T: Scalar>(corpus: &Corpus<T>, recipe: Recipe, kappa: usize) -> Result<TrainMultiset<T>> {
    if kappa == 0 {
        return Err(Error::Parameter { name: "kappa", reason: "must be at least 1".into() });
    }
    let mut components = Vec::new();
    for &(set, replicated) in recipe.parts() {
        let list = corpus.train_set(set).ok_or_else(|| Error::Recipe {
            recipe: recipe.name().to_owned(),
            reason: format!("corpus has no `{set}` set"),
        })?;
        components.push((corpus.materialize(list), if replicated { kappa } else { 1 }));
    }
    TrainMultiset::new(components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::seeded_rng;
    use std::collections::HashSet;

    #[test]
    fn small_analogical_counts() {
        let c = build_analogical::<f64>(2, 8, &mut seeded_rng(1)).unwrap();
        assert_eq!(c.embeddings.len(), 6);
        for s in ["S1", "S2", "S3"] {
            assert_eq!(c.train_set(s).unwrap().len(), 2);
        }
        assert_eq!(c.test_set.len(), 2);
        let labels: HashSet<usize> = c.label_map.values().copied().collect();
        assert_eq!(labels, HashSet::from([0, 1, 2, 3]));
    }

    #[test]
    fn appendix_scale_analogical() {
        let c = build_analogical::<f64>(100, 427, &mut seeded_rng(1)).unwrap();
        assert_eq!(c.embeddings.len(), 202);
        assert_eq!(c.label_map.len(), 200);
        assert!(c.embeddings.orthonormality_defect() < 1e-12);
    }

    #[test]
    fn capacity_error() {
        assert!(matches!(
            build_analogical::<f64>(100, 150, &mut seeded_rng(1)),
            Err(Error::Capacity { .. })
        ));
        assert!(build_two_hop::<f64>(3, 8, true, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn two_hop_bridge_flag() {
        let c = build_two_hop::<f64>(2, 8, true, &mut seeded_rng(2)).unwrap();
        let ib = c.train_set("IB").unwrap();
        assert_eq!(ib.len(), 2);
        for (i, e) in ib.iter().enumerate() {
            assert_eq!(c.embeddings.name(e.entity), format!("b_{}", i + 1));
            assert_eq!(c.embeddings.name(e.relation), "r_3");
            assert_eq!(e.label, c.label_map[&format!("b_{}", i + 1)]);
        }
        let c = build_two_hop::<f64>(2, 8, false, &mut seeded_rng(2)).unwrap();
        assert!(c.train_set("IB").is_none());
        assert!(matches!(
            assemble_train(&c, Recipe::JointTwohopBridge, 1),
            Err(Error::Recipe { .. })
        ));
    }

    #[test]
    fn multiset_sizes() {
        let c = build_analogical::<f64>(100, 427, &mut seeded_rng(3)).unwrap();
        assert_eq!(assemble_train(&c, Recipe::JointAnalogical, 3).unwrap().effective_size(), 700);
        assert_eq!(assemble_train(&c, Recipe::Phase1S1S2, 3).unwrap().effective_size(), 200);
        let h = build_two_hop::<f64>(100, 427, true, &mut seeded_rng(3)).unwrap();
        assert_eq!(assemble_train(&h, Recipe::JointTwohopBridge, 1).unwrap().effective_size(), 300);
        assert_eq!(assemble_train(&h, Recipe::JointTwohopNobridge, 5).unwrap().effective_size(), 200);
    }

    #[test]
    fn test_prompts_never_trained() {
        for corpus in [
            build_analogical::<f64>(5, 16, &mut seeded_rng(4)).unwrap(),
            build_two_hop::<f64>(5, 16, true, &mut seeded_rng(4)).unwrap(),
        ] {
            let train: HashSet<(usize, usize)> = corpus
                .train_sets
                .values()
                .flatten()
                .map(|e| (e.entity, e.relation))
                .collect();
            for e in &corpus.test_set {
                assert!(!train.contains(&(e.entity, e.relation)));
            }
            // relation token always last and drawn from the table
            for e in corpus.train_sets.values().flatten().chain(&corpus.test_set) {
                assert!(corpus.embeddings.name(e.relation).starts_with("r_"));
                assert!(e.entity < corpus.embeddings.len());
            }
        }
    }

    #[test]
    fn labels_biject_onto_range() {
        let c = build_analogical::<f64>(7, 20, &mut seeded_rng(5)).unwrap();
        let mut labels: Vec<usize> = c.label_map.values().copied().collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn recipe_names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!("bogus".parse::<Recipe>().is_err());
    }

    #[test]
    fn json_dump_has_named_sets() {
        let c = build_two_hop::<f64>(2, 8, true, &mut seeded_rng(6)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&c.dump_json().unwrap()).unwrap();
        assert_eq!(v["train_sets"]["IB"][0]["entity"], "b_1");
        assert_eq!(v["test_set"]["name"], "R");
        assert_eq!(v["label_map"]["c_2"], 3);
    }
}
