//! Synthetic multi-domain 3-class sequence task.
//!
//! Every sequence contains markers of two types, `A` and `B`. Each marker is
//! drawn either from a pool shared by all domains or from the domain's own
//! synonyms. The remaining positions hold filler words: shared ones, common
//! domain-private ones, and a long tail of rare domain-private words that a
//! frequency-cut vocabulary leaves unknown. A sequence's rule class is
//!
//! * `0` when the first marker is an `A` and the number of `A` markers is odd,
//! * `1` when the first marker is an `A` and the number of `A` markers is even,
//! * `2` when the first marker is a `B`,
//!
//! and its label is `label_map[rule class]`. Labels are thus a deterministic
//! function of the tokens.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_jsonl, DomainSplits, Example, LabelSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    /// Largest number of `A` markers in a sequence (at least 2).
    pub max_a: usize,
    /// Largest number of `B` markers in a sequence (at least 1).
    pub max_b: usize,
    /// Rule class → label index.
    pub label_map: [usize; 3],
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            max_a: 3,
            max_b: 2,
            label_map: [0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Domain-private marker synonyms.
    pub markers_a: Vec<String>,
    pub markers_b: Vec<String>,
    pub shared_markers_a: Vec<String>,
    pub shared_markers_b: Vec<String>,
    /// Probability that an `A` / `B` marker position uses a private synonym.
    pub private_marker_prob: [f64; 2],
    pub private_fillers: Vec<String>,
    pub shared_fillers: Vec<String>,
    /// Probability that a filler position draws from the shared block.
    pub shared_prob: f64,
    /// Rare domain-private fillers.
    pub tail_fillers: Vec<String>,
    /// Probability that a filler position draws from the tail.
    pub tail_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: LabelRule,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn private_vocab(&self) -> HashSet<&str> {
        self.markers_a
            .iter()
            .chain(&self.markers_b)
            .chain(&self.private_fillers)
            .chain(&self.tail_fillers)
            .map(String::as_str)
            .collect()
    }

    fn shared_vocab(&self) -> impl Iterator<Item = &String> {
        self.shared_markers_a
            .iter()
            .chain(&self.shared_markers_b)
            .chain(&self.shared_fillers)
    }

    /// Whether `token` is an `A` marker, a `B` marker, or neither.
    pub fn marker_type(&self, token: &str) -> Option<bool> {
        let has = |v: &[String]| v.iter().any(|t| t == token);
        if has(&self.markers_a) || has(&self.shared_markers_a) {
            Some(true)
        } else if has(&self.markers_b) || has(&self.shared_markers_b) {
            Some(false)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "domain `{}`: {m}",
                self.name
            )))
        };
        let pool_ok = |private: &[String], shared: &[String], p: f64| match p {
            p if p <= 0.0 => !shared.is_empty(),
            p if p >= 1.0 => !private.is_empty(),
            _ => !shared.is_empty() && !private.is_empty(),
        };
        let [pa, pb] = self.private_marker_prob;
        if !pool_ok(&self.markers_a, &self.shared_markers_a, pa)
            || !pool_ok(&self.markers_b, &self.shared_markers_b, pb)
        {
            return bad("marker pools are empty for the configured private_marker_prob".into());
        }
        if self.private_fillers.is_empty()
            && self.shared_fillers.is_empty()
            && self.tail_fillers.is_empty()
        {
            return bad("no filler tokens".into());
        }
        if self.rule.max_a < 2 || self.rule.max_b < 1 {
            return bad("rule needs max_a >= 2 and max_b >= 1".into());
        }
        if self.min_len < self.rule.max_a + self.rule.max_b || self.max_len < self.min_len {
            return bad(format!(
                "length range {}..={} cannot hold {} markers",
                self.min_len,
                self.max_len,
                self.rule.max_a + self.rule.max_b
            ));
        }
        for (what, p) in [
            ("shared_prob", self.shared_prob),
            ("tail_prob", self.tail_prob),
            ("private_marker_prob[0]", self.private_marker_prob[0]),
            ("private_marker_prob[1]", self.private_marker_prob[1]),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{what} outside [0, 1]"));
            }
        }
        let mut labels = self.rule.label_map.to_vec();
        labels.sort_unstable();
        if labels != [0, 1, 2] {
            return bad("label_map must be a permutation of 0, 1, 2".into());
        }
        let private = self.private_vocab();
        let n_private = self.markers_a.len()
            + self.markers_b.len()
            + self.private_fillers.len()
            + self.tail_fillers.len();
        if private.len() != n_private {
            return bad("private token lists overlap".into());
        }
        let shared: HashSet<&String> = self.shared_vocab().collect();
        if shared.len() != self.shared_vocab().count() {
            return bad("shared token lists overlap".into());
        }
        if shared.iter().any(|t| private.contains(t.as_str())) {
            return bad("shared and private blocks overlap".into());
        }
        Ok(())
    }

    fn sample_sequence(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let rule = &self.rule;
        let a = match class {
            0 => {
                let odds: Vec<usize> = (1..=rule.max_a).filter(|n| n % 2 == 1).collect();
                *odds.choose(rng).expect("max_a >= 1")
            }
            1 => {
                let evens: Vec<usize> = (2..=rule.max_a).filter(|n| n % 2 == 0).collect();
                *evens.choose(rng).expect("max_a >= 2")
            }
            _ => rng.gen_range(1..=rule.max_a),
        };
        let b = rng.gen_range(1..=rule.max_b);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut positions = rand::seq::index::sample(rng, len, a + b).into_vec();
        positions.sort_unstable();

        let first_is_a = class != 2;
        let mut rest: Vec<bool> = Vec::with_capacity(a + b - 1);
        rest.extend(std::iter::repeat(true).take(if first_is_a { a - 1 } else { a }));
        rest.extend(std::iter::repeat(false).take(if first_is_a { b } else { b - 1 }));
        rest.shuffle(rng);
        let mut is_a = vec![first_is_a];
        is_a.extend(rest);

        let mut tokens: Vec<Option<String>> = vec![None; len];
        for (&p, &ta) in positions.iter().zip(&is_a) {
            let (private, shared, prob) = if ta {
                (
                    &self.markers_a,
                    &self.shared_markers_a,
                    self.private_marker_prob[0],
                )
            } else {
                (
                    &self.markers_b,
                    &self.shared_markers_b,
                    self.private_marker_prob[1],
                )
            };
            let pool = if rng.gen_bool(prob) { private } else { shared };
            tokens[p] = Some(pool.choose(rng).expect("validated marker pool").clone());
        }
        tokens
            .into_iter()
            .map(|t| t.unwrap_or_else(|| self.sample_filler(rng)))
            .collect()
    }

    fn sample_filler(&self, rng: &mut ChaCha8Rng) -> String {
        let pools = [
            &self.tail_fillers,
            &self.shared_fillers,
            &self.private_fillers,
        ];
        let weights = [
            self.tail_prob,
            (1.0 - self.tail_prob) * self.shared_prob,
            (1.0 - self.tail_prob) * (1.0 - self.shared_prob),
        ];
        let live: Vec<usize> = (0..3).filter(|&i| !pools[i].is_empty()).collect();
        let total: f64 = live.iter().map(|&i| weights[i]).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = *live.last().expect("validated filler pools");
        for &i in &live {
            if u < weights[i] {
                pick = i;
                break;
            }
            u -= weights[i];
        }
        pools[pick].choose(rng).expect("non-empty pool").clone()
    }

    fn generate(&self, labels: &LabelSet) -> Result<DomainSplits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 3;
                let mut tries = 0;
                let tokens = loop {
                    let t = self.sample_sequence(class, rng);
                    if seen.insert(t.clone()) {
                        break t;
                    }
                    tries += 1;
                    if tries > 10_000 {
                        return Err(Error::InvalidArgument(format!(
                            "domain `{}`: cannot draw {n} distinct sequences",
                            self.name
                        )));
                    }
                };
                out.push(Example {
                    tokens,
                    label: labels.name(self.rule.label_map[class]).to_string(),
                    domain: self.name.clone(),
                });
            }
            out.shuffle(rng);
            Ok(out)
        };
        Ok(DomainSplits {
            train: split(self.train, &mut rng)?,
            valid: split(self.valid, &mut rng)?,
            test: split(self.test, &mut rng)?,
        })
    }
}

/// Compact description of a family of domains; expands into [`DomainSpec`]s
/// with private tokens `<domain>_a<k>`, `<domain>_b<k>`, `<domain>_w<k>`,
/// rare tokens `<domain>_r<k>`, and shared tokens `a<k>`, `b<k>`, `w<k>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSuite {
    pub domains: Vec<String>,
    pub seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub markers_per_type: usize,
    pub shared_markers_per_type: usize,
    pub private_marker_prob: [f64; 2],
    pub private_fillers: usize,
    pub shared_fillers: usize,
    pub shared_prob: f64,
    pub tail_fillers: usize,
    pub tail_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: LabelRule,
}

impl Default for SynthSuite {
    fn default() -> Self {
        SynthSuite {
            domains: ["fic", "gov", "slate", "tel", "travel"]
                .map(String::from)
                .to_vec(),
            seed: 0,
            train: 2000,
            valid: 300,
            test: 500,
            markers_per_type: 1,
            shared_markers_per_type: 2,
            private_marker_prob: [0.4, 0.0],
            private_fillers: 0,
            shared_fillers: 12,
            shared_prob: 1.0,
            tail_fillers: 5000,
            tail_prob: 0.15,
            min_len: 6,
            max_len: 10,
            rule: LabelRule::default(),
        }
    }
}

impl SynthSuite {
    pub fn with_domains(n: usize) -> Self {
        let mut s = SynthSuite::default();
        s.domains.truncate(n);
        s
    }

    pub fn specs(&self) -> Vec<DomainSpec> {
        let names = |prefix: &str, n: usize| -> Vec<String> {
            (0..n).map(|k| format!("{prefix}{k}")).collect()
        };
        let shared = names("w", self.shared_fillers);
        let (shared_a, shared_b) = (
            names("a", self.shared_markers_per_type),
            names("b", self.shared_markers_per_type),
        );
        self.domains
            .iter()
            .enumerate()
            .map(|(i, name)| DomainSpec {
                name: name.clone(),
                markers_a: names(&format!("{name}_a"), self.markers_per_type),
                markers_b: names(&format!("{name}_b"), self.markers_per_type),
                shared_markers_a: shared_a.clone(),
                shared_markers_b: shared_b.clone(),
                private_marker_prob: self.private_marker_prob,
                private_fillers: names(&format!("{name}_w"), self.private_fillers),
                shared_fillers: shared.clone(),
                shared_prob: self.shared_prob,
                tail_fillers: names(&format!("{name}_r"), self.tail_fillers),
                tail_prob: self.tail_prob,
                min_len: self.min_len,
                max_len: self.max_len,
                rule: self.rule.clone(),
                train: self.train,
                valid: self.valid,
                test: self.test,
                seed: self
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(i as u64 + 1),
            })
            .collect()
    }
}

/// Generates every domain's splits. Private vocabularies must be pairwise disjoint.
pub fn gen_synthetic(specs: &[DomainSpec]) -> Result<BTreeMap<String, DomainSplits>> {
    let labels = LabelSet::default();
    let mut owners: BTreeMap<&str, &str> = BTreeMap::new();
    for s in specs {
        for t in s.private_vocab() {
            if let Some(other) = owners.insert(t, &s.name) {
                return Err(Error::InvalidArgument(format!(
                    "token `{t}` is private to both `{other}` and `{}`",
                    s.name
                )));
            }
        }
    }
    let mut out = BTreeMap::new();
    for s in specs {
        if out.insert(s.name.clone(), s.generate(&labels)?).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate domain `{}`",
                s.name
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub specs: Vec<DomainSpec>,
    pub files: Vec<String>,
}

/// Writes `<dir>/<domain>/{train,valid,test}.jsonl` and `<dir>/manifest.json`.
pub fn write_synthetic(specs: &[DomainSpec], dir: &Path) -> Result<SynthManifest> {
    let data = gen_synthetic(specs)?;
    let mut files = Vec::new();
    for (name, splits) in &data {
        for (split, examples) in [
            ("train", &splits.train),
            ("valid", &splits.valid),
            ("test", &splits.test),
        ] {
            let rel = format!("{name}/{split}.jsonl");
            write_jsonl(&dir.join(&rel), examples)?;
            files.push(rel);
        }
    }
    let manifest = SynthManifest {
        specs: specs.to_vec(),
        files,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
