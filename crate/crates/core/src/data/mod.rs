//! Datasets: JSONL loading, vocabulary, padding, and the synthetic
//! multi-domain generator.

mod synth;
mod vocab;

pub use synth::{gen_synthetic, write_synthetic, DomainSpec, LabelRule, SynthManifest, SynthSuite};
pub use vocab::{Vocab, VocabMode, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Class names of the 3-way task, in label-index order.
pub const DEFAULT_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet {
            names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Self {
        LabelSet { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: String,
    pub domain: String,
}

/// Token ids plus label index, ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub label: usize,
}

pub fn encode_examples(
    examples: &[Example],
    vocab: &Vocab,
    labels: &LabelSet,
) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|e| {
            let label = labels
                .index(&e.label)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown label `{}`", e.label)))?;
            Ok(Encoded {
                ids: vocab.lookup(&e.tokens),
                label,
            })
        })
        .collect()
}

/// Tokens occurring at least `min_count` times, in first-occurrence order.
pub fn frequent_tokens(examples: &[Example], min_count: usize) -> Vec<String> {
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut order = Vec::new();
    for t in examples.iter().flat_map(|e| &e.tokens) {
        let c = counts.entry(t.as_str()).or_insert(0);
        if *c == 0 {
            order.push(t.as_str());
        }
        *c += 1;
    }
    order
        .into_iter()
        .filter(|t| counts[t] >= min_count)
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainSplits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Access to per-domain splits. Implementations may load lazily.
pub trait DomainSource {
    fn train(&self, domain: &str) -> Result<Vec<Example>>;
    fn valid(&self, domain: &str) -> Result<Vec<Example>>;
    fn test(&self, domain: &str) -> Result<Vec<Example>>;
}

impl DomainSource for BTreeMap<String, DomainSplits> {
    fn train(&self, domain: &str) -> Result<Vec<Example>> {
        Ok(self
            .get(domain)
            .ok_or_else(|| missing(domain))?
            .train
            .clone())
    }

    fn valid(&self, domain: &str) -> Result<Vec<Example>> {
        Ok(self
            .get(domain)
            .ok_or_else(|| missing(domain))?
            .valid
            .clone())
    }

    fn test(&self, domain: &str) -> Result<Vec<Example>> {
        Ok(self
            .get(domain)
            .ok_or_else(|| missing(domain))?
            .test
            .clone())
    }
}

fn missing(domain: &str) -> Error {
    Error::InvalidArgument(format!("no dataset for domain `{domain}`"))
}

/// `<root>/<domain>/{train,valid,test}.jsonl`
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub labels: LabelSet,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir {
            root: root.into(),
            labels: LabelSet::default(),
        }
    }

    pub fn split_path(&self, domain: &str, split: &str) -> PathBuf {
        self.root.join(domain).join(format!("{split}.jsonl"))
    }

    fn load(&self, domain: &str, split: &str) -> Result<Vec<Example>> {
        let path = self.split_path(domain, split);
        if !path.exists() {
            return Err(missing(domain));
        }
        let mut scratch = Vocab::new();
        load_jsonl(&path, &self.labels, &mut scratch, VocabMode::Frozen)
    }

    /// Domain directories that contain a `test.jsonl`, sorted by name.
    pub fn domains(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join("test.jsonl").exists() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }
}

impl DomainSource for DatasetDir {
    fn train(&self, domain: &str) -> Result<Vec<Example>> {
        self.load(domain, "train")
    }

    fn valid(&self, domain: &str) -> Result<Vec<Example>> {
        self.load(domain, "valid")
    }

    fn test(&self, domain: &str) -> Result<Vec<Example>> {
        self.load(domain, "test")
    }
}

fn tokens_of(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::String(s) => Some(s.split_whitespace().map(String::from).collect()),
        Value::Array(items) => items.iter().map(|t| t.as_str().map(String::from)).collect(),
        _ => None,
    }
}

/// Reads one JSON object per line with fields `text` (string or token list),
/// `label` and `domain`. An optional `text_b` is appended after a `[SEP]`
/// token. In [`VocabMode::Extend`] every new token is appended to `vocab`.
pub fn load_jsonl(
    path: &Path,
    labels: &LabelSet,
    vocab: &mut Vocab,
    mode: VocabMode,
) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let obj: Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let mut tokens = obj
            .get("text")
            .and_then(tokens_of)
            .ok_or_else(|| err("missing or malformed `text`".into()))?;
        if let Some(b) = obj.get("text_b") {
            let b = tokens_of(b).ok_or_else(|| err("malformed `text_b`".into()))?;
            tokens.push(SEP.to_string());
            tokens.extend(b);
        }
        if tokens.is_empty() {
            return Err(err("empty token sequence".into()));
        }
        let label = obj
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing `label`".into()))?;
        if labels.index(label).is_none() {
            return Err(err(format!("unknown label `{label}`")));
        }
        let domain = obj
            .get("domain")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing `domain`".into()))?;
        if mode == VocabMode::Extend {
            vocab.encode(&tokens, VocabMode::Extend);
        }
        out.push(Example {
            tokens,
            label: label.to_string(),
            domain: domain.to_string(),
        });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        let obj = serde_json::json!({
            "text": e.tokens.join(" "),
            "label": e.label,
            "domain": e.domain,
        });
        writeln!(w, "{obj}")?;
    }
    w.flush()?;
    Ok(())
}

/// Right-padded mini-batch. `lengths[i]` is the true length of row `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unpadded token ids of row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.lengths[i]]
    }
}

pub fn batch_pad(examples: &[Encoded], batch_size: usize, pad_id: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(examples
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|e| e.ids.len()).max().unwrap_or(0);
            let tokens = chunk
                .iter()
                .map(|e| {
                    let mut row = e.ids.clone();
                    row.resize(width, pad_id);
                    row
                })
                .collect();
            Batch {
                tokens,
                lengths: chunk.iter().map(|e| e.ids.len()).collect(),
                labels: chunk.iter().map(|e| e.label).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write(&[]);
        let mut v = Vocab::new();
        let ex = load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Extend).unwrap();
        assert!(ex.is_empty());
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn frozen_lookup_uses_existing_ids() {
        let f = write(&[r#"{"text": "alpha beta", "label": "neutral", "domain": "x"}"#]);
        let mut v = Vocab::new();
        v.extend(&["beta"]).unwrap();
        let ex = load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Frozen).unwrap();
        let enc = encode_examples(&ex, &v, &LabelSet::default()).unwrap();
        assert_eq!(enc[0].ids, vec![UNK_ID, 3]);
        assert_eq!(enc[0].label, 1);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn extend_mode_grows_by_new_token_count() {
        let f = write(&[
            r#"{"text": ["old", "new1", "new2", "new1"], "label": "entailment", "domain": "x"}"#,
        ]);
        let mut v = Vocab::new();
        v.extend(&["old"]).unwrap();
        let before: std::collections::HashSet<String> = v.tokens().iter().cloned().collect();
        load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Extend).unwrap();
        let after: std::collections::HashSet<String> = v.tokens().iter().cloned().collect();
        assert_eq!(after.difference(&before).count(), 2);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn pair_fields_join_with_separator() {
        let f = write(&[r#"{"text": "p q", "text_b": "r", "label": "entailment", "domain": "x"}"#]);
        let mut v = Vocab::new();
        let ex = load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Frozen).unwrap();
        assert_eq!(ex[0].tokens, vec!["p", "q", SEP, "r"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write(&[
            r#"{"text": "a", "label": "neutral", "domain": "x"}"#,
            "{not json",
        ]);
        let mut v = Vocab::new();
        match load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Frozen) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let f = write(&[r#"{"text": "a", "label": "maybe", "domain": "x"}"#]);
        let mut v = Vocab::new();
        let err =
            load_jsonl(f.path(), &LabelSet::default(), &mut v, VocabMode::Frozen).unwrap_err();
        assert!(err.to_string().contains("unknown label"));
    }

    #[test]
    fn padding_rules() {
        let same = vec![
            Encoded {
                ids: vec![3, 4],
                label: 0,
            },
            Encoded {
                ids: vec![5, 6],
                label: 1,
            },
        ];
        let b = batch_pad(&same, 8, PAD_ID).unwrap();
        assert_eq!(b[0].tokens, vec![vec![3, 4], vec![5, 6]]);

        let ragged = vec![
            Encoded {
                ids: vec![3, 4, 5],
                label: 0,
            },
            Encoded {
                ids: vec![6, 7, 8, 9, 10],
                label: 2,
            },
        ];
        let b = batch_pad(&ragged, 2, PAD_ID).unwrap();
        assert_eq!(b[0].width(), 5);
        assert_eq!(b[0].lengths, vec![3, 5]);
        assert_eq!(b[0].row(0), &[3, 4, 5]);
        assert_eq!(b[0].tokens[0], vec![3, 4, 5, PAD_ID, PAD_ID]);
        assert!(batch_pad(&ragged, 0, PAD_ID).is_err());
    }
}
