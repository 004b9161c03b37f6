use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::adam::FreezeMask;
use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::ewc::{compute_fisher, EwcState};
use super::parity::param_parity;
use super::train::{accuracy, predictions, train_domain, TrainConfig, TrainOutcome};
use crate::config::RunConfig;
use crate::data::{
    encode_examples, frequent_tokens, DomainSource, Encoded, Example, LabelSet, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{Model, NewBlocks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    MemExpand,
    FinetuneOnly,
    MemExpandFrozen,
    HiddenExpand,
    Multitask,
    Ewc,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::MemExpand,
        MethodKind::FinetuneOnly,
        MethodKind::MemExpandFrozen,
        MethodKind::HiddenExpand,
        MethodKind::Multitask,
        MethodKind::Ewc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::MemExpand => "mem_expand",
            MethodKind::FinetuneOnly => "finetune_only",
            MethodKind::MemExpandFrozen => "mem_expand_frozen",
            MethodKind::HiddenExpand => "hidden_expand",
            MethodKind::Multitask => "multitask",
            MethodKind::Ewc => "ewc",
        }
    }
}

/// An adaptation strategy, written `name` or `name+vocab`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdaMethod {
    pub kind: MethodKind,
    pub vocab_expand: bool,
}

impl IdaMethod {
    pub const fn new(kind: MethodKind, vocab_expand: bool) -> Self {
        IdaMethod { kind, vocab_expand }
    }

    pub fn is_incremental(self) -> bool {
        self.kind != MethodKind::Multitask
    }
}

impl fmt::Display for IdaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        if self.vocab_expand {
            f.write_str("+vocab")?;
        }
        Ok(())
    }
}

impl FromStr for IdaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, vocab_expand) = match s.split_once('+') {
            Some((b, "vocab" | "v" | "V")) => (b, true),
            Some(_) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown method suffix in `{s}`"
                )))
            }
            None => (s, false),
        };
        let kind = MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == base)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{base}`")))?;
        Ok(IdaMethod { kind, vocab_expand })
    }
}

impl Serialize for IdaMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IdaMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub domain: String,
    pub method: IdaMethod,
    /// Slots added before training on this domain. For the first domain this
    /// is the initial bank size.
    pub slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl DomainSchedule {
    /// First domain gets `initial_slots`; each later one adds `increment`.
    pub fn uniform<S: AsRef<str>>(
        domains: &[S],
        method: IdaMethod,
        initial_slots: usize,
        increment: usize,
    ) -> Self {
        DomainSchedule {
            entries: domains
                .iter()
                .enumerate()
                .map(|(i, d)| ScheduleEntry {
                    domain: d.as_ref().to_string(),
                    method,
                    slots: if i == 0 { initial_slots } else { increment },
                    epochs: None,
                    patience: None,
                })
                .collect(),
        }
    }

    pub fn domains(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.domain.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("schedule has no domains".into()));
        }
        let multitask = self
            .entries
            .iter()
            .filter(|e| !e.method.is_incremental())
            .count();
        if multitask != 0 && multitask != self.entries.len() {
            return Err(Error::InvalidArgument(
                "multitask training cannot be mixed into an incremental schedule".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(d) = self.entries.iter().find(|e| !seen.insert(&e.domain)) {
            return Err(Error::InvalidArgument(format!(
                "domain `{}` scheduled twice",
                d.domain
            )));
        }
        Ok(())
    }
}

/// Test accuracy of every scheduled domain after every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub incremental: bool,
    pub domains: Vec<String>,
    /// Label of each row: the domain trained in that stage (or `all`).
    pub stages: Vec<String>,
    /// `accuracy[stage][domain]` in `[0, 1]`.
    pub accuracy: Vec<Vec<f64>>,
    pub param_counts: Vec<usize>,
    pub epochs: Vec<usize>,
    pub wall_clock_secs: f64,
    /// Final-stage test predictions and gold labels per domain.
    pub predictions: BTreeMap<String, Vec<usize>>,
    pub labels: BTreeMap<String, Vec<usize>>,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "run `{}`: {m}",
                self.run_id
            )))
        };
        if self.accuracy.len() != self.stages.len() {
            return bad("stage count does not match the matrix".into());
        }
        if self.accuracy.iter().any(|r| r.len() != self.domains.len()) {
            return bad("matrix width does not match the domain count".into());
        }
        if self
            .accuracy
            .iter()
            .flatten()
            .any(|a| !(0.0..=1.0).contains(a))
        {
            return bad("accuracy outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn final_row(&self) -> &[f64] {
        self.accuracy.last().map_or(&[], Vec::as_slice)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: RunRecord = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

/// Derives an independent RNG stream for one purpose of one run.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose);
    r
}

const INIT: u64 = 1;
const TRAIN: u64 = 1 << 8;
const EXPAND: u64 = 2 << 8;
const VOCAB: u64 = 3 << 8;
const FISHER: u64 = 4 << 8;
const HIDDEN: u64 = 5 << 8;

fn vocab_from(examples: &[Example], min_count: usize) -> Vocab {
    let mut v = Vocab::new();
    let new = v.unseen(
        frequent_tokens(examples, min_count)
            .iter()
            .map(String::as_str),
    );
    v.extend(&new).expect("unseen tokens are new and distinct");
    v
}

/// State of an incremental run between domains. Cloning it after a stage
/// lets several methods branch from the same trained model.
#[derive(Clone, Debug)]
pub struct IdaRun {
    pub model: Model,
    pub config: RunConfig,
    pub labels: LabelSet,
    pub history: Vec<String>,
    pub outcomes: Vec<TrainOutcome>,
    ewc: Option<EwcState>,
    track_fisher: bool,
}

impl IdaRun {
    fn train_config(&self, entry: &ScheduleEntry) -> TrainConfig {
        let mut t = self.config.train;
        t.epochs = entry.epochs.unwrap_or(t.epochs);
        t.patience = entry.patience.unwrap_or(t.patience);
        t
    }

    fn encode(&self, examples: &[Example]) -> Result<Vec<Encoded>> {
        encode_examples(examples, &self.model.vocab, &self.labels)
    }

    /// Trains the first domain from scratch. `track_fisher` makes every stage
    /// end with a Fisher estimate so that later EWC stages can use it.
    pub fn start(
        config: &RunConfig,
        entry: &ScheduleEntry,
        source: &dyn DomainSource,
        track_fisher: bool,
    ) -> Result<IdaRun> {
        let labels = LabelSet::default();
        let train = source.train(&entry.domain)?;
        let vocab = vocab_from(&train, config.min_count);
        let mut dims = config.model.clone();
        dims.memory_slots = entry.slots;
        let model_cfg = dims.model_config(vocab.len(), labels.len());
        let model = Model::new(model_cfg, vocab, &mut stream(config.seed, INIT))?;
        let mut run = IdaRun {
            model,
            config: config.clone(),
            labels,
            history: Vec::new(),
            outcomes: Vec::new(),
            ewc: None,
            track_fisher,
        };
        run.fit(0, entry, &train, &source.valid(&entry.domain)?, None)?;
        Ok(run)
    }

    fn fit(
        &mut self,
        stage: u64,
        entry: &ScheduleEntry,
        train: &[Example],
        valid: &[Example],
        freeze: Option<&FreezeMask>,
    ) -> Result<()> {
        let (train, valid) = (self.encode(train)?, self.encode(valid)?);
        let ewc = match (&self.ewc, entry.method.kind) {
            (Some(e), MethodKind::Ewc) if stage > 0 => Some(e.resized(&self.model.params)?),
            _ => None,
        };
        let tc = self.train_config(entry);
        let outcome = train_domain(
            &mut self.model,
            &train,
            &valid,
            &tc,
            freeze,
            ewc.as_ref(),
            &mut stream(self.config.seed, TRAIN + stage),
        )?;
        self.outcomes.push(outcome);
        self.history.push(entry.domain.clone());
        if self.track_fisher {
            let n = self.config.ewc.fisher_samples.min(train.len());
            let fisher = compute_fisher(
                &self.model,
                &train,
                n,
                &mut stream(self.config.seed, FISHER + stage),
            )?;
            let total = match &self.ewc {
                Some(prev) => {
                    let mut f = prev.fisher.resized(&self.model.params)?;
                    f.add_assign(&fisher)?;
                    f
                }
                None => fisher,
            };
            self.ewc = Some(EwcState::new(
                &self.model.params,
                total,
                self.config.ewc.lambda,
            )?);
        }
        Ok(())
    }

    /// Expands the model as the entry's method prescribes and trains on its domain.
    pub fn adapt(&mut self, entry: &ScheduleEntry, source: &dyn DomainSource) -> Result<()> {
        if !entry.method.is_incremental() {
            return Err(Error::InvalidArgument(
                "multitask is not an incremental method".into(),
            ));
        }
        let stage = self.history.len() as u64;
        let seed = self.config.seed;
        let train = source.train(&entry.domain)?;
        let before = self.model.params.clone();

        if entry.method.vocab_expand {
            let new = self.model.vocab.unseen(
                frequent_tokens(&train, self.config.min_count)
                    .iter()
                    .map(String::as_str),
            );
            self.model
                .expand_vocab(&new, &mut stream(seed, VOCAB + stage))?;
        }
        use MethodKind::*;
        match entry.method.kind {
            MemExpand | MemExpandFrozen => {
                self.model
                    .expand_memory(entry.slots, &mut stream(seed, EXPAND + stage))?;
            }
            HiddenExpand => {
                let parity = param_parity(self.model.config(), entry.slots);
                self.model = self.model.expand_hidden(
                    parity.d_extra,
                    NewBlocks::Random,
                    &mut stream(seed, HIDDEN + stage),
                )?;
            }
            FinetuneOnly | Ewc | Multitask => {}
        }
        let freeze = (entry.method.kind == MemExpandFrozen)
            .then(|| FreezeMask::preexisting(&before, &self.model.params));
        self.fit(
            stage,
            entry,
            &train,
            &source.valid(&entry.domain)?,
            freeze.as_ref(),
        )
    }

    /// Test accuracy on each domain under the current vocabulary.
    pub fn evaluate(&self, domains: &[String], source: &dyn DomainSource) -> Result<Vec<f64>> {
        domains
            .iter()
            .map(|d| accuracy(&self.model, &self.encode(&source.test(d)?)?))
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            CheckpointMeta {
                history: self.history.clone(),
                seed: Some(self.config.seed),
                notes: BTreeMap::new(),
            },
        )
    }
}

/// Result of [`run_schedule`].
#[derive(Clone, Debug)]
pub struct ScheduleRun {
    pub record: RunRecord,
    pub run: IdaRun,
}

/// Runs every stage of `schedule`, evaluating all domains after each one.
/// When `checkpoint_dir` is given, the model is saved after every stage.
pub fn run_schedule(
    schedule: &DomainSchedule,
    source: &dyn DomainSource,
    config: &RunConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<ScheduleRun> {
    schedule.validate()?;
    if !schedule.entries[0].method.is_incremental() {
        return run_multitask(schedule, source, config);
    }
    let clock = Instant::now();
    let domains = schedule.domains();
    let track_fisher = schedule
        .entries
        .iter()
        .any(|e| e.method.kind == MethodKind::Ewc);
    let mut run = IdaRun::start(config, &schedule.entries[0], source, track_fisher)?;
    let mut matrix = vec![run.evaluate(&domains, source)?];
    let mut param_counts = vec![run.model.param_count()];
    let save = |run: &IdaRun, stage: usize| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let name = format!("stage{stage}_{}.pmem", domains[stage]);
            run.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    };
    save(&run, 0)?;
    for (k, entry) in schedule.entries.iter().enumerate().skip(1) {
        run.adapt(entry, source)?;
        matrix.push(run.evaluate(&domains, source)?);
        param_counts.push(run.model.param_count());
        save(&run, k)?;
    }
    let record = finish_record(
        &run,
        schedule,
        &domains,
        domains.clone(),
        matrix,
        param_counts,
        source,
        clock,
    )?;
    Ok(ScheduleRun { record, run })
}

#[allow(clippy::too_many_arguments)]
fn finish_record(
    run: &IdaRun,
    schedule: &DomainSchedule,
    domains: &[String],
    stages: Vec<String>,
    accuracy: Vec<Vec<f64>>,
    param_counts: Vec<usize>,
    source: &dyn DomainSource,
    clock: Instant,
) -> Result<RunRecord> {
    let mut preds = BTreeMap::new();
    let mut golds = BTreeMap::new();
    for d in domains {
        let test = run.encode(&source.test(d)?)?;
        preds.insert(d.clone(), predictions(&run.model, &test)?);
        golds.insert(d.clone(), test.iter().map(|e| e.label).collect());
    }
    let method = schedule.entries.last().expect("validated").method;
    Ok(RunRecord {
        run_id: format!("{method}-seed{}", run.config.seed),
        method: method.to_string(),
        seed: run.config.seed,
        incremental: method.is_incremental(),
        domains: domains.to_vec(),
        stages,
        accuracy,
        param_counts,
        epochs: run.outcomes.iter().map(|o| o.epochs_run).collect(),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        predictions: preds,
        labels: golds,
    })
}

/// Joint training on every scheduled domain at once. Batches interleave
/// domains uniformly at random; the bank holds as many slots as the
/// incremental schedule would end with.
fn run_multitask(
    schedule: &DomainSchedule,
    source: &dyn DomainSource,
    config: &RunConfig,
) -> Result<ScheduleRun> {
    let clock = Instant::now();
    let domains = schedule.domains();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for d in &domains {
        train.extend(source.train(d)?);
        valid.extend(source.valid(d)?);
    }
    let total_slots: usize = schedule.entries.iter().map(|e| e.slots).sum();
    let union = InMemory { train, valid };
    let entry = ScheduleEntry {
        domain: "all".into(),
        slots: total_slots,
        ..schedule.entries[0].clone()
    };
    let run = IdaRun::start(config, &entry, &union, false)?;
    let matrix = vec![run.evaluate(&domains, source)?];
    let counts = vec![run.model.param_count()];
    let record = finish_record(
        &run,
        schedule,
        &domains,
        vec!["all".into()],
        matrix,
        counts,
        source,
        clock,
    )?;
    Ok(ScheduleRun { record, run })
}

struct InMemory {
    train: Vec<Example>,
    valid: Vec<Example>,
}

impl DomainSource for InMemory {
    fn train(&self, _: &str) -> Result<Vec<Example>> {
        Ok(self.train.clone())
    }

    fn valid(&self, _: &str) -> Result<Vec<Example>> {
        Ok(self.valid.clone())
    }

    fn test(&self, _: &str) -> Result<Vec<Example>> {
        Ok(Vec::new())
    }
}
