//! Memory-augmented bidirectional RNN classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Activation, GradCheckReport, Gradients, ParamStore, Tape, Var};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::layers::{
    encode_sequence, register, BankVars, CellKind, ClassifierHead, EmbeddingTable, ParamSpec,
    RnnCell,
};
use crate::membank::{MemoryBank, SlotInit};
use crate::tensor::Tensor;

pub const KEYS: &str = "membank.keys";
pub const VALUES: &str = "membank.values";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub cell: CellKind,
    /// Only used by vanilla cells.
    pub activation: Activation,
    /// `0` disables the memory bank entirely.
    pub memory_slots: usize,
    /// Divide attention logits by `√d`. Off by default.
    #[serde(default)]
    pub scale_attention: bool,
    #[serde(default)]
    pub slot_init: SlotInit,
}

impl ModelConfig {
    pub fn has_memory(&self) -> bool {
        self.memory_slots > 0
    }

    /// Cell input width: embedding plus memory readout (slot dim = hidden dim).
    pub fn input_dim(&self) -> usize {
        self.embed_dim
            + if self.has_memory() {
                self.hidden_dim
            } else {
                0
            }
    }

    /// Every parameter in registration order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = EmbeddingTable::specs(self.vocab_size, self.embed_dim);
        if self.has_memory() {
            let scale = self.slot_init.scale_for(self.hidden_dim);
            for name in [KEYS, VALUES] {
                specs.push(ParamSpec {
                    name: name.into(),
                    shape: vec![self.memory_slots, self.hidden_dim],
                    init: crate::layers::Init::Uniform(scale),
                });
            }
        }
        for dir in ["encoder.fwd", "encoder.bwd"] {
            specs.extend(RnnCell::specs(
                dir,
                self.cell,
                self.input_dim(),
                self.hidden_dim,
            ));
        }
        specs.extend(ClassifierHead::specs(self.n_classes, self.hidden_dim));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Clone, Debug)]
struct Handles {
    embedding: EmbeddingTable,
    fwd: RnnCell,
    bwd: RnnCell,
    head: ClassifierHead,
    bank: Option<(crate::autodiff::ParamId, crate::autodiff::ParamId)>,
}

impl Handles {
    fn bind(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (i, h) = (config.input_dim(), config.hidden_dim);
        let bank = if config.has_memory() {
            let k = store
                .id(KEYS)
                .ok_or_else(|| Error::InvalidArgument("missing keys".into()))?;
            let v = store
                .id(VALUES)
                .ok_or_else(|| Error::InvalidArgument("missing values".into()))?;
            for id in [k, v] {
                let s = store.value(id).shape();
                if s != [config.memory_slots, h] {
                    return Err(Error::shape(
                        "memory bank binding",
                        s,
                        &[config.memory_slots, h],
                    ));
                }
            }
            Some((k, v))
        } else {
            None
        };
        Ok(Handles {
            embedding: EmbeddingTable::bind(store, config.vocab_size, config.embed_dim)?,
            fwd: RnnCell::bind(store, "encoder.fwd", config.cell, config.activation, i, h)?,
            bwd: RnnCell::bind(store, "encoder.bwd", config.cell, config.activation, i, h)?,
            head: ClassifierHead::bind(store, config.n_classes, h)?,
            bank,
        })
    }
}

/// How blocks that did not exist before a growth step are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NewBlocks {
    Random,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    boundaries: Vec<usize>,
    handles: Handles,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        register(&mut params, &config.layout(), rng)?;
        Self::from_parts(config, params, vocab, None)
    }

    /// Assembles a model from existing parameters. Boundaries default to a
    /// single domain holding every slot.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        vocab: Vocab,
        boundaries: Option<Vec<usize>>,
    ) -> Result<Self> {
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let handles = Handles::bind(&config, &params)?;
        let boundaries = boundaries.unwrap_or_else(|| vec![config.memory_slots]);
        if boundaries.last() != Some(&config.memory_slots) {
            return Err(Error::InvalidArgument(format!(
                "boundaries {boundaries:?} do not end at {} slots",
                config.memory_slots
            )));
        }
        Ok(Model {
            config,
            params,
            vocab,
            boundaries,
            handles,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Snapshot of the memory bank, if the model has one.
    pub fn bank(&self) -> Option<MemoryBank> {
        let (k, v) = self.handles.bank?;
        MemoryBank::with_boundaries(
            self.params.value(k).clone(),
            self.params.value(v).clone(),
            self.boundaries.clone(),
        )
        .ok()
    }

    /// Logits for one unpadded token sequence.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let h = &self.handles;
        let inputs = h.embedding.embed(tape, tokens)?;
        let bank = match h.bank {
            Some((k, v)) => Some(BankVars::new(tape, k, v, self.config.scale_attention)?),
            None => None,
        };
        let fwd = h.fwd.vars(tape);
        let bwd = h.bwd.vars(tape);
        let enc = encode_sequence(tape, &fwd, &bwd, &inputs, bank.as_ref())?;
        h.head.classify(tape, enc)
    }

    /// Final states `[h_fwd | h_bwd]` for one unpadded token sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let h = &self.handles;
        let inputs = h.embedding.embed(&mut tape, tokens)?;
        let bank = match h.bank {
            Some((k, v)) => Some(BankVars::new(&mut tape, k, v, self.config.scale_attention)?),
            None => None,
        };
        let (fwd, bwd) = (h.fwd.vars(&mut tape), h.bwd.vars(&mut tape));
        let enc = encode_sequence(&mut tape, &fwd, &bwd, &inputs, bank.as_ref())?;
        Ok(tape.value(enc).data().to_vec())
    }

    pub fn loss(&self, tape: &mut Tape, tokens: &[usize], label: usize) -> Result<Var> {
        let logits = self.forward(tape, tokens)?;
        tape.cross_entropy(logits, label)
    }

    /// Loss and parameter gradients for one example.
    pub fn example_gradients(&self, tokens: &[usize], label: usize) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let loss = self.loss(&mut tape, tokens, label)?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?))
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, tokens)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        let logits = self.logits(tokens)?;
        Ok(argmax(&logits))
    }

    /// Rebuilds the model under `config` (every dimension `>=` the current
    /// one), copying each existing array into the leading block of its
    /// successor.
    pub fn grow<R: Rng + ?Sized>(
        &self,
        config: ModelConfig,
        vocab: Vocab,
        boundaries: Vec<usize>,
        fill: NewBlocks,
        rng: &mut R,
    ) -> Result<Model> {
        let mut params = ParamStore::new();
        for spec in config.layout() {
            let mut t = match fill {
                NewBlocks::Random => spec.materialize(rng),
                NewBlocks::Zero => Tensor::zeros(&spec.shape),
            };
            if let Some(old) = self.params.by_name(&spec.name) {
                old.value.copy_into_leading_block(&mut t).map_err(|_| {
                    Error::ShapeExceedsTarget {
                        name: spec.name.clone(),
                        stored: old.value.shape().to_vec(),
                        target: spec.shape.clone(),
                    }
                })?;
            }
            params.add(spec.name, t)?;
        }
        Model::from_parts(config, params, vocab, Some(boundaries))
    }

    /// Appends `extra` slots drawn from the configured slot initializer.
    pub fn expand_memory<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) -> Result<()> {
        let bank = self
            .bank()
            .ok_or_else(|| Error::InvalidArgument("model has no memory bank".into()))?;
        let grown = bank.expand(extra, self.config.slot_init, rng);
        let n = grown.len();
        let (keys, values, boundaries) = grown.into_parts();
        let (k, v) = self.handles.bank.expect("checked above");
        self.params.get_mut(k).value = keys;
        self.params.get_mut(v).value = values;
        for id in [k, v] {
            let p = self.params.get_mut(id);
            p.grad = Tensor::zeros(p.value.shape());
        }
        self.config.memory_slots = n;
        self.boundaries = boundaries;
        self.handles = Handles::bind(&self.config, &self.params)?;
        Ok(())
    }

    /// Appends embedding rows for `new_tokens`; existing rows are unchanged.
    pub fn expand_vocab<R: Rng + ?Sized, S: AsRef<str>>(
        &mut self,
        new_tokens: &[S],
        rng: &mut R,
    ) -> Result<()> {
        if new_tokens.is_empty() {
            return Ok(());
        }
        let mut vocab = self.vocab.clone();
        vocab.extend(new_tokens)?;
        let id = self.handles.embedding.weights;
        let spec = &EmbeddingTable::specs(vocab.len(), self.config.embed_dim)[0];
        let mut table = spec.materialize(rng);
        self.params.value(id).copy_into_leading_block(&mut table)?;
        // Fresh rows are drawn for the whole table above; restore old rows
        // only, so the draw count depends on the new size alone.
        let p = self.params.get_mut(id);
        p.value = table;
        p.grad = Tensor::zeros(p.value.shape());
        self.vocab = vocab;
        self.config.vocab_size = self.vocab.len();
        self.handles = Handles::bind(&self.config, &self.params)?;
        Ok(())
    }

    /// Widens the recurrent state by `extra` units.
    pub fn expand_hidden<R: Rng + ?Sized>(
        &self,
        extra: usize,
        fill: NewBlocks,
        rng: &mut R,
    ) -> Result<Model> {
        if extra == 0 {
            return Ok(self.clone());
        }
        let mut config = self.config.clone();
        config.hidden_dim += extra;
        self.grow(
            config,
            self.vocab.clone(),
            self.boundaries.clone(),
            fill,
            rng,
        )
    }
}

/// Central-difference check of every parameter of a small classifier:
/// vocabulary 20, embedding 6, hidden 16, 4 slots, 3 classes, one random
/// sequence of length 5.
pub fn grad_check_model<R: Rng + ?Sized>(cell: CellKind, rng: &mut R) -> Result<GradCheckReport> {
    let mut vocab = Vocab::new();
    let words: Vec<String> = (vocab.len()..20).map(|k| format!("t{k}")).collect();
    vocab.extend(&words)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 6,
        hidden_dim: 16,
        n_classes: 3,
        cell,
        activation: Activation::Tanh,
        memory_slots: 4,
        scale_attention: false,
        slot_init: SlotInit::default(),
    };
    let model = Model::new(config, vocab, rng)?;
    let tokens: Vec<usize> = (0..5).map(|_| rng.gen_range(3..20)).collect();
    let label = rng.gen_range(0..3);
    let mut store = model.params.clone();
    grad_check(
        &mut store,
        |tape| model.loss(tape, &tokens, label),
        1e-6,
        None,
    )
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(memory_slots: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden_dim: 5,
            n_classes: 3,
            cell: CellKind::Lstm,
            activation: Activation::Tanh,
            memory_slots,
            scale_attention: false,
            slot_init: SlotInit::default(),
        }
    }

    fn vocab(n: usize) -> Vocab {
        let mut v = Vocab::new();
        let extra: Vec<String> = (0..n - 3).map(|i| format!("t{i}")).collect();
        v.extend(&extra).unwrap();
        v
    }

    fn model(memory_slots: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(config(memory_slots), vocab(12), &mut rng).unwrap()
    }

    #[test]
    fn layout_count_matches_registered_params() {
        for slots in [0, 3] {
            let m = model(slots, 1);
            assert_eq!(m.param_count(), m.config().param_count());
        }
    }

    #[test]
    fn zero_readout_weights_remove_memory_influence() {
        let mut with = model(4, 2);
        let without = {
            let mut c = config(0);
            c.vocab_size = 12;
            let mut params = ParamStore::new();
            for spec in c.layout() {
                let src = &with.params.by_name(&spec.name).unwrap().value;
                let mut t = Tensor::zeros(&spec.shape);
                if src.shape() == spec.shape.as_slice() {
                    t = src.clone();
                } else {
                    // input weights lose their readout columns
                    for r in 0..spec.shape[0] {
                        for c in 0..spec.shape[1] {
                            t.data_mut()[r * spec.shape[1] + c] = src.at(r, c);
                        }
                    }
                }
                params.add(spec.name, t).unwrap();
            }
            Model::from_parts(c, params, vocab(12), None).unwrap()
        };
        // zero the readout block of every input matrix
        let e = with.config().embed_dim;
        for p in with.params.iter_mut().filter(|p| p.name.contains(".w_x.")) {
            let cols = p.value.cols();
            for r in 0..p.value.rows() {
                for c in e..cols {
                    p.value.data_mut()[r * cols + c] = 0.0;
                }
            }
        }
        let tokens = [3, 7, 7, 11, 4];
        let (a, b) = (
            with.logits(&tokens).unwrap(),
            without.logits(&tokens).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_vocab_keeps_logits_on_old_tokens() {
        let mut m = model(3, 3);
        let tokens = [3, 4, 5, 9];
        let before = m.logits(&tokens).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.expand_vocab(&["new_a", "new_b"], &mut rng).unwrap();
        assert_eq!(m.vocab.len(), 14);
        assert_eq!(m.config().vocab_size, 14);
        assert_eq!(before, m.logits(&tokens).unwrap());
        assert!(m.expand_vocab(&["new_a"], &mut rng).is_err());
        let snapshot = m.params.clone();
        m.expand_vocab::<_, &str>(&[], &mut rng).unwrap();
        assert!(m.params.bitwise_eq(&snapshot));
    }

    #[test]
    fn expand_memory_records_boundaries() {
        let mut m = model(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        m.expand_memory(2, &mut rng).unwrap();
        assert_eq!(m.boundaries(), &[3, 5]);
        assert_eq!(m.bank().unwrap().len(), 5);
        let mut plain = model(0, 5);
        assert!(plain.expand_memory(1, &mut rng).is_err());
    }

    #[test]
    fn zero_hidden_expansion_is_bitwise_noop() {
        let m = model(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grown = m.expand_hidden(0, NewBlocks::Random, &mut rng).unwrap();
        assert!(grown.params.bitwise_eq(&m.params));
    }

    #[test]
    fn zero_new_blocks_leave_outputs_unchanged() {
        let m = model(3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grown = m.expand_hidden(3, NewBlocks::Zero, &mut rng).unwrap();
        assert_eq!(grown.config().hidden_dim, 8);
        let tokens = [4, 10, 3, 3, 6];
        let (a, b) = (m.logits(&tokens).unwrap(), grown.logits(&tokens).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }
}
