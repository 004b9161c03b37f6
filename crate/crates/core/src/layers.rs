//! Embedding table, recurrent cells, bidirectional encoder and classifier head.
//!
//! Every weight is registered per gate (`encoder.fwd.w_x.i`, …) so that
//! growing the hidden width keeps each old matrix in the upper-left block of
//! its successor. Cell input is `[embedding | memory readout]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::membank::attend_on_tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Vanilla => &["h"],
            CellKind::Gru => &["r", "z", "n"],
            CellKind::Lstm => &["i", "f", "g", "o"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn uniform(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            init: Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        }
    }

    fn constant(name: String, shape: Vec<usize>, value: f64) -> Self {
        ParamSpec {
            name,
            shape,
            init: Init::Constant(value),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::Uniform(scale) => Tensor::uniform(&self.shape, scale, rng),
            Init::Constant(v) => Tensor::filled(&self.shape, v),
        }
    }
}

pub fn register<R: Rng + ?Sized>(
    store: &mut ParamStore,
    specs: &[ParamSpec],
    rng: &mut R,
) -> Result<()> {
    for s in specs {
        store.add(s.name.clone(), s.materialize(rng))?;
    }
    Ok(())
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
    if store.value(id).shape() != shape {
        return Err(Error::shape(
            "parameter binding",
            store.value(id).shape(),
            shape,
        ));
    }
    Ok(id)
}

// ── Embedding ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub const NAME: &'static str = "embedding.weight";

    pub fn specs(vocab_size: usize, dim: usize) -> Vec<ParamSpec> {
        vec![ParamSpec::uniform(
            Self::NAME.into(),
            vec![vocab_size, dim],
            dim,
        )]
    }

    pub fn bind(store: &ParamStore, vocab_size: usize, dim: usize) -> Result<Self> {
        Ok(EmbeddingTable {
            weights: lookup(store, Self::NAME, &[vocab_size, dim])?,
            vocab_size,
            dim,
        })
    }

    /// One tape row per token.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Vec<Var>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad,
                size: self.vocab_size,
            });
        }
        let table = tape.param(self.weights);
        tokens.iter().map(|&t| tape.gather_row(table, t)).collect()
    }

    /// `[len × dim]` matrix of the gathered rows.
    pub fn lookup(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let rows = self.embed(&mut tape, tokens)?;
        let data = rows
            .iter()
            .flat_map(|&r| tape.value(r).data().to_vec())
            .collect();
        Tensor::new(vec![tokens.len(), self.dim], data)
    }
}

// ── Recurrent cells ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct GateParams {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    b_h: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct RnnCell {
    pub kind: CellKind,
    pub activation: Activation,
    pub input_dim: usize,
    pub hidden_dim: usize,
    gates: Vec<GateParams>,
}

impl RnnCell {
    /// Parameter layout for one cell. Biases start at zero, except the LSTM
    /// forget gate which starts at `+1`.
    pub fn specs(
        prefix: &str,
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for g in kind.gates() {
            out.push(ParamSpec::uniform(
                format!("{prefix}.w_x.{g}"),
                vec![hidden_dim, input_dim],
                input_dim,
            ));
            out.push(ParamSpec::uniform(
                format!("{prefix}.w_h.{g}"),
                vec![hidden_dim, hidden_dim],
                hidden_dim,
            ));
            let bias = if kind == CellKind::Lstm && *g == "f" {
                1.0
            } else {
                0.0
            };
            out.push(ParamSpec::constant(
                format!("{prefix}.b.{g}"),
                vec![hidden_dim],
                bias,
            ));
            if kind == CellKind::Gru {
                out.push(ParamSpec::constant(
                    format!("{prefix}.b_h.{g}"),
                    vec![hidden_dim],
                    0.0,
                ));
            }
        }
        out
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        kind: CellKind,
        activation: Activation,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let gates = kind
            .gates()
            .iter()
            .map(|g| {
                Ok(GateParams {
                    w_x: lookup(
                        store,
                        &format!("{prefix}.w_x.{g}"),
                        &[hidden_dim, input_dim],
                    )?,
                    w_h: lookup(
                        store,
                        &format!("{prefix}.w_h.{g}"),
                        &[hidden_dim, hidden_dim],
                    )?,
                    b: lookup(store, &format!("{prefix}.b.{g}"), &[hidden_dim])?,
                    b_h: if kind == CellKind::Gru {
                        Some(lookup(store, &format!("{prefix}.b_h.{g}"), &[hidden_dim])?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(RnnCell {
            kind,
            activation,
            input_dim,
            hidden_dim,
            gates,
        })
    }

    /// Registers freshly initialized parameters and binds them.
    pub fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        activation: Activation,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        register(
            store,
            &Self::specs(prefix, kind, input_dim, hidden_dim),
            rng,
        )?;
        Self::bind(store, prefix, kind, activation, input_dim, hidden_dim)
    }

    /// Places this cell's parameters on `tape` once for a whole sequence.
    pub fn vars(&self, tape: &mut Tape) -> CellVars {
        let gates = self
            .gates
            .iter()
            .map(|g| GateVars {
                w_x: tape.param(g.w_x),
                w_h: tape.param(g.w_h),
                b: tape.param(g.b),
                b_h: g.b_h.map(|id| tape.param(id)),
            })
            .collect();
        CellVars {
            kind: self.kind,
            activation: self.activation,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            gates,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        input: Var,
        c_prev: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let vars = self.vars(tape);
        vars.step(tape, h_prev, input, c_prev)
    }
}

#[derive(Clone, Debug)]
struct GateVars {
    w_x: Var,
    w_h: Var,
    b: Var,
    b_h: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CellVars {
    pub kind: CellKind,
    pub activation: Activation,
    pub input_dim: usize,
    pub hidden_dim: usize,
    gates: Vec<GateVars>,
}

impl CellVars {
    /// `W_x·x + W_h·h + b` for gate `g`.
    fn preact(&self, tape: &mut Tape, g: usize, h: Var, x: Var) -> Result<Var> {
        let gv = &self.gates[g];
        let wx = tape.matmul(gv.w_x, x)?;
        let wh = tape.matmul(gv.w_h, h)?;
        let s = tape.add(wx, wh)?;
        tape.add(s, gv.b)
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        input: Var,
        c_prev: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let hs = tape.value(h_prev).shape().to_vec();
        if hs != [self.hidden_dim] {
            return Err(Error::shape("rnn_step hidden", &hs, &[self.hidden_dim]));
        }
        let xs = tape.value(input).shape().to_vec();
        if xs != [self.input_dim] {
            return Err(Error::shape("rnn_step input", &xs, &[self.input_dim]));
        }
        if c_prev.is_some() != (self.kind == CellKind::Lstm) {
            return Err(Error::InvalidArgument(
                "cell state must be given exactly for LSTM cells".into(),
            ));
        }
        match self.kind {
            CellKind::Vanilla => {
                let pre = self.preact(tape, 0, h_prev, input)?;
                Ok((tape.activation(pre, self.activation)?, None))
            }
            CellKind::Lstm => {
                let c_prev = c_prev.expect("checked above");
                let pi = self.preact(tape, 0, h_prev, input)?;
                let pf = self.preact(tape, 1, h_prev, input)?;
                let pg = self.preact(tape, 2, h_prev, input)?;
                let po = self.preact(tape, 3, h_prev, input)?;
                let i = tape.sigmoid(pi)?;
                let f = tape.sigmoid(pf)?;
                let g = tape.tanh(pg)?;
                let o = tape.sigmoid(po)?;
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, g)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                Ok((tape.mul(o, tc)?, Some(c)))
            }
            CellKind::Gru => {
                let mut parts = Vec::with_capacity(3);
                for gv in &self.gates {
                    let wx = tape.matmul(gv.w_x, input)?;
                    let x_part = tape.add(wx, gv.b)?;
                    let wh = tape.matmul(gv.w_h, h_prev)?;
                    let h_part = tape.add(wh, gv.b_h.expect("gru hidden bias"))?;
                    parts.push((x_part, h_part));
                }
                let pr = tape.add(parts[0].0, parts[0].1)?;
                let r = tape.sigmoid(pr)?;
                let pz = tape.add(parts[1].0, parts[1].1)?;
                let z = tape.sigmoid(pz)?;
                let gated = tape.mul(r, parts[2].1)?;
                let pn = tape.add(parts[2].0, gated)?;
                let n = tape.tanh(pn)?;
                // h = (1 - z)·n + z·h_prev = n + z·(h_prev - n)
                let diff = tape.sub(h_prev, n)?;
                let zd = tape.mul(z, diff)?;
                Ok((tape.add(n, zd)?, None))
            }
        }
    }
}

// ── Encoder ─────────────────────────────────────────────────────────

/// Memory bank parameters placed on a tape for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub keys: Var,
    pub values_t: Var,
    pub scale_logits: bool,
}

impl BankVars {
    pub fn new(
        tape: &mut Tape,
        keys: ParamId,
        values: ParamId,
        scale_logits: bool,
    ) -> Result<Self> {
        let keys = tape.param(keys);
        let values = tape.param(values);
        let values_t = tape.transpose(values)?;
        Ok(BankVars {
            keys,
            values_t,
            scale_logits,
        })
    }
}

fn run_direction(
    tape: &mut Tape,
    cell: &CellVars,
    inputs: impl Iterator<Item = Var>,
    bank: Option<&BankVars>,
) -> Result<Var> {
    let h0 = tape.constant(Tensor::zeros(&[cell.hidden_dim]));
    let mut h = h0;
    let mut c = (cell.kind == CellKind::Lstm).then_some(h0);
    for x in inputs {
        let x = match bank {
            Some(b) => {
                let read = attend_on_tape(tape, h, b.keys, b.values_t, b.scale_logits)?;
                tape.concat(&[x, read.content])?
            }
            None => x,
        };
        let (h_next, c_next) = cell.step(tape, h, x, c)?;
        h = h_next;
        c = c_next;
    }
    Ok(h)
}

/// Bidirectional encoding: `[h_fwd_last | h_bwd_last]`, both directions
/// starting from zero state. With a bank, every step first reads memory with
/// the previous hidden state and appends the readout to the step input.
pub fn encode_sequence(
    tape: &mut Tape,
    fwd: &CellVars,
    bwd: &CellVars,
    inputs: &[Var],
    bank: Option<&BankVars>,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let hf = run_direction(tape, fwd, inputs.iter().copied(), bank)?;
    let hb = run_direction(tape, bwd, inputs.iter().rev().copied(), bank)?;
    tape.concat(&[hf, hb])
}

// ── Classifier head ─────────────────────────────────────────────────

/// Affine map from `[h_fwd | h_bwd]` to logits, stored as two halves so a
/// wider hidden state keeps each half in the upper-left block.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w_fwd: ParamId,
    pub w_bwd: ParamId,
    pub bias: ParamId,
    pub n_classes: usize,
    pub hidden_dim: usize,
}

impl ClassifierHead {
    pub fn specs(n_classes: usize, hidden_dim: usize) -> Vec<ParamSpec> {
        let fan_in = 2 * hidden_dim;
        vec![
            ParamSpec::uniform("head.w_fwd".into(), vec![n_classes, hidden_dim], fan_in),
            ParamSpec::uniform("head.w_bwd".into(), vec![n_classes, hidden_dim], fan_in),
            ParamSpec::constant("head.bias".into(), vec![n_classes], 0.0),
        ]
    }

    pub fn bind(store: &ParamStore, n_classes: usize, hidden_dim: usize) -> Result<Self> {
        Ok(ClassifierHead {
            w_fwd: lookup(store, "head.w_fwd", &[n_classes, hidden_dim])?,
            w_bwd: lookup(store, "head.w_bwd", &[n_classes, hidden_dim])?,
            bias: lookup(store, "head.bias", &[n_classes])?,
            n_classes,
            hidden_dim,
        })
    }

    pub fn classify(&self, tape: &mut Tape, encoding: Var) -> Result<Var> {
        let es = tape.value(encoding).shape().to_vec();
        if es != [2 * self.hidden_dim] {
            return Err(Error::shape("classify", &es, &[2 * self.hidden_dim]));
        }
        let hf = tape.slice(encoding, 0, self.hidden_dim)?;
        let hb = tape.slice(encoding, self.hidden_dim, self.hidden_dim)?;
        let (wf, wb, b) = (
            tape.param(self.w_fwd),
            tape.param(self.w_bwd),
            tape.param(self.bias),
        );
        let lf = tape.matmul(wf, hf)?;
        let lb = tape.matmul(wb, hb)?;
        let s = tape.add(lf, lb)?;
        tape.add(s, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn set(store: &mut ParamStore, name: &str, t: Tensor) {
        let id = store.id(name).unwrap();
        store.get_mut(id).value = t;
    }

    #[test]
    fn embed_gathers_rows() {
        let mut store = ParamStore::new();
        store
            .add(EmbeddingTable::NAME, Tensor::identity(6))
            .unwrap();
        let table = EmbeddingTable::bind(&store, 6, 6).unwrap();
        let m = table.lookup(&store, &[0]).unwrap();
        assert_eq!(m.row(0), Tensor::identity(6).row(0));
        assert!(matches!(
            table.lookup(&store, &[6]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn repeated_token_accumulates_both_gradients() {
        let mut store = ParamStore::new();
        register(&mut store, &EmbeddingTable::specs(8, 3), &mut rng(1)).unwrap();
        let table = EmbeddingTable::bind(&store, 8, 3).unwrap();
        let mut tape = Tape::new(&store);
        let rows = table.embed(&mut tape, &[5, 5]).unwrap();
        assert_eq!(tape.value(rows[0]), tape.value(rows[1]));
        let s = tape.add(rows[0], rows[1]).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap().dense(&store, table.weights);
        for r in 0..8 {
            let want = if r == 5 { 2.0 } else { 0.0 };
            assert!(g.row(r).iter().all(|&x| x == want));
        }
    }

    #[test]
    fn random_lookup_matches_row_copies() {
        let mut store = ParamStore::new();
        register(&mut store, &EmbeddingTable::specs(10, 4), &mut rng(2)).unwrap();
        let table = EmbeddingTable::bind(&store, 10, 4).unwrap();
        let tokens = [3, 9, 0, 3, 7];
        let m = table.lookup(&store, &tokens).unwrap();
        let w = store.value(table.weights);
        for (i, &t) in tokens.iter().enumerate() {
            assert_eq!(m.row(i), w.row(t));
        }
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "c",
            CellKind::Lstm,
            Activation::Tanh,
            3,
            4,
            &mut rng(3),
        )
        .unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let (h1, c1) = cell.step(&mut tape, h, x, Some(h)).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c1.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_vanilla_transition() {
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "c",
            CellKind::Vanilla,
            Activation::Linear,
            2,
            3,
            &mut rng(4),
        )
        .unwrap();
        set(&mut store, "c.w_h.h", Tensor::identity(3));
        set(&mut store, "c.w_x.h", Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::vector(vec![0.5, -0.25, 4.0]));
        let x = tape.constant(Tensor::vector(vec![9.0, 9.0]));
        let (h1, c) = cell.step(&mut tape, h, x, None).unwrap();
        assert!(c.is_none());
        assert_eq!(tape.value(h1).data(), &[0.5, -0.25, 4.0]);
    }

    #[test]
    fn step_rejects_mismatched_dimensions() {
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "c",
            CellKind::Gru,
            Activation::Tanh,
            2,
            3,
            &mut rng(5),
        )
        .unwrap();
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::zeros(&[3]));
        let bad_x = tape.constant(Tensor::zeros(&[4]));
        assert!(cell.step(&mut tape, h, bad_x, None).is_err());
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(cell.step(&mut tape, h, x, Some(h)).is_err());
    }

    #[test]
    fn gru_matches_scalar_reference() {
        let (input, hidden) = (3, 4);
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "g",
            CellKind::Gru,
            Activation::Tanh,
            input,
            hidden,
            &mut rng(6),
        )
        .unwrap();
        let mut r = rng(7);
        for p in store.iter_mut() {
            p.value = Tensor::uniform(p.value.shape(), 0.8, &mut r);
        }
        let x: Vec<f64> = (0..input).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..hidden).map(|_| r.gen_range(-1.0..1.0)).collect();

        let p = |name: &str| store.by_name(name).unwrap().value.clone();
        let gate = |g: &str, j: usize| -> (f64, f64) {
            let (wx, wh, b, bh) = (
                p(&format!("g.w_x.{g}")),
                p(&format!("g.w_h.{g}")),
                p(&format!("g.b.{g}")),
                p(&format!("g.b_h.{g}")),
            );
            let mut xs = b.data()[j];
            for k in 0..input {
                xs += wx.at(j, k) * x[k];
            }
            let mut hs = bh.data()[j];
            for k in 0..hidden {
                hs += wh.at(j, k) * h[k];
            }
            (xs, hs)
        };
        let mut want = vec![0.0; hidden];
        for j in 0..hidden {
            let (rx, rh) = gate("r", j);
            let (zx, zh) = gate("z", j);
            let (nx, nh) = gate("n", j);
            let r = sigmoid(rx + rh);
            let z = sigmoid(zx + zh);
            let n = (nx + r * nh).tanh();
            want[j] = (1.0 - z) * n + z * h[j];
        }

        let mut tape = Tape::new(&store);
        let hv = tape.constant(Tensor::vector(h.clone()));
        let xv = tape.constant(Tensor::vector(x.clone()));
        let (h1, _) = cell.step(&mut tape, hv, xv, None).unwrap();
        for (got, want) in tape.value(h1).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_step_passes_grad_check() {
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "l",
            CellKind::Lstm,
            Activation::Tanh,
            3,
            4,
            &mut rng(8),
        )
        .unwrap();
        let h_id = store
            .add("h0", Tensor::uniform(&[4], 1.0, &mut rng(9)))
            .unwrap();
        let c_id = store
            .add("c0", Tensor::uniform(&[4], 1.0, &mut rng(10)))
            .unwrap();
        let x_id = store
            .add("x", Tensor::uniform(&[3], 1.0, &mut rng(11)))
            .unwrap();
        let report = grad_check(
            &mut store,
            |tape| {
                let (h, c, x) = (tape.param(h_id), tape.param(c_id), tape.param(x_id));
                let (h1, c1) = cell.step(tape, h, x, Some(c))?;
                let (h2, _) = cell.step(tape, h1, x, c1)?;
                let sq = tape.mul(h2, h2)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn vanilla_linear_superposition() {
        let mut store = ParamStore::new();
        let cell = RnnCell::create(
            &mut store,
            "v",
            CellKind::Vanilla,
            Activation::Linear,
            3,
            4,
            &mut rng(12),
        )
        .unwrap();
        let bias_id = store.id("v.b.h").unwrap();
        store.get_mut(bias_id).value = Tensor::uniform(&[4], 1.0, &mut rng(13));
        let bias = store.value(bias_id).clone();
        let mut r = rng(14);
        let (h1, h2) = (
            Tensor::uniform(&[4], 1.0, &mut r),
            Tensor::uniform(&[4], 1.0, &mut r),
        );
        let (x1, x2) = (
            Tensor::uniform(&[3], 1.0, &mut r),
            Tensor::uniform(&[3], 1.0, &mut r),
        );
        let (a, b) = (1.7, -0.6);
        let step = |h: &Tensor, x: &Tensor| {
            let mut tape = Tape::new(&store);
            let (hv, xv) = (tape.constant(h.clone()), tape.constant(x.clone()));
            let (out, _) = cell.step(&mut tape, hv, xv, None).unwrap();
            tape.value(out).clone()
        };
        let mix = |u: &Tensor, v: &Tensor| {
            Tensor::vector(
                u.data()
                    .iter()
                    .zip(v.data())
                    .map(|(p, q)| a * p + b * q)
                    .collect(),
            )
        };
        let lhs = step(&mix(&h1, &h2), &mix(&x1, &x2));
        let (s1, s2) = (step(&h1, &x1), step(&h2, &x2));
        for k in 0..4 {
            let rhs = a * s1.data()[k] + b * s2.data()[k] - (a + b - 1.0) * bias.data()[k];
            assert!((lhs.data()[k] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn classify_examples() {
        let mut store = ParamStore::new();
        register(&mut store, &ClassifierHead::specs(3, 2), &mut rng(15)).unwrap();
        let head = ClassifierHead::bind(&store, 3, 2).unwrap();
        for name in ["head.w_fwd", "head.w_bwd"] {
            set(&mut store, name, Tensor::zeros(&[3, 2]));
        }
        let mut tape = Tape::new(&store);
        let enc = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
        let logits = head.classify(&mut tape, enc).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.0; 3]);
        let p = crate::autodiff::softmax(tape.value(logits).data()).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let short = tape.constant(Tensor::zeros(&[3]));
        assert!(head.classify(&mut tape, short).is_err());
        drop(tape);

        // basis encoding e_1 with identity-like projection picks bias + 1
        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        set(&mut store, "head.w_fwd", proj);
        set(&mut store, "head.bias", Tensor::vector(vec![0.1, 0.2, 0.3]));
        let mut tape = Tape::new(&store);
        let enc = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]));
        let logits = head.classify(&mut tape, enc).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.1, 1.2, 0.3]);
    }

    #[test]
    fn classify_matches_affine_oracle() {
        let mut store = ParamStore::new();
        register(&mut store, &ClassifierHead::specs(3, 4), &mut rng(16)).unwrap();
        let bias_id = store.id("head.bias").unwrap();
        store.get_mut(bias_id).value = Tensor::uniform(&[3], 1.0, &mut rng(17));
        let head = ClassifierHead::bind(&store, 3, 4).unwrap();
        let enc = Tensor::uniform(&[8], 1.0, &mut rng(18));
        let mut tape = Tape::new(&store);
        let ev = tape.constant(enc.clone());
        let out = head.classify(&mut tape, ev).unwrap();
        let logits = tape.value(out).clone();
        let (wf, wb, b) = (
            store.value(head.w_fwd),
            store.value(head.w_bwd),
            store.value(head.bias),
        );
        for c in 0..3 {
            let mut want = b.data()[c];
            for k in 0..4 {
                want += wf.at(c, k) * enc.data()[k] + wb.at(c, k) * enc.data()[4 + k];
            }
            assert!((logits.data()[c] - want).abs() < 1e-12);
        }
    }
}
