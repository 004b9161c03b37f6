//! Key-value memory bank read by soft attention, grown by appending slots.
//!
//! For a query `h`, slot `j` receives the unnormalized weight
//! `exp(h · key_j)`; the readout is the normalized-weight average of the
//! value vectors. Appending slots leaves the old unnormalized weights
//! untouched, so each old normalized weight shrinks by exactly
//! `S_old / (S_old + S_new)`, where `S` sums unnormalized weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub logits: Vec<f64>,
    pub unnormalized: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReadout {
    pub content: Vec<f64>,
}

/// Range of the uniform initializer for new slots; `None` means `1/√d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotInit {
    pub scale: Option<f64>,
}

impl SlotInit {
    pub fn scale_for(&self, dim: usize) -> f64 {
        self.scale.unwrap_or(1.0 / (dim as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    keys: Tensor,
    values: Tensor,
    boundaries: Vec<usize>,
}

impl MemoryBank {
    pub fn new(keys: Tensor, values: Tensor) -> Result<Self> {
        let n = keys.rows();
        Self::with_boundaries(keys, values, vec![n])
    }

    pub fn with_boundaries(keys: Tensor, values: Tensor, boundaries: Vec<usize>) -> Result<Self> {
        if keys.shape().len() != 2 || keys.shape() != values.shape() {
            return Err(Error::shape(
                "memory bank keys/values",
                keys.shape(),
                values.shape(),
            ));
        }
        let n = keys.rows();
        if boundaries.windows(2).any(|w| w[0] > w[1]) || boundaries.last() != Some(&n) {
            return Err(Error::InvalidArgument(format!(
                "domain boundaries {boundaries:?} must be nondecreasing and end at {n}"
            )));
        }
        Ok(MemoryBank {
            keys,
            values,
            boundaries,
        })
    }

    pub fn random<R: Rng + ?Sized>(slots: usize, dim: usize, init: SlotInit, rng: &mut R) -> Self {
        let scale = init.scale_for(dim);
        let keys = Tensor::uniform(&[slots, dim], scale, rng);
        let values = Tensor::uniform(&[slots, dim], scale, rng);
        MemoryBank {
            keys,
            values,
            boundaries: vec![slots],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn slot(&self, j: usize) -> MemorySlot {
        MemorySlot {
            key: self.keys.row(j).to_vec(),
            value: self.values.row(j).to_vec(),
        }
    }

    pub fn into_parts(self) -> (Tensor, Tensor, Vec<usize>) {
        (self.keys, self.values, self.boundaries)
    }

    /// Soft attention read for query `h`.
    pub fn attend(&self, h: &[f64]) -> Result<(AttentionWeights, MemoryReadout)> {
        self.attend_scaled(h, false)
    }

    pub fn attend_scaled(
        &self,
        h: &[f64],
        scale_logits: bool,
    ) -> Result<(AttentionWeights, MemoryReadout)> {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Tensor::vector(h.to_vec()));
        let keys = tape.constant(self.keys.clone());
        let values = tape.constant(self.values.clone());
        let values_t = tape.transpose(values)?;
        let read = attend_on_tape(&mut tape, q, keys, values_t, scale_logits)?;
        let logits = tape.value(read.logits).data().to_vec();
        let weights = AttentionWeights {
            unnormalized: logits.iter().map(|l| l.exp()).collect(),
            normalized: tape.value(read.probs).data().to_vec(),
            logits,
        };
        let readout = MemoryReadout {
            content: tape.value(read.content).data().to_vec(),
        };
        Ok((weights, readout))
    }

    /// Appends `extra` freshly initialized slots and records a domain boundary.
    /// The existing slots are copied bit for bit.
    pub fn expand<R: Rng + ?Sized>(&self, extra: usize, init: SlotInit, rng: &mut R) -> MemoryBank {
        let (n, d) = (self.len(), self.dim());
        let scale = init.scale_for(d);
        let grow = |old: &Tensor, rng: &mut R| {
            let mut data = old.data().to_vec();
            data.extend((0..extra * d).map(|_| rng.gen_range(-scale..scale)));
            Tensor::new(vec![n + extra, d], data).expect("consistent expansion shape")
        };
        let keys = grow(&self.keys, rng);
        let values = grow(&self.values, rng);
        let mut boundaries = self.boundaries.clone();
        boundaries.push(n + extra);
        MemoryBank {
            keys,
            values,
            boundaries,
        }
    }
}

/// Tape handles for one attention read.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRead {
    pub logits: Var,
    pub probs: Var,
    pub content: Var,
}

/// Differentiable attention read: `probs = softmax(keys · h)`,
/// `content = valuesᵀ · probs`. `values_t` is the `[d × N]` transpose of the
/// value matrix so one transpose serves a whole sequence.
pub fn attend_on_tape(
    tape: &mut Tape,
    h: Var,
    keys: Var,
    values_t: Var,
    scale_logits: bool,
) -> Result<AttentionRead> {
    let kshape = tape.value(keys).shape().to_vec();
    if kshape.len() != 2 || kshape[0] == 0 {
        return Err(Error::Empty("memory bank"));
    }
    let hshape = tape.value(h).shape().to_vec();
    if hshape != [kshape[1]] {
        return Err(Error::shape("attend (query vs key dim)", &hshape, &kshape));
    }
    let mut logits = tape.matmul(keys, h)?;
    if scale_logits {
        logits = tape.scale(logits, 1.0 / (kshape[1] as f64).sqrt());
    }
    let probs = tape.softmax(logits)?;
    let content = tape.matmul(values_t, probs)?;
    Ok(AttentionRead {
        logits,
        probs,
        content,
    })
}

/// `(S_old, S_new)`: unnormalized mass on slots before and after `boundary`.
pub fn attention_mass_split(weights: &AttentionWeights, boundary: usize) -> Result<(f64, f64)> {
    let n = weights.unnormalized.len();
    if boundary > n {
        return Err(Error::OutOfRange {
            what: "mass-split boundary",
            index: boundary,
            size: n,
        });
    }
    let old = weights.unnormalized[..boundary].iter().sum();
    let new = weights.unnormalized[boundary..].iter().sum();
    Ok((old, new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_slot_reads_its_value() {
        let bank = MemoryBank::random(1, 3, SlotInit::default(), &mut rng(1));
        let (w, c) = bank.attend(&[0.4, -2.0, 1.0]).unwrap();
        assert_eq!(w.normalized, vec![1.0]);
        assert_eq!(c.content, bank.values().row(0).to_vec());
    }

    #[test]
    fn zero_query_averages_values() {
        let bank = MemoryBank::random(5, 4, SlotInit::default(), &mut rng(2));
        let (w, c) = bank.attend(&[0.0; 4]).unwrap();
        assert!(w.normalized.iter().all(|&a| (a - 0.2).abs() < 1e-15));
        for k in 0..4 {
            let mean: f64 = (0..5).map(|j| bank.values().at(j, k)).sum::<f64>() / 5.0;
            assert!((c.content[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_slot_read() {
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let values = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 5.0]]).unwrap();
        let bank = MemoryBank::new(keys, values).unwrap();
        let (w, c) = bank.attend(&[3f64.ln(), 0.0]).unwrap();
        // exp(ln 3) = 3, exp(0) = 1
        assert!((w.normalized[0] - 0.75).abs() < 1e-12);
        assert!((w.normalized[1] - 0.25).abs() < 1e-12);
        assert!((c.content[0] - 1.5).abs() < 1e-12);
        assert!((c.content[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attend_rejects_bad_inputs() {
        let empty = MemoryBank::new(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2]));
        let empty = empty.unwrap();
        assert!(matches!(empty.attend(&[0.0, 0.0]), Err(Error::Empty(_))));
        let bank = MemoryBank::random(2, 3, SlotInit::default(), &mut rng(0));
        assert!(matches!(
            bank.attend(&[0.0, 0.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_expansion_is_identity_and_records_boundary() {
        let bank = MemoryBank::random(4, 3, SlotInit::default(), &mut rng(5));
        let grown = bank.expand(0, SlotInit::default(), &mut rng(6));
        assert_eq!(grown.boundaries(), &[4, 4]);
        let h = [0.3, -0.7, 1.1];
        assert_eq!(bank.attend(&h).unwrap(), grown.attend(&h).unwrap());
    }

    #[test]
    fn expansion_preserves_old_slots_bitwise() {
        let bank = MemoryBank::random(4, 3, SlotInit::default(), &mut rng(7));
        let grown = bank.expand(3, SlotInit::default(), &mut rng(8));
        assert_eq!(grown.len(), 7);
        assert_eq!(grown.boundaries(), &[4, 7]);
        for j in 0..4 {
            assert_eq!(grown.slot(j), bank.slot(j));
        }
        let h = [0.5, 0.1, -0.4];
        let (before, _) = bank.attend(&h).unwrap();
        let (after, _) = grown.attend(&h).unwrap();
        assert_eq!(before.unnormalized[..], after.unnormalized[..4]);
    }

    #[test]
    fn mass_split_examples() {
        let w = AttentionWeights {
            logits: vec![0.0; 4],
            unnormalized: vec![1.0; 4],
            normalized: vec![0.25; 4],
        };
        assert_eq!(attention_mass_split(&w, 2).unwrap(), (2.0, 2.0));
        assert_eq!(attention_mass_split(&w, 4).unwrap().1, 0.0);
        assert!(attention_mass_split(&w, 5).is_err());
    }

    #[test]
    fn attention_gradients_pass_grad_check() {
        let mut r = rng(21);
        let mut store = ParamStore::new();
        let k = store
            .add("keys", Tensor::uniform(&[5, 4], 1.0, &mut r))
            .unwrap();
        let v = store
            .add("values", Tensor::uniform(&[5, 4], 1.0, &mut r))
            .unwrap();
        let h = store
            .add("query", Tensor::uniform(&[4], 1.5, &mut r))
            .unwrap();
        let w = Tensor::uniform(&[4], 1.0, &mut r);
        let report = grad_check(
            &mut store,
            |tape| {
                let (kv, vv, hv) = (tape.param(k), tape.param(v), tape.param(h));
                let vt = tape.transpose(vv)?;
                let read = attend_on_tape(tape, hv, kv, vt, false)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(read.content, wv)?;
                let t = tape.tanh(prod)?;
                Ok(tape.sum(t))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
        assert!(report
            .params
            .iter()
            .all(|p| p.checked == 20 || p.checked == 4));
    }

    fn bank_and_query() -> impl Strategy<Value = (u64, usize, usize, usize)> {
        (any::<u64>(), 1usize..8, 0usize..6, 1usize..6)
    }

    proptest! {
        #[test]
        fn normalized_and_convex((seed, n, m, d) in bank_and_query()) {
            let mut r = rng(seed);
            let bank = MemoryBank::random(n, d, SlotInit { scale: Some(2.0) }, &mut r);
            let bank = bank.expand(m, SlotInit::default(), &mut r);
            let h: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
            let (w, c) = bank.attend(&h).unwrap();
            prop_assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.normalized.iter().all(|&a| a > 0.0));
            prop_assert!(w.unnormalized.iter().all(|&a| a > 0.0));
            for k in 0..d {
                let col: Vec<f64> = (0..bank.len()).map(|j| bank.values().at(j, k)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.content[k] >= lo - 1e-12 && c.content[k] <= hi + 1e-12);
            }
        }

        #[test]
        fn expansion_dilutes_old_weights((seed, n, m, d) in bank_and_query()) {
            let mut r = rng(seed);
            let bank = MemoryBank::random(n, d, SlotInit { scale: Some(1.0) }, &mut r);
            let grown = bank.expand(m, SlotInit::default(), &mut r);
            let h: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
            let (before, _) = bank.attend(&h).unwrap();
            let (after, _) = grown.attend(&h).unwrap();
            let (s_old, s_new) = attention_mass_split(&after, n).unwrap();
            for j in 0..n {
                prop_assert_eq!(before.unnormalized[j].to_bits(), after.unnormalized[j].to_bits());
                let want = before.normalized[j] * s_old / (s_old + s_new);
                prop_assert!((after.normalized[j] - want).abs() < 1e-12);
                if m > 0 {
                    prop_assert!(after.normalized[j] < before.normalized[j]);
                }
            }
        }
    }
}
