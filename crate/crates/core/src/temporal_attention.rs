//! Dot-product temporal attention of the decoder over the encoder's
//! spatially weighted hidden states, with a Luong-style combine.

use crate::autodiff::{Result, Tape, Var};

/// Encoder states one pedestrian can attend to, one per observed step.
#[derive(Debug, Clone, Default)]
pub struct AttentionBank {
    pub keys: Vec<Var>,
    /// False for steps where the pedestrian was absent.
    pub valid: Vec<bool>,
}

impl AttentionBank {
    pub fn push(&mut self, key: Var, valid: bool) {
        self.keys.push(key);
        self.valid.push(valid);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalOutput {
    /// `tanh(W [c; q])`.
    pub output: Var,
    /// Attention weights over the bank, shape `(T,)`.
    pub weights: Option<Var>,
    /// Context `c = Σ a_s key_s`.
    pub context: Var,
}

/// Scores `e_s = <query, key_s>`, weights `a = softmax(e)` over valid
/// steps, context `c = Σ a_s key_s`, output `tanh(combine · [c; query])`.
pub fn attend(tape: &mut Tape, combine: Var, query: Var, bank: &AttentionBank) -> Result<TemporalOutput> {
    let dim = tape.value(query).len();
    let (context, weights) = if bank.valid.iter().any(|&v| v) {
        let keys = tape.stack(&bank.keys)?;
        let scores = tape.matmul(keys, query)?;
        let a = tape.masked_softmax(scores, bank.valid.clone())?;
        let kt = tape.transpose(keys)?;
        (tape.matmul(kt, a)?, Some(a))
    } else {
        (tape.zeros(dim), None)
    };
    let joined = tape.concat(&[context, query])?;
    let mixed = tape.matmul(combine, joined)?;
    let output = tape.tanh(mixed)?;
    Ok(TemporalOutput { output, weights, context })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    fn combine(tape: &mut Tape, dim: usize) -> Var {
        let vals: Vec<f64> = (0..dim * 2 * dim).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
        tape.leaf(Shape::matrix(dim, 2 * dim), vals).unwrap()
    }

    #[test]
    fn identical_keys_get_uniform_weight() {
        let mut tape = Tape::new();
        let w = combine(&mut tape, 2);
        let mut bank = AttentionBank::default();
        for _ in 0..8 {
            let k = tape.vector(&[0.4, -1.0]);
            bank.push(k, true);
        }
        let q = tape.vector(&[1.0, 2.0]);
        let out = attend(&mut tape, w, q, &bank).unwrap();
        for &a in tape.value(out.weights.unwrap()) {
            assert!((a - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn key_equal_to_query_dominates_orthogonal_keys() {
        let mut tape = Tape::new();
        let w = combine(&mut tape, 2);
        let q = tape.vector(&[0.6, 0.8]);
        let mut bank = AttentionBank::default();
        let orth = tape.vector(&[-0.8, 0.6]);
        bank.push(orth, true);
        bank.push(q, true);
        bank.push(orth, true);
        let out = attend(&mut tape, w, q, &bank).unwrap();
        let a = tape.value(out.weights.unwrap()).to_vec();
        assert!(a[1] > a[0] && a[1] > a[2]);
    }

    #[test]
    fn two_key_weights_from_log_three() {
        let mut tape = Tape::new();
        let w = combine(&mut tape, 1);
        let q = tape.vector(&[1.0]);
        let mut bank = AttentionBank::default();
        let k0 = tape.vector(&[0.0]);
        let k1 = tape.vector(&[3f64.ln()]);
        bank.push(k0, true);
        bank.push(k1, true);
        let out = attend(&mut tape, w, q, &bank).unwrap();
        let a = tape.value(out.weights.unwrap());
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_bank_uses_zero_context() {
        let mut tape = Tape::new();
        let w = combine(&mut tape, 2);
        let q = tape.vector(&[0.5, 0.1]);
        let mut bank = AttentionBank::default();
        let k = tape.vector(&[9.0, 9.0]);
        bank.push(k, false);
        let out = attend(&mut tape, w, q, &bank).unwrap();
        assert_eq!(tape.value(out.context), &[0.0, 0.0]);
        let zero = tape.zeros(2);
        let joined = tape.concat(&[zero, q]).unwrap();
        let m = tape.matmul(w, joined).unwrap();
        let expected = tape.tanh(m).unwrap();
        assert_eq!(tape.value(out.output), tape.value(expected));
    }

    #[test]
    fn masked_step_gets_no_weight() {
        let mut tape = Tape::new();
        let w = combine(&mut tape, 2);
        let q = tape.vector(&[0.5, 0.1]);
        let mut bank = AttentionBank::default();
        let k0 = tape.vector(&[1.0, 1.0]);
        let k1 = tape.vector(&[5.0, 5.0]);
        bank.push(k0, true);
        bank.push(k1, false);
        let out = attend(&mut tape, w, q, &bank).unwrap();
        assert_eq!(tape.value(out.weights.unwrap()), &[1.0, 0.0]);
        assert_eq!(tape.value(out.context), &[1.0, 1.0]);
    }
}
