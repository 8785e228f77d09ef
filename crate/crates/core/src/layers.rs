//! Linear and LSTM building blocks expressed on the tape.

use rand::Rng;

use crate::autodiff::{Binding, Init, ParamStore, Result, Shape, Tape, Var};

pub fn register_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        Shape::matrix(out_dim, in_dim),
        Init::Uniform { fan_in: in_dim },
        rng,
    )?;
    if bias {
        store.register(&format!("{prefix}.b"), Shape::vector(out_dim), Init::Zeros, rng)?;
    }
    Ok(())
}

/// `w·x (+ b)` with `w` of shape `(out, in)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn bind(binding: &Binding, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: binding.get(&format!("{prefix}.w"))?,
            b: binding.get(&format!("{prefix}.b")).ok(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wx = tape.matmul(self.w, x)?;
        match self.b {
            Some(b) => tape.add(wx, b),
            None => Ok(wx),
        }
    }
}

pub fn register_lstm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w_ih"),
        Shape::matrix(4 * hidden, input),
        Init::Uniform { fan_in: input },
        rng,
    )?;
    store.register(
        &format!("{prefix}.w_hh"),
        Shape::matrix(4 * hidden, hidden),
        Init::Uniform { fan_in: hidden },
        rng,
    )?;
    store.register(&format!("{prefix}.b"), Shape::vector(4 * hidden), Init::Zeros, rng)
}

/// Standard LSTM cell; gate order in the stacked weights is input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl Lstm {
    pub fn bind(binding: &Binding, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            w_ih: binding.get(&format!("{prefix}.w_ih"))?,
            w_hh: binding.get(&format!("{prefix}.w_hh"))?,
            b: binding.get(&format!("{prefix}.b"))?,
            hidden,
        })
    }

    /// One update; returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let xi = tape.matmul(self.w_ih, x)?;
        let hh = tape.matmul(self.w_hh, h)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add(pre, self.b)?;
        let i = tape.slice(pre, 0, hs)?;
        let f = tape.slice(pre, hs, hs)?;
        let g = tape.slice(pre, 2 * hs, hs)?;
        let o = tape.slice(pre, 3 * hs, hs)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}
