use rand::Rng;

use super::kernels::{matvec, sigmoid};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameters of a peephole-free LSTM cell. Gate rows are stacked in the
/// order input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    /// `4H × input`
    pub w_input: Tensor,
    /// `4H × H`
    pub w_hidden: Tensor,
    /// `4H`
    pub bias: Tensor,
}

impl CellParams {
    /// Uniform(-0.08, 0.08) weights, zero biases except forget-gate bias 1.0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_input = Tensor::uniform(&[4 * hidden, input], 0.08, rng);
        let w_hidden = Tensor::uniform(&[4 * hidden, hidden], 0.08, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        CellParams {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        CellParams {
            w_input: Tensor::zeros(&[4 * hidden, input]),
            w_hidden: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_input.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.w_hidden.shape() == [4 * h, h]
            && self.w_input.shape().len() == 2
            && self.w_input.shape()[0] == 4 * h
            && self.bias.shape() == [4 * h];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "lstm_cell",
                format!(
                    "inconsistent cell params: w_input {:?}, w_hidden {:?}, bias {:?}",
                    self.w_input.shape(),
                    self.w_hidden.shape(),
                    self.bias.shape()
                ),
            ))
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> CellVars {
        CellVars {
            w_input: tape.leaf(&self.w_input),
            w_hidden: tape.leaf(&self.w_hidden),
            bias: tape.leaf(&self.bias),
            hidden: self.hidden(),
        }
    }
}

/// [`CellParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// One LSTM step on the tape: returns `(h, c)`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &CellVars) -> Result<(Var, Var)> {
    let hd = p.hidden;
    if tape.shape(h_prev) != [hd] || tape.shape(c_prev) != [hd] {
        return Err(Error::dim(
            "lstm_cell",
            format!(
                "state shapes {:?}/{:?} for hidden size {hd}",
                tape.shape(h_prev),
                tape.shape(c_prev)
            ),
        ));
    }
    let zx = tape.matvec(p.w_input, x)?;
    let zh = tape.matvec(p.w_hidden, h_prev)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, p.bias)?;
    let zi = tape.slice(z, 0, hd)?;
    let zf = tape.slice(z, hd, hd)?;
    let zg = tape.slice(z, 2 * hd, hd)?;
    let zo = tape.slice(z, 3 * hd, hd)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Tape-free LSTM step with identical arithmetic.
pub fn lstm_step(p: &CellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = p.hidden();
    if x.len() != p.input() || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::dim(
            "lstm_cell",
            format!(
                "x {} / h {} / c {} for cell {}→{hd}",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                p.input()
            ),
        ));
    }
    let zx = matvec(p.w_input.data(), 4 * hd, p.input(), x);
    let zh = matvec(p.w_hidden.data(), 4 * hd, hd, h_prev);
    let z: Vec<f64> = zx
        .iter()
        .zip(&zh)
        .zip(p.bias.data())
        .map(|((a, b), c)| (a + b) + c)
        .collect();
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for k in 0..hd {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hd + k]);
        let g = z[2 * hd + k].tanh();
        let o = sigmoid(z[3 * hd + k]);
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
    Ok((h, c))
}
