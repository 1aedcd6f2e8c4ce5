use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One LSTM cell's parameters already placed on a graph.
///
/// `weight` is `[input + hidden, 4 * hidden]` acting on `concat(x, h)`, gate
/// blocks in the order input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub weight: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl<T: Scalar> Graph<T> {
    /// Standard LSTM cell update: returns `(h', c')`.
    pub fn lstm_step(&mut self, x: Var, state: LstmState, cell: &LstmCell) -> Result<LstmState> {
        let hd = cell.hidden;
        let (n, d) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(Error::contract(format!("lstm_step: input {s:?}"))),
        };
        if self.shape(state.h) != [n, hd] || self.shape(state.c) != [n, hd] {
            return Err(Error::contract(format!(
                "lstm_step: state {:?}/{:?} for batch {n}, hidden {hd}",
                self.shape(state.h),
                self.shape(state.c)
            )));
        }
        if self.shape(cell.weight) != [d + hd, 4 * hd] {
            return Err(Error::contract(format!(
                "lstm_step: weight {:?} for input {d}, hidden {hd}",
                self.shape(cell.weight)
            )));
        }
        let xh = self.concat_cols(x, state.h)?;
        let gates = self.linear(xh, cell.weight, cell.bias)?;
        let i = self.slice_cols(gates, 0, hd)?;
        let f = self.slice_cols(gates, hd, hd)?;
        let g = self.slice_cols(gates, 2 * hd, hd)?;
        let o = self.slice_cols(gates, 3 * hd, hd)?;
        let i = self.sigmoid(i);
        let f = self.sigmoid(f);
        let g = self.tanh(g);
        let o = self.sigmoid(o);
        let keep = self.mul(f, state.c)?;
        let write = self.mul(i, g)?;
        let c = self.add(keep, write)?;
        let squashed = self.tanh(c);
        let h = self.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }
}
