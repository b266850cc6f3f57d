use rand::Rng;

use super::{ParamId, ParamStore, Tape, TensorError, Tensor, Var};

type TResult<T> = Result<T, TensorError>;

/// Samples a `[rows, cols]` matrix from `U(-1/sqrt(cols), 1/sqrt(cols))`.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: vec![rows, cols],
        data,
        requires_grad: true,
        grad: None,
    }
}

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> TResult<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, out_dim, in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> TResult<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Hidden and cell vectors of an LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.zeros(hidden),
            c: tape.zeros(hidden),
        }
    }
}

/// Single LSTM cell with gates ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> TResult<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, 4 * hidden, input + hidden),
        )?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(LstmCell {
            weight,
            bias,
            input,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, state: LstmState) -> TResult<LstmState> {
        if tape.value(x).len() != self.input {
            return Err(TensorError::Shape {
                op: "lstm_cell",
                lhs: vec![self.input],
                rhs: tape.shape(x).to_vec(),
            });
        }
        let h = self.hidden;
        let xh = tape.concat(&[x, state.h])?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(w, xh)?;
        let z = tape.add(z, b)?;
        let i = tape.slice(z, 0, h)?;
        let f = tape.slice(z, h, h)?;
        let g = tape.slice(z, 2 * h, h)?;
        let o = tape.slice(z, 3 * h, h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}
