//! Neural layers expressed as graph operations over `[1 x d]` row vectors.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            w: store.add_uniform(format!("{name}.w"), &[d_in, d_out], rng)?,
            b: store.add_uniform(format!("{name}.b"), &[1, d_out], rng)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// One tanh hidden layer followed by a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.out.forward(g, h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// r  = sigmoid(x Wr + h Ur + br)
/// u  = sigmoid(x Wu + h Uu + bu)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = u * h + (1 - u) * n
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub reset: Gate,
    pub update: Gate,
    pub candidate: Gate,
    pub d_in: usize,
    pub d_hidden: usize,
}

/// Input weights, recurrent weights and bias of one gate.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl Gate {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut R) -> Result<Self> {
        Ok(Gate {
            w: store.add_uniform(format!("{name}.w"), &[d_in, d_h], rng)?,
            u: store.add_uniform(format!("{name}.u"), &[d_h, d_h], rng)?,
            b: store.add_uniform(format!("{name}.b"), &[1, d_h], rng)?,
        })
    }

    fn input_part(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }

    fn pre_activation(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let xi = self.input_part(g, x)?;
        let u = g.param(self.u);
        let hu = g.matmul(h, u)?;
        g.add(xi, hu)
    }
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(GruCell {
            reset: Gate::new(store, &format!("{name}.reset"), d_in, d_hidden, rng)?,
            update: Gate::new(store, &format!("{name}.update"), d_in, d_hidden, rng)?,
            candidate: Gate::new(store, &format!("{name}.cand"), d_in, d_hidden, rng)?,
            d_in,
            d_hidden,
        })
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let r = self.reset.pre_activation(g, x, h)?;
        let r = g.sigmoid(r)?;
        let u = self.update.pre_activation(g, x, h)?;
        let u = g.sigmoid(u)?;
        let rh = g.mul(r, h)?;
        let n = self.candidate.pre_activation(g, x, rh)?;
        let n = g.tanh(n)?;
        let carry = g.mul(u, h)?;
        let one_minus_u = g.one_minus(u)?;
        let fresh = g.mul(one_minus_u, n)?;
        g.add(carry, fresh)
    }

    pub fn zero_state(&self, g: &mut Graph) -> Result<Var> {
        g.row(vec![0.0; self.d_hidden])
    }

    /// Runs the cell over `inputs` from `init`, returning every state.
    pub fn unroll(&self, g: &mut Graph, inputs: &[Var], init: Var) -> Result<Vec<Var>> {
        let mut h = init;
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(g, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Bidirectional GRU summarised by its two final states `[h_fwd, h_bwd]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(BiGru {
            fwd: GruCell::new(store, &format!("{name}.fwd"), d_in, d_hidden, rng)?,
            bwd: GruCell::new(store, &format!("{name}.bwd"), d_in, d_hidden, rng)?,
        })
    }

    pub fn encode(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("bidirectional GRU input"));
        }
        let h0 = self.fwd.zero_state(g)?;
        let mut hf = h0;
        for &x in inputs {
            hf = self.fwd.step(g, x, hf)?;
        }
        let mut hb = self.bwd.zero_state(g)?;
        for &x in inputs.iter().rev() {
            hb = self.bwd.step(g, x, hb)?;
        }
        g.concat_cols(&[hf, hb])
    }
}

/// Long short-term memory cell (no peepholes).
///
/// ```text
/// i = sigmoid(x Wi + h Ui + bi)    f = sigmoid(x Wf + h Uf + bf)
/// g = tanh(x Wg + h Ug + bg)       o = sigmoid(x Wo + h Uo + bo)
/// c' = f * c + i * g               h' = o * tanh(c')
/// ```
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Gate,
    pub forget: Gate,
    pub cell: Gate,
    pub output: Gate,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(LstmCell {
            input: Gate::new(store, &format!("{name}.input"), d_in, d_hidden, rng)?,
            forget: Gate::new(store, &format!("{name}.forget"), d_in, d_hidden, rng)?,
            cell: Gate::new(store, &format!("{name}.cell"), d_in, d_hidden, rng)?,
            output: Gate::new(store, &format!("{name}.output"), d_in, d_hidden, rng)?,
            d_in,
            d_hidden,
        })
    }

    /// One step; returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let i = self.input.pre_activation(g, x, h)?;
        let i = g.sigmoid(i)?;
        let f = self.forget.pre_activation(g, x, h)?;
        let f = g.sigmoid(f)?;
        let cand = self.cell.pre_activation(g, x, h)?;
        let cand = g.tanh(cand)?;
        let o = self.output.pre_activation(g, x, h)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next)?;
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Bidirectional LSTM producing one `[1 x 2h]` output per position.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), d_in, d_hidden, rng)?,
            bwd: LstmCell::new(store, &format!("{name}.bwd"), d_in, d_hidden, rng)?,
        })
    }

    pub fn d_out(&self) -> usize {
        2 * self.fwd.d_hidden
    }

    /// Position `k` (0-based) holds the forward state after `k + 1` steps
    /// next to the backward state after `L - k` steps.
    pub fn encode(&self, g: &mut Graph, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("bidirectional LSTM input"));
        }
        let run = |cell: &LstmCell, g: &mut Graph, xs: &mut dyn Iterator<Item = Var>| -> Result<Vec<Var>> {
            let mut h = g.row(vec![0.0; cell.d_hidden])?;
            let mut c = h;
            let mut out = Vec::new();
            for x in xs {
                (h, c) = cell.step(g, x, h, c)?;
                out.push(h);
            }
            Ok(out)
        };
        let forward = run(&self.fwd, g, &mut inputs.iter().copied())?;
        let mut backward = run(&self.bwd, g, &mut inputs.iter().rev().copied())?;
        backward.reverse();
        forward
            .into_iter()
            .zip(backward)
            .map(|(f, b)| g.concat_cols(&[f, b]))
            .collect()
    }
}
