//! Recurrent and attention building blocks shared by the speaker and the
//! follower. Everything is batched: a step consumes `[batch, dim]` rows.

use foam_autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const INIT_RANGE: f32 = 0.08;
/// Added to logits that must receive zero probability.
pub const MASKED_LOGIT: f32 = -1.0e9;

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn add_linear<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, output: usize) {
    ps.insert(format!("{name}.w"), uniform(rng, &[input, output]));
    ps.insert(format!("{name}.b"), uniform(rng, &[output]));
}

/// `x W + b`.
pub fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{name}.w")))?;
    Ok(tape.add(y, b.var(&format!("{name}.b")))?)
}

pub fn add_gru<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, input: usize, hidden: usize) {
    ps.insert(format!("{name}.w_ih"), uniform(rng, &[input, 3 * hidden]));
    ps.insert(format!("{name}.w_hh"), uniform(rng, &[hidden, 3 * hidden]));
    ps.insert(format!("{name}.b_ih"), uniform(rng, &[3 * hidden]));
    ps.insert(format!("{name}.b_hh"), uniform(rng, &[3 * hidden]));
}

/// One gated recurrent step.
///
/// ```text
/// r = σ(x W_ir + h W_hr)     z = σ(x W_iz + h W_hz)
/// n = tanh(x W_in + r ⊙ (h W_hn))
/// h' = n + z ⊙ (h - n)
/// ```
///
/// Rows whose `keep` entry is 0 carry `h` through unchanged.
pub fn gru_step(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    x: Var,
    h: Var,
    hidden: usize,
    keep: Option<Var>,
) -> Result<Var> {
    let gi = tape.matmul(x, b.var(&format!("{name}.w_ih")))?;
    let gi = tape.add(gi, b.var(&format!("{name}.b_ih")))?;
    let gh = tape.matmul(h, b.var(&format!("{name}.w_hh")))?;
    let gh = tape.add(gh, b.var(&format!("{name}.b_hh")))?;
    let gates_i = tape.slice_cols(gi, 0, 2 * hidden)?;
    let gates_h = tape.slice_cols(gh, 0, 2 * hidden)?;
    let rz = tape.add(gates_i, gates_h)?;
    let rz = tape.sigmoid(rz)?;
    let r = tape.slice_cols(rz, 0, hidden)?;
    let z = tape.slice_cols(rz, hidden, hidden)?;
    let n_i = tape.slice_cols(gi, 2 * hidden, hidden)?;
    let n_h = tape.slice_cols(gh, 2 * hidden, hidden)?;
    let n_h = tape.mul(r, n_h)?;
    let n = tape.add(n_i, n_h)?;
    let n = tape.tanh(n)?;
    let d = tape.sub(h, n)?;
    let d = tape.mul(z, d)?;
    let h_new = tape.add(n, d)?;
    match keep {
        None => Ok(h_new),
        Some(k) => {
            let delta = tape.sub(h_new, h)?;
            let delta = tape.mul(delta, k)?;
            Ok(tape.add(h, delta)?)
        }
    }
}

/// Encoder output laid out for batched attention.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `[batch * len, hidden]`, row `b * len + t` is step `t` of item `b`.
    pub states: Var,
    /// `[batch, len]`, 0 at valid positions and [`MASKED_LOGIT`] at padding.
    pub mask: Var,
    /// Final hidden state per item, `[batch, hidden]`.
    pub last: Var,
    pub batch: usize,
    pub len: usize,
    pub hidden: usize,
}

/// Runs a GRU over `inputs` (one `[batch, dim]` var per step).
pub fn encode(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    inputs: &[Var],
    lengths: &[usize],
    hidden: usize,
) -> Result<Memory> {
    let batch = lengths.len();
    let len = inputs.len();
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut steps = Vec::with_capacity(len);
    for (t, &x) in inputs.iter().enumerate() {
        let keep = if lengths.iter().all(|&l| l > t) {
            None
        } else {
            let k = lengths.iter().map(|&l| f32::from(u8::from(l > t))).collect();
            Some(tape.constant(Tensor::new(vec![batch, 1], k)?))
        };
        h = gru_step(tape, b, name, x, h, hidden, keep)?;
        steps.push(h);
    }
    let wide = tape.concat(&steps)?;
    let states = tape.reshape(wide, &[batch * len, hidden])?;
    let mut mask = Vec::with_capacity(batch * len);
    for &l in lengths {
        mask.extend((0..len).map(|t| if t < l { 0.0 } else { MASKED_LOGIT }));
    }
    let mask = tape.constant(Tensor::new(vec![batch, len], mask)?);
    Ok(Memory {
        states,
        mask,
        last: h,
        batch,
        len,
        hidden,
    })
}

impl Memory {
    /// Memory for items `rows` of `self` (repeats allowed).
    pub fn select(&self, tape: &mut Tape, rows: &[usize]) -> Result<Memory> {
        let state_rows: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * self.len)..(r + 1) * self.len)
            .collect();
        let states = tape.gather(self.states, &state_rows)?;
        let mask = tape.gather(self.mask, rows)?;
        let last = tape.gather(self.last, rows)?;
        Ok(Memory {
            states,
            mask,
            last,
            batch: rows.len(),
            len: self.len,
            hidden: self.hidden,
        })
    }
}

/// Dot-product attention of `query` (`[batch, hidden]`, already projected)
/// over `mem`. Returns the `[batch, hidden]` context.
pub fn attend(tape: &mut Tape, mem: &Memory, query: Var) -> Result<Var> {
    let (bsz, len, hid) = (mem.batch, mem.len, mem.hidden);
    let rows: Vec<usize> = (0..bsz).flat_map(|i| std::iter::repeat_n(i, len)).collect();
    let q = tape.gather(query, &rows)?;
    let prod = tape.mul(q, mem.states)?;
    let ones = tape.constant(Tensor::full(&[hid, 1], 1.0));
    let scores = tape.matmul(prod, ones)?;
    let scores = tape.reshape(scores, &[bsz, len])?;
    let scores = tape.add(scores, mem.mask)?;
    let weights = tape.softmax(scores)?;
    let weights = tape.reshape(weights, &[bsz * len, 1])?;
    let weighted = tape.mul(mem.states, weights)?;
    Ok(tape.sum_groups(weighted, len)?)
}

/// Row-wise one-hot matrix.
pub fn one_hot(ids: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * width];
    for (r, &i) in ids.iter().enumerate() {
        data[r * width + i] = 1.0;
    }
    Tensor::new(vec![ids.len(), width], data).expect("shape matches data")
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
