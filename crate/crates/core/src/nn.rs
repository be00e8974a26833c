//! Parameter layout and forward helpers shared by the transformer models.
//!
//! Parameters are addressed by dotted names; each helper pair
//! (`add_*` / forward fn) agrees on the suffixes it uses.

use rand::Rng;

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a) as f32).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

pub fn add_linear(ps: &mut ParamSet<f32>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
    ps.insert(format!("{prefix}.w"), xavier_uniform(fan_in, fan_out, rng))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]))
}

pub fn add_layer_norm(ps: &mut ParamSet<f32>, prefix: &str, d: usize) -> Result<()> {
    ps.insert(format!("{prefix}.g"), Tensor::filled(vec![d], 1.0))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]))
}

/// Query/key/value/output projections, each `d×d` with bias.
pub fn add_attention(ps: &mut ParamSet<f32>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        add_linear(ps, &format!("{prefix}.{p}"), d, d, rng)?;
    }
    Ok(())
}

pub fn add_ffn(ps: &mut ParamSet<f32>, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<()> {
    add_linear(ps, &format!("{prefix}.fc1"), d, d_ff, rng)?;
    add_linear(ps, &format!("{prefix}.fc2"), d_ff, d, rng)
}

pub fn linear_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

pub fn attention_count(d: usize) -> usize {
    4 * linear_count(d, d)
}

pub fn ffn_count(d: usize, d_ff: usize) -> usize {
    linear_count(d, d_ff) + linear_count(d_ff, d)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    tape.linear(x, w, bias)
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{prefix}.g"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    tape.layer_norm(x, g, bias, LAYER_NORM_EPS)
}

/// Multi-head attention whose queries and keys come from `qk_src` and
/// values from `v_src`. Returns the output projection and the attention
/// core node (which carries the weights).
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    prefix: &str,
    qk_src: Var,
    v_src: Var,
    groups: usize,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let q = linear(tape, b, &format!("{prefix}.q"), qk_src)?;
    let k = linear(tape, b, &format!("{prefix}.k"), qk_src)?;
    let v = linear(tape, b, &format!("{prefix}.v"), v_src)?;
    let core = tape.attention(q, k, v, groups, heads, Some(mask))?;
    let out = linear(tape, b, &format!("{prefix}.o"), core)?;
    Ok((out, core))
}

pub fn ffn<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{prefix}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, b, &format!("{prefix}.fc2"), h)
}

/// Pre-norm feed-forward sublayer: `x + FFN(LN(x))`.
pub fn ffn_residual<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let n = layer_norm(tape, b, &format!("{prefix}.ln2"), x)?;
    let f = ffn(tape, b, &format!("{prefix}.ffn"), n)?;
    tape.add(x, f)
}

/// Rows of a matrix given as `f32` vectors, converted to `T`.
pub fn matrix<T: Real>(rows: usize, cols: usize, data: impl IntoIterator<Item = f32>) -> Result<Tensor<T>> {
    Tensor::new(vec![rows, cols], data.into_iter().map(|x| T::lit(x as f64)).collect())
}
