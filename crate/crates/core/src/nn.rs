//! Shared network building blocks: pre-LN attention and transformer layers.

use crate::error::Result;
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Mean over rows of a 2-D tensor, keeping a [1, D] shape.
pub fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let ones = tape.constant(Tensor::new(vec![1, rows], vec![1.0 / rows as f64; rows])?);
    tape.matmul(ones, x)
}

/// Pre-normalized self-attention residual: x + W_o·MHA(W_q x̂, W_k x̂, W_v x̂).
pub fn attention_sublayer(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let g = tape.param(store, &format!("{prefix}.ln1_g"), &[d], Init::Uniform);
    let b = tape.param(store, &format!("{prefix}.ln1_b"), &[d], Init::Zeros);
    let xn = tape.layer_norm(x, g, b, LN_EPS)?;
    let proj = |tape: &mut Tape, store: &mut ParamStore, name: &str| -> Result<Var> {
        let w = tape.param(store, &format!("{prefix}.{name}_w"), &[d, d], Init::Uniform);
        let bb = tape.param(store, &format!("{prefix}.{name}_b"), &[d], Init::Uniform);
        tape.linear(xn, w, bb)
    };
    let q = proj(tape, store, "q")?;
    let k = proj(tape, store, "k")?;
    let v = proj(tape, store, "v")?;
    let attn = tape.multi_head_attention(q, k, v, heads, mask)?;
    let ow = tape.param(store, &format!("{prefix}.o_w"), &[d, d], Init::Uniform);
    let ob = tape.param(store, &format!("{prefix}.o_b"), &[d], Init::Uniform);
    let o = tape.linear(attn, ow, ob)?;
    tape.add(x, o)
}

/// Pre-LN transformer layer: self-attention and feed-forward residuals with
/// a 4× hidden expansion.
pub fn transformer_layer(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let x = attention_sublayer(tape, store, prefix, x, heads, mask)?;
    let g = tape.param(store, &format!("{prefix}.ln2_g"), &[d], Init::Uniform);
    let b = tape.param(store, &format!("{prefix}.ln2_b"), &[d], Init::Zeros);
    let xn = tape.layer_norm(x, g, b, LN_EPS)?;
    let w1 = tape.param(store, &format!("{prefix}.ff1_w"), &[d, 4 * d], Init::Uniform);
    let b1 = tape.param(store, &format!("{prefix}.ff1_b"), &[4 * d], Init::Uniform);
    let h = tape.linear(xn, w1, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(store, &format!("{prefix}.ff2_w"), &[4 * d, d], Init::Uniform);
    let b2 = tape.param(store, &format!("{prefix}.ff2_b"), &[d], Init::Uniform);
    let ff = tape.linear(h, w2, b2)?;
    tape.add(x, ff)
}

/// Linear → ReLU → LayerNorm projection block.
pub fn linear_relu_norm(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    d_out: usize,
) -> Result<Var> {
    let d_in = *tape.shape(x).last().unwrap();
    let w = tape.param(store, &format!("{prefix}.proj_w"), &[d_in, d_out], Init::Uniform);
    let b = tape.param(store, &format!("{prefix}.proj_b"), &[d_out], Init::Uniform);
    let h = tape.linear(x, w, b)?;
    let h = tape.relu(h);
    let g = tape.param(store, &format!("{prefix}.proj_g"), &[d_out], Init::Uniform);
    let bb = tape.param(store, &format!("{prefix}.proj_nb"), &[d_out], Init::Zeros);
    tape.layer_norm(h, g, bb, LN_EPS)
}
