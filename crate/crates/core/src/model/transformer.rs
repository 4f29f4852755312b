//! Pre-norm rotary transformer stack.

use numkit::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::bind::Binder;
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackShape {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rotary_base: f64,
}

pub fn init_layer_norm<F: Scalar>(params: &mut ParamStore<F>, name: &str, width: usize) {
    params.insert(format!("{name}.g"), Tensor::ones([width]));
    params.insert(format!("{name}.b"), Tensor::zeros([width]));
}

pub fn init_stack<F: Scalar, R: Rng + ?Sized>(
    params: &mut ParamStore<F>,
    prefix: &str,
    shape: &StackShape,
    std: f64,
    rng: &mut R,
) {
    let w = shape.width;
    let hidden = w * shape.mlp_ratio;
    for l in 0..shape.depth {
        let p = format!("{prefix}.{l}");
        init_layer_norm(params, &format!("{p}.ln1"), w);
        for m in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{p}.{m}"), Tensor::randn([w, w], std, rng));
        }
        init_layer_norm(params, &format!("{p}.ln2"), w);
        params.insert(format!("{p}.mlp.w1"), Tensor::randn([w, hidden], std, rng));
        params.insert(format!("{p}.mlp.b1"), Tensor::zeros([hidden]));
        params.insert(format!("{p}.mlp.w2"), Tensor::randn([hidden, w], std, rng));
        params.insert(format!("{p}.mlp.b2"), Tensor::zeros([w]));
    }
    init_layer_norm(params, &format!("{prefix}.ln_f"), w);
}

pub fn layer_norm<F: Scalar>(tape: &mut Tape<F>, b: &Binder<F>, name: &str, x: Var) -> Result<Var> {
    let g = b.get(tape, &format!("{name}.g"))?;
    let beta = b.get(tape, &format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, beta, LN_EPS)?)
}

pub fn linear<F: Scalar>(tape: &mut Tape<F>, b: &Binder<F>, name: &str, x: Var) -> Result<Var> {
    let w = b.get(tape, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    let bias = b.get(tape, &format!("{name}.b"))?;
    Ok(tape.add_row(y, bias)?)
}

/// Multi-head self-attention over all rows of `h`, with rotary phases taken
/// from `positions`.
pub fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    b: &Binder<F>,
    p: &str,
    h: Var,
    positions: &[f64],
    shape: &StackShape,
) -> Result<Var> {
    let wq = b.get(tape, &format!("{p}.wq"))?;
    let wk = b.get(tape, &format!("{p}.wk"))?;
    let wv = b.get(tape, &format!("{p}.wv"))?;
    let wo = b.get(tape, &format!("{p}.wo"))?;
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let dh = shape.width / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(shape.heads);
    for head in 0..shape.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let qh = tape.rotary(qh, positions, shape.rotary_base)?;
        let kh = tape.rotary(kh, positions, shape.rotary_base)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        outs.push(tape.matmul(attn, vh)?);
    }
    let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(tape.matmul(o, wo)?)
}

pub fn block<F: Scalar>(
    tape: &mut Tape<F>,
    b: &Binder<F>,
    p: &str,
    x: Var,
    positions: &[f64],
    shape: &StackShape,
) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{p}.ln1"), x)?;
    let a = attention(tape, b, p, h, positions, shape)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, b, &format!("{p}.ln2"), x)?;
    let h = linear_named(tape, b, &format!("{p}.mlp.w1"), &format!("{p}.mlp.b1"), h)?;
    let h = tape.gelu(h);
    let h = linear_named(tape, b, &format!("{p}.mlp.w2"), &format!("{p}.mlp.b2"), h)?;
    Ok(tape.add(x, h)?)
}

fn linear_named<F: Scalar>(tape: &mut Tape<F>, b: &Binder<F>, w: &str, bias: &str, x: Var) -> Result<Var> {
    let w = b.get(tape, w)?;
    let y = tape.matmul(x, w)?;
    let bias = b.get(tape, bias)?;
    Ok(tape.add_row(y, bias)?)
}

/// All blocks followed by the final layer norm.
pub fn stack<F: Scalar>(
    tape: &mut Tape<F>,
    b: &Binder<F>,
    prefix: &str,
    mut x: Var,
    positions: &[f64],
    shape: &StackShape,
) -> Result<Var> {
    for l in 0..shape.depth {
        x = block(tape, b, &format!("{prefix}.{l}"), x, positions, shape)?;
    }
    layer_norm(tape, b, &format!("{prefix}.ln_f"), x)
}
