//! Atom embeddings and permutation-equivariant set blocks.
//!
//! An atom is a `(feature, value)` pair. Its embedding is
//! `MLP([F, gate(F) ⊙ V])` where `F` is the feature embedding and `V` the
//! value encoding: sinusoids of the normalised value for continuous
//! features, the category's embedding for categorical ones and one shared
//! missing token otherwise. Missing tokens are not gated, so they stay
//! identical across features.
//!
//! Set blocks are pre-norm transformer layers without positional encodings:
//! `h = x + MHA(LN(x))`, `y = h + FFN(LN(h))`. Several sets can share one
//! block call through a block-diagonal attention mask; masked scores
//! contribute exact zeros, so the result equals per-set evaluation.

use std::f64::consts::PI;

use setinfer_numerics::{Graph, ParamId, Tensor, Var};

use crate::{Error, Result};

/// Score added to attention logits between different sets.
const MASKED: f64 = -1e30;

/// `[sin(2^j·π·v), cos(2^j·π·v)]` for `j < n_freq`, sines first.
pub fn value_features(v: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freq);
    out.extend((0..n_freq).map(|j| ((1u64 << j) as f64 * PI * v).sin()));
    out.extend((0..n_freq).map(|j| ((1u64 << j) as f64 * PI * v).cos()));
    out
}

#[derive(Clone, Copy, Debug)]
pub struct AtomParams {
    /// `[2·n_freq, d]`
    pub val_w: ParamId,
    pub val_b: ParamId,
    /// `[1, d]`
    pub missing: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    /// `[2d, d]`
    pub mlp1_w: ParamId,
    pub mlp1_b: ParamId,
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
}

/// Value half of an atom, resolved against its feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AtomValue {
    Continuous(f64),
    /// Row `index` of the category table of feature slot `slot`.
    Category { slot: usize, index: usize },
    Missing,
}

/// Value encodings `[n, d]` for `values`, in order.
pub fn encode_values(
    g: &mut Graph,
    p: &AtomParams,
    values: &[AtomValue],
    n_freq: usize,
    category_tables: &[Option<Var>],
) -> Result<Var> {
    let n = values.len();
    let mut parts = Vec::new();
    // Position of each value inside the concatenation of `parts`.
    let mut order = vec![0; n];
    let mut offset = 0;

    let cont: Vec<usize> = (0..n).filter(|&i| matches!(values[i], AtomValue::Continuous(_))).collect();
    if !cont.is_empty() {
        let mut data = Vec::with_capacity(cont.len() * 2 * n_freq);
        for &i in &cont {
            let AtomValue::Continuous(v) = values[i] else { unreachable!() };
            data.extend(value_features(v, n_freq));
        }
        let x = g.constant(Tensor::matrix(cont.len(), 2 * n_freq, data)?);
        let w = g.param(p.val_w);
        let b = g.param(p.val_b);
        parts.push(g.linear(x, w, b)?);
        for (k, &i) in cont.iter().enumerate() {
            order[i] = offset + k;
        }
        offset += cont.len();
    }

    for (i, v) in values.iter().enumerate() {
        if let AtomValue::Category { slot, index } = *v {
            let table = category_tables
                .get(slot)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Model(format!("feature slot {slot} has no categories")))?;
            let k = g.shape(table).0;
            if index >= k {
                return Err(Error::Model(format!("category index {index} out of range for {k} choices")));
            }
            parts.push(g.select_rows(table, &[index])?);
            order[i] = offset;
            offset += 1;
        }
    }

    let n_missing = values.iter().filter(|v| matches!(v, AtomValue::Missing)).count();
    if n_missing > 0 {
        let m = g.param(p.missing);
        parts.push(g.select_rows(m, &vec![0; n_missing])?);
        let mut k = 0;
        for (i, v) in values.iter().enumerate() {
            if matches!(v, AtomValue::Missing) {
                order[i] = offset + k;
                k += 1;
            }
        }
    }

    if parts.is_empty() {
        return Err(Error::Model("no atoms to encode".into()));
    }
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        Ok(stacked)
    } else {
        Ok(g.select_rows(stacked, &order)?)
    }
}

/// Atom embeddings `[n, d]` from feature rows `[n, d]` and values.
pub fn atom_embed(
    g: &mut Graph,
    p: &AtomParams,
    features: Var,
    values: &[AtomValue],
    n_freq: usize,
    category_tables: &[Option<Var>],
) -> Result<Var> {
    let (n, d) = g.shape(features);
    if n != values.len() {
        return Err(Error::Model(format!("{n} feature rows for {} values", values.len())));
    }
    let v = encode_values(g, p, values, n_freq, category_tables)?;
    let gw = g.param(p.gate_w);
    let gb = g.param(p.gate_b);
    let gate = g.linear(features, gw, gb)?;
    let mut gate = g.sigmoid(gate);
    if values.iter().any(|v| matches!(v, AtomValue::Missing)) {
        let mut keep = Vec::with_capacity(n * d);
        for v in values {
            let m = if matches!(v, AtomValue::Missing) { 0.0 } else { 1.0 };
            keep.extend(std::iter::repeat_n(m, d));
        }
        let keep = Tensor::matrix(n, d, keep)?;
        let pass = g.constant(keep.map(|m| 1.0 - m));
        let keep = g.constant(keep);
        let gated = g.mul(gate, keep)?;
        gate = g.add(gated, pass)?;
    }
    let cond = g.mul(v, gate)?;
    let x = g.concat_cols(&[features, cond])?;
    let w1 = g.param(p.mlp1_w);
    let b1 = g.param(p.mlp1_b);
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h);
    let w2 = g.param(p.mlp2_w);
    let b2 = g.param(p.mlp2_b);
    Ok(g.linear(h, w2, b2)?)
}

#[derive(Clone, Copy, Debug)]
pub struct SetBlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

/// Layer norm with learned gain and bias.
pub fn layer_norm_affine(g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let gain = g.param(gain);
    let bias = g.param(bias);
    let s = g.mul(n, gain)?;
    Ok(g.add(s, bias)?)
}

/// Additive attention mask allowing attention only within a group.
pub fn group_mask(groups: &[usize]) -> Tensor {
    let n = groups.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if groups[i] != groups[j] {
                data[i * n + j] = MASKED;
            }
        }
    }
    Tensor::matrix(n, n, data).expect("square mask")
}

/// Multi-head self-attention over the rows of `x`.
pub fn self_attention(g: &mut Graph, p: &SetBlockParams, x: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let d = g.shape(x).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Model(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let wq = g.param(p.wq);
    let wk = g.param(p.wk);
    let wv = g.param(p.wv);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let s = g.matmul_t(qh, kh)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let wo = g.param(p.wo);
    Ok(g.matmul(o, wo)?)
}

pub fn set_block(g: &mut Graph, p: &SetBlockParams, x: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let n1 = layer_norm_affine(g, x, p.ln1_g, p.ln1_b)?;
    let a = self_attention(g, p, n1, heads, mask)?;
    let h = g.add(x, a)?;
    let n2 = layer_norm_affine(g, h, p.ln2_g, p.ln2_b)?;
    let w1 = g.param(p.ff1_w);
    let b1 = g.param(p.ff1_b);
    let f = g.linear(n2, w1, b1)?;
    let f = g.gelu(f);
    let w2 = g.param(p.ff2_w);
    let b2 = g.param(p.ff2_b);
    let f = g.linear(f, w2, b2)?;
    Ok(g.add(h, f)?)
}

/// Apply `blocks` in sequence. `groups[i]` names the set that row `i`
/// belongs to; rows only attend within their set.
pub fn set_stack(
    g: &mut Graph,
    blocks: &[SetBlockParams],
    x: Var,
    heads: usize,
    groups: Option<&[usize]>,
) -> Result<Var> {
    let n = g.shape(x).0;
    if n == 0 {
        return Err(Error::Model("cannot encode an empty set".into()));
    }
    let mask = match groups {
        Some(gr) if gr.iter().any(|&k| k != gr[0]) => {
            if gr.len() != n {
                return Err(Error::Model(format!("{} group labels for {n} rows", gr.len())));
            }
            Some(g.constant(group_mask(gr)))
        }
        _ => None,
    };
    let mut h = x;
    for b in blocks {
        h = set_block(g, b, h, heads, mask)?;
    }
    Ok(h)
}

/// Encode one instance: atom embeddings `[n, d]` through the block stack.
pub fn instance_encode(g: &mut Graph, blocks: &[SetBlockParams], atoms: Var, heads: usize) -> Result<Var> {
    set_stack(g, blocks, atoms, heads, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_features_at_zero_and_half() {
        let f = value_features(0.0, 4);
        assert!(f[..4].iter().all(|&s| s == 0.0));
        assert!(f[4..].iter().all(|&c| c == 1.0));
        let h = value_features(0.5, 4);
        assert!((h[0] - 1.0).abs() < 1e-15);
        assert!(h[4].abs() < 1e-15);
    }

    #[test]
    fn group_mask_is_block_diagonal() {
        let m = group_mask(&[0, 0, 1]);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(0, 2), MASKED);
        assert_eq!(m.get(2, 2), 0.0);
    }
}
