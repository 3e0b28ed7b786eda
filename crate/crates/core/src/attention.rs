//! Multi-head scaled dot-product attention over token matrices.
//!
//! Token matrices are `[S, d]` graph nodes. Keys and values are projected
//! separately from the query so callers can cache them per view.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttnConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "n_heads {n_heads} must divide d_model {d_model}"
            )));
        }
        Ok(Self { d_model, n_heads })
    }

    /// One head per 64 channels, at least one head.
    pub fn with_default_heads(d_model: usize) -> Result<Self> {
        Self::new(d_model, (d_model / 64).max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Boolean `[queries, keys]` matrix; `true` means the query may attend.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    bits: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(queries: usize, keys: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != queries * keys {
            return Err(Error::shape(
                "attn_mask",
                format!("{} bits for {queries}x{keys}", bits.len()),
            ));
        }
        if let Some(row) = (0..queries).find(|&q| !bits[q * keys..(q + 1) * keys].iter().any(|&b| b)) {
            return Err(Error::contract(format!("mask row {row} attends to nothing")));
        }
        Ok(Self {
            queries,
            keys,
            bits: Arc::new(bits),
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.keys + k]
    }

    pub fn bits(&self) -> &Arc<Vec<bool>> {
        &self.bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    MaskedLvsm,
}

/// Mask for one sequence laid out as `N*P` input tokens followed by `M*P`
/// target tokens. Input rows see their own view only; target rows see every
/// input token plus their own target view.
pub fn build_variant_mask(variant: MaskVariant, n: usize, m: usize, p: usize) -> Result<AttnMask> {
    match variant {
        MaskVariant::MaskedLvsm => {
            if n == 0 || p == 0 {
                return Err(Error::contract("masked_lvsm needs at least one input view and patch"));
            }
            let len = (n + m) * p;
            let view_of = |t: usize| t / p;
            let mut bits = vec![false; len * len];
            for q in 0..len {
                let qv = view_of(q);
                for k in 0..len {
                    let kv = view_of(k);
                    bits[q * len + k] = if qv < n { kv == qv } else { kv < n || kv == qv };
                }
            }
            AttnMask::new(len, len, bits)
        }
    }
}

/// Parameters of one attention block, weights stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// FLOP-counter labels for the three matmul groups of an attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnScopes {
    pub q_out_proj: &'static str,
    pub kv_proj: &'static str,
    pub scores: &'static str,
}

impl AttnScopes {
    pub const fn uniform(label: &'static str) -> Self {
        Self {
            q_out_proj: label,
            kv_proj: label,
            scores: label,
        }
    }
}

/// Projected keys and values of one key/value source.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

pub fn project_kv<T: Real>(g: &mut Graph<T>, x: Var, w: &AttnWeights, scopes: AttnScopes) -> Result<KeyValue> {
    let prev = g.set_scope(scopes.kv_proj);
    let k = g.linear(x, w.wk, Some(w.bk))?;
    let v = g.linear(x, w.wv, Some(w.bv))?;
    g.set_scope(prev);
    Ok(KeyValue { k, v })
}

/// Attends `queries` to pre-projected key/value sources, concatenated along
/// the key axis in the given order, and applies the output projection.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    memory: &[KeyValue],
    cfg: &AttnConfig,
    mask: Option<&AttnMask>,
    w: &AttnWeights,
    scopes: AttnScopes,
) -> Result<Var> {
    if memory.is_empty() {
        return Err(Error::contract("attention needs at least one key/value source"));
    }
    let qshape = g.shape(queries).to_vec();
    if qshape.len() != 2 || qshape[1] != cfg.d_model {
        return Err(Error::shape(
            "attention",
            format!("queries {qshape:?} for d_model {}", cfg.d_model),
        ));
    }
    for kv in memory {
        let ks = g.shape(kv.k);
        if ks.len() != 2 || ks[1] != cfg.d_model {
            return Err(Error::shape("attention", format!("keys {ks:?} for d_model {}", cfg.d_model)));
        }
    }
    let (k, v) = if memory.len() == 1 {
        (memory[0].k, memory[0].v)
    } else {
        let ks: Vec<Var> = memory.iter().map(|m| m.k).collect();
        let vs: Vec<Var> = memory.iter().map(|m| m.v).collect();
        (g.concat(&ks, 0)?, g.concat(&vs, 0)?)
    };
    let sq = qshape[0];
    let sk = g.shape(k)[0];
    if let Some(m) = mask {
        if m.queries() != sq || m.keys() != sk {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{} for {sq} queries and {sk} keys", m.queries(), m.keys()),
            ));
        }
    }

    let prev = g.set_scope(scopes.q_out_proj);
    let q = g.linear(queries, w.wq, Some(w.bq))?;
    g.set_scope(scopes.scores);
    let ctx = scaled_dot_product(g, q, k, v, cfg, mask)?;
    g.set_scope(scopes.q_out_proj);
    let out = g.linear(ctx, w.wo, Some(w.bo))?;
    g.set_scope(prev);
    Ok(out)
}

/// Multi-head softmax(q·kᵀ/√hd)·v over already projected `[S, d]` matrices,
/// heads merged back into `[Sq, d]`.
pub fn scaled_dot_product<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttnConfig,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let sq = g.shape(q)[0];
    let sk = g.shape(k)[0];
    let h = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    if h == 1 {
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let s = match mask {
            Some(m) => g.masked_fill(s, m.bits().clone())?,
            None => s,
        };
        let a = g.softmax(s, 1)?;
        return g.matmul(a, v);
    }
    let qh = g.reshape(q, &[sq, h, hd])?;
    let qh = g.permute(qh, &[1, 0, 2])?;
    let kh = g.reshape(k, &[sk, h, hd])?;
    let kh = g.permute(kh, &[1, 2, 0])?;
    let vh = g.reshape(v, &[sk, h, hd])?;
    let vh = g.permute(vh, &[1, 0, 2])?;
    let s = g.matmul(qh, kh)?;
    let s = g.scale(s, scale);
    let s = match mask {
        Some(m) => g.masked_fill(s, m.bits().clone())?,
        None => s,
    };
    let a = g.softmax(s, 2)?;
    let o = g.matmul(a, vh)?;
    let o = g.permute(o, &[1, 0, 2])?;
    g.reshape(o, &[sq, cfg.d_model])
}

/// Full multi-head attention: keys and values come from `kv_tokens`
/// concatenated in order.
pub fn mha<T: Real>(
    g: &mut Graph<T>,
    q_tokens: Var,
    kv_tokens: &[Var],
    cfg: &AttnConfig,
    mask: Option<&AttnMask>,
    w: &AttnWeights,
    scopes: AttnScopes,
) -> Result<Var> {
    if kv_tokens.is_empty() {
        return Err(Error::contract("attention needs at least one key/value grid"));
    }
    let memory = kv_tokens
        .iter()
        .map(|&t| project_kv(g, t, w, scopes))
        .collect::<Result<Vec<_>>>()?;
    attend(g, q_tokens, &memory, cfg, mask, w, scopes)
}
