//! Parameterized building blocks. Each block owns the names of its
//! parameters; values live in a [`ParamStore`] and are bound per forward pass
//! through a [`Graph`].

use serde::{Deserialize, Serialize};

use super::params::{Graph, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` for `x[…×din]`, `W[dout×din]`, `b[dout]`. A 1-D `x` is
/// treated as a single row and the result is 1-D again.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let dout = tape.value(weight).shape()[0];
    let as_matrix = match xs.len() {
        1 => tape.reshape(x, &[1, xs[0]])?,
        2 => x,
        _ => {
            return Err(TensorError::Invalid {
                op: "linear",
                msg: format!("expected 1-D or 2-D input, got {xs:?}"),
            })
        }
    };
    let mut y = tape.matmul_nt(as_matrix, weight)?;
    if let Some(b) = bias {
        y = tape.add_row_bias(y, b)?;
    }
    if xs.len() == 1 {
        y = tape.reshape(y, &[dout])?;
    }
    Ok(y)
}

/// Arithmetic mean over the frames of `x[T×d]`.
pub fn mean_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

/// Row lookup of `ids` into `table[V×d]`, giving `L×d`.
pub fn embed_tokens(tape: &mut Tape, ids: &[usize], table: Var) -> Result<Var> {
    tape.gather(table, ids)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        with_bias: bool,
        seed: u64,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.init_uniform(&weight, &[dout, din], din, seed);
        let bias = with_bias.then(|| {
            let b = format!("{name}.bias");
            store.init_uniform(&b, &[dout], din, seed);
            b
        });
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for name in std::iter::once(&self.weight).chain(&self.bias) {
            if let Some(t) = store.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let width = g.value(x).last_dim();
        if width != self.din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: g.value(x).shape().to_vec(),
                right: vec![self.dout, self.din],
            });
        }
        let w = g.param(&self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(g.param(name)?),
            None => None,
        };
        linear(&mut g.tape, x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub width: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.init_const(&gamma, &[width], 1.0);
        store.init_const(&beta, &[width], 0.0);
        Self {
            gamma,
            beta,
            width,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.tape.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: String,
    pub vocab: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, width: usize, seed: u64) -> Self {
        let table = format!("{name}.table");
        store.init_uniform(&table, &[vocab, width], 1, seed);
        Self {
            table,
            vocab,
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let t = g.param(&self.table)?;
        embed_tokens(&mut g.tape, ids, t)
    }

    pub fn num_params(&self) -> usize {
        self.vocab * self.width
    }
}

/// Shape of a (multi-head) attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub query_dim: usize,
    pub kv_dim: usize,
    pub out_dim: usize,
    /// Self-attention only: query frame `i` sees keys `j` with `|i − j| ≤ window`.
    #[serde(default)]
    pub window: Option<usize>,
}

impl AttentionConfig {
    /// One head of width 32, the context-fusion default.
    pub fn context_fusion(query_dim: usize, kv_dim: usize) -> Self {
        Self {
            num_heads: 1,
            head_dim: 32,
            query_dim,
            kv_dim,
            out_dim: query_dim,
            window: None,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Projection weights for one attention call, already bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
}

/// Scaled dot-product attention of `q_src[Tq×dq]` over `kv_src[Tk×dkv]`.
/// Heads are slices of the projected width, concatenated before the output
/// projection. Projections carry no bias, so a zero value projection gives a
/// zero output.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    cfg: &AttentionConfig,
    params: AttentionParams,
) -> Result<Var> {
    let kv_shape = tape.value(kv_src).shape().to_vec();
    if kv_shape.len() != 2 || kv_shape[0] == 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("key/value source must be a non-empty sequence, got {kv_shape:?}"),
        });
    }
    let q = linear(tape, q_src, params.query, None)?;
    let k = linear(tape, kv_src, params.key, None)?;
    let v = linear(tape, kv_src, params.value, None)?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mask = match cfg.window {
        Some(w) => Some(band_mask(tape.value(q_src).rows(), kv_shape[0], w)?),
        None => None,
    };
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            let start = h * cfg.head_dim;
            (
                tape.slice_cols(q, start, cfg.head_dim)?,
                tape.slice_cols(k, start, cfg.head_dim)?,
                tape.slice_cols(v, start, cfg.head_dim)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = &mask {
            let m = tape.constant(m.clone());
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores);
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, joined, params.out, None)
}

/// Additive mask that blocks keys farther than `window` from the query.
fn band_mask(rows: usize, cols: usize, window: usize) -> Result<Tensor> {
    if rows != cols {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("a windowed attention needs a square score matrix, got {rows}×{cols}"),
        });
    }
    let data = (0..rows * cols)
        .map(|k| if (k / cols).abs_diff(k % cols) <= window { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::new(vec![rows, cols], data)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, seed: u64) -> Self {
        let inner = cfg.inner_dim();
        Self {
            cfg,
            query: Linear::new(store, &format!("{name}.query"), cfg.query_dim, inner, false, seed),
            key: Linear::new(store, &format!("{name}.key"), cfg.kv_dim, inner, false, seed),
            value: Linear::new(store, &format!("{name}.value"), cfg.kv_dim, inner, false, seed),
            out: Linear::new(store, &format!("{name}.out"), inner, cfg.out_dim, false, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, q_src: Var, kv_src: Var) -> Result<Var> {
        for (v, want) in [(q_src, self.cfg.query_dim), (kv_src, self.cfg.kv_dim)] {
            if g.value(v).last_dim() != want {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: g.value(v).shape().to_vec(),
                    right: vec![want],
                });
            }
        }
        let params = AttentionParams {
            query: g.param(&self.query.weight)?,
            key: g.param(&self.key.weight)?,
            value: g.param(&self.value.weight)?,
            out: g.param(&self.out.weight)?,
        };
        multi_head_attention(&mut g.tape, q_src, kv_src, &self.cfg, params)
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.out.num_params()
    }
}

/// Pre-norm residual block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
/// Output projections start at zero, so a fresh layer is the identity map.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub width: usize,
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        num_heads: usize,
        ffn_width: usize,
        seed: u64,
    ) -> Self {
        let head_dim = width / num_heads.max(1);
        let cfg = AttentionConfig {
            num_heads,
            head_dim,
            query_dim: width,
            kv_dim: width,
            out_dim: width,
            window: None,
        };
        let layer = Self {
            width,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, seed),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), width, ffn_width, true, seed),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn_width, width, true, seed),
        };
        layer.attn.out.zero(store);
        layer.ffn_out.zero(store);
        layer
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.width {
            return Err(TensorError::ShapeMismatch {
                op: "transformer_layer",
                left: g.value(x).shape().to_vec(),
                right: vec![self.width],
            });
        }
        let n = self.norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, n)?;
        let h = g.tape.add(x, a)?;
        let n = self.norm_ffn.forward(g, h)?;
        let f = self.ffn_in.forward(g, n)?;
        let f = g.tape.gelu(f);
        let f = self.ffn_out.forward(g, f)?;
        g.tape.add(h, f)
    }

    pub fn num_params(&self) -> usize {
        self.norm_attn.num_params()
            + self.attn.num_params()
            + self.norm_ffn.num_params()
            + self.ffn_in.num_params()
            + self.ffn_out.num_params()
    }
}
