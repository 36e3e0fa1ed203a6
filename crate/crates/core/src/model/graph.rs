//! Tape registration and the forward graph shared by training and
//! evaluation. Registering with `trainable = false` records parameters as
//! constants, so backward skips the whole frozen subgraph.

use crate::numerics::{ParameterSet, Tape, Var};
use crate::{Error, Result};

use super::{ModelConfig, MLP_WIDTH_FACTOR};

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
}

/// Reference-model parameters registered on a tape.
pub struct ReferenceVars {
    pub emb: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    config: ModelConfig,
}

/// Adapter parameters registered on a tape.
pub struct AdapterVars {
    pub w1: Var,
    pub w2: Var,
}

fn register(
    tape: &mut Tape,
    params: &ParameterSet,
    set: Option<usize>,
    name: &str,
) -> Var {
    match set {
        Some(set) => tape.param(set, params, name),
        None => tape.constant(params.get(name).clone()),
    }
}

impl ReferenceVars {
    /// `set`: position of the reference ParameterSet in backward's slice, or
    /// None to freeze.
    pub fn register(
        tape: &mut Tape,
        params: &ParameterSet,
        config: &ModelConfig,
        set: Option<usize>,
    ) -> Self {
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |tape: &mut Tape, suffix: &str| {
                register(tape, params, set, &format!("layer{l}.{suffix}"))
            };
            layers.push(LayerVars {
                ln1_g: p(tape, "ln1.g"),
                ln1_b: p(tape, "ln1.b"),
                wq: p(tape, "wq"),
                wk: p(tape, "wk"),
                wv: p(tape, "wv"),
                wo: p(tape, "wo"),
                ln2_g: p(tape, "ln2.g"),
                ln2_b: p(tape, "ln2.b"),
                w_in: p(tape, "mlp.w_in"),
                b_in: p(tape, "mlp.b_in"),
                w_out: p(tape, "mlp.w_out"),
                b_out: p(tape, "mlp.b_out"),
            });
        }
        ReferenceVars {
            emb: register(tape, params, set, "emb"),
            pos: register(tape, params, set, "pos"),
            layers,
            lnf_g: register(tape, params, set, "ln_f.g"),
            lnf_b: register(tape, params, set, "ln_f.b"),
            config: config.clone(),
        }
    }

    /// Per-position hidden states: row i is the encoder state after reading
    /// tokens 1..=i+1, i.e. f(X_{<i+2}); it scores the next token at
    /// position i+2. Output is (T x d).
    pub fn hidden_states(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::invalid("empty prefix"));
        }
        if t_len > self.config.ctx {
            return Err(Error::invalid(format!(
                "prefix length {t_len} exceeds context length {}",
                self.config.ctx
            )));
        }
        let d = self.config.d;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok_emb = tape.gather_rows(self.emb, tokens.to_vec());
        let pos_emb = tape.gather_rows(self.pos, (0..t_len).collect());
        let mut x = tape.add(tok_emb, pos_emb);

        for layer in &self.layers {
            let a = tape.layer_norm_rows(x, layer.ln1_g, layer.ln1_b);
            let q = tape.matmul_transpose_b(a, layer.wq);
            let k = tape.matmul_transpose_b(a, layer.wk);
            let v = tape.matmul_transpose_b(a, layer.wv);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_transpose_b(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.causal_softmax_rows(scores);
                head_outs.push(tape.matmul(attn, vh));
            }
            let concat = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(head_outs)
            };
            let attn_out = tape.matmul_transpose_b(concat, layer.wo);
            x = tape.add(x, attn_out);

            let m = tape.layer_norm_rows(x, layer.ln2_g, layer.ln2_b);
            let pre = tape.matmul_transpose_b(m, layer.w_in);
            let pre = tape.add_row_broadcast(pre, layer.b_in);
            let mid = tape.tanh(pre);
            let out = tape.matmul_transpose_b(mid, layer.w_out);
            let out = tape.add_row_broadcast(out, layer.b_out);
            x = tape.add(x, out);
        }
        Ok(tape.layer_norm_rows(x, self.lnf_g, self.lnf_b))
    }
}

impl AdapterVars {
    pub fn register(tape: &mut Tape, params: &ParameterSet, set: Option<usize>) -> Self {
        AdapterVars {
            w1: register(tape, params, set, "w1"),
            w2: register(tape, params, set, "w2"),
        }
    }

    /// Residual map: h + W2 W1 h, row-wise over a (T x d) block.
    pub fn apply(&self, tape: &mut Tape, hidden: Var) -> Var {
        let low = tape.matmul_transpose_b(hidden, self.w1);
        let delta = tape.matmul_transpose_b(low, self.w2);
        tape.add(hidden, delta)
    }
}

/// Tied-embedding logits over the full vocabulary: hidden (m x d) times the
/// embedding table transposed.
pub fn full_logits(tape: &mut Tape, hidden: Var, emb: Var) -> Var {
    tape.matmul_transpose_b(hidden, emb)
}

/// Logits restricted to a token subset; normalization then happens over the
/// subset only.
pub fn subset_logits(tape: &mut Tape, hidden: Var, emb: Var, subset: &[usize]) -> Var {
    let sub = tape.gather_rows(emb, subset.to_vec());
    tape.matmul_transpose_b(hidden, sub)
}

/// Sum over t = 2..T of log P(x_t | X_{<t}): hidden rows 0..T-2 score
/// targets tokens[1..]. Returns a scalar node.
pub fn sentence_loglik_var(
    tape: &mut Tape,
    hidden: Var,
    emb: Var,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::invalid(
            "sentence likelihood needs at least 2 tokens",
        ));
    }
    let t_len = tokens.len();
    let context_rows = tape.gather_rows(hidden, (0..t_len - 1).collect());
    let logits = full_logits(tape, context_rows, emb);
    let picked = tape.pick_log_softmax_rows(logits, tokens[1..].to_vec());
    Ok(tape.sum_all(picked))
}

/// Expected parameter count sanity used by checkpoint loading.
pub fn parameter_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["emb".to_string(), "pos".to_string()];
    for l in 0..config.layers {
        for suffix in [
            "ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "mlp.w_in", "mlp.b_in",
            "mlp.w_out", "mlp.b_out",
        ] {
            names.push(format!("layer{l}.{suffix}"));
        }
    }
    names.push("ln_f.g".to_string());
    names.push("ln_f.b".to_string());
    names
}

/// Shape of each reference parameter given the config and vocab size.
pub fn parameter_shape(config: &ModelConfig, vocab: usize, name: &str) -> (usize, usize) {
    let d = config.d;
    let m = MLP_WIDTH_FACTOR * d;
    match name {
        "emb" => (vocab, d),
        "pos" => (config.ctx, d),
        n if n.ends_with(".g") || n.ends_with(".b") => (1, d),
        n if n.ends_with("mlp.w_in") => (m, d),
        n if n.ends_with("mlp.b_in") => (1, m),
        n if n.ends_with("mlp.w_out") => (d, m),
        n if n.ends_with("mlp.b_out") => (1, d),
        _ => (d, d), // wq, wk, wv, wo
    }
}
