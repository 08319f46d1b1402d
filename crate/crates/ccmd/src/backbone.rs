//! Graph backbones over the shared token encoder: a pre-LN graph
//! transformer whose attention carries an additive structural bias, and a
//! GIN-style message passer. Both expose the full per-layer token traces so
//! downstream losses can align intermediate representations, and the
//! transformer additionally exposes its attention tensors for inspection.
//!
//! Structural bias by view: the 3D view biases every real-atom pair with a
//! zero-initialized linear map of the RBF-expanded distance; the 2D view
//! biases bonded pairs with a zero-initialized per-bond-type scalar. Both
//! are per-head and shared across layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{ape_tokens, init_encoder_params, row_mask_expanded, EncoderConfig, View};
use crate::error::{Error, Result};
use crate::moldata::{GraphBatch, BOND_VOCAB};
use crate::params::{uniform_fan_in, ParamStore, ParamVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Gin,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Transformer => write!(f, "transformer"),
            Arch::Gin => write!(f, "gin"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub view: View,
    pub layers: usize,
    /// Attention heads; ignored by the GIN arch.
    pub heads: usize,
    pub encoder: EncoderConfig,
    pub ln_eps: f64,
}

impl BackboneConfig {
    /// 3D-view transformer at reference width.
    pub fn teacher_default() -> Self {
        BackboneConfig {
            arch: Arch::Transformer,
            view: View::ThreeD,
            layers: 4,
            heads: 4,
            encoder: EncoderConfig::default(),
            ln_eps: 1e-5,
        }
    }

    /// 2D-view transformer student at reference width.
    pub fn student_transformer() -> Self {
        BackboneConfig {
            view: View::TwoD,
            ..Self::teacher_default()
        }
    }

    /// 2D-view GIN student at reference width.
    pub fn student_gin() -> Self {
        BackboneConfig {
            arch: Arch::Gin,
            view: View::TwoD,
            layers: 3,
            heads: 1,
            encoder: EncoderConfig::default(),
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.encoder.d;
        if self.layers == 0 || d == 0 {
            return Err(Error::Config(format!(
                "layers ({}) and width ({d}) must be positive",
                self.layers
            )));
        }
        if self.arch == Arch::Transformer {
            if self.heads == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "width {d} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        self.encoder.rbf.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.encoder.d / self.heads
    }

    /// Flat width of the structural-bias feature for this view.
    fn bias_features(&self) -> usize {
        match self.view {
            View::ThreeD => self.encoder.rbf.k,
            View::TwoD => BOND_VOCAB,
        }
    }
}

/// Register all model parameters (encoder, backbone stack, readout head)
/// from one deterministic stream. Registration order fixes the checkpoint
/// and optimizer-state layout.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.encoder.d;
    init_encoder_params(&mut store, &cfg.encoder, cfg.view, &mut rng);
    match cfg.arch {
        Arch::Transformer => {
            // zero init keeps attention structurally unbiased at step 0
            store.add(
                "attn.bias",
                &[cfg.bias_features(), cfg.heads],
                vec![0.0; cfg.bias_features() * cfg.heads],
            );
            for l in 0..cfg.layers {
                for (tag, rows, cols) in [
                    ("wq", d, d),
                    ("wk", d, d),
                    ("wv", d, d),
                    ("wo", d, d),
                    ("ffn.w1", d, 4 * d),
                    ("ffn.w2", 4 * d, d),
                ] {
                    store.add(
                        &format!("tf.{l}.{tag}"),
                        &[rows, cols],
                        uniform_fan_in(&mut rng, rows, rows * cols),
                    );
                }
                for (tag, n, fill) in [
                    ("ln1.g", d, 1.0),
                    ("ln1.b", d, 0.0),
                    ("ln2.g", d, 1.0),
                    ("ln2.b", d, 0.0),
                    ("ffn.b1", 4 * d, 0.0),
                    ("ffn.b2", d, 0.0),
                ] {
                    store.add(&format!("tf.{l}.{tag}"), &[n], vec![fill; n]);
                }
            }
        }
        Arch::Gin => {
            for l in 0..cfg.layers {
                store.add(
                    &format!("gin.{l}.w1"),
                    &[d, d],
                    uniform_fan_in(&mut rng, d, d * d),
                );
                store.add(&format!("gin.{l}.b1"), &[d], vec![0.0; d]);
                store.add(
                    &format!("gin.{l}.w2"),
                    &[d, d],
                    uniform_fan_in(&mut rng, d, d * d),
                );
                store.add(&format!("gin.{l}.b2"), &[d], vec![0.0; d]);
            }
        }
    }
    store.add("head.w1", &[d, d], uniform_fan_in(&mut rng, d, d * d));
    store.add("head.b1", &[d], vec![0.0; d]);
    store.add("head.w2", &[d, 1], uniform_fan_in(&mut rng, d, d));
    store.add("head.b2", &[1], vec![0.0; 1]);
    Ok(store)
}

/// One full forward pass, with every intermediate the rest of the system
/// needs: encoder tokens, each layer's token matrix, attention tensors
/// (transformer only, one [B*H, T, T] var per layer), and the prediction.
pub struct ForwardTrace {
    pub tokens: Var,
    /// Layer outputs X^1..X^L, each [B*T, d].
    pub layers: Vec<Var>,
    pub attention: Vec<Var>,
    /// [B, 1] readout from the virtual token of the last layer.
    pub prediction: Var,
}

/// Teacher-side trace captured as plain values, so a student tape can
/// consume it as constants. Holding values (not vars) makes the frozen
/// teacher structural: no backward path into teacher parameters exists.
#[derive(Debug, Clone)]
pub struct DetachedTrace {
    pub batch_size: usize,
    pub token_count: usize,
    pub d: usize,
    /// Layer outputs X^1..X^L, each flat [B*T*d].
    pub layers: Vec<Vec<f64>>,
}

pub fn detach_trace(tape: &Tape, trace: &ForwardTrace, batch: &GraphBatch, d: usize) -> DetachedTrace {
    DetachedTrace {
        batch_size: batch.batch_size,
        token_count: batch.token_count,
        d,
        layers: trace.layers.iter().map(|&v| tape.value(v)).collect(),
    }
}

pub fn forward(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    let tokens = ape_tokens(tape, params, &cfg.encoder, batch, cfg.view)?;
    let (layers, attention) = run_layers(tape, params, cfg, batch, tokens, 0)?;
    let x = *layers.last().expect("at least one layer");
    let (b, t) = (batch.batch_size, batch.token_count);

    // readout from the virtual slot of the final layer
    let virt_rows: Vec<usize> = (0..b).map(|bi| bi * t).collect();
    let pooled = tape.gather_rows(x, &virt_rows)?;
    let h = tape.gelu(tape.add_row(
        tape.matmul(pooled, params.get("head.w1")?)?,
        params.get("head.b1")?,
    )?)?;
    let prediction = tape.add_row(
        tape.matmul(h, params.get("head.w2")?)?,
        params.get("head.b2")?,
    )?;

    Ok(ForwardTrace {
        tokens,
        layers,
        attention,
        prediction,
    })
}

/// Run layers `start..L` from an arbitrary token tensor `x` (which stands
/// in for X^start). Lets callers replay the tail of the stack from a
/// perturbed intermediate state. Returns the layer outputs and attention
/// tensors of the executed range.
pub fn forward_tail(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
    x: Var,
    start: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    cfg.validate()?;
    if start >= cfg.layers {
        return Err(Error::InvalidArgument {
            op: "forward_tail",
            msg: format!("start layer {start} out of range (L = {})", cfg.layers),
        });
    }
    run_layers(tape, params, cfg, batch, x, start)
}

fn run_layers(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
    mut x: Var,
    start: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let (b, t, d) = (batch.batch_size, batch.token_count, cfg.encoder.d);
    let row_mask = tape.constant(&row_mask_expanded(batch, d, false), &[b * t, d])?;
    let mut layers = Vec::with_capacity(cfg.layers - start);
    let mut attention = Vec::new();
    match cfg.arch {
        Arch::Transformer => {
            let bias = attention_bias(tape, params, cfg, batch)?;
            let key_mask = attention_key_mask(batch, cfg.heads);
            for l in start..cfg.layers {
                let (next, probs) =
                    transformer_layer(tape, params, cfg, batch, x, row_mask, bias, &key_mask, l)?;
                check_finite(tape, next, cfg.arch, l)?;
                layers.push(next);
                attention.push(probs);
                x = next;
            }
        }
        Arch::Gin => {
            let adj = tape.constant(&adjacency_plus_identity(batch), &[b, t, t])?;
            for l in start..cfg.layers {
                let next = gin_layer(tape, params, cfg, batch, x, row_mask, adj, l)?;
                check_finite(tape, next, cfg.arch, l)?;
                layers.push(next);
                x = next;
            }
        }
    }
    Ok((layers, attention))
}

fn check_finite(tape: &Tape, v: Var, arch: Arch, layer: usize) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{arch} layer {layer} output"),
        })
    }
}

/// Pre-LN block: X' = X + mask·MHA(LN(X)); X'' = X' + mask·FFN(LN(X')).
/// Returns (X'', attention probabilities [B*H, T, T]).
#[allow(clippy::too_many_arguments)]
fn transformer_layer(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
    x: Var,
    row_mask: Var,
    bias: Var,
    key_mask: &[f64],
    l: usize,
) -> Result<(Var, Var)> {
    let (b, t, d, heads) = (
        batch.batch_size,
        batch.token_count,
        cfg.encoder.d,
        cfg.heads,
    );
    let dh = cfg.head_dim();
    let p = |tag: &str| params.get(&format!("tf.{l}.{tag}"));

    let h = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?, cfg.ln_eps)?;
    let to_heads = |m: Var| -> Result<Var> {
        // [B*T, d] -> [B*H, T, dh]
        let r = tape.reshape(m, &[b, t, heads, dh])?;
        let pm = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(pm, &[b * heads, t, dh])
    };
    let q = to_heads(tape.matmul(h, p("wq")?)?)?;
    let k = to_heads(tape.matmul(h, p("wk")?)?)?;
    let v = to_heads(tape.matmul(h, p("wv")?)?)?;

    let scores = tape.add(
        tape.scale(tape.bmm(q, k, true)?, 1.0 / (dh as f64).sqrt())?,
        bias,
    )?;
    let probs = tape.softmax_row_masked(scores, key_mask)?;

    let ctx = tape.bmm(probs, v, false)?;
    // [B*H, T, dh] -> [B*T, d]
    let ctx = tape.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b * t, d])?;
    let attn_out = tape.mul(tape.matmul(ctx, p("wo")?)?, row_mask)?;
    let x1 = tape.add(x, attn_out)?;

    let h2 = tape.layer_norm(x1, p("ln2.g")?, p("ln2.b")?, cfg.ln_eps)?;
    let f = tape.gelu(tape.add_row(tape.matmul(h2, p("ffn.w1")?)?, p("ffn.b1")?)?)?;
    let f = tape.add_row(tape.matmul(f, p("ffn.w2")?)?, p("ffn.b2")?)?;
    let x2 = tape.add(x1, tape.mul(f, row_mask)?)?;
    Ok((x2, probs))
}

/// X^{l+1} = mask·MLP((A+I)·X^l): sum aggregation over bonded neighbors
/// (virtual node adjacent to every real atom) plus the self term.
#[allow(clippy::too_many_arguments)]
fn gin_layer(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
    x: Var,
    row_mask: Var,
    adj: Var,
    l: usize,
) -> Result<Var> {
    let (b, t, d) = (batch.batch_size, batch.token_count, cfg.encoder.d);
    let p = |tag: &str| params.get(&format!("gin.{l}.{tag}"));
    let x3 = tape.reshape(x, &[b, t, d])?;
    let agg = tape.reshape(tape.bmm(adj, x3, false)?, &[b * t, d])?;
    let h = tape.gelu(tape.add_row(tape.matmul(agg, p("w1")?)?, p("b1")?)?)?;
    let out = tape.add_row(tape.matmul(h, p("w2")?)?, p("b2")?)?;
    tape.mul(out, row_mask)
}

/// Structural attention bias, one [B*H, T, T] tensor shared by all layers.
/// Built as constant pair features times the learned (zero-initialized)
/// bias table, so padding and self pairs contribute exactly zero.
fn attention_bias(
    tape: &Tape,
    params: &ParamVars,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
) -> Result<Var> {
    let (b, t, heads) = (batch.batch_size, batch.token_count, cfg.heads);
    let feats = match cfg.view {
        View::ThreeD => rbf_pair_features(batch, &cfg.encoder.rbf)?,
        View::TwoD => bond_pair_onehot(batch),
    };
    let feats = tape.constant(&feats, &[b * t * t, cfg.bias_features()])?;
    let flat = tape.matmul(feats, params.get("attn.bias")?)?;
    let r = tape.reshape(flat, &[b, t, t, heads])?;
    let pm = tape.permute(r, &[0, 3, 1, 2])?;
    tape.reshape(pm, &[b * heads, t, t])
}

/// RBF expansion of d_ij for every ordered pair of distinct real atoms;
/// zero rows elsewhere (virtual, self, padding). [B*T*T, K] flat.
fn rbf_pair_features(batch: &GraphBatch, rbf: &crate::encoder::RbfConfig) -> Result<Vec<f64>> {
    let (b, t, k) = (batch.batch_size, batch.token_count, rbf.k);
    let mut out = vec![0.0; b * t * t * k];
    for bi in 0..b {
        let n = batch.atom_counts[bi];
        for i in 1..=n {
            for j in 1..=n {
                if i == j {
                    continue;
                }
                let row = batch.pair(bi, i, j);
                let v = crate::encoder::rbf_expand(batch.distances[row], rbf)?;
                out[row * k..(row + 1) * k].copy_from_slice(&v);
            }
        }
    }
    Ok(out)
}

/// One-hot bond type for every bonded ordered pair; zero rows elsewhere.
/// [B*T*T, BOND_VOCAB] flat.
fn bond_pair_onehot(batch: &GraphBatch) -> Vec<f64> {
    let (b, t) = (batch.batch_size, batch.token_count);
    let mut out = vec![0.0; b * t * t * BOND_VOCAB];
    for (row, &ty) in batch.bond_types.iter().enumerate() {
        if ty >= 0 {
            out[row * BOND_VOCAB + ty as usize] = 1.0;
        }
    }
    out
}

/// Key-side softmax mask [B*H*T*T]: 1 where the key token is real
/// (virtual included), 0 at padding.
fn attention_key_mask(batch: &GraphBatch, heads: usize) -> Vec<f64> {
    let (b, t) = (batch.batch_size, batch.token_count);
    let mut out = vec![0.0; b * heads * t * t];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    out[((bi * heads + h) * t + i) * t + j] = batch.mask[bi * t + j];
                }
            }
        }
    }
    out
}

/// (A + I) over tokens: bond adjacency, virtual row/column joined to every
/// real atom, identity on real tokens, all-zero padding rows/columns.
pub(crate) fn adjacency_plus_identity(batch: &GraphBatch) -> Vec<f64> {
    let (b, t) = (batch.batch_size, batch.token_count);
    let mut out = vec![0.0; b * t * t];
    for bi in 0..b {
        let n = batch.atom_counts[bi];
        for i in 0..=n {
            out[batch.pair(bi, i, i)] = 1.0;
        }
        for i in 1..=n {
            out[batch.pair(bi, 0, i)] = 1.0;
            out[batch.pair(bi, i, 0)] = 1.0;
        }
        for i in 1..t {
            for j in 1..t {
                if batch.bond_types[batch.pair(bi, i, j)] >= 0 {
                    out[batch.pair(bi, i, j)] = 1.0;
                }
            }
        }
    }
    out
}
