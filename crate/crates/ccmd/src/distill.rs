//! Loss algebra for coordinated distillation: the supervised L1 term, the
//! global molecular term L_m (virtual-token matching across layers), the
//! local atom term in per-token-mean form L̄_a, the size-dependent
//! coordinating weight f(N), and their composition into the total training
//! objective with a per-step breakdown.
//!
//! All L1 terms take an elementwise mean over the embedding dimension so
//! values are comparable across widths. Teacher traces enter as detached
//! values, never as tape variables, so no gradient path into the teacher
//! can exist.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Arch, DetachedTrace};
use crate::error::{Error, Result};
use crate::moldata::GraphBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    GlobalOnly,
    LocalOnly,
    GlobalLocal,
}

impl Mode {
    pub fn has_global(self) -> bool {
        matches!(self, Mode::GlobalOnly | Mode::GlobalLocal)
    }
    pub fn has_local(self) -> bool {
        matches!(self, Mode::LocalOnly | Mode::GlobalLocal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    Last,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    Manual(f64),
    Coordinating,
}

/// Reduction over a molecule's tokens in the atom term: `Mean` is the
/// corrected per-token form L̄_a; `Sum` is the raw summed form whose
/// magnitude grows with molecule size (the naive variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: Mode,
    pub layer_scope: LayerScope,
    pub weight_rule: WeightRule,
    pub arch: Arch,
    pub atom_reduction: AtomReduction,
    /// Whether the virtual slot counts as a token of the atom term
    /// (it is also matched by the global term; the overlap is kept).
    pub include_virtual: bool,
    /// Multiplier on the whole distillation bracket: the trace terms
    /// enter the total as bracket_weight · (global term + weighted atom
    /// term). The written objective carries no explicit factor here, so
    /// 1 is the default; it is exposed because the right strength at
    /// small scale need not be the large-scale implicit 1.
    #[serde(default = "default_bracket_weight")]
    pub bracket_weight: f64,
}

fn default_bracket_weight() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn supervised_only() -> Self {
        DistillConfig {
            mode: Mode::None,
            layer_scope: LayerScope::All,
            weight_rule: WeightRule::Coordinating,
            arch: Arch::Transformer,
            atom_reduction: AtomReduction::Mean,
            include_virtual: true,
            bracket_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let WeightRule::Manual(w) = self.weight_rule {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("manual weight must be >= 0, got {w}")));
            }
        }
        if !(self.bracket_weight >= 0.0) {
            return Err(Error::Config(format!(
                "bracket weight must be >= 0, got {}",
                self.bracket_weight
            )));
        }
        Ok(())
    }
}

/// Per-step scalars for logging; `total` is the value of the loss var.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_2d: f64,
    pub l_m: f64,
    /// Batch mean of the per-molecule atom term (before weighting).
    pub l_a_mean: f64,
    /// Batch mean of the applied per-molecule weight.
    pub weight_mean: f64,
    pub total: f64,
}

/// Mean over the batch of |prediction − label|. `pred` is [B, 1] or [B].
pub fn supervised_l1(tape: &Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    let n: usize = tape.shape(pred).iter().product();
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "supervised_l1",
            lhs: tape.shape(pred),
            rhs: vec![labels.len()],
        });
    }
    let y = tape.constant(labels, &tape.shape(pred))?;
    tape.mean_all(tape.abs(tape.sub(pred, y)?)?)
}

fn selected(scope: LayerScope, len: usize) -> std::ops::Range<usize> {
    match scope {
        LayerScope::All => 0..len,
        LayerScope::Last => len.saturating_sub(1)..len,
    }
}

fn check_traces(
    tape: &Tape,
    student_layers: &[Var],
    teacher: &DetachedTrace,
    batch: &GraphBatch,
) -> Result<()> {
    if student_layers.len() != teacher.layers.len() {
        return Err(Error::InvalidArgument {
            op: "distill",
            msg: format!(
                "trace length mismatch: student {} layers, teacher {}",
                student_layers.len(),
                teacher.layers.len()
            ),
        });
    }
    let want = vec![batch.batch_size * batch.token_count, teacher.d];
    for (&s, t) in student_layers.iter().zip(&teacher.layers) {
        if tape.shape(s) != want || t.len() != want[0] * want[1] {
            return Err(Error::ShapeMismatch {
                op: "distill",
                lhs: tape.shape(s),
                rhs: want,
            });
        }
    }
    Ok(())
}

/// Global molecular term: Σ over selected layers of the mean-elementwise L1
/// between student and teacher virtual-token embeddings. Scalar.
pub fn loss_global(
    tape: &Tape,
    student_layers: &[Var],
    teacher: &DetachedTrace,
    batch: &GraphBatch,
    scope: LayerScope,
) -> Result<Var> {
    check_traces(tape, student_layers, teacher, batch)?;
    let (b, t, d) = (batch.batch_size, batch.token_count, teacher.d);
    let virt_rows: Vec<usize> = (0..b).map(|bi| bi * t).collect();
    let mut acc: Option<Var> = None;
    for l in selected(scope, student_layers.len()) {
        let sv = tape.gather_rows(student_layers[l], &virt_rows)?;
        let tv: Vec<f64> = virt_rows
            .iter()
            .flat_map(|&r| teacher.layers[l][r * d..(r + 1) * d].iter().copied())
            .collect();
        let tv = tape.constant(&tv, &[b, d])?;
        let term = tape.mean_all(tape.abs(tape.sub(sv, tv)?)?)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(Error::InvalidArgument {
        op: "loss_global",
        msg: "empty trace".into(),
    })
}

/// Local atom term, one scalar per molecule [B, 1]: Σ over selected layers
/// of the per-token mean (or raw sum) over the molecule's real tokens of
/// the mean-elementwise L1 to the teacher trace. Padding never contributes.
pub fn loss_local(
    tape: &Tape,
    student_layers: &[Var],
    teacher: &DetachedTrace,
    batch: &GraphBatch,
    scope: LayerScope,
    reduction: AtomReduction,
    include_virtual: bool,
) -> Result<Var> {
    check_traces(tape, student_layers, teacher, batch)?;
    let (b, t) = (batch.batch_size, batch.token_count);

    // constant [B, B*T] matrix folding per-token rows into per-molecule
    // scalars with the reduction baked in
    let mut fold = vec![0.0; b * b * t];
    for (bi, &n) in batch.atom_counts.iter().enumerate() {
        let tokens = if include_virtual { n + 1 } else { n };
        let w = match reduction {
            AtomReduction::Mean => 1.0 / tokens as f64,
            AtomReduction::Sum => 1.0,
        };
        let first = if include_virtual { 0 } else { 1 };
        for tok in first..=n {
            fold[bi * b * t + bi * t + tok] = w;
        }
    }
    let fold = tape.constant(&fold, &[b, b * t])?;

    let mut acc: Option<Var> = None;
    for l in selected(scope, student_layers.len()) {
        let tv = tape.constant(&teacher.layers[l], &tape.shape(student_layers[l]))?;
        let per_tok = tape.mean_axis(tape.abs(tape.sub(student_layers[l], tv)?)?, 1)?;
        let per_tok = tape.reshape(per_tok, &[b * t, 1])?;
        let per_mol = tape.matmul(fold, per_tok)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, per_mol)?,
            None => per_mol,
        });
    }
    acc.ok_or(Error::InvalidArgument {
        op: "loss_local",
        msg: "empty trace".into(),
    })
}

/// Size-dependent multiplier applied to the per-molecule atom term:
/// 1/N under attention (an effective 1/N² on the raw summed form), 1 for
/// the GIN student.
pub fn coordinating_weight(n: usize, arch: Arch) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument {
            op: "coordinating_weight",
            msg: "molecule size must be >= 1".into(),
        });
    }
    Ok(match arch {
        Arch::Transformer => 1.0 / n as f64,
        Arch::Gin => 1.0,
    })
}

/// Compose the total objective on the tape and report its parts.
///
/// total = l_2d + bracket_weight · ((l_m if global) + (mean over batch of
/// w_b · A_b if local)), where A_b is the per-molecule atom term and w_b
/// its configured weight. The breakdown reports the raw (unscaled) parts.
pub fn total_loss(
    tape: &Tape,
    cfg: &DistillConfig,
    pred: Var,
    labels: &[f64],
    student_layers: &[Var],
    teacher: Option<&DetachedTrace>,
    batch: &GraphBatch,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let l2d = supervised_l1(tape, pred, labels)?;
    let mut breakdown = LossBreakdown {
        l_2d: tape.scalar_value(l2d),
        l_m: 0.0,
        l_a_mean: 0.0,
        weight_mean: 0.0,
        total: 0.0,
    };
    let mut total = l2d;

    if cfg.mode != Mode::None {
        let teacher = teacher.ok_or(Error::InvalidArgument {
            op: "total_loss",
            msg: "distillation mode requires a teacher trace".into(),
        })?;
        let mut bracket: Option<Var> = None;
        if cfg.mode.has_global() {
            let lm = loss_global(tape, student_layers, teacher, batch, cfg.layer_scope)?;
            breakdown.l_m = tape.scalar_value(lm);
            bracket = Some(lm);
        }
        if cfg.mode.has_local() {
            let per_mol = loss_local(
                tape,
                student_layers,
                teacher,
                batch,
                cfg.layer_scope,
                cfg.atom_reduction,
                cfg.include_virtual,
            )?;
            let b = batch.batch_size;
            let weights: Vec<f64> = match cfg.weight_rule {
                WeightRule::Manual(w) => vec![w; b],
                WeightRule::Coordinating => batch
                    .atom_counts
                    .iter()
                    .map(|&n| coordinating_weight(n, cfg.arch))
                    .collect::<Result<_>>()?,
            };
            let vals = tape.value(per_mol);
            breakdown.l_a_mean = vals.iter().sum::<f64>() / b as f64;
            breakdown.weight_mean = weights.iter().sum::<f64>() / b as f64;
            let scaled: Vec<f64> = weights.iter().map(|w| w / b as f64).collect();
            let term = tape.dot_const(per_mol, &scaled)?;
            bracket = Some(match bracket {
                Some(g) => tape.add(g, term)?,
                None => term,
            });
        }
        if let Some(bk) = bracket {
            let weighted = if cfg.bracket_weight == 1.0 {
                bk
            } else {
                tape.scale(bk, cfg.bracket_weight)?
            };
            total = tape.add(total, weighted)?;
        }
    }
    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}
