//! Desk-scale experiment orchestration: the teacher/student ablation grid
//! and the atom-term weight sweep, shared by the CLI and the acceptance
//! suite.
//!
//! One synthetic dataset is generated per suite and split 5k/1k style so
//! every variant sees identical data and standardization. Per seed, the
//! teacher is trained once and shared by all student variants; variants
//! with the same seed differ only in their distillation configuration.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Arch, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::distill::{AtomReduction, DistillConfig, LayerScope, Mode, WeightRule};
use crate::encoder::View;
use crate::error::{Error, Result};
use crate::moldata::{gen_synthetic, split, Dataset};
use crate::trainer::{distill_student, train_supervised, train_teacher, TrainConfig};

/// The studied student variants, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain 2D supervised training.
    Baseline,
    /// + molecular term, all layers.
    GlobalAll,
    /// + molecular term, last layer only.
    GlobalLast,
    /// + molecular term + coordinated atom term, all layers.
    GlobalLocalCoordinated,
    /// Atom term only, raw sum, no correction — the cautionary variant.
    LocalSumUncorrected,
    /// + molecular term + atom term at a fixed manual weight.
    ManualWeight(f64),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::GlobalAll => "global_all".into(),
            Variant::GlobalLast => "global_last".into(),
            Variant::GlobalLocalCoordinated => "global_local_coordinated".into(),
            Variant::LocalSumUncorrected => "local_sum_uncorrected".into(),
            Variant::ManualWeight(w) => format!("manual_w{w}"),
        }
    }

    pub fn distill(&self, arch: Arch) -> DistillConfig {
        let base = DistillConfig {
            arch,
            ..DistillConfig::supervised_only()
        };
        match *self {
            Variant::Baseline => base,
            Variant::GlobalAll => DistillConfig {
                mode: Mode::GlobalOnly,
                layer_scope: LayerScope::All,
                ..base
            },
            Variant::GlobalLast => DistillConfig {
                mode: Mode::GlobalOnly,
                layer_scope: LayerScope::Last,
                ..base
            },
            Variant::GlobalLocalCoordinated => DistillConfig {
                mode: Mode::GlobalLocal,
                layer_scope: LayerScope::All,
                weight_rule: WeightRule::Coordinating,
                atom_reduction: AtomReduction::Mean,
                ..base
            },
            Variant::LocalSumUncorrected => DistillConfig {
                mode: Mode::LocalOnly,
                layer_scope: LayerScope::All,
                weight_rule: WeightRule::Manual(1.0),
                atom_reduction: AtomReduction::Sum,
                ..base
            },
            Variant::ManualWeight(w) => DistillConfig {
                mode: Mode::GlobalLocal,
                layer_scope: LayerScope::All,
                weight_rule: WeightRule::Manual(w),
                atom_reduction: AtomReduction::Mean,
                ..base
            },
        }
    }
}

/// Everything that pins a suite run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub data_seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub n_range: (usize, usize),
    pub seeds: Vec<u64>,
    pub d: usize,
    pub d_e: usize,
    pub rbf_k: usize,
    pub layers: usize,
    pub heads: usize,
    pub arch: Arch,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Strength of the whole distillation bracket for every distilling
    /// variant (see `DistillConfig::bracket_weight`).
    #[serde(default = "default_bracket")]
    pub bracket_weight: f64,
}

fn default_bracket() -> f64 {
    1.0
}

impl SuiteConfig {
    /// The pinned desk-scale preset used by the published experiments.
    pub fn desk_default() -> SuiteConfig {
        SuiteConfig {
            data_seed: 2024,
            train_count: 5000,
            val_count: 1000,
            n_range: (12, 16),
            seeds: vec![0, 1, 2, 3, 4],
            d: 16,
            d_e: 8,
            rbf_k: 16,
            layers: 3,
            heads: 4,
            arch: Arch::Transformer,
            teacher_epochs: 8,
            student_epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            bracket_weight: 1.0,
        }
    }

    /// A fast variant for tests: tiny data, tiny model.
    pub fn smoke() -> SuiteConfig {
        SuiteConfig {
            data_seed: 7,
            train_count: 60,
            val_count: 20,
            n_range: (4, 8),
            seeds: vec![0],
            d: 8,
            d_e: 4,
            rbf_k: 8,
            layers: 2,
            heads: 2,
            arch: Arch::Transformer,
            teacher_epochs: 1,
            student_epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            bracket_weight: 1.0,
        }
    }

    pub fn backbone(&self, view: View) -> BackboneConfig {
        let mut b = match view {
            View::ThreeD => BackboneConfig::teacher_default(),
            View::TwoD => match self.arch {
                Arch::Transformer => BackboneConfig::student_transformer(),
                Arch::Gin => BackboneConfig::student_gin(),
            },
        };
        b.arch = self.arch;
        b.encoder.d = self.d;
        b.encoder.d_e = self.d_e;
        b.encoder.rbf.k = self.rbf_k;
        b.layers = self.layers;
        b.heads = self.heads;
        b
    }

    pub fn dataset(&self) -> Result<(Dataset, Dataset)> {
        let total = self.train_count + self.val_count;
        let ds = gen_synthetic(total, self.n_range, self.data_seed)?;
        split(&ds, self.val_count)
    }

    pub fn train_config(&self, view: View, epochs: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::supervised(self.backbone(view), epochs, seed);
        cfg.batch_size = self.batch_size;
        cfg.adam.lr = self.lr;
        cfg
    }

    /// Student config for one grid/sweep variant at this preset.
    pub fn student_config(&self, v: &Variant, epochs: usize, seed: u64) -> TrainConfig {
        let mut cfg = self.train_config(View::TwoD, epochs, seed);
        cfg.distill = v.distill(self.arch);
        cfg.distill.bracket_weight = self.bracket_weight;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub teacher: Vec<RunOutcome>,
    pub students: Vec<RunOutcome>,
    pub total_seconds: f64,
}

impl SuiteReport {
    /// Median val MAE per variant label (teacher included under "teacher").
    pub fn medians(&self) -> BTreeMap<String, f64> {
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for o in self.teacher.iter().chain(&self.students) {
            grouped.entry(o.variant.clone()).or_default().push(o.val_mae);
        }
        grouped
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(|a, b| a.total_cmp(b));
                let m = if v.len() % 2 == 1 {
                    v[v.len() / 2]
                } else {
                    0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
                };
                (k, m)
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let emit = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(f, "variant,seed,val_mae,seconds").map_err(emit)?;
        for o in self.teacher.iter().chain(&self.students) {
            writeln!(f, "{},{},{},{:.3}", o.variant, o.seed, o.val_mae, o.seconds)
                .map_err(emit)?;
        }
        Ok(())
    }
}

/// Train the per-seed teachers once; reused across all student variants.
pub fn train_teachers(
    sc: &SuiteConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<(u64, Checkpoint, RunOutcome)>> {
    let mut out = Vec::with_capacity(sc.seeds.len());
    for &seed in &sc.seeds {
        let t0 = Instant::now();
        let cfg = sc.train_config(View::ThreeD, sc.teacher_epochs, seed);
        let run = train_teacher(&cfg, train, val)?;
        let secs = t0.elapsed().as_secs_f64();
        let outcome = RunOutcome {
            variant: "teacher".into(),
            seed,
            val_mae: run.record.best_val_mae,
            seconds: secs,
        };
        out.push((seed, run.best, outcome));
    }
    Ok(out)
}

/// Run `variants` × `seeds` students against pre-trained teachers.
pub fn run_students(
    sc: &SuiteConfig,
    teachers: &[(u64, Checkpoint, RunOutcome)],
    variants: &[Variant],
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<RunOutcome>> {
    let mut out = Vec::new();
    for (seed, teacher, _) in teachers {
        for v in variants {
            let t0 = Instant::now();
            let cfg = sc.student_config(v, sc.student_epochs, *seed);
            let run = if cfg.distill.mode == Mode::None {
                train_supervised(&cfg, train, val)?
            } else {
                distill_student(&cfg, teacher, train, val)?
            };
            out.push(RunOutcome {
                variant: v.label(),
                seed: *seed,
                val_mae: run.record.best_val_mae,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out)
}

/// The ablation grid: teacher, baseline, both global scopes, the
/// coordinated combination, and the uncorrected sum.
pub fn grid_variants() -> Vec<Variant> {
    vec![
        Variant::Baseline,
        Variant::GlobalAll,
        Variant::GlobalLast,
        Variant::GlobalLocalCoordinated,
        Variant::LocalSumUncorrected,
    ]
}

/// Sweep variants: each manual weight plus the coordinating rule.
pub fn sweep_variants(weights: &[f64]) -> Vec<Variant> {
    let mut v: Vec<Variant> = weights.iter().map(|&w| Variant::ManualWeight(w)).collect();
    v.push(Variant::GlobalLocalCoordinated);
    v
}

pub fn run_suite(sc: &SuiteConfig, variants: &[Variant]) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let (train, val) = sc.dataset()?;
    let teachers = train_teachers(sc, &train, &val)?;
    let students = run_students(sc, &teachers, variants, &train, &val)?;
    Ok(SuiteReport {
        config: sc.clone(),
        teacher: teachers.into_iter().map(|(_, _, o)| o).collect(),
        students,
        total_seconds: t0.elapsed().as_secs_f64(),
    })
}
