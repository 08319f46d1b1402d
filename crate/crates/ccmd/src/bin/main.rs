//! Command-line front end: data generation, training, distillation,
//! evaluation, the gradient scan, the weight sweep, and attention dumps.
//!
//! Every run writes its artifacts under a run directory: the resolved
//! config snapshot, a per-epoch record.csv, and best/last checkpoints.
//! Flags override config-file values; outputs are deterministic given
//! (seed, config).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ccmd::autodiff::Tape;
use ccmd::backbone::{forward, Arch, BackboneConfig};
use ccmd::checkpoint::Checkpoint;
use ccmd::distill::{AtomReduction, LayerScope, Mode, WeightRule};
use ccmd::encoder::View;
use ccmd::experiments::{run_suite, sweep_variants, SuiteConfig};
use ccmd::gradscan::{scaling_scan, write_cells_csv, write_fits_json, ScanConfig};
use ccmd::moldata::{gen_synthetic, load_jsonl, save_jsonl, split, Dataset, GraphBatch};
use ccmd::trainer::{distill_student, evaluate, train_teacher, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(
    name = "ccmd",
    about = "Coordinated cross-modal distillation for molecular property prediction (desk scale)",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic molecule dataset (JSONL).
    GenData(GenDataArgs),
    /// Train the 3D teacher (supervised).
    TrainTeacher(TrainArgs),
    /// Train a 2D student against a frozen teacher.
    Distill(DistillArgs),
    /// Report MAE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Measure gradient-magnitude scaling of the atom loss vs molecule size.
    GradScan(GradScanArgs),
    /// Compare manual atom-term weights against the coordinating rule.
    WeightSweep(WeightSweepArgs),
    /// Dump per-layer attention tensors for one molecule.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of molecules.
    #[arg(long)]
    count: usize,
    /// Smallest molecule size.
    #[arg(long, default_value_t = 4)]
    n_lo: usize,
    /// Largest molecule size.
    #[arg(long, default_value_t = 16)]
    n_hi: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long, default_value = "dataset.jsonl")]
    out: PathBuf,
}

/// Model/optimization flags shared by training commands. Every flag is
/// optional here so a config file can supply it; unset values fall back to
/// the desk defaults.
#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON file with the same fields as the flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model width.
    #[arg(long)]
    d: Option<usize>,
    /// Edge-feature width.
    #[arg(long)]
    d_e: Option<usize>,
    /// RBF kernel count.
    #[arg(long)]
    rbf_k: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// transformer | gin
    #[arg(long)]
    arch: Option<String>,
    /// Global-norm gradient clipping (off by default).
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    d: Option<usize>,
    d_e: Option<usize>,
    rbf_k: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    arch: Option<String>,
    clip: Option<f64>,
}

struct ResolvedModel {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    d: usize,
    d_e: usize,
    rbf_k: usize,
    layers: usize,
    heads: usize,
    arch: Arch,
    clip: Option<f64>,
}

fn parse_arch(s: &str) -> Result<Arch> {
    match s {
        "transformer" => Ok(Arch::Transformer),
        "gin" => Ok(Arch::Gin),
        other => bail!("unknown arch '{other}' (expected transformer|gin)"),
    }
}

impl ModelArgs {
    fn resolve(&self) -> Result<ResolvedModel> {
        let file: ModelFile = match &self.config {
            Some(path) => {
                let body = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&body)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ModelFile::default(),
        };
        let arch_name = self
            .arch
            .clone()
            .or(file.arch)
            .unwrap_or_else(|| "transformer".into());
        Ok(ResolvedModel {
            epochs: self.epochs.or(file.epochs).unwrap_or(5),
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(64),
            lr: self.lr.or(file.lr).unwrap_or(1e-3),
            seed: self.seed.or(file.seed).unwrap_or(0),
            d: self.d.or(file.d).unwrap_or(16),
            d_e: self.d_e.or(file.d_e).unwrap_or(8),
            rbf_k: self.rbf_k.or(file.rbf_k).unwrap_or(16),
            layers: self.layers.or(file.layers).unwrap_or(3),
            heads: self.heads.or(file.heads).unwrap_or(4),
            arch: parse_arch(&arch_name)?,
            clip: self.clip.or(file.clip),
        })
    }

    fn backbone(&self, view: View) -> Result<BackboneConfig> {
        let r = self.resolve()?;
        let mut b = match (r.arch, view) {
            (_, View::ThreeD) => BackboneConfig::teacher_default(),
            (Arch::Transformer, View::TwoD) => BackboneConfig::student_transformer(),
            (Arch::Gin, View::TwoD) => BackboneConfig::student_gin(),
        };
        b.arch = r.arch;
        b.encoder.d = r.d;
        b.encoder.d_e = r.d_e;
        b.encoder.rbf.k = r.rbf_k;
        b.layers = r.layers;
        b.heads = r.heads;
        Ok(b)
    }

    fn train_config(&self, view: View) -> Result<TrainConfig> {
        let r = self.resolve()?;
        let mut cfg = TrainConfig::supervised(self.backbone(view)?, r.epochs, r.seed);
        cfg.batch_size = r.batch_size;
        cfg.adam.lr = r.lr;
        cfg.adam.clip = r.clip;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; if omitted, --val-count is split off the tail.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    val_count: usize,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let train = load_jsonl(&self.data)?;
        match &self.val {
            Some(p) => Ok((train, load_jsonl(p)?)),
            None => Ok(split(&train, self.val_count)?),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Run directory for config.json, record.csv, and checkpoints.
    #[arg(long, default_value = "runs/teacher")]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Teacher checkpoint (required).
    #[arg(long)]
    teacher: PathBuf,
    /// none | global_only | local_only | global_local
    #[arg(long, default_value = "global_only")]
    mode: String,
    /// last | all
    #[arg(long, default_value = "all")]
    layer_scope: String,
    /// Manual atom-term weight; mutually exclusive with --coordinating.
    #[arg(long, conflicts_with = "coordinating")]
    weight: Option<f64>,
    /// Use the size-dependent coordinating weight f(N).
    #[arg(long)]
    coordinating: bool,
    /// mean | sum
    #[arg(long, default_value = "mean")]
    atom_reduction: String,
    /// Exclude the virtual token from the atom term.
    #[arg(long)]
    exclude_virtual: bool,
    /// Multiplier on the whole distillation bracket (global + atom terms).
    #[arg(long, default_value_t = 1.0)]
    distill_weight: f64,
    #[arg(long, default_value = "runs/student")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 2d | 3d — must match the checkpoint.
    #[arg(long)]
    view: String,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct GradScanArgs {
    /// transformer | gin | both
    #[arg(long, default_value = "both")]
    arch: String,
    /// Comma-separated molecule sizes.
    #[arg(long, default_value = "8,16,32,64,128")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 20)]
    molecules_per_cell: usize,
    #[arg(long, default_value = "runs/gradscan")]
    out: PathBuf,
}

#[derive(Args)]
struct WeightSweepArgs {
    /// Comma-separated manual weights.
    #[arg(long, default_value = "0.001,0.01,0.1,1")]
    weights: String,
    /// Seeds to median over.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 5000)]
    train_count: usize,
    #[arg(long, default_value_t = 1000)]
    val_count: usize,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Molecule index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "attention.json")]
    out: PathBuf,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating run directory {}", path.display()))
}

fn write_run_dir(out: &Path, config: &TrainConfig, run: &TrainOutput) -> Result<()> {
    ensure_dir(out)?;
    let cfg_json = serde_json::to_string_pretty(config)?;
    std::fs::write(out.join("config.json"), cfg_json)?;
    run.record.write_csv(out.join("record.csv"))?;
    run.best.save(out.join("best.ckpt"))?;
    run.last.save(out.join("last.ckpt"))?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let ds = gen_synthetic(a.count, (a.n_lo, a.n_hi), a.seed)?;
    save_jsonl(&ds, &a.out)?;
    println!(
        "wrote {} molecules (n in [{}, {}], seed {}) to {}",
        a.count,
        a.n_lo,
        a.n_hi,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn cmd_train_teacher(a: TrainArgs) -> Result<()> {
    let (train, val) = a.data.load()?;
    let cfg = a.model.train_config(View::ThreeD)?;
    let run = train_teacher(&cfg, &train, &val)?;
    write_run_dir(&a.out, &cfg, &run)?;
    println!(
        "teacher: best val MAE {:.4} (epoch {}) -> {}",
        run.record.best_val_mae,
        run.record.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let (train, val) = a.data.load()?;
    let teacher = Checkpoint::load(&a.teacher)?;
    let mut cfg = a.model.train_config(View::TwoD)?;
    cfg.distill.mode = match a.mode.as_str() {
        "none" => Mode::None,
        "global_only" => Mode::GlobalOnly,
        "local_only" => Mode::LocalOnly,
        "global_local" => Mode::GlobalLocal,
        other => bail!("unknown mode '{other}'"),
    };
    cfg.distill.layer_scope = match a.layer_scope.as_str() {
        "last" => LayerScope::Last,
        "all" => LayerScope::All,
        other => bail!("unknown layer scope '{other}'"),
    };
    cfg.distill.weight_rule = match (a.weight, a.coordinating) {
        (Some(w), false) => WeightRule::Manual(w),
        (None, _) => WeightRule::Coordinating,
        (Some(_), true) => unreachable!("clap conflicts_with"),
    };
    cfg.distill.atom_reduction = match a.atom_reduction.as_str() {
        "mean" => AtomReduction::Mean,
        "sum" => AtomReduction::Sum,
        other => bail!("unknown atom reduction '{other}'"),
    };
    cfg.distill.include_virtual = !a.exclude_virtual;
    cfg.distill.bracket_weight = a.distill_weight;
    let run = distill_student(&cfg, &teacher, &train, &val)?;
    write_run_dir(&a.out, &cfg, &run)?;
    println!(
        "student: best val MAE {:.4} (epoch {}) -> {}",
        run.record.best_val_mae,
        run.record.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = load_jsonl(&a.data)?;
    let view = match a.view.as_str() {
        "2d" => View::TwoD,
        "3d" => View::ThreeD,
        other => bail!("unknown view '{other}' (expected 2d|3d)"),
    };
    let mae = evaluate(&ckpt, &data, view, a.batch_size)?;
    println!("MAE {mae:.6} on {} molecules", data.molecules.len());
    Ok(())
}

fn cmd_grad_scan(a: GradScanArgs) -> Result<()> {
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing --sizes"))
        .collect::<Result<_>>()?;
    let archs: Vec<Arch> = match a.arch.as_str() {
        "both" => vec![Arch::Transformer, Arch::Gin],
        other => vec![parse_arch(other)?],
    };
    ensure_dir(&a.out)?;
    let mut results = Vec::new();
    for arch in archs {
        let mut cfg = ScanConfig::desk_default(arch);
        cfg.sizes = sizes.clone();
        cfg.seeds = a.seeds;
        cfg.molecules_per_cell = a.molecules_per_cell;
        let res = scaling_scan(&cfg)?;
        let pooled = res.pooled_fit(arch).expect("pooled fit");
        println!(
            "{arch}: pooled interior slope {:.3} (R2 {:.3}), {} cells, {} dropped",
            pooled.slope,
            pooled.r2,
            res.cells.len(),
            res.dropped
        );
        results.push(res);
    }
    let refs: Vec<&_> = results.iter().collect();
    write_cells_csv(&refs, a.out.join("cells.csv"))?;
    write_fits_json(&refs, a.out.join("fits.json"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_weight_sweep(a: WeightSweepArgs) -> Result<()> {
    let weights: Vec<f64> = a
        .weights
        .split(',')
        .map(|s| s.trim().parse::<f64>().context("parsing --weights"))
        .collect::<Result<_>>()?;
    if weights.is_empty() {
        bail!("--weights must list at least one manual weight");
    }
    let mut sc = SuiteConfig::desk_default();
    sc.seeds = (0..a.seeds).collect();
    sc.train_count = a.train_count;
    sc.val_count = a.val_count;
    let report = run_suite(&sc, &sweep_variants(&weights))?;
    ensure_dir(&a.out)?;
    report.write_csv(a.out.join("runs.csv"))?;

    let medians = report.medians();
    let path = a.out.join("sweep.csv");
    let mut rows = vec!["weighting,median_val_mae".to_string()];
    for w in &weights {
        let label = ccmd::experiments::Variant::ManualWeight(*w).label();
        rows.push(format!("{w},{}", medians[&label]));
    }
    rows.push(format!(
        "coordinating,{}",
        medians["global_local_coordinated"]
    ));
    std::fs::write(&path, rows.join("\n") + "\n")?;
    for r in &rows[1..] {
        println!("{r}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_dump_attention(a: DumpAttentionArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if ckpt.backbone.arch != Arch::Transformer {
        bail!("attention dumps need a transformer checkpoint");
    }
    let data = load_jsonl(&a.data)?;
    let mol = data
        .molecules
        .get(a.index)
        .with_context(|| format!("dataset has {} molecules", data.molecules.len()))?;
    let gb = GraphBatch::from_molecules(&[mol])?;
    let tape = Tape::new();
    let leaves = ckpt.params.leaves(&tape)?;
    let trace = forward(&tape, &leaves, &ckpt.backbone, &gb)?;

    #[derive(serde::Serialize)]
    struct Dump {
        molecule_index: usize,
        tokens: usize,
        heads: usize,
        /// [layer][head][query][key] attention probabilities.
        layers: Vec<Vec<Vec<Vec<f64>>>>,
    }
    let t = gb.token_count;
    let h = ckpt.backbone.heads;
    let mut layers = Vec::new();
    for &att in &trace.attention {
        let flat = tape.value(att); // [B*H, T, T] with B = 1
        let mut per_head = Vec::with_capacity(h);
        for head in 0..h {
            let mut rows = Vec::with_capacity(t);
            for q in 0..t {
                let base = head * t * t + q * t;
                rows.push(flat[base..base + t].to_vec());
            }
            per_head.push(rows);
        }
        layers.push(per_head);
    }
    let dump = Dump {
        molecule_index: a.index,
        tokens: t,
        heads: h,
        layers,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&dump)?)?;
    println!(
        "wrote {} ({} layers, {} heads, {} tokens)",
        a.out.display(),
        dump.layers.len(),
        h,
        t
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradScan(a) => cmd_grad_scan(a),
        Command::WeightSweep(a) => cmd_weight_sweep(a),
        Command::DumpAttention(a) => cmd_dump_attention(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
