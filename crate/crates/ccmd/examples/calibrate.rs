//! Grid + sweep calibration runner. Prints one line per run as it finishes,
//! then, per student-epoch setting, the median table and the ordering checks
//! the release gate cares about. Knobs come from environment variables so
//! repeated runs don't need a rebuild:
//!
//!   CAL_D, CAL_DE, CAL_RBFK, CAL_LAYERS, CAL_HEADS, CAL_TRAIN, CAL_VAL,
//!   CAL_NMIN, CAL_NMAX, CAL_SEEDS, CAL_TEACHER_EPOCHS, CAL_BATCH, CAL_LR,
//!   CAL_DATA_SEED, CAL_WEIGHTS (comma list; empty to skip the manual-weight
//!   sweep), CAL_STUDENT_EPOCHS (comma list; teachers are shared across the
//!   settings so epoch-response curves cost one teacher pass).

use std::collections::BTreeMap;
use std::time::Instant;

use ccmd::experiments::{grid_variants, train_teachers, SuiteConfig, Variant};
use ccmd::trainer::{distill_student, train_supervised};

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envlist(key: &str, default: &str) -> Vec<f64> {
    std::env::var(key)
        .unwrap_or_else(|_| default.into())
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().expect("bad list entry"))
        .collect()
}

fn main() -> ccmd::Result<()> {
    let mut sc = SuiteConfig::desk_default();
    sc.d = envu("CAL_D", sc.d);
    sc.d_e = envu("CAL_DE", sc.d_e);
    sc.rbf_k = envu("CAL_RBFK", sc.rbf_k);
    sc.layers = envu("CAL_LAYERS", sc.layers);
    sc.heads = envu("CAL_HEADS", sc.heads);
    sc.train_count = envu("CAL_TRAIN", sc.train_count);
    sc.val_count = envu("CAL_VAL", sc.val_count);
    sc.n_range = (envu("CAL_NMIN", sc.n_range.0), envu("CAL_NMAX", sc.n_range.1));
    sc.teacher_epochs = envu("CAL_TEACHER_EPOCHS", sc.teacher_epochs);
    sc.batch_size = envu("CAL_BATCH", sc.batch_size);
    sc.lr = envf("CAL_LR", sc.lr);
    sc.bracket_weight = envf("CAL_BRACKET", sc.bracket_weight);
    sc.data_seed = envu("CAL_DATA_SEED", sc.data_seed as usize) as u64;
    if let Ok(s) = std::env::var("CAL_SEEDS") {
        let n: usize = s.parse().unwrap_or(sc.seeds.len());
        sc.seeds = (0..n as u64).collect();
    }
    let weights = envlist("CAL_WEIGHTS", "0.001,0.01,0.1,1");
    let epoch_list: Vec<usize> = envlist(
        "CAL_STUDENT_EPOCHS",
        &sc.student_epochs.to_string(),
    )
    .into_iter()
    .map(|e| e as usize)
    .collect();
    let bracket_list = envlist("CAL_BRACKETS", &sc.bracket_weight.to_string());

    println!(
        "preset: d={} d_e={} rbf_k={} L={} h={} train={} val={} n=({},{}) seeds={} t_ep={} s_ep={:?} batch={} lr={} bracket={} data_seed={}",
        sc.d, sc.d_e, sc.rbf_k, sc.layers, sc.heads, sc.train_count, sc.val_count,
        sc.n_range.0, sc.n_range.1, sc.seeds.len(), sc.teacher_epochs, epoch_list,
        sc.batch_size, sc.lr, sc.bracket_weight, sc.data_seed
    );

    let t_all = Instant::now();
    let (train, val) = sc.dataset()?;
    let zero_mae: f64 = {
        let total: f64 = val.molecules.iter().map(|m| m.label.abs()).sum();
        total / val.molecules.len() as f64
    };
    println!(
        "data ready ({:.1}s); zero-predictor val MAE {:.4}",
        t_all.elapsed().as_secs_f64(),
        zero_mae
    );

    let t_teach = Instant::now();
    let teachers = train_teachers(&sc, &train, &val)?;
    let teacher_seconds = t_teach.elapsed().as_secs_f64();
    for (_, _, o) in &teachers {
        println!("run teacher seed={} val_mae={:.4} ({:.1}s)", o.seed, o.val_mae, o.seconds);
    }
    let teacher_med = {
        let mut v: Vec<f64> = teachers.iter().map(|(_, _, o)| o.val_mae).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    };

    let mut variants = grid_variants();
    for &w in &weights {
        variants.push(Variant::ManualWeight(w));
    }

    let median = |xs: &[f64]| -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    };

    for &bracket in &bracket_list {
        sc.bracket_weight = bracket;
        for &s_ep in &epoch_list {
        // variant -> per-seed MAE, run serially with live prints
        let mut cells: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut grid_seconds = teacher_seconds;
        for (seed, teacher, _) in &teachers {
            for v in &variants {
                let t0 = Instant::now();
                let cfg = sc.student_config(v, s_ep, *seed);
                let run = if cfg.distill.mode == ccmd::distill::Mode::None {
                    train_supervised(&cfg, &train, &val)?
                } else {
                    distill_student(&cfg, teacher, &train, &val)?
                };
                let secs = t0.elapsed().as_secs_f64();
                let mae = run.record.best_val_mae;
                println!("run s_ep={s_ep} b={bracket} {} seed={} val_mae={:.4} ({:.1}s)", v.label(), seed, mae, secs);
                if matches!(
                    v,
                    Variant::Baseline
                        | Variant::GlobalAll
                        | Variant::GlobalLast
                        | Variant::GlobalLocalCoordinated
                        | Variant::LocalSumUncorrected
                ) {
                    grid_seconds += secs;
                }
                cells.entry(v.label()).or_default().push(mae);
            }
        }

        let mut med: BTreeMap<String, f64> = BTreeMap::new();
        med.insert("teacher".into(), teacher_med);
        for (k, v) in &cells {
            med.insert(k.clone(), median(v));
        }

        println!("\n== medians (s_ep={s_ep}) ==");
        for (k, v) in &med {
            println!("{k:<26} {v:.4}");
        }

        let get = |k: &str| -> f64 { med.get(k).copied().unwrap_or(f64::NAN) };
        let base = get("baseline");
        let lm_all = get("global_all");
        let lm_last = get("global_last");
        let coord = get("global_local_coordinated");
        let lsum = get("local_sum_uncorrected");
        println!("== checks (s_ep={s_ep}) ==");
        println!(
            "4a teacher<baseline           {} ({:.4} vs {:.4})",
            if teacher_med < base { "PASS" } else { "FAIL" },
            teacher_med,
            base
        );
        println!(
            "4b global_all<baseline        {} ({:.4} vs {:.4})",
            if lm_all < base { "PASS" } else { "FAIL" },
            lm_all,
            base
        );
        println!(
            "4c coord<=global_all          {} ({:.4} vs {:.4})",
            if coord <= lm_all { "PASS" } else { "FAIL" },
            coord,
            lm_all
        );
        let distills = [lm_all, lm_last, coord, lsum];
        let worst = distills.iter().fold(f64::MIN, |a, &b| a.max(b));
        println!(
            "4d local_sum worst distill    {} (local_sum {:.4}, worst {:.4})",
            if lsum >= worst { "PASS" } else { "FAIL" },
            lsum,
            worst
        );
        println!(
            "4  grid_seconds {:.0}s (<1800 {})",
            grid_seconds,
            if grid_seconds < 1800.0 { "PASS" } else { "FAIL" }
        );
        println!(
            "5  global_all<=global_last    {} ({:.4} vs {:.4})",
            if lm_all <= lm_last { "PASS" } else { "FAIL" },
            lm_all,
            lm_last
        );
        if !weights.is_empty() {
            let manual_min = weights
                .iter()
                .map(|w| get(&Variant::ManualWeight(*w).label()))
                .fold(f64::MAX, f64::min);
            println!(
                "6  coord<=1.02*min(manual)    {} ({:.4} vs min {:.4}, slack {:.4})",
                if coord <= 1.02 * manual_min { "PASS" } else { "FAIL" },
                coord,
                manual_min,
                1.02 * manual_min
            );
        }
    }
    println!("total {:.0}s", t_all.elapsed().as_secs_f64());
    Ok(())
}
