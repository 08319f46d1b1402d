//! Empirical gradient-magnitude scaling harness.
//!
//! Measures how the gradient of the uncorrected (summed) atom loss at the
//! layer-l virtual token grows with molecule size N, per architecture, and
//! fits log-log slopes. The claimed asymptotics (quadratic growth under
//! attention, linear under GIN sum-aggregation) are measured rather than
//! assumed; the harness also quantifies how much the coordinating weight
//! flattens the growth.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{detach_trace, forward, init_params, Arch, BackboneConfig, DetachedTrace};
use crate::distill::{coordinating_weight, loss_local, AtomReduction, LayerScope};
use crate::error::{Error, Result};
use crate::moldata::{GraphBatch, Molecule, ATOM_VOCAB};
use crate::params::ParamStore;

/// Which atom-term variant drives the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanLoss {
    /// Raw summed atom loss over all layers — the analyzed regime.
    UnweightedSum,
    /// Per-token mean scaled by the coordinating weight f(N).
    Coordinated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanConfig {
    pub sizes: Vec<usize>,
    pub seeds: u64,
    pub molecules_per_cell: usize,
    /// Teacher = student init + N(0, sigma²) parameter noise.
    pub sigma: f64,
    pub backbone: BackboneConfig,
    pub loss: ScanLoss,
}

impl ScanConfig {
    pub fn desk_default(arch: Arch) -> Self {
        let mut backbone = match arch {
            Arch::Transformer => BackboneConfig::student_transformer(),
            Arch::Gin => BackboneConfig::student_gin(),
        };
        // middle-layer pooling needs interior layers on both archs
        backbone.layers = 4;
        ScanConfig {
            sizes: vec![8, 16, 32, 64, 128],
            seeds: 5,
            molecules_per_cell: 20,
            sigma: 0.1,
            backbone,
            loss: ScanLoss::UnweightedSum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.sizes.len() < 2 || self.seeds == 0 || self.molecules_per_cell == 0 {
            return Err(Error::Config(
                "scan needs >= 2 sizes and nonzero seeds/molecules".into(),
            ));
        }
        if self.backbone.layers < 3 {
            return Err(Error::Config(
                "scan needs >= 3 layers so interior layers exist".into(),
            ));
        }
        Ok(())
    }
}

/// One aggregated measurement: geometric-mean gradient norm over the
/// cell's molecules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanCell {
    pub arch: Arch,
    pub n: usize,
    pub seed: u64,
    pub layer: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitLine {
    pub arch: Arch,
    /// None = pooled over interior layers.
    pub layer: Option<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanResult {
    pub config: ScanConfig,
    pub cells: Vec<ScanCell>,
    pub fits: Vec<FitLine>,
    /// (arch, N, seed) cells discarded for non-finite norms.
    pub dropped: usize,
}

impl ScanResult {
    pub fn pooled_fit(&self, arch: Arch) -> Option<&FitLine> {
        self.fits.iter().find(|f| f.arch == arch && f.layer.is_none())
    }
}

/// Ordinary least squares of ln(value) on ln(N): (slope, intercept, R²).
pub fn fit_loglog(points: &[(usize, f64)]) -> Result<(f64, f64, f64)> {
    let distinct: std::collections::BTreeSet<usize> = points.iter().map(|p| p.0).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "fit_loglog",
            msg: format!("need >= 2 distinct sizes, got {}", distinct.len()),
        });
    }
    if let Some(&(n, v)) = points.iter().find(|&&(_, v)| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "fit_loglog",
            msg: format!("nonpositive value {v} at N = {n}"),
        });
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let (xm, ym) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, intercept, r2))
}

fn scan_molecule(rng: &mut ChaCha8Rng, n: usize) -> Result<Molecule> {
    let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let atoms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ATOM_VOCAB)).collect();
    Molecule::from_coords(atoms, coords)
}

/// Teacher trace for a gradient probe: the same architecture with
/// parameters offset by Gaussian noise so traces differ but stay matched
/// in shape and scale.
fn perturbed_teacher_trace(
    student: &ParamStore,
    cfg: &BackboneConfig,
    batch: &GraphBatch,
    sigma: f64,
    noise_seed: u64,
) -> Result<DetachedTrace> {
    let t_store = student.perturbed(sigma, noise_seed);
    let tape = Tape::new();
    let vars = t_store.leaves(&tape)?;
    let trace = forward(&tape, &vars, cfg, batch)?;
    Ok(detach_trace(&tape, &trace, batch, cfg.encoder.d))
}

fn scan_loss_on_tape(
    tape: &Tape,
    layers: &[crate::autodiff::Var],
    teacher: &DetachedTrace,
    batch: &GraphBatch,
    loss: ScanLoss,
    arch: Arch,
) -> Result<crate::autodiff::Var> {
    let per_mol = match loss {
        ScanLoss::UnweightedSum => loss_local(
            tape,
            layers,
            teacher,
            batch,
            LayerScope::All,
            AtomReduction::Sum,
            true,
        )?,
        ScanLoss::Coordinated => {
            let la = loss_local(
                tape,
                layers,
                teacher,
                batch,
                LayerScope::All,
                AtomReduction::Mean,
                true,
            )?;
            let f = coordinating_weight(batch.atom_counts[0], arch)?;
            tape.scale(la, f)?
        }
    };
    tape.sum_all(per_mol)
}

/// Gradient norms ‖∇_{X_0^l} L‖₂ for every layer in one backward pass.
/// Single molecule (B = 1); the model stays at the provided init.
pub fn virtual_grad_norms(
    store: &ParamStore,
    cfg: &BackboneConfig,
    molecule: &Molecule,
    teacher: &DetachedTrace,
    loss: ScanLoss,
) -> Result<Vec<f64>> {
    let batch = GraphBatch::from_molecules(&[molecule])?;
    let tape = Tape::new();
    let vars = store.leaves(&tape)?;
    let trace = forward(&tape, &vars, cfg, &batch)?;
    let total = scan_loss_on_tape(&tape, &trace.layers, teacher, &batch, loss, cfg.arch)?;
    tape.backward(total)?;
    let d = cfg.encoder.d;
    trace
        .layers
        .iter()
        .map(|&l| {
            let g = tape.grad(l).ok_or(Error::InvalidArgument {
                op: "virtual_grad_norms",
                msg: "trace node missing gradient".into(),
            })?;
            Ok(g[0..d].iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .collect()
}

/// Single-layer view of [`virtual_grad_norms`].
pub fn virtual_grad_norm(
    store: &ParamStore,
    cfg: &BackboneConfig,
    molecule: &Molecule,
    teacher: &DetachedTrace,
    loss: ScanLoss,
    layer: usize,
) -> Result<f64> {
    if layer >= cfg.layers {
        return Err(Error::InvalidArgument {
            op: "virtual_grad_norm",
            msg: format!("layer {layer} out of range (L = {})", cfg.layers),
        });
    }
    Ok(virtual_grad_norms(store, cfg, molecule, teacher, loss)?[layer])
}

/// Full scan for one architecture: per (N, seed, layer) geometric-mean
/// gradient norms plus per-layer and interior-pooled log-log fits.
pub fn scaling_scan(config: &ScanConfig) -> Result<ScanResult> {
    config.validate()?;
    let cfg = &config.backbone;
    let arch = cfg.arch;
    let mut cells = Vec::new();
    let mut dropped = 0usize;

    for seed in 0..config.seeds {
        let store = init_params(cfg, seed)?;
        for &n in &config.sizes {
            // per-cell molecule stream decoupled from model seeds
            let mut rng = ChaCha8Rng::seed_from_u64(
                0x5CA0 ^ (seed.wrapping_mul(1009)) ^ ((n as u64) << 32),
            );
            let mut log_sums = vec![0.0f64; cfg.layers];
            let mut count = 0usize;
            for mol_idx in 0..config.molecules_per_cell {
                let m = scan_molecule(&mut rng, n)?;
                let batch = GraphBatch::from_molecules(&[&m])?;
                let teacher = perturbed_teacher_trace(
                    &store,
                    cfg,
                    &batch,
                    config.sigma,
                    seed.wrapping_mul(7919).wrapping_add(mol_idx as u64),
                )?;
                let norms = virtual_grad_norms(&store, cfg, &m, &teacher, config.loss)?;
                if norms.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                    dropped += 1;
                    continue;
                }
                for (l, v) in norms.iter().enumerate() {
                    log_sums[l] += v.ln();
                }
                count += 1;
            }
            if count == 0 {
                continue;
            }
            for (layer, s) in log_sums.iter().enumerate() {
                cells.push(ScanCell {
                    arch,
                    n,
                    seed,
                    layer,
                    norm: (s / count as f64).exp(),
                });
            }
        }
    }

    let mut fits = Vec::new();
    for layer in 0..cfg.layers {
        let pts: Vec<(usize, f64)> = cells
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| (c.n, c.norm))
            .collect();
        if let Ok((slope, intercept, r2)) = fit_loglog(&pts) {
            fits.push(FitLine {
                arch,
                layer: Some(layer),
                slope,
                intercept,
                r2,
            });
        }
    }
    let interior: Vec<(usize, f64)> = cells
        .iter()
        .filter(|c| c.layer > 0 && c.layer < cfg.layers - 1)
        .map(|c| (c.n, c.norm))
        .collect();
    let (slope, intercept, r2) = fit_loglog(&interior)?;
    fits.push(FitLine {
        arch,
        layer: None,
        slope,
        intercept,
        r2,
    });

    Ok(ScanResult {
        config: config.clone(),
        cells,
        fits,
        dropped,
    })
}

/// `arch,N,seed,layer,norm` rows.
pub fn write_cells_csv(results: &[&ScanResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let emit = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(f, "arch,N,seed,layer,norm").map_err(emit)?;
    for r in results {
        for c in &r.cells {
            writeln!(f, "{},{},{},{},{}", c.arch, c.n, c.seed, c.layer, c.norm).map_err(emit)?;
        }
    }
    Ok(())
}

pub fn write_fits_json(results: &[&ScanResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let all: Vec<&FitLine> = results.iter().flat_map(|r| r.fits.iter()).collect();
    let body = serde_json::to_string_pretty(&all).expect("fits serialize");
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, RbfConfig, View};

    fn tiny_cfg(arch: Arch) -> BackboneConfig {
        BackboneConfig {
            arch,
            view: View::TwoD,
            layers: 3,
            heads: 2,
            encoder: EncoderConfig {
                d: 16,
                d_e: 4,
                rbf: RbfConfig { k: 8, d_max: 3.0_f64.sqrt() },
            },
            ln_eps: 1e-5,
        }
    }

    fn tiny_scan(arch: Arch, loss: ScanLoss) -> ScanConfig {
        ScanConfig {
            sizes: vec![8, 16, 32, 64],
            seeds: 2,
            molecules_per_cell: 4,
            sigma: 0.1,
            backbone: tiny_cfg(arch),
            loss,
        }
    }

    #[test]
    fn fitter_recovers_exact_power_laws() {
        let quad: Vec<(usize, f64)> = [1usize, 2, 4, 8]
            .iter()
            .map(|&n| (n, 3.0 * (n as f64) * (n as f64)))
            .collect();
        let (s, _, r2) = fit_loglog(&quad).unwrap();
        assert!((s - 2.0).abs() < 1e-9, "slope {s}");
        assert!((r2 - 1.0).abs() < 1e-12);

        let lin: Vec<(usize, f64)> = [1usize, 2, 4].iter().map(|&n| (n, 3.0 * n as f64)).collect();
        let (s, b, _) = fit_loglog(&lin).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert!((b - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fitter_matches_closed_form_ols_on_noisy_monomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(usize, f64)> = [2usize, 4, 8, 16, 32]
            .iter()
            .map(|&n| {
                let noise: f64 = 1.0 + 0.1 * rng.gen::<f64>();
                (n, 0.7 * (n as f64).powf(1.5) * noise)
            })
            .collect();
        let (s, b, r2) = fit_loglog(&pts).unwrap();
        // independent recomputation
        let xs: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        let m = xs.len() as f64;
        let (xm, ym) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
        let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let want_s = sxy / sxx;
        assert!((s - want_s).abs() < 1e-12);
        assert!((b - (ym - want_s * xm)).abs() < 1e-12);
        assert!(r2 > 0.9 && r2 <= 1.0);

        assert!(fit_loglog(&[(4, 1.0), (4, 2.0)]).is_err(), "one distinct N");
        assert!(fit_loglog(&[(2, 1.0), (4, -1.0)]).is_err(), "negative value");
    }

    #[test]
    fn identical_traces_give_zero_gradient() {
        let cfg = tiny_cfg(Arch::Transformer);
        let store = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = scan_molecule(&mut rng, 10).unwrap();
        let batch = GraphBatch::from_molecules(&[&m]).unwrap();
        // sigma = 0 ⇒ teacher is the student itself ⇒ L1 at its minimum
        let teacher = perturbed_teacher_trace(&store, &cfg, &batch, 0.0, 1).unwrap();
        let norms =
            virtual_grad_norms(&store, &cfg, &m, &teacher, ScanLoss::UnweightedSum).unwrap();
        assert!(norms.iter().all(|&v| v == 0.0), "{norms:?}");
    }

    #[test]
    fn norm_is_invariant_under_atom_permutation() {
        let cfg = tiny_cfg(Arch::Gin);
        let store = init_params(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 9;
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let atoms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ATOM_VOCAB)).collect();
        let m = Molecule::from_coords(atoms.clone(), coords.clone()).unwrap();
        // reversal permutation of the atom order
        let coords_p: Vec<[f64; 3]> = coords.iter().rev().cloned().collect();
        let atoms_p: Vec<usize> = atoms.iter().rev().cloned().collect();
        let mp = Molecule::from_coords(atoms_p, coords_p).unwrap();

        // teacher traces must be permutation-consistent too: build them
        // from each molecule's own batch with the same parameter noise
        let b1 = GraphBatch::from_molecules(&[&m]).unwrap();
        let b2 = GraphBatch::from_molecules(&[&mp]).unwrap();
        let t1 = perturbed_teacher_trace(&store, &cfg, &b1, 0.1, 3).unwrap();
        let t2 = perturbed_teacher_trace(&store, &cfg, &b2, 0.1, 3).unwrap();
        let n1 = virtual_grad_norms(&store, &cfg, &m, &t1, ScanLoss::UnweightedSum).unwrap();
        let n2 = virtual_grad_norms(&store, &cfg, &mp, &t2, ScanLoss::UnweightedSum).unwrap();
        for (a, b) in n1.iter().zip(&n2) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_directional_difference_probe() {
        // replay the stack from a perturbed X^l and compare the retained
        // gradient's norm against the central difference along its own
        // direction
        use crate::backbone::forward_tail;
        let cfg = tiny_cfg(Arch::Transformer);
        let store = init_params(&cfg, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let m = scan_molecule(&mut rng, 6).unwrap();
        let batch = GraphBatch::from_molecules(&[&m]).unwrap();
        let teacher = perturbed_teacher_trace(&store, &cfg, &batch, 0.1, 23).unwrap();

        let probe_layer = 1usize;
        let tape = Tape::new();
        let vars = store.leaves(&tape).unwrap();
        let trace = forward(&tape, &vars, &cfg, &batch).unwrap();
        let total = scan_loss_on_tape(
            &tape,
            &trace.layers,
            &teacher,
            &batch,
            ScanLoss::UnweightedSum,
            cfg.arch,
        )
        .unwrap();
        tape.backward(total).unwrap();
        let d = cfg.encoder.d;
        let g = tape.grad(trace.layers[probe_layer]).unwrap();
        let virt_g = &g[0..d];
        let norm: f64 = virt_g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0);

        // loss restricted to layers > probe_layer as a function of X^l's
        // virtual row (the layer-l loss term itself is |X^l − T^l| summed —
        // differentiable but kinked; perturbing along g keeps signs for
        // small h, so include it via its closed subgradient: the layer-l
        // term contributes sign pattern · direction, added analytically)
        let x_l = tape.value(trace.layers[probe_layer]);
        let h = 1e-6;
        let tail_teacher = DetachedTrace {
            layers: teacher.layers[probe_layer + 1..].to_vec(),
            ..teacher.clone()
        };
        let eval_tail = |delta: f64| -> f64 {
            let t2 = Tape::new();
            let v2 = store.leaves(&t2).unwrap();
            let mut x = x_l.clone();
            for (i, gi) in virt_g.iter().enumerate() {
                x[i] += delta * gi / norm;
            }
            let xv = t2.input(&x, &[batch.token_count, d]).unwrap();
            let (layers, _) = forward_tail(&t2, &v2, &cfg, &batch, xv, probe_layer + 1).unwrap();
            let tail_total = scan_loss_on_tape(
                &t2,
                &layers,
                &tail_teacher,
                &batch,
                ScanLoss::UnweightedSum,
                cfg.arch,
            )
            .unwrap();
            // add the layer-l own term evaluated at the shifted point
            let mut own = 0.0;
            for tok in 0..batch.token_count {
                let mut e = 0.0;
                for c in 0..d {
                    e += (x[tok * d + c] - teacher.layers[probe_layer][tok * d + c]).abs();
                }
                own += e / d as f64;
            }
            t2.scalar_value(tail_total) + own
        };
        let cd = (eval_tail(h) - eval_tail(-h)) / (2.0 * h);
        let rel = (cd - norm).abs() / norm.max(cd.abs());
        assert!(rel < 1e-4, "directional probe {cd} vs norm {norm} (rel {rel})");
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        let cfg = tiny_cfg(Arch::Gin);
        let store = init_params(&cfg, 29).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = scan_molecule(&mut rng, 5).unwrap();
        let batch = GraphBatch::from_molecules(&[&m]).unwrap();
        let teacher = perturbed_teacher_trace(&store, &cfg, &batch, 0.1, 1).unwrap();
        assert!(virtual_grad_norm(&store, &cfg, &m, &teacher, ScanLoss::UnweightedSum, 3).is_err());
        assert!(virtual_grad_norm(&store, &cfg, &m, &teacher, ScanLoss::UnweightedSum, 2).is_ok());
    }

    #[test]
    fn gin_growth_is_clearly_positive_and_tight() {
        let result = scaling_scan(&tiny_scan(Arch::Gin, ScanLoss::UnweightedSum)).unwrap();
        let fit = result.pooled_fit(Arch::Gin).unwrap();
        assert!(fit.slope > 0.5, "gin slope {}", fit.slope);
        assert!(fit.r2 >= 0.8, "gin r2 {}", fit.r2);
        assert_eq!(result.dropped, 0);
        // every cell present: sizes × seeds × layers
        assert_eq!(result.cells.len(), 4 * 2 * 3);
    }

    #[test]
    fn coordinating_weight_flattens_growth_per_architecture() {
        // the weighted loss rescales each cell by exactly f(N)/(N+1), so
        // the slope drop equals the log-log slope of the rescaling factor:
        // ~1.96 under attention (f = 1/N), ~0.96 for GIN (f = 1), which
        // sits just under 1.0 because the per-token mean divides by N+1
        // rather than N
        for (arch, min_drop) in [(Arch::Transformer, 1.0), (Arch::Gin, 0.9)] {
            let raw = scaling_scan(&tiny_scan(arch, ScanLoss::UnweightedSum)).unwrap();
            let weighted = scaling_scan(&tiny_scan(arch, ScanLoss::Coordinated)).unwrap();
            let s_raw = raw.pooled_fit(arch).unwrap().slope;
            let s_w = weighted.pooled_fit(arch).unwrap().slope;
            let drop = s_raw - s_w;
            assert!(
                drop >= min_drop,
                "{arch}: slope {s_raw} -> {s_w}, drop {drop}"
            );
        }
    }

    #[test]
    fn csv_and_json_artifacts_have_expected_shape() {
        let result = scaling_scan(&ScanConfig {
            sizes: vec![8, 16],
            seeds: 1,
            molecules_per_cell: 2,
            ..tiny_scan(Arch::Gin, ScanLoss::UnweightedSum)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("cells.csv");
        let json_path = dir.path().join("fits.json");
        write_cells_csv(&[&result], &csv_path).unwrap();
        write_fits_json(&[&result], &json_path).unwrap();

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "arch,N,seed,layer,norm");
        assert_eq!(csv.lines().count(), 1 + 2 * 3); // header + sizes×layers
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 5);
            assert!(line.starts_with("gin,"));
        }
        let fits: Vec<FitLine> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(fits.len(), 3 + 1); // per-layer + pooled
        assert!(fits.iter().any(|f| f.layer.is_none()));
    }
}
