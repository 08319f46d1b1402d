//! Synthetic molecule generation, JSONL persistence, and padded batching.
//!
//! Molecules are random point clouds in the unit cube. Bonds are the
//! Euclidean minimum-spanning-tree edges (connectivity guarantee) plus every
//! pair closer than [`BOND_CUTOFF`]; the bond type is a coarse distance
//! bucket, so the 2D view sees only categorical edge features while the 3D
//! view sees raw distances. The label is Σ 1/d over bonds, standardized by
//! the dataset's own moments — fully determined by geometry, only coarsely
//! inferable from buckets, which is exactly the teacher/student information
//! gap the experiments need.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ATOM_VOCAB: usize = 16;
pub const BOND_VOCAB: usize = 4;
pub const BOND_CUTOFF: f64 = 0.35;
pub const N_MAX: usize = 128;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub atoms: Vec<usize>,
    /// (i, j, bond_type) with i < j.
    pub bonds: Vec<(usize, usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 3]>>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub ccmd_dataset_version: u32,
    pub label_mean: f64,
    pub label_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub molecules: Vec<Molecule>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance bucket over 4 equal-width buckets of [0, BOND_CUTOFF); MST edges
/// longer than the cutoff clamp into the top bucket.
pub fn bond_bucket(d: f64) -> usize {
    ((d / BOND_CUTOFF * BOND_VOCAB as f64) as usize).min(BOND_VOCAB - 1)
}

impl Molecule {
    /// Build bonds (MST + cutoff pairs) and the raw (unstandardized) label
    /// from explicit coordinates. Test hook and generation workhorse.
    pub fn from_coords(atoms: Vec<usize>, coords: Vec<[f64; 3]>) -> Result<Molecule> {
        let n = coords.len();
        if atoms.len() != n || n < 2 {
            return Err(Error::InvalidArgument {
                op: "from_coords",
                msg: format!("{} atoms vs {} coords (need >= 2)", atoms.len(), n),
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                if dist(coords[i], coords[j]) < 1e-9 {
                    return Err(Error::InvalidArgument {
                        op: "from_coords",
                        msg: format!("atoms {i} and {j} coincide"),
                    });
                }
            }
        }
        let mut edges = std::collections::BTreeSet::new();
        // Prim's MST over the complete Euclidean graph
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        let mut best_from = vec![0usize; n];
        in_tree[0] = true;
        for j in 1..n {
            best[j] = dist(coords[0], coords[j]);
        }
        for _ in 1..n {
            let mut pick = usize::MAX;
            for j in 0..n {
                if !in_tree[j] && (pick == usize::MAX || best[j] < best[pick]) {
                    pick = j;
                }
            }
            in_tree[pick] = true;
            edges.insert((pick.min(best_from[pick]), pick.max(best_from[pick])));
            for j in 0..n {
                if !in_tree[j] {
                    let d = dist(coords[pick], coords[j]);
                    if d < best[j] {
                        best[j] = d;
                        best_from[j] = pick;
                    }
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if dist(coords[i], coords[j]) < BOND_CUTOFF {
                    edges.insert((i, j));
                }
            }
        }
        let bonds: Vec<(usize, usize, usize)> = edges
            .into_iter()
            .map(|(i, j)| (i, j, bond_bucket(dist(coords[i], coords[j]))))
            .collect();
        let label = bonds
            .iter()
            .map(|&(i, j, _)| 1.0 / dist(coords[i], coords[j]))
            .sum();
        Ok(Molecule {
            atoms,
            bonds,
            coords: Some(coords),
            label,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Structural validation used on load.
    pub fn validate(&self) -> Result<()> {
        let n = self.atoms.len();
        if n < 2 || n > N_MAX {
            return Err(Error::InvalidArgument {
                op: "molecule",
                msg: format!("atom count {n} outside [2, {N_MAX}]"),
            });
        }
        if let Some(bad) = self.atoms.iter().find(|&&a| a >= ATOM_VOCAB) {
            return Err(Error::InvalidArgument {
                op: "molecule",
                msg: format!("atom id {bad} outside vocabulary of {ATOM_VOCAB}"),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, t) in &self.bonds {
            if i >= j || j >= n {
                return Err(Error::InvalidArgument {
                    op: "molecule",
                    msg: format!("bond ({i},{j}) invalid for {n} atoms"),
                });
            }
            if t >= BOND_VOCAB {
                return Err(Error::InvalidArgument {
                    op: "molecule",
                    msg: format!("bond type {t} outside vocabulary of {BOND_VOCAB}"),
                });
            }
            if !seen.insert((i, j)) {
                return Err(Error::InvalidArgument {
                    op: "molecule",
                    msg: format!("duplicate bond ({i},{j})"),
                });
            }
        }
        if !self.is_connected() {
            return Err(Error::InvalidArgument {
                op: "molecule",
                msg: "bond graph is not connected".into(),
            });
        }
        if let Some(c) = &self.coords {
            if c.len() != n {
                return Err(Error::InvalidArgument {
                    op: "molecule",
                    msg: format!("{} coords for {n} atoms", c.len()),
                });
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument {
                    op: "molecule",
                    msg: "non-finite coordinate".into(),
                });
            }
        }
        if !self.label.is_finite() {
            return Err(Error::InvalidArgument {
                op: "molecule",
                msg: "non-finite label".into(),
            });
        }
        Ok(())
    }

    /// Breadth-first connectivity over the bond graph.
    pub fn is_connected(&self) -> bool {
        let n = self.atoms.len();
        let mut adj = vec![Vec::new(); n];
        for &(i, j, _) in &self.bonds {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }
}

/// Generate `count` molecules with atom counts uniform over `n_range`
/// (inclusive) and labels standardized by the dataset's own mean/std.
pub fn gen_synthetic(count: usize, n_range: (usize, usize), seed: u64) -> Result<Dataset> {
    let (lo, hi) = n_range;
    if lo < 2 || hi > N_MAX || lo > hi {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            msg: format!("n_range ({lo},{hi}) outside [2, {N_MAX}]"),
        });
    }
    if count == 0 {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            msg: "count must be >= 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut molecules = Vec::with_capacity(count);
    while molecules.len() < count {
        let n = rng.gen_range(lo..=hi);
        let atoms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ATOM_VOCAB)).collect();
        let coords: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        match Molecule::from_coords(atoms, coords) {
            Ok(m) => molecules.push(m),
            Err(_) => continue, // degenerate geometry: resample the molecule
        }
    }
    let mean = molecules.iter().map(|m| m.label).sum::<f64>() / count as f64;
    let var = molecules
        .iter()
        .map(|m| (m.label - mean) * (m.label - mean))
        .sum::<f64>()
        / count as f64;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    for m in &mut molecules {
        m.label = (m.label - mean) / std;
    }
    Ok(Dataset {
        header: DatasetHeader {
            ccmd_dataset_version: DATASET_VERSION,
            label_mean: mean,
            label_std: std,
            seed,
        },
        molecules,
    })
}

/// Split off the last `val_count` molecules as a validation set. Molecules
/// are generated i.i.d., so the tail is an unbiased holdout, and both
/// halves keep the parent's standardization constants.
pub fn split(dataset: &Dataset, val_count: usize) -> Result<(Dataset, Dataset)> {
    let n = dataset.molecules.len();
    if val_count == 0 || val_count >= n {
        return Err(Error::InvalidArgument {
            op: "split",
            msg: format!("cannot hold out {val_count} of {n} molecules"),
        });
    }
    let cut = n - val_count;
    let train = Dataset {
        header: dataset.header.clone(),
        molecules: dataset.molecules[..cut].to_vec(),
    };
    let val = Dataset {
        header: dataset.header.clone(),
        molecules: dataset.molecules[cut..].to_vec(),
    };
    Ok((train, val))
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let emit = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let header = serde_json::to_string(&dataset.header).expect("header serializes");
    writeln!(w, "{header}").map_err(emit)?;
    for m in &dataset.molecules {
        let line = serde_json::to_string(m).expect("molecule serializes");
        writeln!(w, "{line}").map_err(emit)?;
    }
    w.flush().map_err(emit)?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| Error::Malformed {
        path: display.clone(),
        line: 1,
        msg: "empty file, expected dataset header".into(),
    })?;
    let first = first.map_err(|e| Error::io(display.clone(), e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::Malformed {
            path: display.clone(),
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.ccmd_dataset_version != DATASET_VERSION {
        return Err(Error::Malformed {
            path: display,
            line: 1,
            msg: format!(
                "dataset version {} unsupported (expected {DATASET_VERSION})",
                header.ccmd_dataset_version
            ),
        });
    }

    let mut molecules = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(display.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: Molecule = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        m.validate().map_err(|e| Error::Malformed {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        molecules.push(m);
    }
    Ok(Dataset { header, molecules })
}

// ── batching ─────────────────────────────────────────────────────────────

/// Padded dense batch. Token 0 of every row is the virtual slot; atoms sit
/// at tokens 1..=N. All arrays are flat row-major.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub batch_size: usize,
    /// T = max atom count in this batch + 1 (virtual slot).
    pub token_count: usize,
    /// [B*T]; 0 at the virtual slot and padding (masked out downstream).
    pub atom_ids: Vec<usize>,
    /// [B*T*T]; bond-type id per atom-token pair, -1 where no bond.
    pub bond_types: Vec<i32>,
    /// [B*T*T]; pairwise distances at real atom pairs, 0 elsewhere or when
    /// coordinates are absent.
    pub distances: Vec<f64>,
    /// [B*T]; 1.0 for real tokens (virtual included), 0.0 for padding.
    pub mask: Vec<f64>,
    /// [B]
    pub atom_counts: Vec<usize>,
    /// [B]
    pub labels: Vec<f64>,
    pub has_coords: bool,
}

impl GraphBatch {
    pub fn from_molecules(mols: &[&Molecule]) -> Result<GraphBatch> {
        if mols.is_empty() {
            return Err(Error::InvalidArgument {
                op: "batch",
                msg: "empty batch".into(),
            });
        }
        let b = mols.len();
        let t = mols.iter().map(|m| m.n_atoms()).max().unwrap() + 1;
        let has_coords = mols.iter().all(|m| m.coords.is_some());
        let mut batch = GraphBatch {
            batch_size: b,
            token_count: t,
            atom_ids: vec![0; b * t],
            bond_types: vec![-1; b * t * t],
            distances: vec![0.0; b * t * t],
            mask: vec![0.0; b * t],
            atom_counts: Vec::with_capacity(b),
            labels: Vec::with_capacity(b),
            has_coords,
        };
        for (bi, m) in mols.iter().enumerate() {
            let n = m.n_atoms();
            batch.atom_counts.push(n);
            batch.labels.push(m.label);
            batch.mask[bi * t] = 1.0;
            for i in 0..n {
                batch.atom_ids[bi * t + i + 1] = m.atoms[i];
                batch.mask[bi * t + i + 1] = 1.0;
            }
            for &(i, j, ty) in &m.bonds {
                let (ti, tj) = (i + 1, j + 1);
                batch.bond_types[(bi * t + ti) * t + tj] = ty as i32;
                batch.bond_types[(bi * t + tj) * t + ti] = ty as i32;
            }
            if let Some(coords) = &m.coords {
                for i in 0..n {
                    for j in 0..n {
                        batch.distances[(bi * t + i + 1) * t + j + 1] =
                            dist(coords[i], coords[j]);
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Pair index into the [B*T*T] arrays.
    pub fn pair(&self, b: usize, i: usize, j: usize) -> usize {
        (b * self.token_count + i) * self.token_count + j
    }
}

/// Split molecules into batches of `batch_size`, optionally shuffled
/// (deterministically, from the seed). The trailing partial batch is kept.
pub fn batch(
    molecules: &[Molecule],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<GraphBatch>> {
    if molecules.is_empty() {
        return Err(Error::InvalidArgument {
            op: "batch",
            msg: "empty dataset".into(),
        });
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "batch",
            msg: "batch size must be >= 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..molecules.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates, explicit so the order is pinned by our own code
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Molecule> = chunk.iter().map(|&i| &molecules[i]).collect();
            GraphBatch::from_molecules(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_atom_molecule_has_raw_label_one_over_d() {
        let m = Molecule::from_coords(vec![0, 1], vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
            .unwrap();
        assert_eq!(m.bonds.len(), 1);
        assert!((m.label - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_atoms_rejected() {
        let r = Molecule::from_coords(vec![0, 1], vec![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]);
        assert!(r.is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_synthetic(50, (4, 16), 7).unwrap();
        let b = gen_synthetic(50, (4, 16), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_graphs_connected_and_standardized() {
        let ds = gen_synthetic(1000, (4, 64), 11).unwrap();
        for m in &ds.molecules {
            assert!(m.is_connected());
            assert!(m.label.is_finite());
            m.validate().unwrap();
        }
        let mean = ds.molecules.iter().map(|m| m.label).sum::<f64>() / 1000.0;
        let var = ds
            .molecules
            .iter()
            .map(|m| (m.label - mean) * (m.label - mean))
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "var {var}");
    }

    #[test]
    fn bond_buckets_cover_cutoff_range() {
        assert_eq!(bond_bucket(0.0), 0);
        assert_eq!(bond_bucket(0.087), 0);
        assert_eq!(bond_bucket(0.0875), 1);
        assert_eq!(bond_bucket(0.26), 2);
        assert_eq!(bond_bucket(0.3), 3);
        // MST edges above the cutoff clamp into the top bucket
        assert_eq!(bond_bucket(0.35), 3);
        assert_eq!(bond_bucket(1.7), 3);
    }

    #[test]
    fn jsonl_round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = gen_synthetic(20, (2, 10), 3).unwrap();
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn header_must_come_first_and_match_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"ccmd_dataset_version\":99,\"label_mean\":0.0,\"label_std\":1.0,\"seed\":0}\n",
        )
        .unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = "{\"ccmd_dataset_version\":1,\"label_mean\":0.0,\"label_std\":1.0,\"seed\":0}";
        let good = "{\"atoms\":[0,1],\"bonds\":[[0,1,0]],\"label\":0.5}";
        let missing_atoms = "{\"bonds\":[[0,1,0]],\"label\":0.5}";
        std::fs::write(&path, format!("{header}\n{good}\n{missing_atoms}\n")).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        match err {
            Error::Malformed { line, ref msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("atoms"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn hand_written_fixture_parses_to_hand_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"ccmd_dataset_version\":1,\"label_mean\":1.5,\"label_std\":2.0,\"seed\":42}\n",
                "{\"atoms\":[3,7],\"bonds\":[[0,1,2]],\"label\":-0.25}\n",
                "{\"atoms\":[1,2,1],\"bonds\":[[0,1,0],[1,2,3]],\"coords\":[[0,0,0],[0.1,0,0],[0.2,0,0]],\"label\":1.0}\n",
            ),
        )
        .unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds.header.label_std, 2.0);
        assert_eq!(ds.molecules.len(), 2);
        assert_eq!(ds.molecules[0].atoms, vec![3, 7]);
        assert_eq!(ds.molecules[0].bonds, vec![(0, 1, 2)]);
        assert_eq!(ds.molecules[1].coords.as_ref().unwrap().len(), 3);
        assert_eq!(ds.molecules[1].label, 1.0);
    }

    #[test]
    fn batch_pads_and_masks() {
        let m3 = Molecule::from_coords(
            vec![0, 1, 2],
            vec![[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.3, 0.0]],
        )
        .unwrap();
        let m5 = Molecule::from_coords(
            vec![0, 1, 2, 3, 4],
            vec![
                [0.0, 0.0, 0.0],
                [0.3, 0.0, 0.0],
                [0.0, 0.3, 0.0],
                [0.3, 0.3, 0.0],
                [0.15, 0.15, 0.3],
            ],
        )
        .unwrap();
        let single = GraphBatch::from_molecules(&[&m3]).unwrap();
        assert_eq!(single.token_count, 4);
        assert_eq!(single.mask, vec![1.0, 1.0, 1.0, 1.0]);

        let b = GraphBatch::from_molecules(&[&m3, &m5]).unwrap();
        assert_eq!(b.token_count, 6);
        assert_eq!(b.atom_counts, vec![3, 5]);
        assert_eq!(&b.mask[0..6], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&b.mask[6..12], &[1.0; 6]);
        // bond symmetry and virtual row emptiness
        for i in 0..6 {
            assert_eq!(b.bond_types[b.pair(0, 0, i)], -1);
            for j in 0..6 {
                assert_eq!(b.bond_types[b.pair(0, i, j)], b.bond_types[b.pair(0, j, i)]);
            }
        }
    }

    #[test]
    fn batching_rejects_empty_and_zero_size() {
        assert!(batch(&[], 4, None).is_err());
        let ds = gen_synthetic(3, (2, 4), 1).unwrap();
        assert!(batch(&ds.molecules, 0, None).is_err());
    }

    #[test]
    fn shuffle_is_deterministic_given_seed() {
        let ds = gen_synthetic(40, (2, 8), 5).unwrap();
        let a = batch(&ds.molecules, 7, Some(99)).unwrap();
        let b = batch(&ds.molecules, 7, Some(99)).unwrap();
        let c = batch(&ds.molecules, 7, Some(100)).unwrap();
        let sig = |bs: &[GraphBatch]| -> Vec<f64> {
            bs.iter().flat_map(|g| g.labels.clone()).collect()
        };
        assert_eq!(sig(&a), sig(&b));
        assert_ne!(sig(&a), sig(&c));
    }

    #[test]
    fn split_partitions_without_reshuffling() {
        let ds = gen_synthetic(50, (2, 8), 5).unwrap();
        let (train, val) = split(&ds, 10).unwrap();
        assert_eq!(train.molecules.len(), 40);
        assert_eq!(val.molecules.len(), 10);
        assert_eq!(train.header, ds.header);
        assert_eq!(val.header, ds.header);
        let rejoined: Vec<_> = train
            .molecules
            .iter()
            .chain(val.molecules.iter())
            .cloned()
            .collect();
        assert_eq!(rejoined, ds.molecules);
        assert!(split(&ds, 0).is_err());
        assert!(split(&ds, 50).is_err());
    }

    #[test]
    fn student_view_never_contains_raw_distances() {
        // strip coords (2D view): distances must be all zero, bond buckets stay
        let ds = gen_synthetic(10, (3, 10), 13).unwrap();
        let stripped: Vec<Molecule> = ds
            .molecules
            .iter()
            .map(|m| Molecule {
                coords: None,
                ..m.clone()
            })
            .collect();
        let batches = batch(&stripped, 4, None).unwrap();
        for gb in &batches {
            assert!(!gb.has_coords);
            assert!(gb.distances.iter().all(|&d| d == 0.0));
            assert!(gb.bond_types.iter().any(|&t| t >= 0));
        }
    }
}
