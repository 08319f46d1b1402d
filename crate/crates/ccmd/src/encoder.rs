//! Input token construction: atom-id embeddings plus an absolute position
//! encoding (APE) built from each atom's adjacent edge features, and a
//! learned virtual token at slot 0.
//!
//! The two views share one code path and differ only in the edge feature:
//! the 2D view embeds categorical bond types, the 3D view expands raw
//! distances with radial basis functions. The APE sum runs over bonded
//! neighbors in both views; dense all-pairs geometry additionally reaches
//! the teacher through the attention bias in `backbone`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moldata::{GraphBatch, ATOM_VOCAB, BOND_VOCAB};
use crate::params::{normal_embed, uniform_fan_in, ParamStore, ParamVars};

/// Which input modality a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            View::TwoD => write!(f, "2d"),
            View::ThreeD => write!(f, "3d"),
        }
    }
}

/// Radial basis expansion: K Gaussian responses at centers equally spaced on
/// [0, d_max], with width chosen so adjacent centers overlap at ~e^-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub k: usize,
    pub d_max: f64,
}

impl Default for RbfConfig {
    fn default() -> Self {
        // d_max = sqrt(3): the unit-cube diameter bounds every distance
        RbfConfig {
            k: 32,
            d_max: 3.0_f64.sqrt(),
        }
    }
}

impl RbfConfig {
    pub fn gamma(&self) -> f64 {
        let k1 = (self.k - 1) as f64;
        k1 * k1 / (self.d_max * self.d_max)
    }

    pub fn centers(&self) -> Vec<f64> {
        let k = self.k;
        (0..k)
            .map(|i| self.d_max * i as f64 / (k - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("rbf needs k >= 2, got {}", self.k)));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::Config(format!("rbf d_max must be > 0, got {}", self.d_max)));
        }
        Ok(())
    }
}

/// Component k = exp(-gamma (d - mu_k)^2).
pub fn rbf_expand(d: f64, cfg: &RbfConfig) -> Result<Vec<f64>> {
    if d < 0.0 || !d.is_finite() {
        return Err(Error::InvalidArgument {
            op: "rbf_expand",
            msg: format!("distance must be finite and >= 0, got {d}"),
        });
    }
    cfg.validate()?;
    let gamma = cfg.gamma();
    Ok(cfg
        .centers()
        .iter()
        .map(|mu| (-gamma * (d - mu) * (d - mu)).exp())
        .collect())
}

/// Width hyperparameters of the encoder; the enclosing backbone config owns
/// an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Model width (token embedding size).
    pub d: usize,
    /// Bond-type embedding width (2D edge features).
    pub d_e: usize,
    pub rbf: RbfConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            d_e: 16,
            rbf: RbfConfig::default(),
        }
    }
}

impl EncoderConfig {
    fn ape_in(&self, view: View) -> usize {
        match view {
            View::TwoD => self.d_e,
            View::ThreeD => self.rbf.k,
        }
    }
}

/// Register encoder parameters: atom/bond embeddings N(0, 0.02), APE
/// perceptron fan-in uniform, virtual token zeros.
pub fn init_encoder_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    view: View,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d;
    store.add(
        "enc.atom_emb",
        &[ATOM_VOCAB, d],
        normal_embed(rng, ATOM_VOCAB * d),
    );
    if view == View::TwoD {
        store.add(
            "enc.bond_emb",
            &[BOND_VOCAB, cfg.d_e],
            normal_embed(rng, BOND_VOCAB * cfg.d_e),
        );
    }
    let ape_in = cfg.ape_in(view);
    store.add("enc.ape.w1", &[ape_in, d], uniform_fan_in(rng, ape_in, ape_in * d));
    store.add("enc.ape.b1", &[d], vec![0.0; d]);
    store.add("enc.ape.w2", &[d, d], uniform_fan_in(rng, d, d * d));
    store.add("enc.ape.b2", &[d], vec![0.0; d]);
    store.add("enc.virtual", &[d], vec![0.0; d]);
}

/// Constant 0/1 row mask over [B*T] tokens, expanded to width `d`.
/// `atoms_only` additionally zeroes the virtual slots.
pub fn row_mask_expanded(batch: &GraphBatch, d: usize, atoms_only: bool) -> Vec<f64> {
    let t = batch.token_count;
    let mut out = vec![0.0; batch.batch_size * t * d];
    for (row, &m) in batch.mask.iter().enumerate() {
        if m == 0.0 || (atoms_only && row % t == 0) {
            continue;
        }
        out[row * d..(row + 1) * d].fill(1.0);
    }
    out
}

/// Per-atom sum of adjacent RBF-expanded bond distances; zero rows for the
/// virtual slot and padding. Constant with respect to parameters.
fn rbf_neighbor_sums(batch: &GraphBatch, cfg: &RbfConfig) -> Result<Vec<f64>> {
    let (b, t, k) = (batch.batch_size, batch.token_count, cfg.k);
    let mut out = vec![0.0; b * t * k];
    for bi in 0..b {
        for i in 1..t {
            for j in 1..t {
                if batch.bond_types[batch.pair(bi, i, j)] >= 0 {
                    let d = batch.distances[batch.pair(bi, i, j)];
                    let rbf = rbf_expand(d, cfg)?;
                    let row = (bi * t + i) * k;
                    for (x, r) in out[row..row + k].iter_mut().zip(&rbf) {
                        *x += r;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-atom count of adjacent bonds by type: [B*T, BOND_VOCAB], constant.
/// Multiplying by the bond embedding table realizes the 2D APE sum.
fn bond_type_counts(batch: &GraphBatch) -> Vec<f64> {
    let (b, t) = (batch.batch_size, batch.token_count);
    let mut out = vec![0.0; b * t * BOND_VOCAB];
    for bi in 0..b {
        for i in 1..t {
            for j in 1..t {
                let ty = batch.bond_types[batch.pair(bi, i, j)];
                if ty >= 0 {
                    out[(bi * t + i) * BOND_VOCAB + ty as usize] += 1.0;
                }
            }
        }
    }
    out
}

/// Build the input token tensor [B*T, d]: token i>=1 is
/// `atom_embed(id_i) + MLP(sum of adjacent edge features)`, token 0 is the
/// learned virtual vector, masked slots are exactly zero.
pub fn ape_tokens(
    tape: &Tape,
    params: &ParamVars,
    cfg: &EncoderConfig,
    batch: &GraphBatch,
    view: View,
) -> Result<Var> {
    if view == View::ThreeD && !batch.has_coords {
        return Err(Error::InvalidArgument {
            op: "ape_tokens",
            msg: "3d view requires coordinates".into(),
        });
    }
    let (b, t, d) = (batch.batch_size, batch.token_count, cfg.d);
    let bt = b * t;

    let embed = tape.embedding_lookup(params.get("enc.atom_emb")?, &batch.atom_ids)?;

    let agg = match view {
        View::TwoD => {
            let counts = tape.constant(&bond_type_counts(batch), &[bt, BOND_VOCAB])?;
            tape.matmul(counts, params.get("enc.bond_emb")?)?
        }
        View::ThreeD => tape.constant(&rbf_neighbor_sums(batch, &cfg.rbf)?, &[bt, cfg.rbf.k])?,
    };
    let h = tape.gelu(tape.add_row(
        tape.matmul(agg, params.get("enc.ape.w1")?)?,
        params.get("enc.ape.b1")?,
    )?)?;
    let ape = tape.add_row(tape.matmul(h, params.get("enc.ape.w2")?)?, params.get("enc.ape.b2")?)?;

    let atom_mask = tape.constant(&row_mask_expanded(batch, d, true), &[bt, d])?;
    let atoms_part = tape.mul(tape.add(embed, ape)?, atom_mask)?;

    // virtual vector placed at token 0 of each molecule via a 0/1 selector
    let mut sel = vec![0.0; bt];
    for bi in 0..b {
        sel[bi * t] = 1.0;
    }
    let sel = tape.constant(&sel, &[bt, 1])?;
    let virt = tape.reshape(params.get("enc.virtual")?, &[1, d])?;
    let virtual_part = tape.matmul(sel, virt)?;

    tape.add(atoms_part, virtual_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moldata::Molecule;
    use rand::SeedableRng;

    fn params_for(view: View, cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_params(&mut store, cfg, view, &mut rng);
        store
    }

    #[test]
    fn rbf_is_one_at_centers_and_symmetric_between_them() {
        let cfg = RbfConfig::default();
        let centers = cfg.centers();
        for &mu in &[centers[0], centers[7], centers[31]] {
            let v = rbf_expand(mu, &cfg).unwrap();
            let k = centers.iter().position(|&c| c == mu).unwrap();
            assert!((v[k] - 1.0).abs() < 1e-15);
        }
        let mid = 0.5 * (centers[4] + centers[5]);
        let v = rbf_expand(mid, &cfg).unwrap();
        assert!((v[4] - v[5]).abs() < 1e-15);
    }

    #[test]
    fn rbf_matches_direct_formula() {
        let cfg = RbfConfig::default();
        let v = rbf_expand(0.5, &cfg).unwrap();
        let gamma = cfg.gamma();
        for (k, mu) in cfg.centers().iter().enumerate() {
            let direct = (-gamma * (0.5 - mu) * (0.5 - mu)).exp();
            assert!((v[k] - direct).abs() < 1e-15);
        }
        assert!(rbf_expand(-0.1, &cfg).is_err());
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            d_e: 4,
            rbf: RbfConfig { k: 6, d_max: 3.0_f64.sqrt() },
        }
    }

    #[test]
    fn isolated_atom_token_is_embed_plus_mlp_of_zero() {
        // hand-built batch with no bonds: the APE aggregate is the empty sum
        let cfg = tiny_cfg();
        let store = params_for(View::TwoD, &cfg, 1);
        let batch = GraphBatch {
            batch_size: 1,
            token_count: 2,
            atom_ids: vec![0, 5],
            bond_types: vec![-1; 4],
            distances: vec![0.0; 4],
            mask: vec![1.0, 1.0],
            atom_counts: vec![1],
            labels: vec![0.0],
            has_coords: false,
        };
        let tape = Tape::new();
        let vars = store.leaves(&tape).unwrap();
        let tokens = ape_tokens(&tape, &vars, &cfg, &batch, View::TwoD).unwrap();
        let got = tape.value(tokens);

        // direct: atom_embed[5] + W2·gelu(W1·0 + b1) + b2, with zero biases
        // at init the MLP(0) term is exactly zero
        let embed = &store.get("enc.atom_emb").unwrap().values[5 * 8..6 * 8];
        for j in 0..8 {
            assert!((got[8 + j] - embed[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_atoms_permutes_tokens_and_fixes_virtual() {
        let cfg = tiny_cfg();
        let store = params_for(View::ThreeD, &cfg, 2);
        let coords = vec![
            [0.1, 0.1, 0.1],
            [0.4, 0.1, 0.1],
            [0.1, 0.5, 0.1],
            [0.6, 0.6, 0.6],
        ];
        let atoms = vec![3, 7, 7, 1];
        let m = Molecule::from_coords(atoms.clone(), coords.clone()).unwrap();
        // reversal permutation: new index i <- old index 3-i
        let perm = [3usize, 2, 1, 0];
        let coords_p: Vec<[f64; 3]> = perm.iter().map(|&o| coords[o]).collect();
        let atoms_p: Vec<usize> = perm.iter().map(|&o| atoms[o]).collect();
        let mp = Molecule::from_coords(atoms_p, coords_p).unwrap();

        let run = |mol: &Molecule| -> Vec<f64> {
            let batch = GraphBatch::from_molecules(&[mol]).unwrap();
            let tape = Tape::new();
            let vars = store.leaves(&tape).unwrap();
            let tokens = ape_tokens(&tape, &vars, &cfg, &batch, View::ThreeD).unwrap();
            tape.value(tokens)
        };
        let (base, permuted) = (run(&m), run(&mp));
        let d = cfg.d;
        assert_eq!(&base[0..d], &permuted[0..d], "virtual token moved");
        for i in 0..4 {
            let old = &base[(perm[i] + 1) * d..(perm[i] + 2) * d];
            let new = &permuted[(i + 1) * d..(i + 2) * d];
            for (a, b) in old.iter().zip(new) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_atom_id_different_neighborhood_gives_distinct_tokens() {
        let cfg = tiny_cfg();
        let store = params_for(View::TwoD, &cfg, 3);
        // both molecules carry atom id 5 at position 0; neighborhoods differ
        let a = Molecule {
            atoms: vec![5, 1],
            bonds: vec![(0, 1, 0)],
            coords: None,
            label: 0.0,
        };
        let b = Molecule {
            atoms: vec![5, 1, 1],
            bonds: vec![(0, 1, 3), (0, 2, 3)],
            coords: None,
            label: 0.0,
        };
        let token_of = |mol: &Molecule| -> Vec<f64> {
            let batch = GraphBatch::from_molecules(&[mol]).unwrap();
            let tape = Tape::new();
            let vars = store.leaves(&tape).unwrap();
            let tokens = ape_tokens(&tape, &vars, &cfg, &batch, View::TwoD).unwrap();
            tape.value(tokens)[cfg.d..2 * cfg.d].to_vec()
        };
        let (ta, tb) = (token_of(&a), token_of(&b));
        let norm: f64 = ta
            .iter()
            .zip(&tb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1e-6, "tokens indistinguishable: {norm}");
    }

    #[test]
    fn masked_slots_are_exactly_zero() {
        let cfg = tiny_cfg();
        let store = params_for(View::TwoD, &cfg, 4);
        let m2 = Molecule {
            atoms: vec![0, 1],
            bonds: vec![(0, 1, 1)],
            coords: None,
            label: 0.0,
        };
        let m4 = Molecule {
            atoms: vec![2, 3, 4, 5],
            bonds: vec![(0, 1, 0), (1, 2, 1), (2, 3, 2)],
            coords: None,
            label: 0.0,
        };
        let batch = GraphBatch::from_molecules(&[&m2, &m4]).unwrap();
        let tape = Tape::new();
        let vars = store.leaves(&tape).unwrap();
        let tokens = ape_tokens(&tape, &vars, &cfg, &batch, View::TwoD).unwrap();
        let v = tape.value(tokens);
        let d = cfg.d;
        // molecule 0 occupies tokens 0..=2 of 5; slots 3,4 are padding
        for row in 3..5 {
            assert!(v[row * d..(row + 1) * d].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn three_d_view_without_coords_is_rejected() {
        let cfg = tiny_cfg();
        let store = params_for(View::ThreeD, &cfg, 5);
        let m = Molecule {
            atoms: vec![0, 1],
            bonds: vec![(0, 1, 1)],
            coords: None,
            label: 0.0,
        };
        let batch = GraphBatch::from_molecules(&[&m]).unwrap();
        let tape = Tape::new();
        let vars = store.leaves(&tape).unwrap();
        assert!(ape_tokens(&tape, &vars, &cfg, &batch, View::ThreeD).is_err());
    }
}
