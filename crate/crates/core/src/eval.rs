//! Clustering metrics, planted synthetic collections and an exact
//! eigendecomposition reference for the spectral objective.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discordance::ScoredPair;
use crate::error::{Error, Result};
use crate::ndiff::Mat;
use crate::schema::{DType, Entity, EntityId, MatrixDescriptor, MatrixId, RelationalCollection};

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn dense_codes(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

fn contingency(truth: &[usize], pred: &[usize]) -> Result<Contingency> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "label vectors have lengths {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let (t, kt) = dense_codes(truth);
    let (p, kp) = dense_codes(pred);
    let mut table = vec![vec![0usize; kp]; kt];
    for (a, b) in t.iter().zip(&p) {
        table[*a][*b] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kp).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        n: truth.len(),
        table,
        rows,
        cols,
    })
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

fn pair_counts(c: &Contingency) -> (f64, f64, f64, f64) {
    let same_both: f64 = c.table.iter().flatten().map(|&v| comb2(v)).sum();
    let same_truth: f64 = c.rows.iter().map(|&v| comb2(v)).sum();
    let same_pred: f64 = c.cols.iter().map(|&v| comb2(v)).sum();
    (same_both, same_truth, same_pred, comb2(c.n))
}

/// Adjusted Rand index.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    let (both, a, b, total) = pair_counts(&c);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((both - expected) / (max - expected))
}

/// Rand index: fraction of instance pairs on which the partitions agree.
pub fn ri(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    let (both, a, b, total) = pair_counts(&c);
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok((total + 2.0 * both - a - b) / total)
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_info(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    let (ht, hp) = (entropy(&c.rows, c.n), entropy(&c.cols, c.n));
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    Ok((mutual_info(&c) / (0.5 * (ht + hp))).min(1.0))
}

/// Expected mutual information of two partitions with the given marginals
/// under random permutation of labels.
fn expected_mutual_info(c: &Contingency) -> f64 {
    let n = c.n;
    let nf = n as f64;
    let mut lfact = vec![0.0; n + 1];
    for i in 1..=n {
        lfact[i] = lfact[i - 1] + (i as f64).ln();
    }
    let mut emi = 0.0;
    for &a in &c.rows {
        for &b in &c.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = lfact[a] + lfact[b] + lfact[n - a] + lfact[n - b]
                    - lfact[n]
                    - lfact[nij]
                    - lfact[a - nij]
                    - lfact[b - nij]
                    - lfact[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information, normalized by the larger entropy.
pub fn ami(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    let (kt, kp) = (c.rows.len(), c.cols.len());
    if (kt == kp && (kt <= 1 || kt == c.n)) || c.n == 0 {
        return Ok(1.0);
    }
    let mi = mutual_info(&c);
    let emi = expected_mutual_info(&c);
    let norm = entropy(&c.rows, c.n).max(entropy(&c.cols, c.n));
    let mut denom = norm - emi;
    if denom.abs() < f64::EPSILON {
        denom = f64::EPSILON.copysign(denom);
    }
    Ok((mi - emi) / denom)
}

/// All four metrics keyed by name.
pub fn metrics(truth: &[usize], pred: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    out.insert("ami".to_string(), ami(truth, pred)?);
    out.insert("ari".to_string(), ari(truth, pred)?);
    out.insert("nmi".to_string(), nmi(truth, pred)?);
    out.insert("ri".to_string(), ri(truth, pred)?);
    Ok(out)
}

/// The `k` eigenvectors of smallest eigenvalue of a symmetric matrix and
/// the sum of those eigenvalues.
pub fn eigh_oracle(l: &Mat, k: usize) -> Result<(Mat, f64)> {
    let n = l.nrows();
    if l.ncols() != n || k > n {
        return Err(Error::Shape(format!(
            "need square matrix and k <= n, got {:?} and k={}",
            l.shape(),
            k
        )));
    }
    if (l - l.transpose()).amax() > 1e-10 {
        return Err(Error::Numerics("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let c = Mat::from_fn(n, k, |i, j| eig.eigenvectors[(i, order[j])]);
    let trace = order[..k].iter().map(|&i| eig.eigenvalues[i]).sum();
    Ok((c, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedEntity {
    pub name: String,
    pub count: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedMatrix {
    pub name: String,
    pub row: String,
    pub col: String,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Bernoulli rate (binary) or mean (real) of diagonal blocks `(u, u)`.
    #[serde(default = "default_within")]
    pub within: f64,
    /// Rate or mean of every other block.
    #[serde(default = "default_between")]
    pub between: f64,
    /// Explicit `k_row × k_col` block rates; overrides `within`/`between`.
    #[serde(default)]
    pub blocks: Option<Vec<Vec<f64>>>,
}

fn default_dtype() -> DType {
    DType::Binary
}

fn default_within() -> f64 {
    0.9
}

fn default_between() -> f64 {
    0.05
}

/// Entities with planted cluster counts and per-matrix block
/// distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub entities: Vec<PlantedEntity>,
    pub matrices: Vec<PlantedMatrix>,
    /// Standard deviation of additive Gaussian noise on real matrices.
    #[serde(default)]
    pub noise: f64,
    /// Keep instances ordered by cluster instead of shuffling them.
    #[serde(default)]
    pub sorted: bool,
}

impl PlantedSpec {
    /// Three entities in a ring of three binary matrices.
    pub fn ring(count: usize, k: usize, within: f64, between: f64) -> Self {
        let names = ["a", "b", "c"];
        PlantedSpec {
            entities: names
                .iter()
                .map(|n| PlantedEntity {
                    name: n.to_string(),
                    count,
                    k,
                })
                .collect(),
            matrices: (0..3)
                .map(|i| PlantedMatrix {
                    name: format!("{}_{}", names[i], names[(i + 1) % 3]),
                    row: names[i].to_string(),
                    col: names[(i + 1) % 3].to_string(),
                    dtype: DType::Binary,
                    within,
                    between,
                    blocks: None,
                })
                .collect(),
            noise: 0.0,
            sorted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |s: String| Error::Config(s);
        for (i, e) in self.entities.iter().enumerate() {
            if e.k == 0 || e.count < e.k {
                return Err(field(format!(
                    "entities[{}]: need 1 <= k <= count, got k={} count={}",
                    i, e.k, e.count
                )));
            }
        }
        for (i, m) in self.matrices.iter().enumerate() {
            let k_of = |name: &str, side: &str| {
                self.entities
                    .iter()
                    .find(|e| e.name == name)
                    .map(|e| e.k)
                    .ok_or_else(|| field(format!("matrices[{}].{}: unknown entity '{}'", i, side, name)))
            };
            let (kr, kc) = (k_of(&m.row, "row")?, k_of(&m.col, "col")?);
            let mut rates = vec![("within", m.within), ("between", m.between)];
            if let Some(b) = &m.blocks {
                if b.len() != kr || b.iter().any(|r| r.len() != kc) {
                    return Err(field(format!(
                        "matrices[{}].blocks: expected {}x{} rates",
                        i, kr, kc
                    )));
                }
                rates.extend(b.iter().flatten().map(|&v| ("blocks", v)));
            }
            for (name, v) in rates {
                if !v.is_finite() || (m.dtype == DType::Binary && !(0.0..=1.0).contains(&v)) {
                    return Err(field(format!(
                        "matrices[{}].{}: rate {} outside [0, 1]",
                        i, name, v
                    )));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(field(format!("noise: {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

impl PlantedMatrix {
    fn rate(&self, u: usize, v: usize) -> f64 {
        match &self.blocks {
            Some(b) => b[u][v],
            None if u == v => self.within,
            None => self.between,
        }
    }
}

fn planted_labels<R: Rng>(count: usize, k: usize, sorted: bool, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i * k / count).collect();
    if !sorted {
        labels.shuffle(rng);
    }
    labels
}

/// Draws every cell from its block distribution. Returns the collection
/// and planted labels indexed by entity id.
pub fn gen_planted_collection(
    spec: &PlantedSpec,
    seed: u64,
) -> Result<(RelationalCollection, Vec<Vec<usize>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<Vec<usize>> = spec
        .entities
        .iter()
        .map(|e| planted_labels(e.count, e.k, spec.sorted, &mut rng))
        .collect();
    let entities: Vec<Entity> = spec
        .entities
        .iter()
        .enumerate()
        .map(|(id, e)| Entity {
            id,
            name: e.name.clone(),
            count: e.count,
            labels: None,
        })
        .collect();
    let id_of = |name: &str| spec.entities.iter().position(|e| e.name == name).unwrap();
    let mut matrices = Vec::new();
    for (id, m) in spec.matrices.iter().enumerate() {
        let (r, c) = (id_of(&m.row), id_of(&m.col));
        let (lr, lc) = (&labels[r], &labels[c]);
        let mut values = Mat::zeros(lr.len(), lc.len());
        // column-major fill order keeps draws reproducible across layouts
        for j in 0..lc.len() {
            for i in 0..lr.len() {
                let rate = m.rate(lr[i], lc[j]);
                values[(i, j)] = match m.dtype {
                    DType::Binary => f64::from(u8::from(rng.gen::<f64>() < rate)),
                    DType::Real => rate + spec.noise * rng.sample::<f64, _>(StandardNormal),
                };
            }
        }
        matrices.push(MatrixDescriptor {
            id,
            name: m.name.clone(),
            row_entity: r,
            col_entity: c,
            dtype: m.dtype,
            values,
        });
    }
    Ok((RelationalCollection::new(entities, matrices)?, labels))
}

/// Three-entity layout with one curated matrix and two observational ones:
/// `item × subject` (knowledge), `word × subject` and `word × item` (data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscordanceSpec {
    pub count: usize,
    pub k: usize,
    pub within: f64,
    pub between: f64,
    /// Fraction of the nonzero cells of the chosen knowledge block to hide.
    pub hide_fraction: f64,
}

impl Default for DiscordanceSpec {
    fn default() -> Self {
        DiscordanceSpec {
            count: 90,
            k: 3,
            within: 0.9,
            between: 0.05,
            hide_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedDiscordance {
    pub collection: RelationalCollection,
    pub labels: Vec<Vec<usize>>,
    pub knowledge: Vec<MatrixId>,
    pub data: Vec<MatrixId>,
    /// Entities at the two ends of both paths.
    pub endpoints: (EntityId, EntityId),
    /// Planted `(row cluster, column cluster)` of the hidden knowledge
    /// block.
    pub hidden_block: (usize, usize),
    /// Hidden cells as `(matrix, row, col)`.
    pub mask: BTreeSet<(MatrixId, usize, usize)>,
}

pub const ITEM: EntityId = 0;
pub const SUBJECT: EntityId = 1;
pub const WORD: EntityId = 2;

/// Builds concordant data matrices with block-diagonal structure, derives
/// the knowledge matrix from the boolean composition of their block
/// patterns, then hides `⌈hide_fraction·nnz⌉` cells of one randomly chosen
/// dense knowledge block.
pub fn gen_planted_discordance(spec: &DiscordanceSpec, seed: u64) -> Result<PlantedDiscordance> {
    if !(0.0..=1.0).contains(&spec.hide_fraction) {
        return Err(Error::Config(format!(
            "hide_fraction: {} outside [0, 1]",
            spec.hide_fraction
        )));
    }
    let k = spec.k;
    let data_blocks: Vec<Vec<f64>> = (0..k)
        .map(|u| (0..k).map(|v| if u == v { spec.within } else { spec.between }).collect())
        .collect();
    // word clusters link an item cluster u to a subject cluster v when both
    // data blocks are dense for a common word cluster
    let knowledge_blocks: Vec<Vec<f64>> = (0..k)
        .map(|u| {
            (0..k)
                .map(|v| {
                    let linked = (0..k).any(|w| {
                        data_blocks[w][u] > 0.5 && data_blocks[w][v] > 0.5
                    });
                    if linked {
                        spec.within
                    } else {
                        spec.between
                    }
                })
                .collect()
        })
        .collect();
    let entity = |name: &str| PlantedEntity {
        name: name.to_string(),
        count: spec.count,
        k,
    };
    let matrix = |name: &str, row: &str, col: &str, blocks: &Vec<Vec<f64>>| PlantedMatrix {
        name: name.to_string(),
        row: row.to_string(),
        col: col.to_string(),
        dtype: DType::Binary,
        within: spec.within,
        between: spec.between,
        blocks: Some(blocks.clone()),
    };
    let planted = PlantedSpec {
        entities: vec![entity("item"), entity("subject"), entity("word")],
        matrices: vec![
            matrix("item_subject", "item", "subject", &knowledge_blocks),
            matrix("word_subject", "word", "subject", &data_blocks),
            matrix("word_item", "word", "item", &data_blocks),
        ],
        noise: 0.0,
        sorted: false,
    };
    let (collection, labels) = gen_planted_collection(&planted, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d15c);
    let dense: Vec<(usize, usize)> = (0..k)
        .flat_map(|u| (0..k).map(move |v| (u, v)))
        .filter(|&(u, v)| knowledge_blocks[u][v] > 0.5)
        .collect();
    let hidden_block = *dense
        .choose(&mut rng)
        .ok_or_else(|| Error::Config("knowledge matrix has no dense block".into()))?;
    let x = &collection.matrix(0).values;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if x[(i, j)] != 0.0
                && labels[ITEM][i] == hidden_block.0
                && labels[SUBJECT][j] == hidden_block.1
            {
                cells.push((i, j));
            }
        }
    }
    let hide = (spec.hide_fraction * cells.len() as f64).ceil() as usize;
    cells.shuffle(&mut rng);
    cells.truncate(hide);
    let mut values = x.clone();
    for &(i, j) in &cells {
        values[(i, j)] = 0.0;
    }
    let collection = collection.with_matrix_values(0, values)?;
    Ok(PlantedDiscordance {
        collection,
        labels,
        knowledge: vec![0],
        data: vec![1, 2],
        endpoints: (ITEM, SUBJECT),
        hidden_block,
        mask: cells.into_iter().map(|(i, j)| (0, i, j)).collect(),
    })
}

/// Fraction of mask cells lying inside some block of the selected chain
/// pairs. Hidden cells are zero in the input, so they are located by block
/// region rather than by the nonzero edge list.
pub fn mask_coverage<'a>(
    pairs: impl IntoIterator<Item = &'a ScoredPair>,
    mask: &BTreeSet<(MatrixId, usize, usize)>,
) -> f64 {
    if mask.is_empty() {
        return 1.0;
    }
    let regions: Vec<(MatrixId, BTreeSet<usize>, BTreeSet<usize>)> = pairs
        .into_iter()
        .flat_map(|p| p.chain_w.blocks.iter().chain(&p.chain_a.blocks))
        .map(|b| {
            (
                b.input.matrix,
                b.input.rows.iter().copied().collect(),
                b.input.cols.iter().copied().collect(),
            )
        })
        .collect();
    let hit = mask
        .iter()
        .filter(|(m, r, c)| {
            regions
                .iter()
                .any(|(bm, rows, cols)| bm == m && rows.contains(r) && cols.contains(c))
        })
        .count();
    hit as f64 / mask.len() as f64
}

/// Majority true label among the members of predicted cluster `u`.
pub fn majority_label(truth: &[usize], pred: &[usize], u: usize) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (t, p) in truth.iter().zip(pred) {
        if *p == u {
            *counts.entry(*t).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_partitions_score_one() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        for (_, v) in metrics(&a, &a).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_cluster_prediction() {
        let t = [0, 0, 1, 1];
        let p = [0, 0, 0, 0];
        assert!(ari(&t, &p).unwrap() <= 0.0);
        // agreeing pairs: the 2 within-truth pairs out of 6
        assert!((ri(&t, &p).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(ari(&[0, 1], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn eigh_path_graph() {
        let l = Mat::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        let (c, t) = eigh_oracle(&l, 1).unwrap();
        assert!(t.abs() < 1e-12);
        let v = c.column(0);
        assert!((v[0] - v[1]).abs() < 1e-12 && (v[1] - v[2]).abs() < 1e-12);
        assert_eq!(eigh_oracle(&Mat::zeros(4, 4), 2).unwrap().1, 0.0);
    }

    #[test]
    fn noiseless_block_diagonal() {
        let mut spec = PlantedSpec::ring(6, 2, 1.0, 0.0);
        spec.sorted = true;
        let (c, labels) = gen_planted_collection(&spec, 3).unwrap();
        let x = &c.matrix(0).values;
        for i in 0..6 {
            for j in 0..6 {
                let same = labels[0][i] == labels[1][j];
                assert_eq!(x[(i, j)], if same { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn invalid_density_names_field() {
        let spec = PlantedSpec::ring(6, 2, 1.2, 0.0);
        let e = gen_planted_collection(&spec, 0).unwrap_err();
        assert!(e.to_string().contains("matrices[0].within"), "{}", e);
    }

    #[test]
    fn hidden_fraction_rounds_up() {
        let spec = DiscordanceSpec {
            count: 30,
            hide_fraction: 0.05,
            ..Default::default()
        };
        let full = gen_planted_discordance(&DiscordanceSpec { hide_fraction: 0.0, ..spec.clone() }, 5).unwrap();
        let p = gen_planted_discordance(&spec, 5).unwrap();
        let (u, v) = p.hidden_block;
        let x = &full.collection.matrix(0).values;
        let mut nnz = 0;
        for i in 0..30 {
            for j in 0..30 {
                if x[(i, j)] != 0.0 && full.labels[ITEM][i] == u && full.labels[SUBJECT][j] == v {
                    nnz += 1;
                }
            }
        }
        assert_eq!(p.mask.len(), (0.05 * nnz as f64).ceil() as usize);
        assert_eq!(
            full.collection.matrix(0).nnz() - p.collection.matrix(0).nnz(),
            p.mask.len()
        );
    }
}
