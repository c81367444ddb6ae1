//! Discordance analysis between two disjoint subsets of matrices.
//!
//! Two entities connected by a path through one subset (e.g. curated
//! knowledge) and a path through another (e.g. observational data) are
//! traversed at the block level, starting from each cluster of the first
//! entity. Each pair of chains is scored by how well the reconstruction
//! matches the input along each chain and how close the shared entity
//! blocks are across the chains.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiway::Block;
use crate::ndiff::Mat;
use crate::schema::{EntityId, MatrixId, RelationalCollection};
use crate::trainer::FactorSet;

/// Relative singular value cutoff used when taking subspace bases.
pub const RANK_TOL: f64 = 1e-10;

/// Alternating entity–matrix route: `entities[s]` and `entities[s + 1]` are
/// the two axes of `matrices[s]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixPath {
    pub entities: Vec<EntityId>,
    pub matrices: Vec<MatrixId>,
}

impl MatrixPath {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn describe(&self, c: &RelationalCollection) -> String {
        let mut s = c.entity(self.entities[0]).name.clone();
        for (m, e) in self.matrices.iter().zip(&self.entities[1..]) {
            let _ = write!(s, " -{}- {}", c.matrix(*m).name, c.entity(*e).name);
        }
        s
    }
}

/// Shortest path from `i` to `j` using only matrices in `subset`. Breadth
/// first; neighbours are expanded in ascending matrix id, so ties resolve to
/// the lowest ids.
pub fn find_path(
    c: &RelationalCollection,
    i: EntityId,
    j: EntityId,
    subset: &BTreeSet<MatrixId>,
) -> Result<MatrixPath> {
    if subset.is_empty() {
        return Err(Error::Path("empty matrix subset".into()));
    }
    for &e in &[i, j] {
        if e >= c.num_entities() {
            return Err(Error::Path(format!("unknown entity id {e}")));
        }
    }
    if let Some(&m) = subset.iter().find(|&&m| m >= c.num_matrices()) {
        return Err(Error::Path(format!("unknown matrix id {m}")));
    }
    if i == j {
        return Err(Error::Path(format!(
            "endpoints are the same entity '{}'",
            c.entity(i).name
        )));
    }
    let mut parent: BTreeMap<EntityId, (EntityId, MatrixId)> = BTreeMap::new();
    let mut seen = BTreeSet::from([i]);
    let mut queue = VecDeque::from([i]);
    while let Some(e) = queue.pop_front() {
        if e == j {
            break;
        }
        for m in c.matrices_of(e) {
            if !subset.contains(&m) {
                continue;
            }
            let next = c.matrix(m).other(e).expect("matrix touches entity");
            if seen.insert(next) {
                parent.insert(next, (e, m));
                queue.push_back(next);
            }
        }
    }
    if !seen.contains(&j) {
        let names: Vec<&str> = subset.iter().map(|&m| c.matrix(m).name.as_str()).collect();
        return Err(Error::Path(format!(
            "no path from '{}' to '{}' through {{{}}}",
            c.entity(i).name,
            c.entity(j).name,
            names.join(", ")
        )));
    }
    let mut entities = vec![j];
    let mut matrices = Vec::new();
    let mut e = j;
    while e != i {
        let (p, m) = parent[&e];
        matrices.push(m);
        entities.push(p);
        e = p;
    }
    entities.reverse();
    matrices.reverse();
    Ok(MatrixPath { entities, matrices })
}

/// One step of a chain: the block of `matrix` entered from cluster
/// `from_cluster` of `from_entity`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainBlock {
    pub from_entity: EntityId,
    pub to_entity: EntityId,
    pub from_cluster: usize,
    pub to_cluster: usize,
    /// Whether the entering entity indexes the rows of the matrix.
    pub from_is_row: bool,
    pub input: Block,
    pub recon: Block,
}

impl ChainBlock {
    /// Block values oriented so that rows are instances of the entity on the
    /// given side of this step.
    fn oriented(values: &Mat, from_is_row: bool, from_side: bool) -> Mat {
        if from_is_row == from_side {
            values.clone()
        } else {
            values.transpose()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    /// Cluster of the first path entity the chain starts from.
    pub start: usize,
    pub path: MatrixPath,
    pub blocks: Vec<ChainBlock>,
}

impl Chain {
    /// Entity and cluster at every position along the path.
    pub fn visits(&self) -> Vec<(EntityId, usize)> {
        let mut out = vec![(self.path.entities[0], self.start)];
        for b in &self.blocks {
            out.push((b.to_entity, b.to_cluster));
        }
        out
    }

    pub fn end(&self) -> usize {
        self.blocks.last().map_or(self.start, |b| b.to_cluster)
    }

    /// Block touching the visit at position `s`, with rows indexing that
    /// visit's instances.
    fn visit_block(&self, s: usize, reconstructed: bool) -> Mat {
        let (b, from_side) = if s < self.blocks.len() {
            (&self.blocks[s], true)
        } else {
            (&self.blocks[s - 1], false)
        };
        let values = if reconstructed { &b.recon.values } else { &b.input.values };
        ChainBlock::oriented(values, b.from_is_row, from_side)
    }
}

/// Index of the largest entry, lowest index on ties.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Walks `path` from cluster `u` of its first entity, choosing at each matrix
/// the cluster of the next entity most associated with the current one.
pub fn traverse_chain(
    c: &RelationalCollection,
    path: &MatrixPath,
    u: usize,
    factors: &FactorSet,
) -> Result<Chain> {
    let first = path.entities[0];
    let k0 = factors.clusters[first].k;
    if u >= k0 {
        return Err(Error::Chain(format!(
            "start cluster {u} out of range for '{}' with {k0} clusters",
            c.entity(first).name
        )));
    }
    let members: Vec<Vec<Vec<usize>>> = factors.clusters.iter().map(|a| a.members()).collect();
    let mut blocks = Vec::with_capacity(path.len());
    let mut n = u;
    for (s, &m) in path.matrices.iter().enumerate() {
        let from = path.entities[s];
        let to = path.entities[s + 1];
        if members[from][n].is_empty() {
            return Err(Error::Chain(format!(
                "cluster {n} of '{}' is empty at step {s}",
                c.entity(from).name
            )));
        }
        let desc = c.matrix(m);
        let a = &factors.a[m];
        let from_is_row = desc.row_entity == from;
        let v = if from_is_row {
            argmax(a.row(n).iter().copied())
        } else {
            argmax(a.column(n).iter().copied())
        }
        .ok_or_else(|| Error::Chain(format!("matrix '{}' has no clusters", desc.name)))?;
        if members[to][v].is_empty() {
            return Err(Error::Chain(format!(
                "cluster {v} of '{}' is empty at step {s}",
                c.entity(to).name
            )));
        }
        let (ru, cv) = if from_is_row { (n, v) } else { (v, n) };
        let rows = &members[desc.row_entity][ru];
        let cols = &members[desc.col_entity][cv];
        blocks.push(ChainBlock {
            from_entity: from,
            to_entity: to,
            from_cluster: n,
            to_cluster: v,
            from_is_row,
            input: Block::extract(&desc.values, m, ru, cv, rows, cols),
            recon: Block::extract(&factors.x_rec[m], m, ru, cv, rows, cols),
        });
        n = v;
    }
    Ok(Chain {
        start: u,
        path: path.clone(),
        blocks,
    })
}

/// Cosine distance `1 − cos` between two rows; a pair of zero rows is at
/// distance 0, a single zero row at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Row-averaged cosine distance between an input block and its
/// reconstruction.
pub fn block_distance(input: &Mat, recon: &Mat) -> f64 {
    let n = input.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let a: Vec<f64> = input.row(i).iter().copied().collect();
            let b: Vec<f64> = recon.row(i).iter().copied().collect();
            cosine_distance(&a, &b)
        })
        .sum();
    total / n as f64
}

/// Summed reconstruction deviation along a chain.
pub fn d1(chain: &Chain) -> f64 {
    chain
        .blocks
        .iter()
        .map(|b| block_distance(&b.input.values, &b.recon.values))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chordal {
    pub distance: f64,
    /// Dimensions of the two subspaces (at least 1 each).
    pub p: usize,
    pub q: usize,
    /// Set when either block has rank 0; the distance is then maximal.
    pub degenerate: bool,
}

/// Sweep limit of the one-sided Jacobi orthogonalization.
const JACOBI_SWEEPS: usize = 60;

/// Rotates pairs of columns of `a` until they are mutually orthogonal
/// (one-sided Jacobi). The result spans the same column space; its
/// column norms are the singular values of `a`.
fn orthogonalize_columns(a: &Mat) -> Mat {
    let mut w = a.clone();
    let (n, p) = w.shape();
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..n {
                    alpha += w[(k, i)] * w[(k, i)];
                    beta += w[(k, j)] * w[(k, j)];
                    gamma += w[(k, i)] * w[(k, j)];
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let (wi, wj) = (w[(k, i)], w[(k, j)]);
                    w[(k, i)] = c * wi - s * wj;
                    w[(k, j)] = s * wi + c * wj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    w
}

/// Orthonormal basis of the column space of `a`, dropping directions with
/// singular value below `RANK_TOL` times the largest. Columns come in
/// descending singular value order.
pub fn column_basis(a: &Mat) -> Mat {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Mat::zeros(a.nrows(), 0);
    }
    let w = orthogonalize_columns(a);
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let smax = norms.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return Mat::zeros(a.nrows(), 0);
    }
    let mut keep: Vec<usize> = (0..norms.len())
        .filter(|&i| norms[i] > RANK_TOL * smax)
        .collect();
    keep.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut q = Mat::from_fn(a.nrows(), keep.len(), |i, j| w[(i, keep[j])] / norms[keep[j]]);
    // one Gram-Schmidt pass removes the residual overlap of small columns
    for j in 0..q.ncols() {
        for i in 0..j {
            let d = q.column(i).dot(&q.column(j));
            let qi = q.column(i).into_owned();
            q.column_mut(j).axpy(-d, &qi, 1.0);
        }
        let nrm = q.column(j).norm();
        q.column_mut(j).unscale_mut(nrm);
    }
    q
}

/// Chordal distance between the column spaces of `a` and `b`, which must
/// have the same number of rows.
pub fn chordal_distance(a: &Mat, b: &Mat) -> Result<Chordal> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "chordal distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let qa = column_basis(a);
    let qb = column_basis(b);
    let (p, q) = (qa.ncols(), qb.ncols());
    if p == 0 || q == 0 {
        let r = p.max(1).min(q.max(1));
        return Ok(Chordal {
            distance: (r as f64).sqrt(),
            p: p.max(1),
            q: q.max(1),
            degenerate: true,
        });
    }
    // the squared cosines of the principal angles sum to ‖QaᵀQb‖²_F
    let cos2 = (qa.transpose() * &qb).norm_squared();
    let r = p.min(q) as f64;
    Ok(Chordal {
        distance: (r - cos2).max(0.0).sqrt(),
        p,
        q,
        degenerate: false,
    })
}

/// An entity visited by both chains with the same cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEntity {
    pub entity: EntityId,
    pub cluster: usize,
    pub chordal: Chordal,
}

/// Shared entities of two chains, each compared at its first occurrence in
/// either chain: the reconstructed block of `w` against the input block of
/// `a`, both oriented with the shared instances as rows.
pub fn d2(w: &Chain, a: &Chain) -> Result<(f64, Vec<SharedEntity>)> {
    let vw = w.visits();
    let va = a.visits();
    let mut shared = Vec::new();
    let mut done = BTreeSet::new();
    for (sw, &(e, n)) in vw.iter().enumerate() {
        if !done.insert(e) {
            continue;
        }
        let Some(sa) = va.iter().position(|&(ea, _)| ea == e) else {
            continue;
        };
        if va[sa].1 != n {
            continue;
        }
        let bw = w.visit_block(sw, true);
        let ba = a.visit_block(sa, false);
        shared.push(SharedEntity {
            entity: e,
            cluster: n,
            chordal: chordal_distance(&bw, &ba)?,
        });
    }
    let total = shared.iter().map(|s| s.chordal.distance).sum();
    Ok((total, shared))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl Weights {
    pub fn score(&self, d1_w: f64, d1_a: f64, d2: f64) -> f64 {
        self.alpha * d1_w - self.beta * d1_a - self.gamma * d2
    }
}

/// How chains of the two paths are paired for scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Same starting cluster.
    #[default]
    Start,
    /// Same starting cluster or same ending cluster.
    Ends,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Max,
    Min,
    AbsMax,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub chain_w: Chain,
    pub chain_a: Chain,
    pub d1_w: f64,
    pub d1_a: f64,
    pub d2: f64,
    pub shared: Vec<SharedEntity>,
    pub score: f64,
}

impl ScoredPair {
    pub fn u(&self) -> usize {
        self.chain_w.start
    }

    pub fn degenerate(&self) -> bool {
        self.shared.iter().any(|s| s.chordal.degenerate)
    }
}

pub fn score_pair(w: &Chain, a: &Chain, weights: &Weights) -> Result<ScoredPair> {
    let d1_w = d1(w);
    let d1_a = d1(a);
    let (d2, shared) = d2(w, a)?;
    Ok(ScoredPair {
        chain_w: w.clone(),
        chain_a: a.clone(),
        d1_w,
        d1_a,
        d2,
        shared,
        score: weights.score(d1_w, d1_a, d2),
    })
}

/// Scores every pair admitted by `pairing`, ordered by the starting cluster
/// of the first chain and then of the second.
pub fn score_pairs(
    chains_w: &[Chain],
    chains_a: &[Chain],
    weights: &Weights,
    pairing: Pairing,
) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for w in chains_w {
        for a in chains_a {
            let admit = match pairing {
                Pairing::Start => w.start == a.start,
                Pairing::Ends => w.start == a.start || w.end() == a.end(),
            };
            if admit {
                out.push(score_pair(w, a, weights)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Pair("no chain pairs share a cluster".into()));
    }
    out.sort_by_key(|p| (p.chain_w.start, p.chain_a.start));
    Ok(out)
}

/// Indices of the selected pairs; ties resolve to the earliest pair.
pub fn select_discordant(pairs: &[ScoredPair], mode: Selection) -> Vec<usize> {
    let pick = |key: &dyn Fn(&ScoredPair) -> f64| -> Option<usize> {
        argmax(pairs.iter().map(key))
    };
    let mut out: Vec<usize> = match mode {
        Selection::Max => pick(&|p| p.score).into_iter().collect(),
        Selection::Min => pick(&|p| -p.score).into_iter().collect(),
        Selection::AbsMax => pick(&|p| p.score.abs()).into_iter().collect(),
        Selection::Both => pick(&|p| p.score)
            .into_iter()
            .chain(pick(&|p| -p.score))
            .collect(),
    };
    out.dedup();
    out
}

/// Nonzero input cells inside every block of the given pairs, as
/// `(matrix, row, col)`.
pub fn extract_edges<'a>(
    pairs: impl IntoIterator<Item = &'a ScoredPair>,
) -> BTreeSet<(MatrixId, usize, usize)> {
    let mut out = BTreeSet::new();
    for p in pairs {
        for b in p.chain_w.blocks.iter().chain(&p.chain_a.blocks) {
            let blk = &b.input;
            for (j, &col) in blk.cols.iter().enumerate() {
                for (i, &row) in blk.rows.iter().enumerate() {
                    if blk.values[(i, j)] != 0.0 {
                        out.insert((blk.matrix, row, col));
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CleanSummary {
    pub removed: usize,
    /// Listed cells that were already zero.
    pub skipped: Vec<(MatrixId, usize, usize)>,
}

/// Copy of `c` with the listed cells set to zero. Cells that are already zero
/// are skipped with a warning; indices outside a matrix are an error.
pub fn clean_collection(
    c: &RelationalCollection,
    edges: &BTreeSet<(MatrixId, usize, usize)>,
) -> Result<(RelationalCollection, CleanSummary)> {
    let mut summary = CleanSummary::default();
    let mut values: BTreeMap<MatrixId, Mat> = BTreeMap::new();
    for &(m, r, col) in edges {
        if m >= c.num_matrices() {
            return Err(Error::Data(format!("edge references unknown matrix id {m}")));
        }
        let x = values.entry(m).or_insert_with(|| c.matrix(m).values.clone());
        if r >= x.nrows() || col >= x.ncols() {
            return Err(Error::Data(format!(
                "edge ({r}, {col}) outside matrix '{}' of shape {:?}",
                c.matrix(m).name,
                x.shape()
            )));
        }
        if x[(r, col)] == 0.0 {
            log::warn!(
                "cell ({r}, {col}) of '{}' is already zero, skipped",
                c.matrix(m).name
            );
            summary.skipped.push((m, r, col));
        } else {
            x[(r, col)] = 0.0;
            summary.removed += 1;
        }
    }
    let mut out = c.clone();
    for (m, v) in values {
        out = out.with_matrix_values(m, v)?;
    }
    Ok((out, summary))
}

/// Settings for one discordance run between two entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaSettings {
    pub from: EntityId,
    pub to: EntityId,
    pub knowledge: BTreeSet<MatrixId>,
    pub data: BTreeSet<MatrixId>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub pairing: Pairing,
}

#[derive(Clone, Debug)]
pub struct DiscordanceReport {
    pub settings: DaSettings,
    pub path_w: MatrixPath,
    pub path_a: MatrixPath,
    pub pairs: Vec<ScoredPair>,
    pub selected: Vec<usize>,
    /// Chains that could not be built, with the reason.
    pub skipped: Vec<String>,
    pub edges: BTreeSet<(MatrixId, usize, usize)>,
}

/// Paths, chains from every starting cluster, scores, selection and the
/// edges of the selected pairs.
pub fn analyze(
    c: &RelationalCollection,
    factors: &FactorSet,
    settings: &DaSettings,
) -> Result<DiscordanceReport> {
    if let Some(m) = settings.knowledge.intersection(&settings.data).next() {
        return Err(Error::Config(format!(
            "matrix '{}' is in both the knowledge and data subsets",
            c.matrix(*m).name
        )));
    }
    let path_w = find_path(c, settings.from, settings.to, &settings.knowledge)?;
    let path_a = find_path(c, settings.from, settings.to, &settings.data)?;
    let mut skipped = Vec::new();
    let mut chains = |path: &MatrixPath, tag: &str| -> Vec<Chain> {
        (0..factors.clusters[settings.from].k)
            .filter_map(|u| match traverse_chain(c, path, u, factors) {
                Ok(ch) => Some(ch),
                Err(e) => {
                    log::warn!("{tag} chain from cluster {u} skipped: {e}");
                    skipped.push(format!("{tag} {u}: {e}"));
                    None
                }
            })
            .collect()
    };
    let chains_w = chains(&path_w, "knowledge");
    let chains_a = chains(&path_a, "data");
    let pairs = score_pairs(&chains_w, &chains_a, &settings.weights, settings.pairing)?;
    let selected = select_discordant(&pairs, settings.selection);
    let edges = extract_edges(selected.iter().map(|&i| &pairs[i]));
    Ok(DiscordanceReport {
        settings: settings.clone(),
        path_w,
        path_a,
        pairs,
        selected,
        skipped,
        edges,
    })
}

fn block_label(c: &RelationalCollection, b: &ChainBlock) -> String {
    let desc = c.matrix(b.input.matrix);
    let row = c.entity(desc.row_entity);
    let col = c.entity(desc.col_entity);
    let list = |e: &crate::schema::Entity, idx: &[usize]| {
        idx.iter().map(|&i| e.label(i)).collect::<Vec<_>>().join(",")
    };
    format!(
        "{}[{},{}] rows={} cols={}",
        desc.name,
        b.input.u,
        b.input.v,
        list(row, &b.input.rows),
        list(col, &b.input.cols)
    )
}

impl DiscordanceReport {
    pub fn selected_pairs(&self) -> impl Iterator<Item = &ScoredPair> {
        self.selected.iter().map(|&i| &self.pairs[i])
    }

    /// Plain-text report: header with settings, one section per pair, then
    /// the selection.
    pub fn to_text(&self, c: &RelationalCollection) -> String {
        let s = &self.settings;
        let mut out = String::new();
        let _ = writeln!(out, "# discordance {} -> {}", c.entity(s.from).name, c.entity(s.to).name);
        let _ = writeln!(
            out,
            "alpha\t{}\nbeta\t{}\ngamma\t{}",
            s.weights.alpha, s.weights.beta, s.weights.gamma
        );
        let _ = writeln!(out, "selection\t{:?}\npairing\t{:?}", s.selection, s.pairing);
        let _ = writeln!(out, "knowledge_path\t{}", self.path_w.describe(c));
        let _ = writeln!(out, "data_path\t{}", self.path_a.describe(c));
        for msg in &self.skipped {
            let _ = writeln!(out, "skipped\t{msg}");
        }
        for (i, p) in self.pairs.iter().enumerate() {
            let _ = writeln!(
                out,
                "\n## pair {i} u={} u_data={} score={:.12e}",
                p.u(),
                p.chain_a.start,
                p.score
            );
            let _ = writeln!(out, "d1_knowledge\t{:.12e}", p.d1_w);
            let _ = writeln!(out, "d1_data\t{:.12e}", p.d1_a);
            let _ = writeln!(out, "d2\t{:.12e}", p.d2);
            for sh in &p.shared {
                let _ = writeln!(
                    out,
                    "shared\t{}\tcluster={}\tchordal={:.12e}{}",
                    c.entity(sh.entity).name,
                    sh.cluster,
                    sh.chordal.distance,
                    if sh.chordal.degenerate { "\tdegenerate" } else { "" }
                );
            }
            for b in &p.chain_w.blocks {
                let _ = writeln!(out, "knowledge_block\t{}", block_label(c, b));
            }
            for b in &p.chain_a.blocks {
                let _ = writeln!(out, "data_block\t{}", block_label(c, b));
            }
        }
        let _ = writeln!(out);
        for &i in &self.selected {
            let p = &self.pairs[i];
            let _ = writeln!(out, "selected\tpair={i}\tu={}\tscore={:.12e}", p.u(), p.score);
        }
        let _ = writeln!(out, "edges\t{}", self.edges.len());
        out
    }
}

/// Edge list as `matrix<TAB>row<TAB>col` lines, using matrix names.
pub fn format_edges(c: &RelationalCollection, edges: &BTreeSet<(MatrixId, usize, usize)>) -> String {
    let mut out = String::new();
    for &(m, r, col) in edges {
        let _ = writeln!(out, "{}\t{r}\t{col}", c.matrix(m).name);
    }
    out
}

/// Parses an edge list written by [`format_edges`]; the matrix column may be
/// a name or a numeric id. Blank lines and `#` comments are ignored.
pub fn parse_edges(c: &RelationalCollection, text: &str) -> Result<BTreeSet<(MatrixId, usize, usize)>> {
    let mut out = BTreeSet::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!(
                "edge line {}: expected 3 tab-separated fields, got {}",
                ln + 1,
                f.len()
            )));
        }
        let m = c
            .matrix_by_name(f[0])
            .or_else(|| f[0].parse::<usize>().ok().filter(|&m| m < c.num_matrices()))
            .ok_or_else(|| Error::Data(format!("edge line {}: unknown matrix '{}'", ln + 1, f[0])))?;
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("edge line {}: bad index '{s}'", ln + 1)))
        };
        out.insert((m, idx(f[1])?, idx(f[2])?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiway::{association, vigorous, ClusterAssignment};
    use crate::schema::{DType, Entity, MatrixDescriptor};

    fn entity(id: usize, name: &str, count: usize) -> Entity {
        Entity {
            id,
            name: name.into(),
            count,
            labels: None,
        }
    }

    fn matrix(id: usize, name: &str, r: usize, c: usize, values: Mat) -> MatrixDescriptor {
        MatrixDescriptor {
            id,
            name: name.into(),
            row_entity: r,
            col_entity: c,
            dtype: DType::Real,
            values,
        }
    }

    /// item(0), subject(1), word(2); item_subject, word_subject, word_item.
    fn wiki() -> RelationalCollection {
        RelationalCollection::new(
            vec![entity(0, "item", 4), entity(1, "subject", 4), entity(2, "word", 4)],
            vec![
                matrix(0, "item_subject", 0, 1, Mat::from_element(4, 4, 1.0)),
                matrix(1, "word_subject", 2, 1, Mat::from_element(4, 4, 1.0)),
                matrix(2, "word_item", 2, 0, Mat::from_element(4, 4, 1.0)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn direct_and_indirect_paths() {
        let c = wiki();
        let p = find_path(&c, 0, 1, &BTreeSet::from([0])).unwrap();
        assert_eq!(p.entities, vec![0, 1]);
        assert_eq!(p.matrices, vec![0]);
        let p = find_path(&c, 0, 1, &BTreeSet::from([1, 2])).unwrap();
        assert_eq!(p.entities, vec![0, 2, 1]);
        assert_eq!(p.matrices, vec![2, 1]);
        assert_eq!(p.describe(&c), "item -word_item- word -word_subject- subject");
    }

    #[test]
    fn unreachable_path() {
        let c = wiki();
        assert!(matches!(find_path(&c, 0, 1, &BTreeSet::from([1])), Err(Error::Path(_))));
        assert!(matches!(find_path(&c, 0, 1, &BTreeSet::new()), Err(Error::Path(_))));
    }

    fn factors_for(c: &RelationalCollection, labels: &[Vec<usize>], k: usize) -> FactorSet {
        let clusters: Vec<ClusterAssignment> = labels
            .iter()
            .map(|l| ClusterAssignment::from_labels(l.clone(), k).unwrap())
            .collect();
        let j: Vec<Mat> = clusters.iter().map(vigorous).collect();
        let a = c
            .matrices()
            .iter()
            .map(|m| association(&m.values, &j[m.row_entity], &j[m.col_entity]).unwrap())
            .collect();
        FactorSet {
            u: vec![],
            c: vec![],
            clusters,
            i: vec![],
            j,
            a,
            x_rec: c.matrices().iter().map(|m| m.values.clone()).collect(),
        }
    }

    #[test]
    fn argmax_step_and_ties() {
        let c = wiki();
        let mut f = factors_for(&c, &[vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 0, 1, 1]], 2);
        let path = find_path(&c, 0, 1, &BTreeSet::from([0])).unwrap();
        f.a[0] = Mat::from_row_slice(2, 2, &[5.0, 1.0, 0.0, 3.0]);
        let ch = traverse_chain(&c, &path, 0, &f).unwrap();
        assert_eq!((ch.blocks[0].input.u, ch.blocks[0].input.v), (0, 0));
        f.a[0] = Mat::from_row_slice(2, 2, &[2.0, 2.0, 0.0, 3.0]);
        let ch = traverse_chain(&c, &path, 0, &f).unwrap();
        assert_eq!(ch.blocks[0].to_cluster, 0);
        f.a[0] = Mat::from_row_slice(2, 2, &[1.0, 4.0, 0.0, 3.0]);
        let ch = traverse_chain(&c, &path, 0, &f).unwrap();
        assert_eq!(ch.blocks[0].to_cluster, 1);
        assert_eq!(ch.blocks[0].input.rows, vec![0, 1]);
        assert_eq!(ch.blocks[0].input.cols, vec![2, 3]);
    }

    #[test]
    fn column_axis_entry_uses_transposed_association() {
        let c = wiki();
        let mut f = factors_for(&c, &[vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 1, 0, 1]], 2);
        let path = find_path(&c, 0, 1, &BTreeSet::from([1, 2])).unwrap();
        // word_item is word × item: entering from item cluster 1 reads column 1
        f.a[2] = Mat::from_row_slice(2, 2, &[9.0, 0.0, 1.0, 2.0]);
        f.a[1] = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ch = traverse_chain(&c, &path, 1, &f).unwrap();
        assert_eq!(ch.blocks[0].to_cluster, 1);
        assert_eq!(ch.blocks[0].input.rows, vec![1, 3]);
        assert_eq!(ch.blocks[0].input.cols, vec![2, 3]);
        assert_eq!(ch.blocks[1].to_cluster, 0);
        assert_eq!(ch.visits(), vec![(0, 1), (2, 1), (1, 0)]);
    }

    #[test]
    fn empty_cluster_is_a_chain_error() {
        let c = wiki();
        let f = factors_for(&c, &[vec![0, 0, 0, 0], vec![0, 0, 1, 1], vec![0, 0, 1, 1]], 2);
        let path = find_path(&c, 0, 1, &BTreeSet::from([0])).unwrap();
        assert!(matches!(traverse_chain(&c, &path, 1, &f), Err(Error::Chain(_))));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(block_distance(&Mat::identity(3, 3), &Mat::identity(3, 3)), 0.0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((block_distance(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn chordal_cases() {
        let e1 = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = Mat::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((chordal_distance(&e1, &e2).unwrap().distance - 1.0).abs() < 1e-12);
        assert!(chordal_distance(&e1, &(&e1 * 3.0)).unwrap().distance < 1e-12);
        let z = Mat::zeros(2, 2);
        let d = chordal_distance(&z, &e1).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.distance, 1.0);
        assert!(chordal_distance(&e1, &Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn score_arithmetic_and_weights() {
        let w = Weights::default();
        assert!((w.score(0.8, 0.1, 0.2) - 0.5).abs() < 1e-15);
        let w = Weights {
            alpha: 2.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(w.score(0.8, 0.1, 0.2), 1.6);
    }

    fn fake_pair(start: usize, score: f64) -> ScoredPair {
        let chain = Chain {
            start,
            path: MatrixPath {
                entities: vec![0],
                matrices: vec![],
            },
            blocks: vec![],
        };
        ScoredPair {
            chain_w: chain.clone(),
            chain_a: chain,
            d1_w: 0.0,
            d1_a: 0.0,
            d2: 0.0,
            shared: vec![],
            score,
        }
    }

    #[test]
    fn selection_modes() {
        let pairs = vec![fake_pair(0, 0.5), fake_pair(1, -0.3), fake_pair(2, 0.1)];
        assert_eq!(select_discordant(&pairs, Selection::Max), vec![0]);
        assert_eq!(select_discordant(&pairs, Selection::Min), vec![1]);
        assert_eq!(select_discordant(&pairs, Selection::AbsMax), vec![0]);
        assert_eq!(select_discordant(&pairs, Selection::Both), vec![0, 1]);
        let flat = vec![fake_pair(0, 0.2), fake_pair(1, 0.2)];
        assert_eq!(select_discordant(&flat, Selection::Max), vec![0]);
    }

    #[test]
    fn perfect_concordance_scores_zero() {
        let c = wiki();
        let f = factors_for(&c, &[vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 0, 1, 1]], 2);
        let s = DaSettings {
            from: 0,
            to: 1,
            knowledge: BTreeSet::from([0]),
            data: BTreeSet::from([1, 2]),
            weights: Weights::default(),
            selection: Selection::Max,
            pairing: Pairing::Start,
        };
        let r = analyze(&c, &f, &s).unwrap();
        assert_eq!(r.pairs.len(), 2);
        for p in &r.pairs {
            assert!(p.score.abs() < 1e-12, "{}", p.score);
            // item and subject are both shared with matching clusters
            assert_eq!(p.shared.len(), 2);
        }
        assert!(r.to_text(&c).contains("alpha\t1"));
    }

    #[test]
    fn no_common_start_is_a_pair_error() {
        let mut a = fake_pair(0, 0.0).chain_w;
        let w = a.clone();
        a.start = 1;
        assert!(matches!(
            score_pairs(&[w], &[a], &Weights::default(), Pairing::Start),
            Err(Error::Pair(_))
        ));
    }

    #[test]
    fn edges_and_cleaning() {
        let c = wiki();
        let f = factors_for(&c, &[vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 0, 1, 1]], 2);
        let path = find_path(&c, 0, 1, &BTreeSet::from([0])).unwrap();
        let ch = traverse_chain(&c, &path, 0, &f).unwrap();
        let pair = score_pair(&ch, &ch, &Weights::default()).unwrap();
        let edges = extract_edges([&pair, &pair]);
        assert_eq!(edges.len(), 4);
        let (clean, summary) = clean_collection(&c, &edges).unwrap();
        assert_eq!(summary.removed, 4);
        assert_eq!(clean.total_nnz(), c.total_nnz() - 4);
        let (same, _) = clean_collection(&c, &BTreeSet::new()).unwrap();
        assert_eq!(same, c);
        let (_, again) = clean_collection(&clean, &edges).unwrap();
        assert_eq!(again.skipped.len(), 4);
        assert!(clean_collection(&c, &BTreeSet::from([(0, 9, 0)])).is_err());
        let text = format_edges(&c, &edges);
        assert_eq!(parse_edges(&c, &text).unwrap(), edges);
    }
}
