//! Relational collections: entities, the matrices relating them, and the
//! bipartite entity–matrix graph.
//!
//! Matrices are stored densely. On disk each matrix is a coordinate file:
//!
//! ```text
//! rows cols nnz
//! row<TAB>col<TAB>value
//! ...
//! ```
//!
//! with 0-based indices; unlisted cells are zero. The graph itself is a TOML
//! document listing `[[entities]]` and `[[matrices]]`, with paths relative to
//! a data directory.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type MatrixId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Binary,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub count: usize,
    pub labels: Option<Vec<String>>,
}

impl Entity {
    /// Label of instance `i`, falling back to its index.
    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(labels) => labels[i].clone(),
            None => i.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDescriptor {
    pub id: MatrixId,
    pub name: String,
    pub row_entity: EntityId,
    pub col_entity: EntityId,
    pub dtype: DType,
    pub values: DMatrix<f64>,
}

impl MatrixDescriptor {
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// The entity on the other axis of this matrix, seen from `e`.
    pub fn other(&self, e: EntityId) -> Option<EntityId> {
        if e == self.row_entity {
            Some(self.col_entity)
        } else if e == self.col_entity {
            Some(self.row_entity)
        } else {
            None
        }
    }
}

/// A validated collection of matrices over a set of entities.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalCollection {
    entities: Vec<Entity>,
    matrices: Vec<MatrixDescriptor>,
    edges: BTreeSet<(EntityId, MatrixId)>,
}

impl RelationalCollection {
    /// Builds the entity–matrix graph and checks every invariant: shapes,
    /// datatypes, labels and connectivity.
    pub fn new(entities: Vec<Entity>, matrices: Vec<MatrixDescriptor>) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Schema("collection has no entities".into()));
        }
        let mut names = HashSet::new();
        for (i, e) in entities.iter().enumerate() {
            if e.id != i {
                return Err(Error::Schema(format!(
                    "entity '{}' has id {} but position {}",
                    e.name, e.id, i
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Schema(format!("duplicate entity name '{}'", e.name)));
            }
            if e.count == 0 {
                return Err(Error::Schema(format!("entity '{}' has count 0", e.name)));
            }
            if let Some(labels) = &e.labels {
                if labels.len() != e.count {
                    return Err(Error::Schema(format!(
                        "entity '{}' declares {} instances but has {} labels",
                        e.name,
                        e.count,
                        labels.len()
                    )));
                }
                let unique: HashSet<&String> = labels.iter().collect();
                if unique.len() != labels.len() {
                    return Err(Error::Schema(format!(
                        "entity '{}' has duplicate instance labels",
                        e.name
                    )));
                }
            }
        }

        let mut edges = BTreeSet::new();
        let mut matrix_names = HashSet::new();
        for (i, m) in matrices.iter().enumerate() {
            if m.id != i {
                return Err(Error::Schema(format!(
                    "matrix '{}' has id {} but position {}",
                    m.name, m.id, i
                )));
            }
            if !matrix_names.insert(m.name.as_str()) {
                return Err(Error::Schema(format!("duplicate matrix name '{}'", m.name)));
            }
            let (rows, cols) = match (entities.get(m.row_entity), entities.get(m.col_entity)) {
                (Some(r), Some(c)) => (r.count, c.count),
                _ => {
                    return Err(Error::Graph(format!(
                        "matrix '{}' references an unknown entity",
                        m.name
                    )))
                }
            };
            if m.values.shape() != (rows, cols) {
                return Err(Error::Schema(format!(
                    "matrix '{}' has shape {:?}, expected {}x{} from its entities",
                    m.name,
                    m.values.shape(),
                    rows,
                    cols
                )));
            }
            check_dtype(&m.name, m.dtype, &m.values)?;
            edges.insert((m.row_entity, i));
            edges.insert((m.col_entity, i));
        }

        let collection = RelationalCollection {
            entities,
            matrices,
            edges,
        };
        for e in &collection.entities {
            if collection.matrices_of(e.id).is_empty() {
                return Err(Error::Graph(format!(
                    "entity '{}' does not appear in any matrix",
                    e.name
                )));
            }
        }
        if !collection.is_connected() {
            return Err(Error::Graph(
                "entity–matrix graph has more than one component".into(),
            ));
        }
        Ok(collection)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn matrices(&self) -> &[MatrixDescriptor] {
        &self.matrices
    }

    pub fn entity(&self, e: EntityId) -> &Entity {
        &self.entities[e]
    }

    pub fn matrix(&self, m: MatrixId) -> &MatrixDescriptor {
        &self.matrices[m]
    }

    pub fn edges(&self) -> &BTreeSet<(EntityId, MatrixId)> {
        &self.edges
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_matrices(&self) -> usize {
        self.matrices.len()
    }

    pub fn entity_by_name(&self, name: &str) -> Option<EntityId> {
        self.entities.iter().position(|e| e.name == name)
    }

    pub fn matrix_by_name(&self, name: &str) -> Option<MatrixId> {
        self.matrices.iter().position(|m| m.name == name)
    }

    /// Matrices incident to entity `e`, in ascending id order.
    pub fn matrices_of(&self, e: EntityId) -> Vec<MatrixId> {
        self.edges
            .iter()
            .filter(|(ee, _)| *ee == e)
            .map(|(_, m)| *m)
            .collect()
    }

    pub fn has_edge(&self, e: EntityId, m: MatrixId) -> bool {
        self.edges.contains(&(e, m))
    }

    /// Breadth-first search over the bipartite graph from entity 0.
    pub fn is_connected(&self) -> bool {
        let n = self.entities.len();
        let mut seen_entity = vec![false; n];
        let mut seen_matrix = vec![false; self.matrices.len()];
        let mut queue = VecDeque::from([0usize]);
        seen_entity[0] = true;
        while let Some(e) = queue.pop_front() {
            for m in self.matrices_of(e) {
                if seen_matrix[m] {
                    continue;
                }
                seen_matrix[m] = true;
                let md = &self.matrices[m];
                for next in [md.row_entity, md.col_entity] {
                    if !seen_entity[next] {
                        seen_entity[next] = true;
                        queue.push_back(next);
                    }
                }
            }
        }
        seen_entity.iter().all(|s| *s) && seen_matrix.iter().all(|s| *s)
    }

    /// `X^(m)` oriented with the instances of `e` along the rows.
    pub fn entity_view(&self, e: EntityId, m: MatrixId) -> Result<DMatrix<f64>> {
        if !self.has_edge(e, m) {
            return Err(Error::Graph(format!(
                "entity {} is not an axis of matrix {}",
                e, m
            )));
        }
        let md = &self.matrices[m];
        if md.row_entity == e {
            Ok(md.values.clone())
        } else {
            Ok(md.values.transpose())
        }
    }

    /// Replaces the values of matrix `m`, re-checking shape and datatype.
    pub fn with_matrix_values(&self, m: MatrixId, values: DMatrix<f64>) -> Result<Self> {
        let mut out = self.clone();
        let md = &mut out.matrices[m];
        if values.shape() != md.values.shape() {
            return Err(Error::Schema(format!(
                "replacement for '{}' has shape {:?}, expected {:?}",
                md.name,
                values.shape(),
                md.values.shape()
            )));
        }
        check_dtype(&md.name, md.dtype, &values)?;
        md.values = values;
        Ok(out)
    }

    pub fn total_nnz(&self) -> usize {
        self.matrices.iter().map(MatrixDescriptor::nnz).sum()
    }
}

fn check_dtype(name: &str, dtype: DType, values: &DMatrix<f64>) -> Result<()> {
    for (idx, v) in values.iter().enumerate() {
        let ok = match dtype {
            DType::Binary => *v == 0.0 || *v == 1.0,
            DType::Real => v.is_finite(),
        };
        if !ok {
            let (r, c) = (idx % values.nrows(), idx / values.nrows());
            return Err(Error::Data(format!(
                "matrix '{}' ({:?}) has invalid value {} at ({}, {})",
                name, dtype, v, r, c
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityConfig {
    pub name: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub name: String,
    pub row: String,
    pub col: String,
    pub dtype: DType,
    pub file: String,
}

/// On-disk description of a collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub entities: Vec<EntityConfig>,
    pub matrices: Vec<MatrixConfig>,
}

impl GraphConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("graph config: {}", e)))
    }
}

/// Loads and validates a collection from a graph config file. Matrix and
/// label paths are resolved against `data_dir`.
pub fn load_collection(graph_config: &Path, data_dir: &Path) -> Result<RelationalCollection> {
    let text = fs::read_to_string(graph_config).map_err(|e| Error::io(graph_config, e))?;
    let config = GraphConfig::from_toml(&text)?;
    collection_from_config(&config, data_dir)
}

pub fn collection_from_config(
    config: &GraphConfig,
    data_dir: &Path,
) -> Result<RelationalCollection> {
    let mut entities = Vec::with_capacity(config.entities.len());
    for (id, ec) in config.entities.iter().enumerate() {
        let labels = match &ec.labels_file {
            Some(file) => Some(read_labels(&data_dir.join(file))?),
            None => None,
        };
        entities.push(Entity {
            id,
            name: ec.name.clone(),
            count: ec.count,
            labels,
        });
    }
    let lookup = |name: &str, field: &str| -> Result<EntityId> {
        entities
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Graph(format!("{} refers to unknown entity '{}'", field, name)))
    };
    let mut matrices = Vec::with_capacity(config.matrices.len());
    for (id, mc) in config.matrices.iter().enumerate() {
        let row_entity = lookup(&mc.row, &format!("matrices[{}].row", id))?;
        let col_entity = lookup(&mc.col, &format!("matrices[{}].col", id))?;
        let values = read_coo(
            &data_dir.join(&mc.file),
            entities[row_entity].count,
            entities[col_entity].count,
        )?;
        matrices.push(MatrixDescriptor {
            id,
            name: mc.name.clone(),
            row_entity,
            col_entity,
            dtype: mc.dtype,
            values,
        });
    }
    RelationalCollection::new(entities, matrices)
}

/// Writes `graph.toml`, one coordinate file per matrix and label files into
/// `dir`. Returns the path of the graph config.
pub fn save_collection(c: &RelationalCollection, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = GraphConfig {
        entities: Vec::new(),
        matrices: Vec::new(),
    };
    for e in c.entities() {
        let labels_file = match &e.labels {
            Some(labels) => {
                let file = format!("{}.labels", e.name);
                let mut text = labels.join("\n");
                text.push('\n');
                let path = dir.join(&file);
                fs::write(&path, text).map_err(|err| Error::io(&path, err))?;
                Some(file)
            }
            None => None,
        };
        config.entities.push(EntityConfig {
            name: e.name.clone(),
            count: e.count,
            labels_file,
        });
    }
    for m in c.matrices() {
        let file = format!("{}.coo", m.name);
        write_coo(&dir.join(&file), &m.values)?;
        config.matrices.push(MatrixConfig {
            name: m.name.clone(),
            row: c.entity(m.row_entity).name.clone(),
            col: c.entity(m.col_entity).name.clone(),
            dtype: m.dtype,
            file,
        });
    }
    let text = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("graph.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Reads a coordinate-format matrix and checks it against the declared shape.
pub fn read_coo(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coo(&text, rows, cols).map_err(|err| match err {
        Error::Schema(msg) => Error::Schema(format!("{}: {}", path.display(), msg)),
        Error::Data(msg) => Error::Data(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

pub fn parse_coo(text: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty matrix file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Schema(format!(
            "header must be 'rows cols nnz', got '{}'",
            header
        )));
    }
    let parse_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Schema(format!("invalid {} '{}'", what, s)))
    };
    let file_rows = parse_usize(fields[0], "row count")?;
    let file_cols = parse_usize(fields[1], "column count")?;
    let nnz = parse_usize(fields[2], "nnz")?;
    if (file_rows, file_cols) != (rows, cols) {
        return Err(Error::Schema(format!(
            "file declares {}x{} but entities require {}x{}",
            file_rows, file_cols, rows, cols
        )));
    }
    let mut values = DMatrix::zeros(rows, cols);
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Schema(format!(
                "line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        }
        let r = parse_usize(parts[0], "row index")?;
        let c = parse_usize(parts[1], "column index")?;
        let v: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: invalid value '{}'", lineno + 1, parts[2])))?;
        if r >= rows || c >= cols {
            return Err(Error::Schema(format!(
                "line {}: index ({}, {}) outside {}x{}",
                lineno + 1,
                r,
                c,
                rows,
                cols
            )));
        }
        values[(r, c)] = v;
        seen += 1;
    }
    if seen != nnz {
        return Err(Error::Schema(format!(
            "header declares {} entries, file has {}",
            nnz, seen
        )));
    }
    Ok(values)
}

pub fn format_coo(values: &DMatrix<f64>) -> String {
    let nnz = values.iter().filter(|v| **v != 0.0).count();
    let mut out = format!("{} {} {}\n", values.nrows(), values.ncols(), nnz);
    for r in 0..values.nrows() {
        for c in 0..values.ncols() {
            let v = values[(r, c)];
            if v != 0.0 {
                let _ = writeln!(out, "{}\t{}\t{}", r, c, v);
            }
        }
    }
    out
}

pub fn write_coo(path: &Path, values: &DMatrix<f64>) -> Result<()> {
    fs::write(path, format_coo(values)).map_err(|e| Error::io(path, e))
}

/// One mini-batch: a random subset of instances per entity and the matching
/// sub-matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Sampled instance indices per entity, in sampling order.
    pub indices: Vec<Vec<usize>>,
    /// Per matrix, the cells at the sampled rows and columns.
    pub blocks: Vec<DMatrix<f64>>,
}

impl Batch {
    pub fn size(&self, e: EntityId) -> usize {
        self.indices[e].len()
    }

    /// Rows of `Y^(m)_[e]` for the sampled instances of `e`, with every
    /// column of the other entity kept (the autoencoder input).
    pub fn entity_rows(
        &self,
        c: &RelationalCollection,
        e: EntityId,
        m: MatrixId,
    ) -> Result<DMatrix<f64>> {
        if !c.has_edge(e, m) {
            return Err(Error::Graph(format!(
                "entity {} is not an axis of matrix {}",
                e, m
            )));
        }
        let md = c.matrix(m);
        let idx = &self.indices[e];
        if md.row_entity == e {
            Ok(select_rows(&md.values, idx))
        } else {
            let width = md.values.nrows();
            Ok(DMatrix::from_fn(idx.len(), width, |i, j| {
                md.values[(j, idx[i])]
            }))
        }
    }

    /// The sampled sub-matrix of `m`, oriented with `e` along the rows.
    pub fn block_view(&self, c: &RelationalCollection, e: EntityId, m: MatrixId) -> DMatrix<f64> {
        if c.matrix(m).row_entity == e {
            self.blocks[m].clone()
        } else {
            self.blocks[m].transpose()
        }
    }
}

pub(crate) fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub(crate) fn select(x: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| x[(rows[i], cols[j])])
}

/// Samples `floor(d_[e] / y)` instances of every entity and cuts the matching
/// sub-matrices. The trailing remainder of a permutation is dropped.
pub fn sample_batch(c: &RelationalCollection, y: usize, rng_seed: u64) -> Result<Batch> {
    if y == 0 {
        return Err(Error::Batch("number of batches must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut indices = Vec::with_capacity(c.num_entities());
    for e in c.entities() {
        let q = e.count / y;
        if q == 0 {
            return Err(Error::Batch(format!(
                "{} batches leave no instances of '{}' ({} total)",
                y, e.name, e.count
            )));
        }
        let mut perm: Vec<usize> = (0..e.count).collect();
        perm.shuffle(&mut rng);
        perm.truncate(q);
        indices.push(perm);
    }
    let blocks = c
        .matrices()
        .iter()
        .map(|m| select(&m.values, &indices[m.row_entity], &indices[m.col_entity]))
        .collect();
    Ok(Batch { indices, blocks })
}
