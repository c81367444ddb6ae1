//! Output files. Every writer is byte-deterministic: floats use the
//! shortest round-trip representation and maps are ordered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cotri::multiway::{self, ClusterAssignment};
use cotri::ndiff::{Archive, Mat};
use cotri::schema::RelationalCollection;
use cotri::trainer::{FactorSet, LossRecord};
use cotri::{Error, Result};
use serde::Serialize;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Collects the files written by one command and emits `manifest.json`.
pub struct OutDir {
    pub root: PathBuf,
    files: BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    files: Vec<ManifestEntry<'a>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    summary: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    path: &'a str,
    bytes: u64,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes.as_ref()).map_err(|e| io_err(&path, e))?;
        self.record(name)?;
        Ok(path)
    }

    /// Registers a file written by someone else.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let len = fs::metadata(&path).map_err(|e| io_err(&path, e))?.len();
        self.files.insert(name.to_string(), len);
        Ok(())
    }

    pub fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        summary: BTreeMap<String, serde_json::Value>,
    ) -> Result<PathBuf> {
        self.files.remove("manifest.json");
        let manifest = Manifest {
            command,
            seed,
            files: self
                .files
                .iter()
                .map(|(p, &b)| ManifestEntry { path: p, bytes: b })
                .collect(),
            summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest: {}", e)))?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

pub fn dense_tsv(m: &Mat) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iter,loss_A,loss_R,loss_C\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.loss_a, r.loss_r, r.loss_c));
    }
    out
}

/// `instance<TAB>cluster` rows, using instance labels when the entity has
/// them.
pub fn clusters_tsv(c: &RelationalCollection, e: usize, a: &ClusterAssignment) -> String {
    let ent = c.entity(e);
    let mut out = String::from("instance\tcluster\n");
    for (i, l) in a.labels.iter().enumerate() {
        out.push_str(&format!("{}\t{}\n", ent.label(i), l));
    }
    out
}

pub fn labels_text(labels: &[usize]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

/// Reads labels from a file with one label per line. Lines holding tabs
/// contribute their last field; a leading `instance<TAB>cluster` header
/// is skipped. Arbitrary strings are mapped to ids by first appearance.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("instance\t")) {
            continue;
        }
        let field = line.rsplit('\t').next().unwrap_or(line).trim();
        let next = ids.len();
        out.push(*ids.entry(field.to_string()).or_insert(next));
    }
    Ok(out)
}

/// Stores the embeddings, reconstructions and cluster labels. Indicator,
/// vigorous and association matrices are derived again on load.
pub fn factors_archive(f: &FactorSet) -> Archive {
    let mut a = Archive::default();
    for (e, u) in f.u.iter().enumerate() {
        a.push(format!("u.{}", e), "u", u.clone());
    }
    for (e, c) in f.c.iter().enumerate() {
        a.push(format!("c.{}", e), "c", c.clone());
    }
    for (m, x) in f.x_rec.iter().enumerate() {
        a.push(format!("x_rec.{}", m), "x_rec", x.clone());
    }
    let clusters: Vec<(usize, &Vec<usize>)> = f.clusters.iter().map(|c| (c.k, &c.labels)).collect();
    a.meta = serde_json::json!({ "clusters": clusters });
    a
}

pub fn factors_from_archive(c: &RelationalCollection, a: &Archive) -> Result<FactorSet> {
    let bad = |s: String| Error::Checkpoint(format!("factor archive: {}", s));
    let get = |name: String| a.get(&name).cloned().ok_or_else(|| bad(format!("missing '{}'", name)));
    let clusters: Vec<(usize, Vec<usize>)> = serde_json::from_value(a.meta["clusters"].clone())
        .map_err(|e| bad(e.to_string()))?;
    if clusters.len() != c.num_entities() {
        return Err(bad(format!(
            "{} cluster assignments for {} entities",
            clusters.len(),
            c.num_entities()
        )));
    }
    let mut f = FactorSet {
        u: Vec::new(),
        c: Vec::new(),
        clusters: Vec::new(),
        i: Vec::new(),
        j: Vec::new(),
        a: Vec::new(),
        x_rec: Vec::new(),
    };
    for (e, (k, labels)) in clusters.into_iter().enumerate() {
        if labels.len() != c.entity(e).count {
            return Err(bad(format!("entity {} has {} labels", e, labels.len())));
        }
        let ca = ClusterAssignment::from_labels(labels, k)?;
        f.u.push(get(format!("u.{}", e))?);
        f.c.push(get(format!("c.{}", e))?);
        f.i.push(ca.indicator());
        f.j.push(multiway::vigorous(&ca));
        f.clusters.push(ca);
    }
    for md in c.matrices() {
        let x = get(format!("x_rec.{}", md.id))?;
        if x.shape() != md.values.shape() {
            return Err(bad(format!("x_rec.{} has shape {:?}", md.id, x.shape())));
        }
        f.x_rec.push(x);
        f.a.push(multiway::association(
            &md.values,
            &f.j[md.row_entity],
            &f.j[md.col_entity],
        )?);
    }
    Ok(f)
}
