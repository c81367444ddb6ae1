use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cotri::discordance::{self, Pairing, Selection};
use cotri::eval::{self, gen_planted_collection, gen_planted_discordance};
use cotri::ndiff::Archive;
use cotri::schema::{self, RelationalCollection};
use cotri::trainer::{Hyperparams, Trainer};
use cotri::{Error, Result};
use serde_json::{json, Value};

use crate::config::{RunConfig, SynthConfig};
use crate::output::{self, OutDir};

fn truth_files(out: &mut OutDir, c: &RelationalCollection, labels: &[Vec<usize>]) -> Result<()> {
    for (e, l) in labels.iter().enumerate() {
        out.write(&format!("{}.truth", c.entity(e).name), output::labels_text(l))?;
    }
    Ok(())
}

fn record_collection(out: &mut OutDir, c: &RelationalCollection) -> Result<()> {
    out.record("graph.toml")?;
    for m in c.matrices() {
        out.record(&format!("{}.coo", m.name))?;
    }
    for e in c.entities() {
        if e.labels.is_some() {
            out.record(&format!("{}.labels", e.name))?;
        }
    }
    Ok(())
}

/// Generates a planted collection, its true labels and, for the
/// discordance layout, the hidden-cell mask and a ready `[da]` table.
pub fn cmd_synth(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let cfg = SynthConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut out = OutDir::create(out_dir)?;
    let mut summary = BTreeMap::new();
    if let Some(spec) = &cfg.planted {
        let (c, labels) = gen_planted_collection(spec, seed)?;
        schema::save_collection(&c, out_dir)?;
        record_collection(&mut out, &c)?;
        truth_files(&mut out, &c, &labels)?;
    }
    if let Some(spec) = &cfg.discordance {
        let pd = gen_planted_discordance(spec, seed)?;
        let c = &pd.collection;
        schema::save_collection(c, out_dir)?;
        record_collection(&mut out, c)?;
        truth_files(&mut out, c, &pd.labels)?;
        out.write("mask.tsv", discordance::format_edges(c, &pd.mask))?;
        let names = |ids: &[usize]| -> Vec<String> {
            ids.iter().map(|&m| c.matrix(m).name.clone()).collect()
        };
        let da = json!({
            "from": c.entity(pd.endpoints.0).name,
            "to": c.entity(pd.endpoints.1).name,
            "knowledge": names(&pd.knowledge),
            "data": names(&pd.data),
        });
        let mut table = toml::Table::new();
        table.insert(
            "da".into(),
            toml::Value::try_from(&da).map_err(|e| Error::Config(e.to_string()))?,
        );
        out.write(
            "da.toml",
            toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        summary.insert("hidden_block".into(), json!([pd.hidden_block.0, pd.hidden_block.1]));
        summary.insert("hidden_cells".into(), json!(pd.mask.len()));
    }
    out.finish("synth", Some(seed), summary)
}

pub struct FitOptions {
    pub seed: Option<u64>,
    pub t: Option<usize>,
    pub resume: Option<PathBuf>,
}

fn check_resumable(config: &Hyperparams, saved: &Hyperparams) -> Result<()> {
    let mut a = toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut b = toml::Table::try_from(saved).map_err(|e| Error::Config(e.to_string()))?;
    a.remove("t");
    b.remove("t");
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    for k in keys {
        if a.get(k) != b.get(k) {
            return Err(Error::Config(format!(
                "hyper.{}: differs from the checkpoint being resumed",
                k
            )));
        }
    }
    Ok(())
}

/// Trains on the configured collection and writes the checkpoint, factor
/// archive, dense factor TSVs, cluster TSVs, loss CSV and, when true
/// labels are configured, a metrics sidecar.
pub fn cmd_fit(config: &Path, out_dir: &Path, opts: &FitOptions) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let c = schema::load_collection(&cfg.graph, &cfg.data_dir)?;
    let h = cfg.hyperparams(&c, opts.seed, opts.t)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let archive = Archive::load(path)?;
            let trainer = Trainer::resume(&c, &archive, h.t)?;
            check_resumable(&h, trainer.hyper())?;
            trainer
        }
        None => Trainer::new(&c, &h)?,
    };
    trainer.run()?;
    let f = trainer.outputs()?;
    let mut out = OutDir::create(out_dir)?;
    trainer.checkpoint()?.save(&out.path("checkpoint.bin"))?;
    out.record("checkpoint.bin")?;
    output::factors_archive(&f).save(&out.path("factors.bin"))?;
    out.record("factors.bin")?;
    out.write("loss.csv", output::loss_csv(trainer.history()))?;
    for e in c.entities() {
        out.write(&format!("u_{}.tsv", e.name), output::dense_tsv(&f.u[e.id]))?;
        out.write(&format!("c_{}.tsv", e.name), output::dense_tsv(&f.c[e.id]))?;
        out.write(
            &format!("clusters_{}.tsv", e.name),
            output::clusters_tsv(&c, e.id, &f.clusters[e.id]),
        )?;
    }
    for m in c.matrices() {
        out.write(&format!("a_{}.tsv", m.name), output::dense_tsv(&f.a[m.id]))?;
    }
    if !cfg.truth.is_empty() {
        let mut metrics = BTreeMap::new();
        for (name, path) in &cfg.truth {
            let e = c
                .entity_by_name(name)
                .ok_or_else(|| Error::Config(format!("truth.{}: unknown entity", name)))?;
            let truth = output::read_labels(path)?;
            metrics.insert(name.clone(), eval::metrics(&truth, &f.clusters[e].labels)?);
        }
        let mut text = serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        out.write("metrics.json", text)?;
    }
    let mut summary = BTreeMap::new();
    summary.insert("iterations".into(), json!(trainer.iteration()));
    summary.insert("max_ortho_error".into(), json!(trainer.max_ortho_error));
    out.finish("fit", Some(trainer.hyper().seed), summary)
}

pub struct DaOptions {
    pub factors: PathBuf,
    pub selection: Option<Selection>,
    pub pairing: Option<Pairing>,
}

/// Runs discordance analysis on a fitted factor archive and writes the
/// report and the selected edges.
pub fn cmd_da(config: &Path, out_dir: &Path, opts: &DaOptions) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let c = schema::load_collection(&cfg.graph, &cfg.data_dir)?;
    let da = cfg
        .da
        .as_ref()
        .ok_or_else(|| Error::Config("da: missing table".into()))?;
    let mut settings = da.resolve(&c)?;
    if let Some(s) = opts.selection {
        settings.selection = s;
    }
    if let Some(p) = opts.pairing {
        settings.pairing = p;
    }
    let f = output::factors_from_archive(&c, &Archive::load(&opts.factors)?)?;
    let report = discordance::analyze(&c, &f, &settings)?;
    let mut out = OutDir::create(out_dir)?;
    out.write("report.txt", report.to_text(&c))?;
    out.write("edges.tsv", discordance::format_edges(&c, &report.edges))?;
    let mut summary = BTreeMap::new();
    let selected: Vec<Value> = report
        .selected_pairs()
        .map(|p| json!({ "u": p.u(), "score": p.score }))
        .collect();
    summary.insert("selected".into(), Value::Array(selected));
    summary.insert("edges".into(), json!(report.edges.len()));
    out.finish("da", cfg.seed, summary)
}

/// Zeroes every listed edge and writes the cleaned collection.
pub fn cmd_clean(
    graph: &Path,
    data_dir: Option<&Path>,
    edges: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, discordance::CleanSummary)> {
    let data_dir = match data_dir {
        Some(d) => d.to_path_buf(),
        None => graph.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let c = schema::load_collection(graph, &data_dir)?;
    let text = fs::read_to_string(edges).map_err(|e| Error::Io {
        path: edges.to_path_buf(),
        source: e,
    })?;
    let list = discordance::parse_edges(&c, &text)?;
    let (cleaned, report) = discordance::clean_collection(&c, &list)?;
    let mut out = OutDir::create(out_dir)?;
    schema::save_collection(&cleaned, out_dir)?;
    record_collection(&mut out, &cleaned)?;
    let mut summary = BTreeMap::new();
    summary.insert("removed".into(), json!(report.removed));
    summary.insert("skipped".into(), json!(report.skipped.len()));
    summary.insert("nnz_before".into(), json!(c.total_nnz()));
    summary.insert("nnz_after".into(), json!(cleaned.total_nnz()));
    let manifest = out.finish("clean", None, summary)?;
    Ok((manifest, report))
}

/// Compares two label files. Returns the metrics as `name<TAB>value`
/// lines and writes `metrics.json` when an output directory is given.
pub fn cmd_eval(truth: &Path, pred: &Path, out_dir: Option<&Path>) -> Result<String> {
    let t = output::read_labels(truth)?;
    let p = output::read_labels(pred)?;
    let metrics = eval::metrics(&t, &p)?;
    let mut text = String::new();
    for (k, v) in &metrics {
        text.push_str(&format!("{}\t{}\n", k, v));
    }
    if let Some(dir) = out_dir {
        let mut out = OutDir::create(dir)?;
        let mut json = serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Config(e.to_string()))?;
        json.push('\n');
        out.write("metrics.json", json)?;
        out.finish("eval", None, BTreeMap::new())?;
    }
    Ok(text)
}
