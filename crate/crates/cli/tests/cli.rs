use std::fs;
use std::path::Path;
use std::process::Command;

use cotri::discordance::Selection;
use cotri_cli::{cmd_clean, cmd_da, cmd_eval, cmd_fit, cmd_synth, DaOptions, FitOptions};

fn cotri(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cotri")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &str = r#"
seed = 1
[planted]
entities = [{name="a",count=24,k=2},{name="b",count=24,k=2},{name="c",count=24,k=2}]
matrices = [{name="ab",row="a",col="b"},{name="bc",row="b",col="c"},{name="ca",row="c",col="a"}]
"#;

const DISCORDANCE: &str = "seed = 2\n[discordance]\ncount = 30\nhide_fraction = 0.5\n";

fn run_config(dir: &Path, graph: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "graph = \"{graph}\"\nseed = 3\n{extra}\n[hyper]\nk = [2, 2, 2]\nt = 4\nl = 4\noptimizer = \"adam\"\nplan = {{ layers = 2 }}\n"
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_and_bad_input_exit_codes() {
    assert_eq!(cotri(&["--help"]).status.code(), Some(0));
    assert_eq!(cotri(&["fit"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, SYNTH.replace("seed = 1", "seed = 1\ncolour = 3")).unwrap();
    let out = cotri(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let missing = dir.path().join("nope.toml");
    let out = cotri(&["fit", "--config", s(&missing), "--out", s(&dir.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_is_deterministic_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, SYNTH).unwrap();
    cmd_synth(&cfg, &dir.path().join("data"), None).unwrap();
    let run = run_config(dir.path(), "data/graph.toml", "[truth]\na = \"data/a.truth\"");
    let opts = FitOptions { seed: None, t: None, resume: None };
    cmd_fit(&run, &dir.path().join("f1"), &opts).unwrap();
    cmd_fit(&run, &dir.path().join("f2"), &opts).unwrap();
    for name in ["factors.bin", "checkpoint.bin", "loss.csv", "clusters_a.tsv", "metrics.json", "manifest.json"] {
        assert_eq!(
            fs::read(dir.path().join("f1").join(name)).unwrap(),
            fs::read(dir.path().join("f2").join(name)).unwrap(),
            "{name}"
        );
    }
    let loss = fs::read_to_string(dir.path().join("f1/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let text = cmd_eval(
        &dir.path().join("data/a.truth"),
        &dir.path().join("data/a.truth"),
        None,
    )
    .unwrap();
    for line in text.lines() {
        assert!(line.ends_with("\t1"), "{line}");
    }
}

#[test]
fn resume_continues_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, SYNTH).unwrap();
    cmd_synth(&cfg, &dir.path().join("data"), None).unwrap();
    let run = run_config(dir.path(), "data/graph.toml", "");
    cmd_fit(&run, &dir.path().join("full"), &FitOptions { seed: None, t: Some(6), resume: None }).unwrap();
    cmd_fit(&run, &dir.path().join("half"), &FitOptions { seed: None, t: Some(3), resume: None }).unwrap();
    let resume = Some(dir.path().join("half/checkpoint.bin"));
    cmd_fit(&run, &dir.path().join("rest"), &FitOptions { seed: None, t: Some(6), resume }).unwrap();
    for name in ["factors.bin", "loss.csv"] {
        assert_eq!(
            fs::read(dir.path().join("full").join(name)).unwrap(),
            fs::read(dir.path().join("rest").join(name)).unwrap(),
            "{name}"
        );
    }
    // a different seed cannot resume this checkpoint
    let resume = Some(dir.path().join("half/checkpoint.bin"));
    let err = cmd_fit(&run, &dir.path().join("bad"), &FitOptions { seed: Some(99), t: Some(6), resume })
        .unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn discordance_pipeline_and_cleaning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, DISCORDANCE).unwrap();
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data, None).unwrap();
    let da = fs::read_to_string(data.join("da.toml")).unwrap();
    let run = run_config(dir.path(), "data/graph.toml", &da.replace("[da]", "[da]\nalpha = 0.25"));
    let run_text = fs::read_to_string(&run).unwrap().replace("k = [2, 2, 2]", "k = [3, 3, 3]");
    fs::write(&run, run_text).unwrap();
    cmd_fit(&run, &dir.path().join("fit"), &FitOptions { seed: None, t: None, resume: None }).unwrap();

    let factors = dir.path().join("fit/factors.bin");
    let both = DaOptions { factors: factors.clone(), selection: Some(Selection::Both), pairing: None };
    cmd_da(&run, &dir.path().join("da"), &both).unwrap();
    let report = fs::read_to_string(dir.path().join("da/report.txt")).unwrap();
    assert!(report.contains("alpha\t0.25"));
    assert_eq!(report.lines().filter(|l| l.starts_with("selected\t")).count(), 2);

    // no listed edges: every file is copied unchanged
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let graph = data.join("graph.toml");
    let (_, summary) = cmd_clean(&graph, None, &empty, &dir.path().join("same")).unwrap();
    assert_eq!(summary.removed, 0);
    for name in ["graph.toml", "item_subject.coo", "word_item.coo", "word_subject.coo"] {
        assert_eq!(
            fs::read(data.join(name)).unwrap(),
            fs::read(dir.path().join("same").join(name)).unwrap(),
            "{name}"
        );
    }

    // the hidden-cell mask lists cells that are already zero
    let (_, summary) = cmd_clean(&graph, None, &data.join("mask.tsv"), &dir.path().join("m")).unwrap();
    assert_eq!(summary.removed, 0);
    assert!(!summary.skipped.is_empty());

    // listing every nonzero cell empties the collection
    let c = cotri::schema::load_collection(&graph, &data).unwrap();
    let mut all = String::new();
    for m in c.matrices() {
        for i in 0..m.values.nrows() {
            for j in 0..m.values.ncols() {
                if m.values[(i, j)] != 0.0 {
                    all.push_str(&format!("{}\t{i}\t{j}\n", m.name));
                }
            }
        }
    }
    let list = dir.path().join("all.tsv");
    fs::write(&list, all).unwrap();
    let (_, summary) = cmd_clean(&graph, None, &list, &dir.path().join("zero")).unwrap();
    assert_eq!(summary.removed, c.total_nnz());
    let cleaned = cotri::schema::load_collection(
        &dir.path().join("zero/graph.toml"),
        &dir.path().join("zero"),
    )
    .unwrap();
    assert_eq!(cleaned.total_nnz(), 0);
}

#[test]
fn cleaning_rejects_out_of_range_edges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    fs::write(&cfg, SYNTH).unwrap();
    cmd_synth(&cfg, &dir.path().join("data"), None).unwrap();
    let list = dir.path().join("bad.tsv");
    fs::write(&list, "ab\t0\t500\n").unwrap();
    let out = cotri(&[
        "clean",
        "--graph",
        s(&dir.path().join("data/graph.toml")),
        "--edges",
        s(&list),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
