use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cascade_core::eval::{
    generate_synthetic_corpus, run_experiment, write_experiment_outputs, ExperimentConfig,
    SyntheticCorpusSpec,
};
use cascade_core::gateway::TemplateRegistry;
use cascade_core::io::{load_embeddings, load_jsonl};
use cascade_core::mining::read_mined;
use cascade_core::Item;

fn cascade(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
        .args(args)
        .current_dir(dir)
        .env_remove("CASCADE_CONFIG")
        .env_remove("CASCADE_CACHE_DIR")
        .output()
        .expect("spawn cascade")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A small synthetic corpus written by the CLI; returns its directory.
fn corpus(root: &Path) -> PathBuf {
    ok(&cascade(
        root,
        &[
            "synth",
            "--n-candidates",
            "150",
            "--n-queries",
            "12",
            "--seed",
            "5",
            "--out",
            "data",
        ],
    ));
    root.join("data")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

#[test]
fn synth_writes_what_the_library_generates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let spec = SyntheticCorpusSpec {
        n_candidates: 150,
        n_queries: 12,
        seed: 5,
        ..SyntheticCorpusSpec::standard()
    };
    let want = generate_synthetic_corpus(&spec).unwrap();
    let items: Vec<Item> = load_jsonl(&data.join("items.jsonl")).unwrap();
    assert_eq!(items, want.items);
    assert_eq!(
        load_embeddings(&data.join("candidates.crv")).unwrap(),
        want.candidate_embeddings
    );
    assert_eq!(
        load_embeddings(&data.join("queries.crv")).unwrap(),
        want.query_embeddings
    );
    ok(&cascade(&data, &["--config", "cascade.toml", "validate"]));
}

#[test]
fn build_index_round_trips_and_rejects_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    ok(&cascade(
        &data,
        &["--config", "cascade.toml", "build-index", "--out", "a.crv"],
    ));
    ok(&cascade(
        &data,
        &["build-index", "--embeddings", "a.crv", "--out", "b.crv"],
    ));
    let original = std::fs::read(data.join("candidates.crv")).unwrap();
    assert_eq!(std::fs::read(data.join("a.crv")).unwrap(), original);
    assert_eq!(std::fs::read(data.join("b.crv")).unwrap(), original);

    std::fs::write(data.join("bad.crv"), b"NOPE and more bytes").unwrap();
    let out = cascade(
        &data,
        &["build-index", "--embeddings", "bad.crv", "--out", "c.crv"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let mut truncated = original.clone();
    truncated.truncate(original.len() - 3);
    std::fs::write(data.join("short.crv"), truncated).unwrap();
    assert_eq!(
        code(&cascade(
            &data,
            &["build-index", "--embeddings", "short.crv", "--out", "c.crv"]
        )),
        2
    );
}

#[test]
fn exit_codes_for_configuration_problems() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // nothing configured
    assert_eq!(code(&cascade(dir, &["retrieve"])), 3);
    // config file missing
    assert_eq!(
        code(&cascade(dir, &["--config", "none.toml", "validate"])),
        3
    );
    // unknown key
    std::fs::write(dir.join("c.toml"), "[defaults]\ntopk = 3\n").unwrap();
    assert_eq!(code(&cascade(dir, &["--config", "c.toml", "validate"])), 3);
    // configured file absent
    std::fs::write(
        dir.join("c.toml"),
        "[paths]\ncorpus = \"gone.jsonl\"\nembeddings = \"gone.crv\"\n",
    )
    .unwrap();
    assert_eq!(code(&cascade(dir, &["--config", "c.toml", "validate"])), 3);
    // empty experiment grid
    std::fs::write(dir.join("g.toml"), "grid = []\n[corpus]\nseed = 1\n").unwrap();
    assert_eq!(
        code(&cascade(
            dir,
            &["experiment", "--grid", "g.toml", "--out", "o"]
        )),
        3
    );
    // rerank without a reranker
    let data = corpus(dir);
    assert_eq!(
        code(&cascade(
            &data,
            &["--config", "cascade.toml", "rerank", "--mode", "none"]
        )),
        3
    );
    // bad flag value
    assert_eq!(
        code(&cascade(
            &data,
            &["--config", "cascade.toml", "pipeline", "--mode", "sideways"]
        )),
        3
    );
}

#[test]
fn pipeline_output_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let args = [
        "--config",
        "cascade.toml",
        "pipeline",
        "--mode",
        "listwise",
        "--qar",
        "on",
        "--seed",
        "9",
    ];
    let a = ok(&cascade(&data, &args));
    let report_a = std::fs::read(data.join("out/pipeline.json")).unwrap();
    let b = ok(&cascade(&data, &args));
    assert_eq!(a, b);
    assert_eq!(
        report_a,
        std::fs::read(data.join("out/pipeline.json")).unwrap()
    );
    assert_eq!(a.lines().count(), 12);

    let retrieve = ok(&cascade(
        &data,
        &[
            "--config",
            "cascade.toml",
            "retrieve",
            "--top-k",
            "5",
            "--query-id",
            "q00003",
        ],
    ));
    let line: serde_json::Value = serde_json::from_str(retrieve.trim()).unwrap();
    assert_eq!(line["query_id"], "q00003");
    assert_eq!(line["final"]["entries"].as_array().unwrap().len(), 5);
    assert_eq!(line["token_budget"]["backend_calls"], 0);
}

#[test]
fn mine_resume_and_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let mine = ["--config", "cascade.toml", "mine", "--m", "20"];
    let first = ok(&cascade(&data, &mine));
    assert!(first.contains("mined: 12"), "{first}");
    let mined = data.join("out/mined.jsonl");
    let bytes = std::fs::read(&mined).unwrap();
    let (header, records) = read_mined(&mined).unwrap();
    assert_eq!((header.alpha, header.k), (0.95, 7));
    assert_eq!(records.len(), 12);

    let second = ok(&cascade(&data, &mine));
    assert!(second.contains("skipped: 12"), "{second}");
    assert!(second.contains("mined: 0"), "{second}");
    assert_eq!(std::fs::read(&mined).unwrap(), bytes);

    let audit = ok(&cascade(
        &data,
        &[
            "--config",
            "cascade.toml",
            "audit",
            "--mined",
            "out/mined.jsonl",
            "--sample",
            "40",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(audit.trim()).unwrap();
    assert_eq!(report["judged"], 40);
    assert_eq!(report["ratio_percent"], 0.0);

    // a record that breaks the k bound
    let text = String::from_utf8(bytes)
        .unwrap()
        .replacen("\"k\":7", "\"k\":1", 1);
    std::fs::write(data.join("broken.jsonl"), text).unwrap();
    let out = cascade(
        &data,
        &[
            "--config",
            "cascade.toml",
            "audit",
            "--mined",
            "broken.jsonl",
        ],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn experiment_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = repo_file("config/experiment.toml");
    let stdout = ok(&cascade(
        tmp.path(),
        &[
            "experiment",
            "--grid",
            grid.to_str().unwrap(),
            "--out",
            "cli",
        ],
    ));
    assert_eq!(stdout.lines().count(), 5);

    let cfg: ExperimentConfig = toml::from_str(&std::fs::read_to_string(&grid).unwrap()).unwrap();
    let report = run_experiment(&cfg).unwrap();
    write_experiment_outputs(&report, &tmp.path().join("lib")).unwrap();
    for name in ["report.jsonl", "budget.tsv", "gap.tsv"] {
        assert_eq!(
            std::fs::read(tmp.path().join("cli").join(name)).unwrap(),
            std::fs::read(tmp.path().join("lib").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn shipped_templates_match_the_built_in_set() {
    let text = std::fs::read_to_string(repo_file("config/templates.toml")).unwrap();
    let shipped: TemplateRegistry = toml::from_str(&text).unwrap();
    assert_eq!(shipped, TemplateRegistry::defaults());
}

#[test]
fn shipped_config_parses() {
    let text = std::fs::read_to_string(repo_file("config/cascade.toml")).unwrap();
    let _: toml::Table = toml::from_str(&text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    std::fs::create_dir(tmp.path().join("config")).unwrap();
    std::fs::copy(
        repo_file("config/cascade.toml"),
        tmp.path().join("config/cascade.toml"),
    )
    .unwrap();
    std::fs::copy(
        repo_file("config/templates.toml"),
        tmp.path().join("config/templates.toml"),
    )
    .unwrap();
    assert!(data.exists());
    let out = ok(&cascade(
        tmp.path(),
        &[
            "--config",
            "config/cascade.toml",
            "pipeline",
            "--query-id",
            "q00000",
        ],
    ));
    assert_eq!(out.lines().count(), 1);
    assert!(tmp.path().join("out/pipeline.json").exists());
}
