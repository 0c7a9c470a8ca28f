mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nes::cli::OutputLine;
use nes::toy::{ToyConfig, ToyCorpus};
use nes::{Error, EvalReport, RetrievalDiagnostics, RetrievalResult};

fn nes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nes")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nes(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    files: nes::toy::ToyFiles,
}

impl Setup {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let toy = ToyCorpus::generate(ToyConfig::with_seed(seed)).unwrap();
        let files = toy.write_files(dir.path().join("data"), 4).unwrap();
        let s = Setup { dir, files };
        ok(&[
            "ingest",
            "--captions",
            p(&s.files.captions),
            "--embeddings",
            p(&s.files.caption_embeddings),
            "--out",
            p(&s.store()),
        ]);
        s
    }

    fn store(&self) -> std::path::PathBuf {
        self.dir.path().join("store")
    }

    fn run(&self, mode: &str, input: &Path, out: &str, extra: &[&str]) -> std::path::PathBuf {
        let out = self.dir.path().join(out);
        let store = self.store();
        let mut args = vec![
            "run",
            "--mode",
            mode,
            "--store",
            p(&store),
            "--config",
            p(&self.files.config),
        ];
        args.extend(["--input", p(input), "--out", p(&out)]);
        args.extend(extra);
        ok(&args);
        out
    }
}

#[test]
fn ingest_and_retrieve() {
    let s = Setup::new(1);
    let json = ok(&[
        "retrieve",
        "--store",
        p(&s.store()),
        "--query-key",
        "cap-003",
        "-k",
        "5",
        "--json",
    ]);
    let result: RetrievalResult = serde_json::from_str(json.trim()).unwrap();
    assert_eq!(result.len(), 5);
    assert_eq!(result.hits[0].id, "cap-003");
    assert!((result.hits[0].score - 1.0).abs() < 1e-6);

    let text = ok(&[
        "retrieve",
        "--store",
        p(&s.store()),
        "--query-key",
        "cap-003",
        "-k",
        "2",
    ]);
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("1\tcap-003\t"));

    let vec_file = s.dir.path().join("q.json");
    fs::write(&vec_file, serde_json::to_string(&vec![1.0f32; 128]).unwrap()).unwrap();
    let json = ok(&[
        "retrieve",
        "--store",
        p(&s.store()),
        "--query-vec",
        p(&vec_file),
        "--json",
    ]);
    let result: RetrievalResult = serde_json::from_str(json.trim()).unwrap();
    assert_eq!(result.len(), 9);
}

#[test]
fn run_both_modes_and_evaluate() {
    let s = Setup::new(2);
    let report = s.dir.path().join("report.jsonl");
    let inf = s.run(
        "inference",
        &s.files.inference_input,
        "inf.jsonl",
        &["--report", p(&report)],
    );
    let lines: Vec<OutputLine> = fs::read_to_string(&inf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    for line in &lines {
        line.context.check().unwrap();
        assert!(line.references.is_some());
    }
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 20);

    let train = s.dir.path().join("train.jsonl");
    let out = nes(&[
        "run",
        "--mode",
        "training",
        "--store",
        p(&s.store()),
        "--config",
        p(&s.files.config),
        "--input",
        p(&s.files.training_input),
        "--out",
        p(&train),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let written = fs::read_to_string(&train).unwrap().lines().count();
    assert!(stdout.contains(&format!("wrote {written} contexts")), "{stdout}");
    assert!(written < 20 && !stdout.contains("(0 skipped)"), "{stdout}");

    let json = ok(&[
        "eval",
        "chair",
        "--pred",
        p(&inf),
        "--vocab",
        p(&s.files.vocab),
        "--synonyms",
        p(&s.files.synonyms),
        "--json",
    ]);
    let r: EvalReport = serde_json::from_str(json.trim()).unwrap();
    r.check().unwrap();
    let table = ok(&["eval", "chair", "--pred", p(&inf), "--vocab", p(&s.files.vocab)]);
    assert!(table.contains("CHAIR-I"));
}

#[test]
fn stage_flags_change_the_output() {
    let s = Setup::new(3);
    let full = s.run("inference", &s.files.inference_input, "full.jsonl", &[]);
    let off = s.run(
        "inference",
        &s.files.inference_input,
        "off.jsonl",
        &["--no-nef", "--no-as"],
    );
    let read = |f: &Path| -> Vec<OutputLine> {
        fs::read_to_string(f)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    for line in read(&off) {
        assert!(line.context.entity_sets.negative.is_empty());
        assert!(line.context.suppression_report.selected.is_empty());
    }
    assert!(read(&full).iter().any(|l| !l.context.entity_sets.negative.is_empty()));
}

#[test]
fn golden_corpus_through_eval_commands() {
    let g = common::golden();
    let dir = tempfile::tempdir().unwrap();
    let mut vocab = std::collections::BTreeSet::new();
    let mut pred = String::new();
    let mut retr = String::new();
    for inst in &g.instances {
        vocab.extend(
            inst.generated
                .iter()
                .chain(&inst.ground_truth)
                .chain(&inst.retrieved)
                .cloned(),
        );
        let gt: Vec<_> = inst.ground_truth.iter().collect();
        let retrieved: Vec<_> = inst.retrieved.iter().map(|e| format!("a photo with a {e}")).collect();
        pred += &serde_json::json!({"generated": inst.generated, "references": gt, "retrieved": retrieved}).to_string();
        pred.push('\n');
        retr += &serde_json::json!({"retrieved": inst.retrieved, "ground_truth": inst.ground_truth}).to_string();
        retr.push('\n');
    }
    let vocab_file = dir.path().join("vocab.txt");
    fs::write(&vocab_file, vocab.into_iter().collect::<Vec<_>>().join("\n")).unwrap();
    let pred_file = dir.path().join("pred.jsonl");
    fs::write(&pred_file, pred).unwrap();
    let retr_file = dir.path().join("retr.jsonl");
    fs::write(&retr_file, retr).unwrap();

    let r: EvalReport = serde_json::from_str(
        ok(&[
            "eval",
            "chair",
            "--pred",
            p(&pred_file),
            "--vocab",
            p(&vocab_file),
            "--json",
        ])
        .trim(),
    )
    .unwrap();
    assert_eq!((r.chair_s, r.chair_i, r.recall), (5.0 / 12.0, 0.3, 14.0 / 19.0));
    assert_eq!(
        (r.total_hallucinations, r.retrieval_sourced, r.model_sourced),
        (6, 3, 3)
    );

    let d: RetrievalDiagnostics =
        serde_json::from_str(ok(&["eval", "retrieval", "--instances", p(&retr_file), "--json"]).trim()).unwrap();
    assert_eq!((d.acc, d.rc, d.ahc, d.dhc), (0.6, 12.0 / 19.0, 2.0 / 3.0, 5));
    let table = ok(&["eval", "retrieval", "--instances", p(&retr_file)]);
    assert!(
        table.contains("(3/5)") && table.contains("(12/19)") && table.contains("(2/3)"),
        "{table}"
    );
}

#[test]
fn exit_codes() {
    assert_eq!(nes(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nes(&["retrieve", "--store", "/nonexistent"]).status.code(), Some(2));
    assert_eq!(
        nes(&["retrieve", "--store", "/nonexistent/store", "--query-key", "x"])
            .status
            .code(),
        Some(2)
    );

    let s = Setup::new(4);
    let bad = s.dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"x\", \"image_key\": \"missing\"}\n").unwrap();
    let out = nes(&[
        "run",
        "--mode",
        "inference",
        "--store",
        p(&s.store()),
        "--config",
        p(&s.files.config),
        "--input",
        p(&bad),
        "--out",
        p(&s.dir.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let out = nes(&[
        "run",
        "--store",
        p(&s.store()),
        "--config",
        p(&s.files.config),
        "--input",
        p(&s.files.inference_input),
        "--out",
        p(&s.dir.path().join("o.jsonl")),
        "--tau-neg",
        "0.2",
    ]);
    assert_eq!(out.status.code(), Some(2));

    assert!(ok(&["--help"]).contains("ingest"));
    assert_eq!(Error::Invariant("x".into()).exit_code(), 3);
    assert_eq!(Error::Format("x".into()).exit_code(), 2);
}
