use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use crfkit::models::Sequence;
use crfkit_cli::conll::{parse_conll, write_labeled, LineKind};
use crfkit_cli::eval::{bio_chunks, evaluate, prediction_column, score};
use proptest::prelude::*;

fn crfkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crfkit")).args(args).output().unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_string_lossy().into_owned()
}

fn in_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn labels(rows: &[&[&str]]) -> Vec<Vec<String>> {
    rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()
}

#[test]
fn conll_reader_handles_docstart_crlf_and_sequences() {
    let text = "-DOCSTART- -X- O\r\n\r\nThe DT B-NP\r\ncat NN I-NP\r\n\r\n\r\nsat VBD O\r\n";
    let c = parse_conll(text).unwrap();
    assert_eq!(c.columns, 3);
    assert_eq!(c.sequences.len(), 2);
    assert_eq!(c.sequences[0].rows[1], vec!["cat", "NN", "I-NP"]);
    assert_eq!(c.sequences[1].lines, vec![7]);
    assert_eq!(c.lines.len(), 7);
    assert_eq!(c.lines[0].kind, LineKind::DocStart);
    assert_eq!(c.lines[6].kind, LineKind::Token { sequence: 1, position: 0 });
    let labeled = c.labeled().unwrap();
    assert_eq!(labeled[0].labels, vec!["B-NP", "I-NP"]);
    assert_eq!(labeled[0].tokens[0].columns, vec!["The", "DT"]);
    assert!(parse_conll("").unwrap().sequences.is_empty());
}

#[test]
fn conll_reader_reports_the_offending_line() {
    let err = parse_conll("a X\nb Y\n\nc\n").unwrap_err();
    assert_eq!(err.line, 4);
    assert!(parse_conll("a\nb\n").unwrap().labeled().is_err());
}

#[test]
fn single_class_predictions_have_full_recall_and_prior_precision() {
    let gold = labels(&[&["A", "B", "A", "A"]]);
    let pred = labels(&[&["A", "A", "A", "A"]]);
    let r = score(&gold, &pred);
    let a = r.labels.iter().find(|l| l.label == "A").unwrap();
    assert_eq!(a.scores.recall, 1.0);
    assert_eq!(a.scores.precision, 0.75);
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.confusion[&("B".to_string(), "A".to_string())], 1);
    assert!(r.chunks.is_none());
}

#[test]
fn bio_chunks_follow_conlleval_boundaries() {
    let c = bio_chunks(&["B-NP", "I-NP", "O", "I-NP", "B-VP", "B-VP", "I-NP"]);
    let spans: Vec<(usize, usize, &str)> = c.iter().map(|(a, b, k)| (*a, *b, k.as_str())).collect();
    assert_eq!(spans, vec![(0, 2, "NP"), (3, 4, "NP"), (4, 5, "VP"), (5, 6, "VP"), (6, 7, "NP")]);
    let gold = labels(&[&["B-NP", "I-NP", "O", "B-NP"]]);
    let pred = labels(&[&["B-NP", "O", "O", "B-NP"]]);
    let chunks = score(&gold, &pred).chunks.unwrap();
    assert_eq!((chunks.gold, chunks.predicted, chunks.correct), (2, 2, 1));
    assert!((chunks.scores.f1 - 0.5).abs() < 1e-12);
}

#[test]
fn misaligned_files_name_the_first_divergence() {
    let gold = parse_conll("a X\nb Y\n\nc X\n").unwrap();
    let shifted = parse_conll("a X X\nz Y Y\n\nc X X\n").unwrap();
    let e = evaluate(&gold, &shifted, None).unwrap_err();
    assert_eq!((e.sequence, e.position, e.pred_line), (0, 1, Some(2)));
    let short = parse_conll("a X X\nb Y Y\n").unwrap();
    assert_eq!(evaluate(&gold, &short, None).unwrap_err().sequence, 1);
    let long = parse_conll("a X X\nb Y Y\nq Y Y\n\nc X X\n").unwrap();
    let e = evaluate(&gold, &long, None).unwrap_err();
    assert_eq!((e.sequence, e.position, e.pred_line), (0, 2, Some(3)));
}

#[test]
fn prediction_column_defaults() {
    assert_eq!(prediction_column(3, 4, None), 3);
    assert_eq!(prediction_column(3, 5, None), 3);
    assert_eq!(prediction_column(3, 3, None), 2);
    assert_eq!(prediction_column(3, 5, Some(4)), 4);
}

fn train(dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let model = dir.join("m.crf");
    let mut args = vec![
        "train",
        "--train",
        &fixture("train.conll"),
        "--templates",
        &fixture("templates.txt"),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(["--model".to_string(), model.to_string_lossy().into_owned()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    (crfkit(&refs), model)
}

#[test]
fn train_writes_model_trace_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (out, model) = train(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("parameters\t"));
    assert!(stdout.contains("features\t"));
    assert!(stdout.lines().any(|l| l.starts_with("iter 1\tobjective ")));
    let trace = std::fs::read_to_string(format!("{}.trace", model.display())).unwrap();
    assert!(trace.starts_with("# iter objective"));
    assert!(std::fs::read_to_string(&model).unwrap().contains("regularizer\tl2 10\n"));
    let inspect = crfkit(&["inspect", "--model", &model.to_string_lossy(), "--top", "3"]);
    let text = String::from_utf8(inspect.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("weight\t")).count(), 3);
    assert!(text.contains("labels\tB-NP I-NP O"));
}

#[test]
fn strong_l1_reports_a_sparse_model() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = train(dir.path(), &["--l1", "5.0"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fraction: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("nonzero-fraction\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(fraction < 0.5);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = train(dir.path(), &["--l1", "1", "--sigma2", "3"]);
    assert_eq!(out.status.code(), Some(4));
    let bad = in_dir(dir.path(), "bad.conll");
    std::fs::write(&bad, "a X\nb\n").unwrap();
    let out = crfkit(&["train", "--train", &bad, "--model", &in_dir(dir.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let templates = in_dir(dir.path(), "t.txt");
    std::fs::write(&templates, "identity node 0\nidentity sideways 0\n").unwrap();
    let out = crfkit(&["train", "--train", &fixture("train.conll"), "--templates", &templates, "--model", &in_dir(dir.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));
    let junk = in_dir(dir.path(), "junk.crf");
    std::fs::write(&junk, "not a model\n").unwrap();
    let out = crfkit(&["tag", "--model", &junk, "--input", &fixture("train.conll")]);
    assert_eq!(out.status.code(), Some(2));
    let out = crfkit(&["train", "--train", &in_dir(dir.path(), "missing"), "--model", &junk]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tagging_preserves_lines_and_appends_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train(dir.path(), &[]);
    let model = model.to_string_lossy().into_owned();
    let input = std::fs::read_to_string(fixture("train.conll")).unwrap();
    for (mode, extra) in [("viterbi", 1), ("marginal", 2)] {
        let out = crfkit(&["tag", "--model", &model, "--input", &fixture("train.conll"), "--mode", mode]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        assert_eq!(text.lines().count(), input.lines().count());
        for (a, b) in input.lines().zip(text.lines()) {
            let (fa, fb): (Vec<&str>, Vec<&str>) = (a.split_whitespace().collect(), b.split_whitespace().collect());
            if fa.is_empty() || fa[0] == "-DOCSTART-" {
                assert_eq!(a.trim_end(), b);
            } else {
                assert_eq!(fb.len(), fa.len() + extra);
                assert_eq!(&fb[..fa.len()], &fa[..]);
            }
        }
    }
    let empty = in_dir(dir.path(), "empty.conll");
    std::fs::write(&empty, "").unwrap();
    let out = crfkit(&["tag", "--model", &model, "--input", &empty]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn tag_reads_standard_input() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train(dir.path(), &[]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_crfkit"))
        .args(["tag", "--model", &model.to_string_lossy(), "--input", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"The DT\ndog NN\n").unwrap();
    let out = child.wait_with_output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("The DT B-NP\n"));
}

#[test]
fn eval_writes_text_and_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = train(dir.path(), &[]);
    let pred = in_dir(dir.path(), "pred.txt");
    let tagged = crfkit(&["tag", "--model", &model.to_string_lossy(), "--input", &fixture("train.conll"), "--output", &pred]);
    assert!(tagged.status.success());
    let tsv = in_dir(dir.path(), "metrics.tsv");
    let out = crfkit(&["eval", "--gold", &fixture("train.conll"), "--pred", &pred, "--tsv", &tsv]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("chunk F1"));
    let metrics = std::fs::read_to_string(&tsv).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("accuracy\t")));
    assert!(metrics.lines().all(|l| l.split('\t').count() == 2));
    let wrong = in_dir(dir.path(), "wrong.txt");
    std::fs::write(&wrong, "The DT B-NP B-NP\n").unwrap();
    let out = crfkit(&["eval", "--gold", &fixture("train.conll"), "--pred", &wrong]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixture_and_bench_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (in_dir(dir.path(), "a"), in_dir(dir.path(), "b"));
    for path in [&a, &b] {
        let out = crfkit(&["fixture", "--kind", "label-bias", "--seed", "3", "--size", "20", "--train", path, "--test", &in_dir(dir.path(), "t")]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(parse_conll(&std::fs::read_to_string(&a).unwrap()).unwrap().sequences.len(), 20);
    let out = crfkit(&["bench", "--labels", "2", "--length", "5", "--instances", "3", "--repeats", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labeled_files_round_trip(
        seqs in prop::collection::vec(
            prop::collection::vec(("[a-z]{1,4}", "[a-z]{1,3}", "[A-C]"), 1..6),
            0..5,
        )
    ) {
        let data: Vec<Sequence> = seqs
            .iter()
            .map(|s| Sequence {
                tokens: s.iter().map(|(w, p, _)| crfkit::features::Token::new([w.clone(), p.clone()])).collect(),
                labels: s.iter().map(|(_, _, l)| l.clone()).collect(),
            })
            .collect();
        let back = parse_conll(&write_labeled(&data)).unwrap().labeled().unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn accuracy_is_correct_over_total(
        pairs in prop::collection::vec(prop::collection::vec(("[A-C]", "[A-C]"), 1..6), 1..5)
    ) {
        let gold: Vec<Vec<String>> = pairs.iter().map(|s| s.iter().map(|p| p.0.clone()).collect()).collect();
        let pred: Vec<Vec<String>> = pairs.iter().map(|s| s.iter().map(|p| p.1.clone()).collect()).collect();
        let r = score(&gold, &pred);
        let total: usize = pairs.iter().map(Vec::len).sum();
        let correct = pairs.iter().flatten().filter(|(a, b)| a == b).count();
        prop_assert_eq!(r.tokens, total);
        prop_assert!((r.accuracy - correct as f64 / total as f64).abs() < 1e-15);
        prop_assert_eq!(r.confusion.values().sum::<usize>(), total);
    }
}
