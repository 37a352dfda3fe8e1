use std::io::Write;

use edge_grpo::analytics::{analyze_log, export_csv, ResponseLogRecord};
use edge_grpo::metrics::{MetricsWriter, NUMERIC_COLUMNS};
use edge_grpo::{train, Error, Mode, TrainConfig};
use proptest::prelude::*;

fn write_log(path: &std::path::Path, records: &[ResponseLogRecord], junk: &[&str]) {
    let mut f = std::fs::File::create(path).unwrap();
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
    for line in junk {
        writeln!(f, "{line}").unwrap();
    }
}

fn record(
    i: usize,
    correct: bool,
    entropy: f64,
    reflective: bool,
    temperature: f64,
) -> ResponseLogRecord {
    ResponseLogRecord {
        id: format!("r{i}"),
        question_text: "q".into(),
        response_text: if reflective {
            "hmm, let me Recheck that".into()
        } else {
            "the answer is 4".into()
        },
        correct,
        entropy: Some(entropy),
        temperature,
        model_tag: "m".into(),
    }
}

#[test]
fn malformed_lines_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_log(
        &path,
        &[
            record(0, true, 0.5, true, 0.6),
            record(1, false, 0.9, false, 0.6),
        ],
        &[
            "{not json",
            r#"{"id":"x","response_text":"a","correct":true,"temperature":-1}"#,
        ],
    );
    let report = analyze_log(&path).unwrap();
    assert_eq!(report.records, 2);
    assert_eq!(report.malformed_lines, 2);
    assert_eq!(report.keyword_hits["recheck"], 1);
}

#[test]
fn all_malformed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_log(&path, &[], &["nope"]);
    assert!(matches!(analyze_log(&path), Err(Error::EmptyInput(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn report_ignores_line_order(
        rows in prop::collection::vec((any::<bool>(), 0.0f64..3.0, any::<bool>(), 0usize..2), 2..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let records: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, &(c, e, r, t))| record(i, c, e, r, [0.6, 1.0][t]))
            .collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_log(&a, &records, &[]);
        write_log(&b, &shuffled, &[]);
        let (ra, rb) = (analyze_log(&a).unwrap(), analyze_log(&b).unwrap());
        prop_assert_eq!(ra.counts, rb.counts);
        prop_assert_eq!(&ra.keyword_hits, &rb.keyword_hits);
        prop_assert_eq!(ra.buckets.len(), rb.buckets.len());
        for (x, y) in ra.buckets.iter().zip(&rb.buckets) {
            prop_assert_eq!(x.records, y.records);
            match (x.rcm, y.rcm) {
                (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                (p, q) => prop_assert_eq!(p, q),
            }
        }
    }
}

#[test]
fn csv_export_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        mode: Mode::Edge,
        steps: 30,
        eval_every: 10,
        eval_questions: 20,
        ..TrainConfig::default()
    };
    let summary = train(&config, dir.path()).unwrap();
    let out = dir.path().join("m.csv");
    let columns: Vec<String> = NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    assert_eq!(
        export_csv(&summary.metrics_path, &columns, &out).unwrap(),
        30
    );

    let records = edge_grpo::metrics::read_metrics(&summary.metrics_path).unwrap();
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, columns);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), records.len());
    let idx = |name: &str| columns.iter().position(|c| c == name).unwrap();
    for (row, rec) in rows.iter().zip(&records) {
        assert_eq!(row[idx("step")].parse::<usize>().unwrap(), rec.step);
        let v: f64 = row[idx("advantage_variance")].parse().unwrap();
        assert_eq!(v.to_bits(), rec.advantage_variance.to_bits());
        match rec.eval_accuracy {
            Some(a) => assert_eq!(row[idx("eval_accuracy")].parse::<f64>().unwrap(), a),
            None => assert!(row[idx("eval_accuracy")].is_empty()),
        }
    }
}

#[test]
fn empty_metrics_export_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    MetricsWriter::create(&path).unwrap().finish().unwrap();
    let out = dir.path().join("e.csv");
    let columns = vec!["step".to_string(), "mean_reward".to_string()];
    assert_eq!(export_csv(&path, &columns, &out).unwrap(), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "step,mean_reward\n");
}

#[test]
fn unknown_columns_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    MetricsWriter::create(&path).unwrap().finish().unwrap();
    let err = export_csv(
        &path,
        &["step".into(), "bogus".into(), "nope".into()],
        &dir.path().join("x.csv"),
    )
    .unwrap_err();
    assert_eq!(err.to_string(), "unknown column(s): bogus, nope");
}
