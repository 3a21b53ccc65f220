use cowclip::harness::report::{from_json, to_csv, to_json, to_text_table};
use cowclip::harness::{sweep, ExperimentConfig, RunRecord};
use cowclip::scaling::Rule;

fn records() -> Vec<RunRecord> {
    let mut c = ExperimentConfig::default();
    c.data.n_samples = 1500;
    c.data.vocab_sizes = vec![40; 3];
    c.model.hidden = vec![8];
    c.epochs = 2;
    c.base.base_batch = 64;
    sweep(&c, &[64, 256], &[Rule::None, Rule::CowClip]).unwrap().records
}

#[test]
fn json_round_trip_is_identical() {
    let r = records();
    assert_eq!(from_json(&to_json(&r).unwrap()).unwrap(), r);
}

#[test]
fn csv_rows_match_epoch_count() {
    let r = records();
    let expected: usize = r.iter().map(|x| x.epochs.len()).sum();
    let csv = to_csv(&r).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.records().count(), expected);
}

#[test]
fn text_table_has_rule_rows_and_size_columns() {
    let t = to_text_table(&records());
    assert!(t.lines().any(|l| l.starts_with("none")));
    assert!(t.lines().any(|l| l.starts_with("cowclip")));
    assert!(t.lines().next().unwrap().contains("256"));
}
