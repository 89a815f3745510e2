use pfedgate::metrics::{best_round, read_records, JsonlWriter, RoundRecord};

fn record(round: usize, val_acc: f64) -> RoundRecord {
    RoundRecord {
        round,
        avg_acc: 0.5 + round as f64 * 0.01,
        bottom_decile_acc: 0.1,
        val_acc,
        achieved_sparsity: 0.43,
        mean_q: 0.67,
        upload_floats: 1234 * round,
        index_overhead: 7,
        train_loss: 1.0 / (round as f64 + 1.0),
        max_batch_sparsity: 0.49,
        n_sampled: 4,
    }
}

#[test]
fn jsonl_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let records: Vec<RoundRecord> = (1..=5).map(|t| record(t, 0.1 * t as f64)).collect();
    let mut w = JsonlWriter::create(&path).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    w.finish().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.ends_with('\n'));
    assert_eq!(read_records(&path).unwrap(), records);
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut v = serde_json::to_value(record(1, 0.5)).unwrap();
    v["surprise"] = serde_json::json!(1);
    std::fs::write(&path, format!("{v}\n")).unwrap();
    assert!(read_records(&path).is_err());
}

#[test]
fn best_round_prefers_earliest_of_ties() {
    let records = vec![record(1, 0.3), record(2, 0.7), record(3, 0.7), record(4, 0.6)];
    assert_eq!(best_round(&records).unwrap().round, 2);
    assert!(best_round(&[]).is_none());
}
