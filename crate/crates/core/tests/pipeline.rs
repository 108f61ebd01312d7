use std::fs;

use expertadapt::data::ExpertId;
use expertadapt::experiment::{
    build_tables, parse_config, render_tables, report_from_ledger, write_config, ExperimentKind, ExperimentSpec,
    Ledger, Runner,
};
use expertadapt::stats::{Format, TestKind};
use expertadapt::Error;

fn tiny(kind: &str, out: &std::path::Path, extra: &str) -> ExperimentSpec {
    let text = format!(
        r#"{{
            "kind": "{kind}",
            "data": {{"synth": {{"n_cases": 8}}, "n_train": 5}},
            "new_experts": [6],
            "pretrain_experts": [1, 2, 3],
            "n_ways": 2,
            "train": {{"train_steps": 2, "finetune_steps": 2, "batch_size": 1, "augment": null}},
            "out_dir": {out:?}
            {extra}
        }}"#
    );
    parse_config(&text, None, None).unwrap()
}

fn run(spec: &ExperimentSpec, resume: bool) -> (usize, String) {
    write_config(spec).unwrap();
    let outcome = Runner::new(spec.clone(), resume).unwrap().run().unwrap();
    (outcome.runs.len(), render_tables(&outcome.tables, Format::Markdown).unwrap())
}

#[test]
fn expert_count_grid_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny("expert_count", dir.path(), r#", "expert_counts": [0, 1, 3], "finetune_samples": 2"#);
    let (n, md) = run(&spec, false);
    // ways x (scratch + C(3,1) + C(3,3))
    assert_eq!(n, 2 * (1 + 3 + 1));
    assert_eq!(md.matches("\n| ").count(), 4, "{md}");
    let ledger = spec.ledger_dir();
    let stamp = |name: &str| fs::metadata(ledger.join(name)).unwrap().modified().unwrap();
    let before = stamp("exp6-k1-1-way01.json");
    let (n2, md2) = run(&spec, true);
    assert_eq!((n2, &md2), (n, &md));
    assert_eq!(stamp("exp6-k1-1-way01.json"), before);
    let tables = report_from_ledger(&spec.experiment_dir()).unwrap();
    assert_eq!(render_tables(&tables, Format::Markdown).unwrap(), md);
}

#[test]
fn ann_count_grid_has_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny("ann_count", dir.path(), r#", "annotation_counts": [2, 5], "combo_size": 2"#);
    let outcome = Runner::new(spec.clone(), false).unwrap().run().unwrap();
    // counts x ways x (w/o + C(3,2) w/)
    assert_eq!(outcome.runs.len(), 2 * 2 * (1 + 3));
    let table = &outcome.tables[0];
    assert_eq!(table.columns.len(), 6);
    assert_eq!(table.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["2", "5"]);
    assert!(table.rows.iter().all(|r| r.cells.iter().skip(1).step_by(2).all(|c| !c.underline)));

    // dropping one cell leaves an incomplete grid
    let mut partial = outcome.runs.clone();
    partial.retain(|r| !(r.sampling_way == 1 && r.row == "5" && r.arm.as_deref() == Some("w/") && r.combo.as_ref().unwrap().label() == "1-3"));
    let err = build_tables(ExperimentKind::AnnCount, &partial, TestKind::Unpaired, 0.05).unwrap_err();
    assert!(err.to_string().contains("way 1 combo 1-3"), "{err}");
}

#[test]
fn expert_matrix_rows_are_train_experts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny("expert_matrix", dir.path(), r#", "matrix_experts": [1, 6], "matrix_runs": 2"#);
    let outcome = Runner::new(spec, false).unwrap().run().unwrap();
    assert_eq!(outcome.runs.len(), 4);
    let labels: Vec<&str> = outcome.tables[0].rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Exp_1", "Exp_6"]);
    assert_eq!(outcome.tables[0].title, "Tested on Exp_6");
}

#[test]
fn unknown_expert_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny("expert_count", dir.path(), r#", "expert_counts": [1], "finetune_samples": 2"#);
    spec.new_experts = vec![ExpertId(9)];
    let err = Runner::new(spec, false).unwrap().run().unwrap_err();
    assert!(matches!(err, Error::MissingMask { expert: 9, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn ledger_ignores_results_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny("expert_count", dir.path(), r#", "expert_counts": [0], "finetune_samples": 2"#);
    run(&spec, false);
    let ledger = Ledger::new(spec.ledger_dir());
    let hash = spec.config_hash();
    assert!(ledger.lookup("exp6-k0-way01", &hash).unwrap().is_some());
    assert!(ledger.lookup("exp6-k0-way01", "other").unwrap().is_none());
    assert!(ledger.lookup("exp6-k0-way09", &hash).unwrap().is_none());
}
