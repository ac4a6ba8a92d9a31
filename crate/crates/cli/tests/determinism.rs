mod common;

use common::*;

#[test]
fn every_subcommand_is_reproducible_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [("a", 1), ("b", 1), ("c", 4)];
    for (dir, threads) in runs {
        run_pipeline(&tmp.path().join(dir), 11, threads).unwrap();
    }
    let a = tmp.path().join("a");
    assert!(tree(&a).len() > 20);
    assert_eq!(tree_diff(&a, &tmp.path().join("b")), Vec::<std::path::PathBuf>::new());
    assert_eq!(tree_diff(&a, &tmp.path().join("c")), Vec::<std::path::PathBuf>::new());
}

#[test]
fn seed_changes_randomized_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(&tmp.path().join("a"), 1, 2).unwrap();
    run_pipeline(&tmp.path().join("b"), 2, 2).unwrap();
    let diff = tree_diff(&tmp.path().join("a"), &tmp.path().join("b"));
    assert!(diff.iter().any(|p| p.starts_with("sample")), "{diff:?}");
    assert!(diff.iter().any(|p| p.starts_with("distill")), "{diff:?}");
    assert!(
        !diff.iter().any(|p| p.starts_with("cond") || p.starts_with("edit")),
        "{diff:?}"
    );
}
