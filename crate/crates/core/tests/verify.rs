use prism::verify::{self, coverage, Coverage, Options, Prim, SUITES};

#[test]
fn every_suite_passes_and_every_item_is_covered() {
    let reports = verify::run("all", &Options::default()).unwrap();
    assert_eq!(reports.len(), SUITES.len());
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
    for (item, status) in coverage(&reports) {
        match status {
            Coverage::Passed => {}
            Coverage::External => assert!(item.elsewhere.is_some()),
            other => panic!("{}: {} is {other:?}", item.module, item.invariant),
        }
    }
}

#[test]
fn corrupted_backward_rules_are_detected() {
    for prim in ["exp", "matmul", "softmax", "conv2d"] {
        assert!(Prim::ALL.iter().any(|p| p.name() == prim), "{prim}");
        let opts = Options {
            corrupt_backward: Some(prim.to_string()),
        };
        let report = verify::run_suite("tensor", &opts).unwrap();
        let check = report.get(&format!("grad.{prim}")).unwrap();
        assert!(!check.passed, "{check}");
        assert_eq!(report.failures().count(), 1, "{report}");
    }
}

#[test]
fn unknown_suite_is_rejected() {
    assert!(verify::run("nonsense", &Options::default()).is_err());
}
