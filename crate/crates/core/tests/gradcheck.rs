//! Every operator's reverse-mode gradient against central differences of
//! forward values, 20 random fixtures each, and the penalty-path operators
//! one order up.

use fedgan::autodiff::gradcheck::operator_sweep;

#[test]
fn all_operators_match_finite_differences() {
    let reports = operator_sweep(20).unwrap();
    assert!(reports.len() >= 40, "only {} operator sweeps", reports.len());
    for r in &reports {
        eprintln!(
            "order {} {:>22}: worst {:.2e} over {}",
            r.order, r.name, r.worst, r.fixtures
        );
    }
    let bad: Vec<_> = reports.iter().filter(|r| r.worst.is_nan() || r.worst >= 1e-6).collect();
    assert!(bad.is_empty(), "operators above 1e-6: {bad:?}");
}
