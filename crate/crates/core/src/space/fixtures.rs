//! Search-space documents shipped with the crate.

/// Synthetic tree benchmark, verbatim (`r8`/`r9` typed `int [0...2]`).
pub const SIMULATION: &str = include_str!("../../spaces/simulation.yaml");
/// Synthetic tree benchmark with continuous shared variables `r8`, `r9` in
/// `[0, 1]`; the space the built-in objective is defined on.
pub const JENATTON: &str = include_str!("../../spaces/jenatton.yaml");
pub const SVM: &str = include_str!("../../spaces/svm.yaml");
pub const XGBOOST: &str = include_str!("../../spaces/xgboost.yaml");
/// SVM and XGBoost joined under an `algorithm` choice.
pub const CASH: &str = include_str!("../../spaces/cash.yaml");
pub const NAS: &str = include_str!("../../spaces/nas.yaml");

/// Looks up a shipped document by short name.
pub fn by_name(name: &str) -> Option<&'static str> {
    Some(match name {
        "simulation" => SIMULATION,
        "jenatton" | "sim" => JENATTON,
        "svm" => SVM,
        "xgboost" | "xgb" => XGBOOST,
        "cash" => CASH,
        "nas" => NAS,
        _ => return None,
    })
}
