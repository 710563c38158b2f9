//! Runtime verification suite: oracle equivalence, gradient soundness,
//! closed-form optimizer checks. Exposed through the CLI so a fresh build
//! can prove its numerics before anyone trains with it.

mod checks;
pub mod oracles;

pub use checks::{run_selftest, CheckResult, Perturb};
