//! An embedded context store for coordinating agents.
//!
//! The kernel is a multi-version store with snapshot isolation: every commit
//! gets a [`kernel::CutId`] and every read names the cut it came from. On top
//! sit three memory layers (append-only episodes, provenance-carrying semantic
//! records, transactional state), an admissibility gate that checks a
//! decision's premises before its effects become visible, and a simulator
//! plus trace analyzer for comparing against a composition of lagging
//! subsystems.
//!
//! ```
//! use ctxlake::analyzer::analyze;
//! use ctxlake::sim::{run_scenario, Mode, ScenarioConfig};
//!
//! let lake = run_scenario(&ScenarioConfig::new("warehouse")).unwrap();
//! assert!(analyze(&lake.trace).is_clean());
//!
//! let composed = ScenarioConfig::new("warehouse").with_mode(Mode::Composed).with_lag("replica", 60);
//! let report = analyze(&run_scenario(&composed).unwrap().trace);
//! assert!(!report.codes_for("ship-O1").is_empty());
//! ```

pub mod admissibility;
pub mod analyzer;
pub mod codec;
pub mod composed;
pub mod envelope;
pub mod error;
pub mod kernel;
pub mod layers;
pub mod semantic;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
