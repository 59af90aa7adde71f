//! Fixed-effect estimates, study conclusions and forest plots for clinical
//! outcome data, plus scoring of model-extracted outcome data: rule-based
//! rewards, group-relative advantages and evaluation metrics.
//!
//! ```
//! use evisynth::outcome::{estimate_binary, derive_conclusion, BinaryArms, Conclusion};
//!
//! let est = estimate_binary(&BinaryArms::new(8, 23, 2, 22).unwrap()).unwrap();
//! assert!((est.point - 3.83).abs() < 0.01);
//! assert_eq!(derive_conclusion(&est), Conclusion::Inconclusive);
//! ```

pub mod corpus;
pub mod error;
pub mod forestplot;
pub mod gateway;
pub mod metrics;
pub mod outcome;
pub mod rewards;
pub mod schema;

pub use error::{Error, Result};
pub use outcome::{Conclusion, EffectEstimate, OutcomeData, OutcomeType, Scale};
pub use schema::{parse_response, ExtractionOutput};
