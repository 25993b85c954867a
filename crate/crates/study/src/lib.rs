//! Perceptual rating study: randomized forward-only sessions, an
//! append-only record store, descriptive statistics with repeated-measures
//! ANOVA, and the HTTP service the browser client talks to.

pub mod analysis;
pub mod config;
pub mod fixture;
pub mod record;
pub mod service;
pub mod session;

pub use analysis::{analyze, descriptive_stats, rm_anova, AnalysisError, Design, StudyReport};
pub use config::{ConfigError, Criterion, StudyConfig};
pub use record::{read_records, RatingRecord, RecordStore, StoreError};
pub use session::{create_session, PageSubmission, SessionState, SlotRating, SubmitError};
