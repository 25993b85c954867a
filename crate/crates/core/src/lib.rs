//! Data side of the talkface toolkit: feature vocabulary, CSV ingestion,
//! the cleaning pipeline, a seeded synthetic corpus and objective metrics.

pub mod domain;
pub mod evalobj;
pub mod ingestion;
pub mod par;
pub mod preprocess;
pub mod synthcorpus;

pub use domain::{
    BehaviorFrame, BehaviorTrack, DomainError, NormStats, SpeakerRole, SpeechFrame, SpeechTrack,
    Track,
};
