//! Human-in-the-loop triage of vacant, abandoned and deteriorated (VAD)
//! parcels.
//!
//! The crate covers the whole loop: parcel and incident ingestion with
//! weighted-count features ([`domain`]), a from-scratch random forest
//! ([`forest`]), batch composition by random, uncertainty and diversity
//! sampling ([`sampler`]), label auditing ([`audit`]), model interpretation
//! ([`interpret`]), the method-comparison metrics ([`evaluate`]), a synthetic
//! city generator with planted ground truth ([`synth`]) and the session
//! engine that ties the rounds together ([`session`]).

pub mod domain;
pub mod forest;
pub mod util;
pub mod sampler;
pub mod audit;
pub mod labels;
pub mod interpret;
pub mod evaluate;
pub mod synth;
pub mod session;
