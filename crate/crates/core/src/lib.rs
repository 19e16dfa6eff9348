//! Progressive separation of tracking and functional web resources.
//!
//! Script-initiated requests from browser crawl traces are labeled with
//! filter lists, then classified at four granularities (registrable domain,
//! hostname, initiator script, initiator method). Resources that mix
//! tracking and functional requests are examined at the next finer level,
//! and the call stacks of mixed methods are merged to find the frames that
//! only take part in tracking.

pub mod attribution;
pub mod divergence;
pub mod filter;
pub mod pipeline;
pub mod report;
pub mod sifter;
pub mod synth;
pub mod trace;
