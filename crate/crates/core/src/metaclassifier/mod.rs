//! The meta-classifier policy: per-candidate features, a feed-forward
//! safe/unsafe classifier, safe vectors and safe prefixes, and training.

mod net;
mod safe;
mod samples;

pub use net::{FeatureLayout, GroupView, MetaParams};
pub use safe::{
    build_features, predict_candidates, safe_prefix, safe_prefix_len, safe_vector, safe_vector_at, SafePrefix,
    SafeVector, SAFE_THRESHOLD,
};
pub use samples::{
    append_sample_log, train_meta, MetaSample, MetaTrainConfig, MetaTrainReport, SignalSource, StepGroup,
    StepProvenance,
};
