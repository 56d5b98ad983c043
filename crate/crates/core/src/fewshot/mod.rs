//! Adapting an embedding to a labeled episode: prototypes, the
//! prototype-initialized linear head and its fine-tuning, plus the
//! supervised baselines.

mod head;
mod supervised;
mod tune;

pub use head::{classify_prototypes, compute_prototypes, init_head, sq_distances, LinearHead, Predictions};
pub use supervised::{train_pre_linear, train_protonet_supervised, PreLinearConfig, ProtoNetConfig};
pub use tune::{embed, fine_tune_head, linear_probe, proto_tune, Adapted, BnMode, FineTuneConfig, Scope};
