//! Mean-field variational inference for a topic model over dependency trees.
//!
//! Each document is a rooted tree of word tokens. A word's topic depends on
//! the document's topic proportions and on its parent's topic through a
//! K×K transition matrix; the non-conjugate normalizer of that product is
//! handled with a per-edge auxiliary bound. The crate evaluates the
//! resulting per-document evidence lower bound, runs coordinate ascent over
//! the local and global variational parameters, and ships Monte-Carlo and
//! finite-difference oracles that check the analytic bound against sampling.
//!
//! All numerical code is generic over [`Real`] (`f64` or `f32`); the `*64`
//! and `*32` aliases below fix the scalar.

pub mod check;
pub mod cli;
pub mod corpus;
pub mod elbo;
pub mod inference;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod special;

pub use corpus::{parse_corpus, serialize_corpus, Corpus, CorpusError, DepDocument, TreeViolation, Vocabulary};
pub use elbo::{document_elbo, edge_normalizer, omega_bound_terms, ElboError, TransitionStats};
pub use inference::{heldout_bound, train, EStepConfig, InferenceError, TrainConfig, TrainTrace};
pub use model::{
    deserialize_model, init_global, init_variational, serialize_model, DocVariational, ElboBreakdown, GlobalParams,
    Hyperparams, ModelError,
};
pub use scalar::Real;
pub use special::DomainError;

pub type GlobalParams64 = GlobalParams<f64>;
pub type GlobalParams32 = GlobalParams<f32>;
pub type DocVariational64 = DocVariational<f64>;
pub type DocVariational32 = DocVariational<f32>;
pub type Hyperparams64 = Hyperparams<f64>;
pub type Hyperparams32 = Hyperparams<f32>;
pub type ElboBreakdown64 = ElboBreakdown<f64>;
pub type ElboBreakdown32 = ElboBreakdown<f32>;
pub type TrainTrace64 = TrainTrace<f64>;
pub type TrainTrace32 = TrainTrace<f32>;
