//! Algebraic abstract reasoning for Raven-style progressive matrices.
//!
//! The crate bundles a symbolic instance generator, a simulated perception
//! layer producing belief states, matrix encodings of attribute values, an
//! operator-induction reasoner differentiable end to end, and its trainer.

pub mod algebra;
pub mod dataset;
pub mod experiment;
pub mod gen;
pub mod model;
pub mod perception;
pub mod reasoner;
pub mod rpm;
pub mod tape;
pub mod trainer;

pub use algebra::Encoding;
pub use model::{Checkpoint, EncodingKind, Model};
pub use perception::{BeliefState, InstanceBeliefs, NoiseModel};
pub use reasoner::{answer_distribution, AnswerDistribution, ReasonerConfig};
pub use rpm::{Attribute, PanelSpec, Regime, RelationKind, RpmInstance, RuleSet};
