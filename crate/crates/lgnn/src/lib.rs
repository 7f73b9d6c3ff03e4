//! Node-wise localized graph neural networks.
//!
//! A self-contained training toolkit for semi-supervised node classification
//! with GCN / GAT / GIN base architectures and two levels of feature-wise
//! localization of the shared global model:
//!
//! * **node-level** — each node's copy of the layer weight matrix is scaled
//!   and shifted by gates generated from the mean of its local context, and
//! * **edge-level** — the message on each context edge is further scaled and
//!   shifted by gates generated from the concatenated endpoint states.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! dense matrices plus sparse gather/scatter primitives; no external ML
//! framework is involved. See the `book/` directory for a guided tour.

pub mod cli;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod real;
pub mod tensor;
pub mod train;

pub use graph::GraphBundle;
pub use layers::Localization;
pub use model::{Model, ModelConfig, ModelKind, ParamRegistry};
pub use tensor::{Matrix, Tape, Tensor};
pub use train::{RunResult, TrainConfig};

// Book snippets double as doctests so the guide cannot drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Autodiff, "../../../book/src/autodiff.md");
    chapter!(Graphs, "../../../book/src/graphs.md");
    chapter!(Localization, "../../../book/src/localization.md");
    chapter!(Training, "../../../book/src/training.md");
}
