//! Protocol-agnostic intrusion detection on radio spectrum sweeps.
//!
//! Sweeps from a software-defined radio are stacked into waterfalls, reduced
//! to per-slice statistics and scored by an autoencoder trained on clean
//! traffic. See the guide under `book/` for a walk through every stage.

pub mod spectrum;
pub mod sim;
pub mod features;
pub mod autoencoder;
pub mod detector;
pub mod eval;
pub mod pipeline;

// The guide's snippets run as doc-tests so they cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/waterfalls.md")]
    mod waterfalls {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/autoencoder.md")]
    mod autoencoder {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
