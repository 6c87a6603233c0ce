//! Style-aware retrieval-augmented generation.
//!
//! A query is embedded into a shared latent space, matched against the keys
//! of a trainable prompt bank, and the selected prompts (adapted by a mixture
//! of low-rank experts) are prepended as soft tokens to a frozen encoder. The
//! pooled encoder output retrieves evidence from a vector index, and the
//! evidence is rendered into a structured context for a text generator.
//!
//! Module map:
//!
//! * [`numkit`]: dense kernels.
//! * [`embedders`]: prototype embedding providers.
//! * [`promptbank`]: key/prompt storage, selection and MoE-LoRA adaptation.
//! * [`encoder`]: tokenization, prompt composition and the frozen encoder.
//! * [`trainer`]: triplet + key-alignment objective, gradients and AdamW.
//! * [`vecindex`]: exact top-k index, persistence and the query cache.
//! * [`pipeline`]: the end-to-end feature extractor tying the above together.
//! * [`rag`]: context assembly, generation backends and `answer`.
//! * [`evalharness`]: synthetic benchmarks, recall grids and ablations.
//! * [`config`]: the merged run configuration.

pub mod config;
pub mod embedders;
pub mod encoder;
pub mod evalharness;
pub mod http;
pub mod numkit;
pub mod pipeline;
pub mod promptbank;
pub mod rag;
pub mod seeding;
pub mod snapshot;
pub mod trainer;
pub mod vecindex;
