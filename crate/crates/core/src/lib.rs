//! Testbed for probing memory-bearing LLM recommender agents with
//! adversarial item descriptions.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`] ingests interaction logs and item metadata, samples a working
//!   subset, and produces a leave-one-out split plus popularity statistics.
//! * [`gateway`] abstracts over chat-completion backends behind one trait,
//!   with a deterministic offline mock and an OpenAI-compatible HTTP client.
//! * [`agents`] hosts the victim recommender agents: prompt templates, agent
//!   memories with an audit trail, ranking-output parsing, and the memory
//!   update loop (including "drunk" refusal detection).
//! * [`forge`] searches for a transferable trigger sentence with a
//!   score-guided evolutionary loop (elite keep, softmax parent sampling,
//!   sentence-slice crossover, LLM polish).
//! * [`strategy`] composes the memory-corruption preamble from five snippet
//!   strategies and optimises their ordering against a victim harness.
//! * [`eval`] measures target exposure (HR@K / NDCG@K), overall performance
//!   drift, fluency (perplexity), and defense robustness, and emits reports.
//! * [`pipeline`] wires the stages together behind a config file, manifest,
//!   and per-stage artifacts, so runs are resumable and reproducible.
//!
//! Everything downstream of the config is deterministic for a fixed seed:
//! RNG streams are derived per (seed, stage/epoch), collections iterate in
//! sorted order, and the mock backend is a pure function of its inputs.

pub mod agents;
pub mod corpus;
pub mod eval;
pub mod fixtures;
pub mod forge;
pub mod gateway;
pub mod pipeline;
pub mod strategy;
pub mod textutil;
