//! Corpus-grounded dynamic retrieval-augmented generation.
//!
//! Retrieval is triggered from objective corpus statistics instead of model
//! confidence: before generation, by the average frequency of the question's
//! entities; during generation, by the windowed co-occurrence of the head and
//! tail of every claim extracted from each new sentence.

pub mod controller;
pub mod corpus;
pub mod eval;
pub mod extraction;
pub mod gateway;
pub mod index;
pub mod retriever;
