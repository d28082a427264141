//! Search-and-refine retrieval-augmented reasoning loop.
//!
//! A policy writes `<think>`, `<search>`, `<refine>` and `<answer>` blocks;
//! the engine answers each search with BM25 results in a `<documents>` block.
//! Trajectories are scored with an answer F1 reward plus a retrieval reward
//! over the refinements, and the toy policy is trained with GRPO, masking the
//! engine-injected documents out of the loss.

pub mod evalkit;
pub mod grpo;
pub mod policy;
pub mod retrieval;
pub mod rewards;
pub mod rollout;
pub mod synthkb;
pub mod tokenize;
pub mod trajectory;
