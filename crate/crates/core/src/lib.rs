//! Tree-oracle guided reasoning: a symbolic decision-tree oracle, an LLM
//! agent and a tool layer coordinated over a shared, append-only belief state.

pub mod belief;
pub mod bench;
pub mod llm;
pub mod orchestrator;
pub mod perception;
pub mod policy;
pub mod tools;
pub mod tree;
pub mod types;
