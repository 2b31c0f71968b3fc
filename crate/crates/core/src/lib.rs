pub mod agents;
pub mod eval_harness;
pub mod exec;
pub mod knowledge_store;
pub mod llm_gateway;
pub mod orchestrator;
pub mod results;
pub mod toolchain;
