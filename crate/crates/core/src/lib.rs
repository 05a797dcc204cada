pub mod curate;
pub mod eval;
pub mod exec;
pub mod grpo;
pub mod policy;
pub mod prompt;
pub mod reward;
pub mod toy_task;
pub mod train;
