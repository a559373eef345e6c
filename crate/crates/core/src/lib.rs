pub mod diffcore;
pub mod assign;
pub mod sinkhorn;
pub mod nets;
pub mod envs;
pub mod planner;
pub mod data;
pub mod train_eval;
pub mod io;
pub mod experiments;
