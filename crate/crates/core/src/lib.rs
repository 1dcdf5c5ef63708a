pub mod agent;
pub mod env;
pub mod evaluation;
pub mod grounding;
pub mod kernel;
pub mod textgame;
pub mod training;
