//! Continual learning and unlearning of classification tasks with a
//! momentum teacher, a replay buffer, and a randomly initialized "bad"
//! teacher that steers forgotten inputs toward uninformative outputs.

pub mod buffer;
pub mod engine;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod streams;
pub mod tensor;
pub mod verify;
