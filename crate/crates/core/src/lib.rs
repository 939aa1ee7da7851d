pub mod answer;
pub mod datasets;
pub mod distill;
pub mod domain;
pub mod eval;
pub mod evolve;
pub mod extract;
pub mod gateway;
pub mod jsonish;
pub mod prompts;
pub mod retrieval;
pub mod synth;
pub mod temporal;
