pub mod answer;
pub mod gateway;
pub mod interventions;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod segment;
pub mod tasks;
