//! Synthetic advertising environment and the budgeted exploration/exploitation procedure.

mod env;
mod procedure;

pub use env::{generate_journeys, Environment, EnvironmentConfig, LoggingPolicy, SeparableEnv};
pub use procedure::{
    run_procedure, Agent, ModelAgent, Phase, Procedure, ProcedureConfig, RunReport, RunState, StopReason,
    TraceRow, DEFAULT_MEMORY_LEN,
};
