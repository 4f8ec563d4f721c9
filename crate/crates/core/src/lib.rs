pub mod bpu;
pub mod config;
pub mod cpu;
pub mod isa;
pub mod memsys;
pub mod safespec;
pub mod telemetry;
pub mod workloads;
pub mod attacks;
pub mod cli;
