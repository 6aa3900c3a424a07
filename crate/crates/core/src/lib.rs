pub mod agent;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod envmemory;
pub mod io;
pub mod epm;
pub mod localstate;
pub mod numgrad;
pub mod observation;
pub mod pretrain;
pub mod room;
pub mod viz;
pub mod worldgen;
