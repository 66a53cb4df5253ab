pub mod analytics;
pub mod expr;
pub mod game;
pub mod model;
pub mod montecarlo;
pub mod stopping;
pub mod solver;
pub mod verify;
pub mod oracle;
pub mod io;
pub mod cli;
