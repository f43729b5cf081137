//! Dynamic depth routing for multi-task soft actor-critic.
//!
//! A shared pool of modules is composed per sample along paths chosen by
//! learned routing networks. Paths may skip modules, so different tasks run
//! through networks of different depths.

pub mod cli;
pub mod diffcore;
pub mod envsuite;
pub mod modnet;
pub mod routing;
pub mod sacmt;
