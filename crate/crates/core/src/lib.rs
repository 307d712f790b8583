//! Compiler, functional simulator and memory model for an event-based CNN
//! accelerator that stores connectivity as one axon per connected pair of
//! feature-map fragments.

pub mod compiler;
pub mod memmodel;
pub mod nngraph;
pub mod runtime;
pub mod zoo;
