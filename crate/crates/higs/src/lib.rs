//! Session service and command line front end for the scene engine.

pub mod service;
