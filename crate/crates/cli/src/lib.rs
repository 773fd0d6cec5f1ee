//! Scene files, bundled fixtures, SVG rendering and the command bodies
//! behind the `eshadow` binary.

pub mod commands;
pub mod fixtures;
pub mod render;
pub mod scene;
