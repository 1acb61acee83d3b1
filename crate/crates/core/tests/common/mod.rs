//! Helpers shared by several test targets; each target uses a subset.
#![allow(dead_code)]

pub mod buffer_model;
pub mod gradcheck;
