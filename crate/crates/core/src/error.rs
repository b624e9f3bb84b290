//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Contract violations that a caller can
/// trigger with bad data come back as `Err`; internal logic bugs panic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("position regression in unified mode: {got} after {last}")]
    PositionRegression { last: i64, got: i64 },

    #[error("unknown round id {0}")]
    UnknownRound(u32),

    #[error("active view is stale (cache was modified since it was packed)")]
    StaleView,

    #[error("media already prefilled in this session")]
    MediaAlreadyPrefilled,

    #[error("no media prefilled in this session")]
    NoMedia,

    #[error("cache holds no visual entries")]
    NoVisualEntries,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
