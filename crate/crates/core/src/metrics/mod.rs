//! Objective metrics.
