//! Acceptance checks for `probe-density` live in `tests/acceptance.rs`.
