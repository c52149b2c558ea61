//! Hosts the `acceptance` test target; the crate itself exports nothing.
