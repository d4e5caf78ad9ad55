//! Holds the `acceptance` test target; run it with
//! `cargo test -p owr-validation --test acceptance`.
