//! Bounded retry with exponential backoff, shared by the HTTP clients.

use std::thread::sleep;
use std::time::Duration;

use crate::error::{Error, Result};

pub(crate) enum Attempt<T> {
    Done(T),
    Retry(Error),
    Fatal(Error),
}

/// Run `op` up to `attempts` times, sleeping `base * 2^n` between tries.
pub(crate) fn retry_with_backoff<T>(
    attempts: u32,
    base: Duration,
    mut op: impl FnMut(u32) -> Attempt<T>,
) -> Result<T> {
    let mut last_err = None;
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            sleep(base * 2u32.saturating_pow(attempt - 1));
        }
        match op(attempt) {
            Attempt::Done(value) => return Ok(value),
            Attempt::Fatal(err) => return Err(err),
            Attempt::Retry(err) => last_err = Some(err),
        }
    }
    Err(last_err.expect("at least one attempt"))
}
