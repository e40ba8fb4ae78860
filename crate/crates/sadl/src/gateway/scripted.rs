//! Scripted replay backend: pops canned replies in order, for tests and
//! offline trace replay.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::gateway::{ModelBackend, ModelReply, ModelRequest};

pub struct ScriptedBackend {
    id: String,
    script_len: usize,
    replies: Mutex<std::collections::VecDeque<String>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        let replies: std::collections::VecDeque<String> =
            replies.into_iter().map(Into::into).collect();
        ScriptedBackend {
            id: "scripted".to_string(),
            script_len: replies.len(),
            replies: Mutex::new(replies),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("script mutex poisoned").len()
    }

    fn pop(&self) -> Result<ModelReply> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self
            .replies
            .lock()
            .expect("script mutex poisoned")
            .pop_front();
        match next {
            Some(raw_text) => Ok(ModelReply {
                raw_text,
                latency: Duration::ZERO,
                backend_id: self.id.clone(),
            }),
            None => Err(Error::ScriptExhausted(self.script_len)),
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&self, request: &ModelRequest) -> Result<ModelReply> {
        request.validate()?;
        self.pop()
    }

    fn complete(&self, _prompt: &str, _request_id: &str) -> Result<ModelReply> {
        self.pop()
    }
}
