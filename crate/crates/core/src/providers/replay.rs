use std::fs;
use std::path::{Path, PathBuf};

use super::{estimate_tokens, Completion, LlmProvider, LlmRequest};
use crate::error::{Error, Result};
use crate::model::write_atomic;

fn fixture_path(dir: &Path, req: &LlmRequest) -> PathBuf {
    dir.join(format!("{}.txt", req.hash()))
}

/// Serves completions from `<dir>/<request hash>.txt`.
#[derive(Debug, Clone)]
pub struct ReplayLlm {
    dir: PathBuf,
}

impl ReplayLlm {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl LlmProvider for ReplayLlm {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        let path = fixture_path(&self.dir, req);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::UnrecordedRequest { hash: req.hash() })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(Completion {
            prompt_tokens: estimate_tokens(&req.system_prompt) + estimate_tokens(&req.user_content),
            completion_tokens: estimate_tokens(&text),
            text,
        })
    }
}

/// Forwards to an inner provider and records every successful completion
/// as a replay fixture.
pub struct RecordingLlm<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: LlmProvider> RecordingLlm<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<P: LlmProvider> LlmProvider for RecordingLlm<P> {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        let c = self.inner.generate(req)?;
        write_atomic(&fixture_path(&self.dir, req), |w| w.write_all(c.text.as_bytes()))?;
        Ok(c)
    }
}
