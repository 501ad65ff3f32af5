//! Client side of the adapter protocol: drives an external model runtime
//! running as a child process over its stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use super::protocol::{Request, Response};
use super::{
    DecodingParams, FineTuneParams, FineTunedModel, Seq2SeqBackend, TextClassifier,
    TrainedClassifier,
};
use crate::corpus::{write_dataset, Dataset};
use crate::templates::{write_pairs, PromptPair};
use crate::{Error, Result};

struct Process {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Process {
    fn drop(&mut self) {
        // Closing stdin ends the server loop.
        self.stdin.take();
        let _ = self.child.wait();
    }
}

#[derive(Clone)]
struct Channel(Arc<Mutex<Process>>);

impl Channel {
    fn call(&self, req: &Request) -> Result<Response> {
        let mut proc = self
            .0
            .lock()
            .map_err(|_| Error::Backend("adapter channel poisoned".into()))?;
        let mut line = serde_json::to_vec(req)?;
        line.push(b'\n');
        let stdin = proc
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Backend("adapter stdin closed".into()))?;
        stdin
            .write_all(&line)
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Backend(format!("writing to adapter: {e}")))?;
        let mut reply = String::new();
        let n = proc
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("reading from adapter: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("adapter closed its output".into()));
        }
        let resp: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Backend(format!("malformed adapter reply: {e}")))?;
        resp.into_result()
    }
}

/// A sequence-to-sequence backend and classifier living in another process.
#[derive(Clone)]
pub struct ExternalBackend {
    command: String,
    channel: Channel,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("command", &self.command)
            .finish()
    }
}

impl ExternalBackend {
    /// Spawns `command` (whitespace-separated program and arguments).
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty external backend command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("spawning {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            command: command.to_string(),
            channel: Channel(Arc::new(Mutex::new(Process {
                child,
                stdin,
                stdout,
            }))),
        })
    }

    fn require_handle(resp: Response) -> Result<String> {
        resp.handle
            .ok_or_else(|| Error::Backend("adapter reply lacks a handle".into()))
    }
}

impl Seq2SeqBackend for ExternalBackend {
    fn model_id(&self) -> &str {
        &self.command
    }

    fn fine_tune(
        &self,
        pairs: &[PromptPair],
        params: &FineTuneParams,
    ) -> Result<Box<dyn FineTunedModel>> {
        let file = tempfile::Builder::new()
            .prefix("sta-pairs-")
            .suffix(".jsonl")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        write_pairs(file.path(), pairs)?;
        let resp = self.channel.call(&Request::Finetune {
            pairs_path: file.path().to_path_buf(),
            params: *params,
        })?;
        let handle = Self::require_handle(resp)?;
        Ok(Box::new(ExternalModel {
            fingerprint: format!("{}#{}", self.command, handle),
            handle,
            channel: self.channel.clone(),
        }))
    }
}

struct ExternalModel {
    fingerprint: String,
    handle: String,
    channel: Channel,
}

impl FineTunedModel for ExternalModel {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn sample(&self, prefix: &str, params: &DecodingParams, count: usize) -> Result<Vec<String>> {
        let resp = self.channel.call(&Request::Generate {
            handle: self.handle.clone(),
            prefix: prefix.to_string(),
            params: *params,
            count,
        })?;
        resp.texts
            .ok_or_else(|| Error::Backend("adapter reply lacks texts".into()))
    }

    fn log_prob(&self, source: &str, target: &str) -> Result<f64> {
        let resp = self.channel.call(&Request::Score {
            handle: self.handle.clone(),
            source: source.to_string(),
            target: target.to_string(),
        })?;
        resp.score
            .ok_or_else(|| Error::Backend("adapter reply lacks a score".into()))
    }
}

impl TextClassifier for ExternalBackend {
    fn name(&self) -> &str {
        &self.command
    }

    fn train(&self, d: &Dataset, params: &FineTuneParams) -> Result<Box<dyn TrainedClassifier>> {
        let file = tempfile::Builder::new()
            .prefix("sta-train-")
            .suffix(".jsonl")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        write_dataset(file.path(), d, None)?;
        let resp = self.channel.call(&Request::TrainClassifier {
            dataset_path: file.path().to_path_buf(),
            labels: d.labels().to_vec(),
            topic: d.topic().to_string(),
            params: *params,
        })?;
        Ok(Box::new(ExternalClassifier {
            handle: Self::require_handle(resp)?,
            labels: d.labels().to_vec(),
            channel: self.channel.clone(),
        }))
    }
}

struct ExternalClassifier {
    handle: String,
    labels: Vec<String>,
    channel: Channel,
}

impl TrainedClassifier for ExternalClassifier {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<String>> {
        let resp = self.channel.call(&Request::Classify {
            handle: self.handle.clone(),
            texts: texts.to_vec(),
        })?;
        let labels = resp
            .labels
            .ok_or_else(|| Error::Backend("adapter reply lacks labels".into()))?;
        if labels.len() != texts.len() {
            return Err(Error::Backend(format!(
                "adapter returned {} labels for {} texts",
                labels.len(),
                texts.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !self.labels.contains(l)) {
            return Err(Error::Backend(format!("adapter predicted unknown label {bad:?}")));
        }
        Ok(labels)
    }
}
