//! Line-delimited JSON protocol spoken across the adapter process boundary.
//!
//! Each request is one JSON object on one line, tagged by `op`:
//!
//! ```text
//! {"op":"finetune","pairs_path":"/tmp/p.jsonl","params":{...}}            -> {"ok":true,"handle":"m0"}
//! {"op":"generate","handle":"m0","prefix":"...","params":{...},"count":3} -> {"ok":true,"texts":[...]}
//! {"op":"score","handle":"m0","source":"...","target":"positive"}         -> {"ok":true,"score":-0.4}
//! {"op":"train_classifier","dataset_path":"...","labels":[...],"topic":"...","params":{...}}
//!                                                                          -> {"ok":true,"handle":"c0"}
//! {"op":"classify","handle":"c0","texts":[...]}                            -> {"ok":true,"labels":[...]}
//! ```
//!
//! Failures answer `{"ok":false,"error":"..."}` and leave the server running.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    fine_tune, generate, score_target, train_classifier, DecodingParams, FineTuneParams,
    FineTunedModel, Seq2SeqBackend, TextClassifier, TrainedClassifier,
};
use crate::corpus::{load_dataset_with_meta, DatasetMeta};
use crate::templates::read_pairs;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Finetune {
        pairs_path: PathBuf,
        params: FineTuneParams,
    },
    Generate {
        handle: String,
        prefix: String,
        params: DecodingParams,
        count: usize,
    },
    Score {
        handle: String,
        source: String,
        target: String,
    },
    TrainClassifier {
        dataset_path: PathBuf,
        labels: Vec<String>,
        topic: String,
        params: FineTuneParams,
    },
    Classify {
        handle: String,
        texts: Vec<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl Response {
    fn failure(err: impl ToString) -> Self {
        Self {
            ok: false,
            error: Some(err.to_string()),
            ..Self::default()
        }
    }

    fn success() -> Self {
        Self {
            ok: true,
            ..Self::default()
        }
    }

    /// Turns an `ok: false` response into an error.
    pub fn into_result(self) -> Result<Self> {
        if self.ok {
            Ok(self)
        } else {
            Err(Error::Backend(
                self.error.unwrap_or_else(|| "adapter reported failure".into()),
            ))
        }
    }
}

/// Serves requests from `input` until end of stream, answering on `output`.
pub fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    backend: &dyn Seq2SeqBackend,
    classifier: &dyn TextClassifier,
) -> Result<()> {
    let mut server = Server {
        backend,
        classifier,
        models: HashMap::new(),
        classifiers: HashMap::new(),
    };
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => server.handle(req).unwrap_or_else(Response::failure),
            Err(e) => Response::failure(format!("malformed request: {e}")),
        };
        serde_json::to_writer(&mut output, &response)?;
        output
            .write_all(b"\n")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

struct Server<'a> {
    backend: &'a dyn Seq2SeqBackend,
    classifier: &'a dyn TextClassifier,
    models: HashMap<String, Box<dyn FineTunedModel>>,
    classifiers: HashMap<String, Box<dyn TrainedClassifier>>,
}

impl Server<'_> {
    fn model(&self, handle: &str) -> Result<&dyn FineTunedModel> {
        self.models
            .get(handle)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Backend(format!("unknown handle {handle:?}")))
    }

    fn handle(&mut self, req: Request) -> Result<Response> {
        let mut resp = Response::success();
        match req {
            Request::Finetune { pairs_path, params } => {
                let pairs = read_pairs(&pairs_path)?;
                let model = fine_tune(self.backend, &pairs, &params)?;
                let id = format!("m{}", self.models.len());
                self.models.insert(id.clone(), model);
                resp.handle = Some(id);
            }
            Request::Generate {
                handle,
                prefix,
                params,
                count,
            } => {
                resp.texts = Some(generate(self.model(&handle)?, &prefix, &params, count)?);
            }
            Request::Score {
                handle,
                source,
                target,
            } => {
                resp.score = Some(score_target(self.model(&handle)?, &source, &target)?);
            }
            Request::TrainClassifier {
                dataset_path,
                labels,
                topic,
                params,
            } => {
                let meta = DatasetMeta {
                    topic: Some(topic),
                    labels: Some(labels),
                    ..DatasetMeta::default()
                };
                let d = load_dataset_with_meta(&dataset_path, &meta)?;
                let trained = train_classifier(self.classifier, &d, &params)?;
                let id = format!("c{}", self.classifiers.len());
                self.classifiers.insert(id.clone(), trained);
                resp.handle = Some(id);
            }
            Request::Classify { handle, texts } => {
                let c = self
                    .classifiers
                    .get(&handle)
                    .ok_or_else(|| Error::Backend(format!("unknown classifier {handle:?}")))?;
                resp.labels = Some(c.predict(&texts)?);
            }
        }
        Ok(resp)
    }
}
