//! Black-box model oracles.
//!
//! A [`ModelOracle`] wraps any [`Backend`] (an in-process model, an external
//! process speaking the NDJSON protocol over stdio or HTTP, or a prompted
//! adapter) and adds an invocation counter plus output-kind enforcement.

mod bag;
pub mod conformance;
mod http;
pub mod profile;
pub mod protocol;
mod stdio;
mod synthetic;

pub use bag::BagModel;
pub use http::{serve_http, HttpBackend};
pub use stdio::StdioBackend;
pub use synthetic::{
    ConstantModel, EchoModel, LexiconModel, MajorityTokenModel, Route, SimulatedLlm, SurrogateModel,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::label::{Example, Label, LabelKind, LabeledSet, SEP};
use crate::{Error, Result};

/// Per-message timeout for external sessions.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// A prediction function with an accessible output of one kind.
pub trait Backend: Send + Sync {
    fn kind(&self) -> LabelKind;

    /// `prompt` is `Some` only for backends that accept prompts.
    fn predict(&self, prompt: Option<&[u32]>, input: &[u32]) -> Result<Label>;

    fn accepts_prompt(&self) -> bool {
        false
    }
}

/// A backend plus identity and invocation accounting.
pub struct ModelOracle {
    id: String,
    kind: LabelKind,
    backend: Arc<dyn Backend>,
    calls: AtomicU64,
}

impl std::fmt::Debug for ModelOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelOracle")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("calls", &self.calls())
            .finish()
    }
}

impl ModelOracle {
    pub fn new(id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        Self {
            id: id.into(),
            kind: backend.kind(),
            backend,
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_backend<B: Backend + 'static>(id: impl Into<String>, backend: B) -> Self {
        Self::new(id, Arc::new(backend))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn accepts_prompt(&self) -> bool {
        self.backend.accepts_prompt()
    }

    /// One prediction; counts the call and checks the output kind.
    pub fn predict(&self, input: &[u32]) -> Result<Label> {
        self.predict_prompted(None, input)
    }

    pub(crate) fn predict_prompted(&self, prompt: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        if input.is_empty() {
            return Err(Error::Argument(format!("oracle `{}`: empty input", self.id)));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = self.backend.predict(prompt, input)?;
        if out.kind() != self.kind {
            return Err(Error::Protocol {
                msg: format!("oracle `{}` declared {} but produced {}", self.id, self.kind, out.kind()),
                line: String::new(),
            });
        }
        Ok(out)
    }

    /// Labels every text; any failure discards the partial set.
    pub fn predict_pool(&self, texts: &[Vec<u32>]) -> Result<LabeledSet> {
        let examples = texts
            .iter()
            .map(|t| Ok(Example::new(t.clone(), self.predict(t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet::new(examples))
    }
}

/// A prompt for a prompt-conditioned model.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub id: String,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub hint: String,
}

struct PromptedBackend {
    llm: Arc<ModelOracle>,
    prompt: Vec<u32>,
    max_len: usize,
}

impl Backend for PromptedBackend {
    fn kind(&self) -> LabelKind {
        self.llm.kind()
    }

    fn predict(&self, _: Option<&[u32]>, input: &[u32]) -> Result<Label> {
        if self.prompt.is_empty() {
            return self.llm.predict(input);
        }
        let (prompt, input) = compose(&self.prompt, input, self.max_len)?;
        if self.llm.accepts_prompt() {
            self.llm.predict_prompted(Some(&prompt), &input)
        } else {
            let joined: Vec<u32> = prompt.iter().copied().chain([SEP]).chain(input).collect();
            self.llm.predict(&joined)
        }
    }
}

/// Splits a request into prompt and input such that
/// `prompt ‖ separator ‖ input` fits in `max_len`, cutting the input's tail.
pub fn compose(prompt: &[u32], input: &[u32], max_len: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    if prompt.len() + 2 > max_len {
        return Err(Error::Argument(format!(
            "prompt of {} tokens leaves no room for input within {max_len}",
            prompt.len()
        )));
    }
    let room = max_len - prompt.len() - 1;
    Ok((prompt.to_vec(), input[..input.len().min(room)].to_vec()))
}

/// Treats `(prompt, llm)` as one model with id `llm#prompt`.
///
/// Prompts may use at most half of `max_len`. An empty prompt forwards each
/// input to the bare model unchanged.
pub fn as_prompted_model(llm: Arc<ModelOracle>, prompt: &PromptSpec, max_len: usize) -> Result<ModelOracle> {
    if prompt.tokens.len() > max_len / 2 {
        return Err(Error::Argument(format!(
            "prompt `{}` has {} tokens; at most {} allowed",
            prompt.id,
            prompt.tokens.len(),
            max_len / 2
        )));
    }
    let id = format!("{}#{}", llm.id(), prompt.id);
    Ok(ModelOracle::from_backend(
        id,
        PromptedBackend {
            llm,
            prompt: prompt.tokens.clone(),
            max_len,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Wrong;

    impl Backend for Wrong {
        fn kind(&self) -> LabelKind {
            LabelKind::Class
        }

        fn predict(&self, _: Option<&[u32]>, _: &[u32]) -> Result<Label> {
            Ok(Label::Scalar(1.0))
        }
    }

    #[test]
    fn counter_tracks_pool_size() {
        let o = ModelOracle::from_backend("m", MajorityTokenModel::new(8));
        let texts: Vec<Vec<u32>> = (0..37).map(|i| vec![3 + i % 5, 4]).collect();
        let set = o.predict_pool(&texts).unwrap();
        assert_eq!(set.len(), 37);
        assert_eq!(o.calls(), 37);
    }

    #[test]
    fn kind_drift_is_protocol_error() {
        let o = ModelOracle::from_backend("w", Wrong);
        assert!(matches!(o.predict(&[3]), Err(Error::Protocol { .. })));
    }

    #[test]
    fn composition_truncates_input_tail() {
        let (p, x) = compose(&[10, 11], &[3, 4, 5, 6, 7], 6).unwrap();
        assert_eq!(p, vec![10, 11]);
        assert_eq!(x, vec![3, 4, 5]);
        assert!(compose(&[1; 5], &[3], 6).is_err());
    }

    #[test]
    fn empty_prompt_forwards_bare() {
        let llm = Arc::new(ModelOracle::from_backend("llm", EchoModel::new(8)));
        let wrapped = as_prompted_model(llm.clone(), &PromptSpec { id: "none".into(), tokens: vec![], hint: String::new() }, 32).unwrap();
        assert_eq!(wrapped.id(), "llm#none");
        let x = vec![5, 6, 7];
        assert_eq!(wrapped.predict(&x).unwrap(), llm.predict(&x).unwrap());
    }

    #[test]
    fn prompt_without_prompt_field_is_joined() {
        let llm = Arc::new(ModelOracle::from_backend("echo", EchoModel::new(8)));
        let p = PromptSpec { id: "p".into(), tokens: vec![9, 9], hint: String::new() };
        let wrapped = as_prompted_model(llm, &p, 8).unwrap();
        assert_eq!(wrapped.predict(&[3, 4, 5, 6, 7, 8]).unwrap(), Label::Tokens(vec![9, 9, SEP, 3, 4, 5, 6, 7]));
    }

    #[test]
    fn overlong_prompt_rejected() {
        let llm = Arc::new(ModelOracle::from_backend("echo", EchoModel::new(8)));
        let p = PromptSpec { id: "p".into(), tokens: vec![4; 17], hint: String::new() };
        assert!(matches!(as_prompted_model(llm, &p, 32), Err(Error::Argument(_))));
    }
}
