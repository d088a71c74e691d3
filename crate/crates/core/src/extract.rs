//! Knowledge-graph construction from a language model.
//!
//! Each vocabulary term is rendered into a structured prompt, sent to a
//! completion provider (a live chat-completion endpoint or a directory of
//! recorded fixtures), and the answer is parsed and validated as a graph
//! entry. Invalid answers are re-prompted with the validation error attached,
//! at most `max_retries` times per term.

use std::path::{Path, PathBuf};
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::pckg::{Pckg, PckgEntry, CATEGORY, FIELDS};

pub const TEMPLATE_ID: &str = "pckg-prompt-v1";

/// Environment variable read for the live provider's bearer token unless
/// the configuration names another.
pub const DEFAULT_API_KEY_ENV: &str = "PHYSPRIOR_LLM_API_KEY";

const TEMPLATE_V1: &str = r#"You are a remote-sensing scientist compiling physical priors for land-cover categories.

Category phrase: "{vocab}"

Work through these steps:
1. Parse the semantic structure of the category phrase: name the target object and every modifier, and say how each modifier changes the physical appearance.
2. Map the phrase to one coarse physical class (for example vegetation, water, road, building, bare land, snow/ice).
3. Infer plausible closed intervals [lo, hi] for three physical variables:
   - NDVI (unitless, both bounds within [-1.00, 1.00]),
   - DEM elevation in meters,
   - SAR backscatter in dB.
   Write every bound with exactly two decimal places and keep lo <= hi.
4. Justify every interval with step-by-step reasoning.

Answer with one JSON object and nothing else. Use exactly these fields:
{fields}
"Category" must repeat the category phrase verbatim. The three range fields are two-element numeric arrays [lo, hi]; every other field is a string.
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: String,
    pub required_fields: Vec<String>,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            template_id: TEMPLATE_ID.into(),
            required_fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn build_prompt(vocab: &str, spec: &PromptSpec) -> Result<String> {
    let vocab = vocab.trim();
    if vocab.is_empty() {
        return Err(Error::Input("vocabulary term is empty".into()));
    }
    if spec.template_id != TEMPLATE_ID {
        return Err(Error::Config(format!("unknown prompt template {:?}", spec.template_id)));
    }
    let fields = spec
        .required_fields
        .iter()
        .map(|f| format!("  \"{f}\""))
        .collect::<Vec<_>>()
        .join(",\n");
    Ok(TEMPLATE_V1
        .replace("{vocab}", vocab)
        .replace("{fields}", &format!("[\n{fields}\n]")))
}

fn repair_prompt(base: &str, raw: &str, error: &Error) -> String {
    format!(
        "{base}\nYour previous answer was rejected: {error}.\nPrevious answer:\n{raw}\nReturn a corrected JSON object only.\n"
    )
}

/// Source of model completions.
pub trait CompletionProvider: Sync {
    /// Returns the raw text answer to `prompt` for vocabulary term `term`.
    /// `attempt` counts from 1.
    fn complete(&self, term: &str, prompt: &str, attempt: u32) -> Result<String>;
}

const FILENAME_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

/// Fixture file name for a vocabulary term.
pub fn fixture_file_name(term: &str) -> String {
    format!("{}.json", utf8_percent_encode(term, FILENAME_SET))
}

/// Replays recorded answers, one file per term; never touches the network.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dir: PathBuf,
}

impl FixtureProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, term: &str) -> PathBuf {
        self.dir.join(fixture_file_name(term))
    }
}

impl CompletionProvider for FixtureProvider {
    fn complete(&self, term: &str, _prompt: &str, _attempt: u32) -> Result<String> {
        let path = self.path_for(term);
        std::fs::read_to_string(&path)
            .map_err(|e| Error::Transport(format!("fixture {}: {e}", path.display())))
    }
}

/// Chat-completion style HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.to_owned(),
            model: model.to_owned(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, _term: &str, prompt: &str, _attempt: u32) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": "You answer with strict JSON."},
                {"role": "user", "content": prompt},
            ],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let value: Value = resp
            .into_json()
            .map_err(|e| Error::Transport(format!("unreadable response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Live,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: Option<String>,
    pub fixture_dir: Option<PathBuf>,
    pub model: String,
    pub api_key_env: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    /// Terms extracted concurrently.
    pub parallelism: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Fixture,
            endpoint: None,
            fixture_dir: None,
            model: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            request_timeout_secs: 60,
            max_retries: 2,
            parallelism: 1,
        }
    }
}

impl ProviderConfig {
    pub fn fixture(dir: impl AsRef<Path>) -> Self {
        Self {
            mode: ProviderMode::Fixture,
            fixture_dir: Some(dir.as_ref().to_path_buf()),
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<Box<dyn CompletionProvider>> {
        match self.mode {
            ProviderMode::Fixture => {
                let dir = self
                    .fixture_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("fixture mode needs fixture_dir".into()))?;
                Ok(Box::new(FixtureProvider::new(dir)))
            }
            ProviderMode::Live => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::Config("live mode needs an endpoint".into()))?;
                let key = std::env::var(&self.api_key_env).ok();
                Ok(Box::new(HttpProvider::new(
                    endpoint,
                    &self.model,
                    key,
                    Duration::from_secs(self.request_timeout_secs),
                )))
            }
        }
    }
}

/// Pulls the JSON object out of a model answer (tolerating prose or code
/// fences around it) and validates it as an entry for `term`.
pub fn parse_response(term: &str, raw: &str) -> Result<PckgEntry> {
    let (start, end) = match (raw.find('{'), raw.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "answer contains no JSON object".into(),
            })
        }
    };
    let value: Value = serde_json::from_str(&raw[start..=end]).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut entry = PckgEntry::from_json(&value)?;
    if !entry.category.trim().eq_ignore_ascii_case(term.trim()) {
        return Err(Error::validation(
            &entry.category,
            CATEGORY,
            crate::error::ValidationKind::CategoryMismatch,
        ));
    }
    entry.category = term.trim().to_owned();
    Ok(entry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TermStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermReport {
    pub term: String,
    pub status: TermStatus,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every answer that failed validation, in attempt order.
    pub raw_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub template_id: String,
    pub terms: Vec<TermReport>,
}

impl ExtractionReport {
    pub fn failures(&self) -> impl Iterator<Item = &TermReport> {
        self.terms.iter().filter(|t| t.status == TermStatus::Failed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct Extractor {
    spec: PromptSpec,
    provider: Box<dyn CompletionProvider>,
    max_retries: u32,
    parallelism: usize,
}

impl Extractor {
    pub fn new(provider: Box<dyn CompletionProvider>, max_retries: u32, parallelism: usize) -> Self {
        Self {
            spec: PromptSpec::default(),
            provider,
            max_retries,
            parallelism: parallelism.max(1),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self> {
        Ok(Self::new(config.build()?, config.max_retries, config.parallelism))
    }

    pub fn with_spec(mut self, spec: PromptSpec) -> Self {
        self.spec = spec;
        self
    }

    fn run_term(&self, term: &str) -> (Option<PckgEntry>, TermReport) {
        let mut report = TermReport {
            term: term.to_owned(),
            status: TermStatus::Failed,
            attempts: 0,
            error_class: None,
            error: None,
            raw_responses: Vec::new(),
        };
        let base = match build_prompt(term, &self.spec) {
            Ok(p) => p,
            Err(e) => {
                report.error_class = Some(e.class().into());
                report.error = Some(e.to_string());
                return (None, report);
            }
        };
        let mut prompt = base.clone();
        let mut last_err = None;
        for attempt in 1..=self.max_retries + 1 {
            report.attempts = attempt;
            let raw = match self.provider.complete(term, &prompt, attempt) {
                Ok(raw) => raw,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            match parse_response(term, &raw) {
                Ok(entry) => {
                    report.status = TermStatus::Ok;
                    return (Some(entry), report);
                }
                Err(e) => {
                    prompt = repair_prompt(&base, &raw, &e);
                    report.raw_responses.push(raw);
                    last_err = Some(e);
                }
            }
        }
        let err = last_err.expect("at least one attempt ran");
        let class = match err {
            Error::Transport(_) => "transport",
            _ => "extraction",
        };
        report.error_class = Some(class.into());
        report.error = Some(err.to_string());
        (None, report)
    }

    /// Extracts a single entry, failing with a transport or extraction error.
    pub fn extract_entry(&self, term: &str) -> Result<PckgEntry> {
        if term.trim().is_empty() {
            return Err(Error::Input("vocabulary term is empty".into()));
        }
        let (entry, report) = self.run_term(term);
        match entry {
            Some(e) => Ok(e),
            None if report.error_class.as_deref() == Some("transport") => {
                Err(Error::Transport(report.error.unwrap_or_default()))
            }
            None => Err(Error::Extraction {
                term: term.to_owned(),
                attempts: report.attempts,
                reason: report.error.unwrap_or_default(),
                raw: report.raw_responses.last().cloned().unwrap_or_default(),
            }),
        }
    }

    /// Runs every term and returns per-term results in input order.
    pub fn extract_all(&self, vocab: &[String]) -> Result<(Vec<Option<PckgEntry>>, ExtractionReport)> {
        if vocab.is_empty() {
            return Err(Error::Input("vocabulary list is empty".into()));
        }
        for (k, t) in vocab.iter().enumerate() {
            if vocab[..k].contains(t) {
                return Err(Error::Input(format!("duplicate vocabulary term {t:?}")));
            }
        }
        let workers = self.parallelism.min(vocab.len());
        let mut results: Vec<Option<(Option<PckgEntry>, TermReport)>> = vec![None; vocab.len()];
        if workers == 1 {
            for (slot, t) in results.iter_mut().zip(vocab) {
                *slot = Some(self.run_term(t));
            }
        } else {
            let done = std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        s.spawn(move || {
                            (w..vocab.len())
                                .step_by(workers)
                                .map(|k| (k, self.run_term(&vocab[k])))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("extraction worker panicked"))
                    .collect::<Vec<_>>()
            });
            for (k, r) in done {
                results[k] = Some(r);
            }
        }
        let mut entries = Vec::with_capacity(vocab.len());
        let mut terms = Vec::with_capacity(vocab.len());
        for r in results {
            let (e, rep) = r.expect("every term ran");
            entries.push(e);
            terms.push(rep);
        }
        Ok((
            entries,
            ExtractionReport {
                template_id: self.spec.template_id.clone(),
                terms,
            },
        ))
    }

    /// Builds a graph from every term that extracted cleanly.
    pub fn extract_graph(&self, vocab: &[String]) -> Result<(Pckg, ExtractionReport)> {
        let (entries, report) = self.extract_all(vocab)?;
        let ok: Vec<PckgEntry> = entries.into_iter().flatten().collect();
        if ok.is_empty() {
            return Err(Error::EmptyGraph {
                failures: report.terms.len(),
            });
        }
        Ok((Pckg::new(ok)?, report))
    }
}
