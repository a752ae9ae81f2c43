//! Response generation: the deterministic template generator used for
//! desk-scale runs, prompt construction for the augmentation modes, and an
//! OpenAI-compatible chat-completion client.

use std::fmt;
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{cosine, embed_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::metrics::split_sentences;
use crate::model::{DialogHistory, Passage, PersonaSelection, PersonaSet};

pub const DEFAULT_CANDIDATES: usize = 5;

/// Everything a generator may condition on for one turn.
#[derive(Debug, Clone, Copy)]
pub struct GenerationInput<'a> {
    pub query: &'a str,
    pub history: &'a DialogHistory,
    pub knowledge: &'a [&'a Passage],
    pub selection: &'a PersonaSelection,
    pub personas: &'a PersonaSet,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    /// Up to `m` candidates; [`generate_candidates`] pads the rest.
    fn generate(&self, input: &GenerationInput<'_>, m: usize) -> Result<Vec<String>>;
}

/// Runs `generator` and returns exactly `m` candidates, padding by
/// repeating the first one and truncating any excess.
pub fn generate_candidates(generator: &dyn Generator, input: &GenerationInput<'_>, m: usize) -> Result<Vec<String>> {
    if m == 0 {
        return Err(Error::range("candidate count", "must be at least 1"));
    }
    let mut out = generator.generate(input, m)?;
    let Some(first) = out.first().cloned() else {
        return Err(Error::EmptyCandidateList);
    };
    out.truncate(m);
    out.resize(m, first);
    Ok(out)
}

/// Rewrites a first-person persona statement for the clause "that you ...".
pub fn second_person(persona: &str) -> String {
    let p = persona.trim().trim_end_matches(['.', '!', '?']).trim_end();
    let lower = p.to_lowercase();
    for (prefix, repl) in [("i am ", "are "), ("i'm ", "are "), ("i ", ""), ("my ", "your ")] {
        if lower.starts_with(prefix) {
            return format!("{repl}{}", &p[prefix.len()..]);
        }
    }
    p.to_string()
}

/// Appends the persona clause to `sentence`. With no personas the sentence
/// is returned trimmed and otherwise unchanged.
pub fn personalize(sentence: &str, personas: &[&str]) -> String {
    let s = sentence.trim();
    if personas.is_empty() {
        return s.to_string();
    }
    let clauses: Vec<String> = personas
        .iter()
        .map(|p| format!("that you {}", second_person(p)))
        .collect();
    format!(
        "{}, which fits {}.",
        s.trim_end_matches(['.', '!', '?']).trim_end(),
        clauses.join(" and ")
    )
}

/// Sentences of the passages ranked by cosine to the query, ties kept in
/// passage then position order.
pub fn rank_sentences(query: &str, passages: &[&Passage], provider: &dyn EmbeddingProvider) -> Result<Vec<String>> {
    let q = embed_text(query, provider)?;
    let mut scored = Vec::new();
    for p in passages {
        for s in split_sentences(&p.body) {
            let e = embed_text(s, provider)?;
            let score = if q.empty || e.empty {
                0.0
            } else {
                cosine(&q.vector, &e.vector)?
            };
            scored.push((score, s.trim().to_string()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, s)| s).collect())
}

/// Candidate `i` is the `i`-th best sentence of the top `top_passages`
/// passages, personalized with the selected personas; when sentences run
/// out the best sentence is repeated.
pub fn template_generate(
    query: &str,
    knowledge: &[&Passage],
    selection: &PersonaSelection,
    personas: &PersonaSet,
    provider: &dyn EmbeddingProvider,
    top_passages: usize,
    m: usize,
) -> Result<Vec<String>> {
    if m == 0 {
        return Err(Error::range("candidate count", "must be at least 1"));
    }
    if knowledge.is_empty() {
        return Err(Error::NoKnowledge);
    }
    let take = top_passages.max(1).min(knowledge.len());
    let sentences = rank_sentences(query, &knowledge[..take], provider)?;
    if sentences.is_empty() {
        return Err(Error::NoKnowledge);
    }
    let texts: Vec<&str> = selection
        .selected_indices
        .iter()
        .map(|&i| {
            personas.get(i).ok_or_else(|| {
                Error::range(
                    "selected persona index",
                    format!("{i} with {} personas", personas.len()),
                )
            })
        })
        .collect::<Result<_>>()?;
    Ok((0..m)
        .map(|i| personalize(sentences.get(i).unwrap_or(&sentences[0]), &texts))
        .collect())
}

pub struct TemplateGenerator<P> {
    provider: P,
    top_passages: usize,
}

impl<P: EmbeddingProvider> TemplateGenerator<P> {
    pub fn new(provider: P, top_passages: usize) -> Self {
        Self { provider, top_passages }
    }
}

impl<P: EmbeddingProvider> Generator for TemplateGenerator<P> {
    fn name(&self) -> &str {
        "template"
    }

    fn generate(&self, input: &GenerationInput<'_>, m: usize) -> Result<Vec<String>> {
        template_generate(
            input.query,
            input.knowledge,
            input.selection,
            input.personas,
            &self.provider,
            self.top_passages,
            m,
        )
    }
}

/// Tagged single-string input for an external sequence-to-sequence
/// backend: `<question> ... <knowledge> ... <history> ... <persona> ...`.
pub fn tagged_input(query: &str, history: &DialogHistory, knowledge: &[&Passage], personas: &[&str]) -> String {
    let mut out = format!("<question> {query}");
    out.push_str(" <knowledge>");
    for p in knowledge {
        out.push(' ');
        out.push_str(&p.body);
    }
    out.push_str(" <history>");
    let n = history.utterances.len().saturating_sub(1);
    for u in &history.utterances[..n] {
        out.push(' ');
        out.push_str(&u.question);
        out.push(' ');
        out.push_str(&u.response);
    }
    out.push_str(" <persona>");
    for p in personas {
        out.push(' ');
        out.push_str(p);
    }
    out
}

/// Augmentation prompting modes. M1 asks the chat model directly; M2, M3
/// and M4 add the engine response produced with all personas, the ground
/// personas and the selected personas respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptMode {
    M1,
    M2,
    M3,
    M4,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::M1, PromptMode::M2, PromptMode::M3, PromptMode::M4];

    pub fn needs_engine_response(self) -> bool {
        self != PromptMode::M1
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(PromptMode::M1),
            "M2" => Ok(PromptMode::M2),
            "M3" => Ok(PromptMode::M3),
            "M4" => Ok(PromptMode::M4),
            _ => Err(Error::Invalid(format!("unknown prompt mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

pub const PROMPT_TEMPLATE_VERSION: &str = "1";
const SYSTEM_PROMPT: &str =
    "You are a helpful assistant answering a traveler's questions about a landmark. Reply in one or two sentences.";
const HISTORY_HEADER: &str = "Conversation so far:";
const REFERENCE_PREFIX: &str = "Reference answer: ";
const QUESTION_PREFIX: &str = "Question: ";

/// SHA-256 over the template version and every fixed template string, so a
/// report can cite exactly which prompt wording produced it.
pub fn prompt_template_hash() -> String {
    let mut h = Sha256::new();
    for part in [
        PROMPT_TEMPLATE_VERSION,
        SYSTEM_PROMPT,
        HISTORY_HEADER,
        REFERENCE_PREFIX,
        QUESTION_PREFIX,
    ] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// `[system, user]` messages for `mode`. Earlier turns of `history` (all but
/// the last) are quoted in the user message; for M2 to M4 the engine
/// response appears as `Reference answer: <response>` before the question.
pub fn build_prompt(
    mode: PromptMode,
    query: &str,
    history: &DialogHistory,
    engine_response: Option<&str>,
) -> Result<Vec<ChatMessage>> {
    let reference = match (mode.needs_engine_response(), engine_response) {
        (true, Some(r)) => Some(r),
        (false, None) => None,
        (true, None) => {
            return Err(Error::ModeArgMismatch {
                mode: mode.to_string(),
                reason: "requires an engine response",
            })
        }
        (false, Some(_)) => {
            return Err(Error::ModeArgMismatch {
                mode: mode.to_string(),
                reason: "takes no engine response",
            })
        }
    };
    let mut user = String::new();
    let earlier = &history.utterances[..history.utterances.len().saturating_sub(1)];
    if !earlier.is_empty() {
        user.push_str(HISTORY_HEADER);
        user.push('\n');
        for u in earlier {
            user.push_str(&format!("User: {}\nAssistant: {}\n", u.question, u.response));
        }
        user.push('\n');
    }
    if let Some(r) = reference {
        user.push_str(REFERENCE_PREFIX);
        user.push_str(r);
        user.push_str("\n\n");
    }
    user.push_str(QUESTION_PREFIX);
    user.push_str(query);
    Ok(vec![
        ChatMessage::new("system", SYSTEM_PROMPT),
        ChatMessage::new("user", user),
    ])
}

pub const API_KEY_ENV: &str = "KPERM_LLM_API_KEY";
pub const ENDPOINT_ENV: &str = "KPERM_LLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            max_in_flight: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 8000,
        }
    }
}

impl ChatClientConfig {
    /// Applies the endpoint override from the environment, if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(e) = std::env::var(ENDPOINT_ENV) {
            if !e.trim().is_empty() {
                self.endpoint = e.trim().to_string();
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let url = url::Url::parse(&self.endpoint)
            .map_err(|e| Error::Config(format!("endpoint `{}` is not an absolute URL: {e}", self.endpoint)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(Error::Config(format!(
                "endpoint scheme `{}` is not http(s)",
                url.scheme()
            )));
        }
        if self.model.trim().is_empty() {
            return Err(Error::Config("model name is empty".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.trim_end_matches('/'))
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.backoff_max_ms))
    }
}

/// A chat-completion backend; the HTTP client or a test double.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

/// Request body for `messages` under `cfg`.
pub fn chat_request_body(cfg: &ChatClientConfig, messages: &[ChatMessage]) -> String {
    serde_json::to_string(&ChatRequest {
        model: &cfg.model,
        messages,
        temperature: cfg.temperature,
    })
    .expect("request serializes")
}

/// Content of the first choice of a chat-completion response.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::MalformedResponse(format!("invalid JSON: {e}")))?;
    v.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))
}

struct Gate {
    busy: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy >= self.cap {
            busy = self.freed.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.0.freed.notify_one();
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 512;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// Blocking HTTP chat client with retries on 429 and 5xx and a cap on
/// concurrent requests shared by every thread using the client.
pub struct HttpChatClient {
    cfg: ChatClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Gate,
}

impl HttpChatClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without authorization", cfg.api_key_env);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate {
            busy: Mutex::new(0),
            freed: Condvar::new(),
            cap: cfg.max_in_flight,
        };
        Ok(Self {
            cfg,
            agent,
            api_key,
            gate,
        })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.cfg
    }

    fn attempt(&self, url: &str, body: &str) -> Result<String> {
        let _slot = self.gate.acquire();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(t) => Error::Timeout(t.to_string()),
            other => Error::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("reading response body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(Error::Http {
                status,
                body: excerpt(&text),
            });
        }
        parse_chat_response(&text)
    }
}

fn retryable(e: &Error) -> bool {
    matches!(e, Error::Http { status, .. } if *status == 429 || *status >= 500)
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let url = self.cfg.completions_url();
        let body = chat_request_body(&self.cfg, messages);
        let mut attempt = 0;
        loop {
            match self.attempt(&url, &body) {
                Err(e) if retryable(&e) && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff(attempt);
                    log::warn!("chat request failed ({e}); retry {} in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Sends `messages` through `backend`.
pub fn llm_generate(backend: &dyn ChatBackend, messages: &[ChatMessage]) -> Result<String> {
    backend.complete(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::HashEmbedder;
    use crate::model::Utterance;

    fn passage(body: &str) -> Passage {
        Passage::new("p", "t", body).unwrap()
    }

    fn personas() -> PersonaSet {
        PersonaSet::new(vec!["I have been to New Hampshire.".into(), "I am a hiker".into()]).unwrap()
    }

    #[test]
    fn generic_branch_has_no_clause() {
        let e = HashEmbedder::new(32, 1).unwrap();
        let p = passage("The mountain is tall. It has a lake.");
        let c = template_generate("how tall", &[&p], &PersonaSelection::none(), &personas(), &e, 1, 3).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|s| !s.contains("which fits")));
    }

    #[test]
    fn persona_clause_appended() {
        let e = HashEmbedder::new(32, 1).unwrap();
        let p = passage("The mountain is tall. It has a lake.");
        let sel = PersonaSelection {
            selected_indices: vec![0],
            scores: vec![0.9, 0.1, 0.0],
        };
        let c = template_generate("how tall", &[&p], &sel, &personas(), &e, 1, 2).unwrap();
        assert!(c
            .iter()
            .all(|s| s.ends_with(", which fits that you have been to New Hampshire.")));
    }

    #[test]
    fn padding_repeats_best_sentence() {
        let e = HashEmbedder::new(32, 1).unwrap();
        let p = passage("The mountain is tall. It has a lake.");
        let c = template_generate("lake", &[&p], &PersonaSelection::none(), &personas(), &e, 1, 3).unwrap();
        assert_eq!(c[2], c[0]);
        assert_ne!(c[1], c[0]);
    }

    #[test]
    fn no_knowledge_errors() {
        let e = HashEmbedder::new(8, 1).unwrap();
        let r = template_generate("q", &[], &PersonaSelection::none(), &personas(), &e, 1, 2);
        assert!(matches!(r, Err(Error::NoKnowledge)));
    }

    #[test]
    fn second_person_forms() {
        assert_eq!(second_person("I am a hiker."), "are a hiker");
        assert_eq!(second_person("I'm tall"), "are tall");
        assert_eq!(second_person("I like tea"), "like tea");
        assert_eq!(second_person("My dog is old"), "your dog is old");
        assert_eq!(second_person("Hiking is fun"), "Hiking is fun");
    }

    #[test]
    fn prompt_shapes() {
        let h = DialogHistory::new("t", vec![Utterance::new("q", "", vec![], None).unwrap()]);
        let m1 = build_prompt(PromptMode::M1, "Where is it?", &h, None).unwrap();
        assert_eq!(m1.len(), 2);
        assert_eq!(m1[0].role, "system");
        assert_eq!(m1[1].content, "Question: Where is it?");
        let m4 = build_prompt(PromptMode::M4, "Where?", &h, Some("X")).unwrap();
        assert!(m4[1].content.contains("Reference answer: X"));
        assert!(matches!(
            build_prompt(PromptMode::M2, "q", &h, None),
            Err(Error::ModeArgMismatch { .. })
        ));
        assert!(matches!(
            build_prompt(PromptMode::M1, "q", &h, Some("x")),
            Err(Error::ModeArgMismatch { .. })
        ));
    }

    #[test]
    fn prompt_history_quoted() {
        let h = DialogHistory::new(
            "t",
            vec![
                Utterance::new("first?", "one", vec![], None).unwrap(),
                Utterance::new("second?", "", vec![], None).unwrap(),
            ],
        );
        let m = build_prompt(PromptMode::M1, "second?", &h, None).unwrap();
        assert!(m[1]
            .content
            .starts_with("Conversation so far:\nUser: first?\nAssistant: one\n"));
    }

    #[test]
    fn template_hash_is_stable_hex() {
        let h = prompt_template_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, prompt_template_hash());
    }

    #[test]
    fn response_parsing() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_chat_response(ok).unwrap(), "hi");
        assert!(matches!(parse_chat_response("nope"), Err(Error::MalformedResponse(_))));
        assert!(matches!(
            parse_chat_response(r#"{"choices":[]}"#),
            Err(Error::MalformedResponse(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ChatClientConfig::default().validate().is_ok());
        let bad = ChatClientConfig {
            endpoint: "/v1".into(),
            ..ChatClientConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let c = ChatClientConfig {
            endpoint: "http://h/v1/".into(),
            backoff_base_ms: 100,
            backoff_max_ms: 350,
            ..ChatClientConfig::default()
        };
        assert_eq!(c.completions_url(), "http://h/v1/chat/completions");
        assert_eq!(c.backoff(0), Duration::from_millis(100));
        assert_eq!(c.backoff(1), Duration::from_millis(200));
        assert_eq!(c.backoff(2), Duration::from_millis(350));
    }

    #[test]
    fn tagged_input_layout() {
        let h = DialogHistory::new(
            "t",
            vec![
                Utterance::new("a?", "b", vec![], None).unwrap(),
                Utterance::new("c?", "", vec![], None).unwrap(),
            ],
        );
        let p = passage("K.");
        assert_eq!(
            tagged_input("c?", &h, &[&p], &["I swim"]),
            "<question> c? <knowledge> K. <history> a? b <persona> I swim"
        );
    }

    struct Fixed(Vec<String>);
    impl Generator for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn generate(&self, _: &GenerationInput<'_>, _: usize) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn candidate_count_enforced() {
        let h = DialogHistory::default();
        let ps = PersonaSet::default();
        let sel = PersonaSelection::none();
        let input = GenerationInput {
            query: "q",
            history: &h,
            knowledge: &[],
            selection: &sel,
            personas: &ps,
        };
        let g = Fixed(vec!["a".into(), "b".into()]);
        assert_eq!(generate_candidates(&g, &input, 4).unwrap(), ["a", "b", "a", "a"]);
        assert_eq!(generate_candidates(&g, &input, 1).unwrap(), ["a"]);
        assert!(generate_candidates(&Fixed(vec![]), &input, 2).is_err());
    }
}
