//! Background-prompt generation with LLM self-refinement.
//!
//! A candidate background is drawn from the LLM with the generation template,
//! then scored by the LLM with the refinement template. The first candidate
//! whose score reaches the threshold is accepted; when the iteration cap runs
//! out the best-scoring candidate is returned and flagged `best_effort`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::http::{Endpoint, JsonClient};
use crate::manifest::ClassLabel;
use crate::seed::{call_seed, stable_hash};
use crate::{Error, Result};

pub const CATEGORY_PLACEHOLDER: &str = "{category}";
pub const CANDIDATE_PLACEHOLDER: &str = "{candidate}";

/// Appended to every refinement command; fixes the wire format of the score.
pub const SCORE_INSTRUCTION: &str = "Answer with exactly one line containing only a JSON object of the form {\"score\": x}, where x is a number between 0 and 1.";

pub const DEFAULT_MAX_ITERS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub generate: String,
    pub refine: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generate: "You write prompts for a text-to-image model. Describe one realistic \
                       background scene in which a {category} could naturally appear. \
                       Reply with a single short phrase describing only the background."
                .into(),
            refine: "You review background prompts for a text-to-image model. Rate how \
                     reasonable, coherent and specific the background \"{candidate}\" is \
                     for a photo of a {category}. Penalize backgrounds that are generic, \
                     contradictory or unrelated to the {category}."
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<()> {
        if !self.generate.contains(CATEGORY_PLACEHOLDER) {
            return Err(Error::Template(
                "generation template lacks {category}".into(),
            ));
        }
        for p in [CATEGORY_PLACEHOLDER, CANDIDATE_PLACEHOLDER] {
            if !self.refine.contains(p) {
                return Err(Error::Template(format!("refinement template lacks {p}")));
            }
        }
        Ok(())
    }
}

pub fn render_initial_command(templates: &PromptTemplates, category: &str) -> Result<String> {
    if !templates.generate.contains(CATEGORY_PLACEHOLDER) {
        return Err(Error::Template(
            "generation template lacks {category}".into(),
        ));
    }
    let out = templates.generate.replace(CATEGORY_PLACEHOLDER, category);
    if out.trim().is_empty() {
        return Err(Error::Template("rendered generation command is empty".into()));
    }
    Ok(out)
}

pub fn render_refine_command(
    templates: &PromptTemplates,
    category: &str,
    candidate: &str,
) -> Result<String> {
    if candidate.trim().is_empty() {
        return Err(Error::Template("candidate prompt is empty".into()));
    }
    for p in [CATEGORY_PLACEHOLDER, CANDIDATE_PLACEHOLDER] {
        if !templates.refine.contains(p) {
            return Err(Error::Template(format!("refinement template lacks {p}")));
        }
    }
    let mut out = templates
        .refine
        .replace(CATEGORY_PLACEHOLDER, category)
        .replace(CANDIDATE_PLACEHOLDER, candidate);
    if !templates.refine.contains(SCORE_INSTRUCTION) {
        out.push('\n');
        out.push_str(SCORE_INSTRUCTION);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ScoreObject {
    score: f64,
}

/// Extracts the score from the first `{"score": x}` object in the response.
/// Text before and after the object is ignored. Values outside [0,1] are
/// rejected rather than clamped.
pub fn parse_score(response: &str) -> Result<f64> {
    for (i, _) in response.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&response[i..]).into_iter::<ScoreObject>();
        if let Some(Ok(obj)) = stream.next() {
            if !obj.score.is_finite() || !(0.0..=1.0).contains(&obj.score) {
                return Err(Error::ScoreParse(format!(
                    "score {} outside [0,1]",
                    obj.score
                )));
            }
            return Ok(obj.score);
        }
    }
    Err(Error::ScoreParse(format!(
        "no {{\"score\": x}} object in response {:?}",
        truncate(response, 80)
    )))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Chat-completion backend. Implementations must tolerate concurrent calls;
/// mocks must be deterministic in `(instruction, seed)`.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, instruction: &str, seed: u64) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAttempt {
    pub candidate: String,
    /// `None` when the score reply could not be parsed.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub text: String,
    pub category: String,
    pub score: f64,
    pub iterations: u32,
    pub history: Vec<PromptAttempt>,
    pub best_effort: bool,
}

pub fn self_refine(
    backend: &dyn LlmBackend,
    templates: &PromptTemplates,
    category: &ClassLabel,
    epsilon: f64,
    max_iters: u32,
    seed: u64,
) -> Result<RefinedPrompt> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0,1]"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let initial = render_initial_command(templates, &category.name)?;
    let mut history = Vec::new();
    for i in 0..max_iters {
        let candidate = backend
            .complete(&initial, call_seed(seed, 2 * i))?
            .trim()
            .to_string();
        let score = if candidate.is_empty() {
            None
        } else {
            let refine = render_refine_command(templates, &category.name, &candidate)?;
            let reply = backend.complete(&refine, call_seed(seed, 2 * i + 1))?;
            match parse_score(&reply) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::debug!("iteration {i} for {}: {e}", category.name);
                    None
                }
            }
        };
        history.push(PromptAttempt { candidate, score });
        if let Some(s) = score.filter(|&s| s >= epsilon) {
            let text = history.last().expect("just pushed").candidate.clone();
            return Ok(RefinedPrompt {
                text,
                category: category.name.clone(),
                score: s,
                iterations: history.len() as u32,
                history,
                best_effort: false,
            });
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in history.iter().enumerate() {
        if let Some(s) = a.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let (idx, score) = best.ok_or_else(|| {
        Error::ScoreParse(format!(
            "no candidate for {} could be scored in {max_iters} iterations",
            category.name
        ))
    })?;
    Ok(RefinedPrompt {
        text: history[idx].candidate.clone(),
        category: category.name.clone(),
        score,
        iterations: history.len() as u32,
        history,
        best_effort: true,
    })
}

fn is_score_request(instruction: &str) -> bool {
    instruction.contains(SCORE_INSTRUCTION)
}

/// Replays a fixed score sequence. Generation requests return
/// `"candidate #n"`; the n-th score request returns the n-th scripted reply
/// (the last one repeats once the script runs out).
#[derive(Debug)]
pub struct ScriptedLlm {
    replies: Vec<String>,
    generate_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

impl ScriptedLlm {
    pub fn with_scores(scores: &[f64]) -> Self {
        Self::with_replies(scores.iter().map(|s| format!("{{\"score\": {s}}}")).collect())
    }

    pub fn with_replies(replies: Vec<String>) -> Self {
        assert!(!replies.is_empty(), "script needs at least one reply");
        Self {
            replies,
            generate_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for ScriptedLlm {
    fn complete(&self, instruction: &str, _seed: u64) -> Result<String> {
        if is_score_request(instruction) {
            let n = self.score_calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[n.min(self.replies.len() - 1)].clone())
        } else {
            let n = self.generate_calls.fetch_add(1, Ordering::SeqCst);
            Ok(format!("candidate #{}", n + 1))
        }
    }
}

const MOCK_BACKGROUNDS: [&str; 12] = [
    "a sunlit meadow with scattered wildflowers",
    "a quiet city street after light rain",
    "a sandy beach under a clear afternoon sky",
    "a snowy mountain trail at dawn",
    "a cozy living room with warm lamplight",
    "an open airfield under drifting clouds",
    "a riverside park in early autumn",
    "a busy market square at noon",
    "a misty forest clearing in the morning",
    "a harbor pier at golden hour",
    "a suburban backyard with a wooden fence",
    "a desert road beneath a pale blue sky",
];

/// Deterministic offline stand-in for a chat model. Candidates come from a
/// fixed list of backgrounds; scores are spread over [0.80, 1.00].
#[derive(Debug, Default)]
pub struct MockLlm;

impl LlmBackend for MockLlm {
    fn complete(&self, instruction: &str, seed: u64) -> Result<String> {
        let h = stable_hash(&[instruction.as_bytes(), &seed.to_le_bytes()]);
        if is_score_request(instruction) {
            let unit = (h % 1_000_001) as f64 / 1_000_000.0;
            Ok(format!("{{\"score\": {:.4}}}", 0.8 + 0.2 * unit))
        } else {
            Ok(MOCK_BACKGROUNDS[(h % MOCK_BACKGROUNDS.len() as u64) as usize].to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Wire request for the chat endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

impl ChatRequest {
    pub fn single_turn(model: &str, instruction: &str, seed: u64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: instruction.to_string(),
            }],
            seed: Some(seed),
        }
    }
}

pub struct HttpLlm {
    model: String,
    client: JsonClient,
    transcript: Option<Mutex<std::fs::File>>,
}

impl HttpLlm {
    pub fn new(endpoint: Endpoint, model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            client: JsonClient::new("llm", endpoint),
            transcript: None,
        }
    }

    /// Appends every exchange as one JSON line to `path`.
    pub fn with_transcript(mut self, path: &std::path::Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.transcript = Some(Mutex::new(f));
        Ok(self)
    }
}

impl LlmBackend for HttpLlm {
    fn complete(&self, instruction: &str, seed: u64) -> Result<String> {
        let req = ChatRequest::single_turn(&self.model, instruction, seed);
        let resp: ChatResponse = self.client.post(&req)?;
        if let Some(t) = &self.transcript {
            use std::io::Write;
            let line = serde_json::json!({"request": req, "response": resp});
            let mut f = t.lock().expect("transcript lock");
            let _ = writeln!(f, "{line}");
        }
        Ok(resp.content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(name: &str) -> ClassLabel {
        ClassLabel {
            id: 1,
            name: name.into(),
        }
    }

    fn simple() -> PromptTemplates {
        PromptTemplates {
            generate: "Give one background scene for a {category} photo".into(),
            refine: "Score background {candidate} for {category}".into(),
        }
    }

    #[test]
    fn initial_command_substitutes_category() {
        assert_eq!(
            render_initial_command(&simple(), "airplane").unwrap(),
            "Give one background scene for a airplane photo"
        );
        assert_eq!(
            render_initial_command(&simple(), "dining table").unwrap(),
            "Give one background scene for a dining table photo"
        );
    }

    #[test]
    fn initial_command_requires_placeholder() {
        let t = PromptTemplates {
            generate: "no placeholder".into(),
            ..simple()
        };
        assert!(matches!(
            render_initial_command(&t, "cat"),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn refine_command_substitutes_both_and_appends_suffix_once() {
        let out = render_refine_command(&simple(), "cat", "on a sunny windowsill").unwrap();
        assert!(out.starts_with("Score background on a sunny windowsill for cat"));
        assert_eq!(out.matches(SCORE_INSTRUCTION).count(), 1);

        let with_suffix = PromptTemplates {
            refine: format!("{} {SCORE_INSTRUCTION}", simple().refine),
            ..simple()
        };
        let out = render_refine_command(&with_suffix, "cat", "x").unwrap();
        assert_eq!(out.matches(SCORE_INSTRUCTION).count(), 1);
    }

    #[test]
    fn refine_command_rejects_empty_candidate_and_missing_placeholder() {
        assert!(render_refine_command(&simple(), "cat", "  ").is_err());
        let t = PromptTemplates {
            refine: "only {category}".into(),
            ..simple()
        };
        assert!(render_refine_command(&t, "cat", "x").is_err());
    }

    #[test]
    fn default_templates_are_valid() {
        PromptTemplates::default().validate().unwrap();
    }

    #[test]
    fn parse_score_cases() {
        assert_eq!(parse_score(r#"{"score": 0.92}"#).unwrap(), 0.92);
        assert_eq!(parse_score(r#"Sure! {"score": 0.5} because…"#).unwrap(), 0.5);
        assert!(matches!(
            parse_score(r#"{"score": 1.7}"#),
            Err(Error::ScoreParse(m)) if m.contains("outside")
        ));
        assert!(parse_score("I'd give it 0.9").is_err());
        assert!(parse_score(r#"{"rating": 0.9}"#).is_err());
        assert_eq!(parse_score(r#"{ bad {"score": 1}"#).unwrap(), 1.0);
    }

    #[test]
    fn accepts_second_candidate() {
        let llm = ScriptedLlm::with_scores(&[0.5, 0.95]);
        let p = self_refine(&llm, &simple(), &label("cat"), 0.9, 8, 1).unwrap();
        assert_eq!(p.text, "candidate #2");
        assert_eq!(p.iterations, 2);
        assert!(!p.best_effort);
        assert_eq!(p.score, 0.95);
        assert_eq!(llm.generate_calls(), 2);
        assert_eq!(llm.score_calls(), 2);
    }

    #[test]
    fn accepts_first_candidate() {
        let llm = ScriptedLlm::with_scores(&[0.95]);
        let p = self_refine(&llm, &simple(), &label("cat"), 0.9, 8, 1).unwrap();
        assert_eq!((p.text.as_str(), p.iterations), ("candidate #1", 1));
    }

    #[test]
    fn exhaustion_returns_best_effort() {
        let llm = ScriptedLlm::with_scores(&[0.3, 0.4, 0.2]);
        let p = self_refine(&llm, &simple(), &label("cat"), 0.9, 3, 1).unwrap();
        assert!(p.best_effort);
        assert_eq!(p.text, "candidate #2");
        assert_eq!(p.score, 0.4);
        assert_eq!(p.iterations, 3);
        let scores: Vec<_> = p.history.iter().map(|a| a.score).collect();
        assert_eq!(scores, vec![Some(0.3), Some(0.4), Some(0.2)]);
    }

    #[test]
    fn parse_failure_is_a_failed_iteration() {
        let llm = ScriptedLlm::with_replies(vec!["no idea".into(), r#"{"score": 0.91}"#.into()]);
        let p = self_refine(&llm, &simple(), &label("cat"), 0.9, 4, 1).unwrap();
        assert_eq!(p.iterations, 2);
        assert_eq!(p.history[0].score, None);
        assert_eq!(p.text, "candidate #2");
    }

    #[test]
    fn threshold_equal_to_score_is_accepted() {
        let llm = ScriptedLlm::with_scores(&[0.9]);
        let p = self_refine(&llm, &simple(), &label("cat"), 0.9, 2, 1).unwrap();
        assert!(!p.best_effort);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let llm = ScriptedLlm::with_scores(&[0.9]);
        assert!(self_refine(&llm, &simple(), &label("cat"), 0.0, 2, 1).is_err());
        assert!(self_refine(&llm, &simple(), &label("cat"), 0.9, 0, 1).is_err());
    }

    #[test]
    fn mock_llm_is_deterministic() {
        let t = PromptTemplates::default();
        let a = self_refine(&MockLlm, &t, &label("dog"), 0.9, 8, 99).unwrap();
        let b = self_refine(&MockLlm, &t, &label("dog"), 0.9, 8, 99).unwrap();
        assert_eq!(a, b);
        for h in &a.history {
            let s = h.score.unwrap();
            assert!((0.8..=1.0).contains(&s));
        }
    }

    #[test]
    fn chat_request_wire_shape() {
        let req = ChatRequest::single_turn("gpt-4o", "hello", 7);
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"model":"gpt-4o","messages":[{"role":"user","content":"hello"}],"seed":7}"#
        );
    }
}
