//! Translation backends used for translate-train and translate-test.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Language, LabeledItem, LabeledSet};
use crate::error::{Error, Result};
use crate::textprep::{split_sentences, Abbreviations};

pub const DEFAULT_CHAR_LIMIT: usize = 4500;

pub trait TranslationBackend {
    fn name(&self) -> &str;

    /// Largest text accepted by one call, in characters.
    fn char_limit(&self) -> Option<usize>;

    fn is_deterministic(&self) -> bool;

    /// Translates one chunk that respects the character limit.
    fn translate_chunk(&self, text: &str, source: &Language, target: &Language) -> Result<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl TranslationBackend for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn char_limit(&self) -> Option<usize> {
        None
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn translate_chunk(&self, text: &str, _: &Language, _: &Language) -> Result<String> {
        Ok(text.to_string())
    }
}

/// Word and phrase substitution from a `source<TAB>target` table.
/// Matching is case-insensitive and prefers the longest phrase.
#[derive(Debug, Clone)]
pub struct Lexicon {
    // (lower-cased source words, replacement), longest phrases first
    entries: Vec<(Vec<String>, String)>,
    char_limit: Option<usize>,
}

fn word_re() -> Regex {
    Regex::new(r"\w+").expect("valid regex")
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Lexicon> {
        let re = word_re();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected source<TAB>target".into(),
            })?;
            let words: Vec<String> = re.find_iter(&src.to_lowercase()).map(|m| m.as_str().to_string()).collect();
            if words.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty source phrase".into(),
                });
            }
            entries.push((words, tgt.to_string()));
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Ok(Lexicon {
            entries,
            char_limit: None,
        })
    }

    pub fn from_file(path: &Path) -> Result<Lexicon> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("lexicon {}: {e}", path.display())))?;
        Lexicon::parse(&text)
    }

    pub fn with_char_limit(mut self, limit: usize) -> Self {
        self.char_limit = Some(limit);
        self
    }

    pub fn apply(&self, text: &str) -> String {
        let re = word_re();
        let words: Vec<(usize, usize, String)> = re
            .find_iter(text)
            .map(|m| (m.start(), m.end(), m.as_str().to_lowercase()))
            .collect();
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        let mut i = 0;
        while i < words.len() {
            let hit = self.entries.iter().find(|(phrase, _)| {
                i + phrase.len() <= words.len()
                    && phrase.iter().enumerate().all(|(j, w)| {
                        words[i + j].2 == *w
                            && (j == 0 || text[words[i + j - 1].1..words[i + j].0].chars().all(char::is_whitespace))
                    })
            });
            match hit {
                Some((phrase, target)) => {
                    out.push_str(&text[cursor..words[i].0]);
                    out.push_str(target);
                    cursor = words[i + phrase.len() - 1].1;
                    i += phrase.len();
                }
                None => i += 1,
            }
        }
        out.push_str(&text[cursor..]);
        out
    }
}

impl TranslationBackend for Lexicon {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn char_limit(&self) -> Option<usize> {
        self.char_limit
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn translate_chunk(&self, text: &str, _: &Language, _: &Language) -> Result<String> {
        Ok(self.apply(text))
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    q: &'a str,
    source: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    #[serde(rename = "translatedText")]
    translated_text: String,
}

/// HTTP JSON translation endpoint.
#[derive(Debug, Clone)]
pub struct Remote {
    endpoint: String,
    char_limit: usize,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl Remote {
    pub fn new(endpoint: impl Into<String>) -> Remote {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Remote {
            endpoint: endpoint.into(),
            char_limit: DEFAULT_CHAR_LIMIT,
            retries: 3,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn with_char_limit(mut self, limit: usize) -> Self {
        self.char_limit = limit;
        self
    }

    /// Number of retries after the first attempt and the initial delay,
    /// which doubles after every failure.
    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, text: &str, source: &Language, target: &Language) -> std::result::Result<String, String> {
        let body = RemoteRequest {
            q: text,
            source: source.as_str(),
            target: target.as_str(),
        };
        let mut resp = self.agent.post(&self.endpoint).send_json(&body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut()
            .read_json::<RemoteResponse>()
            .map(|r| r.translated_text)
            .map_err(|e| format!("bad response body: {e}"))
    }
}

impl TranslationBackend for Remote {
    fn name(&self) -> &str {
        "remote"
    }

    fn char_limit(&self) -> Option<usize> {
        Some(self.char_limit)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn translate_chunk(&self, text: &str, source: &Language, target: &Language) -> Result<String> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(text, source, target) {
                Ok(t) => return Ok(t),
                Err(e) => {
                    log::warn!("translation attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Backend {
            attempts: self.retries + 1,
            message: last,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub text: String,
    /// Backend calls made.
    pub chunks: usize,
}

/// Splits text that exceeds `limit` characters into sentence chunks; a
/// sentence that is itself too long is cut at whitespace.
pub fn chunk_text(text: &str, limit: usize, abbreviations: &Abbreviations) -> Vec<String> {
    if text.chars().count() <= limit {
        return vec![text.to_string()];
    }
    let mut chunks = Vec::new();
    for sentence in split_sentences(text, abbreviations) {
        if sentence.chars().count() <= limit {
            chunks.push(sentence);
            continue;
        }
        let mut current = String::new();
        for word in sentence.split_whitespace() {
            let extra = word.chars().count() + usize::from(!current.is_empty());
            if !current.is_empty() && current.chars().count() + extra > limit {
                chunks.push(std::mem::take(&mut current));
            }
            if !current.is_empty() {
                current.push(' ');
            }
            current.push_str(word);
        }
        if !current.is_empty() {
            chunks.push(current);
        }
    }
    chunks
}

/// Translates `text`, sentence by sentence when it exceeds the backend's
/// character limit; chunk translations are joined with single spaces.
pub fn translate_text(backend: &dyn TranslationBackend, text: &str, source: &Language, target: &Language) -> Result<Translation> {
    if source == target && backend.name() != "identity" {
        return Err(Error::Validation(format!(
            "source and target language are both {source}"
        )));
    }
    let chunks = match backend.char_limit() {
        Some(limit) => chunk_text(text, limit, &Abbreviations::for_language(source)),
        None => vec![text.to_string()],
    };
    let mut out = Vec::with_capacity(chunks.len());
    for c in &chunks {
        out.push(backend.translate_chunk(c, source, target)?);
    }
    Ok(Translation {
        text: out.join(" "),
        chunks: chunks.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TranslatedCorpus {
    pub set: LabeledSet,
    /// Item keys that failed, with the error message.
    pub failures: Vec<(String, String)>,
}

fn translate_item(backend: &dyn TranslationBackend, item: &LabeledItem, target: &Language) -> Result<LabeledItem> {
    let source = item.article.language.clone();
    let mut out = item.clone();
    out.article.title = translate_text(backend, &item.article.title, &source, target)?.text;
    out.article.paragraphs = item
        .article
        .paragraphs
        .iter()
        .map(|p| translate_text(backend, p, &source, target).map(|t| t.text))
        .collect::<Result<_>>()?;
    out.article.language = target.clone();
    out.source_language = Some(item.source_language.clone().unwrap_or(source));
    Ok(out)
}

/// Translates every item into `target`, keeping labels; failed items are
/// listed rather than dropped silently.
pub fn translate_corpus(backend: &dyn TranslationBackend, set: &LabeledSet, target: &Language) -> TranslatedCorpus {
    let mut out = LabeledSet::new(set.subtask);
    let mut failures = Vec::new();
    for item in &set.items {
        match translate_item(backend, item, target) {
            Ok(t) => out.items.push(t),
            Err(e) => {
                log::warn!("translation of {} failed: {e}", item.key);
                failures.push((item.key.to_string(), e.to_string()));
            }
        }
    }
    TranslatedCorpus { set: out, failures }
}
