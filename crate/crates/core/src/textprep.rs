//! Article cleaning, sentence segmentation, head+tail truncation and the
//! word-level tokenizer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Article, Language};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const RESERVED: usize = 5;
const SPECIAL_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const ENGLISH_PATTERNS: &str = include_str!("../data/english_patterns.txt");

fn builtin_abbreviations(code: &str) -> &'static str {
    match code {
        "en" => include_str!("../data/abbrev/en.txt"),
        "fr" => include_str!("../data/abbrev/fr.txt"),
        "de" => include_str!("../data/abbrev/de.txt"),
        "it" => include_str!("../data/abbrev/it.txt"),
        "pl" => include_str!("../data/abbrev/pl.txt"),
        "ru" => include_str!("../data/abbrev/ru.txt"),
        "es" => include_str!("../data/abbrev/es.txt"),
        "el" => include_str!("../data/abbrev/el.txt"),
        _ => "",
    }
}

/// Lower-cased abbreviations (with trailing dot) that never end a sentence.
#[derive(Debug, Clone, Default)]
pub struct Abbreviations {
    entries: HashSet<String>,
}

impl Abbreviations {
    pub fn parse(text: &str) -> Self {
        Abbreviations {
            entries: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        }
    }

    pub fn for_language(language: &Language) -> Self {
        Self::parse(builtin_abbreviations(language.as_str()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(&word.to_lowercase())
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '»' | '”' | '’')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '«' | '“' | '‘' | '„')
}

/// Uppercase, digit, or a letter from a script without case.
fn starts_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || (c.is_alphabetic() && !c.is_lowercase())
}

/// Splits at `.`/`!`/`?` (plus closing quotes) followed by whitespace and an
/// uppercase letter or digit, except after a listed abbreviation.
pub fn split_sentences(text: &str, abbreviations: &Abbreviations) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if !is_terminator(c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (is_terminator(chars[j].1) || is_closer(chars[j].1)) {
            j += 1;
        }
        if j >= chars.len() || !chars[j].1.is_whitespace() {
            i = j;
            continue;
        }
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let mut m = k;
        while m < chars.len() && is_opener(chars[m].1) {
            m += 1;
        }
        if m >= chars.len() || !starts_sentence(chars[m].1) {
            i = k;
            continue;
        }
        let end_byte = chars[j].0;
        let candidate = text[start..end_byte].trim();
        if c == '.' && ends_with_abbreviation(candidate, abbreviations) {
            i = k;
            continue;
        }
        if !candidate.is_empty() {
            out.push(candidate.to_string());
        }
        start = chars[k].0;
        i = k;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn ends_with_abbreviation(candidate: &str, abbreviations: &Abbreviations) -> bool {
    let last = candidate.split_whitespace().last().unwrap_or("");
    let last = last.trim_start_matches(|c: char| !c.is_alphanumeric());
    abbreviations.contains(last)
}

/// English boilerplate patterns plus per-language abbreviation lists.
#[derive(Debug, Clone)]
pub struct CleaningRules {
    english: Vec<Regex>,
    abbreviations: HashMap<String, Abbreviations>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self::with_patterns(ENGLISH_PATTERNS).expect("built-in patterns compile")
    }
}

impl CleaningRules {
    /// Pattern registry: one case-insensitive regex per line, `#` comments.
    pub fn with_patterns(text: &str) -> Result<Self> {
        let mut english = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let re = RegexBuilder::new(line)
                .case_insensitive(true)
                .build()
                .map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            english.push(re);
        }
        Ok(CleaningRules {
            english,
            abbreviations: HashMap::new(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_patterns(&text)
    }

    pub fn set_abbreviations(&mut self, language: &Language, abbreviations: Abbreviations) {
        self.abbreviations.insert(language.as_str().to_string(), abbreviations);
    }

    pub fn abbreviations(&self, language: &Language) -> Abbreviations {
        self.abbreviations
            .get(language.as_str())
            .cloned()
            .unwrap_or_else(|| Abbreviations::for_language(language))
    }

    fn is_english_boilerplate(&self, sentence: &str) -> bool {
        self.english.iter().any(|re| re.is_match(sentence))
    }
}

struct Patterns {
    handle: Regex,
    md_image: Regex,
    md_link: Regex,
    url: Regex,
    www: Regex,
    image_file: Regex,
    space_before_punct: Regex,
    spaces: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        handle: Regex::new(r"(^|[^\w@])@(\w{1,30})").unwrap(),
        md_image: Regex::new(r"!\[[^\]]*\]\([^)]*\)").unwrap(),
        md_link: Regex::new(r"\[([^\]]*)\]\((?:https?://|www\.)[^)]*\)").unwrap(),
        url: Regex::new(r#"(?i)\b(?:https?|ftp)://[^\s]*[^\s.,;:!?)\]"'»”]"#).unwrap(),
        www: Regex::new(r#"(?i)\bwww\.[^\s]*[^\s.,;:!?)\]"'»”]"#).unwrap(),
        image_file: Regex::new(r"(?i)\b[\w./-]+\.(?:jpe?g|png|gif|webp|svg|bmp)\b").unwrap(),
        space_before_punct: Regex::new(r"\s+([.,;:!?])").unwrap(),
        spaces: Regex::new(r"\s+").unwrap(),
    })
}

fn strip_handles_and_links(text: &str) -> String {
    let p = patterns();
    let s = p.handle.replace_all(text, "$1$2");
    let s = p.md_image.replace_all(&s, "");
    let s = p.md_link.replace_all(&s, "$1");
    let s = p.url.replace_all(&s, "");
    let s = p.www.replace_all(&s, "");
    let s = p.image_file.replace_all(&s, "");
    normalize_space(&s)
}

fn normalize_space(text: &str) -> String {
    let p = patterns();
    let s = p.spaces.replace_all(text, " ");
    let s = p.space_before_punct.replace_all(&s, "$1");
    s.trim().to_string()
}

fn clean_pass(article: &Article, rules: &CleaningRules) -> Article {
    let abbreviations = rules.abbreviations(&article.language);
    let english = article.language.as_str() == "en";

    let mut title = normalize_space(&article.title);
    if !title.is_empty() && !title.ends_with(is_terminator) {
        title.push('.');
    }
    let title = strip_handles_and_links(&title);

    let mut previous: Option<String> = None;
    let mut paragraphs = Vec::new();
    for para in &article.paragraphs {
        let mut kept = Vec::new();
        for sentence in split_sentences(para, &abbreviations) {
            if previous.as_deref() == Some(sentence.as_str()) {
                continue;
            }
            previous = Some(sentence.clone());
            kept.push(sentence);
        }
        let text = strip_handles_and_links(&kept.join(" "));
        let text = if english {
            split_sentences(&text, &abbreviations)
                .into_iter()
                .filter(|s| !rules.is_english_boilerplate(s))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            text
        };
        if !text.is_empty() {
            paragraphs.push(text);
        }
    }
    Article {
        id: article.id.clone(),
        language: article.language.clone(),
        title,
        paragraphs,
    }
}

/// Applies the cleaning steps repeatedly until the article stops changing,
/// so the result is a fixed point (`clean(clean(x)) == clean(x)`).
pub fn clean_article(article: &Article, rules: &CleaningRules) -> Article {
    let mut current = clean_pass(article, rules);
    loop {
        let next = clean_pass(&current, rules);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Lower-cased word-level tokens; every punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `max_size - 5` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED {
            return Err(Error::Config(format!("vocab max_size must be >= {RESERVED}, got {max_size}")));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Vocab from non-reserved tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_count(&self, text: &str) -> usize {
        tokenize(text).len()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED || lines[..RESERVED] != SPECIAL_TOKENS {
            return Err(Error::Format {
                file: "vocab".into(),
                message: "vocab must start with the five reserved tokens".into(),
            });
        }
        Ok(Self::from_tokens(lines[RESERVED..].iter().map(|s| s.to_string())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Fixed-length id sequence: `[CLS] tokens [SEP] [PAD]...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Number of non-PAD positions.
    pub len: usize,
}

impl TokenSeq {
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP);
    let len = ids.len();
    ids.resize(max_len, PAD);
    TokenSeq { ids, len }
}

/// Fits sentences into `token_budget` encoded positions ([CLS] and [SEP]
/// included) by alternately admitting the next head and the next tail
/// sentence, stopping at the first one that does not fit. Admitted
/// sentences are emitted in their original order.
pub fn head_tail_truncate(sentences: &[String], token_budget: usize, vocab: &Vocab) -> String {
    assert!(token_budget >= 2, "token_budget must leave room for [CLS] and [SEP]");
    let available = token_budget - 2;
    let mut admitted = vec![false; sentences.len()];
    let mut used = 0usize;
    let (mut head, mut tail) = (0usize, sentences.len());
    let mut from_head = true;
    while head < tail {
        let idx = if from_head { head } else { tail - 1 };
        let cost = vocab.token_count(&sentences[idx]);
        if used + cost > available {
            break;
        }
        used += cost;
        admitted[idx] = true;
        if from_head {
            head += 1;
        } else {
            tail -= 1;
        }
        from_head = !from_head;
    }
    sentences
        .iter()
        .zip(admitted)
        .filter(|(_, a)| *a)
        .map(|(s, _)| s.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Model input for a whole article: the title is kept, the body is
/// head+tail truncated into what remains of the budget.
pub fn prepare_article_text(article: &Article, token_budget: usize, vocab: &Vocab, abbreviations: &Abbreviations) -> String {
    let title_cost = vocab.token_count(&article.title);
    let body_budget = token_budget.saturating_sub(title_cost).max(2);
    let sentences: Vec<String> = article
        .paragraphs
        .iter()
        .flat_map(|p| split_sentences(p, abbreviations))
        .collect();
    let body = head_tail_truncate(&sentences, body_budget, vocab);
    match (article.title.is_empty(), body.is_empty()) {
        (_, true) => article.title.clone(),
        (true, false) => body,
        (false, false) => format!("{} {}", article.title, body),
    }
}
