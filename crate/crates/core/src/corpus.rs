//! Articles, label tables and training-set construction.
//!
//! File formats:
//!
//! * article file `article<ID>.txt`: line 1 is the title, then one blank
//!   line, then paragraphs separated by single blank lines;
//! * genre labels `id<TAB>genre`;
//! * frame labels `id<TAB>frame1,frame2,...` (empty field = no frames);
//! * technique labels `id<TAB>paragraph<TAB>tech1,tech2,...` with a 1-based
//!   paragraph index (empty field = zero vector).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAMES: &str = include_str!("../data/frames.txt");
const TECHNIQUES: &str = include_str!("../data/techniques.txt");

/// Languages with training data plus the three zero-shot test languages.
pub const DEFAULT_LANGUAGES: [&str; 9] = ["en", "fr", "de", "it", "pl", "ru", "es", "el", "ka"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Language(String);

impl Language {
    pub fn new(code: impl Into<String>) -> Self {
        Language(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Language {
    fn from(s: &str) -> Self {
        Language::new(s)
    }
}

#[derive(Debug, Clone)]
pub struct LanguageRegistry {
    codes: BTreeSet<String>,
}

impl Default for LanguageRegistry {
    fn default() -> Self {
        LanguageRegistry {
            codes: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LanguageRegistry {
    pub fn new<I, S>(codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LanguageRegistry {
            codes: codes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn parse(&self, code: &str) -> Result<Language> {
        if self.codes.contains(code) {
            Ok(Language::new(code))
        } else {
            Err(Error::Validation(format!(
                "language {code:?} is not in the registry {:?}",
                self.codes
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    Genre,
    Framing,
    Persuasion,
}

impl Subtask {
    pub fn is_multilabel(self) -> bool {
        !matches!(self, Subtask::Genre)
    }

    pub fn class_count(self) -> usize {
        match self {
            Subtask::Genre => 3,
            Subtask::Framing => 14,
            Subtask::Persuasion => 23,
        }
    }

    pub fn registry(self) -> ClassRegistry {
        match self {
            Subtask::Genre => ClassRegistry::genres(),
            Subtask::Framing => ClassRegistry::frames(),
            Subtask::Persuasion => ClassRegistry::techniques(),
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subtask::Genre => "genre",
            Subtask::Framing => "framing",
            Subtask::Persuasion => "persuasion",
        })
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genre" | "1" | "st1" => Ok(Subtask::Genre),
            "framing" | "2" | "st2" => Ok(Subtask::Framing),
            "persuasion" | "3" | "st3" => Ok(Subtask::Persuasion),
            other => Err(Error::Validation(format!("unknown subtask {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Opinion,
    Reporting,
    Satire,
}

impl Genre {
    pub const ALL: [Genre; 3] = [Genre::Opinion, Genre::Reporting, Genre::Satire];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Genre> {
        Genre::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Genre::Opinion => "opinion",
            Genre::Reporting => "reporting",
            Genre::Satire => "satire",
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Genre {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Genre::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Registry {
                registry: "genre".into(),
                tokens: vec![s.to_string()],
            })
    }
}

/// Ordered class inventory for one subtask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    name: String,
    classes: Vec<String>,
    parents: Vec<Option<String>>,
}

impl ClassRegistry {
    /// Parses a registry file: one class per line, optional tab-separated
    /// parent group, `#` comments.
    pub fn parse(name: &str, text: &str) -> Self {
        let mut classes = Vec::new();
        let mut parents = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            classes.push(cols.next().unwrap_or_default().trim().to_string());
            parents.push(cols.next().map(|p| p.trim().to_string()));
        }
        ClassRegistry {
            name: name.to_string(),
            classes,
            parents,
        }
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(name, &text))
    }

    pub fn genres() -> Self {
        ClassRegistry {
            name: "genre".into(),
            classes: Genre::ALL.iter().map(|g| g.name().to_string()).collect(),
            parents: vec![None; 3],
        }
    }

    pub fn frames() -> Self {
        Self::parse("frames", FRAMES)
    }

    pub fn techniques() -> Self {
        Self::parse("techniques", TECHNIQUES)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn parent(&self, index: usize) -> Option<&str> {
        self.parents.get(index).and_then(|p| p.as_deref())
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Parses a comma-joined class field into a membership vector.
    pub fn parse_set(&self, field: &str) -> Result<Vec<bool>> {
        let mut v = vec![false; self.len()];
        let mut unknown = Vec::new();
        for tok in field.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match self.index_of(tok) {
                Some(i) => v[i] = true,
                None => unknown.push(tok.to_string()),
            }
        }
        if unknown.is_empty() {
            Ok(v)
        } else {
            Err(Error::Registry {
                registry: self.name.clone(),
                tokens: unknown,
            })
        }
    }

    pub fn format_set(&self, v: &[bool]) -> String {
        v.iter()
            .zip(&self.classes)
            .filter(|(on, _)| **on)
            .map(|(_, name)| name.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub language: Language,
    pub title: String,
    pub paragraphs: Vec<String>,
}

impl Article {
    /// Title and body joined into one text.
    pub fn full_text(&self) -> String {
        let mut s = self.title.clone();
        for p in &self.paragraphs {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(p);
        }
        s
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = self.title.clone();
        s.push('\n');
        for p in &self.paragraphs {
            s.push('\n');
            s.push_str(p);
            s.push('\n');
        }
        s
    }

    pub fn parse(id: &str, language: Language, file: &str, text: &str) -> Result<Article> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text.lines();
        let title = match lines.next() {
            Some(t) if !t.trim().is_empty() => t.trim().to_string(),
            _ => {
                return Err(Error::Format {
                    file: file.to_string(),
                    message: "missing title line".into(),
                })
            }
        };
        let mut paragraphs = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    paragraphs.push(current.join(" "));
                    current.clear();
                }
            } else {
                current.push(line.trim());
            }
        }
        if !current.is_empty() {
            paragraphs.push(current.join(" "));
        }
        Ok(Article {
            id: id.to_string(),
            language,
            title,
            paragraphs,
        })
    }
}

fn article_id_from_file_name(name: &str) -> Option<&str> {
    name.strip_prefix("article")?
        .strip_suffix(".txt")
        .filter(|id| !id.is_empty())
}

fn id_sort_key(id: &str) -> (u64, String) {
    (id.parse::<u64>().unwrap_or(u64::MAX), id.to_string())
}

/// Loads every `article<ID>.txt` in `dir`, ordered by id.
pub fn load_articles(dir: &Path, language: &Language) -> Result<Vec<Article>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = article_id_from_file_name(&name) {
            files.push((id.to_string(), entry.path()));
        }
    }
    files.sort_by_key(|(id, _)| id_sort_key(id));

    let mut seen = HashSet::new();
    let mut articles = Vec::with_capacity(files.len());
    for (id, path) in files {
        if !seen.insert(id.clone()) {
            return Err(Error::Duplicate(id));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let article = Article::parse(&id, language.clone(), &path.display().to_string(), &text)?;
        if article.paragraphs.is_empty() {
            log::warn!("{} has a title but no paragraphs", path.display());
        }
        articles.push(article);
    }
    Ok(articles)
}

pub fn write_articles(dir: &Path, articles: &[Article]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for a in articles {
        let path = dir.join(format!("article{}.txt", a.id));
        fs::write(&path, a.to_file_contents()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Identifies a labelled unit: an article, or one paragraph (1-based) of it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub article_id: String,
    pub paragraph: Option<usize>,
}

impl ItemKey {
    pub fn article(id: impl Into<String>) -> Self {
        ItemKey {
            article_id: id.into(),
            paragraph: None,
        }
    }

    pub fn paragraph(id: impl Into<String>, index: usize) -> Self {
        ItemKey {
            article_id: id.into(),
            paragraph: Some(index),
        }
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.paragraph {
            Some(p) => write!(f, "{}:{}", self.article_id, p),
            None => f.write_str(&self.article_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Genre(Genre),
    Multi(Vec<bool>),
}

impl Label {
    pub fn zero(subtask: Subtask) -> Label {
        match subtask {
            Subtask::Genre => Label::Genre(Genre::Opinion),
            other => Label::Multi(vec![false; other.class_count()]),
        }
    }

    /// Label as a one-hot / multi-hot row.
    pub fn to_row(&self, classes: usize) -> Vec<bool> {
        match self {
            Label::Genre(g) => {
                let mut v = vec![false; classes];
                v[g.index()] = true;
                v
            }
            Label::Multi(v) => v.clone(),
        }
    }

    pub fn genre(&self) -> Option<Genre> {
        match self {
            Label::Genre(g) => Some(*g),
            Label::Multi(_) => None,
        }
    }

    /// Stable string used for stratification and class grouping.
    pub fn key(&self) -> String {
        match self {
            Label::Genre(g) => g.name().to_string(),
            Label::Multi(v) => v.iter().map(|b| if *b { '1' } else { '0' }).collect(),
        }
    }

    fn matches_subtask(&self, subtask: Subtask) -> bool {
        match (self, subtask) {
            (Label::Genre(_), Subtask::Genre) => true,
            (Label::Multi(v), s) if s.is_multilabel() => v.len() == s.class_count(),
            _ => false,
        }
    }
}

/// Labels (or predictions) keyed by item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    pub subtask: Subtask,
    pub entries: BTreeMap<ItemKey, Label>,
}

impl LabelTable {
    pub fn new(subtask: Subtask) -> Self {
        LabelTable {
            subtask,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: ItemKey, label: Label) -> Result<()> {
        if !label.matches_subtask(self.subtask) {
            return Err(Error::Validation(format!(
                "label for {key} does not match subtask {}",
                self.subtask
            )));
        }
        if self.entries.insert(key.clone(), label).is_some() {
            return Err(Error::Duplicate(key.to_string()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ItemKey) -> Option<&Label> {
        self.entries.get(key)
    }

    pub fn parse(text: &str, subtask: Subtask, registry: &ClassRegistry, file: &str) -> Result<Self> {
        let mut table = LabelTable::new(subtask);
        let format_err = |line: usize, message: String| Error::Format {
            file: file.to_string(),
            message: format!("line {line}: {message}"),
        };
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            let id = cols[0].trim();
            if id.is_empty() {
                return Err(format_err(lineno, "empty id".into()));
            }
            match subtask {
                Subtask::Genre => {
                    if cols.len() != 2 {
                        return Err(format_err(lineno, "expected `id<TAB>genre`".into()));
                    }
                    let field = cols[1].trim();
                    if field.contains(',') {
                        return Err(format_err(lineno, format!("genre row has more than one label: {field:?}")));
                    }
                    let genre: Genre = field.parse()?;
                    table.insert(ItemKey::article(id), Label::Genre(genre))?;
                }
                Subtask::Framing => {
                    if cols.len() != 2 {
                        return Err(format_err(lineno, "expected `id<TAB>frames`".into()));
                    }
                    let v = registry.parse_set(cols[1])?;
                    table.insert(ItemKey::article(id), Label::Multi(v))?;
                }
                Subtask::Persuasion => {
                    if cols.len() != 3 {
                        return Err(format_err(lineno, "expected `id<TAB>paragraph<TAB>techniques`".into()));
                    }
                    let para: usize = cols[1]
                        .trim()
                        .parse()
                        .ok()
                        .filter(|p| *p >= 1)
                        .ok_or_else(|| format_err(lineno, format!("bad paragraph index {:?}", cols[1])))?;
                    let v = registry.parse_set(cols[2])?;
                    table.insert(ItemKey::paragraph(id, para), Label::Multi(v))?;
                }
            }
        }
        Ok(table)
    }

    pub fn to_tsv(&self, registry: &ClassRegistry) -> String {
        let mut out = String::new();
        for (key, label) in &self.entries {
            match (self.subtask, label) {
                (Subtask::Genre, Label::Genre(g)) => {
                    out.push_str(&format!("{}\t{}\n", key.article_id, g));
                }
                (Subtask::Framing, Label::Multi(v)) => {
                    out.push_str(&format!("{}\t{}\n", key.article_id, registry.format_set(v)));
                }
                (Subtask::Persuasion, Label::Multi(v)) => {
                    out.push_str(&format!(
                        "{}\t{}\t{}\n",
                        key.article_id,
                        key.paragraph.unwrap_or(1),
                        registry.format_set(v)
                    ));
                }
                _ => unreachable!("LabelTable::insert enforces the subtask"),
            }
        }
        out
    }
}

pub fn load_labels(path: &Path, subtask: Subtask) -> Result<LabelTable> {
    load_labels_with(path, subtask, &subtask.registry())
}

pub fn load_labels_with(path: &Path, subtask: Subtask, registry: &ClassRegistry) -> Result<LabelTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelTable::parse(&text, subtask, registry, &path.display().to_string())
}

pub fn write_labels(table: &LabelTable, path: &Path) -> Result<()> {
    write_labels_with(table, path, &table.subtask.registry())
}

pub fn write_labels_with(table: &LabelTable, path: &Path, registry: &ClassRegistry) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(table.to_tsv(registry).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub key: ItemKey,
    pub article: Article,
    pub label: Label,
    pub provenance: Provenance,
    /// Language before translation, when the item was translated.
    pub source_language: Option<Language>,
}

impl LabeledItem {
    pub fn language(&self) -> &Language {
        &self.article.language
    }

    /// Model input text: the whole article, or the paragraph for
    /// paragraph-level items.
    pub fn text(&self) -> String {
        match self.key.paragraph {
            Some(p) => self.article.paragraphs.get(p - 1).cloned().unwrap_or_default(),
            None => self.article.full_text(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub subtask: Subtask,
    pub items: Vec<LabeledItem>,
}

impl LabeledSet {
    pub fn new(subtask: Subtask) -> Self {
        LabeledSet {
            subtask,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn languages(&self) -> BTreeSet<Language> {
        self.items.iter().map(|i| i.language().clone()).collect()
    }

    pub fn filter_language(&self, language: &Language) -> LabeledSet {
        LabeledSet {
            subtask: self.subtask,
            items: self
                .items
                .iter()
                .filter(|i| i.language() == language)
                .cloned()
                .collect(),
        }
    }

    pub fn label_table(&self) -> Result<LabelTable> {
        let mut t = LabelTable::new(self.subtask);
        for item in &self.items {
            if !t.entries.contains_key(&item.key) {
                t.insert(item.key.clone(), item.label.clone())?;
            }
        }
        Ok(t)
    }

    /// Counts per label key.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for item in &self.items {
            *m.entry(item.label.key()).or_insert(0) += 1;
        }
        m
    }
}

/// Pairs articles with their labels.
///
/// For persuasion, paragraphs without a label row are either given an
/// all-zero vector (`include_unlabeled`) or dropped. The flag is ignored
/// for the article-level subtasks, where unlabelled articles are skipped.
pub fn build_training_set(
    articles: &[Article],
    labels: &LabelTable,
    subtask: Subtask,
    include_unlabeled: bool,
) -> Result<LabeledSet> {
    if labels.subtask != subtask {
        return Err(Error::Validation(format!(
            "label table is for {}, not {subtask}",
            labels.subtask
        )));
    }
    let by_id: BTreeMap<&str, &Article> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
    for key in labels.entries.keys() {
        let article = by_id
            .get(key.article_id.as_str())
            .ok_or_else(|| Error::Integrity(format!("label references unknown article {:?}", key.article_id)))?;
        if let Some(p) = key.paragraph {
            if p > article.paragraphs.len() {
                return Err(Error::Integrity(format!(
                    "label references paragraph {p} of article {:?}, which has {}",
                    key.article_id,
                    article.paragraphs.len()
                )));
            }
        }
    }

    let mut set = LabeledSet::new(subtask);
    for article in articles {
        match subtask {
            Subtask::Genre | Subtask::Framing => {
                let key = ItemKey::article(&article.id);
                if let Some(label) = labels.get(&key) {
                    if let Label::Multi(v) = label {
                        if !v.iter().any(|b| *b) {
                            return Err(Error::Validation(format!(
                                "gold frame set for article {:?} is empty",
                                article.id
                            )));
                        }
                    }
                    set.items.push(LabeledItem {
                        key,
                        article: article.clone(),
                        label: label.clone(),
                        provenance: Provenance::Original,
                        source_language: None,
                    });
                }
            }
            Subtask::Persuasion => {
                for p in 1..=article.paragraphs.len() {
                    let key = ItemKey::paragraph(&article.id, p);
                    let label = match labels.get(&key) {
                        Some(l) => l.clone(),
                        None if include_unlabeled => Label::zero(subtask),
                        None => continue,
                    };
                    set.items.push(LabeledItem {
                        key,
                        article: article.clone(),
                        label,
                        provenance: Provenance::Original,
                        source_language: None,
                    });
                }
            }
        }
    }
    Ok(set)
}

/// Appends an external pool (e.g. extra English satire) flagged as auxiliary.
pub fn merge_auxiliary(
    train: &LabeledSet,
    aux: &LabeledSet,
    language: &Language,
    class: &Label,
) -> Result<LabeledSet> {
    if aux.subtask != train.subtask {
        return Err(Error::Validation("auxiliary set is for a different subtask".into()));
    }
    for item in &aux.items {
        if item.language() != language || &item.label != class {
            return Err(Error::Validation(format!(
                "auxiliary item {} is ({}, {}), expected ({}, {})",
                item.key,
                item.language(),
                item.label.key(),
                language,
                class.key()
            )));
        }
    }
    let mut merged = train.clone();
    merged.items.extend(aux.items.iter().cloned().map(|mut i| {
        i.provenance = Provenance::Auxiliary;
        i
    }));
    Ok(merged)
}
