//! Desk-scale experiment recipes over a synthetic multilingual corpus.
//!
//! The generator gives every language its own word alphabet and plants
//! class keywords (genre, frames, techniques) in otherwise random text, so
//! the gold labels are learnable and known. Clone languages reuse the word
//! alphabet of another language.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{class_weights, oversample_all, stratified_split, SplitPlan, SplitStrategy, StratumKey, WeightScheme, DEFAULT_CLAMP};
use crate::corpus::{build_training_set, write_articles, write_labels, Article, Genre, ItemKey, Label, LabelTable, LabeledSet, Language, Subtask};
use crate::error::{Error, Result};
use crate::eval::{per_language_report, LanguageReport};
use crate::inference::{predict, route_and_predict, PredictInput, PredictionSet, RoutePlan, RoutedModel, RoutingTable};
use crate::model::{build_encoder, insert_adapters, AdapterConfig, HeadConfig, Model, ModelConfig};
use crate::tensor::encode_snapshot;
use crate::textprep::{clean_article, encode, CleaningRules, TokenSeq, Vocab};
use crate::train::{
    encode_examples, item_text, mlm_eval_loss, select_checkpoint, tapt, train_model, CheckpointSeries, Selection, SelectionStrategy,
    TaptConfig, TaptReport, TrainConfig, TrainJob,
};
use crate::translate::{Identity, Lexicon, TranslationBackend};
use crate::util::{mean_std, sha256_hex, stream_rng};

/// Labelled and total paragraph counts per language of the reference
/// persuasion training data.
pub const REFERENCE_PARAGRAPH_COUNTS: [(&str, usize, usize); 6] = [
    ("en", 3760, 9498),
    ("fr", 1693, 2259),
    ("de", 1252, 1555),
    ("it", 1745, 2623),
    ("pl", 1232, 2310),
    ("ru", 1245, 1962),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES: usize = 70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub languages: Vec<String>,
    /// Language -> language whose words it reuses.
    pub clones: BTreeMap<String, String>,
    pub articles_per_language: usize,
    /// Opinion, reporting, satire.
    pub genre_weights: [f64; 3],
    /// Inclusive ranges.
    pub paragraphs: (usize, usize),
    pub sentences: (usize, usize),
    pub words: (usize, usize),
    pub frames_per_article: (usize, usize),
    pub techniques_per_paragraph: (usize, usize),
    pub filler_words: usize,
    pub keywords_per_class: usize,
    /// Per-word probability of an extra keyword of one of the item's classes.
    pub keyword_rate: f64,
    /// Per-word probability of a keyword of any class.
    pub distractor_rate: f64,
    /// Per-paragraph probability of a link (and, in English, a sharing
    /// sentence) that cleaning removes.
    pub boilerplate_rate: f64,
    /// Share of paragraphs without persuasion labels; languages not listed
    /// use 0.
    pub unlabeled_share: BTreeMap<String, f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            languages: REFERENCE_PARAGRAPH_COUNTS.iter().map(|(l, _, _)| l.to_string()).collect(),
            clones: BTreeMap::new(),
            articles_per_language: 40,
            genre_weights: [0.5, 0.3, 0.2],
            paragraphs: (3, 6),
            sentences: (1, 3),
            words: (5, 10),
            frames_per_article: (1, 3),
            techniques_per_paragraph: (1, 2),
            filler_words: 150,
            keywords_per_class: 3,
            keyword_rate: 0.12,
            distractor_rate: 0.02,
            boilerplate_rate: 0.2,
            unlabeled_share: REFERENCE_PARAGRAPH_COUNTS
                .iter()
                .map(|&(l, labeled, total)| (l.to_string(), 1.0 - labeled as f64 / total as f64))
                .collect(),
        }
    }
}

fn check_range(name: &str, r: (usize, usize), min: usize) -> Result<()> {
    if r.0 < min || r.0 > r.1 {
        return Err(Error::Config(format!("{name} range {r:?} must satisfy {min} <= min <= max")));
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() || self.articles_per_language == 0 {
            return Err(Error::Config("synthetic corpus needs languages and articles".into()));
        }
        let set: BTreeSet<&String> = self.languages.iter().collect();
        if set.len() != self.languages.len() {
            return Err(Error::Config("duplicate synthetic language".into()));
        }
        for l in &self.languages {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Config(format!("language code {l:?} must be lowercase ASCII letters")));
            }
        }
        for (clone, source) in &self.clones {
            if !set.contains(clone) || !set.contains(source) || self.clones.contains_key(source) {
                return Err(Error::Config(format!("clone {clone} -> {source} must map a listed language to a non-clone")));
            }
        }
        check_range("paragraphs", self.paragraphs, 1)?;
        check_range("sentences", self.sentences, 1)?;
        check_range("words", self.words, 1)?;
        check_range("frames per article", self.frames_per_article, 1)?;
        check_range("techniques per paragraph", self.techniques_per_paragraph, 1)?;
        if self.frames_per_article.1 > Subtask::Framing.class_count()
            || self.techniques_per_paragraph.1 > Subtask::Persuasion.class_count()
        {
            return Err(Error::Config("more classes per item than classes".into()));
        }
        if self.genre_weights.iter().any(|w| !(*w >= 0.0)) || self.genre_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("bad genre weights {:?}", self.genre_weights)));
        }
        if self.filler_words == 0 || self.keywords_per_class == 0 {
            return Err(Error::Config("filler and keyword counts must be positive".into()));
        }
        if self.layout().total() > SYLLABLES * SYLLABLES {
            return Err(Error::Config("word inventory too large".into()));
        }
        for p in [self.keyword_rate, self.distractor_rate, self.boilerplate_rate]
            .into_iter()
            .chain(self.unlabeled_share.values().copied())
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.keyword_rate + self.distractor_rate > 1.0 {
            return Err(Error::Config("keyword and distractor rates exceed 1".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        Layout {
            filler: self.filler_words,
            k: self.keywords_per_class,
        }
    }

    /// Language whose word alphabet `language` uses.
    pub fn alphabet_of<'a>(&'a self, language: &'a str) -> &'a str {
        self.clones.get(language).map(String::as_str).unwrap_or(language)
    }
}

/// Word indices: filler, then `k` keywords per genre, frame and technique.
#[derive(Debug, Clone, Copy)]
struct Layout {
    filler: usize,
    k: usize,
}

impl Layout {
    fn genre(&self, g: usize, j: usize) -> usize {
        self.filler + g * self.k + j
    }

    fn frame(&self, f: usize, j: usize) -> usize {
        self.filler + (3 + f) * self.k + j
    }

    fn technique(&self, t: usize, j: usize) -> usize {
        self.filler + (3 + Subtask::Framing.class_count() + t) * self.k + j
    }

    fn total(&self) -> usize {
        self.filler + (3 + Subtask::Framing.class_count() + Subtask::Persuasion.class_count()) * self.k
    }
}

/// Word `index` of the alphabet `prefix`: the prefix plus two syllables.
pub fn synthetic_word(prefix: &str, index: usize) -> String {
    let syllable = |k: usize| [CONSONANTS[k % CONSONANTS.len()] as char, VOWELS[k / CONSONANTS.len()] as char];
    let mut w = prefix.to_string();
    w.extend(syllable(index % SYLLABLES));
    w.extend(syllable(index / SYLLABLES % SYLLABLES));
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    pub genres: LabelTable,
    pub frames: LabelTable,
    pub techniques: LabelTable,
}

impl SyntheticCorpus {
    pub fn labels(&self, task: Subtask) -> &LabelTable {
        match task {
            Subtask::Genre => &self.genres,
            Subtask::Framing => &self.frames,
            Subtask::Persuasion => &self.techniques,
        }
    }

    /// SHA-256 over article files and the three label tables.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for a in &self.articles {
            let _ = write!(s, "{}\t{}\n{}\u{1e}", a.id, a.language, a.to_file_contents());
        }
        for task in [Subtask::Genre, Subtask::Framing, Subtask::Persuasion] {
            s.push_str(&self.labels(task).to_tsv(&task.registry()));
            s.push('\u{1e}');
        }
        sha256_hex(s.as_bytes())
    }

    /// Writes `<dir>/<lang>/article<ID>.txt` and `<dir>/labels/{genre,framing,persuasion}.tsv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let mut by_lang: BTreeMap<&Language, Vec<Article>> = BTreeMap::new();
        for a in &self.articles {
            by_lang.entry(&a.language).or_default().push(a.clone());
        }
        for (lang, articles) in by_lang {
            write_articles(&dir.join(lang.as_str()), &articles)?;
        }
        for task in [Subtask::Genre, Subtask::Framing, Subtask::Persuasion] {
            write_labels(self.labels(task), &dir.join("labels").join(format!("{task}.tsv")))?;
        }
        Ok(())
    }

    pub fn clean(&self, rules: &CleaningRules) -> Result<SyntheticCorpus> {
        let mut out = self.clone();
        for (a, cleaned) in out.articles.iter_mut().zip(self.articles.iter().map(|a| clean_article(a, rules))) {
            if cleaned.paragraphs.len() != a.paragraphs.len() {
                return Err(Error::Integrity(format!("cleaning dropped a paragraph of {}", a.id)));
            }
            *a = cleaned;
        }
        Ok(out)
    }
}

struct Writer<'a> {
    cfg: &'a SyntheticConfig,
    layout: Layout,
    prefix: &'a str,
    rng: ChaCha8Rng,
}

impl Writer<'_> {
    fn word(&self, index: usize) -> String {
        synthetic_word(self.prefix, index)
    }

    fn pick_keyword(&mut self, classes: &[(char, usize)]) -> usize {
        let (kind, c) = classes[self.rng.gen_range(0..classes.len())];
        let j = self.rng.gen_range(0..self.layout.k);
        match kind {
            'g' => self.layout.genre(c, j),
            'f' => self.layout.frame(c, j),
            _ => self.layout.technique(c, j),
        }
    }

    /// Random sentences with keywords of `classes` planted at
    /// `keyword_rate`, plus one guaranteed keyword per entry of `must`.
    fn paragraph(&mut self, classes: &[(char, usize)], must: &[(char, usize)]) -> Vec<Vec<String>> {
        let n = self.rng.gen_range(self.cfg.sentences.0..=self.cfg.sentences.1);
        let mut sentences = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.rng.gen_range(self.cfg.words.0..=self.cfg.words.1);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let u: f64 = self.rng.gen();
                let idx = if u < self.cfg.keyword_rate {
                    self.pick_keyword(classes)
                } else if u < self.cfg.keyword_rate + self.cfg.distractor_rate {
                    self.rng.gen_range(self.layout.filler..self.layout.total())
                } else {
                    self.rng.gen_range(0..self.layout.filler)
                };
                words.push(self.word(idx));
            }
            sentences.push(words);
        }
        for m in must {
            let idx = self.pick_keyword(std::slice::from_ref(m));
            let s = self.rng.gen_range(0..sentences.len());
            let at = self.rng.gen_range(0..=sentences[s].len());
            let w = self.word(idx);
            sentences[s].insert(at, w);
        }
        sentences
    }
}

fn sentence_text(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_ascii_uppercase();
        s.replace_range(..1, &upper);
    }
    s.push('.');
    s
}

/// Distinct classes drawn with weights proportional to `weights`.
fn draw_classes(rng: &mut ChaCha8Rng, weights: &[f64], count: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(count);
    let mut w = weights.to_vec();
    for _ in 0..count {
        let total: f64 = w.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        while w[pick] == 0.0 {
            pick = (pick + 1) % w.len();
        }
        chosen.push(pick);
        w[pick] = 0.0;
    }
    chosen.sort_unstable();
    chosen
}

fn multi_hot(classes: &[usize], n: usize) -> Vec<bool> {
    let mut v = vec![false; n];
    for &c in classes {
        v[c] = true;
    }
    v
}

pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let layout = cfg.layout();
    let n_frames = Subtask::Framing.class_count();
    let n_tech = Subtask::Persuasion.class_count();
    // Technique frequencies fall off with rank.
    let tech_weights: Vec<f64> = (0..n_tech).map(|t| 1.0 / (1.0 + t as f64)).collect();
    let frame_weights = vec![1.0; n_frames];
    let mut out = SyntheticCorpus {
        articles: Vec::new(),
        genres: LabelTable::new(Subtask::Genre),
        frames: LabelTable::new(Subtask::Framing),
        techniques: LabelTable::new(Subtask::Persuasion),
    };
    for lang in &cfg.languages {
        let mut w = Writer {
            cfg,
            layout,
            prefix: cfg.alphabet_of(lang),
            rng: stream_rng(cfg.seed, &format!("synthetic/{lang}")),
        };
        let unlabeled = cfg.unlabeled_share.get(lang).copied().unwrap_or(0.0);
        let genre_total: f64 = cfg.genre_weights.iter().sum();
        for i in 0..cfg.articles_per_language {
            let id = format!("{lang}{:04}", i + 1);
            let mut u = w.rng.gen::<f64>() * genre_total;
            let mut genre = 2;
            for (g, gw) in cfg.genre_weights.iter().enumerate() {
                if u < *gw {
                    genre = g;
                    break;
                }
                u -= gw;
            }
            let n_f = w.rng.gen_range(cfg.frames_per_article.0..=cfg.frames_per_article.1);
            let frames = draw_classes(&mut w.rng, &frame_weights, n_f);

            let j = w.rng.gen_range(0..layout.k);
            let mut title = vec![w.word(layout.genre(genre, j))];
            for _ in 0..3 {
                let f = w.rng.gen_range(0..layout.filler);
                title.push(w.word(f));
            }
            title.shuffle(&mut w.rng);

            let n_p = w.rng.gen_range(cfg.paragraphs.0..=cfg.paragraphs.1);
            let mut paragraphs = Vec::with_capacity(n_p);
            for p in 1..=n_p {
                let labeled = w.rng.gen::<f64>() >= unlabeled;
                let techniques = if labeled {
                    let n_t = w.rng.gen_range(cfg.techniques_per_paragraph.0..=cfg.techniques_per_paragraph.1);
                    draw_classes(&mut w.rng, &tech_weights, n_t)
                } else {
                    Vec::new()
                };
                let mut classes = vec![('g', genre)];
                classes.extend(frames.iter().map(|&f| ('f', f)));
                classes.extend(techniques.iter().map(|&t| ('t', t)));
                let mut must = vec![('g', genre)];
                if p == 1 {
                    must.extend(frames.iter().map(|&f| ('f', f)));
                }
                must.extend(techniques.iter().map(|&t| ('t', t)));
                let mut sentences: Vec<String> = w.paragraph(&classes, &must).iter().map(|s| sentence_text(s)).collect();
                if w.rng.gen::<f64>() < cfg.boilerplate_rate {
                    let s = w.rng.gen_range(0..sentences.len());
                    let link = format!(" https://news.example/{id}/{p}");
                    let end = sentences[s].len() - 1;
                    sentences[s].insert_str(end, &link);
                    if lang == "en" {
                        sentences.push("Share on Facebook.".into());
                    }
                }
                paragraphs.push(sentences.join(" "));
                if labeled {
                    out.techniques
                        .insert(ItemKey::paragraph(&id, p), Label::Multi(multi_hot(&techniques, n_tech)))?;
                }
            }
            out.genres.insert(
                ItemKey::article(&id),
                Label::Genre(Genre::from_index(genre).expect("genre index")),
            )?;
            out.frames.insert(ItemKey::article(&id), Label::Multi(multi_hot(&frames, n_frames)))?;
            out.articles.push(Article {
                id,
                language: Language::new(lang),
                title: title.join(" "),
                paragraphs,
            });
        }
    }
    Ok(out)
}

/// Word-for-word `source<TAB>target` table between two synthetic alphabets.
pub fn synthetic_lexicon(cfg: &SyntheticConfig, source: &str, target: &str) -> String {
    let (a, b) = (cfg.alphabet_of(source), cfg.alphabet_of(target));
    let mut out = String::new();
    for i in 0..cfg.layout().total() {
        let _ = writeln!(out, "{}\t{}", synthetic_word(a, i), synthetic_word(b, i));
    }
    out
}

/// One lexicon per (source, target) pair.
pub struct LexiconSet {
    pairs: BTreeMap<(String, String), Lexicon>,
}

impl LexiconSet {
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<LexiconSet> {
        let mut pairs = BTreeMap::new();
        for s in &cfg.languages {
            for t in &cfg.languages {
                if s != t {
                    pairs.insert((s.clone(), t.clone()), Lexicon::parse(&synthetic_lexicon(cfg, s, t))?);
                }
            }
        }
        Ok(LexiconSet { pairs })
    }
}

impl TranslationBackend for LexiconSet {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn char_limit(&self) -> Option<usize> {
        None
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn translate_chunk(&self, text: &str, source: &Language, target: &Language) -> Result<String> {
        let key = (source.as_str().to_string(), target.as_str().to_string());
        match self.pairs.get(&key) {
            Some(lex) => Ok(lex.apply(text)),
            None => Err(Error::Backend {
                attempts: 1,
                message: format!("no lexicon for {source} -> {target}"),
            }),
        }
    }
}

/// Articles with exactly the given (labelled, total) paragraph counts per
/// language, ten paragraphs per article, labelled paragraphs spread evenly.
pub fn paragraph_count_fixture(counts: &[(&str, usize, usize)]) -> Result<(Vec<Article>, LabelTable)> {
    let n_tech = Subtask::Persuasion.class_count();
    let mut articles = Vec::new();
    let mut labels = LabelTable::new(Subtask::Persuasion);
    for &(lang, labeled, total) in counts {
        if labeled > total {
            return Err(Error::Config(format!("{lang}: {labeled} labelled of {total} paragraphs")));
        }
        for (a, start) in (0..total).step_by(10).enumerate() {
            let id = format!("{lang}{:05}", a + 1);
            let end = (start + 10).min(total);
            for j in start..end {
                // j is labelled when the running quota steps up at j.
                if (j + 1) * labeled / total > j * labeled / total {
                    labels.insert(
                        ItemKey::paragraph(&id, j - start + 1),
                        Label::Multi(multi_hot(&[j % n_tech], n_tech)),
                    )?;
                }
            }
            articles.push(Article {
                id,
                language: Language::new(lang),
                title: String::new(),
                paragraphs: (start..end).map(|j| format!("{} {j}.", synthetic_word(lang, j % 150))).collect(),
            });
        }
    }
    Ok((articles, labels))
}

/// Items per language of a persuasion set.
pub fn paragraph_counts(set: &LabeledSet) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for item in &set.items {
        *m.entry(item.language().to_string()).or_insert(0) += 1;
    }
    m
}

/// The cleaned corpus with an article-level split and a shared vocabulary.
pub struct Prepared {
    pub corpus: SyntheticCorpus,
    pub corpus_hash: String,
    /// Article id -> part (0 train, 1 validation, 2 test).
    pub plan: SplitPlan,
    pub vocab: Vocab,
}

pub const TRAIN: usize = 0;
pub const VALIDATION: usize = 1;
pub const TEST: usize = 2;

impl Prepared {
    /// Generate, clean, split 70/15/15 by genre and language, and build
    /// the vocabulary over all cleaned text.
    pub fn new(cfg: &SyntheticConfig, vocab_size: usize, split_seed: u64) -> Result<Prepared> {
        let raw = generate_corpus(cfg)?;
        let corpus_hash = raw.hash();
        let corpus = raw.clean(&CleaningRules::default())?;
        let genre_set = build_training_set(&corpus.articles, &corpus.genres, Subtask::Genre, false)?;
        let plan = stratified_split(
            &genre_set,
            &[StratumKey::Label, StratumKey::Language],
            SplitStrategy::Fractions {
                train: 0.7,
                val: 0.15,
                test: 0.15,
            },
            split_seed,
        )?;
        let texts: Vec<String> = corpus.articles.iter().map(Article::full_text).collect();
        let vocab = Vocab::build(texts.iter().map(String::as_str), vocab_size)?;
        Ok(Prepared {
            corpus,
            corpus_hash,
            plan,
            vocab,
        })
    }

    pub fn articles(&self, parts: &[usize]) -> Vec<Article> {
        self.corpus
            .articles
            .iter()
            .filter(|a| self.plan.fold_of(&a.id).is_some_and(|p| parts.contains(&p)))
            .cloned()
            .collect()
    }

    pub fn set(&self, task: Subtask, part: usize, include_unlabeled: bool) -> Result<LabeledSet> {
        let articles = self.articles(&[part]);
        let ids: BTreeSet<&str> = articles.iter().map(|a| a.id.as_str()).collect();
        let mut labels = LabelTable::new(task);
        for (key, label) in &self.corpus.labels(task).entries {
            if ids.contains(key.article_id.as_str()) {
                labels.insert(key.clone(), label.clone())?;
            }
        }
        build_training_set(&articles, &labels, task, include_unlabeled)
    }

    pub fn languages(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.corpus.articles.iter().map(|a| a.language.to_string()).collect();
        set.into_iter().collect()
    }

    /// Model input sequences of whole articles, for masked-LM training.
    pub fn article_sequences(&self, parts: &[usize], max_len: usize) -> Vec<TokenSeq> {
        self.articles(parts)
            .iter()
            .map(|a| encode(&a.full_text(), &self.vocab, max_len))
            .collect()
    }
}

fn keep_languages(set: &LabeledSet, languages: &[String]) -> LabeledSet {
    LabeledSet {
        subtask: set.subtask,
        items: set
            .items
            .iter()
            .filter(|i| languages.iter().any(|l| l == i.language().as_str()))
            .cloned()
            .collect(),
    }
}

/// Encoder size, training schedule, optional TAPT and adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSetup {
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub tapt: Option<TaptConfig>,
    pub selection: SelectionStrategy,
    /// Rebalance single-label training sets by oversampling.
    #[serde(default)]
    pub oversample: bool,
}

impl FitSetup {
    /// Full fine-tuning with the `st1_full` schedule on the desk encoder.
    pub fn desk_full() -> FitSetup {
        FitSetup {
            model: ModelConfig::default(),
            train: TrainConfig::st1_full().desk_scaled(),
            adapter: None,
            tapt: None,
            selection: SelectionStrategy::OverallBest,
            oversample: true,
        }
    }

    /// TAPT, then Houlsby adapters (r = 8) with the `st1_adapter` schedule.
    /// Desk calibration: TAPT at 3x the desk rate, adapters for 60 epochs
    /// at 2x.
    pub fn desk_adapter_tapt() -> FitSetup {
        let mut train = TrainConfig::st1_adapter().desk_scaled();
        train.epochs = 60;
        train.peak_lr *= 2.0;
        let mut tapt = TaptConfig::default().desk_scaled();
        tapt.peak_lr *= 3.0;
        FitSetup {
            train,
            adapter: Some(AdapterConfig::houlsby(8)),
            tapt: Some(tapt),
            ..FitSetup::desk_full()
        }
    }

    /// Multilingual persuasion schedule on the desk encoder.
    pub fn desk_persuasion() -> FitSetup {
        FitSetup {
            train: TrainConfig::st3_multi().desk_scaled(),
            oversample: false,
            ..FitSetup::desk_full()
        }
    }
}

pub struct Fitted {
    pub model: Model,
    pub series: CheckpointSeries,
    pub selection: Selection,
    pub tapt: Option<TaptReport>,
    pub threshold: f64,
}

impl Fitted {
    /// The model restored to the epoch selected for `language`.
    pub fn model_for(&self, language: &str) -> Result<Model> {
        let epoch = match &self.selection {
            Selection::Single(e) => *e,
            Selection::PerLanguage(m) => *m
                .get(language)
                .ok_or_else(|| Error::Contract(format!("no checkpoint selected for {language}")))?,
        };
        let mut m = self.model.clone();
        self.series.restore(&mut m, epoch)?;
        Ok(m)
    }

    pub fn checkpoint_hash(&self, language: &str) -> Result<String> {
        Ok(sha256_hex(&encode_snapshot(&self.model_for(language)?.params)))
    }
}

/// Builds the encoder (seeded by `seed`), optionally runs TAPT on
/// `tapt_corpus`, then fine-tunes.
pub fn fit(
    task: Subtask,
    train: &LabeledSet,
    validation: Option<&LabeledSet>,
    tapt_corpus: &[TokenSeq],
    vocab: &Vocab,
    setup: &FitSetup,
    seed: u64,
) -> Result<Fitted> {
    let mut model = build_encoder(&setup.model, seed)?;
    let tapt_report = match &setup.tapt {
        Some(cfg) => Some(tapt(&mut model, tapt_corpus, &TaptConfig { seed, ..cfg.clone() })?),
        None => None,
    };
    let mut fitted = fine_tune(model, task, train, validation, vocab, setup, seed)?;
    fitted.tapt = tapt_report;
    Ok(fitted)
}

/// Adds the task head and (per `setup`) adapters to `model`, trains and
/// selects a checkpoint. Without validation the epoch with the lowest
/// training loss is chosen.
pub fn fine_tune(
    mut model: Model,
    task: Subtask,
    train: &LabeledSet,
    validation: Option<&LabeledSet>,
    vocab: &Vocab,
    setup: &FitSetup,
    seed: u64,
) -> Result<Fitted> {
    if vocab.len() > model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds model size {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    model.add_head(HeadConfig::new(task), seed);
    if let Some(a) = setup.adapter {
        model = insert_adapters(model, a, seed)?;
    }
    let train = if setup.oversample && !task.is_multilabel() {
        oversample_all(train, seed, &[])?
    } else {
        train.clone()
    };
    let max_len = model.config.max_len;
    let train_ex = encode_examples(&train, vocab, max_len);
    let val_ex = validation.map(|v| encode_examples(v, vocab, max_len));
    let weights = if setup.train.class_weighting {
        let c = task.class_count();
        let rows: Vec<Vec<bool>> = train_ex.iter().map(|e| e.target.to_row(c)).collect();
        Some(class_weights(&rows, WeightScheme::InverseFreq, DEFAULT_CLAMP)?.weights)
    } else {
        None
    };
    let cfg = TrainConfig {
        seed,
        ..setup.train.clone()
    };
    let job = TrainJob {
        task,
        train: &train_ex,
        validation: val_ex.as_deref(),
        class_weights: weights.as_deref(),
    };
    let series = train_model(&mut model, &job, &cfg)?;
    let strategy = if val_ex.is_some() {
        setup.selection
    } else {
        SelectionStrategy::MinTrainLoss
    };
    let selection = select_checkpoint(&series, strategy)?;
    if let Selection::Single(e) = selection {
        series.restore(&mut model, e)?;
    }
    Ok(Fitted {
        model,
        series,
        selection,
        tapt: None,
        threshold: cfg.threshold,
    })
}

/// Model inputs for the items of a set, deduplicated by key.
pub fn predict_inputs(set: &LabeledSet, vocab: &Vocab, max_len: usize) -> Vec<PredictInput> {
    let mut seen = BTreeSet::new();
    set.items
        .iter()
        .filter(|i| seen.insert(i.key.to_string()))
        .map(|i| PredictInput {
            key: i.key.to_string(),
            language: i.language().to_string(),
            text: item_text(i, vocab, max_len),
        })
        .collect()
}

/// Scores predictions against the labels of `gold`.
pub fn score(pred: &PredictionSet, gold: &LabeledSet) -> Result<LanguageReport> {
    let c = gold.subtask.class_count();
    let g: BTreeMap<String, Vec<bool>> = gold.items.iter().map(|i| (i.key.to_string(), i.label.to_row(c))).collect();
    per_language_report(&pred.labels(), &g, &pred.languages(), gold.subtask.registry().names())
}

/// Predicts every language of `set` with the checkpoint selected for it.
pub fn evaluate(fitted: &Fitted, vocab: &Vocab, set: &LabeledSet) -> Result<(PredictionSet, LanguageReport)> {
    let max_len = fitted.model.config.max_len;
    let mut out = PredictionSet::new(set.subtask);
    for lang in set.languages() {
        let model = fitted.model_for(lang.as_str())?;
        let inputs = predict_inputs(&set.filter_language(&lang), vocab, max_len);
        let p = predict(&model, &vocab.hash(), vocab, set.subtask, &inputs, fitted.threshold)?;
        out.items.extend(p.items);
    }
    let report = score(&out, set)?;
    Ok((out, report))
}

/// Micro F1 for the multilabel tasks, macro F1 for genre.
pub fn headline(task: Subtask, report: &crate::eval::MetricsReport) -> f64 {
    if task.is_multilabel() {
        report.micro.f1
    } else {
        report.macro_avg.f1
    }
}

pub fn metric_name(task: Subtask) -> &'static str {
    if task.is_multilabel() {
        "f1_micro"
    } else {
        "f1_macro"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub variant: String,
    pub seed: u64,
    pub selection: Selection,
    pub validation_f1: Option<f64>,
    pub test: LanguageReport,
    pub metrics_tsv: String,
    pub tapt_losses: Option<Vec<f64>>,
    pub checkpoint: String,
    pub predictions: PredictionSet,
}

impl PipelineRun {
    pub fn test_f1(&self) -> f64 {
        self.test.overall.macro_avg.f1
    }
}

/// Genre classification end to end: train on the oversampled training
/// part, select on validation, score the test part. TAPT (when set up)
/// reads every article of the corpus.
pub fn run_genre_pipeline(data: &Prepared, variant: &str, setup: &FitSetup, seed: u64) -> Result<PipelineRun> {
    let task = Subtask::Genre;
    let train = data.set(task, TRAIN, false)?;
    let val = data.set(task, VALIDATION, false)?;
    let test = data.set(task, TEST, false)?;
    let tapt_corpus = if setup.tapt.is_some() {
        data.article_sequences(&[TRAIN, VALIDATION, TEST], setup.model.max_len)
    } else {
        Vec::new()
    };
    let fitted = fit(task, &train, Some(&val), &tapt_corpus, &data.vocab, setup, seed)?;
    let (predictions, report) = evaluate(&fitted, &data.vocab, &test)?;
    let validation_f1 = match &fitted.selection {
        Selection::Single(e) => fitted.series.record(*e).and_then(|r| r.val_overall),
        Selection::PerLanguage(_) => None,
    };
    Ok(PipelineRun {
        variant: variant.to_string(),
        seed,
        selection: fitted.selection.clone(),
        validation_f1,
        checkpoint: sha256_hex(&encode_snapshot(&fitted.model.params)),
        test: report,
        metrics_tsv: fitted.series.metrics_tsv(),
        tapt_losses: fitted.tapt.map(|t| t.epoch_losses),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub language: String,
    pub setting: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub task: Subtask,
    pub seeds: Vec<u64>,
    pub cells: Vec<ComparisonCell>,
    /// Setting / language / seed -> checkpoint hash.
    pub checkpoints: BTreeMap<String, String>,
}

impl ComparisonReport {
    pub fn cell(&self, language: &str, setting: &str) -> Option<&ComparisonCell> {
        self.cells.iter().find(|c| c.language == language && c.setting == setting)
    }

    /// `language,setting,metric,mean,std,runs`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,setting,metric,mean,std,runs\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{}",
                c.language,
                c.setting,
                metric_name(self.task),
                c.mean,
                c.std,
                c.scores.len()
            );
        }
        out
    }
}

fn cell(language: &str, setting: &str, scores: Vec<f64>) -> ComparisonCell {
    let (mean, std) = mean_std(&scores);
    ComparisonCell {
        language: language.to_string(),
        setting: setting.to_string(),
        scores,
        mean,
        std,
    }
}

fn check_languages(data: &Prepared, languages: &[String]) -> Result<Vec<String>> {
    let present = data.languages();
    if languages.is_empty() {
        return Ok(present);
    }
    for l in languages {
        if !present.contains(l) {
            return Err(Error::Validation(format!("language {l} is not in the pooled corpus")));
        }
    }
    Ok(languages.to_vec())
}

/// One model per language and one pooled model per seed, each scored on
/// every language's test items. The pooled model is validated per
/// language when the setup selects per language.
pub fn run_mono_vs_multi(
    data: &Prepared,
    task: Subtask,
    setup: &FitSetup,
    languages: &[String],
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let languages = check_languages(data, languages)?;
    let include = task == Subtask::Persuasion;
    let train = keep_languages(&data.set(task, TRAIN, include)?, &languages);
    let val = keep_languages(&data.set(task, VALIDATION, include)?, &languages);
    let test = keep_languages(&data.set(task, TEST, include)?, &languages);
    let tapt_all = if setup.tapt.is_some() {
        data.article_sequences(&[TRAIN, VALIDATION, TEST], setup.model.max_len)
    } else {
        Vec::new()
    };
    let mut mono: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut multi: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();
    for &seed in seeds {
        for lang in &languages {
            let l = Language::new(lang);
            let tapt_corpus: Vec<TokenSeq> = if setup.tapt.is_some() {
                data.articles(&[TRAIN, VALIDATION, TEST])
                    .iter()
                    .filter(|a| a.language == l)
                    .map(|a| encode(&a.full_text(), &data.vocab, setup.model.max_len))
                    .collect()
            } else {
                Vec::new()
            };
            let fitted = fit(
                task,
                &train.filter_language(&l),
                Some(&val.filter_language(&l)),
                &tapt_corpus,
                &data.vocab,
                setup,
                seed,
            )?;
            let (_, report) = evaluate(&fitted, &data.vocab, &test.filter_language(&l))?;
            mono.entry(lang.clone()).or_default().push(headline(task, &report.overall));
            checkpoints.insert(format!("mono/{lang}/{seed}"), fitted.checkpoint_hash(lang)?);
        }
        let fitted = fit(task, &train, Some(&val), &tapt_all, &data.vocab, setup, seed)?;
        let (_, report) = evaluate(&fitted, &data.vocab, &test)?;
        for lang in &languages {
            let r = report
                .per_language
                .get(lang)
                .ok_or_else(|| Error::Validation(format!("no test items for {lang}")))?;
            multi.entry(lang.clone()).or_default().push(headline(task, r));
            checkpoints.insert(format!("multi/{lang}/{seed}"), fitted.checkpoint_hash(lang)?);
        }
    }
    let mut cells = Vec::new();
    for lang in &languages {
        cells.push(cell(lang, "mono", mono.remove(lang).unwrap_or_default()));
        cells.push(cell(lang, "multi", multi.remove(lang).unwrap_or_default()));
    }
    Ok(ComparisonReport {
        task,
        seeds: seeds.to_vec(),
        cells,
        checkpoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub held_out: String,
    pub seed: u64,
    /// Score on the held-out language's test items.
    pub held_out_f1: f64,
    /// Score on the test items of the training languages.
    pub in_training_f1: f64,
    pub checkpoint: String,
}

pub fn holdout_csv(task: Subtask, rows: &[HoldoutRow]) -> String {
    let m = metric_name(task);
    let mut out = format!("held_out,seed,{m}_held_out,{m}_in_training\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4}", r.held_out, r.seed, r.held_out_f1, r.in_training_f1);
    }
    out
}

/// Trains on every language but `held_out` and scores the held-out
/// language zero-shot.
pub fn run_zero_shot_holdout(data: &Prepared, task: Subtask, setup: &FitSetup, held_out: &str, seed: u64) -> Result<HoldoutRow> {
    let languages = data.languages();
    if languages.len() < 2 {
        return Err(Error::Validation("zero-shot holdout needs at least two languages".into()));
    }
    if !languages.iter().any(|l| l == held_out) {
        return Err(Error::Validation(format!("language {held_out} is not in the corpus")));
    }
    let rest: Vec<String> = languages.iter().filter(|l| *l != held_out).cloned().collect();
    let include = task == Subtask::Persuasion;
    let train = keep_languages(&data.set(task, TRAIN, include)?, &rest);
    let val = keep_languages(&data.set(task, VALIDATION, include)?, &rest);
    let test = data.set(task, TEST, include)?;
    let tapt_corpus: Vec<TokenSeq> = if setup.tapt.is_some() {
        data.articles(&[TRAIN, VALIDATION, TEST])
            .iter()
            .filter(|a| a.language.as_str() != held_out)
            .map(|a| encode(&a.full_text(), &data.vocab, setup.model.max_len))
            .collect()
    } else {
        Vec::new()
    };
    // The held-out language has no validation data of its own.
    let single = FitSetup {
        selection: match setup.selection {
            SelectionStrategy::PerLanguage => SelectionStrategy::OverallBest,
            s => s,
        },
        ..setup.clone()
    };
    let fitted = fit(task, &train, Some(&val), &tapt_corpus, &data.vocab, &single, seed)?;
    let (_, seen) = evaluate(&fitted, &data.vocab, &keep_languages(&test, &rest))?;
    let (_, unseen) = evaluate(&fitted, &data.vocab, &test.filter_language(&Language::new(held_out)))?;
    Ok(HoldoutRow {
        held_out: held_out.to_string(),
        seed,
        held_out_f1: headline(task, &unseen.overall),
        in_training_f1: headline(task, &seen.overall),
        checkpoint: sha256_hex(&encode_snapshot(&fitted.model.params)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub source: String,
    pub target: String,
    /// `direct` on the diagonal, `translate_test` elsewhere.
    pub route: String,
    pub f1: f64,
    /// The target model applied to the untranslated source text.
    pub f1_untranslated: f64,
    /// Translated predictions equal untranslated ones bit for bit.
    pub same_as_untranslated: bool,
    /// Every prediction carries its route.
    pub routes_complete: bool,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: Subtask,
    pub backend: String,
    pub cells: Vec<SweepCell>,
    pub predictions: BTreeMap<String, PredictionSet>,
}

impl SweepReport {
    pub fn cell(&self, source: &str, target: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.source == source && c.target == target)
    }

    pub fn to_csv(&self) -> String {
        let m = metric_name(self.task);
        let mut out = format!("source,target,route,{m},{m}_untranslated,same_as_untranslated,routes_complete,failures\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{},{},{}",
                c.source, c.target, c.route, c.f1, c.f1_untranslated, c.same_as_untranslated, c.routes_complete, c.failures
            );
        }
        out
    }
}

/// Scores every test language through every language model: directly on
/// the diagonal, translated into the model's language elsewhere.
pub fn run_translate_test_sweep(
    test: &LabeledSet,
    models: &BTreeMap<String, Model>,
    vocab: &Vocab,
    backend: &dyn TranslationBackend,
    threshold: f64,
) -> Result<SweepReport> {
    let task = test.subtask;
    let vocab_hash = vocab.hash();
    let mut report = SweepReport {
        task,
        backend: backend.name().to_string(),
        cells: Vec::new(),
        predictions: BTreeMap::new(),
    };
    for source in test.languages() {
        let subset = test.filter_language(&source);
        for (target, model) in models {
            let inputs = predict_inputs(&subset, vocab, model.config.max_len);
            let plan = if source.as_str() == target {
                RoutePlan::Direct { model: target.clone() }
            } else {
                RoutePlan::TranslateTest {
                    target: target.clone(),
                    model: target.clone(),
                }
            };
            let table = RoutingTable(BTreeMap::from([(source.to_string(), plan.clone())]));
            let routed = BTreeMap::from([(
                target.clone(),
                RoutedModel {
                    members: vec![model],
                    spec: None,
                    vocab,
                    vocab_hash: vocab_hash.clone(),
                },
            )]);
            let routed_pred = route_and_predict(&inputs, &table, backend, &routed, task, threshold)?;
            let plain = predict(model, &vocab_hash, vocab, task, &inputs, threshold)?;
            let same = routed_pred.items.len() == plain.items.len()
                && routed_pred.items.iter().all(|(k, p)| {
                    plain.items.get(k).is_some_and(|q| {
                        p.labels == q.labels && p.scores.iter().zip(&q.scores).all(|(a, b)| a.to_bits() == b.to_bits())
                    })
                });
            let complete = routed_pred.items.values().all(|p| {
                p.route.as_ref().is_some_and(|r| {
                    r.model == *target && r.source_language == source.as_str() && r.model_language == *target
                })
            });
            let f1 = headline(task, &score(&routed_pred, &subset)?.overall);
            let f1_plain = headline(task, &score(&plain, &subset)?.overall);
            report.cells.push(SweepCell {
                source: source.to_string(),
                target: target.clone(),
                route: match plan {
                    RoutePlan::Direct { .. } => "direct".into(),
                    RoutePlan::TranslateTest { .. } => "translate_test".into(),
                },
                f1,
                f1_untranslated: f1_plain,
                same_as_untranslated: same,
                routes_complete: complete,
                failures: routed_pred.errors.len(),
            });
            report.predictions.insert(format!("{source}-{target}"), routed_pred);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroLabelReport {
    /// Language -> (training items without, with zero-label paragraphs).
    pub counts: BTreeMap<String, (usize, usize)>,
    pub without: Vec<f64>,
    pub with: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl ZeroLabelReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,seed,f1_micro\n");
        for (i, seed) in self.seeds.iter().enumerate() {
            let _ = writeln!(out, "without_zero_label,{seed},{:.4}", self.without[i]);
            let _ = writeln!(out, "with_zero_label,{seed},{:.4}", self.with[i]);
        }
        for (name, xs) in [("without_zero_label", &self.without), ("with_zero_label", &self.with)] {
            let (m, s) = mean_std(xs);
            let _ = writeln!(out, "{name},mean,{m:.4}");
            let _ = writeln!(out, "{name},std,{s:.4}");
        }
        out
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("language,without_zero_label,with_zero_label\n");
        for (l, (a, b)) in &self.counts {
            let _ = writeln!(out, "{l},{a},{b}");
        }
        out
    }
}

/// Persuasion trained with and without the paragraphs that carry no
/// technique, both scored on every test paragraph.
pub fn run_zero_label(data: &Prepared, setup: &FitSetup, seeds: &[u64]) -> Result<ZeroLabelReport> {
    let task = Subtask::Persuasion;
    let without = data.set(task, TRAIN, false)?;
    let with = data.set(task, TRAIN, true)?;
    let val = data.set(task, VALIDATION, true)?;
    let test = data.set(task, TEST, true)?;
    let (a, b) = (paragraph_counts(&without), paragraph_counts(&with));
    let counts = b
        .iter()
        .map(|(l, &n)| (l.clone(), (a.get(l).copied().unwrap_or(0), n)))
        .collect();
    let mut report = ZeroLabelReport {
        counts,
        without: Vec::new(),
        with: Vec::new(),
        seeds: seeds.to_vec(),
    };
    for &seed in seeds {
        for (train, out) in [(&without, &mut report.without), (&with, &mut report.with)] {
            let fitted = fit(task, train, Some(&val), &[], &data.vocab, setup, seed)?;
            let (_, r) = evaluate(&fitted, &data.vocab, &test)?;
            out.push(r.overall.micro.f1);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaptEffect {
    pub before: f64,
    pub after: f64,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: String,
}

impl TaptEffect {
    pub fn relative_drop(&self) -> f64 {
        (self.before - self.after) / self.before
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mlm_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l:.6}", i + 1);
        }
        let _ = writeln!(out, "held_out_before,{:.6}", self.before);
        let _ = writeln!(out, "held_out_after,{:.6}", self.after);
        out
    }
}

/// Masked-token loss on the test articles before and after TAPT on the
/// training and validation articles.
pub fn run_tapt_effect(data: &Prepared, model: &ModelConfig, cfg: &TaptConfig, seed: u64) -> Result<TaptEffect> {
    let train = data.article_sequences(&[TRAIN, VALIDATION], model.max_len);
    let held_out = data.article_sequences(&[TEST], model.max_len);
    let mut m = build_encoder(model, seed)?;
    let before = mlm_eval_loss(&m, &held_out, &cfg.mask, seed)?;
    let report = tapt(&mut m, &train, &TaptConfig { seed, ..cfg.clone() })?;
    let after = mlm_eval_loss(&m, &held_out, &cfg.mask, seed)?;
    Ok(TaptEffect {
        before,
        after,
        epoch_losses: report.epoch_losses,
        checkpoint: sha256_hex(&encode_snapshot(&m.params)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSpec {
    Identity,
    /// Word tables generated from the synthetic alphabets.
    Lexicon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSource {
    /// One model per language.
    Mono,
    /// The pooled model at each language's best validation epoch.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    GenrePipeline {
        variants: BTreeMap<String, FitSetup>,
    },
    MonoVsMulti {
        task: Subtask,
        setup: FitSetup,
        #[serde(default)]
        languages: Vec<String>,
    },
    ZeroShotHoldout {
        task: Subtask,
        setup: FitSetup,
        /// Empty holds out each language in turn.
        #[serde(default)]
        held_out: Vec<String>,
    },
    TranslateTestSweep {
        task: Subtask,
        setup: FitSetup,
        backend: BackendSpec,
        checkpoints: CheckpointSource,
    },
    ZeroLabel {
        setup: FitSetup,
    },
    TaptEffect {
        #[serde(default)]
        model: ModelConfig,
        tapt: TaptConfig,
    },
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_split_seed() -> u64 {
    7
}

fn default_vocab_size() -> usize {
    ModelConfig::default().vocab_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default)]
    pub corpus: SyntheticConfig,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub experiment: Experiment,
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    experiment: &'a str,
    corpus_hash: &'a str,
    vocab_hash: String,
    split_plan: String,
    seeds: &'a [u64],
    checkpoints: BTreeMap<String, String>,
}

/// Report files keyed by file name; every file is a pure function of the
/// manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub files: BTreeMap<String, String>,
}

pub fn run_manifest(manifest: &ExperimentManifest) -> Result<ExperimentOutput> {
    if manifest.seeds.is_empty() {
        return Err(Error::Config("manifest lists no seeds".into()));
    }
    let data = Prepared::new(&manifest.corpus, manifest.vocab_size, manifest.split_seed)?;
    let mut files = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();
    let seeds = &manifest.seeds;
    match &manifest.experiment {
        Experiment::GenrePipeline { variants } => {
            let mut summary = String::from("variant,seed,selected,validation_f1_macro,test_f1_macro,test_items\n");
            for (name, setup) in variants {
                for &seed in seeds {
                    let run = run_genre_pipeline(&data, name, setup, seed)?;
                    let selected = match &run.selection {
                        Selection::Single(e) => e.to_string(),
                        Selection::PerLanguage(_) => "per_language".into(),
                    };
                    let val = run.validation_f1.map_or("NA".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(summary, "{name},{seed},{selected},{val},{:.4},{}", run.test_f1(), run.test.overall.items);
                    let stem = format!("{name}_seed{seed}");
                    files.insert(format!("{stem}_test.csv"), run.test.to_csv());
                    files.insert(format!("{stem}_metrics.tsv"), run.metrics_tsv.clone());
                    files.insert(format!("{stem}_predictions.json"), run.predictions.to_json()?);
                    if let Some(losses) = &run.tapt_losses {
                        let mut s = String::from("epoch,mlm_loss\n");
                        for (i, l) in losses.iter().enumerate() {
                            let _ = writeln!(s, "{},{l:.6}", i + 1);
                        }
                        files.insert(format!("{stem}_tapt.csv"), s);
                    }
                    checkpoints.insert(stem, run.checkpoint);
                }
            }
            files.insert("genre_pipeline.csv".into(), summary);
        }
        Experiment::MonoVsMulti { task, setup, languages } => {
            let report = run_mono_vs_multi(&data, *task, setup, languages, seeds)?;
            files.insert("mono_vs_multi.csv".into(), report.to_csv());
            checkpoints.extend(report.checkpoints);
        }
        Experiment::ZeroShotHoldout { task, setup, held_out } => {
            let targets = if held_out.is_empty() { data.languages() } else { held_out.clone() };
            let mut rows = Vec::new();
            for l in &targets {
                for &seed in seeds {
                    let row = run_zero_shot_holdout(&data, *task, setup, l, seed)?;
                    checkpoints.insert(format!("holdout/{l}/{seed}"), row.checkpoint.clone());
                    rows.push(row);
                }
            }
            files.insert("zero_shot_holdout.csv".into(), holdout_csv(*task, &rows));
        }
        Experiment::TranslateTestSweep {
            task,
            setup,
            backend,
            checkpoints: source,
        } => {
            let backend: Box<dyn TranslationBackend> = match backend {
                BackendSpec::Identity => Box::new(Identity),
                BackendSpec::Lexicon => Box::new(LexiconSet::synthetic(&manifest.corpus)?),
            };
            let include = *task == Subtask::Persuasion;
            let train = data.set(*task, TRAIN, include)?;
            let val = data.set(*task, VALIDATION, include)?;
            let test = data.set(*task, TEST, include)?;
            let mut summary = String::new();
            for &seed in seeds {
                let mut models = BTreeMap::new();
                let mut threshold = setup.train.threshold;
                match source {
                    CheckpointSource::Mono => {
                        for l in data.languages() {
                            let lang = Language::new(&l);
                            let fitted = fit(
                                *task,
                                &train.filter_language(&lang),
                                Some(&val.filter_language(&lang)),
                                &[],
                                &data.vocab,
                                setup,
                                seed,
                            )?;
                            threshold = fitted.threshold;
                            models.insert(l.clone(), fitted.model_for(&l)?);
                        }
                    }
                    CheckpointSource::Multi => {
                        let per_language = FitSetup {
                            selection: SelectionStrategy::PerLanguage,
                            ..setup.clone()
                        };
                        let fitted = fit(*task, &train, Some(&val), &[], &data.vocab, &per_language, seed)?;
                        threshold = fitted.threshold;
                        for l in data.languages() {
                            models.insert(l.clone(), fitted.model_for(&l)?);
                        }
                    }
                }
                for (l, m) in &models {
                    checkpoints.insert(format!("{l}/{seed}"), sha256_hex(&encode_snapshot(&m.params)));
                }
                let report = run_translate_test_sweep(&test, &models, &data.vocab, backend.as_ref(), threshold)?;
                let csv = report.to_csv();
                if summary.is_empty() {
                    summary = format!("seed,{}", csv.lines().next().unwrap_or_default());
                    summary.push('\n');
                }
                for line in csv.lines().skip(1) {
                    let _ = writeln!(summary, "{seed},{line}");
                }
                for (k, p) in &report.predictions {
                    files.insert(format!("sweep_seed{seed}_{k}.json"), p.to_json()?);
                }
            }
            files.insert("translate_test_sweep.csv".into(), summary);
        }
        Experiment::ZeroLabel { setup } => {
            let report = run_zero_label(&data, setup, seeds)?;
            files.insert("zero_label.csv".into(), report.to_csv());
            files.insert("zero_label_counts.csv".into(), report.counts_csv());
        }
        Experiment::TaptEffect { model, tapt } => {
            let mut s = String::from("seed,held_out_before,held_out_after,relative_drop\n");
            for &seed in seeds {
                let e = run_tapt_effect(&data, model, tapt, seed)?;
                let _ = writeln!(s, "{seed},{:.6},{:.6},{:.6}", e.before, e.after, e.relative_drop());
                files.insert(format!("tapt_seed{seed}.csv"), e.to_csv());
                checkpoints.insert(format!("tapt/{seed}"), e.checkpoint);
            }
            files.insert("tapt_effect.csv".into(), s);
        }
    }
    let provenance = Provenance {
        experiment: &manifest.name,
        corpus_hash: &data.corpus_hash,
        vocab_hash: data.vocab.hash(),
        split_plan: sha256_hex(data.plan.to_tsv().as_bytes()),
        seeds,
        checkpoints,
    };
    files.insert("provenance.json".into(), serde_json::to_string_pretty(&provenance)?);
    files.insert("split_plan.tsv".into(), data.plan.to_tsv());
    files.insert("manifest.json".into(), manifest.to_json()?);
    Ok(ExperimentOutput { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            languages: vec!["en".into(), "fr".into()],
            articles_per_language: 12,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn words_are_distinct_across_alphabets() {
        let cfg = SyntheticConfig::default();
        let mut all = BTreeSet::new();
        for l in &cfg.languages {
            for i in 0..cfg.layout().total() {
                assert!(all.insert(synthetic_word(l, i)));
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_labels_every_article() {
        let cfg = small();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.articles.len(), 24);
        assert_eq!(a.genres.len(), 24);
        assert_eq!(a.frames.len(), 24);
        let other = generate_corpus(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.hash(), other.hash());
    }

    #[test]
    fn labelled_paragraphs_carry_their_keywords() {
        let cfg = small();
        let c = generate_corpus(&cfg).unwrap();
        let layout = cfg.layout();
        for (key, label) in &c.techniques.entries {
            let a = c.articles.iter().find(|a| a.id == key.article_id).unwrap();
            let text = a.paragraphs[key.paragraph.unwrap() - 1].to_lowercase();
            let row = label.to_row(Subtask::Persuasion.class_count());
            for (t, on) in row.iter().enumerate() {
                if *on {
                    let found = (0..layout.k).any(|j| text.contains(&synthetic_word(a.language.as_str(), layout.technique(t, j))));
                    assert!(found, "{key}");
                }
            }
        }
    }

    #[test]
    fn cleaning_removes_links_and_sharing_but_keeps_paragraphs() {
        let cfg = SyntheticConfig {
            boilerplate_rate: 1.0,
            ..small()
        };
        let raw = generate_corpus(&cfg).unwrap();
        let clean = raw.clean(&CleaningRules::default()).unwrap();
        for a in &clean.articles {
            let text = a.full_text();
            assert!(!text.contains("https://"));
            assert!(!text.contains("Share on Facebook"));
        }
        assert!(raw.articles.iter().any(|a| a.full_text().contains("Share on Facebook")));
    }

    #[test]
    fn clones_share_words() {
        let cfg = SyntheticConfig {
            languages: vec!["en".into(), "xx".into()],
            clones: BTreeMap::from([("xx".to_string(), "en".to_string())]),
            articles_per_language: 4,
            ..SyntheticConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let xx = c.articles.iter().find(|a| a.language.as_str() == "xx").unwrap();
        assert!(xx.title.to_lowercase().split_whitespace().all(|w| w.starts_with("en")));
    }

    #[test]
    fn lexicon_maps_between_alphabets() {
        let cfg = small();
        let lex = Lexicon::parse(&synthetic_lexicon(&cfg, "en", "fr")).unwrap();
        let text = format!("{} {}.", synthetic_word("en", 3), synthetic_word("en", 151));
        assert_eq!(lex.apply(&text).to_lowercase(), format!("{} {}.", synthetic_word("fr", 3), synthetic_word("fr", 151)));
    }

    #[test]
    fn count_fixture_reproduces_counts() {
        let (articles, labels) = paragraph_count_fixture(&REFERENCE_PARAGRAPH_COUNTS).unwrap();
        let without = build_training_set(&articles, &labels, Subtask::Persuasion, false).unwrap();
        let with = build_training_set(&articles, &labels, Subtask::Persuasion, true).unwrap();
        let (a, b) = (paragraph_counts(&without), paragraph_counts(&with));
        for (l, labeled, total) in REFERENCE_PARAGRAPH_COUNTS {
            assert_eq!(a[l], labeled);
            assert_eq!(b[l], total);
        }
    }

    #[test]
    fn split_keeps_articles_whole_across_tasks() {
        let data = Prepared::new(&small(), 2000, 7).unwrap();
        let test_articles: BTreeSet<String> = data
            .set(Subtask::Genre, TEST, false)
            .unwrap()
            .items
            .iter()
            .map(|i| i.key.article_id.clone())
            .collect();
        let paras = data.set(Subtask::Persuasion, TEST, true).unwrap();
        assert!(!paras.is_empty());
        assert!(paras.items.iter().all(|i| test_articles.contains(&i.key.article_id)));
        let train = data.set(Subtask::Persuasion, TRAIN, true).unwrap();
        assert!(train.items.iter().all(|i| !test_articles.contains(&i.key.article_id)));
    }

    #[test]
    fn unknown_language_is_rejected() {
        let data = Prepared::new(&small(), 2000, 7).unwrap();
        let err = run_mono_vs_multi(&data, Subtask::Genre, &FitSetup::desk_full(), &["de".into()], &[0]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn holdout_needs_two_languages() {
        let cfg = SyntheticConfig {
            languages: vec!["en".into()],
            articles_per_language: 8,
            ..SyntheticConfig::default()
        };
        let data = Prepared::new(&cfg, 2000, 7).unwrap();
        let err = run_zero_shot_holdout(&data, Subtask::Genre, &FitSetup::desk_full(), "en", 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn manifest_round_trips() {
        let m = ExperimentManifest {
            name: "genre".into(),
            corpus: small(),
            split_seed: 7,
            vocab_size: 2000,
            seeds: vec![0],
            experiment: Experiment::GenrePipeline {
                variants: BTreeMap::from([("full".to_string(), FitSetup::desk_full())]),
            },
        };
        let back = ExperimentManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
