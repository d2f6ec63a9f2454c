//! Tokenization, vocabularies, corpus/fact files and the synthetic
//! retain/forget corpus generator.
//!
//! Every training sentence is wrapped `<s> … </s>`, and every prefix handed
//! to a language model starts with `<s>`. Out-of-vocabulary tokens seen at
//! evaluation time map to `<unk>`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Deref;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense token identifier.
pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 3] = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("content vocabulary of {available} words cannot render {needed} distinct fact tokens plus filler")]
    VocabTooSmall { needed: usize, available: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("facts file line {line}: {message}")]
    FactsFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How raw text is segmented into token strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Whitespace,
    Char,
}

/// Splits text into token strings. Whitespace mode splits on runs of Unicode
/// whitespace; char mode yields one token per Unicode scalar value.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizeMode::Char => text.chars().map(String::from).collect(),
    }
}

/// Bijection between token strings and dense ids. Ids 0, 1 and 2 are always
/// `<s>`, `</s>` and `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list, which must start with
    /// the three reserved tokens and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < RESERVED.len() || tokens[..3].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CorpusError::InvalidVocab(format!(
                "the first three tokens must be {BOS_TOKEN}, {EOS_TOKEN}, {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id as TokenId).is_some() {
                return Err(CorpusError::InvalidVocab(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved tokens are valid")
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_owned(), self.tokens.len() as TokenId);
            self.tokens.push(token.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: the reserved tokens are always present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    /// Maps ids back to strings; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id).unwrap_or(UNK_TOKEN)).collect()
    }

    /// Encodes a sentence and wraps it in `<s> … </s>`.
    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id_or_unk(t.as_ref())));
        ids.push(EOS);
        TokenSeq(ids)
    }

    /// Encodes a prompt: `<s>` followed by the tokens, no `</s>`.
    pub fn encode_prompt<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id_or_unk(t.as_ref())));
        TokenSeq(ids)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        serde_json::to_writer(writer, &self.tokens).map_err(|e| CorpusError::Io(e.into()))
    }

    pub fn read_json<R: std::io::Read>(reader: R) -> Result<Self, CorpusError> {
        let tokens: Vec<String> =
            serde_json::from_reader(reader).map_err(|e| CorpusError::InvalidVocab(e.to_string()))?;
        Self::from_tokens(tokens)
    }
}

/// Builds a vocabulary with the reserved tokens first and every other token
/// in order of first occurrence across `corpora`.
pub fn build_vocab<S: AsRef<str>>(corpora: &[Vec<S>]) -> Vocabulary {
    let mut vocab = Vocabulary::reserved_only();
    for seq in corpora {
        for token in seq {
            vocab.insert(token.as_ref());
        }
    }
    vocab
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// `x_{<t}` with 1-based `t`: the first `t - 1` tokens.
    pub fn prefix(&self, t: usize) -> &[TokenId] {
        &self.0[..t.saturating_sub(1).min(self.0.len())]
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    /// True when `needle` occurs contiguously in this sequence.
    pub fn contains_run(&self, needle: &[TokenId]) -> bool {
        needle.is_empty() || self.0.windows(needle.len()).any(|w| w == needle)
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0);
        TokenSeq(ids)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

/// One memorizable fact and the prompts used to probe for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactRecord {
    pub fact_id: String,
    /// Prefix copied from a training sentence, starting with `<s>`.
    pub verbatim_prompt: TokenSeq,
    /// Paraphrased prompt that never occurs in training text, starting with `<s>`.
    pub cloze_prompt: TokenSeq,
    pub answer: TokenSeq,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct FactLine {
    fact_id: String,
    split: Split,
    verbatim_prompt: Vec<String>,
    cloze_prompt: Vec<String>,
    answer: Vec<String>,
}

fn strip_bos(ids: &[TokenId]) -> &[TokenId] {
    match ids.first() {
        Some(&BOS) => &ids[1..],
        _ => ids,
    }
}

/// Writes facts as JSON lines with fields `fact_id`, `split`,
/// `verbatim_prompt`, `cloze_prompt`, `answer` in that order. Prompts are
/// written without their leading `<s>`.
pub fn write_facts<W: Write>(mut writer: W, facts: &[FactRecord], vocab: &Vocabulary) -> Result<(), CorpusError> {
    let strings = |ids: &[TokenId]| vocab.decode(ids).into_iter().map(str::to_owned).collect();
    for fact in facts {
        let line = FactLine {
            fact_id: fact.fact_id.clone(),
            split: fact.split,
            verbatim_prompt: strings(strip_bos(&fact.verbatim_prompt)),
            cloze_prompt: strings(strip_bos(&fact.cloze_prompt)),
            answer: strings(&fact.answer),
        };
        serde_json::to_writer(&mut writer, &line).map_err(|e| CorpusError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Token strings of every prompt and answer in a facts file, in file order.
/// Useful for building a vocabulary that covers held-out prompt words.
pub fn read_fact_tokens<R: BufRead>(reader: R) -> Result<Vec<Vec<String>>, CorpusError> {
    let mut out = Vec::new();
    for_each_fact_line(reader, |line| {
        out.push(line.verbatim_prompt);
        out.push(line.cloze_prompt);
        out.push(line.answer);
    })?;
    Ok(out)
}

pub fn read_facts<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<Vec<FactRecord>, CorpusError> {
    let mut facts = Vec::new();
    let mut bad_line = None;
    let mut line_no = 0;
    for_each_fact_line(reader, |line| {
        line_no += 1;
        if line.answer.is_empty() && bad_line.is_none() {
            bad_line = Some(line_no);
        }
        facts.push(FactRecord {
            fact_id: line.fact_id,
            verbatim_prompt: vocab.encode_prompt(&line.verbatim_prompt),
            cloze_prompt: vocab.encode_prompt(&line.cloze_prompt),
            answer: TokenSeq(vocab.encode(&line.answer)),
            split: line.split,
        });
    })?;
    if let Some(line) = bad_line {
        return Err(CorpusError::FactsFormat { line, message: "answer must be non-empty".into() });
    }
    Ok(facts)
}

fn for_each_fact_line<R: BufRead>(reader: R, mut f: impl FnMut(FactLine)) -> Result<(), CorpusError> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FactLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::FactsFormat { line: i + 1, message: e.to_string() })?;
        f(parsed);
    }
    Ok(())
}

/// Reads a corpus file: one document per line, blank lines ignored.
pub fn read_corpus<R: BufRead>(reader: R, mode: TokenizeMode) -> Result<Vec<Vec<String>>, CorpusError> {
    let mut docs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(tokenize(&line, mode));
    }
    Ok(docs)
}

/// Writes `<s> … </s>`-wrapped documents back out as space-joined lines,
/// dropping the sentence markers.
pub fn write_corpus<W: Write>(mut writer: W, docs: &[TokenSeq], vocab: &Vocabulary) -> Result<(), CorpusError> {
    for doc in docs {
        let body: Vec<&str> = vocab
            .decode(doc)
            .into_iter()
            .zip(doc.iter())
            .filter(|(_, &id)| id != BOS && id != EOS)
            .map(|(s, _)| s)
            .collect();
        writeln!(writer, "{}", body.join(" "))?;
    }
    Ok(())
}

/// Parameters of the synthetic retain/forget corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_retain_facts: usize,
    pub n_forget_facts: usize,
    /// Total filler tokens spread over all documents of both corpora.
    pub filler_tokens: usize,
    /// Number of distinct synthetic content words; fact entities and filler
    /// are drawn from this pool.
    pub vocab_content_size: usize,
    pub seed: u64,
}

impl CorpusSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        let fields = [
            ("n_retain_facts", self.n_retain_facts),
            ("n_forget_facts", self.n_forget_facts),
            ("filler_tokens", self.filler_tokens),
            ("vocab_content_size", self.vocab_content_size),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(CorpusError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub retain: Vec<TokenSeq>,
    pub forget: Vec<TokenSeq>,
    pub facts: Vec<FactRecord>,
}

impl SyntheticCorpus {
    pub fn facts_in(&self, split: Split) -> Vec<FactRecord> {
        self.facts.iter().filter(|f| f.split == split).cloned().collect()
    }
}

/// Words the filler walk never produces. Entity names are synthetic
/// consonant-vowel words, so none of these can collide with them.
const MIN_FILLER_WORDS: usize = 20;
const OBJECT_SUFFIXES: [&str; 6] = ["holdings", "group", "partners", "labs", "systems", "capital"];
const CLOZE_LEAD: [&str; 2] = ["sources", "indicate"];

struct Template {
    lead: &'static [&'static str],
    relation: &'static str,
    tail: &'static [&'static str],
}

const TEMPLATES: [Template; 3] = [
    Template { lead: &["reports", "confirmed", "that"], relation: "acquired", tail: &["earlier", "this", "year", "."] },
    Template { lead: &["in", "a", "surprise", "move"], relation: "acquired", tail: &["for", "an", "undisclosed", "sum", "."] },
    Template { lead: &["analysts", "said"], relation: "bought", tail: &["to", "expand", "its", "reach", "."] },
];

const CLOZE_RELATION: &str = "acquired";

struct Fact {
    id: String,
    split: Split,
    subject: String,
    object: String,
    suffix: &'static str,
}

/// Entities, filler chain and facts shared by the training corpus and any
/// held-out documents drawn from the same spec.
struct World {
    facts: Vec<Fact>,
    filler: Vec<String>,
    successors: Vec<[usize; 4]>,
}

const SUCCESSOR_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

fn pseudo_word(mut index: usize, syllables: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let base = CONSONANTS.len() * VOWELS.len();
    let mut word = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        let s = index % base;
        index /= base;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
    }
    word
}

impl World {
    fn new(spec: &CorpusSpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let n_facts = spec.n_retain_facts + spec.n_forget_facts;
        let needed = 2 * n_facts + MIN_FILLER_WORDS;
        if spec.vocab_content_size < needed {
            return Err(CorpusError::VocabTooSmall { needed, available: spec.vocab_content_size });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let base: usize = 14 * 5;
        let mut syllables = 2;
        while base.pow(syllables as u32) < spec.vocab_content_size {
            syllables += 1;
        }
        let mut pool: Vec<String> = (0..spec.vocab_content_size).map(|i| pseudo_word(i, syllables)).collect();
        pool.shuffle(&mut rng);
        let filler = pool.split_off(2 * n_facts);
        let objects = pool.split_off(n_facts);
        let subjects = pool;

        let facts = subjects
            .into_iter()
            .zip(objects)
            .enumerate()
            .map(|(i, (subject, object))| {
                let (split, id) = if i < spec.n_retain_facts {
                    (Split::Retain, format!("retain-{i:04}"))
                } else {
                    (Split::Forget, format!("forget-{:04}", i - spec.n_retain_facts))
                };
                let suffix = OBJECT_SUFFIXES[rng.gen_range(0..OBJECT_SUFFIXES.len())];
                Fact { id, split, subject, object, suffix }
            })
            .collect();

        let successors = (0..filler.len())
            .map(|_| {
                let picks = rand::seq::index::sample(&mut rng, filler.len(), 4);
                [picks.index(0), picks.index(1), picks.index(2), picks.index(3)]
            })
            .collect();

        Ok(Self { facts, filler, successors })
    }

    fn walk_filler(&self, rng: &mut ChaCha8Rng, len: usize, out: &mut Vec<String>) {
        if len == 0 {
            return;
        }
        let mut current = rng.gen_range(0..self.filler.len());
        for _ in 0..len {
            out.push(self.filler[current].clone());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = self.successors[current][3];
            for (slot, w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                acc += w;
                if u < acc {
                    next = self.successors[current][slot];
                    break;
                }
            }
            current = next;
        }
    }

    fn render(template: &Template, fact: &Fact, out: &mut Vec<String>) {
        out.extend(template.lead.iter().map(|s| s.to_string()));
        out.push(fact.subject.clone());
        out.push(template.relation.to_owned());
        out.push(fact.object.clone());
        out.push(fact.suffix.to_owned());
        out.extend(template.tail.iter().map(|s| s.to_string()));
    }

    fn cloze_words(fact: &Fact) -> Vec<String> {
        let mut words: Vec<String> = CLOZE_LEAD.iter().map(|s| s.to_string()).collect();
        words.push(fact.subject.clone());
        words.push(CLOZE_RELATION.to_owned());
        words
    }
}

/// Generates retain and forget corpora with embedded facts.
///
/// Each fact is a unique subject/object pair rendered into three training
/// templates, one document per rendering, padded with filler from a shared
/// random walk. The first template opens its document, and the fact's
/// verbatim prompt is that document's prefix up to the relation word. The
/// cloze prompt uses a lead-in that never appears in training text.
///
/// The vocabulary covers retain documents, then forget documents, then
/// cloze prompts. Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<SyntheticCorpus, CorpusError> {
    let world = World::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));

    let n_docs = world.facts.len() * TEMPLATES.len();
    let per_doc = spec.filler_tokens / n_docs;
    let mut extra = spec.filler_tokens % n_docs;

    let mut retain_docs = Vec::new();
    let mut forget_docs = Vec::new();
    for fact in &world.facts {
        for (t, template) in TEMPLATES.iter().enumerate() {
            let filler = per_doc + usize::from(extra > 0);
            extra = extra.saturating_sub(1);
            let mut doc = Vec::with_capacity(filler + 16);
            if t == 0 {
                World::render(template, fact, &mut doc);
                world.walk_filler(&mut rng, filler, &mut doc);
            } else {
                let before = rng.gen_range(0..=filler);
                world.walk_filler(&mut rng, before, &mut doc);
                World::render(template, fact, &mut doc);
                world.walk_filler(&mut rng, filler - before, &mut doc);
            }
            match fact.split {
                Split::Retain => retain_docs.push(doc),
                Split::Forget => forget_docs.push(doc),
            }
        }
    }
    retain_docs.shuffle(&mut rng);
    forget_docs.shuffle(&mut rng);

    let cloze: Vec<Vec<String>> = world.facts.iter().map(World::cloze_words).collect();
    let mut all: Vec<Vec<String>> = Vec::with_capacity(retain_docs.len() + forget_docs.len() + cloze.len());
    all.extend(retain_docs.iter().cloned());
    all.extend(forget_docs.iter().cloned());
    all.extend(cloze.iter().cloned());
    let vocab = build_vocab(&all);

    let facts = world
        .facts
        .iter()
        .zip(&cloze)
        .map(|(fact, cloze_words)| {
            let template = &TEMPLATES[0];
            let mut verbatim: Vec<&str> = template.lead.to_vec();
            verbatim.push(&fact.subject);
            verbatim.push(template.relation);
            FactRecord {
                fact_id: fact.id.clone(),
                verbatim_prompt: vocab.encode_prompt(&verbatim),
                cloze_prompt: vocab.encode_prompt(cloze_words),
                answer: TokenSeq(vocab.encode(&[fact.object.as_str(), fact.suffix])),
                split: fact.split,
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        retain: retain_docs.iter().map(|d| vocab.encode_sentence(d)).collect(),
        forget: forget_docs.iter().map(|d| vocab.encode_sentence(d)).collect(),
        vocab,
        facts,
    })
}

/// Documents drawn from the same world as [`generate_synthetic`] but never
/// used for training: each opens with a cloze-style mention of a random fact
/// (either split) followed by `filler_per_doc` filler tokens.
pub fn heldout_documents(
    spec: &CorpusSpec,
    vocab: &Vocabulary,
    n_docs: usize,
    filler_per_doc: usize,
) -> Result<Vec<TokenSeq>, CorpusError> {
    let world = World::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let fact = &world.facts[rng.gen_range(0..world.facts.len())];
        let mut doc = World::cloze_words(fact);
        doc.push(fact.object.clone());
        doc.push(fact.suffix.to_owned());
        doc.push(".".to_owned());
        world.walk_filler(&mut rng, filler_per_doc, &mut doc);
        docs.push(vocab.encode_sentence(&doc));
    }
    Ok(docs)
}
