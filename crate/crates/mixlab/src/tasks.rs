// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic task suite: in-context key-value retrieval, letter-label
//! multiple choice, chat reformatting, and weight-stored fact likelihood,
//! plus the segment maps that drive gather/aggregate masking.
//!
//! The vocabulary is closed and concatenative: detokenization is plain
//! string concatenation, so every generated prompt round-trips byte-exactly
//! against its template. Values 0–99 are single tokens, which removes
//! multi-token number effects; the tokenizer-boundary phenomenon is modeled
//! by the trailing-space KV variant instead.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Template words, in vocabulary order.
const TEMPLATE_WORDS: &[&str] = &[
    "Memorize",
    "the",
    "following",
    "dictionary",
    "The",
    "value",
    "of",
    "key",
    "is",
    "Answer",
    "Q",
    "User",
    "Assistant",
];

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Closed token inventory. Ids are assigned in a fixed structural order:
/// BOS, structural tokens, letters A–D, values "0".."99", template words,
/// key lexicon (two-syllable pseudo-words), fact lexicon (three-syllable
/// pseudo-words, disjoint from keys by construction).
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    pub bos: usize,
    pub newline: usize,
    pub colon: usize,
    pub space: usize,
    pub period: usize,
    pub quote: usize,
    letter_base: usize,
    value_base: usize,
    template_base: usize,
    key_base: usize,
    fact_base: usize,
    pub n_keys: usize,
    pub n_facts: usize,
}

impl Vocab {
    pub fn build(n_keys: usize, n_facts: usize) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        // BOS carries a non-printing string so corpus detokenization stays
        // unambiguous; it never appears inside a prompt.
        tokens.push("\u{0}".to_string());
        let bos = 0;
        tokens.push("\n".into());
        tokens.push(":".into());
        tokens.push(" ".into());
        tokens.push(".".into());
        tokens.push("'".into());
        let (newline, colon, space, period, quote) = (1, 2, 3, 4, 5);
        let letter_base = tokens.len();
        for l in ["A", "B", "C", "D"] {
            tokens.push(l.into());
        }
        let value_base = tokens.len();
        for v in 0..100 {
            tokens.push(v.to_string());
        }
        let template_base = tokens.len();
        for w in TEMPLATE_WORDS {
            tokens.push((*w).into());
        }
        // Two-syllable keys.
        let key_base = tokens.len();
        let mut count = 0;
        'keys: for &c1 in CONSONANTS {
            for &v1 in VOWELS {
                for &c2 in CONSONANTS {
                    for &v2 in VOWELS {
                        if count == n_keys {
                            break 'keys;
                        }
                        tokens.push(format!("{c1}{v1}{c2}{v2}"));
                        count += 1;
                    }
                }
            }
        }
        if count < n_keys {
            return Err(Error::Config(format!(
                "key lexicon supports at most {count} keys, requested {n_keys}"
            )));
        }
        // Three-syllable facts (length-disjoint from keys).
        let fact_base = tokens.len();
        count = 0;
        'facts: for &c1 in CONSONANTS {
            for &v1 in VOWELS {
                for &c2 in CONSONANTS {
                    for &v2 in VOWELS {
                        if count == n_facts {
                            break 'facts;
                        }
                        tokens.push(format!("{c1}{v1}{c2}{v2}ta"));
                        count += 1;
                    }
                }
            }
        }
        if count < n_facts {
            return Err(Error::Config(format!(
                "fact lexicon supports at most {count} facts, requested {n_facts}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token '{t}' in vocabulary")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            bos,
            newline,
            colon,
            space,
            period,
            quote,
            letter_base,
            value_base,
            template_base,
            key_base,
            fact_base,
            n_keys,
            n_facts,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, s: &str) -> Result<usize> {
        self.index
            .get(s)
            .copied()
            .ok_or_else(|| Error::Task(format!("token '{}' not in vocabulary", s.escape_debug())))
    }

    pub fn letter(&self, i: usize) -> usize {
        debug_assert!(i < 4);
        self.letter_base + i
    }

    pub fn value(&self, v: u8) -> usize {
        debug_assert!(v < 100);
        self.value_base + v as usize
    }

    pub fn key(&self, i: usize) -> usize {
        debug_assert!(i < self.n_keys);
        self.key_base + i
    }

    pub fn fact(&self, i: usize) -> usize {
        debug_assert!(i < self.n_facts);
        self.fact_base + i
    }

    pub fn word(&self, w: &str) -> usize {
        let i = TEMPLATE_WORDS
            .iter()
            .position(|t| *t == w)
            .unwrap_or_else(|| panic!("'{w}' is not a template word"));
        self.template_base + i
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// True iff `id` is a fact-lexicon token.
    pub fn is_fact_token(&self, id: usize) -> bool {
        id >= self.fact_base && id < self.fact_base + self.n_facts
    }
}

// ---------------------------------------------------------------------------
// Segment maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Inclusive; equals `summary`.
    pub end: usize,
    /// Position of the terminating newline token.
    pub summary: usize,
}

/// Gather/aggregate geometry of one prompt: the newline-terminated content
/// segments and the final query position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub segments: Vec<Segment>,
    pub q: usize,
}

/// Derive a prompt's segment map. The span up to and including the first
/// newline is preamble ("Memorize …:\n", "Q <fact>\n", …); each subsequent
/// newline-terminated span is a segment; the trailing query phrase is not a
/// segment. `q` is the last prompt index.
pub fn derive_segment_map(prompt: &[usize], vocab: &Vocab) -> Result<SegmentMap> {
    let first_nl = prompt
        .iter()
        .position(|&t| t == vocab.newline)
        .ok_or_else(|| Error::Task("segment map: prompt contains no newline".into()))?;
    let mut segments = Vec::new();
    let mut start = first_nl + 1;
    for (i, &t) in prompt.iter().enumerate().skip(first_nl + 1) {
        if t == vocab.newline {
            segments.push(Segment {
                start,
                end: i,
                summary: i,
            });
            start = i + 1;
        }
    }
    if prompt.is_empty() {
        return Err(Error::Task("segment map: empty prompt".into()));
    }
    Ok(SegmentMap {
        segments,
        q: prompt.len() - 1,
    })
}

// ---------------------------------------------------------------------------
// KV retrieval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvVariant {
    NoTrailingSpace,
    TrailingSpace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KvInstance {
    /// (key lexicon index, value) with distinct keys.
    pub pairs: Vec<(usize, u8)>,
    /// Index into `pairs` of the queried pair.
    pub query: usize,
    pub variant: KvVariant,
}

impl KvInstance {
    pub fn target_value(&self) -> u8 {
        self.pairs[self.query].1
    }

    /// Canonical byte-exact rendering:
    /// `"Memorize the following dictionary:\n" + "<key>:<value>\n"× +
    /// "The value of the key '<query_key>' is"` (+ one space token for the
    /// trailing-space variant).
    pub fn prompt(&self, vocab: &Vocab) -> Vec<usize> {
        let mut p = Vec::new();
        let w = |s: &str| vocab.word(s);
        let sp = vocab.space;
        p.extend([
            w("Memorize"),
            sp,
            w("the"),
            sp,
            w("following"),
            sp,
            w("dictionary"),
            vocab.colon,
            vocab.newline,
        ]);
        for &(k, v) in &self.pairs {
            p.extend([vocab.key(k), vocab.colon, vocab.value(v), vocab.newline]);
        }
        let qk = self.pairs[self.query].0;
        p.extend([
            w("The"),
            sp,
            w("value"),
            sp,
            w("of"),
            sp,
            w("the"),
            sp,
            w("key"),
            sp,
            vocab.quote,
            vocab.key(qk),
            vocab.quote,
            sp,
            w("is"),
        ]);
        if self.variant == KvVariant::TrailingSpace {
            p.push(sp);
        }
        p
    }

    /// Answer-scoring candidates: the distinct dictionary values in order
    /// of first appearance. Returns (candidate values, gold index).
    pub fn candidates(&self) -> (Vec<u8>, usize) {
        let mut seen = Vec::new();
        for &(_, v) in &self.pairs {
            if !seen.contains(&v) {
                seen.push(v);
            }
        }
        let gold = seen
            .iter()
            .position(|&v| v == self.target_value())
            .expect("target value always present");
        (seen, gold)
    }
}

pub fn gen_kv_instance(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    n_pairs: usize,
    variant: KvVariant,
) -> Result<KvInstance> {
    if n_pairs == 0 || n_pairs > vocab.n_keys {
        return Err(Error::Task(format!(
            "kv instance: n_pairs {n_pairs} outside 1..={}",
            vocab.n_keys
        )));
    }
    // Keys without replacement via partial Fisher-Yates over indices.
    let mut keys: Vec<usize> = (0..vocab.n_keys).collect();
    for i in 0..n_pairs {
        let j = rng.gen_range(i..keys.len());
        keys.swap(i, j);
    }
    let pairs: Vec<(usize, u8)> = keys[..n_pairs]
        .iter()
        .map(|&k| (k, rng.gen_range(0..100u8)))
        .collect();
    let query = rng.gen_range(0..n_pairs);
    Ok(KvInstance {
        pairs,
        query,
        variant,
    })
}

// ---------------------------------------------------------------------------
// Fact base and multiple choice
// ---------------------------------------------------------------------------

/// Weight-stored knowledge: fact index → value, with a held-out tail that
/// never enters the pretraining corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactBase {
    pub values: Vec<u8>,
    /// Facts `0..n_train` may appear in the corpus and in MC evals.
    pub n_train: usize,
}

impl FactBase {
    pub fn build(n_facts: usize, n_held_out: usize, seed: u64) -> Result<Self> {
        if n_held_out >= n_facts {
            return Err(Error::Task(format!(
                "fact base: {n_held_out} held out of {n_facts}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<u8> = (0..n_facts).map(|_| rng.gen_range(0..100u8)).collect();
        Ok(FactBase {
            values,
            n_train: n_facts - n_held_out,
        })
    }

    pub fn is_held_out(&self, fact: usize) -> bool {
        fact >= self.n_train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McFormat {
    Label,
    Chat,
    Likelihood,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McInstance {
    pub fact: usize,
    /// Four distinct option values; `options[correct_pos]` is the fact's
    /// true value. Position i carries letter A+i.
    pub options: [u8; 4],
    pub correct_pos: usize,
    pub format: McFormat,
}

impl McInstance {
    pub fn correct_value(&self) -> u8 {
        self.options[self.correct_pos]
    }

    /// Render the prompt for this instance's format.
    pub fn prompt(&self, vocab: &Vocab) -> Vec<usize> {
        let sp = vocab.space;
        let mut p = Vec::new();
        match self.format {
            McFormat::Label => {
                p.extend([vocab.word("Q"), sp, vocab.fact(self.fact), vocab.newline]);
                self.push_options(vocab, &mut p);
                p.extend([vocab.word("Answer"), vocab.colon]);
            }
            McFormat::Chat => {
                p.extend([
                    vocab.word("User"),
                    vocab.colon,
                    sp,
                    vocab.word("Q"),
                    sp,
                    vocab.fact(self.fact),
                    vocab.newline,
                ]);
                self.push_options(vocab, &mut p);
                p.extend([vocab.word("Assistant"), vocab.colon]);
            }
            McFormat::Likelihood => {
                // Bare cloze matching the corpus fact-statement prefix:
                // "<fact> is " scored over the four option values.
                p.extend([vocab.fact(self.fact), sp, vocab.word("is"), sp]);
            }
        }
        p
    }

    fn push_options(&self, vocab: &Vocab, p: &mut Vec<usize>) {
        for (i, &v) in self.options.iter().enumerate() {
            p.extend([
                vocab.letter(i),
                vocab.period,
                vocab.space,
                vocab.value(v),
                vocab.newline,
            ]);
        }
    }
}

pub fn gen_mc_instance(
    rng: &mut ChaCha8Rng,
    facts: &FactBase,
    format: McFormat,
) -> Result<McInstance> {
    if facts.n_train == 0 {
        return Err(Error::Task("mc instance: empty fact base".into()));
    }
    let distinct: BTreeSet<u8> = facts.values[..facts.n_train].iter().copied().collect();
    if distinct.len() < 4 {
        return Err(Error::Task(format!(
            "mc instance: only {} distinct values across the fact base",
            distinct.len()
        )));
    }
    let fact = rng.gen_range(0..facts.n_train);
    let correct = facts.values[fact];
    let mut opts: Vec<u8> = vec![correct];
    while opts.len() < 4 {
        // Distractors drawn from other facts' values.
        let other = facts.values[rng.gen_range(0..facts.n_train)];
        if !opts.contains(&other) {
            opts.push(other);
        }
    }
    // Uniform letter assignment via a full shuffle of the four options.
    for i in 0..4 {
        let j = rng.gen_range(i..4);
        opts.swap(i, j);
    }
    let correct_pos = opts.iter().position(|&v| v == correct).unwrap();
    Ok(McInstance {
        fact,
        options: [opts[0], opts[1], opts[2], opts[3]],
        correct_pos,
        format,
    })
}

// ---------------------------------------------------------------------------
// Pretraining corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixConfig {
    /// Episode-type proportions; must sum to 1.
    pub kv: f64,
    pub fact: f64,
    pub mc: f64,
    pub kv_pairs_min: usize,
    pub kv_pairs_max: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            kv: 0.5,
            fact: 0.25,
            mc: 0.25,
            kv_pairs_min: 2,
            kv_pairs_max: 8,
        }
    }
}

impl MixConfig {
    fn validate(&self) -> Result<()> {
        if self.kv < 0.0 || self.fact < 0.0 || self.mc < 0.0 {
            return Err(Error::Task("mix config: negative proportion".into()));
        }
        if ((self.kv + self.fact + self.mc) - 1.0).abs() > 1e-9 {
            return Err(Error::Task(format!(
                "mix config: proportions sum to {}, expected 1",
                self.kv + self.fact + self.mc
            )));
        }
        if self.kv > 0.0 && (self.kv_pairs_min == 0 || self.kv_pairs_min > self.kv_pairs_max) {
            return Err(Error::Task("mix config: bad kv pair range".into()));
        }
        Ok(())
    }
}

/// Fact statement rendering: `"<fact> is <value>."`.
pub fn fact_statement(vocab: &Vocab, fact: usize, value: u8) -> Vec<usize> {
    vec![
        vocab.fact(fact),
        vocab.space,
        vocab.word("is"),
        vocab.space,
        vocab.value(value),
        vocab.period,
    ]
}

/// Interleaved episode stream with BOS as the *separator* between
/// episodes, so the first token of every episode sits at a position
/// congruent with evaluation prompts (which start at position 0). KV
/// episodes alternate the no-space/trailing-space answer variants; MC
/// episodes alternate the label and chat formats. Held-out facts never
/// appear.
pub fn gen_pretraining_corpus(
    vocab: &Vocab,
    facts: &FactBase,
    mix: &MixConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = Vec::new();
    let mut kv_flip = false;
    let mut mc_flip = false;
    for ep in 0..n_episodes {
        if ep > 0 {
            stream.push(vocab.bos);
        }
        let r: f64 = rng.gen();
        if r < mix.kv {
            let n_pairs = rng.gen_range(mix.kv_pairs_min..=mix.kv_pairs_max);
            let variant = if kv_flip {
                KvVariant::TrailingSpace
            } else {
                KvVariant::NoTrailingSpace
            };
            kv_flip = !kv_flip;
            let inst = gen_kv_instance(&mut rng, vocab, n_pairs, variant)?;
            stream.extend(inst.prompt(vocab));
            stream.push(vocab.value(inst.target_value()));
            stream.push(vocab.newline);
        } else if r < mix.kv + mix.fact {
            let fact = rng.gen_range(0..facts.n_train);
            stream.extend(fact_statement(vocab, fact, facts.values[fact]));
        } else {
            let format = if mc_flip { McFormat::Chat } else { McFormat::Label };
            mc_flip = !mc_flip;
            let inst = gen_mc_instance(&mut rng, facts, format)?;
            stream.extend(inst.prompt(vocab));
            match format {
                McFormat::Label => {
                    stream.push(vocab.letter(inst.correct_pos));
                    stream.push(vocab.newline);
                }
                McFormat::Chat => {
                    stream.push(vocab.value(inst.correct_value()));
                    stream.push(vocab.period);
                }
                McFormat::Likelihood => unreachable!("not sampled in corpus"),
            }
        }
    }
    Ok(stream)
}

// ---------------------------------------------------------------------------
// Evaluation suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SuiteKind {
    Kv { n_pairs: usize, variant: KvVariant },
    McLabel,
    McChat,
    McLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub kind: SuiteKind,
    pub n_items: usize,
    pub seed: u64,
}

impl SuiteSpec {
    /// Short stable name used in CSV output and fingerprints.
    pub fn name(&self) -> String {
        match &self.kind {
            SuiteKind::Kv { n_pairs, variant } => {
                let v = match variant {
                    KvVariant::NoTrailingSpace => "",
                    KvVariant::TrailingSpace => "+sp",
                };
                format!("kv{n_pairs}{v}")
            }
            SuiteKind::McLabel => "label".into(),
            SuiteKind::McChat => "chat".into(),
            SuiteKind::McLikelihood => "likelihood".into(),
        }
    }
}

/// One evaluation sample, format-agnostic. Answer scoring ranks
/// `candidates`; generation checks `gold_tokens` within the decode window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// Index of the gold candidate.
    pub gold: usize,
    /// Token string an exact-match generation must contain.
    pub gold_tokens: Vec<usize>,
    pub segmap: Option<SegmentMap>,
    /// Chance accuracy of this item under uniform guessing.
    pub chance: f64,
}

pub fn build_suite(vocab: &Vocab, facts: &FactBase, spec: &SuiteSpec) -> Result<Vec<EvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let item = match &spec.kind {
            SuiteKind::Kv { n_pairs, variant } => {
                let inst = gen_kv_instance(&mut rng, vocab, *n_pairs, *variant)?;
                let prompt = inst.prompt(vocab);
                let (values, gold) = inst.candidates();
                let segmap = derive_segment_map(&prompt, vocab)?;
                let chance = 1.0 / values.len() as f64;
                EvalItem {
                    candidates: values.iter().map(|&v| vec![vocab.value(v)]).collect(),
                    gold,
                    gold_tokens: vec![vocab.value(inst.target_value())],
                    segmap: Some(segmap),
                    chance,
                    prompt,
                }
            }
            SuiteKind::McLabel => {
                let inst = gen_mc_instance(&mut rng, facts, McFormat::Label)?;
                let prompt = inst.prompt(vocab);
                let segmap = derive_segment_map(&prompt, vocab)?;
                EvalItem {
                    candidates: (0..4).map(|i| vec![vocab.letter(i)]).collect(),
                    gold: inst.correct_pos,
                    gold_tokens: vec![vocab.letter(inst.correct_pos)],
                    segmap: Some(segmap),
                    chance: 0.25,
                    prompt,
                }
            }
            SuiteKind::McChat => {
                let inst = gen_mc_instance(&mut rng, facts, McFormat::Chat)?;
                let prompt = inst.prompt(vocab);
                let segmap = derive_segment_map(&prompt, vocab)?;
                EvalItem {
                    candidates: inst
                        .options
                        .iter()
                        .map(|&v| vec![vocab.value(v)])
                        .collect(),
                    gold: inst.correct_pos,
                    gold_tokens: vec![vocab.value(inst.correct_value())],
                    segmap: Some(segmap),
                    chance: 0.25,
                    prompt,
                }
            }
            SuiteKind::McLikelihood => {
                let inst = gen_mc_instance(&mut rng, facts, McFormat::Likelihood)?;
                let prompt = inst.prompt(vocab);
                EvalItem {
                    candidates: inst
                        .options
                        .iter()
                        .map(|&v| vec![vocab.value(v)])
                        .collect(),
                    gold: inst.correct_pos,
                    gold_tokens: vec![vocab.value(inst.correct_value())],
                    segmap: None,
                    chance: 0.25,
                    prompt,
                }
            }
        };
        items.push(item);
    }
    Ok(items)
}

/// One instance per line, JSON records.
pub fn write_suite(path: &std::path::Path, items: &[EvalItem]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Task(format!("suite encode: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_suite(path: &std::path::Path) -> Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Task(format!("suite decode: {e}"))))
        .collect()
}
