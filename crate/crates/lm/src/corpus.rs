//! Token corpora: char-level text, plus seeded synthetic copy and
//! key-value retrieval tasks.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use ratplus_core::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Copy,
    Needle,
    CharLm,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "COPY" => Ok(TaskKind::Copy),
            "NEEDLE" => Ok(TaskKind::Needle),
            "CHAR_LM" => Ok(TaskKind::CharLm),
            _ => Err(Error::invalid("synth_task_generate", format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tokenizer {
    /// Raw bytes, vocab 256.
    Byte,
    /// Sorted character table.
    Chars(Vec<char>),
    /// Opaque symbol ids `0..n`.
    Symbols(usize),
}

impl Tokenizer {
    pub fn vocab(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Chars(t) => t.len(),
            Tokenizer::Symbols(n) => *n,
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        match self {
            Tokenizer::Byte => String::from_utf8_lossy(&ids.iter().map(|&i| i as u8).collect::<Vec<_>>()).into_owned(),
            Tokenizer::Chars(t) => ids.iter().map(|&i| t.get(i).copied().unwrap_or('\u{fffd}')).collect(),
            Tokenizer::Symbols(_) => ids.iter().map(|i| format!("<{i}>")).collect::<Vec<_>>().join(""),
        }
    }
}

/// One retrieval query: the model reads up to and including `query_pos` and
/// should predict `answer` next. Positions are absolute in the token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub doc_start: usize,
    pub query_pos: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub tokenizer: Tokenizer,
    pub probes: Vec<Probe>,
}

impl Corpus {
    pub fn vocab(&self) -> usize {
        self.tokenizer.vocab()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Char-level corpus over the distinct characters of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut table: Vec<char> = text.chars().collect();
        table.sort_unstable();
        table.dedup();
        if table.is_empty() {
            return Err(Error::Empty { op: "Corpus::from_text" });
        }
        if table.len() > 256 {
            let tokens = text.bytes().map(usize::from).collect();
            return Ok(Corpus { tokens, tokenizer: Tokenizer::Byte, probes: Vec::new() });
        }
        let tokens = text.chars().map(|c| table.binary_search(&c).expect("char from the same text")).collect();
        Ok(Corpus { tokens, tokenizer: Tokenizer::Chars(table), probes: Vec::new() })
    }

    /// Splits at `fraction` of the stream; probes follow their documents.
    pub fn split(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid("Corpus::split", format!("fraction {fraction} not in (0, 1)")));
        }
        let mut cut = (self.tokens.len() as f64 * fraction) as usize;
        // never cut through a retrieval document
        if let Some(p) = self.probes.iter().find(|p| p.doc_start < cut && p.query_pos + 1 >= cut) {
            cut = p.doc_start;
        }
        let part = |lo: usize, hi: usize| Corpus {
            tokens: self.tokens[lo..hi].to_vec(),
            tokenizer: self.tokenizer.clone(),
            probes: self
                .probes
                .iter()
                .filter(|p| p.doc_start >= lo && p.query_pos + 1 < hi)
                .map(|p| Probe { doc_start: p.doc_start - lo, query_pos: p.query_pos - lo, answer: p.answer })
                .collect(),
        };
        Ok((part(0, cut), part(cut, self.tokens.len())))
    }

    /// Contiguous windows of `len` tokens at random offsets.
    pub fn sample_windows(&self, len: usize, count: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        if self.tokens.len() < len {
            return Err(Error::invalid(
                "sample_windows",
                format!("corpus of {} tokens is shorter than a {len}-token window", self.tokens.len()),
            ));
        }
        let span = self.tokens.len() - len + 1;
        Ok((0..count)
            .map(|_| {
                let s = rng.below(span);
                self.tokens[s..s + len].to_vec()
            })
            .collect())
    }
}

/// Builds a deterministic corpus of about `size` tokens. `text` feeds
/// `CHAR_LM`; without it a seeded pseudo-text is generated.
pub fn synth_task_generate(kind: TaskKind, size: usize, seed: u64, text: Option<&str>) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::invalid("synth_task_generate", "size must be positive"));
    }
    let mut rng = Rng::new(seed);
    match kind {
        TaskKind::Copy => Ok(copy_task(size, &mut rng)),
        TaskKind::Needle => Ok(needle_task(size, &mut rng)),
        TaskKind::CharLm => match text {
            Some(t) => {
                let chars: Vec<char> = t.chars().take(size).collect();
                Corpus::from_text(&chars.into_iter().collect::<String>())
            }
            None => Corpus::from_text(&pseudo_text(size, &mut rng)),
        },
    }
}

const COPY_BOS: usize = 0;
const COPY_SEP: usize = 1;
const COPY_VOCAB: usize = 32;

/// Documents `BOS x₁…xₙ SEP x₁…xₙ`.
fn copy_task(size: usize, rng: &mut Rng) -> Corpus {
    let mut tokens = Vec::with_capacity(size + 64);
    while tokens.len() < size {
        let n = 4 + rng.below(13);
        let body: Vec<usize> = (0..n).map(|_| 2 + rng.below(COPY_VOCAB - 2)).collect();
        tokens.push(COPY_BOS);
        tokens.extend(&body);
        tokens.push(COPY_SEP);
        tokens.extend(&body);
    }
    tokens.truncate(size);
    Corpus { tokens, tokenizer: Tokenizer::Symbols(COPY_VOCAB), probes: Vec::new() }
}

const NEEDLE_BOS: usize = 0;
const NEEDLE_MARK: usize = 1;
const NEEDLE_QUERY: usize = 2;
const NEEDLE_KEYS: usize = 16;
const NEEDLE_VALUES: usize = 16;
const NEEDLE_FILLER: usize = 16;
const NEEDLE_VOCAB: usize = 3 + NEEDLE_KEYS + NEEDLE_VALUES + NEEDLE_FILLER;

fn key_id(k: usize) -> usize {
    3 + k
}

fn value_id(v: usize) -> usize {
    3 + NEEDLE_KEYS + v
}

/// Documents of filler with a few `MARK key value` records, ending in
/// `QUERY key` whose answer is that key's value.
fn needle_task(size: usize, rng: &mut Rng) -> Corpus {
    let mut tokens = Vec::with_capacity(size + 128);
    let mut probes = Vec::new();
    while tokens.len() < size {
        let doc_start = tokens.len();
        tokens.push(NEEDLE_BOS);
        let pairs = 2 + rng.below(3);
        let mut keys: Vec<usize> = Vec::new();
        while keys.len() < pairs {
            let k = rng.below(NEEDLE_KEYS);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let values: Vec<usize> = (0..pairs).map(|_| rng.below(NEEDLE_VALUES)).collect();
        for (k, v) in keys.iter().zip(&values) {
            for _ in 0..4 + rng.below(12) {
                tokens.push(3 + NEEDLE_KEYS + NEEDLE_VALUES + rng.below(NEEDLE_FILLER));
            }
            tokens.extend([NEEDLE_MARK, key_id(*k), value_id(*v)]);
        }
        for _ in 0..4 + rng.below(24) {
            tokens.push(3 + NEEDLE_KEYS + NEEDLE_VALUES + rng.below(NEEDLE_FILLER));
        }
        let pick = rng.below(pairs);
        tokens.push(NEEDLE_QUERY);
        tokens.push(key_id(keys[pick]));
        probes.push(Probe { doc_start, query_pos: tokens.len() - 1, answer: value_id(values[pick]) });
        tokens.push(value_id(values[pick]));
    }
    Corpus { tokens, tokenizer: Tokenizer::Symbols(NEEDLE_VOCAB), probes }
}

/// Seeded word-level Markov text over a random lexicon.
fn pseudo_text(size: usize, rng: &mut Rng) -> String {
    const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch", "sh"];
    const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ee"];
    const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "ng"];
    let lexicon: Vec<String> = (0..120)
        .map(|_| {
            (0..1 + rng.below(3))
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.below(ONSETS.len())],
                        NUCLEI[rng.below(NUCLEI.len())],
                        CODAS[rng.below(CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    // each word has a short list of likely successors
    let successors: Vec<Vec<usize>> =
        (0..lexicon.len()).map(|_| (0..4).map(|_| rng.below(lexicon.len())).collect()).collect();
    let zipf = |rng: &mut Rng| -> usize {
        let u = rng.uniform();
        ((lexicon.len() as f64).powf(u) as usize).saturating_sub(1).min(lexicon.len() - 1)
    };
    let mut out = String::with_capacity(size + 32);
    let mut word = zipf(rng);
    let mut in_sentence = 0;
    while out.len() < size {
        out.push_str(&lexicon[word]);
        in_sentence += 1;
        if in_sentence >= 4 + rng.below(8) {
            out.push_str(". ");
            in_sentence = 0;
        } else {
            out.push(' ');
        }
        word = if rng.bernoulli(0.7) { successors[word][rng.below(4)] } else { zipf(rng) };
    }
    out.truncate(size);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        for kind in [TaskKind::Copy, TaskKind::Needle, TaskKind::CharLm] {
            let a = synth_task_generate(kind, 3000, 9, None).unwrap();
            let b = synth_task_generate(kind, 3000, 9, None).unwrap();
            assert_eq!(a, b);
            assert!(a.tokens.iter().all(|&t| t < a.vocab()));
            assert!(a.len() >= 3000 && a.len() < 3200);
        }
        assert_ne!(
            synth_task_generate(TaskKind::CharLm, 500, 1, None).unwrap().tokens,
            synth_task_generate(TaskKind::CharLm, 500, 2, None).unwrap().tokens
        );
    }

    #[test]
    fn needle_answers_appear_earlier() {
        let c = synth_task_generate(TaskKind::Needle, 5000, 3, None).unwrap();
        assert!(!c.probes.is_empty());
        for p in &c.probes {
            let key = c.tokens[p.query_pos];
            let doc = &c.tokens[p.doc_start..p.query_pos - 1];
            let found = doc.windows(3).any(|w| w == [NEEDLE_MARK, key, p.answer]);
            assert!(found, "probe {p:?}");
            assert_eq!(c.tokens[p.query_pos + 1], p.answer);
        }
    }

    #[test]
    fn copy_repeats_prefix() {
        let c = synth_task_generate(TaskKind::Copy, 400, 4, None).unwrap();
        let sep = c.tokens.iter().position(|&t| t == COPY_SEP).unwrap();
        let body = &c.tokens[1..sep];
        assert_eq!(&c.tokens[sep + 1..sep + 1 + body.len()], body);
    }

    #[test]
    fn text_corpus_and_split() {
        let c = synth_task_generate(TaskKind::CharLm, 100, 0, Some("hello world, hello there")).unwrap();
        assert_eq!(c.tokenizer.decode(&c.tokens), "hello world, hello there");
        let (a, b) = c.split(0.5).unwrap();
        assert_eq!(a.len() + b.len(), c.len());
        assert!(c.split(1.5).is_err());
        assert!("SPAM".parse::<TaskKind>().is_err());
        assert_eq!("char_lm".parse::<TaskKind>().unwrap(), TaskKind::CharLm);
        assert!(synth_task_generate(TaskKind::Copy, 0, 0, None).is_err());

        let n = synth_task_generate(TaskKind::Needle, 4000, 5, None).unwrap();
        let (tr, te) = n.split(0.7).unwrap();
        for (part, full_off) in [(&tr, 0), (&te, tr.len())] {
            for p in &part.probes {
                assert_eq!(part.tokens[p.query_pos + 1], p.answer);
                assert_eq!(n.tokens[full_off + p.query_pos], part.tokens[p.query_pos]);
            }
        }
    }
}
