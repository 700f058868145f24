//! Trainable byte-pair-encoding tokenizer over characters.
//!
//! Text is pre-split on single spaces. Every word after the first carries a
//! leading [`WORD_START`] symbol, so `decode` can restore the exact spacing.
//! Merges never cross a word boundary.
//!
//! Ids `0..RESERVED` are fixed: `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]`, then one
//! atomic token per POS tag in [`POS_TAGS`]. The training alphabet follows in
//! sorted order, then merged tokens in merge order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

/// Universal POS tags, each reserved as one unsplittable token.
pub const POS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

pub const RESERVED: usize = 4 + POS_TAGS.len();

/// Marks the start of every non-initial word.
pub const WORD_START: char = '\u{120}';

const HEADER: &str = "bpevocab v1";
const MERGES_HEADER: &str = "#merges";

fn pos_token(tag: &str) -> String {
    format!("[POS={tag}]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        };
        for t in [PAD, UNK, CLS, SEP] {
            v.insert(t.to_string());
        }
        for tag in POS_TAGS {
            v.insert(pos_token(tag));
        }
        v
    }

    fn insert(&mut self, token: String) -> TokenId {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    fn push_merge(&mut self, left: String, right: String) -> Result<()> {
        let (Some(&l), Some(&r)) = (self.ids.get(&left), self.ids.get(&right)) else {
            return Err(Error::Vocab(format!("merge ({left:?}, {right:?}) uses unknown tokens")));
        };
        let merged = self.insert(format!("{left}{right}"));
        let rank = self.merges.len();
        self.ranks.entry((l, r)).or_insert((rank, merged));
        self.merges.push((left, right));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// Reserved id of a POS tag (case-insensitive), if the tag is supported.
    pub fn pos_id(&self, tag: &str) -> Option<TokenId> {
        self.ids.get(&pos_token(&tag.to_ascii_uppercase())).copied()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < RESERVED
    }

    /// Encodes one word. `initial` words get no [`WORD_START`] prefix.
    pub fn encode_word(&self, word: &str, initial: bool) -> Vec<TokenId> {
        let mut symbols: Vec<TokenId> = Vec::with_capacity(word.len() + 1);
        if !initial {
            symbols.push(self.char_id(WORD_START));
        }
        symbols.extend(word.chars().map(|c| self.char_id(c)));
        self.apply_merges(symbols)
    }

    fn char_id(&self, c: char) -> TokenId {
        let mut buf = [0u8; 4];
        self.ids.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK_ID)
    }

    fn apply_merges(&self, mut symbols: Vec<TokenId>) -> Vec<TokenId> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((_, l, r)) = best else {
                return symbols;
            };
            let merged = self.ranks[&(l, r)].1;
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        if text.is_empty() {
            return Vec::new();
        }
        text.split(' ')
            .enumerate()
            .flat_map(|(i, w)| self.encode_word(w, i == 0))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Vocab(format!("unknown token id {id}")))?;
            out.extend(tok.chars().map(|c| if c == WORD_START { ' ' } else { c }));
        }
        Ok(out)
    }

    /// Decodes a single word's sub-tokens, dropping the word-start space.
    pub fn decode_word(&self, ids: &[TokenId]) -> Result<String> {
        let s = self.decode(ids)?;
        Ok(s.strip_prefix(' ').map(str::to_string).unwrap_or(s))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out.push_str(MERGES_HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n').enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(Error::format(origin, 1, format!("expected header `{HEADER}`"))),
        }
        let mut tokens = Vec::new();
        let mut in_merges = false;
        let mut merges = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if !in_merges && line == MERGES_HEADER {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(origin, lineno, "expected two tab-separated fields"))?;
            if in_merges {
                merges.push((a.to_string(), b.to_string()));
            } else {
                let id: usize = b
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, format!("bad id {b:?}")))?;
                if id != tokens.len() {
                    return Err(Error::format(origin, lineno, format!("id {id} out of order")));
                }
                tokens.push(a.to_string());
            }
        }
        if !in_merges {
            return Err(Error::format(origin, 0, "missing `#merges` section"));
        }
        let reserved = Vocab::with_reserved();
        if tokens.len() < RESERVED || tokens[..RESERVED] != reserved.tokens[..] {
            return Err(Error::format(origin, 2, "reserved token block does not match"));
        }

        let mut v = Vocab::with_reserved();
        for t in tokens.iter().skip(RESERVED) {
            if v.ids.contains_key(t) {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
            v.insert(t.clone());
        }
        for (l, r) in merges {
            let merged = format!("{l}{r}");
            if !v.ids.contains_key(&merged) {
                return Err(Error::Vocab(format!("merge result {merged:?} missing from vocab")));
            }
            v.push_merge(l, r)?;
        }
        if v.tokens != tokens {
            return Err(Error::Vocab("token table inconsistent with merges".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Splits a sentence into words with their word-start marker applied.
fn pre_tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(' ').enumerate().filter_map(|(i, w)| {
        if i == 0 {
            (!w.is_empty()).then(|| w.to_string())
        } else {
            Some(format!("{WORD_START}{w}"))
        }
    })
}

/// Learns a vocabulary of at most `vocab_size` tokens.
///
/// Each round merges the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)`. Training stops at
/// `vocab_size` or once no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in corpus {
        for w in pre_tokenize(s.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Vocab("cannot train on an empty corpus".into()));
    }

    let mut vocab = Vocab::with_reserved();
    let mut alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    if vocab_size < RESERVED + alphabet.len() {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} smaller than reserved ({RESERVED}) + alphabet ({})",
            alphabet.len()
        )));
    }
    for c in &alphabet {
        vocab.insert(c.to_string());
    }

    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort();
    let mut words: Vec<(Vec<TokenId>, usize)> = words
        .into_iter()
        .map(|(w, n)| (w.chars().map(|c| vocab.char_id(c)).collect(), n))
        .collect();

    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (ls, rs) = (vocab.tokens[l as usize].clone(), vocab.tokens[r as usize].clone());
        vocab.push_merge(ls, rs)?;
        let merged = vocab.ranks[&(l, r)].1;
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocab {
        train_bpe(&["the cat sat on the mat", "the hat"], 60).unwrap()
    }

    #[test]
    fn first_merge_on_aaab() {
        let v = train_bpe(&["aaab", "aaab"], RESERVED + 2 + 1).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn budget_equal_to_alphabet_gives_no_merges() {
        let v = train_bpe(&["abcab"], RESERVED + 3).unwrap();
        assert!(v.merges().is_empty());
        assert!(train_bpe(&["abcab"], RESERVED + 2).is_err());
    }

    #[test]
    fn unique_characters_give_no_merges() {
        let v = train_bpe(&["a", "b", "c"], 100).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe::<&str>(&[], 100).is_err());
        assert!(train_bpe(&[""], 100).is_err());
    }

    #[test]
    fn round_trip_and_empty() {
        let v = small();
        assert_eq!(v.decode(&v.encode("the cat")).unwrap(), "the cat");
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&v.encode(" the  cat ")).unwrap(), " the  cat ");
    }

    #[test]
    fn unknown_characters_and_ids() {
        let v = small();
        assert_eq!(v.encode("z"), vec![UNK_ID]);
        assert!(v.decode(&[v.len() as TokenId]).is_err());
    }

    #[test]
    fn reserved_ids_and_pos_tags() {
        let v = small();
        assert_eq!(v.id(CLS), Some(CLS_ID));
        assert_eq!(v.id(SEP), Some(SEP_ID));
        let verb = v.pos_id("verb").unwrap();
        assert!(v.is_reserved(verb));
        assert!(v.pos_id("BOGUS").is_none());
        // learned tokens never land in the reserved block
        for id in RESERVED..v.len() {
            assert!(!v.token(id as TokenId).unwrap().starts_with("[POS="));
        }
    }

    #[test]
    fn text_format_round_trip_is_bit_exact() {
        let v = small();
        let text = v.to_text();
        assert!(text.starts_with("bpevocab v1\n[PAD]\t0\n"));
        let back = Vocab::from_text(&text, "mem").unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn load_rejects_bad_header() {
        assert!(Vocab::from_text("bpevocab v2\n#merges\n", "mem").is_err());
    }
}
