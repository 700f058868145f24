//! Encoder inputs for the sentence side and the isolated target side.
//!
//! The sentence input is `[CLS] w_1 … w_n [SEP] POS`, with a segment id per
//! position: `Tar` on the target's sub-tokens, `Loc` on the rest of the
//! comma-delimited clause holding the target, `Other` everywhere else
//! (specials, the POS token, commas and out-of-clause words).
//!
//! The target input is `[CLS] w_t [SEP]` and carries no positions or segments.

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab, CLS_ID, SEP_ID, UNK_ID};

pub const DEFAULT_MAX_LEN: usize = 150;

/// Word that delimits local-context clauses.
pub const CLAUSE_SEPARATOR: &str = ",";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Segment {
    Other = 0,
    Tar = 1,
    Loc = 2,
}

pub const NUM_SEGMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceInput {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Half-open sub-token range of the target word.
    pub target_span: (usize, usize),
    pub truncated: bool,
}

impl SentenceInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_ids(&self) -> &[TokenId] {
        &self.ids[self.target_span.0..self.target_span.1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetInput {
    pub ids: Vec<TokenId>,
}

impl TargetInput {
    /// Sub-tokens between `[CLS]` and `[SEP]`.
    pub fn target_ids(&self) -> &[TokenId] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn target_span(&self) -> (usize, usize) {
        (1, self.ids.len() - 1)
    }
}

/// Word-index range `[start, end)` of the clause around `target`.
pub fn clause_bounds(words: &[String], target: usize) -> (usize, usize) {
    let start = words[..target]
        .iter()
        .rposition(|w| w == CLAUSE_SEPARATOR)
        .map_or(0, |p| p + 1);
    let end = words[target..]
        .iter()
        .position(|w| w == CLAUSE_SEPARATOR)
        .map_or(words.len(), |p| target + p);
    (start, end)
}

struct Body {
    ids: Vec<TokenId>,
    segments: Vec<Segment>,
    span: (usize, usize),
    truncated: bool,
}

fn sentence_body(inst: &Instance, vocab: &Vocab, budget: usize) -> Result<Body> {
    inst.validate()?;
    let t = inst.target_index;
    let (cs, ce) = clause_bounds(&inst.tokens, t);
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    let mut span = (0, 0);
    for (i, w) in inst.tokens.iter().enumerate() {
        let sub = vocab.encode_word(w, i == 0);
        let seg = if i == t {
            span.0 = ids.len();
            span.1 = ids.len() + sub.len();
            Segment::Tar
        } else if (cs..ce).contains(&i) {
            Segment::Loc
        } else {
            Segment::Other
        };
        segments.extend(std::iter::repeat_n(seg, sub.len()));
        ids.extend(sub);
    }

    if span.1 - span.0 > budget {
        return Err(Error::contract(format!(
            "target needs {} sub-tokens but only {budget} fit",
            span.1 - span.0
        )));
    }
    let truncated = ids.len() > budget;
    // Drop sub-tokens from whichever end lies farther from the target.
    while ids.len() > budget {
        let left = span.0;
        let right = ids.len() - span.1;
        if right >= left {
            ids.pop();
            segments.pop();
        } else {
            ids.remove(0);
            segments.remove(0);
            span = (span.0 - 1, span.1 - 1);
        }
    }
    Ok(Body {
        ids,
        segments,
        span,
        truncated,
    })
}

fn assemble(prefix: Vec<TokenId>, body: Body, suffix: &[(TokenId, Segment)]) -> SentenceInput {
    let mut ids = prefix;
    let offset = ids.len();
    let mut segments = vec![Segment::Other; offset];
    ids.extend(&body.ids);
    segments.extend(&body.segments);
    for &(id, seg) in suffix {
        ids.push(id);
        segments.push(seg);
    }
    SentenceInput {
        positions: (0..ids.len()).collect(),
        ids,
        segments,
        target_span: (body.span.0 + offset, body.span.1 + offset),
        truncated: body.truncated,
    }
}

fn pos_suffix(inst: &Instance, vocab: &Vocab) -> Option<TokenId> {
    if inst.pos_tag.is_empty() {
        None
    } else {
        Some(vocab.pos_id(&inst.pos_tag).unwrap_or(UNK_ID))
    }
}

/// `[CLS] sentence [SEP] POS`, truncated to `max_len` without touching the
/// target span or `[CLS]`. An empty POS tag omits the POS token.
pub fn build_sentence_input(inst: &Instance, vocab: &Vocab, max_len: usize) -> Result<SentenceInput> {
    let pos = pos_suffix(inst, vocab);
    let specials = 2 + usize::from(pos.is_some());
    let budget = max_len
        .checked_sub(specials)
        .ok_or_else(|| Error::config(format!("max_len {max_len} too small")))?;
    let body = sentence_body(inst, vocab, budget)?;
    let mut suffix = vec![(SEP_ID, Segment::Other)];
    if let Some(p) = pos {
        suffix.push((p, Segment::Other));
    }
    Ok(assemble(vec![CLS_ID], body, &suffix))
}

/// Joint input for all-to-all interaction: `[CLS] sentence [SEP] w_t [SEP]`.
pub fn build_pair_input(inst: &Instance, vocab: &Vocab, max_len: usize) -> Result<SentenceInput> {
    let target = vocab.encode_word(inst.target(), true);
    let specials = 3 + target.len();
    let budget = max_len
        .checked_sub(specials)
        .ok_or_else(|| Error::config(format!("max_len {max_len} too small for the pair input")))?;
    let body = sentence_body(inst, vocab, budget)?;
    let mut suffix = vec![(SEP_ID, Segment::Other)];
    suffix.extend(target.into_iter().map(|id| (id, Segment::Other)));
    suffix.push((SEP_ID, Segment::Other));
    Ok(assemble(vec![CLS_ID], body, &suffix))
}

/// `[CLS] w_t [SEP]` with the target encoded as a word-initial token.
pub fn build_target_input(inst: &Instance, vocab: &Vocab) -> Result<TargetInput> {
    inst.validate()?;
    let mut ids = vec![CLS_ID];
    ids.extend(vocab.encode_word(inst.target(), true));
    ids.push(SEP_ID);
    Ok(TargetInput { ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, RESERVED};

    fn inst(words: &str, t: usize, pos: &str) -> Instance {
        Instance {
            sentence_id: "s".into(),
            tokens: words.split(' ').map(String::from).collect(),
            target_index: t,
            label: 0.0,
            pos_tag: pos.into(),
            genre: None,
        }
    }

    fn vocab() -> Vocab {
        train_bpe(&["He kicked the bucket , then left", "swan songs of a swan"], RESERVED + 60).unwrap()
    }

    /// Independent oracle: classify every word by scanning comma positions.
    fn oracle_word_segments(words: &[&str], t: usize) -> Vec<Segment> {
        let commas: Vec<usize> = (0..words.len()).filter(|&i| words[i] == ",").collect();
        let lo = commas.iter().filter(|&&c| c < t).max().map_or(0, |c| c + 1);
        let hi = commas.iter().filter(|&&c| c > t).min().copied().unwrap_or(words.len());
        (0..words.len())
            .map(|i| {
                if i == t {
                    Segment::Tar
                } else if i >= lo && i < hi {
                    Segment::Loc
                } else {
                    Segment::Other
                }
            })
            .collect()
    }

    #[test]
    fn clause_segments_match_comma_oracle() {
        let v = vocab();
        let text = "He kicked the bucket , then left";
        let words: Vec<&str> = text.split(' ').collect();
        let input = build_sentence_input(&inst(text, 3, "NOUN"), &v, 150).unwrap();
        let oracle = oracle_word_segments(&words, 3);
        let mut expected = vec![Segment::Other];
        for (i, w) in words.iter().enumerate() {
            let n = v.encode_word(w, i == 0).len();
            expected.extend(std::iter::repeat_n(oracle[i], n));
        }
        expected.extend([Segment::Other, Segment::Other]);
        assert_eq!(input.segments, expected);
        assert_eq!(input.ids[0], CLS_ID);
        assert_eq!(v.decode_word(input.target_ids()).unwrap(), "bucket");
        assert_eq!(*input.ids.last().unwrap(), v.pos_id("NOUN").unwrap());
        assert_eq!(input.positions, (0..input.len()).collect::<Vec<_>>());
    }

    #[test]
    fn single_word_sentence() {
        let v = vocab();
        let input = build_sentence_input(&inst("swan", 0, "NOUN"), &v, 150).unwrap();
        assert!(input.segments.iter().all(|&s| s != Segment::Loc));
        let tar: Vec<_> = (0..input.len()).filter(|&i| input.segments[i] == Segment::Tar).collect();
        assert_eq!(tar.first().copied(), Some(input.target_span.0));
        assert_eq!(tar.len(), input.target_span.1 - input.target_span.0);
    }

    #[test]
    fn no_comma_means_whole_sentence_is_local() {
        let v = vocab();
        let input = build_sentence_input(&inst("swan songs of a swan", 1, ""), &v, 150).unwrap();
        let (s, e) = input.target_span;
        for i in 1..input.len() - 1 {
            let want = if (s..e).contains(&i) { Segment::Tar } else { Segment::Loc };
            assert_eq!(input.segments[i], want);
        }
        assert_eq!(*input.ids.last().unwrap(), SEP_ID);
    }

    #[test]
    fn truncation_keeps_target_and_cls() {
        let v = vocab();
        let text = "He kicked the bucket , then left , then left , then left";
        let full = build_sentence_input(&inst(text, 3, "NOUN"), &v, 150).unwrap();
        let cut = build_sentence_input(&inst(text, 3, "NOUN"), &v, 12).unwrap();
        assert!(!full.truncated);
        assert!(cut.truncated);
        assert_eq!(cut.len(), 12);
        assert_eq!(cut.ids[0], CLS_ID);
        assert_eq!(v.decode_word(cut.target_ids()).unwrap(), "bucket");
        assert_eq!(cut.segments.iter().filter(|&&s| s == Segment::Tar).count(), cut.target_ids().len());
        assert!(build_sentence_input(&inst(text, 3, "NOUN"), &v, 4).is_err());
    }

    #[test]
    fn target_input_layout() {
        let v = vocab();
        let t = build_target_input(&inst("a swan", 1, "NOUN"), &v).unwrap();
        assert_eq!(t.ids[0], CLS_ID);
        assert_eq!(*t.ids.last().unwrap(), SEP_ID);
        assert_eq!(v.decode_word(t.target_ids()).unwrap(), "swan");
        let s = build_sentence_input(&inst("a swan", 1, "NOUN"), &v, 150).unwrap();
        assert_eq!(v.decode_word(s.target_ids()).unwrap(), v.decode_word(t.target_ids()).unwrap());
    }

    #[test]
    fn pair_input_appends_target() {
        let v = vocab();
        let p = build_pair_input(&inst("He kicked the bucket", 3, "NOUN"), &v, 150).unwrap();
        let tail = v.encode_word("bucket", true);
        let n = p.len();
        assert_eq!(p.ids[n - 1], SEP_ID);
        assert_eq!(&p.ids[n - 1 - tail.len()..n - 1], &tail[..]);
        assert_eq!(p.ids[n - 2 - tail.len()], SEP_ID);
    }
}
