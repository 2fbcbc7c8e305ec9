//! Fixed-layout sequence assembly.
//!
//! Builds the token sequence
//! `[start][infer, prompt][sep][neg demo, prompt][sep][pos demo, prompt][sep]`
//! with deterministic region offsets, so every special token sits at the
//! same position in every sequence assembled under one layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, MemeRecord};
use crate::error::{PenError, Result};

/// Prompt template body; the final slot holds `[mask]` or a label word.
pub const PROMPT_TEMPLATE: [&str; 2] = ["it", "was"];
/// Tokens per prompt span: template body plus the special slot.
pub const PROMPT_LEN: usize = PROMPT_TEMPLATE.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Hateful demonstration first (the order as published).
    NegFirst,
    /// Swapped, for experiments.
    PosFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionLayout {
    pub len_infer: usize,
    pub len_demo: usize,
    pub len_prompt: usize,
    pub demo_order: DemoOrder,
}

impl Default for RegionLayout {
    fn default() -> Self {
        RegionLayout { len_infer: 192, len_demo: 64, len_prompt: 3, demo_order: DemoOrder::NegFirst }
    }
}

/// Offsets of every region and special token; a pure function of the
/// layout, independent of any record's content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutOffsets {
    pub start_pos: usize,
    pub infer_content: Range<usize>,
    pub infer_prompt: Range<usize>,
    pub neg_content: Range<usize>,
    pub neg_prompt: Range<usize>,
    pub pos_content: Range<usize>,
    pub pos_prompt: Range<usize>,
    pub sep_positions: [usize; 3],
    pub mask_pos: usize,
    pub neg_label_pos: usize,
    pub pos_label_pos: usize,
    pub total_len: usize,
}

impl RegionLayout {
    pub fn validate(&self) -> Result<()> {
        if self.len_infer == 0 || self.len_demo == 0 {
            return Err(PenError::Invalid("region lengths must be positive".into()));
        }
        if self.len_infer <= self.len_demo {
            return Err(PenError::Invalid(format!(
                "len_infer ({}) must exceed len_demo ({})",
                self.len_infer, self.len_demo
            )));
        }
        if self.len_prompt != PROMPT_LEN {
            return Err(PenError::Invalid(format!(
                "len_prompt must be {PROMPT_LEN} (template \"it was X\"), got {}",
                self.len_prompt
            )));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        1 + (self.len_infer + self.len_prompt)
            + 1
            + (self.len_demo + self.len_prompt)
            + 1
            + (self.len_demo + self.len_prompt)
            + 1
    }

    /// Offset table for this layout. The special slot is the last token of
    /// each prompt span ("it was X").
    pub fn offsets(&self) -> Result<LayoutOffsets> {
        self.validate()?;
        let li = self.len_infer;
        let ld = self.len_demo;
        let lp = self.len_prompt;
        let infer_content = 1..1 + li;
        let infer_prompt = 1 + li..1 + li + lp;
        let sep1 = infer_prompt.end;
        let d1_content = sep1 + 1..sep1 + 1 + ld;
        let d1_prompt = d1_content.end..d1_content.end + lp;
        let sep2 = d1_prompt.end;
        let d2_content = sep2 + 1..sep2 + 1 + ld;
        let d2_prompt = d2_content.end..d2_content.end + lp;
        let sep3 = d2_prompt.end;
        let (neg_content, neg_prompt, pos_content, pos_prompt) = match self.demo_order {
            DemoOrder::NegFirst => (d1_content, d1_prompt, d2_content, d2_prompt),
            DemoOrder::PosFirst => (d2_content, d2_prompt, d1_content, d1_prompt),
        };
        Ok(LayoutOffsets {
            start_pos: 0,
            mask_pos: infer_prompt.end - 1,
            neg_label_pos: neg_prompt.end - 1,
            pos_label_pos: pos_prompt.end - 1,
            infer_content,
            infer_prompt,
            neg_content,
            neg_prompt,
            pos_content,
            pos_prompt,
            sep_positions: [sep1, sep2, sep3],
            total_len: sep3 + 1,
        })
    }
}

/// Token ids plus reserved specials. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    map: BTreeMap<String, u32>,
    inverse: Vec<String>,
    pub pad_id: u32,
    pub start_id: u32,
    pub sep_id: u32,
    pub mask_id: u32,
    pub unk_id: u32,
    pub neg_label_id: u32,
    pub pos_label_id: u32,
    pub neg_label_word: String,
    pub pos_label_word: String,
}

pub const DEFAULT_NEG_LABEL_WORD: &str = "bad";
pub const DEFAULT_POS_LABEL_WORD: &str = "good";

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.inverse.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id(&self, token: &str) -> u32 {
        // The map stores tokens lowercased, matching `tokenize`.
        let key = token.to_lowercase();
        self.map.get(key.as_str()).copied().unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.inverse[id as usize]
    }
}

/// Lowercased whitespace-and-punctuation tokenization. Punctuation marks
/// become single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Build a vocabulary over the corpus. Tokens below `min_freq` map to
/// `[unk]`; reserved and template tokens are always present.
pub fn build_vocab(corpus: &[MemeRecord], min_freq: usize) -> Vocabulary {
    build_vocab_with_labels(corpus, min_freq, DEFAULT_NEG_LABEL_WORD, DEFAULT_POS_LABEL_WORD)
}

pub fn build_vocab_with_labels(
    corpus: &[MemeRecord],
    min_freq: usize,
    neg_label_word: &str,
    pos_label_word: &str,
) -> Vocabulary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in corpus {
        for field in std::iter::once(r.text.as_str())
            .chain(std::iter::once(r.caption.as_str()))
            .chain(r.knowledge.iter().map(String::as_str))
        {
            for tok in tokenize(field) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let reserved = ["[pad]", "[start]", "[sep]", "[mask]", "[unk]"];
    let mut inverse: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    inverse.push(neg_label_word.to_string());
    inverse.push(pos_label_word.to_string());
    for t in PROMPT_TEMPLATE {
        if !inverse.iter().any(|x| x == t) {
            inverse.push(t.to_string());
        }
    }
    if !inverse.iter().any(|x| x == ".") {
        inverse.push(".".to_string());
    }
    // BTreeMap iteration gives a deterministic id assignment.
    for (tok, c) in &counts {
        if *c >= min_freq && !inverse.iter().any(|x| x == tok) {
            inverse.push(tok.clone());
        }
    }
    let map: BTreeMap<String, u32> =
        inverse.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let idx = |t: &str| map[t];
    Vocabulary {
        pad_id: idx("[pad]"),
        start_id: idx("[start]"),
        sep_id: idx("[sep]"),
        mask_id: idx("[mask]"),
        unk_id: idx("[unk]"),
        neg_label_id: idx(neg_label_word),
        pos_label_id: idx(pos_label_word),
        neg_label_word: neg_label_word.to_string(),
        pos_label_word: pos_label_word.to_string(),
        map,
        inverse,
    }
}

/// Pre-padding token counts per region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RealLengths {
    pub infer: usize,
    pub neg: usize,
    pub pos: usize,
}

/// One assembled sequence: token ids with fixed region spans and special
/// positions.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub offsets: LayoutOffsets,
    pub real_lengths: RealLengths,
    pub label: Option<Label>,
}

/// Region content: text, then caption, then knowledge strings, joined by a
/// literal "." token, truncated head-first to `max_len`.
fn region_tokens(record: &MemeRecord, max_len: usize) -> Vec<String> {
    let mut toks = tokenize(&record.text);
    if !record.caption.trim().is_empty() {
        toks.push(".".into());
        toks.extend(tokenize(&record.caption));
    }
    for k in &record.knowledge {
        if !k.trim().is_empty() {
            toks.push(".".into());
            toks.extend(tokenize(k));
        }
    }
    toks.truncate(max_len);
    toks
}

/// Build the fixed-layout sequence from an inference instance and one
/// demonstration per class.
pub fn assemble(
    instance: &MemeRecord,
    demo_neg: &MemeRecord,
    demo_pos: &MemeRecord,
    layout: &RegionLayout,
    vocab: &Vocabulary,
) -> Result<AssembledSequence> {
    if demo_neg.label != Label::Hateful || demo_pos.label != Label::NonHateful {
        return Err(PenError::Invalid(format!(
            "demonstration labels reversed: neg={}, pos={}",
            demo_neg.label, demo_pos.label
        )));
    }
    let offsets = layout.offsets()?;
    let mut ids = vec![vocab.pad_id; offsets.total_len];
    ids[offsets.start_pos] = vocab.start_id;
    for &p in &offsets.sep_positions {
        ids[p] = vocab.sep_id;
    }

    let fill = |ids: &mut Vec<u32>, span: &Range<usize>, toks: &[String]| -> usize {
        for (i, t) in toks.iter().enumerate() {
            ids[span.start + i] = vocab.id(t);
        }
        toks.len()
    };
    let fill_prompt = |ids: &mut Vec<u32>, span: &Range<usize>, special: u32| {
        for (i, t) in PROMPT_TEMPLATE.iter().enumerate() {
            ids[span.start + i] = vocab.id(t);
        }
        ids[span.end - 1] = special;
    };

    let infer_toks = region_tokens(instance, layout.len_infer);
    let neg_toks = region_tokens(demo_neg, layout.len_demo);
    let pos_toks = region_tokens(demo_pos, layout.len_demo);
    let real_lengths = RealLengths {
        infer: fill(&mut ids, &offsets.infer_content, &infer_toks),
        neg: fill(&mut ids, &offsets.neg_content, &neg_toks),
        pos: fill(&mut ids, &offsets.pos_content, &pos_toks),
    };
    fill_prompt(&mut ids, &offsets.infer_prompt, vocab.mask_id);
    fill_prompt(&mut ids, &offsets.neg_prompt, vocab.neg_label_id);
    fill_prompt(&mut ids, &offsets.pos_prompt, vocab.pos_label_id);

    Ok(AssembledSequence {
        id: instance.id.clone(),
        token_ids: ids,
        offsets,
        real_lengths,
        label: Some(instance.label),
    })
}

impl AssembledSequence {
    /// One-line dump with stable field order, for inspection and golden
    /// files.
    pub fn dump_line(&self) -> String {
        let o = &self.offsets;
        let mut s = String::new();
        let ids: Vec<String> = self.token_ids.iter().map(|i| i.to_string()).collect();
        let _ = write!(
            s,
            "id={} n={} infer={}..{} infer_p={}..{} neg={}..{} neg_p={}..{} pos={}..{} pos_p={}..{} \
             mask={} neg_label={} pos_label={} real={},{},{} label={} ids={}",
            self.id,
            o.total_len,
            o.infer_content.start,
            o.infer_content.end,
            o.infer_prompt.start,
            o.infer_prompt.end,
            o.neg_content.start,
            o.neg_content.end,
            o.neg_prompt.start,
            o.neg_prompt.end,
            o.pos_content.start,
            o.pos_content.end,
            o.pos_prompt.start,
            o.pos_prompt.end,
            o.mask_pos,
            o.neg_label_pos,
            o.pos_label_pos,
            self.real_lengths.infer,
            self.real_lengths.neg,
            self.real_lengths.pos,
            self.label.map(|l| l.index().to_string()).unwrap_or_else(|| "-".into()),
            ids.join(","),
        );
        s
    }

    /// De-tokenize the non-pad part of the infer region.
    pub fn infer_region_tokens<'a>(&self, vocab: &'a Vocabulary) -> Vec<&'a str> {
        self.token_ids[self.offsets.infer_content.clone()]
            .iter()
            .take(self.real_lengths.infer)
            .map(|&i| vocab.token(i))
            .collect()
    }
}
