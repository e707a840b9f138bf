//! Excerpt extraction at full-text, sentence, clause and word granularity,
//! and element occlusion.
//!
//! All spans are character offsets (Unicode scalar values) into the source
//! document, end-exclusive.
//!
//! Sentence rule: a sentence ends at `.`, `!` or `?` followed by whitespace or
//! end of text. Abbreviations are not special-cased.
//!
//! Clause rule (applied inside each sentence): `;` and `:` always split; a
//! coordinating marker (`but`, `and`, `because`, `although`, `while`, `yet`)
//! starts a new clause when it is a whole token; a comma splits when the
//! comma-delimited fragment after it holds at least
//! [`MIN_WORDS_AFTER_COMMA`] words, so enumerations such as
//! "pale, hazy pour" stay in one clause. Delimiter characters are dropped and
//! empty fragments discarded.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_SENTENCE_MIN_WORDS: usize = 6;
pub const MIN_WORDS_AFTER_COMMA: usize = 3;

const CLAUSE_MARKERS: [&str; 6] = ["but", "and", "because", "although", "while", "yet"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Clause,
    Sentence,
    Full,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Word => "word",
            Granularity::Clause => "clause",
            Granularity::Sentence => "sentence",
            Granularity::Full => "full",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "word" | "words" => Ok(Granularity::Word),
            "clause" | "clauses" => Ok(Granularity::Clause),
            "sentence" | "sentences" => Ok(Granularity::Sentence),
            "full" => Ok(Granularity::Full),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub mode: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_words: Option<usize>,
}

impl GranularitySpec {
    pub fn new(mode: Granularity) -> Self {
        GranularitySpec { mode, min_words: None }
    }

    pub fn with_min_words(mode: Granularity, min_words: usize) -> Result<Self> {
        if min_words == 0 {
            return Err(Error::Config("min_words must be at least 1".into()));
        }
        Ok(GranularitySpec { mode, min_words: Some(min_words) })
    }

    /// Minimum whitespace-delimited word count; 6 by default in sentence mode, 1 otherwise.
    pub fn min_words(&self) -> usize {
        self.min_words.unwrap_or(match self.mode {
            Granularity::Sentence => DEFAULT_SENTENCE_MIN_WORDS,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_words == Some(0) {
            return Err(Error::Config("min_words must be at least 1".into()));
        }
        Ok(())
    }
}

impl FromStr for GranularitySpec {
    type Err = Error;

    /// `mode` or `mode:min_words`, e.g. `sentence:6`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((mode, n)) => {
                let n = n.trim().parse().map_err(|_| Error::Config(format!("invalid min_words in `{s}`")))?;
                GranularitySpec::with_min_words(mode.parse()?, n)
            }
            None => Ok(GranularitySpec::new(s.parse()?)),
        }
    }
}

/// Checks that occlusion granularity `tau2` is finer than the concept
/// granularity `tau1`: words work under anything, clauses need sentence or
/// full-text excerpts, sentences need full-text excerpts.
pub fn check_tau_pair(tau1: &GranularitySpec, tau2: &GranularitySpec) -> Result<()> {
    let ok = match tau2.mode {
        Granularity::Word => true,
        Granularity::Clause => matches!(tau1.mode, Granularity::Sentence | Granularity::Full),
        Granularity::Sentence => tau1.mode == Granularity::Full,
        Granularity::Full => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "occlusion granularity `{}` is incompatible with concept granularity `{}`",
            tau2.mode, tau1.mode
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub granularity: Granularity,
}

impl Excerpt {
    pub fn id(&self) -> String {
        format!("{}:{}-{}", self.doc_id, self.start, self.end)
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Splits `doc` into excerpts at the requested granularity, in document order.
pub fn extract(doc_id: &str, doc: &str, spec: &GranularitySpec) -> Vec<Excerpt> {
    let chars: Vec<char> = doc.chars().collect();
    let spans = match spec.mode {
        Granularity::Full => trim_span(&chars, 0, chars.len()).into_iter().collect(),
        Granularity::Sentence => filter_min_words(&chars, sentence_spans(&chars), spec.min_words()),
        Granularity::Clause => {
            let clauses = sentence_spans(&chars).into_iter().flat_map(|(s, e)| clause_spans(&chars, s, e)).collect();
            filter_min_words(&chars, clauses, spec.min_words())
        }
        Granularity::Word => word_spans(&chars),
    };
    spans
        .into_iter()
        .map(|(start, end)| Excerpt {
            doc_id: doc_id.to_string(),
            start,
            end,
            text: chars[start..end].iter().collect(),
            granularity: spec.mode,
        })
        .collect()
}

/// The occlusion elements of an excerpt, with spans relative to the source document.
pub fn elements(excerpt: &Excerpt, spec: &GranularitySpec) -> Vec<Excerpt> {
    extract(&excerpt.doc_id, &excerpt.text, spec)
        .into_iter()
        .map(|mut el| {
            el.start += excerpt.start;
            el.end += excerpt.start;
            el
        })
        .collect()
}

/// Replaces element `index` of the excerpt with `mask_token`.
pub fn occlude(excerpt: &Excerpt, index: usize, spec: &GranularitySpec, mask_token: &str) -> Result<String> {
    let els = elements(excerpt, spec);
    let el = els
        .get(index)
        .ok_or_else(|| Error::Precondition(format!("element index {index} out of range ({} elements)", els.len())))?;
    let (s, e) = (el.start - excerpt.start, el.end - excerpt.start);
    let mut out = String::with_capacity(excerpt.text.len() + mask_token.len());
    out.extend(excerpt.text.chars().take(s));
    out.push_str(mask_token);
    out.extend(excerpt.text.chars().skip(e));
    Ok(out)
}

fn trim_span(chars: &[char], mut start: usize, mut end: usize) -> Option<(usize, usize)> {
    while start < end && chars[start].is_whitespace() {
        start += 1;
    }
    while end > start && chars[end - 1].is_whitespace() {
        end -= 1;
    }
    (start < end).then_some((start, end))
}

fn word_count(chars: &[char]) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in chars {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            count += 1;
        }
    }
    count
}

fn filter_min_words(chars: &[char], spans: Vec<(usize, usize)>, min_words: usize) -> Vec<(usize, usize)> {
    spans.into_iter().filter(|&(s, e)| word_count(&chars[s..e]) >= min_words).collect()
}

fn sentence_spans(chars: &[char]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let terminal = matches!(chars[i], '.' | '!' | '?');
        if terminal && chars.get(i + 1).is_none_or(|c| c.is_whitespace()) {
            spans.extend(trim_span(chars, start, i + 1));
            start = i + 1;
        }
    }
    spans.extend(trim_span(chars, start, chars.len()));
    spans
}

enum Cut {
    // Clause ends before `at`, next starts at `at + 1`.
    Delimiter(usize),
    // Clause ends before `at`, next starts at `at`.
    Before(usize),
}

fn is_marker(token: &[char]) -> bool {
    let word: String = token.iter().take_while(|c| c.is_alphanumeric()).flat_map(|c| c.to_lowercase()).collect();
    let rest_is_punct = token.iter().skip_while(|c| c.is_alphanumeric()).all(|c| c.is_ascii_punctuation());
    rest_is_punct && CLAUSE_MARKERS.contains(&word.as_str())
}

fn clause_spans(chars: &[char], start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut cuts = Vec::new();
    let mut i = start;
    while i < end {
        let c = chars[i];
        if c == ';' || c == ':' {
            cuts.push(Cut::Delimiter(i));
        } else if c == ',' {
            let mut j = i + 1;
            while j < end && !matches!(chars[j], ',' | ';' | ':') {
                j += 1;
            }
            if word_count(&chars[i + 1..j]) >= MIN_WORDS_AFTER_COMMA {
                cuts.push(Cut::Delimiter(i));
            }
        } else if !c.is_whitespace() && (i == start || chars[i - 1].is_whitespace()) {
            let mut j = i;
            while j < end && !chars[j].is_whitespace() {
                j += 1;
            }
            if i > start && is_marker(&chars[i..j]) {
                cuts.push(Cut::Before(i));
            }
        }
        i += 1;
    }

    let mut spans = Vec::new();
    let mut from = start;
    for cut in cuts {
        let (until, next) = match cut {
            Cut::Delimiter(at) => (at, at + 1),
            Cut::Before(at) => (at, at),
        };
        if until >= from {
            spans.extend(trim_span(chars, from, until));
        }
        from = from.max(next);
    }
    spans.extend(trim_span(chars, from, end));
    spans.retain(|&(s, e)| chars[s..e].iter().any(|c| c.is_alphanumeric()));
    spans
}

fn is_word_char(chars: &[char], i: usize) -> bool {
    let c = chars[i];
    if c.is_alphanumeric() {
        return true;
    }
    // Apostrophes inside a word ("don't") belong to it.
    c == '\'' && i > 0 && chars[i - 1].is_alphanumeric() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
}

fn word_spans(chars: &[char]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if is_word_char(chars, i) {
            let s = i;
            while i < chars.len() && is_word_char(chars, i) {
                i += 1;
            }
            spans.push((s, i));
        } else {
            i += 1;
        }
    }
    spans
}

/// Writes excerpts as newline-delimited JSON `{doc_id, start, end, text, granularity}`.
pub fn write_ndjson<W: Write>(excerpts: &[Excerpt], mut out: W) -> Result<()> {
    for e in excerpts {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<Excerpt>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Excerpt = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("excerpt record on line {}: {err}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(excerpts: &[Excerpt]) -> Vec<&str> {
        excerpts.iter().map(|e| e.text.as_str()).collect()
    }

    fn spec(mode: Granularity, min_words: usize) -> GranularitySpec {
        GranularitySpec::with_min_words(mode, min_words).unwrap()
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let ex = extract("d", "Good beer. Bad head.", &spec(Granularity::Sentence, 1));
        assert_eq!(texts(&ex), ["Good beer.", "Bad head."]);
        assert_eq!(ex[1].span(), (11, 20));
    }

    #[test]
    fn sentence_mode_drops_short_sentences() {
        let doc = "Short. This sentence has exactly six words.";
        let ex = extract("d", doc, &GranularitySpec::new(Granularity::Sentence));
        assert_eq!(texts(&ex), ["This sentence has exactly six words."]);
    }

    #[test]
    fn decimal_points_do_not_split() {
        let ex = extract("d", "It is 4.5 percent! Really?", &spec(Granularity::Sentence, 1));
        assert_eq!(texts(&ex), ["It is 4.5 percent!", "Really?"]);
    }

    #[test]
    fn clauses_follow_the_rule_set() {
        let ex = extract("d", "A pale, hazy pour, but the aroma is rich", &GranularitySpec::new(Granularity::Clause));
        assert_eq!(texts(&ex), ["A pale, hazy pour", "but the aroma is rich"]);

        let ex = extract("d", "Thin body; the finish is dry and bitter.", &GranularitySpec::new(Granularity::Clause));
        assert_eq!(texts(&ex), ["Thin body", "the finish is dry", "and bitter."]);
    }

    #[test]
    fn markers_must_be_whole_tokens() {
        let ex = extract("d", "butter notes andante style", &GranularitySpec::new(Granularity::Clause));
        assert_eq!(texts(&ex), ["butter notes andante style"]);
        let ex = extract("d", "Sweet But dry", &GranularitySpec::new(Granularity::Clause));
        assert_eq!(texts(&ex), ["Sweet", "But dry"]);
    }

    #[test]
    fn full_mode_is_trimmed_document() {
        let ex = extract("d", "  whole text here \n", &GranularitySpec::new(Granularity::Full));
        assert_eq!(texts(&ex), ["whole text here"]);
        assert_eq!(ex[0].span(), (2, 17));
        assert!(extract("d", "   ", &GranularitySpec::new(Granularity::Full)).is_empty());
    }

    #[test]
    fn words_are_punctuation_delimited() {
        let ex = extract("d", "Don't stop, it's great!", &GranularitySpec::new(Granularity::Word));
        assert_eq!(texts(&ex), ["Don't", "stop", "it's", "great"]);
    }

    #[test]
    fn empty_document_has_no_excerpts() {
        for mode in [Granularity::Full, Granularity::Sentence, Granularity::Clause, Granularity::Word] {
            assert!(extract("d", "", &GranularitySpec::new(mode)).is_empty());
        }
    }

    #[test]
    fn spans_are_char_offsets() {
        let doc = "Très bon café. Über gut!";
        let ex = extract("d", doc, &spec(Granularity::Sentence, 1));
        let chars: Vec<char> = doc.chars().collect();
        for e in &ex {
            assert_eq!(chars[e.start..e.end].iter().collect::<String>(), e.text);
        }
        assert_eq!(ex[1].start, 15);
    }

    fn excerpt(text: &str) -> Excerpt {
        Excerpt {
            doc_id: "d".into(),
            start: 0,
            end: text.chars().count(),
            text: text.into(),
            granularity: Granularity::Full,
        }
    }

    #[test]
    fn occlusion_replaces_one_element() {
        let words = GranularitySpec::new(Granularity::Word);
        assert_eq!(occlude(&excerpt("great movie"), 0, &words, "[MASK]").unwrap(), "[MASK] movie");
        assert_eq!(occlude(&excerpt("great"), 0, &words, "[MASK]").unwrap(), "[MASK]");
        let clauses = GranularitySpec::new(Granularity::Clause);
        assert_eq!(occlude(&excerpt("slow, but the acting shines"), 1, &clauses, "[MASK]").unwrap(), "slow, [MASK]");
        assert_eq!(occlude(&excerpt("great movie"), 1, &words, "<unk>").unwrap(), "great <unk>");
    }

    #[test]
    fn occlusion_index_out_of_range() {
        let words = GranularitySpec::new(Granularity::Word);
        assert!(matches!(occlude(&excerpt("great movie"), 2, &words, "[MASK]"), Err(Error::Precondition(_))));
    }

    #[test]
    fn elements_are_offset_into_the_document() {
        let doc = "Bad head. Great taste overall here.";
        let ex = extract("d", doc, &spec(Granularity::Sentence, 1));
        let els = elements(&ex[1], &GranularitySpec::new(Granularity::Word));
        let chars: Vec<char> = doc.chars().collect();
        assert_eq!(els.len(), 4);
        for el in &els {
            assert_eq!(chars[el.start..el.end].iter().collect::<String>(), el.text);
        }
    }

    #[test]
    fn tau_pairing_rules() {
        let s = |m| GranularitySpec::new(m);
        assert!(check_tau_pair(&s(Granularity::Clause), &s(Granularity::Word)).is_ok());
        assert!(check_tau_pair(&s(Granularity::Sentence), &s(Granularity::Clause)).is_ok());
        assert!(check_tau_pair(&s(Granularity::Full), &s(Granularity::Clause)).is_ok());
        assert!(check_tau_pair(&s(Granularity::Clause), &s(Granularity::Clause)).is_err());
        assert!(check_tau_pair(&s(Granularity::Word), &s(Granularity::Clause)).is_err());
    }

    #[test]
    fn spec_parsing() {
        let s: GranularitySpec = "sentence:4".parse().unwrap();
        assert_eq!((s.mode, s.min_words()), (Granularity::Sentence, 4));
        let s: GranularitySpec = "sentence".parse().unwrap();
        assert_eq!(s.min_words(), 6);
        assert!("sentence:0".parse::<GranularitySpec>().is_err());
        assert!("paragraph".parse::<GranularitySpec>().is_err());
        let json: GranularitySpec = serde_json::from_str(r#"{"mode":"clause"}"#).unwrap();
        assert_eq!(json.min_words(), 1);
    }

    #[test]
    fn ndjson_round_trip() {
        let ex = extract("doc-1", "One two three. Four five, but six seven.", &spec(Granularity::Clause, 1));
        let mut buf = Vec::new();
        write_ndjson(&ex, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().starts_with(r#"{"doc_id":"doc-1","start":0,"end":"#));
        assert_eq!(read_ndjson(&buf[..]).unwrap(), ex);
    }

    fn doc_strategy() -> impl Strategy<Value = String> {
        let token = prop_oneof![
            "[a-zA-Z]{1,7}".prop_map(|s| s),
            Just("but".to_string()),
            Just("and".to_string()),
            Just(",".to_string()),
            Just(".".to_string()),
            Just("!".to_string()),
            Just(";".to_string()),
            Just("é".to_string()),
        ];
        proptest::collection::vec((token, prop_oneof![Just(" "), Just(""), Just("  "), Just("\n")]), 0..40)
            .prop_map(|v| v.into_iter().map(|(t, s)| format!("{t}{s}")).collect())
    }

    proptest! {
        #[test]
        fn spans_are_ordered_disjoint_slices(doc in doc_strategy()) {
            let chars: Vec<char> = doc.chars().collect();
            for mode in [Granularity::Full, Granularity::Sentence, Granularity::Clause, Granularity::Word] {
                let ex = extract("d", &doc, &spec(mode, 1));
                let mut last_end = 0;
                for e in &ex {
                    prop_assert!(e.start >= last_end && e.start < e.end && e.end <= chars.len());
                    prop_assert_eq!(chars[e.start..e.end].iter().collect::<String>(), e.text.clone());
                    last_end = e.end;
                }
                prop_assert_eq!(extract("d", &doc, &spec(mode, 1)), ex);
            }
        }

        #[test]
        fn sentences_cover_document_up_to_whitespace(doc in doc_strategy()) {
            // Sentence spans with min_words = 1 leave only whitespace or
            // word-free fragments uncovered.
            let chars: Vec<char> = doc.chars().collect();
            let ex = extract("d", &doc, &spec(Granularity::Sentence, 1));
            let mut covered = vec![false; chars.len()];
            for e in &ex {
                for c in covered.iter_mut().take(e.end).skip(e.start) {
                    *c = true;
                }
            }
            for (i, c) in chars.iter().enumerate() {
                prop_assert!(covered[i] || c.is_whitespace(), "char {:?} at {} uncovered", c, i);
            }
        }

        #[test]
        fn word_occlusion_changes_exactly_one_element(doc in doc_strategy(), pick in any::<prop::sample::Index>()) {
            let words = GranularitySpec::new(Granularity::Word);
            let ex = excerpt(&doc);
            let before = elements(&ex, &words);
            prop_assume!(!before.is_empty());
            let j = pick.index(before.len());
            let occluded = occlude(&ex, j, &words, "[MASK]").unwrap();
            let after = extract("d", &occluded, &words);
            prop_assert_eq!(after.len(), before.len());
            for (k, (b, a)) in before.iter().zip(&after).enumerate() {
                if k == j {
                    prop_assert_eq!(a.text.as_str(), "MASK");
                } else {
                    prop_assert_eq!(&a.text, &b.text);
                }
            }
        }

        #[test]
        fn clause_occlusion_keeps_other_elements(doc in doc_strategy(), pick in any::<prop::sample::Index>()) {
            let clauses = GranularitySpec::new(Granularity::Clause);
            let ex = excerpt(&doc);
            let before = elements(&ex, &clauses);
            prop_assume!(!before.is_empty());
            let j = pick.index(before.len());
            let occluded = occlude(&ex, j, &clauses, "[MASK]").unwrap();
            // Text before the target and after it is untouched.
            let chars: Vec<char> = doc.chars().collect();
            let prefix: String = chars[..before[j].start].iter().collect();
            let suffix: String = chars[before[j].end..].iter().collect();
            prop_assert_eq!(occluded, format!("{prefix}[MASK]{suffix}"));
        }
    }
}
