//! Planted-concept review corpus.
//!
//! Eight token groups: two signal groups decide the label (`praise` for
//! positive, `complaint` for negative) and six aspect groups appear in every
//! document regardless of label. Each sentence draws its content words from
//! a single group, and aspect sentences come with character-span annotations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::AspectAnnotation;
use crate::corpus::Document;

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";

pub const GROUPS: [(&str, [&str; 8]); 8] = [
    ("praise", ["superb", "delicious", "excellent", "wonderful", "fantastic", "lovely", "outstanding", "brilliant"]),
    ("complaint", ["awful", "terrible", "bland", "disappointing", "horrible", "stale", "watery", "nasty"]),
    ("appearance", ["amber", "hazy", "golden", "foam", "pour", "color", "clear", "lacing"]),
    ("aroma", ["smell", "aroma", "citrus", "floral", "pine", "nose", "scent", "grassy"]),
    ("palate", ["mouthfeel", "body", "carbonation", "creamy", "thin", "smooth", "fizzy", "texture"]),
    ("taste", ["flavor", "malt", "hops", "caramel", "bitter", "sweet", "roasted", "toffee"]),
    ("finish", ["finish", "aftertaste", "lingering", "dry", "crisp", "short", "long", "clean"]),
    ("price", ["price", "bottle", "store", "cost", "value", "shelf", "bought", "cheap"]),
];

const FILLERS: [&str; 8] = ["the", "this", "with", "really", "quite", "was", "very", "overall"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub docs: usize,
    pub seed: u64,
    /// Signal sentences per document, inclusive range.
    pub signal_sentences: (usize, usize),
    /// Aspect sentences per document, inclusive range.
    pub aspect_sentences: (usize, usize),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { docs: 200, seed: 0, signal_sentences: (1, 2), aspect_sentences: (2, 3) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    /// Aspect sentences, annotated with their group name.
    pub annotations: Vec<AspectAnnotation>,
    /// Per document, the group index of every sentence in order.
    pub sentence_groups: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    pub fn training_pairs(&self) -> Vec<(String, String)> {
        self.documents.iter().map(|d| (d.text.clone(), d.label.clone().unwrap_or_default())).collect()
    }
}

/// One sentence of 6 to 9 words, at least 4 of them from `group`.
pub fn sentence<R: Rng>(rng: &mut R, group: usize) -> String {
    let tokens = &GROUPS[group].1;
    let len = rng.random_range(6..=9);
    let content = rng.random_range(4..=len);
    let mut words: Vec<&str> = (0..content).map(|_| *tokens.choose(rng).expect("non-empty group")).collect();
    words.extend((content..len).map(|_| *FILLERS.choose(rng).expect("non-empty fillers")));
    words.shuffle(rng);
    let mut text = words.join(" ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut documents = Vec::with_capacity(config.docs);
    let mut annotations = Vec::new();
    let mut sentence_groups = Vec::with_capacity(config.docs);
    for i in 0..config.docs {
        let positive = i % 2 == 0;
        let signal = if positive { 0 } else { 1 };
        let mut groups: Vec<usize> = Vec::new();
        let n_signal = rng.random_range(config.signal_sentences.0..=config.signal_sentences.1);
        groups.extend(std::iter::repeat_n(signal, n_signal));
        let n_aspect = rng.random_range(config.aspect_sentences.0..=config.aspect_sentences.1);
        let mut aspects: Vec<usize> = (2..GROUPS.len()).collect();
        aspects.shuffle(&mut rng);
        groups.extend(aspects.into_iter().take(n_aspect));
        groups.shuffle(&mut rng);

        let id = format!("doc{i:04}");
        let mut text = String::new();
        for &g in &groups {
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(&sentence(&mut rng, g));
            if g >= 2 {
                annotations.push(AspectAnnotation {
                    doc_id: id.clone(),
                    aspect: GROUPS[g].0.to_string(),
                    start,
                    end: text.chars().count(),
                });
            }
        }
        let label = if positive { POSITIVE } else { NEGATIVE };
        documents.push(Document { id, text, label: Some(label.to_string()) });
        sentence_groups.push(groups);
    }
    SyntheticCorpus { documents, annotations, sentence_groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excerpts::{extract, Granularity, GranularitySpec};

    #[test]
    fn sentences_survive_sentence_extraction() {
        let corpus = generate(&SyntheticConfig { docs: 20, ..SyntheticConfig::default() });
        let spec = GranularitySpec::new(Granularity::Sentence);
        for (doc, groups) in corpus.documents.iter().zip(&corpus.sentence_groups) {
            assert_eq!(extract(&doc.id, &doc.text, &spec).len(), groups.len());
        }
    }

    #[test]
    fn annotations_cover_aspect_sentences() {
        let corpus = generate(&SyntheticConfig::default());
        for a in &corpus.annotations {
            let doc = corpus.documents.iter().find(|d| d.id == a.doc_id).unwrap();
            let span: String = doc.text.chars().skip(a.start).take(a.end - a.start).collect();
            assert!(span.ends_with('.'));
            let group = GROUPS.iter().find(|g| g.0 == a.aspect).unwrap();
            let lower = span.to_lowercase();
            assert!(group.1.iter().any(|t| lower.contains(t)));
        }
    }

    #[test]
    fn labels_follow_signal_group() {
        let corpus = generate(&SyntheticConfig { docs: 10, seed: 4, ..SyntheticConfig::default() });
        for (doc, groups) in corpus.documents.iter().zip(&corpus.sentence_groups) {
            let expect = if groups.contains(&0) { POSITIVE } else { NEGATIVE };
            assert_eq!(doc.label.as_deref(), Some(expect));
            assert!(!(groups.contains(&0) && groups.contains(&1)));
        }
        assert_eq!(generate(&SyntheticConfig::default()), generate(&SyntheticConfig::default()));
    }
}
