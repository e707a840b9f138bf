//! Agreement between concept presence and human aspect annotations.
//!
//! The unit of evaluation is the excerpt: an excerpt is aspect-positive when
//! its span overlaps an annotated span of that aspect, and a concept predicts
//! the aspect wherever it passes its presence threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excerpts::Excerpt;
use crate::matrixio::DenseMatrix;
use crate::nmf::ConceptModel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectAnnotation {
    pub doc_id: String,
    pub aspect: String,
    pub start: usize,
    pub end: usize,
}

pub fn read_annotations<R: BufRead>(input: R) -> Result<Vec<AspectAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AspectAnnotation =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("annotation line {}: {e}", i + 1)))?;
        if a.start >= a.end {
            return Err(Error::Data(format!("annotation line {}: empty span {}..{}", i + 1, a.start, a.end)));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(annotations: &[AspectAnnotation], mut out: W) -> Result<()> {
    for a in annotations {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-excerpt aspect labels. `flags[i][a]` refers to `aspects[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectFlags {
    pub aspects: Vec<String>,
    pub flags: Vec<Vec<bool>>,
}

impl AspectFlags {
    pub fn column(&self, aspect: usize) -> Vec<bool> {
        self.flags.iter().map(|row| row[aspect]).collect()
    }
}

/// Fraction of the annotated span `[a0, a1)` covered by `[e0, e1)`.
pub fn overlap_fraction(excerpt: (usize, usize), annotation: (usize, usize)) -> f64 {
    let len = annotation.1.saturating_sub(annotation.0);
    if len == 0 {
        return 0.0;
    }
    let lo = excerpt.0.max(annotation.0);
    let hi = excerpt.1.min(annotation.1);
    hi.saturating_sub(lo) as f64 / len as f64
}

/// Labels each excerpt with the aspects whose annotated spans it overlaps.
///
/// An excerpt is positive for an aspect when some annotated span has a
/// non-empty overlap covering at least `overlap_frac` of that span.
/// `known_docs` defaults to the documents the excerpts come from.
pub fn label_excerpts(
    excerpts: &[Excerpt],
    annotations: &[AspectAnnotation],
    known_docs: Option<&BTreeSet<String>>,
    overlap_frac: f64,
) -> Result<AspectFlags> {
    if !(0.0..=1.0).contains(&overlap_frac) {
        return Err(Error::Config(format!("overlap fraction {overlap_frac} outside [0, 1]")));
    }
    let from_excerpts: BTreeSet<String> = excerpts.iter().map(|e| e.doc_id.clone()).collect();
    let known = known_docs.unwrap_or(&from_excerpts);
    let unknown: BTreeSet<&str> =
        annotations.iter().filter(|a| !known.contains(&a.doc_id)).map(|a| a.doc_id.as_str()).collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!(
            "annotations reference unknown documents: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let aspects: Vec<String> =
        annotations.iter().map(|a| a.aspect.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut by_doc: BTreeMap<&str, Vec<(usize, &AspectAnnotation)>> = BTreeMap::new();
    for a in annotations {
        let idx = aspects.binary_search(&a.aspect).expect("aspect collected above");
        by_doc.entry(a.doc_id.as_str()).or_default().push((idx, a));
    }
    let flags = excerpts
        .iter()
        .map(|e| {
            let mut row = vec![false; aspects.len()];
            for (idx, a) in by_doc.get(e.doc_id.as_str()).into_iter().flatten() {
                let frac = overlap_fraction(e.span(), (a.start, a.end));
                if frac > 0.0 && frac >= overlap_frac {
                    row[*idx] = true;
                }
            }
            row
        })
        .collect();
    Ok(AspectFlags { aspects, flags })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub aspect: String,
    pub best_concept: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub positives: usize,
    /// No excerpt is positive for this aspect, so recall is not defined.
    pub undefined_recall: bool,
    pub per_concept: Vec<ConceptScore>,
}

/// Scores every concept's presence column against every aspect and keeps
/// the max-F1 concept per aspect (ties to the lower index).
///
/// The search runs over the full annotated set, so the best-concept scores
/// are an optimistic, in-sample figure.
pub fn score_predictions(predictions: &[Vec<bool>], flags: &AspectFlags) -> Result<Vec<AlignmentResult>> {
    if predictions.len() != flags.flags.len() {
        return Err(Error::dims(format!("{} excerpt predictions", flags.flags.len()), predictions.len()));
    }
    let r = predictions.first().map_or(0, Vec::len);
    if r == 0 {
        return Err(Error::Precondition("no concepts to score".into()));
    }
    Ok((0..flags.aspects.len())
        .map(|a| {
            let actual = flags.column(a);
            let per_concept: Vec<ConceptScore> = (0..r)
                .map(|k| {
                    let predicted: Vec<bool> = predictions.iter().map(|row| row[k]).collect();
                    let c = Confusion::from_labels(&predicted, &actual);
                    ConceptScore {
                        concept: k,
                        precision: c.precision(),
                        recall: c.recall(),
                        f1: c.f1(),
                        accuracy: c.accuracy(),
                        confusion: c,
                    }
                })
                .collect();
            let best = per_concept.iter().fold(0, |best, s| if s.f1 > per_concept[best].f1 { s.concept } else { best });
            let positives = actual.iter().filter(|&&x| x).count();
            AlignmentResult {
                aspect: flags.aspects[a].clone(),
                best_concept: best,
                precision: per_concept[best].precision,
                recall: per_concept[best].recall,
                f1: per_concept[best].f1,
                positives,
                undefined_recall: positives == 0,
                per_concept,
            }
        })
        .collect())
}

/// Presence flags of `u_eval` under `model`'s thresholds, scored per aspect.
pub fn score_concepts(model: &ConceptModel, u_eval: &DenseMatrix, flags: &AspectFlags) -> Result<Vec<AlignmentResult>> {
    if u_eval.cols() != model.r() {
        return Err(Error::dims(format!("{} concept columns", model.r()), u_eval.cols()));
    }
    let predictions: Vec<Vec<bool>> = (0..u_eval.rows()).map(|i| model.presence(u_eval.row(i))).collect();
    score_predictions(&predictions, flags)
}

/// One row per model: `model,acc` then `P,R,F1` for each aspect.
pub fn write_table_csv<W: Write>(
    label: &str,
    accuracy: Option<f64>,
    results: &[AlignmentResult],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string(), "acc".to_string()];
    let mut row = vec![label.to_string(), accuracy.map(|a| a.to_string()).unwrap_or_default()];
    for r in results {
        for metric in ["p", "r", "f1"] {
            header.push(format!("{}_{metric}", r.aspect));
        }
        row.extend([r.precision.to_string(), r.recall.to_string(), r.f1.to_string()]);
    }
    w.write_record(&header)?;
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// Long form: one row per (aspect, concept).
pub fn write_concept_csv<W: Write>(results: &[AlignmentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["aspect", "concept", "precision", "recall", "f1", "accuracy", "tp", "fp", "fn", "tn", "best"])?;
    for r in results {
        for s in &r.per_concept {
            let c = s.confusion;
            w.write_record([
                r.aspect.clone(),
                s.concept.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
                s.accuracy.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                (s.concept == r.best_concept).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
