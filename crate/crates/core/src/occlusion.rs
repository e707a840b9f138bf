//! Element-level attribution of concepts by occlusion.
//!
//! For excerpt `i`, element `j` and concept `k`,
//! `φ(k,i,j) = U_i^k − Ũ_{i−j}^k`, where both coefficients are
//! single-concept NNLS fits against `W_k` and `Ũ` uses the excerpt with
//! element `j` replaced by the mask token and re-embedded.

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excerpts::{elements, occlude, Excerpt, Granularity, GranularitySpec};
use crate::matrixio::DenseMatrix;
use crate::nmf::ConceptModel;
use crate::provider::{check_nonnegative, Provider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementAttribution {
    pub excerpt_id: String,
    pub element_index: usize,
    pub element_text: String,
    /// Character span of the element within the source document.
    pub span: (usize, usize),
    pub concept: usize,
    pub phi: f64,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleElement {
    pub index: usize,
    pub text: String,
    pub span: (usize, usize),
    /// Winning concept, or `None` when no concept is present in the excerpt.
    pub concept: Option<usize>,
    pub phi: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionBundle {
    pub excerpt: String,
    pub doc_id: String,
    pub text: String,
    pub span: (usize, usize),
    pub present: Vec<usize>,
    pub unattributed: bool,
    pub elements: Vec<BundleElement>,
}

/// `max(0, ⟨a, w_k⟩ / ‖w_k‖²)`; zero for a zero concept vector.
pub fn single_concept_coefficient(a: ArrayView1<'_, f64>, w_k: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != w_k.len() {
        return Err(Error::dims(format!("activation of length {}", w_k.len()), a.len()));
    }
    let norm = w_k.dot(&w_k);
    if norm <= 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(&w_k) / norm).max(0.0))
}

/// `U_i^k` for one excerpt, embedding it with `provider`.
pub fn concept_coefficient<P: Provider + ?Sized>(
    excerpt: &Excerpt,
    model: &ConceptModel,
    k: usize,
    provider: &P,
) -> Result<f64> {
    if k >= model.r() {
        return Err(Error::Precondition(format!("concept {k} out of range for r = {}", model.r())));
    }
    let a = provider.embed(std::slice::from_ref(&excerpt.text))?;
    single_concept_coefficient(a.row(0), model.w.as_array().column(k))
}

/// φ for every (element, concept) pair given the base activation and one
/// occluded activation per element.
pub fn phi_table(
    model: &ConceptModel,
    base: ArrayView1<'_, f64>,
    occluded: &DenseMatrix,
    concepts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let w = model.w.as_array();
    let base_coef: Vec<f64> =
        concepts.iter().map(|&k| single_concept_coefficient(base, w.column(k))).collect::<Result<_>>()?;
    (0..occluded.rows())
        .map(|j| {
            concepts
                .iter()
                .zip(&base_coef)
                .map(|(&k, &u)| Ok(u - single_concept_coefficient(occluded.row(j), w.column(k))?))
                .collect()
        })
        .collect()
}

/// Concepts whose joint coefficient on this activation reaches the presence threshold.
pub fn present_concepts(model: &ConceptModel, activation: &DenseMatrix) -> Result<Vec<usize>> {
    let u = model.transform(activation)?;
    Ok(model.presence(u.row(0)).iter().enumerate().filter_map(|(k, &on)| on.then_some(k)).collect())
}

/// Attributions for every τ₂ element and every concept present in the
/// excerpt. The base text and all occluded variants go to the provider in a
/// single `embed` batch of `1 + |elements|` texts.
pub fn attribute<P: Provider + ?Sized>(
    excerpt: &Excerpt,
    model: &ConceptModel,
    provider: &P,
    tau2: &GranularitySpec,
    mask_token: &str,
) -> Result<Vec<ElementAttribution>> {
    let parts = elements(excerpt, tau2);
    if parts.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts = vec![excerpt.text.clone()];
    for j in 0..parts.len() {
        texts.push(occlude(excerpt, j, tau2, mask_token)?);
    }
    let embedded = provider.embed(&texts)?;
    check_nonnegative(&embedded)?;
    let base = embedded.select_rows(&[0]);
    let occluded = embedded.select_rows(&(1..texts.len()).collect::<Vec<_>>());
    let concepts = present_concepts(model, &base)?;
    let table = phi_table(model, base.row(0), &occluded, &concepts)?;

    let id = excerpt.id();
    let mut out = Vec::with_capacity(parts.len() * concepts.len());
    for (j, part) in parts.iter().enumerate() {
        for (c, &k) in concepts.iter().enumerate() {
            out.push(ElementAttribution {
                excerpt_id: id.clone(),
                element_index: j,
                element_text: part.text.clone(),
                span: part.span(),
                concept: k,
                phi: table[j][c],
                granularity: tau2.mode,
            });
        }
    }
    Ok(out)
}

/// Element index, text, span and the best `(concept, φ)` so far.
type ElementSlot<'a> = (usize, &'a str, (usize, usize), Option<(usize, f64)>);

/// Winner per element (`argmax_k φ`, ties to the lower concept) and
/// max-normalized intensities.
pub fn bundle(excerpt: &Excerpt, present: &[usize], attributions: &[ElementAttribution]) -> AttributionBundle {
    let mut by_element: Vec<ElementSlot<'_>> = Vec::new();
    for a in attributions {
        let slot = match by_element.iter().position(|e| e.0 == a.element_index) {
            Some(pos) => pos,
            None => {
                by_element.push((a.element_index, &a.element_text, a.span, None));
                by_element.len() - 1
            }
        };
        let best = &mut by_element[slot].3;
        let better = match best {
            None => true,
            Some((k, phi)) => a.phi > *phi || (a.phi == *phi && a.concept < *k),
        };
        if better {
            *best = Some((a.concept, a.phi));
        }
    }
    by_element.sort_by_key(|e| e.0);

    let max_phi = by_element.iter().filter_map(|e| e.3.map(|(_, phi)| phi)).fold(0.0f64, f64::max);
    let unattributed = max_phi <= 0.0;
    let elements = by_element
        .into_iter()
        .map(|(index, text, span, best)| {
            let phi = best.map_or(0.0, |(_, phi)| phi);
            BundleElement {
                index,
                text: text.to_string(),
                span,
                concept: best.map(|(k, _)| k),
                phi,
                intensity: if unattributed { 0.0 } else { phi.max(0.0) / max_phi },
            }
        })
        .collect();
    AttributionBundle {
        excerpt: excerpt.id(),
        doc_id: excerpt.doc_id.clone(),
        text: excerpt.text.clone(),
        span: excerpt.span(),
        present: present.to_vec(),
        unattributed,
        elements,
    }
}

/// Attributes and bundles each excerpt; excerpts are processed in parallel
/// and returned in input order.
pub fn explain<P: Provider + ?Sized>(
    excerpts: &[Excerpt],
    model: &ConceptModel,
    provider: &P,
    tau2: &GranularitySpec,
    mask_token: &str,
) -> Result<Vec<AttributionBundle>> {
    excerpts
        .par_iter()
        .map(|excerpt| {
            let attributions = attribute(excerpt, model, provider, tau2, mask_token)?;
            let mut present: Vec<usize> = attributions.iter().map(|a| a.concept).collect();
            present.sort_unstable();
            present.dedup();
            Ok(bundle(excerpt, &present, &attributions))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn excerpt(text: &str) -> Excerpt {
        Excerpt {
            doc_id: "d".into(),
            start: 0,
            end: text.chars().count(),
            text: text.into(),
            granularity: Granularity::Sentence,
        }
    }

    fn attr(j: usize, k: usize, phi: f64) -> ElementAttribution {
        ElementAttribution {
            excerpt_id: "d:0-1".into(),
            element_index: j,
            element_text: format!("e{j}"),
            span: (j, j + 1),
            concept: k,
            phi,
            granularity: Granularity::Word,
        }
    }

    #[test]
    fn closed_form_examples() {
        let w = array![0.6, 0.8];
        assert!((single_concept_coefficient((&w * 3.0).view(), w.view()).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(single_concept_coefficient(array![0.8, -0.6].view(), w.view()).unwrap(), 0.0);
        assert_eq!(single_concept_coefficient(array![1.0, 1.0].view(), array![0.0, 0.0].view()).unwrap(), 0.0);
        assert!(single_concept_coefficient(array![1.0].view(), w.view()).is_err());
    }

    #[test]
    fn bundle_single_element() {
        let b = bundle(&excerpt("x"), &[0, 1], &[attr(0, 0, 0.5), attr(0, 1, 0.2)]);
        assert_eq!(b.elements[0].concept, Some(0));
        assert_eq!(b.elements[0].intensity, 1.0);
        assert!(!b.unattributed);
    }

    #[test]
    fn bundle_all_nonpositive_is_unattributed() {
        let b = bundle(&excerpt("x y"), &[0], &[attr(0, 0, -0.1), attr(1, 0, 0.0)]);
        assert!(b.unattributed);
        assert!(b.elements.iter().all(|e| e.intensity == 0.0));
    }

    #[test]
    fn bundle_hand_table() {
        // φ rows: e0 = (0.2, 0.8), e1 = (0.4, 0.4), e2 = (-0.3, -0.1)
        let table = [(0.2, 0.8), (0.4, 0.4), (-0.3, -0.1)];
        let attrs: Vec<_> = table.iter().enumerate().flat_map(|(j, &(a, b))| [attr(j, 0, a), attr(j, 1, b)]).collect();
        let b = bundle(&excerpt("a b c"), &[0, 1], &attrs);
        let winners: Vec<_> = b.elements.iter().map(|e| e.concept).collect();
        assert_eq!(winners, vec![Some(1), Some(0), Some(1)]);
        let intensities: Vec<_> = b.elements.iter().map(|e| e.intensity).collect();
        assert_eq!(intensities, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn bundle_without_concepts() {
        let b = bundle(&excerpt("quiet"), &[], &[]);
        assert!(b.unattributed && b.elements.is_empty());
    }
}
