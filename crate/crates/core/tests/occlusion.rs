mod common;

use conceptlens::excerpts::{extract, Excerpt, Granularity, GranularitySpec, DEFAULT_MASK_TOKEN};
use conceptlens::matrixio::nnls_solve;
use conceptlens::nmf::{fit, ConceptModel, NmfConfig};
use conceptlens::occlusion::{attribute, concept_coefficient, explain, phi_table, single_concept_coefficient};
use conceptlens::provider::{CachedProvider, Provider, ToyConfig, ToyModel};
use conceptlens::synthetic::{generate, SyntheticConfig};
use conceptlens::DenseMatrix;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Each vocabulary token embeds to its own axis, the hidden layer is the
/// identity, so concept `k = e_k` is exactly the direction of token `k`.
fn axis_model() -> ToyModel {
    ToyModel::from_parts(
        &["hoppy", "dark", "sweet"],
        &["neg", "pos"],
        array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        Array2::eye(3),
        Array1::zeros(3),
        array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]],
        Array1::zeros(2),
    )
    .unwrap()
}

fn axis_concepts() -> ConceptModel {
    ConceptModel {
        w: DenseMatrix::from_array(Array2::eye(3)).unwrap(),
        u: DenseMatrix::zeros(0, 3),
        class_id: 1,
        config: NmfConfig::default(),
        objective_trace: vec![],
        presence_threshold: vec![0.05; 3],
    }
}

fn sentence(text: &str) -> Excerpt {
    Excerpt {
        doc_id: "d".into(),
        start: 0,
        end: text.chars().count(),
        text: text.into(),
        granularity: Granularity::Sentence,
    }
}

fn word() -> GranularitySpec {
    GranularitySpec::new(Granularity::Word)
}

#[test]
fn occluding_the_concept_token_removes_the_whole_coefficient() {
    let model = axis_concepts();
    let provider = axis_model();
    let ex = sentence("hoppy dark sweet");
    let u0 = concept_coefficient(&ex, &model, 0, &provider).unwrap();
    assert!((u0 - 1.0).abs() < 1e-12);
    let attrs = attribute(&ex, &model, &provider, &word(), DEFAULT_MASK_TOKEN).unwrap();
    assert_eq!(attrs.len(), 3 * 3);
    let phi = |j: usize, k: usize| attrs.iter().find(|a| a.element_index == j && a.concept == k).unwrap().phi;
    assert!((phi(0, 0) - u0).abs() < 1e-6);
    assert!(phi(1, 0).abs() < 1e-12);
    assert!((phi(1, 1) - 1.0).abs() < 1e-6);
}

#[test]
fn oov_occlusion_is_a_no_op() {
    let attrs =
        attribute(&sentence("hoppy zzz"), &axis_concepts(), &axis_model(), &word(), DEFAULT_MASK_TOKEN).unwrap();
    let on_oov: Vec<_> = attrs.iter().filter(|a| a.element_index == 1).collect();
    assert!(!on_oov.is_empty());
    assert!(on_oov.iter().all(|a| a.phi == 0.0));
}

#[test]
fn single_element_excerpt_against_mask_only() {
    let model = axis_concepts();
    let provider = axis_model();
    let ex = sentence("dark");
    let attrs = attribute(&ex, &model, &provider, &word(), DEFAULT_MASK_TOKEN).unwrap();
    assert_eq!(attrs.len(), 1);
    let u = concept_coefficient(&ex, &model, 1, &provider).unwrap();
    let mask = provider.embed(&[DEFAULT_MASK_TOKEN.to_string()]).unwrap();
    let u_mask = single_concept_coefficient(mask.row(0), model.w.as_array().column(1)).unwrap();
    assert_eq!(attrs[0].concept, 1);
    assert!((attrs[0].phi - (u - u_mask)).abs() < 1e-12);
}

#[test]
fn closed_form_matches_restricted_nnls_and_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let w = common::uniform_matrix(6, 3, rng.random());
        let a: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        for k in 0..3 {
            let closed = single_concept_coefficient(Array1::from(a.clone()).view(), w.as_array().column(k)).unwrap();
            let restricted = nnls_solve(&a, &w, Some(&[k])).unwrap();
            assert!((closed - restricted[k]).abs() <= 1e-8);
            assert!(restricted.iter().enumerate().all(|(j, &v)| j == k || v == 0.0));
        }
    }

    let wk = Array1::from(vec![0.3, 0.9, 0.2, 0.4]);
    let a = Array1::from(vec![0.7, 0.1, 0.5, 0.9]);
    let obj = |u: f64| 0.5 * (&a - &(&wk * u)).mapv(|v| v * v).sum();
    let closed = single_concept_coefficient(a.view(), wk.view()).unwrap();
    let grid = (0..=500_000).map(|i| obj(i as f64 * 1e-5)).fold(f64::INFINITY, f64::min);
    assert!((obj(closed) - grid).abs() <= 1e-6);
}

fn trained_setup() -> (ToyModel, ConceptModel, Vec<Excerpt>) {
    let corpus = generate(&SyntheticConfig { docs: 120, seed: 1, ..SyntheticConfig::default() });
    let (toy, _) =
        ToyModel::train(&corpus.training_pairs(), &ToyConfig { epochs: 20, ..ToyConfig::default() }, "syn").unwrap();
    let spec = GranularitySpec::new(Granularity::Sentence);
    let excerpts: Vec<Excerpt> = corpus.documents.iter().flat_map(|d| extract(&d.id, &d.text, &spec)).collect();
    let texts: Vec<String> = excerpts.iter().map(|e| e.text.clone()).collect();
    let a = toy.embed(&texts).unwrap();
    let model = fit(&a, 6, 1, &NmfConfig::default()).unwrap();
    (toy, model, excerpts)
}

#[test]
fn duplicates_give_zero_phi() {
    let (toy, model, excerpts) = trained_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let ex = &excerpts[rng.random_range(0..excerpts.len())];
        let base = toy.embed(std::slice::from_ref(&ex.text)).unwrap();
        let n_elem = ex.text.split_whitespace().count();
        let dup = base.select_rows(&vec![0; n_elem]);
        let concepts: Vec<usize> = (0..model.r()).collect();
        let table = phi_table(&model, base.row(0), &dup, &concepts).unwrap();
        assert!(table.iter().flatten().all(|&phi| phi == 0.0));
    }
}

#[test]
fn cold_cache_counts_one_embedding_per_element() {
    let (toy, model, _) = trained_setup();
    let cached = CachedProvider::new(&toy, None).unwrap();
    let ex = sentence("Superb malt flavor with caramel and toffee notes.");
    attribute(&ex, &model, &cached, &word(), DEFAULT_MASK_TOKEN).unwrap();
    assert_eq!(cached.computed_texts(), 1 + 8);
    attribute(&ex, &model, &cached, &word(), DEFAULT_MASK_TOKEN).unwrap();
    assert_eq!(cached.computed_texts(), 1 + 8);
}

#[test]
fn winners_are_present_concepts_and_explain_is_deterministic() {
    let (toy, model, excerpts) = trained_setup();
    let sample = &excerpts[..40];
    let bundles = explain(sample, &model, &toy, &word(), DEFAULT_MASK_TOKEN).unwrap();
    assert_eq!(bundles.len(), sample.len());
    for (b, ex) in bundles.iter().zip(sample) {
        assert_eq!(b.excerpt, ex.id());
        for e in &b.elements {
            if let Some(k) = e.concept {
                assert!(b.present.contains(&k));
            }
            assert!((0.0..=1.0).contains(&e.intensity));
        }
        if !b.unattributed {
            assert!(b.elements.iter().any(|e| e.intensity == 1.0));
        }
    }
    assert_eq!(explain(sample, &model, &toy, &word(), DEFAULT_MASK_TOKEN).unwrap(), bundles);
}

#[test]
fn clause_level_occlusion() {
    let model = axis_concepts();
    let provider = axis_model();
    let ex = sentence("hoppy and dark, but sweet");
    let spec = GranularitySpec::new(Granularity::Clause);
    let attrs = attribute(&ex, &model, &provider, &spec, DEFAULT_MASK_TOKEN).unwrap();
    let elements: std::collections::BTreeSet<usize> = attrs.iter().map(|a| a.element_index).collect();
    assert!(elements.len() >= 2);
    assert!(attrs.iter().all(|a| a.granularity == Granularity::Clause));
}
