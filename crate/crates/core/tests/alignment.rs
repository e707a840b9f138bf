mod common;

use std::collections::BTreeSet;

use conceptlens::alignment::{
    label_excerpts, read_annotations, score_concepts, score_predictions, write_annotations, write_table_csv,
    AspectAnnotation, AspectFlags, Confusion,
};
use conceptlens::excerpts::{extract, Granularity, GranularitySpec};
use conceptlens::synthetic::{generate, SyntheticConfig};
use conceptlens::DenseMatrix;
use ndarray::{array, Array2};
use proptest::prelude::*;

/// Counts by hand: tp, fp, fn over paired flags.
fn counts(pred: &[bool], actual: &[bool]) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for (&p, &a) in pred.iter().zip(actual) {
        if p && a {
            c.0 += 1.0;
        } else if p {
            c.1 += 1.0;
        } else if a {
            c.2 += 1.0;
        }
    }
    c
}

/// Eight excerpts, three concepts, two aspects. Concept 1 tracks `aroma`
/// with one miss and one false alarm; concept 2 tracks `taste` exactly.
fn fixture() -> (Array2<f64>, AspectFlags) {
    let u = array![
        [0.0, 0.9, 0.0],
        [0.0, 0.8, 0.0],
        [0.5, 0.0, 0.7],
        [0.5, 0.0, 0.6],
        [0.0, 0.7, 0.0],
        [0.5, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [0.5, 0.6, 0.0],
    ];
    let aroma = [true, true, false, false, false, false, true, true];
    let taste = [false, false, true, true, false, false, false, false];
    let flags = AspectFlags {
        aspects: vec!["aroma".into(), "taste".into()],
        flags: aroma.iter().zip(taste).map(|(&a, t)| vec![a, t]).collect(),
    };
    (u, flags)
}

#[test]
fn crafted_fixture_matches_hand_counts() {
    let (u, flags) = fixture();
    let mut model = common::manual_model(Array2::eye(3), u.clone());
    model.presence_threshold = vec![0.1; 3];
    let results = score_concepts(&model, &DenseMatrix::from_array(u.clone()).unwrap(), &flags).unwrap();
    assert_eq!(results.len(), 2);

    for (a, res) in results.iter().enumerate() {
        let actual = flags.column(a);
        for k in 0..3 {
            let pred: Vec<bool> = u.column(k).iter().map(|&x| x >= 0.1).collect();
            let (tp, fp, fn_) = counts(&pred, &actual);
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = tp / (tp + fn_);
            let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
            let s = &res.per_concept[k];
            assert!((s.precision - p).abs() <= 1e-9);
            assert!((s.recall - r).abs() <= 1e-9);
            assert!((s.f1 - f1).abs() <= 1e-9);
        }
    }
    assert_eq!(results[0].aspect, "aroma");
    assert_eq!(results[0].best_concept, 1);
    assert!((results[0].precision - 0.75).abs() <= 1e-9);
    assert!((results[0].recall - 0.75).abs() <= 1e-9);
    assert_eq!(results[1].best_concept, 2);
    assert_eq!(results[1].f1, 1.0);
}

#[test]
fn best_concept_ties_go_to_lower_index() {
    let flags = AspectFlags { aspects: vec!["x".into()], flags: vec![vec![true], vec![false]] };
    let preds = vec![vec![false, true, true], vec![false, false, false]];
    let res = score_predictions(&preds, &flags).unwrap();
    assert_eq!(res[0].best_concept, 1);
}

#[test]
fn scores_are_invariant_to_excerpt_order() {
    let (u, flags) = fixture();
    let preds: Vec<Vec<bool>> = u.outer_iter().map(|row| row.iter().map(|&x| x >= 0.1).collect()).collect();
    let base = score_predictions(&preds, &flags).unwrap();
    let perm = [5, 2, 7, 0, 6, 1, 4, 3];
    let p2: Vec<Vec<bool>> = perm.iter().map(|&i| preds[i].clone()).collect();
    let f2 =
        AspectFlags { aspects: flags.aspects.clone(), flags: perm.iter().map(|&i| flags.flags[i].clone()).collect() };
    assert_eq!(score_predictions(&p2, &f2).unwrap(), base);
}

#[test]
fn aspect_without_positives_reports_undefined_recall() {
    let flags = AspectFlags { aspects: vec!["price".into()], flags: vec![vec![false]; 3] };
    let res = score_predictions(&[vec![true], vec![false], vec![false]], &flags).unwrap();
    assert!(res[0].undefined_recall);
    assert_eq!(res[0].recall, 0.0);
    assert_eq!(res[0].precision, 0.0);
}

#[test]
fn synthetic_annotations_label_their_sentences() {
    let corpus = generate(&SyntheticConfig { docs: 30, seed: 2, ..SyntheticConfig::default() });
    let spec = GranularitySpec::new(Granularity::Sentence);
    let excerpts: Vec<_> = corpus.documents.iter().flat_map(|d| extract(&d.id, &d.text, &spec)).collect();
    let flags = label_excerpts(&excerpts, &corpus.annotations, None, 0.5).unwrap();
    let groups: Vec<usize> = corpus.sentence_groups.iter().flatten().copied().collect();
    assert_eq!(groups.len(), excerpts.len());
    for (row, &g) in flags.flags.iter().zip(&groups) {
        let on: Vec<&str> = row.iter().zip(&flags.aspects).filter(|(f, _)| **f).map(|(_, a)| a.as_str()).collect();
        if g >= 2 {
            assert_eq!(on, vec![conceptlens::synthetic::GROUPS[g].0]);
        } else {
            assert!(on.is_empty());
        }
    }

    let mut buf = Vec::new();
    write_annotations(&corpus.annotations, &mut buf).unwrap();
    assert_eq!(read_annotations(&buf[..]).unwrap(), corpus.annotations);

    let stray = vec![AspectAnnotation { doc_id: "nowhere".into(), aspect: "aroma".into(), start: 0, end: 3 }];
    let known: BTreeSet<String> = corpus.documents.iter().map(|d| d.id.clone()).collect();
    let err = label_excerpts(&excerpts, &stray, Some(&known), 0.5).unwrap_err().to_string();
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn table_csv_has_one_triple_per_aspect() {
    let (u, flags) = fixture();
    let preds: Vec<Vec<bool>> = u.outer_iter().map(|row| row.iter().map(|&x| x >= 0.1).collect()).collect();
    let res = score_predictions(&preds, &flags).unwrap();
    let mut buf = Vec::new();
    write_table_csv("toy", Some(0.97), &res, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("model,acc,aroma_p,aroma_r,aroma_f1,taste_p,taste_r,taste_f1"));
    assert!(text.lines().nth(1).unwrap().starts_with("toy,0.97,0.75,0.75,0.75,1,1,1"));
}

proptest! {
    #[test]
    fn f1_equals_count_identity(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let pred: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let actual: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let c = Confusion::from_labels(&pred, &actual);
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, pairs.len());
        let denom = 2 * c.tp + c.fp + c.fn_;
        let expect = if c.tp == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 };
        prop_assert!((c.f1() - expect).abs() <= 1e-12);
        prop_assert!(c.f1() <= c.precision().max(c.recall()) + 1e-12);
        prop_assert!(c.f1() >= c.precision().min(c.recall()) - 1e-12);
    }
}
