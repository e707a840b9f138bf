//! Deletion and insertion curves over a concept ordering.
//!
//! Point `t` of a deletion curve zeroes the first `t` concepts of the
//! ordering in every evaluation row; an insertion curve starts from all
//! concepts zeroed and restores them in order. The score is the mean class
//! logit, as in the importance estimator.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixio::DenseMatrix;
use crate::nmf::ConceptModel;
use crate::provider::Provider;
use crate::sobol::{ConceptOutput, ImportanceReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Deletion,
    Insertion,
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Deletion => "deletion",
            CurveKind::Insertion => "insertion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Importance,
    Reverse,
    Random(u64),
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ordering::Importance => f.write_str("importance"),
            Ordering::Reverse => f.write_str("reverse"),
            Ordering::Random(seed) => write!(f, "random({seed})"),
        }
    }
}

impl Ordering {
    /// Concept order this ordering induces on a report's ranking.
    pub fn resolve(&self, report: &ImportanceReport) -> Vec<usize> {
        match self {
            Ordering::Importance => report.ranking.clone(),
            Ordering::Reverse => report.ranking.iter().rev().copied().collect(),
            Ordering::Random(seed) => {
                let mut order: Vec<usize> = (0..report.r()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                order
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCurve {
    pub kind: CurveKind,
    pub ordering: Ordering,
    pub order: Vec<usize>,
    /// `(t, score)` for `t = 0..=r`.
    pub points: Vec<(usize, f64)>,
    pub auc: f64,
}

impl FidelityCurve {
    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

/// Trapezoidal area with the x-axis `0..=r` rescaled to `[0, 1]`.
pub fn auc(scores: &[f64]) -> f64 {
    match scores.len() {
        0 => 0.0,
        1 => scores[0],
        n => {
            let dx = 1.0 / (n - 1) as f64;
            scores.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum()
        }
    }
}

/// Mask row for point `t`: deletion keeps everything but `order[..t]`,
/// insertion keeps only `order[..t]`.
pub fn curve_mask(kind: CurveKind, order: &[usize], t: usize) -> Vec<f64> {
    let (head, tail) = match kind {
        CurveKind::Deletion => (0.0, 1.0),
        CurveKind::Insertion => (1.0, 0.0),
    };
    let mut mask = vec![tail; order.len()];
    for &k in &order[..t] {
        mask[k] = head;
    }
    mask
}

fn check_permutation(order: &[usize], r: usize) -> Result<()> {
    let mut seen = vec![false; r];
    if order.len() != r {
        return Err(Error::Config(format!("ordering has {} entries but the model has {r} concepts", order.len())));
    }
    for &k in order {
        if k >= r || std::mem::replace(&mut seen[k], true) {
            return Err(Error::Config(format!("ordering {order:?} is not a permutation of 0..{r}")));
        }
    }
    Ok(())
}

/// Curve for an explicit concept order. Each mask is classified in its own
/// batch so identical masks give bit-identical scores across curves.
pub fn curve_for_order<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    class_id: usize,
    eval_u: &DenseMatrix,
    kind: CurveKind,
    ordering: Ordering,
    order: Vec<usize>,
) -> Result<FidelityCurve> {
    let r = model.r();
    check_permutation(&order, r)?;
    let output = ConceptOutput::new(eval_u, &model.w, provider, class_id)?.with_batch_rows(1);
    let mut masks = Array2::zeros((r + 1, r));
    for t in 0..=r {
        masks.row_mut(t).assign(&ndarray::Array1::from(curve_mask(kind, &order, t)));
    }
    let scores = output.evaluate(masks.view())?;
    Ok(FidelityCurve { kind, ordering, order, auc: auc(&scores), points: scores.into_iter().enumerate().collect() })
}

fn check_report(model: &ConceptModel, report: &ImportanceReport) -> Result<()> {
    if report.r() != model.r() || report.ranking.len() != model.r() {
        return Err(Error::Config(format!(
            "importance report covers {} concepts but the model has {}",
            report.r(),
            model.r()
        )));
    }
    Ok(())
}

pub fn deletion_curve<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    report: &ImportanceReport,
    eval_u: &DenseMatrix,
    ordering: Ordering,
) -> Result<FidelityCurve> {
    check_report(model, report)?;
    curve_for_order(model, provider, report.class, eval_u, CurveKind::Deletion, ordering, ordering.resolve(report))
}

pub fn insertion_curve<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    report: &ImportanceReport,
    eval_u: &DenseMatrix,
    ordering: Ordering,
) -> Result<FidelityCurve> {
    check_report(model, report)?;
    curve_for_order(model, provider, report.class, eval_u, CurveKind::Insertion, ordering, ordering.resolve(report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub importance: f64,
    pub reverse: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub random: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingComparison {
    pub class: usize,
    pub deletion: AucSummary,
    pub insertion: AucSummary,
    pub curves: Vec<FidelityCurve>,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seeds of the random orderings used by [`compare_orderings`].
pub fn random_ordering_seeds(num_random: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_random).map(|_| rng.next_u64()).collect()
}

/// Importance, reverse and `num_random` random orderings, both curve kinds.
pub fn compare_orderings<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    report: &ImportanceReport,
    eval_u: &DenseMatrix,
    num_random: usize,
    seed: u64,
) -> Result<OrderingComparison> {
    if num_random == 0 {
        return Err(Error::Config("at least one random ordering is required".into()));
    }
    check_report(model, report)?;
    let mut orderings = vec![Ordering::Importance, Ordering::Reverse];
    orderings.extend(random_ordering_seeds(num_random, seed).into_iter().map(Ordering::Random));

    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    for kind in [CurveKind::Deletion, CurveKind::Insertion] {
        let mut aucs = Vec::new();
        for &ordering in &orderings {
            let curve =
                curve_for_order(model, provider, report.class, eval_u, kind, ordering, ordering.resolve(report))?;
            aucs.push(curve.auc);
            curves.push(curve);
        }
        let random = aucs[2..].to_vec();
        let (random_mean, random_std) = mean_std(&random);
        summaries.push(AucSummary { importance: aucs[0], reverse: aucs[1], random_mean, random_std, random });
    }
    let insertion = summaries.pop().expect("two summaries");
    let deletion = summaries.pop().expect("two summaries");
    Ok(OrderingComparison { class: report.class, deletion, insertion, curves })
}

/// `count` disjoint random subsets of `size` row indices out of `0..n`.
pub fn disjoint_subsets(n: usize, count: usize, size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if count == 0 || size == 0 || count * size > n {
        return Err(Error::Config(format!(
            "cannot draw {count} disjoint subsets of {size} from {n} evaluation excerpts"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx
        .chunks(size)
        .take(count)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub t: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCurve {
    pub kind: CurveKind,
    /// `importance`, `reverse` or `random` (mean over the random orderings).
    pub ordering: String,
    pub points: Vec<PointStats>,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// Repeats [`compare_orderings`] on disjoint subsets of the evaluation rows
/// and reports mean and standard deviation per point and per AUC.
pub fn bootstrap<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    report: &ImportanceReport,
    eval_u: &DenseMatrix,
    subsets: &[Vec<usize>],
    num_random: usize,
    seed: u64,
) -> Result<Vec<BootstrapCurve>> {
    let r = model.r();
    // [kind][ordering label] -> per-subset score vectors
    let labels = ["importance", "reverse", "random"];
    let mut samples: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![Vec::new(); 3]; 2];
    for subset in subsets {
        let rows = eval_u.select_rows(subset);
        let cmp = compare_orderings(model, provider, report, &rows, num_random, seed)?;
        for (ki, kind) in [CurveKind::Deletion, CurveKind::Insertion].into_iter().enumerate() {
            let of_kind: Vec<&FidelityCurve> = cmp.curves.iter().filter(|c| c.kind == kind).collect();
            samples[ki][0].push(of_kind[0].scores());
            samples[ki][1].push(of_kind[1].scores());
            let mut mean = vec![0.0; r + 1];
            for c in &of_kind[2..] {
                for (m, s) in mean.iter_mut().zip(c.scores()) {
                    *m += s / (of_kind.len() - 2) as f64;
                }
            }
            samples[ki][2].push(mean);
        }
    }
    let mut out = Vec::new();
    for (ki, kind) in [CurveKind::Deletion, CurveKind::Insertion].into_iter().enumerate() {
        for (li, label) in labels.iter().enumerate() {
            let runs = &samples[ki][li];
            let points = (0..=r)
                .map(|t| {
                    let (mean, std) = mean_std(&runs.iter().map(|s| s[t]).collect::<Vec<_>>());
                    PointStats { t, mean, std }
                })
                .collect();
            let (auc_mean, auc_std) = mean_std(&runs.iter().map(|s| auc(s)).collect::<Vec<_>>());
            out.push(BootstrapCurve { kind, ordering: label.to_string(), points, auc_mean, auc_std });
        }
    }
    Ok(out)
}

/// CSV with columns `curve,ordering,t,score`.
pub fn write_curves_csv<W: Write>(curves: &[FidelityCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["curve", "ordering", "t", "score"])?;
    for c in curves {
        for &(t, score) in &c.points {
            w.write_record([c.kind.to_string(), c.ordering.to_string(), t.to_string(), score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV with columns `curve,ordering,t,mean,std`.
pub fn write_bootstrap_csv<W: Write>(curves: &[BootstrapCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["curve", "ordering", "t", "mean", "std"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.kind.to_string(),
                c.ordering.clone(),
                p.t.to_string(),
                p.mean.to_string(),
                p.std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
