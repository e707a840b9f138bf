//! Contract checks every provider must pass, whether builtin or remote.

use super::{forward, Provider};
use crate::error::Error;
use crate::matrixio::DenseMatrix;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const PROBES: [&str; 5] =
    ["a wonderful film with great acting", "terrible plot and bland characters", "the pour was hazy amber", "", "ok"];

fn close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> bool {
    a.shape() == b.shape()
        && a.as_array()
            .iter()
            .zip(b.as_array().iter())
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Runs the suite; `tol` bounds relative differences for batch-dependent checks.
pub fn run<P: Provider + ?Sized>(provider: &P, tol: f64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut record = |name: &'static str, outcome: Result<(), String>| {
        checks.push(Check { name, passed: outcome.is_ok(), detail: outcome.err().unwrap_or_default() });
    };

    let descriptor = match provider.describe() {
        Ok(d) => d,
        Err(e) => {
            record("describe", Err(e.to_string()));
            return checks;
        }
    };
    record("describe", descriptor.validate().map_err(|e| e.to_string()));
    record(
        "nonneg_certified",
        if descriptor.nonneg_certified { Ok(()) } else { Err("describe reports nonneg=false".into()) },
    );

    let texts: Vec<String> = PROBES.iter().map(|s| s.to_string()).collect();
    let embedded = provider.embed(&texts);
    record(
        "embed_shape",
        match &embedded {
            Ok(a) if a.shape() == (texts.len(), descriptor.p) => Ok(()),
            Ok(a) => Err(format!("expected {}x{}, got {:?}", texts.len(), descriptor.p, a.shape())),
            Err(e) => Err(e.to_string()),
        },
    );
    let Ok(a) = embedded else { return checks };

    record("embed_nonnegative", if a.is_nonnegative() { Ok(()) } else { Err(format!("min {:?}", a.min_value())) });

    record(
        "embed_deterministic",
        match provider.embed(&texts) {
            Ok(again) if again == a => Ok(()),
            Ok(_) => Err("second call differs".into()),
            Err(e) => Err(e.to_string()),
        },
    );

    let reversed: Vec<String> = texts.iter().rev().cloned().collect();
    record(
        "embed_row_order",
        match provider.embed(&reversed) {
            Ok(r) => {
                let expected = a.select_rows(&(0..texts.len()).rev().collect::<Vec<_>>());
                if close(&r, &expected, tol) {
                    Ok(())
                } else {
                    Err("rows not in input order".into())
                }
            }
            Err(e) => Err(e.to_string()),
        },
    );

    let dup = vec![texts[0].clone(), texts[0].clone()];
    record(
        "embed_duplicates_identical",
        match provider.embed(&dup) {
            Ok(d) if d.row(0) == d.row(1) => Ok(()),
            Ok(_) => Err("identical texts gave different rows".into()),
            Err(e) => Err(e.to_string()),
        },
    );

    let mask_only = vec![descriptor.mask_token.clone()];
    record(
        "mask_token_embeds",
        match provider.embed(&mask_only) {
            Ok(m) if m.is_nonnegative() && m.shape() == (1, descriptor.p) => Ok(()),
            Ok(m) => Err(format!("bad mask embedding {:?}", m.to_vec())),
            Err(e) => Err(e.to_string()),
        },
    );

    let logits = provider.classify(&a);
    record(
        "classify_shape",
        match &logits {
            Ok(l) if l.shape() == (texts.len(), descriptor.num_classes()) => Ok(()),
            Ok(l) => Err(format!("got {:?}", l.shape())),
            Err(e) => Err(e.to_string()),
        },
    );

    if let Ok(all) = &logits {
        let mut single = Vec::new();
        let mut failure = None;
        for t in &texts {
            match forward(provider, std::slice::from_ref(t)) {
                Ok(l) => single.extend(l.to_vec()),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        record(
            "batch_size_independence",
            match failure {
                Some(e) => Err(e),
                None => {
                    let single = DenseMatrix::from_vec(texts.len(), descriptor.num_classes(), single).expect("shape");
                    if close(all, &single, tol) {
                        Ok(())
                    } else {
                        Err("batched and single logits differ".into())
                    }
                }
            },
        );
    }

    record(
        "classify_rejects_wrong_width",
        match provider.classify(&DenseMatrix::zeros(1, descriptor.p + 1)) {
            Err(Error::DimensionMismatch { .. }) | Err(Error::Provider { .. }) => Ok(()),
            Err(e) => Err(format!("unexpected error kind: {e}")),
            Ok(_) => Err("accepted a matrix of the wrong width".into()),
        },
    );

    record(
        "empty_batch",
        match provider.embed(&[]) {
            Ok(e) if e.shape() == (0, descriptor.p) => Ok(()),
            Ok(e) => Err(format!("got {:?}", e.shape())),
            Err(e) => Err(e.to_string()),
        },
    );

    checks
}
