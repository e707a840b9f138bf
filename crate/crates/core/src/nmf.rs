//! Concept discovery: `A ≈ U Wᵀ` with `U, W ≥ 0`, minimizing `½‖A − UWᵀ‖²_F`.
//!
//! Lee–Seung multiplicative updates with `1e-12` added to denominators,
//! seeded uniform initialization scaled by `√(mean(A)/r)`, and a stop when the
//! relative objective decrease drops below `tol` or after `max_iter` sweeps.
//! After fitting, every column of `W` is rescaled to unit L2 norm with `U`
//! absorbing the scale, so coefficients are comparable across concepts.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixio::{read_matrix, write_matrix, DenseMatrix, NnlsProblem};

const EPS: f64 = 1e-12;
pub const PRESENCE_QUANTILE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Seeded uniform `(0, 1]` entries scaled by `√(mean(A)/r)`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig { max_iter: 500, tol: 1e-5, seed: 0, init: Init::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    /// Concept base, p×r, unit-norm columns.
    pub w: DenseMatrix,
    /// Concept coefficients of the fitted excerpts, n×r.
    pub u: DenseMatrix,
    pub class_id: usize,
    pub config: NmfConfig,
    /// `½‖A − UWᵀ‖²` before the first update and after each sweep.
    pub objective_trace: Vec<f64>,
    /// Per-concept 0.9 quantile of the columns of `u`.
    pub presence_threshold: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    r: usize,
    class_id: usize,
    seed: u64,
    thresholds: Vec<f64>,
    objective_trace: Vec<f64>,
    max_iter: usize,
    tol: f64,
    init: Init,
    solver: String,
    gauge: String,
    quantile: String,
}

/// Linear-interpolation quantile between order statistics (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn column_thresholds(u: &Array2<f64>) -> Vec<f64> {
    u.axis_iter(Axis(1)).map(|col| quantile(&col.to_vec(), PRESENCE_QUANTILE)).collect()
}

/// `½‖A − UWᵀ‖²_F` with compensated summation.
pub fn objective(a: &Array2<f64>, u: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let recon = u.dot(&w.t());
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.iter().zip(recon.iter()) {
        let term = (x - y) * (x - y);
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    0.5 * (sum + comp)
}

fn require_nonneg(a: &DenseMatrix) -> Result<()> {
    if let Some(((i, j), v)) = a.as_array().indexed_iter().find(|(_, &v)| v < 0.0) {
        return Err(Error::NonNegativity(format!("activation matrix entry ({i}, {j}) is {v}")));
    }
    Ok(())
}

fn multiplicative_step(target: &mut Array2<f64>, numer: &Array2<f64>, denom: &Array2<f64>) {
    ndarray::Zip::from(target).and(numer).and(denom).for_each(|t, &n, &d| *t *= n / (d + EPS));
}

/// Factorizes `a` (n×p, non-negative) into `r` concepts.
pub fn fit(a: &DenseMatrix, r: usize, class_id: usize, config: &NmfConfig) -> Result<ConceptModel> {
    let (n, p) = a.shape();
    if r == 0 || r > n.min(p) {
        return Err(Error::Config(format!(
            "concept count r = {r} must be in 1..={} for a {n}x{p} activation matrix",
            n.min(p)
        )));
    }
    require_nonneg(a)?;
    let a = a.as_array();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = (a.mean().unwrap_or(0.0) / r as f64).sqrt();
    let mut init = |rows, cols| Array2::from_shape_fn((rows, cols), |_| (1.0 - rng.random::<f64>()) * scale);
    let mut u = init(n, r);
    let mut w = init(p, r);

    let mut trace = vec![objective(a, &u, &w)];
    for _ in 0..config.max_iter {
        let numer = a.dot(&w);
        let denom = u.dot(&w.t().dot(&w));
        multiplicative_step(&mut u, &numer, &denom);

        let numer = a.t().dot(&u);
        let denom = w.dot(&u.t().dot(&u));
        multiplicative_step(&mut w, &numer, &denom);

        let current = objective(a, &u, &w);
        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(current);
        if previous <= 0.0 || (previous - current) / previous < config.tol {
            break;
        }
    }

    for k in 0..r {
        let norm = w.column(k).dot(&w.column(k)).sqrt();
        if norm > 0.0 {
            w.column_mut(k).mapv_inplace(|v| v / norm);
            u.column_mut(k).mapv_inplace(|v| v * norm);
        }
    }

    Ok(ConceptModel {
        presence_threshold: column_thresholds(&u),
        w: DenseMatrix::from_array_unchecked(w),
        u: DenseMatrix::from_array_unchecked(u),
        class_id,
        config: *config,
        objective_trace: trace,
    })
}

/// Runs `restarts` fits with seeds `config.seed, config.seed + 1, …` and keeps
/// the one with the lowest final objective.
pub fn fit_best_of(
    a: &DenseMatrix,
    r: usize,
    class_id: usize,
    config: &NmfConfig,
    restarts: usize,
) -> Result<ConceptModel> {
    let mut best: Option<ConceptModel> = None;
    for i in 0..restarts.max(1) {
        let cfg = NmfConfig { seed: config.seed.wrapping_add(i as u64), ..*config };
        let model = fit(a, r, class_id, &cfg)?;
        if best.as_ref().is_none_or(|b| model.final_objective() < b.final_objective()) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

impl ConceptModel {
    pub fn r(&self) -> usize {
        self.w.cols()
    }

    pub fn p(&self) -> usize {
        self.w.rows()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }

    /// Non-negative coefficients of new activation rows against the fixed `W`.
    pub fn transform(&self, a_new: &DenseMatrix) -> Result<DenseMatrix> {
        if a_new.cols() != self.p() {
            return Err(Error::dims(format!("{} activation columns", self.p()), a_new.cols()));
        }
        require_nonneg(a_new)?;
        let problem = NnlsProblem::new(&self.w)?;
        let rows: Vec<Array1<f64>> =
            (0..a_new.rows()).into_par_iter().map(|i| problem.solve(a_new.row(i), None)).collect::<Result<_>>()?;
        let mut out = Array2::zeros((a_new.rows(), self.r()));
        for (i, row) in rows.iter().enumerate() {
            out.row_mut(i).assign(row);
        }
        Ok(DenseMatrix::from_array_unchecked(out))
    }

    /// Flag `k` is set iff `u_row[k]` reaches the concept's presence threshold.
    pub fn presence(&self, u_row: ArrayView1<'_, f64>) -> Vec<bool> {
        u_row.iter().zip(&self.presence_threshold).map(|(&v, &t)| v >= t).collect()
    }

    /// Reconstruction `U Wᵀ` for arbitrary coefficients.
    pub fn reconstruct(&self, u: &Array2<f64>) -> Array2<f64> {
        u.dot(&self.w.as_array().t())
    }

    /// Persists `W.mat`, `U.mat` and `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_matrix(&self.w, "W", dir.join("W.mat"))?;
        write_matrix(&self.u, "U", dir.join("U.mat"))?;
        let meta = Meta {
            r: self.r(),
            class_id: self.class_id,
            seed: self.config.seed,
            thresholds: self.presence_threshold.clone(),
            objective_trace: self.objective_trace.clone(),
            max_iter: self.config.max_iter,
            tol: self.config.tol,
            init: self.config.init,
            solver: "multiplicative-updates-frobenius".into(),
            gauge: "unit-l2-concept-columns".into(),
            quantile: "type7-0.9".into(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a persisted model. Thresholds are recomputed from the stored
    /// (f32-rounded) `U` so they stay consistent with it.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_slice(
            &fs::read(&meta_path).map_err(|e| Error::Data(format!("cannot read {}: {e}", meta_path.display())))?,
        )?;
        let w = read_matrix(dir.join("W.mat"))?;
        let u = read_matrix(dir.join("U.mat"))?;
        if w.cols() != meta.r || u.cols() != meta.r {
            return Err(Error::Data(format!("concept count mismatch between meta.json (r = {}) and matrices", meta.r)));
        }
        Ok(ConceptModel {
            presence_threshold: column_thresholds(u.as_array()),
            w,
            u,
            class_id: meta.class_id,
            config: NmfConfig { max_iter: meta.max_iter, tol: meta.tol, seed: meta.seed, init: meta.init },
            objective_trace: meta.objective_trace,
        })
    }
}
