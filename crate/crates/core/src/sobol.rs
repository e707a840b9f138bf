//! Concept importance as total Sobol indices of the concept coefficients.
//!
//! A mask `m ∈ [0,1]ʳ` perturbs the coefficients as `U ⊙ m + (1 − m)μ`; the
//! scalar output `Y(m)` is the mean class logit over the excerpt rows of
//! `classify((U ⊙ m) Wᵀ)`. Total indices use the Jansen pick-freeze estimator
//! over a scrambled Sobol' design (or a pseudo-random one for comparison).

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::error::{Error, Result};
use crate::matrixio::DenseMatrix;
use crate::nmf::ConceptModel;
use crate::provider::{mean_class_logit, Provider};

pub const MAX_CONCEPTS: usize = 64;
pub const DEFAULT_DESIGNS: usize = 4096;
pub const DEFAULT_BATCH_ROWS: usize = 256;
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[serde(rename = "qmc_sobol_sequence", alias = "qmc")]
    Qmc,
    PseudoRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLaw {
    #[serde(rename = "continuous_uniform", alias = "uniform")]
    Uniform,
    Bernoulli,
}

impl fmt::Display for MaskLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskLaw::Uniform => "continuous_uniform",
            MaskLaw::Bernoulli => "bernoulli",
        })
    }
}

impl FromStr for MaskLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "continuous_uniform" => Ok(MaskLaw::Uniform),
            "bernoulli" => Ok(MaskLaw::Bernoulli),
            other => Err(Error::Config(format!("unknown mask law `{other}` (expected uniform or bernoulli)"))),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qmc" | "sobol" | "qmc_sobol_sequence" => Ok(Sampler::Qmc),
            "random" | "pseudo_random" => Ok(Sampler::PseudoRandom),
            other => Err(Error::Config(format!("unknown sampler `{other}` (expected qmc or random)"))),
        }
    }
}

/// Pick-freeze pair of mask matrices. `M_AB[i]` is produced on demand by
/// [`MaskDesign::m_ab`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDesign {
    pub m_a: Array2<f64>,
    pub m_b: Array2<f64>,
    pub sampler: Sampler,
    pub mask_law: MaskLaw,
    pub seed: u64,
    pub scrambled: bool,
}

impl MaskDesign {
    pub fn n(&self) -> usize {
        self.m_a.nrows()
    }

    pub fn r(&self) -> usize {
        self.m_a.ncols()
    }

    /// `M_B` with column `i` taken from `M_A`.
    pub fn m_ab(&self, i: usize) -> Array2<f64> {
        let mut out = self.m_b.clone();
        out.column_mut(i).assign(&self.m_a.column(i));
        out
    }
}

fn direction_numbers() -> &'static JoeKuoD6 {
    static PARAMS: OnceLock<JoeKuoD6> = OnceLock::new();
    PARAMS.get_or_init(JoeKuoD6::standard)
}

/// Hash-based nested uniform scramble of a 32-bit fixed-point coordinate.
/// Operating on the bit-reversed value makes the hash's carry flow from the
/// most significant digit down, so each digit is permuted as a function of
/// the digits above it.
fn owen_scramble(x: u32, seed: u32) -> u32 {
    let mut v = x.reverse_bits();
    v ^= v.wrapping_mul(0x3d20_adea);
    v = v.wrapping_add(seed);
    v = v.wrapping_mul((seed >> 16) | 1);
    v ^= v.wrapping_mul(0x0552_6c56);
    v ^= v.wrapping_mul(0x53a2_2864);
    v.reverse_bits()
}

const TWO_POW_32: f64 = 4_294_967_296.0;

/// First `n` points of the `dims`-dimensional Sobol' sequence. Unscrambled
/// sequences drop the origin; scrambled ones keep it.
pub fn sobol_points(n: usize, dims: usize, scramble_seed: Option<u64>) -> Array2<f64> {
    let seq = Sobol::<u32>::new(dims, direction_numbers());
    let seeds: Vec<u32> = match scramble_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dims).map(|_| rng.next_u32()).collect()
        }
        None => Vec::new(),
    };
    let skip = usize::from(scramble_seed.is_none());
    let mut out = Array2::zeros((n, dims));
    for (i, point) in seq.skip(skip).take(n).enumerate() {
        for (d, &x) in point.iter().enumerate() {
            let x = if seeds.is_empty() { x } else { owen_scramble(x, seeds[d]) };
            out[[i, d]] = x as f64 / TWO_POW_32;
        }
    }
    out
}

/// Builds a design of `n` rows per matrix over `r` concepts.
///
/// With the QMC sampler, `M_A` and `M_B` are the first and last `r`
/// coordinates of one `2r`-dimensional scrambled Sobol' sequence.
pub fn generate_design(n: usize, r: usize, sampler: Sampler, mask_law: MaskLaw, seed: u64) -> Result<MaskDesign> {
    generate_design_with(n, r, sampler, mask_law, seed, true)
}

/// As [`generate_design`]; `scrambled = false` exposes the raw sequence.
pub fn generate_design_with(
    n: usize,
    r: usize,
    sampler: Sampler,
    mask_law: MaskLaw,
    seed: u64,
    scrambled: bool,
) -> Result<MaskDesign> {
    if r == 0 || r > MAX_CONCEPTS {
        return Err(Error::Config(format!("mask dimension r = {r} must be in 1..={MAX_CONCEPTS}")));
    }
    if n == 0 {
        return Err(Error::Config("design size N must be positive".into()));
    }
    let joint = match sampler {
        Sampler::Qmc => {
            if !n.is_power_of_two() {
                return Err(Error::Config(format!(
                    "design size N = {n} must be a power of two for the Sobol' sampler"
                )));
            }
            sobol_points(n, 2 * r, scrambled.then_some(seed))
        }
        Sampler::PseudoRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn((n, 2 * r), |_| rng.random::<f64>())
        }
    };
    let law = |x: f64| match mask_law {
        MaskLaw::Uniform => x,
        MaskLaw::Bernoulli => f64::from(u8::from(x >= 0.5)),
    };
    let m_a = joint.slice(ndarray::s![.., ..r]).mapv(law);
    let m_b = joint.slice(ndarray::s![.., r..]).mapv(law);
    Ok(MaskDesign { m_a, m_b, sampler, mask_law, seed, scrambled })
}

/// `U ⊙ m + (1 − m)μ`, with `m` broadcast over the rows of `U`.
pub fn perturb(u: &Array2<f64>, m_row: &[f64], mu: f64) -> Result<Array2<f64>> {
    if m_row.len() != u.ncols() {
        return Err(Error::dims(format!("mask of length {}", u.ncols()), m_row.len()));
    }
    if let Some(bad) = m_row.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Precondition(format!("mask entry {bad} outside [0, 1]")));
    }
    let mut out = u.clone();
    for (mut col, &m) in out.axis_iter_mut(Axis(1)).zip(m_row) {
        col.mapv_inplace(|v| v * m + (1.0 - m) * mu);
    }
    Ok(out)
}

/// `Y(m)` for batches of masks: mean class logit of `classify((U ⊙ m) Wᵀ)`.
pub struct ConceptOutput<'a, P: ?Sized> {
    u: &'a Array2<f64>,
    w: &'a Array2<f64>,
    provider: &'a P,
    class_id: usize,
    batch_rows: usize,
}

impl<'a, P: Provider + ?Sized> ConceptOutput<'a, P> {
    pub fn new(u: &'a DenseMatrix, w: &'a DenseMatrix, provider: &'a P, class_id: usize) -> Result<Self> {
        if u.cols() != w.cols() {
            return Err(Error::dims(format!("{} concept columns", w.cols()), u.cols()));
        }
        Ok(ConceptOutput { u: u.as_array(), w: w.as_array(), provider, class_id, batch_rows: DEFAULT_BATCH_ROWS })
    }

    /// Target number of activation rows per classify call; a call always
    /// carries at least one whole mask.
    pub fn with_batch_rows(mut self, rows: usize) -> Self {
        self.batch_rows = rows.max(1);
        self
    }

    pub fn evaluate_one(&self, mask: &[f64]) -> Result<f64> {
        let m =
            Array2::from_shape_vec((1, mask.len()), mask.to_vec()).map_err(|e| Error::Precondition(e.to_string()))?;
        Ok(self.evaluate(m.view())?[0])
    }

    /// One output per mask row.
    pub fn evaluate(&self, masks: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let n = self.u.nrows();
        let per_call = (self.batch_rows / n.max(1)).max(1);
        let chunks: Vec<Vec<f64>> = masks
            .axis_chunks_iter(Axis(0), per_call)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|chunk| self.evaluate_chunk(chunk))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn evaluate_chunk(&self, masks: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let n = self.u.nrows();
        if n == 0 {
            return Ok(vec![0.0; masks.nrows()]);
        }
        let p = self.w.nrows();
        let mut stacked = Array2::zeros((n * masks.nrows(), p));
        for (j, mask) in masks.outer_iter().enumerate() {
            let perturbed = perturb(self.u, mask.as_slice().unwrap_or(&mask.to_vec()), 0.0)?;
            stacked.slice_mut(ndarray::s![j * n..(j + 1) * n, ..]).assign(&perturbed.dot(&self.w.t()));
        }
        let logits = self.provider.classify(&DenseMatrix::from_array(stacked)?)?;
        (0..masks.nrows())
            .map(|j| {
                let block = DenseMatrix::from_array_unchecked(
                    logits.as_array().slice(ndarray::s![j * n..(j + 1) * n, ..]).to_owned(),
                );
                if self.class_id >= block.cols() {
                    return Err(Error::Config(format!(
                        "class {} out of range for {} logits",
                        self.class_id,
                        block.cols()
                    )));
                }
                Ok(mean_class_logit(&block, self.class_id))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptIndex {
    pub concept: usize,
    pub s_total_raw: f64,
    pub s_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(rename = "N")]
    pub n: usize,
    pub mask_law: MaskLaw,
    pub sampler: Sampler,
    pub seed: u64,
    pub output: String,
    pub indices: Vec<ConceptIndex>,
    pub variance: f64,
    pub degenerate: bool,
    pub ranking: Vec<usize>,
}

impl ImportanceReport {
    pub fn r(&self) -> usize {
        self.indices.len()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.indices.iter().map(|c| c.s_total).collect()
    }
}

/// Result of the Jansen estimator, independent of where outputs come from.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalIndices {
    pub raw: Vec<f64>,
    pub clipped: Vec<f64>,
    pub variance: f64,
    pub degenerate: bool,
}

impl TotalIndices {
    /// Concepts by descending clipped index; ties by raw value, then index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.raw.len()).collect();
        order.sort_by(|&a, &b| {
            self.clipped[b].total_cmp(&self.clipped[a]).then(self.raw[b].total_cmp(&self.raw[a])).then(a.cmp(&b))
        });
        order
    }

    pub fn into_report(self, class: usize, design: &MaskDesign) -> ImportanceReport {
        let ranking = self.ranking();
        ImportanceReport {
            class,
            class_name: None,
            n: design.n(),
            mask_law: design.mask_law,
            sampler: design.sampler,
            seed: design.seed,
            output: "logit".into(),
            indices: (0..self.raw.len())
                .map(|concept| ConceptIndex { concept, s_total_raw: self.raw[concept], s_total: self.clipped[concept] })
                .collect(),
            variance: self.variance,
            degenerate: self.degenerate,
            ranking,
        }
    }
}

/// Jansen total indices from a batch output function `f(masks) -> Y`.
///
/// The `r + 2` blocks are evaluated in parallel and reduced by block index.
pub fn jansen<F>(design: &MaskDesign, f: F) -> Result<TotalIndices>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<Vec<f64>> + Sync,
{
    let (n, r) = (design.n(), design.r());
    let check = |y: Vec<f64>| -> Result<Vec<f64>> {
        if y.len() != n {
            return Err(Error::dims(format!("{n} outputs"), y.len()));
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite model output {bad}")));
        }
        Ok(y)
    };
    let blocks: Vec<Vec<f64>> = (0..r + 2)
        .into_par_iter()
        .map(|b| match b {
            0 => check(f(design.m_a.view())?),
            1 => check(f(design.m_b.view())?),
            i => check(f(design.m_ab(i - 2).view())?),
        })
        .collect::<Result<_>>()?;
    let (y_a, y_b) = (&blocks[0], &blocks[1]);

    let all = y_a.iter().chain(y_b);
    let mean = all.clone().sum::<f64>() / (2 * n) as f64;
    let variance = all.map(|y| (y - mean) * (y - mean)).sum::<f64>() / (2 * n) as f64;
    if variance < DEGENERATE_VARIANCE {
        return Ok(TotalIndices { raw: vec![0.0; r], clipped: vec![0.0; r], variance, degenerate: true });
    }
    let raw: Vec<f64> = blocks[2..]
        .iter()
        .map(|y_ab| {
            let sq: f64 = y_b.iter().zip(y_ab).map(|(b, ab)| (b - ab) * (b - ab)).sum();
            sq / (2 * n) as f64 / variance
        })
        .collect();
    let clipped = raw.iter().map(|&s| s.max(0.0)).collect();
    Ok(TotalIndices { raw, clipped, variance, degenerate: false })
}

/// Total indices of `model`'s concepts for `class_id`, perturbing `model.u`.
pub fn estimate_total_indices<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    class_id: usize,
    design: &MaskDesign,
) -> Result<ImportanceReport> {
    estimate_total_indices_batched(model, provider, class_id, design, DEFAULT_BATCH_ROWS)
}

pub fn estimate_total_indices_batched<P: Provider + ?Sized>(
    model: &ConceptModel,
    provider: &P,
    class_id: usize,
    design: &MaskDesign,
    batch_rows: usize,
) -> Result<ImportanceReport> {
    if design.r() != model.r() {
        return Err(Error::Config(format!(
            "design has {} columns but the model has {} concepts",
            design.r(),
            model.r()
        )));
    }
    let output = ConceptOutput::new(&model.u, &model.w, provider, class_id)?.with_batch_rows(batch_rows);
    Ok(jansen(design, |m| output.evaluate(m))?.into_report(class_id, design))
}

/// L2 star discrepancy of a point set in `[0,1]ᵈ` (Warnock's closed form).
pub fn l2_star_discrepancy(points: ArrayView2<'_, f64>) -> f64 {
    let (n, d) = points.dim();
    let nf = n as f64;
    let term1 = 3f64.powi(-(d as i32));
    let term2: f64 = points.outer_iter().map(|x| x.iter().map(|v| (1.0 - v * v) / 2.0).product::<f64>()).sum();
    let mut term3 = 0.0;
    for a in points.outer_iter() {
        for b in points.outer_iter() {
            term3 += a.iter().zip(b.iter()).map(|(x, y)| 1.0 - x.max(*y)).product::<f64>();
        }
    }
    (term1 - 2.0 / nf * term2 + term3 / (nf * nf)).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive(a: &'static [f64]) -> impl Fn(ArrayView2<'_, f64>) -> Result<Vec<f64>> + Sync {
        move |m| Ok(m.outer_iter().map(|row| row.iter().zip(a).map(|(x, c)| x * c).sum()).collect())
    }

    #[test]
    fn unscrambled_first_coordinate() {
        let d = generate_design_with(4, 1, Sampler::Qmc, MaskLaw::Uniform, 0, false).unwrap();
        assert_eq!(d.m_a.column(0).to_vec(), vec![0.5, 0.75, 0.25, 0.375]);
    }

    #[test]
    fn design_validation() {
        assert!(matches!(generate_design(100, 3, Sampler::Qmc, MaskLaw::Uniform, 0), Err(Error::Config(_))));
        assert!(generate_design(100, 3, Sampler::PseudoRandom, MaskLaw::Uniform, 0).is_ok());
        assert!(matches!(generate_design(64, 65, Sampler::Qmc, MaskLaw::Uniform, 0), Err(Error::Config(_))));
        assert!(generate_design(64, 64, Sampler::Qmc, MaskLaw::Uniform, 0).is_ok());
    }

    #[test]
    fn bernoulli_is_binary_and_designs_repeat() {
        for sampler in [Sampler::Qmc, Sampler::PseudoRandom] {
            let d = generate_design(256, 5, sampler, MaskLaw::Bernoulli, 3).unwrap();
            assert!(d.m_a.iter().chain(d.m_b.iter()).all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(d, generate_design(256, 5, sampler, MaskLaw::Bernoulli, 3).unwrap());
            let u = generate_design(256, 5, sampler, MaskLaw::Uniform, 3).unwrap();
            assert!(u.m_a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let a = generate_design(64, 2, Sampler::Qmc, MaskLaw::Uniform, 1).unwrap();
        let b = generate_design(64, 2, Sampler::Qmc, MaskLaw::Uniform, 2).unwrap();
        assert_ne!(a.m_a, b.m_a);
    }

    #[test]
    fn scrambled_sequence_stays_balanced() {
        let pts = sobol_points(64, 4, Some(11));
        for d in 0..4 {
            let mut counts = [0; 8];
            for &v in pts.column(d) {
                counts[(v * 8.0) as usize] += 1;
            }
            assert_eq!(counts, [8; 8], "dimension {d}");
        }
    }

    #[test]
    fn m_ab_differs_only_in_one_column() {
        let d = generate_design(32, 4, Sampler::Qmc, MaskLaw::Uniform, 0).unwrap();
        for i in 0..4 {
            let ab = d.m_ab(i);
            for k in 0..4 {
                let expect = if k == i { d.m_a.column(k) } else { d.m_b.column(k) };
                assert_eq!(ab.column(k), expect);
            }
        }
    }

    #[test]
    fn perturb_examples() {
        let u = ndarray::array![[2.0, 4.0]];
        assert_eq!(perturb(&u, &[1.0, 1.0], 0.0).unwrap(), u);
        assert_eq!(perturb(&u, &[0.0, 0.0], 0.0).unwrap(), ndarray::array![[0.0, 0.0]]);
        assert_eq!(perturb(&u, &[0.5, 1.0], 0.0).unwrap(), ndarray::array![[1.0, 4.0]]);
        assert_eq!(perturb(&u, &[0.0, 1.0], 3.0).unwrap(), ndarray::array![[3.0, 4.0]]);
        assert!(matches!(perturb(&u, &[1.5, 1.0], 0.0), Err(Error::Precondition(_))));
        assert!(matches!(perturb(&u, &[1.0], 0.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn constant_output_is_degenerate() {
        let d = generate_design(64, 3, Sampler::Qmc, MaskLaw::Uniform, 0).unwrap();
        let t = jansen(&d, |m| Ok(vec![2.5; m.nrows()])).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.clipped, vec![0.0; 3]);
    }

    #[test]
    fn jansen_matches_hand_computation() {
        // N = 2, r = 1, Y = m: Y_A = (a0, a1), Y_B = (b0, b1), Y_AB = Y_A.
        let design = MaskDesign {
            m_a: ndarray::array![[0.2], [0.6]],
            m_b: ndarray::array![[0.9], [0.1]],
            sampler: Sampler::PseudoRandom,
            mask_law: MaskLaw::Uniform,
            seed: 0,
            scrambled: false,
        };
        let t = jansen(&design, additive(&[1.0])).unwrap();
        let values = [0.2, 0.6, 0.9, 0.1];
        let mean = values.iter().sum::<f64>() / 4.0;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let expected = ((0.9f64 - 0.2).powi(2) + (0.1f64 - 0.6).powi(2)) / 4.0 / var;
        assert!((t.raw[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ranking_ties_and_order() {
        let t = TotalIndices {
            raw: vec![0.1, -0.01, 0.5, 0.1],
            clipped: vec![0.1, 0.0, 0.5, 0.1],
            variance: 1.0,
            degenerate: false,
        };
        assert_eq!(t.ranking(), vec![2, 0, 3, 1]);
    }

    #[test]
    fn warnock_discrepancy_single_point() {
        // One point x in 1-D: ∫ (1[x ≤ t] − t)² dt = x³/3 + (1 − x)³/3.
        let x = 0.3f64;
        let direct = x.powi(3) / 3.0 + (1.0 - x).powi(3) / 3.0;
        let pts = ndarray::array![[x]];
        assert!((l2_star_discrepancy(pts.view()) - direct.sqrt()).abs() < 1e-12);
    }
}
