//! A small trainable bag-of-words classifier used as the builtin provider.
//!
//! Forward pass: each token `t` gets features `ReLU(e_t·H + b_h)`, the
//! activations `h` are their sum over the text, and the logits are
//! `h·C + b_c`. Row 0 of the embedding table is the out-of-vocabulary token
//! and stays zero; the mask token is embedded as the zero vector, so it
//! contributes `ReLU(b_h)` like any unknown word.
//!
//! Summing rather than averaging keeps each token's contribution to the
//! logits independent of the rest of the text, so tokens that carry no class
//! evidence are driven towards zero contribution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Provider, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::excerpts::DEFAULT_MASK_TOKEN;
use crate::matrixio::DenseMatrix;

const OOV: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Embedding width.
    pub d: usize,
    /// Activation width.
    pub p: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled L2 decay applied to all weights each step.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { d: 32, p: 64, epochs: 30, lr: 0.01, weight_decay: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: BTreeMap<String, usize>,
    pub class_names: Vec<String>,
    pub mask_token: String,
    pub embed_weights: Array2<f64>,
    pub hidden_weights: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub trained_on: String,
    pub seed: u64,
}

/// Lowercased word tokens; `None` marks an occurrence of the mask token.
pub fn tokenize(text: &str, mask_token: &str) -> Vec<Option<String>> {
    let mut out = Vec::new();
    let mut segments = if mask_token.is_empty() { vec![text] } else { text.split(mask_token).collect() };
    let last = segments.pop().unwrap_or_default();
    let words = |seg: &str, out: &mut Vec<Option<String>>| {
        for w in seg.split(|c: char| !(c.is_alphanumeric() || c == '\'')) {
            let w = w.trim_matches('\'');
            if !w.is_empty() {
                out.push(Some(w.to_lowercase()));
            }
        }
    };
    for seg in segments {
        words(seg, &mut out);
        out.push(None);
    }
    words(last, &mut out);
    out
}

impl ToyModel {
    /// Assembles a model from explicit weights. `tokens[i]` gets embedding row `i + 1`;
    /// row 0 of `embed_weights` is the OOV row.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        tokens: &[&str],
        class_names: &[&str],
        embed_weights: Array2<f64>,
        hidden_weights: Array2<f64>,
        hidden_bias: Array1<f64>,
        head_weights: Array2<f64>,
        head_bias: Array1<f64>,
    ) -> Result<Self> {
        let vocab: BTreeMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.to_lowercase(), i + 1)).collect();
        let model = ToyModel {
            vocab,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            embed_weights,
            hidden_weights,
            hidden_bias,
            head_weights,
            head_bias,
            trained_on: "hand-set".into(),
            seed: 0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len() + 1;
        let (d, p, c) = (self.d(), self.p(), self.class_names.len());
        let check = |ok: bool, what: &str, found: String| if ok { Ok(()) } else { Err(Error::dims(what, found)) };
        check(self.embed_weights.nrows() == v, "embedding rows = vocab + 1", self.embed_weights.nrows().to_string())?;
        check(
            self.hidden_weights.nrows() == d,
            "hidden rows = embedding width",
            self.hidden_weights.nrows().to_string(),
        )?;
        check(self.hidden_bias.len() == p, "hidden bias = activation width", self.hidden_bias.len().to_string())?;
        check(self.head_weights.nrows() == p, "head rows = activation width", self.head_weights.nrows().to_string())?;
        check(self.head_weights.ncols() == c, "head columns = classes", self.head_weights.ncols().to_string())?;
        check(self.head_bias.len() == c, "head bias = classes", self.head_bias.len().to_string())?;
        if c < 2 {
            return Err(Error::Config("toy model needs at least 2 classes".into()));
        }
        if self.vocab.values().any(|&i| i == OOV || i >= v) {
            return Err(Error::Config("vocabulary indices must be in 1..=V".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.embed_weights.ncols()
    }

    pub fn p(&self) -> usize {
        self.hidden_weights.ncols()
    }

    pub fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            p: self.p(),
            class_names: self.class_names.clone(),
            nonneg_certified: true,
            mask_token: self.mask_token.clone(),
        }
    }

    fn token_indices(&self, text: &str) -> Vec<Option<usize>> {
        tokenize(text, &self.mask_token)
            .into_iter()
            .map(|t| t.map(|w| self.vocab.get(&w).copied().unwrap_or(OOV)))
            .collect()
    }

    /// Hidden pre-activations per token.
    fn token_pre(&self, tokens: &[Option<usize>]) -> Vec<Array1<f64>> {
        tokens
            .iter()
            .map(|t| self.embed_weights.row(t.unwrap_or(OOV)).dot(&self.hidden_weights) + &self.hidden_bias)
            .collect()
    }

    fn pool(&self, pre: &[Array1<f64>]) -> Array1<f64> {
        let mut h = Array1::zeros(self.p());
        for z in pre {
            h.zip_mut_with(z, |a, &b| *a += b.max(0.0));
        }
        h
    }

    pub fn activation(&self, text: &str) -> Array1<f64> {
        self.pool(&self.token_pre(&self.token_indices(text)))
    }

    pub fn logits(&self, h: &Array1<f64>) -> Array1<f64> {
        h.dot(&self.head_weights) + &self.head_bias
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::Data(format!("cannot read toy model {}: {e}", path.display())))?;
        let model: ToyModel = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("invalid toy model {}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }

    /// Trains on `(text, label)` pairs with per-example SGD on cross-entropy.
    /// Classes are the sorted distinct labels.
    pub fn train(corpus: &[(String, String)], config: &ToyConfig, corpus_id: &str) -> Result<(ToyModel, TrainReport)> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if config.d == 0 || config.p == 0 {
            return Err(Error::Config("toy model widths d and p must be positive".into()));
        }
        let mut classes: Vec<String> = corpus.iter().map(|(_, l)| l.clone()).collect();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config(format!("training corpus has a single class {:?}", classes)));
        }

        let mut words: Vec<String> =
            corpus.iter().flat_map(|(t, _)| tokenize(t, DEFAULT_MASK_TOKEN).into_iter().flatten()).collect();
        words.sort();
        words.dedup();
        let vocab: BTreeMap<String, usize> = words.into_iter().enumerate().map(|(i, w)| (w, i + 1)).collect();

        let (v, d, p, c) = (vocab.len() + 1, config.d, config.p, classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        };
        let mut embed_weights = uniform(v, d, 0.5);
        embed_weights.row_mut(OOV).fill(0.0);
        let hidden_weights = uniform(d, p, (6.0 / (d + p) as f64).sqrt());
        let mut head_weights = uniform(p, c, (6.0 / (p + c) as f64).sqrt());
        // Cross-entropy updates sum to zero over classes, so a zero-sum
        // start keeps logits zero-sum and each class logit meaningful alone.
        for mut row in head_weights.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            row -= mean;
        }

        let mut model = ToyModel {
            vocab,
            class_names: classes.clone(),
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            embed_weights,
            hidden_weights,
            hidden_bias: Array1::zeros(p),
            head_weights,
            head_bias: Array1::zeros(c),
            trained_on: corpus_id.to_string(),
            seed: config.seed,
        };

        let examples: Vec<(Vec<Option<usize>>, usize)> = corpus
            .iter()
            .map(|(t, l)| (model.token_indices(t), classes.iter().position(|c| c == l).expect("label in classes")))
            .collect();

        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                model.sgd_step(&examples[i].0, examples[i].1, config.lr, config.weight_decay);
            }
        }

        let mut correct = 0usize;
        let mut loss = 0.0;
        for (tokens, label) in &examples {
            let z = model.logits(&model.pool(&model.token_pre(tokens)));
            let probs = softmax(&z);
            loss -= probs[*label].max(1e-300).ln();
            if super::argmax(z.iter().copied()) == *label {
                correct += 1;
            }
        }
        let n = examples.len() as f64;
        Ok((model, TrainReport { accuracy: correct as f64 / n, mean_loss: loss / n }))
    }

    fn sgd_step(&mut self, tokens: &[Option<usize>], label: usize, lr: f64, weight_decay: f64) {
        let pre = self.token_pre(tokens);
        let h = self.pool(&pre);
        let mut dz = softmax(&self.logits(&h));
        dz[label] -= 1.0;
        let dh = self.head_weights.dot(&dz);

        let outer =
            |a: ArrayView1<'_, f64>, b: &Array1<f64>| a.insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)));
        let gate = |z: &Array1<f64>| Array1::from_shape_fn(z.len(), |j| if z[j] > 0.0 { dh[j] } else { 0.0 });
        let mut d_hidden = Array2::zeros(self.hidden_weights.raw_dim());
        let mut d_bias = Array1::zeros(self.p());
        let mut d_embed = Vec::new();
        for (t, z) in tokens.iter().zip(&pre) {
            let idx = t.unwrap_or(OOV);
            let dpre = gate(z);
            d_hidden += &outer(self.embed_weights.row(idx), &dpre);
            d_bias += &dpre;
            if idx != OOV {
                d_embed.push((idx, self.hidden_weights.dot(&dpre)));
            }
        }

        if weight_decay > 0.0 {
            let keep = 1.0 - lr * weight_decay;
            self.embed_weights *= keep;
            self.hidden_weights *= keep;
            self.head_weights *= keep;
        }
        self.head_weights.scaled_add(-lr, &outer(h.view(), &dz));
        self.head_bias.scaled_add(-lr, &dz);
        self.hidden_weights.scaled_add(-lr, &d_hidden);
        self.hidden_bias.scaled_add(-lr, &d_bias);
        for (idx, g) in d_embed {
            self.embed_weights.row_mut(idx).scaled_add(-lr, &g);
        }
    }
}

fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

impl Provider for ToyModel {
    fn describe(&self) -> Result<ProviderDescriptor> {
        Ok(self.descriptor())
    }

    fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("toy model serializes");
        let digest = Sha256::digest(&bytes);
        format!("toy-{}", &hex::encode(digest)[..16])
    }

    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        let mut out = Array2::zeros((texts.len(), self.p()));
        for (i, t) in texts.iter().enumerate() {
            out.row_mut(i).assign(&self.activation(t));
        }
        DenseMatrix::from_array(out)
    }

    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        if activations.cols() != self.p() {
            return Err(Error::dims(format!("{} activation columns", self.p()), activations.cols()));
        }
        let logits = activations.as_array().dot(&self.head_weights) + &self.head_bias;
        DenseMatrix::from_array(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn hand_model() -> ToyModel {
        // V = 3 (OOV + 2 tokens), d = 2, p = 2, C = 2
        ToyModel::from_parts(
            &["tok1", "tok2"],
            &["neg", "pos"],
            array![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            array![0.0, -1.0],
            array![[1.0, -1.0], [2.0, 0.5]],
            array![0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_marks_mask() {
        let toks = tokenize("Great [MASK] movie, isn't it?", "[MASK]");
        assert_eq!(
            toks,
            vec![Some("great".into()), None, Some("movie".into()), Some("isn't".into()), Some("it".into())]
        );
        assert_eq!(tokenize("[MASK]", "[MASK]"), vec![None]);
    }

    #[test]
    fn hand_forward_pass() {
        let m = hand_model();
        // tok1: pre (1, -1) → (1, 0); tok2: pre (0, 2) → (0, 2); sum (1, 2)
        let a = m.embed(&["tok1 tok2".to_string()]).unwrap();
        assert_eq!(a.to_vec(), vec![1.0, 2.0]);
        // tok1 alone: pre = (1, -1) → (1, 0)
        let a = m.embed(&["TOK1".to_string()]).unwrap();
        assert_eq!(a.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn mask_only_text_is_relu_of_bias() {
        let m = hand_model();
        let a = m.embed(&["[MASK]".to_string()]).unwrap();
        assert_eq!(a.to_vec(), vec![0.0, 0.0]);
        let mut biased = hand_model();
        biased.hidden_bias = array![0.25, -3.0];
        assert_eq!(biased.embed(&["[MASK]".to_string()]).unwrap().to_vec(), vec![0.25, 0.0]);
    }

    #[test]
    fn one_hot_activation_reads_head_row() {
        let m = hand_model();
        let logits = m.classify(&DenseMatrix::from_rows(&[vec![0.0, 1.0]], 2).unwrap()).unwrap();
        assert_eq!(logits.to_vec(), vec![2.0, 0.5]);
        let zero = m.classify(&DenseMatrix::zeros(3, 2)).unwrap();
        assert!(zero.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_rejects_wrong_width() {
        let m = hand_model();
        assert!(matches!(m.classify(&DenseMatrix::zeros(1, 3)), Err(Error::DimensionMismatch { .. })));
    }

    fn separable_corpus(n: usize) -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let key = if pos { "alpha" } else { "omega" };
                let filler = ["the", "a", "this", "that"][rng.random_range(0..4)];
                (format!("{filler} {key} {filler}"), if pos { "pos".into() } else { "neg".into() })
            })
            .collect()
    }

    #[test]
    fn trains_to_high_accuracy_on_separable_corpus() {
        let corpus = separable_corpus(200);
        let cfg = ToyConfig { d: 8, p: 16, epochs: 50, lr: 0.1, weight_decay: 0.0, seed: 3 };
        let (_, report) = ToyModel::train(&corpus, &cfg, "sep").unwrap();
        assert!(report.accuracy >= 0.95, "{report:?}");
    }

    #[test]
    fn trained_logits_are_zero_sum() {
        let corpus = separable_corpus(100);
        let (m, _) = ToyModel::train(
            &corpus,
            &ToyConfig { d: 8, p: 16, epochs: 10, lr: 0.1, weight_decay: 0.0, seed: 5 },
            "sep",
        )
        .unwrap();
        let texts: Vec<String> = corpus.iter().take(10).map(|c| c.0.clone()).collect();
        let logits = m.classify(&m.embed(&texts).unwrap()).unwrap();
        for row in logits.as_array().outer_iter() {
            assert!(row.sum().abs() < 1e-9, "{row}");
        }
    }

    #[test]
    fn zero_epochs_is_seeded_init() {
        let corpus = separable_corpus(200);
        let cfg = ToyConfig { d: 8, p: 16, epochs: 0, lr: 0.1, weight_decay: 0.0, seed: 3 };
        let (m, report) = ToyModel::train(&corpus, &cfg, "sep").unwrap();
        assert!(m.hidden_bias.iter().all(|&b| b == 0.0));
        assert!(report.accuracy <= 1.0);
        let (m2, _) = ToyModel::train(&corpus, &cfg, "sep").unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = separable_corpus(60);
        let cfg = ToyConfig { d: 4, p: 8, epochs: 5, lr: 0.05, weight_decay: 0.0, seed: 11 };
        let (a, _) = ToyModel::train(&corpus, &cfg, "sep").unwrap();
        let (b, _) = ToyModel::train(&corpus, &cfg, "sep").unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let corpus = vec![("a b".to_string(), "pos".to_string()); 3];
        assert!(matches!(ToyModel::train(&corpus, &ToyConfig::default(), "x"), Err(Error::Config(_))));
        assert!(matches!(ToyModel::train(&[], &ToyConfig::default(), "x"), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let corpus = separable_corpus(40);
        let (m, _) = ToyModel::train(&corpus, &ToyConfig { epochs: 2, ..Default::default() }, "sep").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn activations_are_nonnegative(text in "[a-z ,.!\\[\\]MASK]{0,60}", seed in 0u64..4) {
            let corpus = separable_corpus(20);
            let (m, _) = ToyModel::train(&corpus, &ToyConfig { d: 4, p: 8, epochs: 1, lr: 0.1, weight_decay: 0.0, seed }, "sep").unwrap();
            let a = m.embed(&[text]).unwrap();
            prop_assert!(a.is_nonnegative());
        }
    }
}
