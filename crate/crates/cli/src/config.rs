//! Run configuration: a JSON file, overridden field by field from flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use conceptlens::excerpts::{check_tau_pair, GranularitySpec};
use conceptlens::provider::Endpoint;
use conceptlens::sobol::{MaskLaw, Sampler, DEFAULT_BATCH_ROWS, MAX_CONCEPTS};
use conceptlens::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

/// Stages that draw randomness, each from its own derived seed.
pub const STAGES: [&str; 6] = ["toy-corpus", "toy-model", "nmf", "sobol", "fidelity", "bootstrap"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfParams {
    pub max_iter: usize,
    pub tol: f64,
    /// Extra fits from consecutive seeds; the lowest objective wins.
    pub restarts: usize,
}

impl Default for NmfParams {
    fn default() -> Self {
        NmfParams { max_iter: 500, tol: 1e-5, restarts: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SobolParams {
    pub n_designs: usize,
    pub mask_law: MaskLaw,
    pub sampler: Sampler,
    pub batch_rows: usize,
}

impl Default for SobolParams {
    fn default() -> Self {
        SobolParams {
            n_designs: 1024,
            mask_law: MaskLaw::Uniform,
            sampler: Sampler::Qmc,
            batch_rows: DEFAULT_BATCH_ROWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityParams {
    pub num_random: usize,
    /// Disjoint evaluation subsets for the bootstrap; 0 disables it.
    pub bootstrap_subsets: usize,
    /// Rows per subset; 0 splits the evaluation rows evenly.
    pub bootstrap_size: usize,
}

impl Default for FidelityParams {
    fn default() -> Self {
        FidelityParams { num_random: 10, bootstrap_subsets: 0, bootstrap_size: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainParams {
    /// Documents explained when no texts are given.
    pub limit: usize,
    /// Overrides the provider's mask token.
    pub mask_token: Option<String>,
}

impl Default for ExplainParams {
    fn default() -> Self {
        ExplainParams { limit: 20, mask_token: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `builtin:<model.json>`, `cmd:<program> [args]` or `tcp:<host:port>`.
    pub provider: Option<String>,
    /// Class name or index.
    pub class: Option<String>,
    pub corpus: Option<PathBuf>,
    /// Held-out documents for fidelity, explain and align; defaults to `corpus`.
    pub eval_corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub tau1: String,
    pub tau2: String,
    pub r: usize,
    pub nmf: NmfParams,
    pub sobol: SobolParams,
    pub fidelity: FidelityParams,
    pub explain: ExplainParams,
    pub overlap_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            provider: None,
            class: None,
            corpus: None,
            eval_corpus: None,
            annotations: None,
            out_dir: PathBuf::from("conceptlens-out"),
            cache_dir: None,
            seed: 0,
            tau1: "sentence".into(),
            tau2: "word".into(),
            r: 10,
            nmf: NmfParams::default(),
            sobol: SobolParams::default(),
            fidelity: FidelityParams::default(),
            explain: ExplainParams::default(),
            overlap_frac: 0.5,
        }
    }
}

/// Flag values that replace config fields when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub provider: Option<String>,
    pub class: Option<String>,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tau1: Option<String>,
    pub tau2: Option<String>,
    pub r: Option<usize>,
    pub n_designs: Option<usize>,
    pub mask_law: Option<String>,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.eval_corpus, &mut cfg.annotations, &mut cfg.cache_dir].into_iter().flatten()
        {
            *p = base.join(&*p);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(spec) = cfg.provider.as_mut() {
            if let Some(model) = spec.strip_prefix("builtin:") {
                *spec = format!("builtin:{}", base.join(model).display());
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = &o.$field { self.$field = v.clone().into(); })* };
        }
        set!(provider, class, corpus, eval_corpus, annotations, cache_dir, tau1, tau2);
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.r {
            self.r = v;
        }
        if let Some(v) = o.n_designs {
            self.sobol.n_designs = v;
        }
        if let Some(v) = &o.mask_law {
            self.sobol.mask_law = v.parse()?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without a provider.
    pub fn validate(&self) -> CliResult<()> {
        let (tau1, tau2) = self.taus()?;
        check_tau_pair(&tau1, &tau2)?;
        if self.r == 0 || self.r > MAX_CONCEPTS {
            return Err(Error::Config(format!("r must be between 1 and {MAX_CONCEPTS}, got {}", self.r)).into());
        }
        if !self.sobol.n_designs.is_power_of_two() {
            return Err(Error::Config(format!("n_designs must be a power of two, got {}", self.sobol.n_designs)).into());
        }
        if self.sobol.batch_rows == 0 {
            return Err(Error::Config("sobol.batch_rows must be positive".into()).into());
        }
        if self.fidelity.num_random == 0 {
            return Err(Error::Config("fidelity.num_random must be positive".into()).into());
        }
        if !(0.0..=1.0).contains(&self.overlap_frac) {
            return Err(Error::Config(format!("overlap_frac {} outside [0, 1]", self.overlap_frac)).into());
        }
        for path in [&self.corpus, &self.eval_corpus, &self.annotations].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", path.display())).into());
            }
        }
        Ok(())
    }

    pub fn taus(&self) -> CliResult<(GranularitySpec, GranularitySpec)> {
        Ok((self.tau1.parse()?, self.tau2.parse()?))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    /// Every derived seed, recorded alongside artifacts.
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        STAGES.iter().map(|s| (s.to_string(), self.stage_seed(s))).collect()
    }

    pub fn eval_corpus(&self) -> Option<&Path> {
        self.eval_corpus.as_deref().or(self.corpus.as_deref())
    }
}

/// First 8 bytes (little-endian) of `SHA-256(seed_le ‖ stage)`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Parsed provider specification.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Builtin(PathBuf),
    Remote(Endpoint),
}

impl std::str::FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if let Some(path) = s.strip_prefix("builtin:") {
            return Ok(ProviderSpec::Builtin(PathBuf::from(path)));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().ok_or_else(|| Error::Config("empty provider command".into()))?;
            return Ok(ProviderSpec::Remote(Endpoint::Command { program, args: parts.collect() }));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.rsplit_once(':').is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err()) {
                return Err(Error::Config(format!("invalid provider address `{addr}` (expected host:port)")));
            }
            return Ok(ProviderSpec::Remote(Endpoint::Tcp(addr.to_string())));
        }
        if s.ends_with(".json") {
            return Ok(ProviderSpec::Builtin(PathBuf::from(s)));
        }
        Err(Error::Config(format!(
            "unrecognized provider `{s}` (expected builtin:<model.json>, cmd:<program> or tcp:<host:port>)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = RunConfig { seed: 7, ..RunConfig::default() };
        let seeds = cfg.stage_seeds();
        let mut values: Vec<u64> = seeds.values().copied().collect();
        values.dedup();
        assert_eq!(values.len(), STAGES.len());
        assert_eq!(stage_seed(7, "nmf"), cfg.stage_seed("nmf"));
        assert_ne!(stage_seed(7, "nmf"), stage_seed(8, "nmf"));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg: RunConfig = serde_json::from_str(r#"{"r": 4, "seed": 1, "sobol": {"n_designs": 256}}"#).unwrap();
        assert_eq!(cfg.sobol.sampler, Sampler::Qmc);
        cfg.apply(&Overrides { r: Some(6), mask_law: Some("bernoulli".into()), ..Overrides::default() }).unwrap();
        assert_eq!((cfg.r, cfg.seed, cfg.sobol.n_designs), (6, 1, 256));
        assert_eq!(cfg.sobol.mask_law, MaskLaw::Bernoulli);
        assert!(cfg.apply(&Overrides { mask_law: Some("gaussian".into()), ..Overrides::default() }).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        for bad in [
            RunConfig { tau1: "word".into(), tau2: "clause".into(), ..RunConfig::default() },
            RunConfig { r: 0, ..RunConfig::default() },
            RunConfig { sobol: SobolParams { n_designs: 1000, ..SobolParams::default() }, ..RunConfig::default() },
            RunConfig { corpus: Some("/nonexistent/corpus.jsonl".into()), ..RunConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(crate::CliError::Core(Error::Config(_)))), "{bad:?}");
        }
        assert!(serde_json::from_str::<RunConfig>(r#"{"rank": 3}"#).is_err());
    }

    #[test]
    fn provider_specs() {
        assert_eq!("builtin:m.json".parse::<ProviderSpec>().unwrap(), ProviderSpec::Builtin("m.json".into()));
        assert_eq!("model.json".parse::<ProviderSpec>().unwrap(), ProviderSpec::Builtin("model.json".into()));
        assert_eq!(
            "cmd:server --x 1".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Remote(Endpoint::Command { program: "server".into(), args: vec!["--x".into(), "1".into()] })
        );
        assert_eq!(
            "tcp:127.0.0.1:9000".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Remote(Endpoint::Tcp("127.0.0.1:9000".into()))
        );
        assert!("tcp:localhost".parse::<ProviderSpec>().is_err());
        assert!("http://x".parse::<ProviderSpec>().is_err());
    }
}
