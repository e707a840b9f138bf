//! One function per subcommand.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use conceptlens::alignment::{
    label_excerpts, read_annotations, score_concepts, write_concept_csv, write_table_csv, AlignmentResult,
};
use conceptlens::corpus::{labeled_pairs, read_documents, write_documents, Document};
use conceptlens::excerpts::{extract, read_ndjson, write_ndjson, Excerpt};
use conceptlens::fidelity::{
    bootstrap, compare_orderings, disjoint_subsets, write_bootstrap_csv, write_curves_csv, CurveKind,
    OrderingComparison,
};
use conceptlens::nmf::{fit_best_of, ConceptModel, NmfConfig};
use conceptlens::occlusion::{self, AttributionBundle};
use conceptlens::provider::{embed_nonneg, predict, wire, CachedProvider, Provider, ToyConfig, ToyModel, WireProvider};
use conceptlens::report::{fidelity_chart, importance_chart, render_html, ConceptExamples, ReportInputs};
use conceptlens::sobol::{estimate_total_indices_batched, generate_design, ImportanceReport};
use conceptlens::synthetic::{generate, SyntheticConfig};
use conceptlens::{DenseMatrix, Error};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProviderSpec, RunConfig};
use crate::{Artifacts, CliResult};

const EMBED_CHUNK: usize = 512;
const EXAMPLES_PER_CONCEPT: usize = 3;

/// Written next to the concept model by `extract-concepts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractMeta {
    pub class_id: usize,
    pub class_name: String,
    pub provider: String,
    pub tau1: String,
    pub documents: usize,
    pub class_documents: usize,
    pub excerpts: usize,
    pub r: usize,
    pub objective: f64,
    pub seeds: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityOutput {
    pub eval_rows: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub comparison: OrderingComparison,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("invalid {}: {e}", path.display())).into())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_corpus(path: &Path) -> CliResult<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    Ok(read_documents(BufReader::new(file))?)
}

fn require_corpus(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.corpus
        .as_deref()
        .ok_or_else(|| Error::Config("no corpus; set `corpus` in the config or pass --corpus".into()).into())
}

type DynProvider = CachedProvider<Box<dyn Provider>>;

pub fn open_provider(cfg: &RunConfig) -> CliResult<DynProvider> {
    let spec: ProviderSpec = cfg
        .provider
        .as_deref()
        .ok_or_else(|| Error::Config("no provider; set `provider` in the config or pass --provider".into()))?
        .parse()?;
    let inner: Box<dyn Provider> = match spec {
        ProviderSpec::Builtin(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("toy model {} does not exist", path.display())).into());
            }
            Box::new(ToyModel::load(&path)?)
        }
        ProviderSpec::Remote(endpoint) => Box::new(WireProvider::connect(endpoint)?),
    };
    Ok(CachedProvider::new(inner, cfg.cache_dir.as_deref())?)
}

fn resolve_class<P: Provider + ?Sized>(cfg: &RunConfig, provider: &P) -> CliResult<(usize, String)> {
    let desc = provider.describe()?;
    let class = cfg.class.as_deref().ok_or_else(|| {
        Error::Config(format!("no class; set `class` or pass --class (one of {:?})", desc.class_names))
    })?;
    let id = desc.class_index(class)?;
    Ok((id, desc.class_names[id].clone()))
}

/// Documents the model assigns to `class_id`.
fn class_documents<P: Provider + ?Sized>(provider: &P, docs: &[Document], class_id: usize) -> CliResult<Vec<Document>> {
    let mut out = Vec::new();
    for chunk in docs.chunks(EMBED_CHUNK) {
        let texts: Vec<String> = chunk.iter().map(|d| d.text.clone()).collect();
        let preds = predict(provider, &texts)?;
        out.extend(chunk.iter().zip(preds).filter(|(_, p)| *p == class_id).map(|(d, _)| d.clone()));
    }
    Ok(out)
}

fn excerpts_of(docs: &[Document], cfg: &RunConfig) -> CliResult<Vec<Excerpt>> {
    let (tau1, _) = cfg.taus()?;
    Ok(docs.iter().flat_map(|d| extract(&d.id, &d.text, &tau1)).collect())
}

fn embed_excerpts<P: Provider + ?Sized>(provider: &P, excerpts: &[Excerpt], p: usize) -> CliResult<DenseMatrix> {
    let mut rows = Vec::with_capacity(excerpts.len());
    for chunk in excerpts.chunks(EMBED_CHUNK) {
        let texts: Vec<String> = chunk.iter().map(|e| e.text.clone()).collect();
        rows.extend(embed_nonneg(provider, &texts)?.to_rows());
    }
    Ok(DenseMatrix::from_rows(&rows, p)?)
}

fn load_concepts(art: &Artifacts) -> CliResult<(ConceptModel, ExtractMeta)> {
    Artifacts::require(&art.extract_meta(), "extract-concepts")?;
    let meta: ExtractMeta = read_json(&art.extract_meta())?;
    Ok((ConceptModel::load(art.concepts())?, meta))
}

fn load_importance(art: &Artifacts) -> CliResult<ImportanceReport> {
    Artifacts::require(&art.importance(), "rank-concepts")?;
    read_json(&art.importance())
}

pub fn make_toy_corpus(cfg: &RunConfig, docs: usize, out: &Path, annotations_out: Option<&Path>) -> CliResult<()> {
    let corpus = generate(&SyntheticConfig { docs, seed: cfg.stage_seed("toy-corpus"), ..SyntheticConfig::default() });
    let mut w = create(out)?;
    write_documents(&corpus.documents, &mut w)?;
    w.flush()?;
    if let Some(path) = annotations_out {
        let mut w = create(path)?;
        conceptlens::alignment::write_annotations(&corpus.annotations, &mut w)?;
        w.flush()?;
    }
    println!("wrote {} documents and {} aspect annotations", corpus.documents.len(), corpus.annotations.len());
    Ok(())
}

pub fn train_toy(cfg: &RunConfig, out: &Path, epochs: Option<usize>, p: Option<usize>) -> CliResult<()> {
    let path = require_corpus(cfg)?;
    let docs = read_corpus(path)?;
    let pairs = labeled_pairs(&docs)?;
    let defaults = ToyConfig::default();
    let config = ToyConfig {
        epochs: epochs.unwrap_or(defaults.epochs),
        p: p.unwrap_or(defaults.p),
        seed: cfg.stage_seed("toy-model"),
        ..defaults
    };
    let corpus_id = hex_prefix(&fs::read(path)?);
    let (model, report) = ToyModel::train(&pairs, &config, &corpus_id)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(out)?;
    println!(
        "trained on {} documents: accuracy {:.4}, mean loss {:.4}",
        pairs.len(),
        report.accuracy,
        report.mean_loss
    );
    Ok(())
}

fn hex_prefix(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn serve(cfg: &RunConfig, model: Option<&Path>, listen: Option<&str>) -> CliResult<()> {
    let path = match (model, cfg.provider.as_deref().map(str::parse::<ProviderSpec>).transpose()?) {
        (Some(m), _) => m.to_path_buf(),
        (None, Some(ProviderSpec::Builtin(m))) => m,
        _ => return Err(Error::Config("serve needs a toy model: pass --model or a builtin provider".into()).into()),
    };
    let toy = ToyModel::load(&path)?;
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            wire::serve_tcp(Arc::new(toy), listener)?;
        }
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let end = wire::serve(&toy, stdin.lock(), stdout.lock())?;
            log::info!("session ended: {end:?}");
        }
    }
    Ok(())
}

pub fn extract_concepts(cfg: &RunConfig) -> CliResult<()> {
    let docs = read_corpus(require_corpus(cfg)?)?;
    let art = Artifacts::new(&cfg.out_dir);
    let provider = open_provider(cfg)?;
    let desc = provider.describe()?;
    desc.require_nonneg()?;
    let (class_id, class_name) = resolve_class(cfg, &provider)?;
    let bound = excerpts_of(&docs, cfg)?.len().min(desc.p);
    if cfg.r > bound {
        return Err(Error::Config(format!(
            "r = {} exceeds min(excerpts, p) = {bound} for this corpus and provider",
            cfg.r
        ))
        .into());
    }

    let in_class = class_documents(&provider, &docs, class_id)?;
    let excerpts = excerpts_of(&in_class, cfg)?;
    if excerpts.is_empty() {
        return Err(Error::Data(format!(
            "no excerpts in class `{class_name}`: {} of {} documents are predicted as this class",
            in_class.len(),
            docs.len()
        ))
        .into());
    }
    let a = embed_excerpts(&provider, &excerpts, desc.p)?;
    let nmf =
        NmfConfig { max_iter: cfg.nmf.max_iter, tol: cfg.nmf.tol, seed: cfg.stage_seed("nmf"), ..NmfConfig::default() };
    let model = fit_best_of(&a, cfg.r, class_id, &nmf, cfg.nmf.restarts)?;

    model.save(art.concepts())?;
    let mut w = create(&art.concept_excerpts())?;
    write_ndjson(&excerpts, &mut w)?;
    w.flush()?;
    let meta = ExtractMeta {
        class_id,
        class_name: class_name.clone(),
        provider: provider.id(),
        tau1: cfg.tau1.clone(),
        documents: docs.len(),
        class_documents: in_class.len(),
        excerpts: excerpts.len(),
        r: cfg.r,
        objective: model.final_objective(),
        seeds: cfg.stage_seeds(),
    };
    write_json(&art.extract_meta(), &meta)?;

    println!(
        "class `{class_name}`: {} of {} documents, {} excerpts, A is {}x{}",
        in_class.len(),
        docs.len(),
        excerpts.len(),
        a.rows(),
        a.cols()
    );
    println!("objective {:.6} after {} iterations", model.final_objective(), model.objective_trace.len() - 1);
    println!("presence thresholds {:?}", model.presence_threshold);
    Ok(())
}

pub fn rank_concepts(cfg: &RunConfig) -> CliResult<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let (model, meta) = load_concepts(&art)?;
    let provider = open_provider(cfg)?;
    let design = generate_design(
        cfg.sobol.n_designs,
        model.r(),
        cfg.sobol.sampler,
        cfg.sobol.mask_law,
        cfg.stage_seed("sobol"),
    )?;
    let mut report = estimate_total_indices_batched(&model, &provider, model.class_id, &design, cfg.sobol.batch_rows)?;
    report.class_name = Some(meta.class_name);
    write_json(&art.importance(), &report)?;
    fs::write(art.importance_svg(), importance_chart(&report))?;

    if report.degenerate {
        println!("model output is constant under concept masking; all indices are 0");
    }
    for &k in &report.ranking {
        let idx = &report.indices[k];
        println!("concept {k}: S_T = {:.4} (raw {:.4})", idx.s_total, idx.s_total_raw);
    }
    Ok(())
}

pub fn explain(cfg: &RunConfig, texts: &[String], input: Option<&Path>) -> CliResult<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let (model, _) = load_concepts(&art)?;
    let provider = open_provider(cfg)?;
    let (_, tau2) = cfg.taus()?;
    let mask = match &cfg.explain.mask_token {
        Some(m) => m.clone(),
        None => provider.describe()?.mask_token,
    };

    let docs: Vec<Document> = if !texts.is_empty() {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document { id: format!("text{i}"), text: t.clone(), label: None })
            .collect()
    } else if let Some(path) = input {
        read_corpus(path)?
    } else {
        let path = cfg
            .eval_corpus()
            .ok_or_else(|| Error::Config("nothing to explain: pass --text, --input, or configure a corpus".into()))?;
        let mut docs = class_documents(&provider, &read_corpus(path)?, model.class_id)?;
        docs.truncate(cfg.explain.limit);
        docs
    };
    let excerpts = excerpts_of(&docs, cfg)?;
    let bundles = occlusion::explain(&excerpts, &model, &provider, &tau2, &mask)?;
    write_json(&art.explanations(), &bundles)?;

    let unattributed = bundles.iter().filter(|b| b.unattributed).count();
    println!("explained {} excerpts from {} documents ({unattributed} unattributed)", bundles.len(), docs.len());
    Ok(())
}

pub fn fidelity(cfg: &RunConfig) -> CliResult<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let (model, _) = load_concepts(&art)?;
    let report = load_importance(&art)?;
    let provider = open_provider(cfg)?;

    let eval_u = match &cfg.eval_corpus {
        Some(path) => {
            let docs = class_documents(&provider, &read_corpus(path)?, model.class_id)?;
            let excerpts = excerpts_of(&docs, cfg)?;
            if excerpts.is_empty() {
                return Err(Error::Data(format!("no class excerpts in evaluation corpus {}", path.display())).into());
            }
            model.transform(&embed_excerpts(&provider, &excerpts, model.p())?)?
        }
        None => model.u.clone(),
    };

    let seed = cfg.stage_seed("fidelity");
    let cmp = compare_orderings(&model, &provider, &report, &eval_u, cfg.fidelity.num_random, seed)?;
    let mut w = create(&art.fidelity_csv())?;
    write_curves_csv(&cmp.curves, &mut w)?;
    w.flush()?;
    fs::write(art.fidelity_svg("deletion"), fidelity_chart(&cmp.curves, CurveKind::Deletion))?;
    fs::write(art.fidelity_svg("insertion"), fidelity_chart(&cmp.curves, CurveKind::Insertion))?;

    for (kind, s) in [("deletion", &cmp.deletion), ("insertion", &cmp.insertion)] {
        println!(
            "{kind} AUC: importance {:.4}, random {:.4} ± {:.4}, reverse {:.4}",
            s.importance, s.random_mean, s.random_std, s.reverse
        );
    }

    if cfg.fidelity.bootstrap_subsets > 0 {
        let n = eval_u.rows();
        let count = cfg.fidelity.bootstrap_subsets;
        let size = if cfg.fidelity.bootstrap_size == 0 { n / count } else { cfg.fidelity.bootstrap_size };
        let subsets = disjoint_subsets(n, count, size, cfg.stage_seed("bootstrap"))?;
        let curves = bootstrap(&model, &provider, &report, &eval_u, &subsets, cfg.fidelity.num_random, seed)?;
        let mut w = create(&art.bootstrap_csv())?;
        write_bootstrap_csv(&curves, &mut w)?;
        w.flush()?;
        write_json(&art.bootstrap_json(), &curves)?;
        println!("bootstrap over {count} disjoint subsets of {size} rows");
    }
    write_json(&art.fidelity(), &FidelityOutput { eval_rows: eval_u.rows(), seed, comparison: cmp })?;
    Ok(())
}

pub fn align(cfg: &RunConfig) -> CliResult<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let (model, meta) = load_concepts(&art)?;
    let ann_path = cfg
        .annotations
        .as_deref()
        .ok_or_else(|| Error::Config("align needs annotations; set `annotations` or pass --annotations".into()))?;
    let annotations = read_annotations(BufReader::new(File::open(ann_path)?))?;
    let corpus_path = cfg
        .eval_corpus()
        .ok_or_else(|| Error::Config("align needs the annotated corpus; pass --corpus or --eval-corpus".into()))?;
    let docs = read_corpus(corpus_path)?;
    let provider = open_provider(cfg)?;

    let excerpts = excerpts_of(&docs, cfg)?;
    let u = model.transform(&embed_excerpts(&provider, &excerpts, model.p())?)?;
    let known: BTreeSet<String> = docs.iter().map(|d| d.id.clone()).collect();
    let flags = label_excerpts(&excerpts, &annotations, Some(&known), cfg.overlap_frac)?;
    let results = score_concepts(&model, &u, &flags)?;
    let accuracy = corpus_accuracy(&provider, &docs)?;

    let mut w = create(&art.alignment_csv())?;
    write_table_csv(&meta.provider, accuracy, &results, &mut w)?;
    w.flush()?;
    let mut w = create(&art.alignment_concepts_csv())?;
    write_concept_csv(&results, &mut w)?;
    w.flush()?;
    write_json(&art.alignment(), &results)?;

    for r in &results {
        println!(
            "{}: concept {} P {:.3} R {:.3} F1 {:.3} ({} positive excerpts)",
            r.aspect, r.best_concept, r.precision, r.recall, r.f1, r.positives
        );
    }
    Ok(())
}

/// Accuracy against the corpus labels; `None` unless every document is labeled.
fn corpus_accuracy<P: Provider + ?Sized>(provider: &P, docs: &[Document]) -> CliResult<Option<f64>> {
    if docs.is_empty() || docs.iter().any(|d| d.label.is_none()) {
        return Ok(None);
    }
    let classes = provider.describe()?.class_names;
    let mut correct = 0;
    for chunk in docs.chunks(EMBED_CHUNK) {
        let texts: Vec<String> = chunk.iter().map(|d| d.text.clone()).collect();
        for (d, p) in chunk.iter().zip(predict(provider, &texts)?) {
            correct += usize::from(d.label.as_deref() == Some(classes[p].as_str()));
        }
    }
    Ok(Some(correct as f64 / docs.len() as f64))
}

/// Highest-coefficient excerpts per concept; ties go to the earlier excerpt.
fn concept_examples(model: &ConceptModel, excerpts: &[Excerpt]) -> Vec<ConceptExamples> {
    (0..model.r())
        .map(|k| {
            let col = model.u.as_array().column(k);
            let mut idx: Vec<usize> = (0..col.len().min(excerpts.len())).filter(|&i| col[i] > 0.0).collect();
            idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            ConceptExamples {
                concept: k,
                excerpts: idx.into_iter().take(EXAMPLES_PER_CONCEPT).map(|i| excerpts[i].text.clone()).collect(),
            }
        })
        .collect()
}

pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let mut inputs = ReportInputs { title: "Concept report".into(), ..ReportInputs::default() };
    if art.extract_meta().exists() {
        let (model, meta) = load_concepts(&art)?;
        inputs.class_name = Some(meta.class_name);
        if art.concept_excerpts().exists() {
            let excerpts = read_ndjson(BufReader::new(File::open(art.concept_excerpts())?))?;
            inputs.examples = concept_examples(&model, &excerpts);
        }
    }
    if art.importance().exists() {
        inputs.importance = Some(read_json(&art.importance())?);
    }
    if art.fidelity().exists() {
        let out: FidelityOutput = read_json(&art.fidelity())?;
        inputs.fidelity = Some(out.comparison);
    }
    if art.alignment().exists() {
        inputs.alignment = read_json::<Vec<AlignmentResult>>(&art.alignment())?;
    }
    if art.explanations().exists() {
        inputs.bundles = read_json::<Vec<AttributionBundle>>(&art.explanations())?;
    }
    fs::create_dir_all(&art.root)?;
    fs::write(art.report(), render_html(&inputs))?;
    println!("wrote {}", art.report().display());
    Ok(())
}
