//! Implementations of the five subcommands. Each one loads its inputs,
//! fails fast on configuration problems, writes a manifest before any
//! long-running work (for the training commands and the generator), and
//! reports what it wrote on stdout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ibkd::dataio::{
    gen_synthetic, read_embeddings, records_to_matrix, write_task_dir, Dataset, SyntheticSpec,
    DATA_FILES,
};
use ibkd::encoder::{read_student, write_student, MlpSpec, StudentModel, TeacherModel};
use ibkd::evalsuite::{
    alignment, covariance_matrix, exact_retrieve, mrr_at_k, offdiag_mass, recall_at_k, spearman,
    uniformity, write_rankings_tsv, MetricReport, Score,
};
use ibkd::linalg::{dot, Matrix};
use ibkd::trainer::{run_distill_stage, run_finetune_stage, DistillConfig, TrainHistory};

use crate::fail::{runtime, usage, CliError};
use crate::manifest::RunManifest;

// --- shared helpers ----------------------------------------------------------

/// Parses a JSON config file into `T`, or returns `T::default()` when no
/// path was given. Parse failures are usage errors and cite the location.
fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    what: &str,
) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Appends `suffix` to a path's full file name (`model.ckpt` ->
/// `model.ckpt.history.csv`).
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", path.display()))
}

fn ensure_parent_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("creating {}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

fn write_json_report<T: serde::Serialize>(path: &Path, report: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| runtime(format!("serializing report: {e}")))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn to_config_value<T: serde::Serialize>(cfg: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(cfg).map_err(|e| runtime(format!("serializing config: {e}")))
}

/// A checkpoint as loaded from disk: a trained student network, or a table
/// of precomputed embeddings (the format teacher embeddings ship in).
/// The file's magic number decides which.
enum AnyModel {
    Student(StudentModel),
    Table(TeacherModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self, CliError> {
        let mut magic = [0u8; 4];
        File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
        match &magic {
            b"IBKD" => Ok(AnyModel::Student(read_student(path)?)),
            b"IBKV" => {
                let (ids, rows) = records_to_matrix(&read_embeddings(path)?)?;
                Ok(AnyModel::Table(TeacherModel::table(ids, rows)?))
            }
            other => Err(runtime(format!(
                "{} is neither a checkpoint nor an embedding table (magic {:?})",
                path.display(),
                String::from_utf8_lossy(other)
            ))),
        }
    }

    fn dim(&self) -> usize {
        match self {
            AnyModel::Student(m) => m.embed_dim(),
            AnyModel::Table(t) => t.dim(),
        }
    }

    /// Embeds a batch of records: a student transforms the raw features,
    /// a table looks the ids up.
    fn embed(&self, inputs: &Matrix, ids: &[String]) -> Result<Matrix, CliError> {
        match self {
            AnyModel::Student(m) => Ok(m.embed(inputs)?),
            AnyModel::Table(t) => Ok(t.embed(inputs, ids)?),
        }
    }

    /// Rejects dimension mismatches before any real work happens.
    fn check_input_dim(&self, cols: usize, what: &str) -> Result<(), CliError> {
        if let AnyModel::Student(m) = self {
            let want = m.mlp.spec().input_dim();
            if want != cols {
                return Err(usage(format!(
                    "checkpoint expects {want}-dimensional inputs but {what} has dimension {cols}"
                )));
            }
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

fn summarize_history(stage: &str, history: &TrainHistory) -> String {
    match history.records.last() {
        Some(r) => format!(
            "{stage}: {} epochs, final total {:.6e} (infonce {:.6e}, hsic {:.6e})",
            history.records.len(),
            r.total,
            r.infonce,
            r.hsic
        ),
        None => format!("{stage}: 0 epochs, model unchanged"),
    }
}

// --- gen-synthetic -----------------------------------------------------------

pub fn gen(spec_path: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let spec: SyntheticSpec = load_json_config(spec_path, "spec")?;
    spec.validate()?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("creating {}: {e}", out_dir.display())))?;

    let mut manifest = RunManifest::new("gen-synthetic", spec.seed, to_config_value(&spec)?);
    if let Some(p) = spec_path {
        manifest.add_input(p)?;
    }
    for name in DATA_FILES {
        manifest.add_output(&out_dir.join(name));
    }
    manifest.write(&out_dir.join("manifest.json"))?;

    let task = gen_synthetic(&spec)?;
    write_task_dir(out_dir, &task)?;

    println!(
        "generated {} documents, {} queries, {} pairs, {} supervised instances",
        task.corpus_ids.len(),
        task.query_ids.len(),
        task.pairs.len(),
        task.supervised.len()
    );
    println!(
        "wrote {} files to {}",
        DATA_FILES.len() + 1,
        out_dir.display()
    );
    Ok(())
}

// --- distill / finetune ------------------------------------------------------

/// Records the shared inputs and outputs of a training run and writes the
/// manifest next to the future checkpoint.
fn training_manifest(
    command: &str,
    cfg: &DistillConfig,
    config_path: Option<&Path>,
    extra_inputs: &[&Path],
    data_dir: &Path,
    out: &Path,
    history_path: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(command, cfg.seed, to_config_value(cfg)?);
    if let Some(p) = config_path {
        manifest.add_input(p)?;
    }
    for p in extra_inputs {
        manifest.add_input(p)?;
    }
    for name in DATA_FILES {
        manifest.add_input(&data_dir.join(name))?;
    }
    manifest.add_output(out);
    manifest.add_output(history_path);
    manifest.write(&with_suffix(out, ".manifest.json"))
}

pub fn distill(
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    hidden: &[usize],
) -> Result<(), CliError> {
    let cfg: DistillConfig = load_json_config(config_path, "config")?;
    print_warnings(&cfg.validate()?);

    let dataset = Dataset::load(data_dir)?;
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(dataset.corpus.cols());
    dims.extend_from_slice(hidden);
    dims.push(dataset.teacher.dim());
    let spec = MlpSpec::new(dims)?;
    let student = StudentModel::fresh(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed));

    ensure_parent_dir(out)?;
    let history_path = with_suffix(out, ".history.csv");
    training_manifest(
        "distill",
        &cfg,
        config_path,
        &[],
        data_dir,
        out,
        &history_path,
    )?;

    let (student, history) = run_distill_stage(
        &cfg,
        &dataset.teacher,
        student,
        &dataset.corpus,
        &dataset.corpus_ids,
    )?;
    write_student(out, &student)?;
    history.write_csv(&history_path)?;

    println!("{}", summarize_history("distill", &history));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn finetune(
    config_path: Option<&Path>,
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg: DistillConfig = load_json_config(config_path, "config")?;
    print_warnings(&cfg.validate()?);

    let student = read_student(ckpt)?;
    let dataset = Dataset::load(data_dir)?;
    if let Some(first) = dataset.supervised.first() {
        let want = student.mlp.spec().input_dim();
        if want != first.feature_dim() {
            return Err(usage(format!(
                "checkpoint expects {want}-dimensional inputs but supervised instances have dimension {}",
                first.feature_dim()
            )));
        }
    }

    ensure_parent_dir(out)?;
    let history_path = with_suffix(out, ".history.csv");
    training_manifest(
        "finetune",
        &cfg,
        config_path,
        &[ckpt],
        data_dir,
        out,
        &history_path,
    )?;

    let (student, history) = run_finetune_stage(&cfg, student, &dataset.supervised)?;
    write_student(out, &student)?;
    history.write_csv(&history_path)?;

    println!("{}", summarize_history("finetune", &history));
    println!("wrote {}", out.display());
    Ok(())
}

// --- evaluate ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTask {
    /// Rank the corpus for every query; report MRR@k and Recall@k.
    Retrieval,
    /// Score held-out pairs and report Spearman correlation against the
    /// gold similarities.
    Sts,
}

pub fn evaluate(
    ckpt: &Path,
    data_dir: &Path,
    task: EvalTask,
    k: usize,
    out: &Path,
    rankings: Option<&Path>,
) -> Result<(), CliError> {
    if rankings.is_some() && task != EvalTask::Retrieval {
        return Err(usage("--rankings only applies to --task retrieval"));
    }
    let model = AnyModel::load(ckpt)?;
    let dataset = Dataset::load(data_dir)?;
    ensure_parent_dir(out)?;

    let report = match task {
        EvalTask::Retrieval => {
            model.check_input_dim(dataset.corpus.cols(), "the corpus")?;
            let docs = model.embed(&dataset.corpus, &dataset.corpus_ids)?;
            let queries = model.embed(&dataset.queries, &dataset.query_ids)?;
            let results = exact_retrieve(
                &dataset.query_ids,
                &queries,
                &dataset.corpus_ids,
                &docs,
                k,
                Score::Dot,
            )?;
            if let Some(path) = rankings {
                write_rankings_tsv(path, &results)?;
            }
            let mut metrics = BTreeMap::new();
            metrics.insert(
                format!("mrr@{k}"),
                mrr_at_k(&results, &dataset.relevance, k)?,
            );
            metrics.insert(
                format!("recall@{k}"),
                recall_at_k(&results, &dataset.relevance, k)?,
            );
            MetricReport::new("retrieval", model.dim(), metrics)?
        }
        EvalTask::Sts => {
            let AnyModel::Student(student) = &model else {
                return Err(usage(
                    "an embedding table stores vectors by id and cannot embed raw pair \
                     features; similarity evaluation needs a network checkpoint",
                ));
            };
            if dataset.pairs.is_empty() {
                return Err(runtime("dataset has no evaluation pairs"));
            }
            let a: Vec<Vec<f64>> = dataset.pairs.iter().map(|p| p.a.clone()).collect();
            let b: Vec<Vec<f64>> = dataset.pairs.iter().map(|p| p.b.clone()).collect();
            let a = Matrix::from_rows(&a)?;
            model.check_input_dim(a.cols(), "the evaluation pairs")?;
            let ea = student.embed(&a)?;
            let eb = student.embed(&Matrix::from_rows(&b)?)?;
            let scores: Vec<f64> = (0..ea.rows())
                .map(|i| cosine(ea.row(i), eb.row(i)))
                .collect();
            let gold: Vec<f64> = dataset.pairs.iter().map(|p| p.gold).collect();
            let mut metrics = BTreeMap::new();
            metrics.insert("spearman".to_string(), spearman(&scores, &gold)?);
            metrics.insert("pairs".to_string(), gold.len() as f64);
            MetricReport::new("sts", model.dim(), metrics)?
        }
    };

    write_json_report(out, &report)?;
    let line: Vec<String> = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect();
    println!("{} dim={} {}", report.eval_set, report.dim, line.join(" "));
    println!("wrote {}", out.display());
    Ok(())
}

// --- diagnose ----------------------------------------------------------------

/// Geometry report for one checkpoint on one dataset's corpus.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DiagnoseReport {
    pub eval_set: String,
    pub dim: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Embedding dimensions with (numerically) zero variance, excluded
    /// from the off-diagonal mass.
    pub zero_variance_dims: Vec<usize>,
}

/// Collects the positive pairs used for the alignment metric: same-latent
/// evaluation pairs for a network model (it can embed their raw features),
/// query-document relevance pairs for an embedding table (it can only look
/// ids up).
fn alignment_pairs(model: &AnyModel, dataset: &Dataset) -> Result<(Matrix, Matrix), CliError> {
    match model {
        AnyModel::Student(student) => {
            let positives: Vec<&ibkd::dataio::PairRecord> =
                dataset.pairs.iter().filter(|p| p.same_latent).collect();
            if positives.is_empty() {
                return Err(runtime(
                    "dataset has no same-latent pairs to measure alignment on",
                ));
            }
            let a: Vec<Vec<f64>> = positives.iter().map(|p| p.a.clone()).collect();
            let b: Vec<Vec<f64>> = positives.iter().map(|p| p.b.clone()).collect();
            Ok((
                student.embed(&Matrix::from_rows(&a)?)?,
                student.embed(&Matrix::from_rows(&b)?)?,
            ))
        }
        AnyModel::Table(_) => {
            let mut query_ids = Vec::new();
            let mut doc_ids = Vec::new();
            for (q, docs) in &dataset.relevance {
                for d in docs {
                    query_ids.push(q.clone());
                    doc_ids.push(d.clone());
                }
            }
            if query_ids.is_empty() {
                return Err(runtime(
                    "dataset has no relevance pairs to measure alignment on",
                ));
            }
            // Inputs are ignored on table lookups; any matrix with matching
            // row count works.
            let dummy = Matrix::zeros(query_ids.len(), 1);
            Ok((
                model.embed(&dummy, &query_ids)?,
                model.embed(&dummy, &doc_ids)?,
            ))
        }
    }
}

pub fn diagnose(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    cov_out: Option<&Path>,
) -> Result<(), CliError> {
    let model = AnyModel::load(ckpt)?;
    let dataset = Dataset::load(data_dir)?;
    model.check_input_dim(dataset.corpus.cols(), "the corpus")?;
    ensure_parent_dir(out)?;

    let corpus_emb = model.embed(&dataset.corpus, &dataset.corpus_ids)?;
    let (pos_a, pos_b) = alignment_pairs(&model, &dataset)?;

    let cov = covariance_matrix(&corpus_emb)?;
    let off = offdiag_mass(&cov)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("alignment".to_string(), alignment(&pos_a, &pos_b)?);
    metrics.insert("uniformity".to_string(), uniformity(&corpus_emb)?);
    metrics.insert("offdiag_mass".to_string(), off.value);

    if !off.zero_variance_dims.is_empty() {
        eprintln!(
            "warning: {} of {} embedding dimensions have zero variance: {:?}",
            off.zero_variance_dims.len(),
            cov.rows(),
            off.zero_variance_dims
        );
    }

    let report = DiagnoseReport {
        eval_set: "diagnose".to_string(),
        dim: model.dim(),
        metrics,
        zero_variance_dims: off.zero_variance_dims,
    };
    write_json_report(out, &report)?;

    let cov_path = match cov_out {
        Some(p) => p.to_path_buf(),
        None => with_suffix(out, ".cov.csv"),
    };
    ensure_parent_dir(&cov_path)?;
    let mut csv = String::new();
    for i in 0..cov.rows() {
        let row: Vec<String> = cov.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&cov_path, csv)
        .map_err(|e| runtime(format!("writing {}: {e}", cov_path.display())))?;

    let line: Vec<String> = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect();
    println!("diagnose dim={} {}", report.dim, line.join(" "));
    println!("wrote {} and {}", out.display(), cov_path.display());
    Ok(())
}
