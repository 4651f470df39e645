//! Data plumbing: embedding file formats (binary and JSONL), the labeled
//! supervised instance type, and the seeded synthetic task generator that
//! stands in for large text corpora — a linear latent-factor world with a
//! frozen teacher, noisy positive pairs, retrieval queries with relevance
//! labels, and mined hard negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::TeacherModel;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// One id-tagged embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

fn check_records(records: &[EmbeddingRecord]) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut seen = BTreeSet::new();
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::Data(format!(
                "record {:?} has dim {}, expected {dim}",
                r.id,
                r.vector.len()
            )));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "record {:?} has non-finite values",
                r.id
            )));
        }
        if !seen.insert(&r.id) {
            return Err(Error::Data(format!("duplicate record id {:?}", r.id)));
        }
    }
    Ok(dim)
}

/// Stacks records into an id list and a row matrix, enforcing uniform
/// dimensionality and id uniqueness.
pub fn records_to_matrix(records: &[EmbeddingRecord]) -> Result<(Vec<String>, Matrix)> {
    let dim = check_records(records)?;
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let mut m = Matrix::zeros(records.len(), dim);
    for (i, r) in records.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&r.vector);
    }
    Ok((ids, m))
}

/// Inverse of [`records_to_matrix`].
pub fn matrix_to_records(ids: &[String], m: &Matrix) -> Result<Vec<EmbeddingRecord>> {
    if ids.len() != m.rows() {
        return Err(Error::Pairing {
            left: ids.len(),
            right: m.rows(),
        });
    }
    Ok(ids
        .iter()
        .zip(0..m.rows())
        .map(|(id, i)| EmbeddingRecord {
            id: id.clone(),
            vector: m.row(i).to_vec(),
        })
        .collect())
}

// --- binary embedding format ------------------------------------------------
//
// Little-endian layout:
//   magic "IBKV" | version u32 | record count u64 | dim u32 |
//   per record: id length u16 | UTF-8 id bytes | dim f64 values
// The round-trip is bit-exact.

const EMB_MAGIC: &[u8; 4] = b"IBKV";
const EMB_VERSION: u32 = 1;

/// Writes records in the binary embedding format.
pub fn write_embeddings(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<()> {
    let path = path.as_ref();
    let dim = check_records(records)?;
    let ioerr = |e| Error::io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(ioerr)?);
    let mut put = |bytes: &[u8]| {
        w.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    put(EMB_MAGIC)?;
    put(&EMB_VERSION.to_le_bytes())?;
    put(&(records.len() as u64).to_le_bytes())?;
    put(&(dim as u32).to_le_bytes())?;
    for r in records {
        let id_bytes = r.id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::Data(format!(
                "record id longer than {} bytes",
                u16::MAX
            )));
        }
        put(&(id_bytes.len() as u16).to_le_bytes())?;
        put(id_bytes)?;
        for &v in &r.vector {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct ByteReader<R: Read> {
    inner: R,
    path: String,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                path: self.path.clone(),
                detail: format!("truncated at byte {}", self.offset),
            }),
            Err(e) => Err(Error::io(self.path.clone(), e)),
        }
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: format!("{} at byte {}", detail.into(), self.offset),
        }
    }
}

/// Reads records written by [`write_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = ByteReader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(r.bad(format!("bad magic {magic:?}, expected {EMB_MAGIC:?}")));
    }
    let mut u32b = [0u8; 4];
    r.take(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != EMB_VERSION {
        return Err(r.bad(format!(
            "unsupported version {version}, expected {EMB_VERSION}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.take(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    r.take(&mut u32b)?;
    let dim = u32::from_le_bytes(u32b) as usize;

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.take(&mut u16b)?;
        let id_len = u16::from_le_bytes(u16b) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.take(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes).map_err(|_| r.bad("record id is not UTF-8"))?;
        let mut vector = Vec::with_capacity(dim);
        let mut f64b = [0u8; 8];
        for _ in 0..dim {
            r.take(&mut f64b)?;
            vector.push(f64::from_le_bytes(f64b));
        }
        if !seen.insert(id.clone()) {
            return Err(r.bad(format!("duplicate record id {id:?}")));
        }
        records.push(EmbeddingRecord { id, vector });
    }
    let mut trailing = [0u8; 1];
    if r.inner
        .read(&mut trailing)
        .map_err(|e| Error::io(r.path.clone(), e))?
        != 0
    {
        return Err(r.bad("trailing bytes after final record"));
    }
    Ok(records)
}

/// Writes records as JSON Lines, one `{"id": ..., "vector": [...]}` object
/// per line — the inspectable sibling of the binary format.
pub fn write_embeddings_jsonl(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<()> {
    let path = path.as_ref();
    check_records(records)?;
    let mut w =
        BufWriter::new(File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("cannot serialize record {:?}: {e}", r.id)))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn jsonl_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file).lines())
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in jsonl_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Reads records written by [`write_embeddings_jsonl`]; errors cite the
/// offending line.
pub fn read_embeddings_jsonl(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let records: Vec<EmbeddingRecord> = parse_jsonl(path)?;
    check_records(&records).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(records)
}

/// One labeled training instance: raw input features for an anchor, its
/// positive, and K hard negatives (rows of `negatives`).
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedInstance {
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Matrix,
}

impl SupervisedInstance {
    pub fn new(anchor: Vec<f64>, positive: Vec<f64>, negatives: Matrix) -> Result<Self> {
        let d = anchor.len();
        if d == 0 {
            return Err(Error::Data("supervised instance has empty features".into()));
        }
        if positive.len() != d {
            return Err(Error::Pairing {
                left: d,
                right: positive.len(),
            });
        }
        if negatives.rows() > 0 && negatives.cols() != d {
            return Err(Error::shape(
                "supervised negatives",
                negatives.shape(),
                (negatives.rows(), d),
            ));
        }
        if anchor.iter().chain(&positive).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "supervised instance features".into(),
            });
        }
        Ok(SupervisedInstance {
            anchor,
            positive,
            negatives,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.rows()
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn positive(&self) -> &[f64] {
        &self.positive
    }

    pub fn negative(&self, i: usize) -> &[f64] {
        self.negatives.row(i)
    }
}

/// One evaluation pair: two held-out inputs with the teacher's cosine
/// similarity as the gold score. Pairs flagged `same_latent` share their
/// generating latent (they are the generator's positive pairs); the rest
/// give the score distribution its spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gold: f64,
    pub same_latent: bool,
}

/// Provenance of one supervised instance: which query it anchors and which
/// corpus documents supplied the positive and the mined negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedMeta {
    pub query: String,
    pub positive_doc: String,
    pub negative_docs: Vec<String>,
}

/// Shape of the synthetic world: documents live on latent factors of
/// dimension `latent_dim`, observed through a fixed linear map into
/// `input_dim` with Gaussian noise `noise_sigma`; the teacher sees the
/// latents through its own fixed map into `teacher_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub teacher_dim: usize,
    pub corpus_size: usize,
    pub query_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            latent_dim: 8,
            input_dim: 64,
            teacher_dim: 32,
            corpus_size: 2000,
            query_count: 200,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

/// Evaluation pairs generated per query.
pub const PAIRS_PER_QUERY: usize = 5;
/// Fraction of evaluation pairs that share a latent (the positive pairs).
pub const SAME_LATENT_RATE: f64 = 0.2;
/// Hard negatives mined per query, the Table-scale default.
pub const MINED_NEGATIVES: usize = 8;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
            ("teacher_dim", self.teacher_dim),
            ("corpus_size", self.corpus_size),
            ("query_count", self.query_count),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.latent_dim > self.input_dim.min(self.teacher_dim) {
            return Err(Error::Config(format!(
                "latent_dim {} exceeds min(input_dim, teacher_dim) = {}",
                self.latent_dim,
                self.input_dim.min(self.teacher_dim)
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.query_count > self.corpus_size {
            return Err(Error::Config(format!(
                "query_count {} exceeds corpus_size {} (queries sample distinct documents)",
                self.query_count, self.corpus_size
            )));
        }
        if self.corpus_size < MINED_NEGATIVES + 1 {
            return Err(Error::Config(format!(
                "corpus_size must exceed the {MINED_NEGATIVES} mined negatives"
            )));
        }
        Ok(())
    }
}

/// Everything `gen_synthetic` produces, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub corpus_ids: Vec<String>,
    pub corpus: Matrix,
    pub query_ids: Vec<String>,
    pub queries: Matrix,
    pub teacher: TeacherModel,
    pub pairs: Vec<PairRecord>,
    pub supervised: Vec<SupervisedInstance>,
    pub supervised_meta: Vec<SupervisedMeta>,
    pub relevance: BTreeMap<String, BTreeSet<String>>,
}

fn sample_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn unit_normalize(row: &mut [f64]) -> Result<()> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Data(
            "teacher embedding collapsed to zero norm".into(),
        ));
    }
    for v in row.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

/// Builds the whole synthetic task deterministically from the
/// [`SyntheticSpec`] seed:
/// per-document latents, noisy inputs, unit-normalized teacher embeddings,
/// held-out queries with single-document relevance, scored evaluation
/// pairs, and supervised instances with teacher-mined hard negatives.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let (k, d_in, d_t) = (spec.latent_dim, spec.input_dim, spec.teacher_dim);
    let n = spec.corpus_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // fixed observation and teacher maps; the 1/sqrt(d_in) scaling keeps
    // input norms O(1) so downstream tanh units stay out of saturation
    let b_map = sample_normal_matrix(d_in, k, &mut rng).scale(1.0 / (d_in as f64).sqrt());
    let a_map = sample_normal_matrix(d_t, k, &mut rng);

    let noisy_input = |z: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d_in)
            .map(|r| {
                let clean = dot(b_map.row(r), z);
                clean + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    };
    let teacher_embed = |z: &[f64]| -> Result<Vec<f64>> {
        let mut t: Vec<f64> = (0..d_t).map(|r| dot(a_map.row(r), z)).collect();
        unit_normalize(&mut t)?;
        Ok(t)
    };

    // corpus: one latent per document
    let mut latents = Matrix::zeros(n, k);
    let mut corpus = Matrix::zeros(n, d_in);
    let mut teacher_docs = Matrix::zeros(n, d_t);
    let corpus_ids: Vec<String> = (0..n).map(|i| format!("doc{i:05}")).collect();
    for i in 0..n {
        for j in 0..k {
            latents.set(i, j, rng.sample(StandardNormal));
        }
        let x = noisy_input(latents.row(i), &mut rng);
        corpus.row_mut(i).copy_from_slice(&x);
        teacher_docs
            .row_mut(i)
            .copy_from_slice(&teacher_embed(latents.row(i))?);
    }

    // queries: fresh noisy observations of distinct document latents
    let mut doc_order: Vec<usize> = (0..n).collect();
    doc_order.shuffle(&mut rng);
    let query_docs = &doc_order[..spec.query_count];
    let query_ids: Vec<String> = (0..spec.query_count)
        .map(|i| format!("qry{i:05}"))
        .collect();
    let mut queries = Matrix::zeros(spec.query_count, d_in);
    let mut teacher_queries = Matrix::zeros(spec.query_count, d_t);
    let mut relevance = BTreeMap::new();
    for (qi, &di) in query_docs.iter().enumerate() {
        let x = noisy_input(latents.row(di), &mut rng);
        queries.row_mut(qi).copy_from_slice(&x);
        teacher_queries
            .row_mut(qi)
            .copy_from_slice(&teacher_embed(latents.row(di))?);
        relevance.insert(
            query_ids[qi].clone(),
            BTreeSet::from([corpus_ids[di].clone()]),
        );
    }

    // evaluation pairs: a same-latent fraction (the positive pairs) plus
    // cross-latent pairs, gold-scored by teacher cosine
    let pair_count = PAIRS_PER_QUERY * spec.query_count;
    let mut pairs = Vec::with_capacity(pair_count);
    for p in 0..pair_count {
        let same = rng.gen_bool(SAME_LATENT_RATE);
        let i = rng.gen_range(0..n);
        let j = if same {
            i
        } else {
            loop {
                let j = rng.gen_range(0..n);
                if j != i {
                    break j;
                }
            }
        };
        let a = noisy_input(latents.row(i), &mut rng);
        let b = noisy_input(latents.row(j), &mut rng);
        let gold = dot(teacher_docs.row(i), teacher_docs.row(j));
        pairs.push(PairRecord {
            id: format!("pr{p:05}"),
            a,
            b,
            gold,
            same_latent: same,
        });
    }

    // supervised instances: anchor = query input, positive = the relevant
    // document's input, negatives = most teacher-similar other documents
    let mut supervised = Vec::with_capacity(spec.query_count);
    let mut supervised_meta = Vec::with_capacity(spec.query_count);
    for (qi, &di) in query_docs.iter().enumerate() {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != di)
            .map(|j| (j, dot(teacher_docs.row(di), teacher_docs.row(j))))
            .collect();
        sims.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let negative_idx: Vec<usize> = sims[..MINED_NEGATIVES].iter().map(|&(j, _)| j).collect();
        let negatives = corpus.select_rows(&negative_idx);
        supervised.push(SupervisedInstance::new(
            queries.row(qi).to_vec(),
            corpus.row(di).to_vec(),
            negatives,
        )?);
        supervised_meta.push(SupervisedMeta {
            query: query_ids[qi].clone(),
            positive_doc: corpus_ids[di].clone(),
            negative_docs: negative_idx
                .iter()
                .map(|&j| corpus_ids[j].clone())
                .collect(),
        });
    }

    // teacher table covers documents and queries so the frozen teacher can
    // be evaluated on the same retrieval task
    let mut teacher_ids = corpus_ids.clone();
    teacher_ids.extend(query_ids.iter().cloned());
    let mut teacher_rows = Matrix::zeros(n + spec.query_count, d_t);
    for i in 0..n {
        teacher_rows.row_mut(i).copy_from_slice(teacher_docs.row(i));
    }
    for qi in 0..spec.query_count {
        teacher_rows
            .row_mut(n + qi)
            .copy_from_slice(teacher_queries.row(qi));
    }
    let teacher = TeacherModel::table(teacher_ids, teacher_rows)?;

    Ok(SyntheticTask {
        corpus_ids,
        corpus,
        query_ids,
        queries,
        teacher,
        pairs,
        supervised,
        supervised_meta,
        relevance,
    })
}

// --- dataset directory layout ------------------------------------------------

pub const CORPUS_FILE: &str = "corpus.bin";
pub const QUERIES_FILE: &str = "queries.bin";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SUPERVISED_FILE: &str = "supervised.jsonl";
pub const RELEVANCE_FILE: &str = "relevance.json";

/// The data files a generated task directory contains, in writing order.
pub const DATA_FILES: [&str; 6] = [
    CORPUS_FILE,
    QUERIES_FILE,
    TEACHER_FILE,
    PAIRS_FILE,
    SUPERVISED_FILE,
    RELEVANCE_FILE,
];

#[derive(Serialize, Deserialize)]
struct SupervisedLine {
    query: String,
    positive_doc: String,
    negative_docs: Vec<String>,
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
}

/// Writes the six task files into `dir` (which must exist).
pub fn write_task_dir(dir: impl AsRef<Path>, task: &SyntheticTask) -> Result<()> {
    let dir = dir.as_ref();
    write_embeddings(
        dir.join(CORPUS_FILE),
        &matrix_to_records(&task.corpus_ids, &task.corpus)?,
    )?;
    write_embeddings(
        dir.join(QUERIES_FILE),
        &matrix_to_records(&task.query_ids, &task.queries)?,
    )?;
    let (teacher_ids, teacher_rows) = match &task.teacher {
        TeacherModel::Table { ids, rows, .. } => (ids, rows),
        TeacherModel::Network(_) => {
            return Err(Error::Data(
                "synthetic teacher must be a lookup table".into(),
            ))
        }
    };
    write_embeddings(
        dir.join(TEACHER_FILE),
        &matrix_to_records(teacher_ids, teacher_rows)?,
    )?;

    let pairs_path = dir.join(PAIRS_FILE);
    let mut w = BufWriter::new(
        File::create(&pairs_path).map_err(|e| Error::io(pairs_path.display().to_string(), e))?,
    );
    for p in &task.pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(pairs_path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(pairs_path.display().to_string(), e))?;

    let sup_path = dir.join(SUPERVISED_FILE);
    let mut w = BufWriter::new(
        File::create(&sup_path).map_err(|e| Error::io(sup_path.display().to_string(), e))?,
    );
    for (inst, meta) in task.supervised.iter().zip(&task.supervised_meta) {
        let line = SupervisedLine {
            query: meta.query.clone(),
            positive_doc: meta.positive_doc.clone(),
            negative_docs: meta.negative_docs.clone(),
            anchor: inst.anchor.clone(),
            positive: inst.positive.clone(),
            negatives: (0..inst.negative_count())
                .map(|i| inst.negative(i).to_vec())
                .collect(),
        };
        let line = serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(sup_path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(sup_path.display().to_string(), e))?;

    let rel_path = dir.join(RELEVANCE_FILE);
    let json =
        serde_json::to_string_pretty(&task.relevance).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&rel_path, json).map_err(|e| Error::io(rel_path.display().to_string(), e))
}

/// A task directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus_ids: Vec<String>,
    pub corpus: Matrix,
    pub query_ids: Vec<String>,
    pub queries: Matrix,
    pub teacher: TeacherModel,
    pub pairs: Vec<PairRecord>,
    pub supervised: Vec<SupervisedInstance>,
    pub supervised_meta: Vec<SupervisedMeta>,
    pub relevance: BTreeMap<String, BTreeSet<String>>,
}

impl Dataset {
    /// Loads every task file from `dir`, validating cross-file consistency.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (corpus_ids, corpus) = records_to_matrix(&read_embeddings(dir.join(CORPUS_FILE))?)?;
        let (query_ids, queries) = records_to_matrix(&read_embeddings(dir.join(QUERIES_FILE))?)?;
        let (teacher_ids, teacher_rows) =
            records_to_matrix(&read_embeddings(dir.join(TEACHER_FILE))?)?;
        let teacher = TeacherModel::table(teacher_ids, teacher_rows)?;

        let pairs: Vec<PairRecord> = parse_jsonl(&dir.join(PAIRS_FILE))?;
        let sup_path = dir.join(SUPERVISED_FILE);
        let lines: Vec<SupervisedLine> = parse_jsonl(&sup_path)?;
        let mut supervised = Vec::with_capacity(lines.len());
        let mut supervised_meta = Vec::with_capacity(lines.len());
        for (i, line) in lines.into_iter().enumerate() {
            let negatives = if line.negatives.is_empty() {
                Matrix::zeros(0, line.anchor.len())
            } else {
                Matrix::from_rows(&line.negatives).map_err(|e| Error::Format {
                    path: sup_path.display().to_string(),
                    detail: format!("line {}: {e}", i + 1),
                })?
            };
            supervised.push(
                SupervisedInstance::new(line.anchor, line.positive, negatives).map_err(|e| {
                    Error::Format {
                        path: sup_path.display().to_string(),
                        detail: format!("line {}: {e}", i + 1),
                    }
                })?,
            );
            supervised_meta.push(SupervisedMeta {
                query: line.query,
                positive_doc: line.positive_doc,
                negative_docs: line.negative_docs,
            });
        }

        let rel_path = dir.join(RELEVANCE_FILE);
        let rel_text = std::fs::read_to_string(&rel_path)
            .map_err(|e| Error::io(rel_path.display().to_string(), e))?;
        let relevance: BTreeMap<String, BTreeSet<String>> = serde_json::from_str(&rel_text)
            .map_err(|e| Error::Format {
                path: rel_path.display().to_string(),
                detail: e.to_string(),
            })?;

        for qid in relevance.keys() {
            if !query_ids.contains(qid) {
                return Err(Error::Data(format!(
                    "relevance references unknown query {qid:?}"
                )));
            }
        }
        Ok(Dataset {
            corpus_ids,
            corpus,
            query_ids,
            queries,
            teacher,
            pairs,
            supervised,
            supervised_meta,
            relevance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            latent_dim: 4,
            input_dim: 16,
            teacher_dim: 8,
            corpus_size: 60,
            query_count: 10,
            noise_sigma: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn binary_round_trip_empty_and_single() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        write_embeddings(&path, &[]).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), vec![]);
        // header-only file: magic + version + count + dim
        assert_eq!(std::fs::read(&path).unwrap().len(), 4 + 4 + 8 + 4);

        let rec = vec![EmbeddingRecord {
            id: "q1".into(),
            vector: vec![1.0, -2.5],
        }];
        let path = dir.path().join("one.bin");
        write_embeddings(&path, &rec).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back[0].vector[1].to_bits(), (-2.5f64).to_bits());
    }

    #[test]
    fn binary_round_trip_many_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("many.bin");
        let records: Vec<EmbeddingRecord> = (0..37)
            .map(|i| EmbeddingRecord {
                id: format!("rec{i:03}"),
                vector: (0..5).map(|j| ((i * 5 + j) as f64).sin() * 1e-3).collect(),
            })
            .collect();
        write_embeddings(&path, &records).unwrap();
        let back = read_embeddings(&path).unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn binary_rejects_corruption_and_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let records = vec![
            EmbeddingRecord {
                id: "a".into(),
                vector: vec![1.0],
            },
            EmbeddingRecord {
                id: "b".into(),
                vector: vec![2.0],
            },
        ];
        write_embeddings(&path, &records).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_embeddings(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = read_embeddings(&path).unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");

        let dup = vec![
            EmbeddingRecord {
                id: "a".into(),
                vector: vec![1.0],
            },
            EmbeddingRecord {
                id: "a".into(),
                vector: vec![2.0],
            },
        ];
        assert!(write_embeddings(dir.path().join("dup.bin"), &dup).is_err());

        let ragged = vec![
            EmbeddingRecord {
                id: "a".into(),
                vector: vec![1.0],
            },
            EmbeddingRecord {
                id: "b".into(),
                vector: vec![2.0, 3.0],
            },
        ];
        assert!(write_embeddings(dir.path().join("ragged.bin"), &ragged).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let records = vec![
            EmbeddingRecord {
                id: "a".into(),
                vector: vec![0.5, 1.5],
            },
            EmbeddingRecord {
                id: "b".into(),
                vector: vec![-0.25, 2.0],
            },
        ];
        write_embeddings_jsonl(&path, &records).unwrap();
        assert_eq!(read_embeddings_jsonl(&path).unwrap(), records);

        std::fs::write(&path, "{\"id\":\"a\",\"vector\":[1.0]}\n{\"id\":\"b\"}\n").unwrap();
        let err = read_embeddings_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("vector"), "{err}");
    }

    #[test]
    fn supervised_instance_validates_dims() {
        assert!(SupervisedInstance::new(vec![1.0, 2.0], vec![3.0], Matrix::zeros(0, 2)).is_err());
        assert!(SupervisedInstance::new(vec![1.0], vec![2.0], Matrix::zeros(3, 2)).is_err());
        let ok =
            SupervisedInstance::new(vec![1.0, 2.0], vec![3.0, 4.0], Matrix::zeros(2, 2)).unwrap();
        assert_eq!(ok.feature_dim(), 2);
        assert_eq!(ok.negative_count(), 2);
    }

    #[test]
    fn spec_validation_catches_bad_dims() {
        let mut spec = small_spec();
        spec.latent_dim = 20;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.query_count = 100;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.noise_sigma = -0.5;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.corpus_size = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let spec: SyntheticSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(spec, SyntheticSpec::default());
        let spec: SyntheticSpec = serde_json::from_str(r#"{"corpus_size": 100}"#).unwrap();
        assert_eq!(spec.corpus_size, 100);
        assert!(serde_json::from_str::<SyntheticSpec>(r#"{"corpussize": 1}"#).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = small_spec();
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.supervised, b.supervised);
        assert_eq!(a.relevance, b.relevance);
        assert_eq!(a.teacher.digest(), b.teacher.digest());

        let mut other = spec;
        other.seed = 8;
        let c = gen_synthetic(&other).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn generator_shapes_and_counts() {
        let spec = small_spec();
        let task = gen_synthetic(&spec).unwrap();
        assert_eq!(task.corpus.shape(), (60, 16));
        assert_eq!(task.queries.shape(), (10, 16));
        assert_eq!(task.pairs.len(), PAIRS_PER_QUERY * 10);
        assert_eq!(task.supervised.len(), 10);
        assert_eq!(task.relevance.len(), 10);
        assert_eq!(task.teacher.dim(), 8);
        assert!(task
            .supervised
            .iter()
            .all(|s| s.negative_count() == MINED_NEGATIVES));
        // teacher embeddings are unit-normalized
        let t = task
            .teacher
            .embed(&Matrix::zeros(1, 1), &[task.corpus_ids[0].clone()])
            .unwrap();
        let norm: f64 = t.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generator_query_teacher_matches_its_document() {
        let task = gen_synthetic(&small_spec()).unwrap();
        for (qid, docs) in &task.relevance {
            let doc = docs.iter().next().unwrap();
            let q = task
                .teacher
                .embed(&Matrix::zeros(1, 1), std::slice::from_ref(qid))
                .unwrap();
            let d = task
                .teacher
                .embed(&Matrix::zeros(1, 1), std::slice::from_ref(doc))
                .unwrap();
            assert_eq!(q, d, "query {qid} and its document share a latent");
        }
    }

    #[test]
    fn generator_negatives_are_wrong_latent_only() {
        let task = gen_synthetic(&small_spec()).unwrap();
        for meta in &task.supervised_meta {
            let relevant = &task.relevance[&meta.query];
            assert!(relevant.contains(&meta.positive_doc));
            for neg in &meta.negative_docs {
                assert!(
                    !relevant.contains(neg),
                    "negative {neg} is relevant to {}",
                    meta.query
                );
            }
            let unique: BTreeSet<_> = meta.negative_docs.iter().collect();
            assert_eq!(unique.len(), MINED_NEGATIVES);
        }
    }

    #[test]
    fn generator_same_latent_pairs_match_gold() {
        let task = gen_synthetic(&small_spec()).unwrap();
        let same: Vec<_> = task.pairs.iter().filter(|p| p.same_latent).collect();
        let diff: Vec<_> = task.pairs.iter().filter(|p| !p.same_latent).collect();
        assert!(!same.is_empty() && !diff.is_empty());
        for p in same {
            assert!(
                (p.gold - 1.0).abs() < 1e-12,
                "same-latent gold must be cosine 1"
            );
        }
        for p in diff {
            assert!(p.gold < 1.0 - 1e-9);
        }
    }

    #[test]
    fn noiseless_generator_makes_identical_positive_pairs() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let task = gen_synthetic(&spec).unwrap();
        for p in task.pairs.iter().filter(|p| p.same_latent) {
            assert_eq!(p.a, p.b);
        }
    }

    #[test]
    fn task_dir_round_trip() {
        let spec = small_spec();
        let task = gen_synthetic(&spec).unwrap();
        let dir = tempdir().unwrap();
        write_task_dir(dir.path(), &task).unwrap();
        for f in DATA_FILES {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.corpus, task.corpus);
        assert_eq!(ds.queries, task.queries);
        assert_eq!(ds.pairs, task.pairs);
        assert_eq!(ds.supervised, task.supervised);
        assert_eq!(ds.supervised_meta, task.supervised_meta);
        assert_eq!(ds.relevance, task.relevance);
        assert_eq!(ds.teacher.digest(), task.teacher.digest());
    }

    #[test]
    fn task_dir_write_is_reproducible_byte_for_byte() {
        let spec = small_spec();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        write_task_dir(d1.path(), &gen_synthetic(&spec).unwrap()).unwrap();
        write_task_dir(d2.path(), &gen_synthetic(&spec).unwrap()).unwrap();
        for f in DATA_FILES {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical generations");
        }
    }
}
