//! The two-stage training procedure: distillation on unlabeled inputs
//! against a frozen teacher, then supervised fine-tuning on labeled
//! triplets, both under bias-corrected Adam with global-norm gradient
//! clipping. Also home to the run configuration and per-epoch history.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::SupervisedInstance;
use crate::encoder::{StudentModel, TeacherModel};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::Matrix;
use crate::objectives::{
    loss_distill_stage_grads, loss_finetune_stage_grads, AlignmentHead, LossValue,
};

/// Hyperparameters for both training stages. JSON configs may omit any
/// field to accept its default; when `kernel` is omitted it resolves to an
/// RBF kernel with width `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawConfig")]
pub struct DistillConfig {
    pub tau_distill: f64,
    pub tau_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub kernel: KernelSpec,
    pub lr_distill: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub epochs_distill: usize,
    pub epochs_finetune: usize,
    #[serde(rename = "hard_negatives_K")]
    pub hard_negatives_k: usize,
    pub seed: u64,
    pub reduce_to: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_distill: 0.1,
            tau_finetune: 0.05,
            beta1: 1.0,
            beta2: 0.5,
            gamma: 0.5,
            kernel: KernelSpec::Rbf { gamma: 0.5 },
            lr_distill: 1e-4,
            lr_finetune: 3e-5,
            batch_size: 64,
            epochs_distill: 10,
            epochs_finetune: 5,
            hard_negatives_k: 8,
            seed: 7,
            reduce_to: None,
        }
    }
}

/// Mirror of [`DistillConfig`] with every field optional, so partial JSON
/// documents deserialize against the defaults. Unknown keys are rejected to
/// catch typos.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    tau_distill: Option<f64>,
    tau_finetune: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    gamma: Option<f64>,
    kernel: Option<KernelSpec>,
    lr_distill: Option<f64>,
    lr_finetune: Option<f64>,
    batch_size: Option<usize>,
    epochs_distill: Option<usize>,
    epochs_finetune: Option<usize>,
    #[serde(rename = "hard_negatives_K")]
    hard_negatives_k: Option<usize>,
    seed: Option<u64>,
    reduce_to: Option<usize>,
}

impl From<RawConfig> for DistillConfig {
    fn from(raw: RawConfig) -> Self {
        let mut cfg = DistillConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = raw.$f { cfg.$f = v; } )* };
        }
        take!(
            tau_distill,
            tau_finetune,
            beta1,
            beta2,
            gamma,
            lr_distill,
            lr_finetune,
            batch_size,
            epochs_distill,
            epochs_finetune,
            hard_negatives_k,
            seed
        );
        cfg.kernel = raw.kernel.unwrap_or(KernelSpec::Rbf { gamma: cfg.gamma });
        cfg.reduce_to = raw.reduce_to;
        cfg
    }
}

/// Boundaries of the hyperparameter ranges searched in the original
/// experiments; values outside them train fine but earn a warning.
const LR_RANGE: (f64, f64) = (1e-5, 1e-4);
const BATCH_RANGE: (usize, usize) = (64, 256);
const EPOCH_RANGE: (usize, usize) = (3, 10);
const TAU_RANGE: (f64, f64) = (0.01, 0.5);
const GAMMA_RANGE: (f64, f64) = (0.01, 1.0);
const BETA_RANGE: (f64, f64) = (0.1, 2.0);

impl DistillConfig {
    /// The kernel used for both Gram matrices of the HSIC penalty.
    pub fn kernel_spec(&self) -> KernelSpec {
        self.kernel
    }

    /// Rejects invalid values and returns advisory warnings for values
    /// outside the ranges covered by the original hyperparameter search.
    pub fn validate(&self) -> Result<Vec<String>> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
            Ok(())
        }
        positive("tau_distill", self.tau_distill)?;
        positive("tau_finetune", self.tau_finetune)?;
        positive("lr_distill", self.lr_distill)?;
        positive("lr_finetune", self.lr_finetune)?;
        positive("gamma", self.gamma)?;
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {beta}"
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.reduce_to == Some(0) {
            return Err(Error::Config("reduce_to must be at least 1".into()));
        }
        self.kernel.validate()?;

        let mut warnings = Vec::new();
        let mut warn_f64 = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v < lo || v > hi {
                warnings.push(format!(
                    "{name} = {v} outside the searched range [{lo}, {hi}]"
                ));
            }
        };
        warn_f64("lr_distill", self.lr_distill, LR_RANGE);
        warn_f64("lr_finetune", self.lr_finetune, LR_RANGE);
        warn_f64("tau_distill", self.tau_distill, TAU_RANGE);
        warn_f64("tau_finetune", self.tau_finetune, TAU_RANGE);
        warn_f64("gamma", self.gamma, GAMMA_RANGE);
        warn_f64("beta1", self.beta1, BETA_RANGE);
        warn_f64("beta2", self.beta2, BETA_RANGE);
        let mut warn_usize = |name: &str, v: usize, (lo, hi): (usize, usize)| {
            if v < lo || v > hi {
                warnings.push(format!(
                    "{name} = {v} outside the searched range [{lo}, {hi}]"
                ));
            }
        };
        warn_usize("batch_size", self.batch_size, BATCH_RANGE);
        warn_usize("epochs_distill", self.epochs_distill, EPOCH_RANGE);
        warn_usize("epochs_finetune", self.epochs_finetune, EPOCH_RANGE);
        Ok(warnings)
    }
}

const ADAM_BETA_M: f64 = 0.9;
const ADAM_BETA_V: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates and step counter for one parameter
/// matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        AdamState::new(param.rows(), param.cols())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::State(format!(
            "adam shapes disagree: param {:?}, grad {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias_m = 1.0 - ADAM_BETA_M.powi(t);
    let bias_v = 1.0 - ADAM_BETA_V.powi(t);
    for i in 0..param.rows() {
        for j in 0..param.cols() {
            let g = grad.get(i, j);
            let m = ADAM_BETA_M * state.m.get(i, j) + (1.0 - ADAM_BETA_M) * g;
            let v = ADAM_BETA_V * state.v.get(i, j) + (1.0 - ADAM_BETA_V) * g * g;
            state.m.set(i, j, m);
            state.v.set(i, j, v);
            let update = lr * (m / bias_m) / ((v / bias_v).sqrt() + ADAM_EPS);
            param.set(i, j, param.get(i, j) - update);
        }
    }
    Ok(())
}

/// Maximum global gradient norm; HSIC gradients can spike in early epochs.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Scales all gradients jointly so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|&v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Loss telemetry for one completed epoch. `total`, `infonce`, and `hsic`
/// are unweighted means over the epoch's batches; the identity
/// `total = infonce + beta * hsic` carries over from the per-batch losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub infonce: f64,
    pub hsic: f64,
    pub wall_ms: u64,
}

/// Per-epoch records of one training stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,infonce,hsic,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{}\n",
                r.epoch, r.total, r.infonce, r.hsic, r.wall_ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Averages batch losses into an epoch record.
struct EpochAccumulator {
    total: f64,
    parts: BTreeMap<String, f64>,
    batches: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            total: 0.0,
            parts: BTreeMap::new(),
            batches: 0,
        }
    }

    fn push(&mut self, lv: &LossValue) {
        self.total += lv.total;
        for (k, v) in &lv.parts {
            *self.parts.entry(k.clone()).or_insert(0.0) += v;
        }
        self.batches += 1;
    }

    fn finish(self, epoch: usize, wall_ms: u64) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            total: self.total / n,
            infonce: self.parts.get("infonce").copied().unwrap_or(0.0) / n,
            hsic: self.parts.get("hsic").copied().unwrap_or(0.0) / n,
            wall_ms,
        }
    }
}

/// Seeded generator for one of the trainer's independent random streams,
/// so e.g. head initialization and shuffling never share draws.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ALIGN_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

/// Builds the initial reduction projection from the top `d_red` principal
/// components of the anchor embeddings. Starting from the variance-
/// preserving linear map (rather than random weights) means the reduced
/// embeddings begin close to the full-dimensional geometry and fine-tuning
/// only has to adapt them, not rediscover them.
fn pca_projection(
    student: &StudentModel,
    instances: &[SupervisedInstance],
    d_red: usize,
) -> Result<Matrix> {
    let anchors = Matrix::from_rows(
        &instances
            .iter()
            .map(|inst| inst.anchor().to_vec())
            .collect::<Vec<_>>(),
    )?;
    let (mut embedded, _) = student.mlp.forward(&anchors)?;
    let l = embedded.rows();
    let d = embedded.cols();
    for j in 0..d {
        let mean = (0..l).map(|i| embedded.get(i, j)).sum::<f64>() / l as f64;
        for i in 0..l {
            embedded.set(i, j, embedded.get(i, j) - mean);
        }
    }
    // the 1/(l-1) scaling does not move the eigenvectors; it only keeps the
    // eigenvalues on the familiar variance scale
    let cov = embedded
        .transpose()
        .matmul(&embedded)?
        .scale(1.0 / (l.max(2) - 1) as f64);
    let (_, components) = crate::linalg::symmetric_eigen(&cov)?;
    let rows: Vec<Vec<f64>> = (0..d_red).map(|i| components.row(i).to_vec()).collect();
    Matrix::from_rows(&rows)
}

/// Splits shuffled indices into training batches, dropping any remainder
/// smaller than 2 (the contrastive losses need at least two samples).
fn batches(indices: &[usize], batch_size: usize) -> Vec<&[usize]> {
    indices
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .collect()
}

fn training_error(epoch: usize, batch: usize, err: Error) -> Error {
    Error::Training {
        epoch,
        batch,
        detail: err.to_string(),
    }
}

/// Distillation stage: aligns student embeddings with frozen teacher
/// embeddings batch by batch, under the contrastive loss plus the weighted
/// HSIC penalty on the raw inputs. Returns the trained student (alignment
/// head attached) and per-epoch history.
pub fn run_distill_stage(
    cfg: &DistillConfig,
    teacher: &TeacherModel,
    mut student: StudentModel,
    corpus: &Matrix,
    corpus_ids: &[String],
) -> Result<(StudentModel, TrainHistory)> {
    cfg.validate()?;
    let n = corpus.rows();
    if corpus_ids.len() != n {
        return Err(Error::Pairing {
            left: corpus_ids.len(),
            right: n,
        });
    }
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "corpus has {n} rows, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    let mut history = TrainHistory::default();
    if cfg.epochs_distill == 0 {
        return Ok((student, history));
    }

    let d_student = student.mlp.spec().output_dim();
    let d_teacher = teacher.dim();
    let mut head = match student.align.take() {
        Some(h) => {
            if h.w.shape() != (d_student, d_teacher) {
                return Err(Error::shape(
                    "alignment head",
                    h.w.shape(),
                    (d_student, d_teacher),
                ));
            }
            h
        }
        None => AlignmentHead::new(xavier(
            d_student,
            d_teacher,
            &mut stream_rng(cfg.seed, STREAM_ALIGN_INIT),
        )),
    };

    let mut opt_w: Vec<AdamState> = student
        .mlp
        .weights()
        .iter()
        .map(AdamState::for_param)
        .collect();
    let mut opt_b: Vec<AdamState> = student
        .mlp
        .biases()
        .iter()
        .map(AdamState::for_param)
        .collect();
    let mut opt_head = AdamState::for_param(&head.w);

    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs_distill {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccumulator::new();
        for (batch_idx, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let x = corpus.select_rows(batch);
            let ids: Vec<String> = batch.iter().map(|&i| corpus_ids[i].clone()).collect();
            let step = (|| -> Result<LossValue> {
                let t = teacher.embed(&x, &ids)?;
                let (s, cache) = student.mlp.forward(&x)?;
                let (lv, grad_s, grad_head) = loss_distill_stage_grads(&s, &t, &x, &head, cfg)?;
                let mlp_grads = student.mlp.backward(&cache, &grad_s)?;

                let mut grads = mlp_grads.weights;
                grads.extend(mlp_grads.biases);
                grads.push(grad_head);
                clip_global_norm(&mut grads, GRAD_CLIP_NORM);

                let layers = student.mlp.weights().len();
                let (weights, biases) = student.mlp.params_mut();
                for l in 0..layers {
                    adam_step(&mut weights[l], &grads[l], &mut opt_w[l], cfg.lr_distill)?;
                    adam_step(
                        &mut biases[l],
                        &grads[layers + l],
                        &mut opt_b[l],
                        cfg.lr_distill,
                    )?;
                }
                adam_step(
                    &mut head.w,
                    &grads[2 * layers],
                    &mut opt_head,
                    cfg.lr_distill,
                )?;
                Ok(lv)
            })()
            .map_err(|e| training_error(epoch, batch_idx, e))?;
            acc.push(&step);
        }
        history
            .records
            .push(acc.finish(epoch, started.elapsed().as_millis() as u64));
    }
    student.align = Some(head);
    Ok((student, history))
}

/// Fine-tuning stage: trains on labeled (anchor, positive, K negatives)
/// instances under the supervised contrastive loss plus the weighted HSIC
/// penalty on anchor inputs. Drops the alignment head, creates the
/// reduction projection when `reduce_to` is set, and trains the projection
/// alongside the backbone.
pub fn run_finetune_stage(
    cfg: &DistillConfig,
    mut student: StudentModel,
    instances: &[SupervisedInstance],
) -> Result<(StudentModel, TrainHistory)> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Data("supervised set is empty".into()));
    }
    let k = cfg.hard_negatives_k;
    let d_in = student.mlp.spec().input_dim();
    for (i, inst) in instances.iter().enumerate() {
        if inst.feature_dim() != d_in {
            return Err(Error::Config(format!(
                "instance {i} has feature dim {}, model expects {d_in}",
                inst.feature_dim()
            )));
        }
        if inst.negative_count() < k {
            return Err(Error::Config(format!(
                "instance {i} has {} negatives, config requires {k}",
                inst.negative_count()
            )));
        }
    }
    if instances.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "supervised set has {} instances, fewer than batch_size {}",
            instances.len(),
            cfg.batch_size
        )));
    }
    if cfg.epochs_finetune == 0 {
        return Ok((student, TrainHistory::default()));
    }

    // the alignment head only mediates teacher comparison; it plays no role
    // from here on
    student.align = None;

    let d_out = student.mlp.spec().output_dim();
    if let Some(d_red) = cfg.reduce_to {
        if d_red >= d_out {
            return Err(Error::Config(format!(
                "reduce_to {d_red} must be smaller than the embedding dim {d_out}"
            )));
        }
        if student.proj.is_none() {
            student.proj = Some(pca_projection(&student, instances, d_red)?);
        }
    }

    let mut history = TrainHistory::default();
    let mut opt_w: Vec<AdamState> = student
        .mlp
        .weights()
        .iter()
        .map(AdamState::for_param)
        .collect();
    let mut opt_b: Vec<AdamState> = student
        .mlp
        .biases()
        .iter()
        .map(AdamState::for_param)
        .collect();
    let mut opt_proj = student.proj.as_ref().map(AdamState::for_param);

    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=cfg.epochs_finetune {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccumulator::new();
        for (batch_idx, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let l = batch.len();
            let anchors_x = Matrix::from_rows(
                &batch
                    .iter()
                    .map(|&i| instances[i].anchor().to_vec())
                    .collect::<Vec<_>>(),
            )
            .map_err(|e| training_error(epoch, batch_idx, e))?;
            let positives_x = Matrix::from_rows(
                &batch
                    .iter()
                    .map(|&i| instances[i].positive().to_vec())
                    .collect::<Vec<_>>(),
            )
            .map_err(|e| training_error(epoch, batch_idx, e))?;
            let mut negative_rows = Vec::with_capacity(l * k);
            for &i in batch {
                for q in 0..k {
                    negative_rows.push(instances[i].negative(q).to_vec());
                }
            }
            let negatives_x = if k == 0 {
                Matrix::zeros(0, d_in)
            } else {
                Matrix::from_rows(&negative_rows)
                    .map_err(|e| training_error(epoch, batch_idx, e))?
            };

            let step = (|| -> Result<LossValue> {
                let (a_out, a_cache) = student.mlp.forward(&anchors_x)?;
                let (p_out, p_cache) = student.mlp.forward(&positives_x)?;
                let (n_out, n_cache) = if k == 0 {
                    (Matrix::zeros(0, d_out), None)
                } else {
                    let (o, c) = student.mlp.forward(&negatives_x)?;
                    (o, Some(c))
                };

                // embeddings seen by the loss: projected when reduction is on
                let (s_a, s_p, s_n) = match &student.proj {
                    Some(p) => (
                        a_out.matmul(&p.transpose())?,
                        p_out.matmul(&p.transpose())?,
                        if k == 0 {
                            Matrix::zeros(0, p.rows())
                        } else {
                            n_out.matmul(&p.transpose())?
                        },
                    ),
                    None => (a_out.clone(), p_out.clone(), n_out.clone()),
                };

                let (lv, ga, gp, gn) =
                    loss_finetune_stage_grads(&s_a, &s_p, &s_n, k, &anchors_x, cfg)?;

                // chain through the projection back to the MLP outputs
                let (da, dp, dn, grad_proj) = match &student.proj {
                    Some(p) => {
                        let mut gproj = ga.transpose().matmul(&a_out)?;
                        gproj.axpy(1.0, &gp.transpose().matmul(&p_out)?)?;
                        if k > 0 {
                            gproj.axpy(1.0, &gn.transpose().matmul(&n_out)?)?;
                        }
                        (
                            ga.matmul(p)?,
                            gp.matmul(p)?,
                            if k == 0 { gn } else { gn.matmul(p)? },
                            Some(gproj),
                        )
                    }
                    None => (ga, gp, gn, None),
                };

                let a_grads = student.mlp.backward(&a_cache, &da)?;
                let p_grads = student.mlp.backward(&p_cache, &dp)?;
                let layers = student.mlp.weights().len();
                let mut weight_grads = a_grads.weights;
                let mut bias_grads = a_grads.biases;
                for l in 0..layers {
                    weight_grads[l].axpy(1.0, &p_grads.weights[l])?;
                    bias_grads[l].axpy(1.0, &p_grads.biases[l])?;
                }
                if let Some(c) = &n_cache {
                    let n_grads = student.mlp.backward(c, &dn)?;
                    for l in 0..layers {
                        weight_grads[l].axpy(1.0, &n_grads.weights[l])?;
                        bias_grads[l].axpy(1.0, &n_grads.biases[l])?;
                    }
                }

                let mut grads = weight_grads;
                grads.extend(bias_grads);
                if let Some(gproj) = grad_proj {
                    grads.push(gproj);
                }
                clip_global_norm(&mut grads, GRAD_CLIP_NORM);

                let (weights, biases) = student.mlp.params_mut();
                for l in 0..layers {
                    adam_step(&mut weights[l], &grads[l], &mut opt_w[l], cfg.lr_finetune)?;
                    adam_step(
                        &mut biases[l],
                        &grads[layers + l],
                        &mut opt_b[l],
                        cfg.lr_finetune,
                    )?;
                }
                if let (Some(p), Some(opt)) = (student.proj.as_mut(), opt_proj.as_mut()) {
                    adam_step(p, &grads[2 * layers], opt, cfg.lr_finetune)?;
                }
                Ok(lv)
            })()
            .map_err(|e| training_error(epoch, batch_idx, e))?;
            acc.push(&step);
        }
        history
            .records
            .push(acc.finish(epoch, started.elapsed().as_millis() as u64));
    }
    Ok((student, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MlpSpec;

    fn tiny_teacher(n: usize, d: usize, seed: u64) -> (TeacherModel, Matrix, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = Matrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        let rows = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        (TeacherModel::table(ids.clone(), rows).unwrap(), corpus, ids)
    }

    fn fresh_student(dims: &[usize], seed: u64) -> StudentModel {
        StudentModel::fresh(
            MlpSpec::new(dims.to_vec()).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn quick_cfg() -> DistillConfig {
        DistillConfig {
            batch_size: 8,
            epochs_distill: 3,
            epochs_finetune: 3,
            lr_distill: 1e-2,
            lr_finetune: 1e-2,
            hard_negatives_k: 2,
            ..DistillConfig::default()
        }
    }

    fn synthetic_instances(
        count: usize,
        d_in: usize,
        k: usize,
        seed: u64,
    ) -> Vec<SupervisedInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let anchor: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // positive is a noisy copy of the anchor, negatives are fresh
                let positive: Vec<f64> = anchor
                    .iter()
                    .map(|v| v + 0.05 * rng.gen_range(-1.0..1.0))
                    .collect();
                let negatives = Matrix::from_fn(k, d_in, |_, _| rng.gen_range(-1.0..1.0));
                SupervisedInstance::new(anchor, positive, negatives).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_config_is_valid_with_no_warnings() {
        let warnings = DistillConfig::default().validate().unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
    }

    #[test]
    fn config_json_defaults_and_overrides() {
        let cfg: DistillConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, DistillConfig::default());

        let cfg: DistillConfig =
            serde_json::from_str(r#"{"gamma": 0.25, "hard_negatives_K": 4}"#).unwrap();
        assert_eq!(cfg.gamma, 0.25);
        assert_eq!(cfg.hard_negatives_k, 4);
        // omitted kernel resolves against the overridden width
        assert_eq!(cfg.kernel, KernelSpec::Rbf { gamma: 0.25 });

        let cfg: DistillConfig =
            serde_json::from_str(r#"{"kernel": {"kind": "linear"}, "gamma": 0.25}"#).unwrap();
        assert_eq!(cfg.kernel, KernelSpec::Linear);

        assert!(serde_json::from_str::<DistillConfig>(r#"{"taudistill": 1}"#).is_err());
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = DistillConfig {
            reduce_to: Some(16),
            kernel: KernelSpec::Imq { c: 2.0 },
            ..DistillConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("hard_negatives_K"), "{json}");
        let back: DistillConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_rejects_and_warns() {
        let cfg = DistillConfig {
            tau_distill: 0.0,
            ..DistillConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = DistillConfig {
            batch_size: 1,
            ..DistillConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = DistillConfig {
            beta1: -0.1,
            ..DistillConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = DistillConfig {
            lr_distill: 1e-2,
            tau_finetune: 0.7,
            epochs_distill: 50,
            ..DistillConfig::default()
        };
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 3, "{warnings:?}");
        assert!(warnings.iter().any(|w| w.contains("lr_distill")));
    }

    #[test]
    fn adam_zero_grad_leaves_params_increments_step() {
        let mut p = Matrix::from_fn(2, 2, |i, j| (i + j) as f64);
        let before = p.clone();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::zeros(2, 2), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_scaled_sign_of_gradient() {
        let mut p = Matrix::zeros(1, 1);
        let mut st = AdamState::for_param(&p);
        let g = Matrix::from_fn(1, 1, |_, _| 0.5);
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        // bias correction makes the first update lr * g / (|g| + eps')
        assert!((p.get(0, 0) + 0.1).abs() < 1e-6, "{}", p.get(0, 0));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p);
        let err = adam_step(&mut p, &Matrix::zeros(2, 3), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 / 10.0);
            let mut st = AdamState::for_param(&p);
            for step in 0..10 {
                let g = Matrix::from_fn(3, 2, |i, j| ((i + j + step) as f64).sin());
                adam_step(&mut p, &g, &mut st, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![Matrix::from_fn(1, 2, |_, j| if j == 0 { 3.0 } else { 4.0 })];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].get(0, 0), 3.0);

        let mut grads = vec![
            Matrix::from_fn(1, 1, |_, _| 6.0),
            Matrix::from_fn(1, 1, |_, _| 8.0),
        ];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert_eq!(norm, 10.0);
        assert!((grads[0].get(0, 0) - 3.0).abs() < 1e-12);
        assert!((grads[1].get(0, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn history_csv_layout() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                total: 2.5,
                infonce: 2.0,
                hsic: 0.5,
                wall_ms: 12,
            }],
        };
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,total,infonce,hsic,wall_ms"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,2.5"), "{row}");
        assert!(row.ends_with(",12"), "{row}");
    }

    #[test]
    fn distill_zero_epochs_returns_student_unchanged() {
        let (teacher, corpus, ids) = tiny_teacher(16, 3, 1);
        let student = fresh_student(&[4, 5, 3], 2);
        let digest = student.digest();
        let mut cfg = quick_cfg();
        cfg.epochs_distill = 0;
        let (out, history) = run_distill_stage(&cfg, &teacher, student, &corpus, &ids).unwrap();
        assert_eq!(out.digest(), digest);
        assert!(history.records.is_empty());
    }

    #[test]
    fn distill_requires_corpus_at_least_batch_size() {
        let (teacher, corpus, ids) = tiny_teacher(4, 3, 3);
        let student = fresh_student(&[4, 3], 4);
        let mut cfg = quick_cfg();
        cfg.batch_size = 8;
        assert!(matches!(
            run_distill_stage(&cfg, &teacher, student, &corpus, &ids),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distill_trains_and_reduces_loss() {
        let (teacher, corpus, ids) = tiny_teacher(32, 3, 5);
        let student = fresh_student(&[4, 8, 3], 6);
        let mut cfg = quick_cfg();
        cfg.beta1 = 0.0;
        cfg.epochs_distill = 6;
        cfg.batch_size = 16;
        let (out, history) = run_distill_stage(&cfg, &teacher, student, &corpus, &ids).unwrap();
        assert!(
            out.align.is_some(),
            "alignment head kept with the checkpoint"
        );
        assert_eq!(history.records.len(), 6);
        let first = history.records.first().unwrap().total;
        let last = history.records.last().unwrap().total;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn distill_history_satisfies_part_identity() {
        let (teacher, corpus, ids) = tiny_teacher(16, 3, 7);
        let student = fresh_student(&[4, 3], 8);
        let mut cfg = quick_cfg();
        cfg.beta1 = 0.7;
        let (_, history) = run_distill_stage(&cfg, &teacher, student, &corpus, &ids).unwrap();
        for r in &history.records {
            assert!((r.total - (r.infonce + cfg.beta1 * r.hsic)).abs() < 1e-10);
        }
    }

    #[test]
    fn distill_is_bit_deterministic() {
        let run = || {
            let (teacher, corpus, ids) = tiny_teacher(16, 3, 9);
            let student = fresh_student(&[4, 6, 3], 10);
            let cfg = quick_cfg();
            let (out, _) = run_distill_stage(&cfg, &teacher, student, &corpus, &ids).unwrap();
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
    }

    #[test]
    fn distill_leaves_teacher_untouched() {
        let (teacher, corpus, ids) = tiny_teacher(16, 3, 11);
        let before = teacher.digest();
        let student = fresh_student(&[4, 3], 12);
        run_distill_stage(&quick_cfg(), &teacher, student, &corpus, &ids).unwrap();
        assert_eq!(teacher.digest(), before);
    }

    #[test]
    fn finetune_rejects_empty_supervised_set() {
        let student = fresh_student(&[4, 3], 13);
        assert!(matches!(
            run_finetune_stage(&quick_cfg(), student, &[]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_rejects_instances_with_too_few_negatives() {
        let student = fresh_student(&[4, 3], 14);
        let instances = synthetic_instances(8, 4, 1, 15);
        let mut cfg = quick_cfg();
        cfg.hard_negatives_k = 2;
        assert!(matches!(
            run_finetune_stage(&cfg, student, &instances),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_trains_with_and_without_negatives() {
        for k in [0usize, 2] {
            let student = fresh_student(&[4, 6, 4], 16);
            let instances = synthetic_instances(16, 4, 2, 17);
            let mut cfg = quick_cfg();
            cfg.hard_negatives_k = k;
            cfg.epochs_finetune = 5;
            let (out, history) = run_finetune_stage(&cfg, student, &instances).unwrap();
            assert!(out.align.is_none(), "alignment head must be dropped");
            assert_eq!(history.records.len(), 5);
            assert!(history.records.iter().all(|r| r.total.is_finite()));
            let first = history.records.first().unwrap().total;
            let last = history.records.last().unwrap().total;
            assert!(
                last < first,
                "k={k}: loss did not improve: {first} -> {last}"
            );
        }
    }

    #[test]
    fn finetune_reduce_to_shapes_embeddings() {
        let student = fresh_student(&[4, 6, 4], 18);
        let instances = synthetic_instances(8, 4, 2, 19);
        let mut cfg = quick_cfg();
        cfg.reduce_to = Some(2);
        let (out, _) = run_finetune_stage(&cfg, student, &instances).unwrap();
        assert_eq!(out.embed_dim(), 2);
        let embeddings = out
            .embed(&Matrix::from_fn(3, 4, |i, j| (i + j) as f64 / 10.0))
            .unwrap();
        assert_eq!(embeddings.shape(), (3, 2));
    }

    #[test]
    fn finetune_rejects_non_reducing_projection() {
        let student = fresh_student(&[4, 3], 20);
        let instances = synthetic_instances(8, 4, 2, 21);
        let mut cfg = quick_cfg();
        cfg.reduce_to = Some(3);
        assert!(run_finetune_stage(&cfg, student, &instances).is_err());
    }

    #[test]
    fn finetune_is_bit_deterministic() {
        let run = || {
            let student = fresh_student(&[4, 5, 3], 22);
            let instances = synthetic_instances(12, 4, 2, 23);
            let mut cfg = quick_cfg();
            cfg.batch_size = 4;
            let (out, _) = run_finetune_stage(&cfg, student, &instances).unwrap();
            out
        };
        assert_eq!(run(), run());
    }
}
