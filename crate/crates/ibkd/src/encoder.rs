//! The student encoder — a small MLP with tanh hidden layers and analytic
//! backpropagation — plus the optional dimension-reduction projection, the
//! learnable teacher-alignment head, the frozen teacher interface, and the
//! versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::AlignmentHead;

/// Layer widths of the student MLP, `[d_in, h1, ..., d_out]`. Hidden layers
/// use tanh, the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "MLP needs at least input and output widths, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "MLP layer widths must be >= 1, got {layer_dims:?}"
            )));
        }
        Ok(MlpSpec { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated: >= 2 entries")
    }

    fn affine_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Multi-layer perceptron with per-layer weight matrices (input dim x
/// output dim, applied on the right of a row batch) and row-vector biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// Post-activation values retained by `forward` for the matching
/// `backward` call. The parameter digest detects replay against a model
/// whose weights have changed since the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Matrix>, // [input, layer 1 output, ..., final output]
    param_digest: u64,
}

/// Parameter gradients from one backward pass, plus the gradient with
/// respect to the inputs.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub grad_in: Matrix,
}

impl Mlp {
    /// Seeded Xavier-uniform initialization: weights in
    /// +/- sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::with_capacity(spec.affine_layers());
        let mut biases = Vec::with_capacity(spec.affine_layers());
        for l in 0..spec.affine_layers() {
            let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Matrix::from_fn(fan_in, fan_out, |_, _| {
                rng.gen_range(-limit..limit)
            }));
            biases.push(Matrix::zeros(1, fan_out));
        }
        Mlp {
            spec,
            weights,
            biases,
        }
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        if weights.len() != spec.affine_layers() || biases.len() != spec.affine_layers() {
            return Err(Error::Config(format!(
                "expected {} affine layers, got {} weights / {} biases",
                spec.affine_layers(),
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..weights.len() {
            let want = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            if weights[l].shape() != want {
                return Err(Error::shape("mlp weight", weights[l].shape(), want));
            }
            if biases[l].shape() != (1, want.1) {
                return Err(Error::shape("mlp bias", biases[l].shape(), (1, want.1)));
            }
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Mutable access for the optimizer; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> (&mut [Matrix], &mut [Matrix]) {
        (&mut self.weights, &mut self.biases)
    }

    fn param_digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for m in self.weights.iter().chain(&self.biases) {
            h.update_matrix(m);
        }
        h.finish()
    }

    /// Batched forward pass; rows are samples. Returns the output batch and
    /// the cache needed by `backward`.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.spec.input_dim() {
            return Err(Error::shape(
                "mlp forward",
                inputs.shape(),
                (inputs.rows(), self.spec.input_dim()),
            ));
        }
        let layers = self.spec.affine_layers();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(inputs.clone());
        for l in 0..layers {
            let z = affine(
                activations.last().expect("non-empty"),
                &self.weights[l],
                &self.biases[l],
            )?;
            let a = if l + 1 < layers { z.map(f64::tanh) } else { z };
            activations.push(a);
        }
        let out = activations.last().expect("non-empty").clone();
        let cache = ForwardCache {
            activations,
            param_digest: self.param_digest(),
        };
        Ok((out, cache))
    }

    /// Exact reverse-mode gradients for the cached forward pass, given the
    /// loss gradient with respect to the outputs. tanh' = 1 - tanh^2 on the
    /// cached post-activations.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<MlpGrads> {
        if cache.param_digest != self.param_digest() {
            return Err(Error::State(
                "forward cache is stale: model parameters changed since the forward pass".into(),
            ));
        }
        let layers = self.spec.affine_layers();
        if cache.activations.len() != layers + 1 {
            return Err(Error::State(format!(
                "cache holds {} activations, model has {} layers",
                cache.activations.len(),
                layers
            )));
        }
        let out = &cache.activations[layers];
        if grad_out.shape() != out.shape() {
            return Err(Error::shape("mlp backward", grad_out.shape(), out.shape()));
        }
        let mut grad_weights = vec![Matrix::zeros(0, 0); layers];
        let mut grad_biases = vec![Matrix::zeros(0, 0); layers];
        // output layer is affine, so the first dz equals grad_out
        let mut dz = grad_out.clone();
        for l in (0..layers).rev() {
            let a_prev = &cache.activations[l];
            grad_weights[l] = a_prev.transpose().matmul(&dz)?;
            grad_biases[l] = column_sums(&dz);
            if l > 0 {
                let da_prev = dz.matmul(&self.weights[l].transpose())?;
                // previous activation is tanh output: chain through 1 - a^2
                dz = da_prev.zip_with("tanh backprop", a_prev, |g, a| g * (1.0 - a * a))?;
            } else {
                dz = dz.matmul(&self.weights[0].transpose())?;
            }
        }
        Ok(MlpGrads {
            weights: grad_weights,
            biases: grad_biases,
            grad_in: dz,
        })
    }
}

fn affine(a: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = a.matmul(w)?;
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            z.set(i, j, z.get(i, j) + b.get(0, j));
        }
    }
    Ok(z)
}

fn column_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(1, m.cols(), |_, j| (0..m.rows()).map(|i| m.get(i, j)).sum())
}

/// The trainable student: MLP backbone, optional reduction projection
/// (rows are the reduced axes, so embeddings are `s * proj^T`), and the
/// optional teacher-alignment head used only during distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub mlp: Mlp,
    pub proj: Option<Matrix>,
    pub align: Option<AlignmentHead>,
}

impl StudentModel {
    pub fn new(mlp: Mlp, proj: Option<Matrix>, align: Option<AlignmentHead>) -> Result<Self> {
        if let Some(p) = &proj {
            if p.cols() != mlp.spec().output_dim() {
                return Err(Error::shape(
                    "projection",
                    p.shape(),
                    (p.rows(), mlp.spec().output_dim()),
                ));
            }
            if p.rows() >= p.cols() {
                return Err(Error::Config(format!(
                    "projection must reduce dimensionality, got {}x{}",
                    p.rows(),
                    p.cols()
                )));
            }
        }
        Ok(StudentModel { mlp, proj, align })
    }

    pub fn fresh(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        StudentModel {
            mlp: Mlp::init(spec, rng),
            proj: None,
            align: None,
        }
    }

    /// Final embedding dimensionality: the projection's when present,
    /// otherwise the MLP output width.
    pub fn embed_dim(&self) -> usize {
        self.proj
            .as_ref()
            .map_or(self.mlp.spec().output_dim(), Matrix::rows)
    }

    /// Inference-path embeddings: MLP forward, then projection when set.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        let (out, _) = self.mlp.forward(inputs)?;
        match &self.proj {
            Some(p) => project(p, &out),
            None => Ok(out),
        }
    }

    /// FNV-1a digest over every parameter's bit pattern; used for the
    /// teacher-immutability check and change detection in tests.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for m in self.mlp.weights.iter().chain(&self.mlp.biases) {
            h.update_matrix(m);
        }
        if let Some(p) = &self.proj {
            h.update_matrix(p);
        }
        if let Some(a) = &self.align {
            h.update_matrix(&a.w);
        }
        h.finish()
    }
}

/// Reduction projection: maps n x d embeddings to n x d' via `s * proj^T`
/// where `proj` is d' x d.
pub fn project(proj: &Matrix, s: &Matrix) -> Result<Matrix> {
    s.matmul(&proj.transpose())
}

/// A frozen teacher: either a network applied to raw inputs or a lookup
/// table of precomputed embeddings keyed by record id.
#[derive(Debug, Clone)]
pub enum TeacherModel {
    Network(StudentModel),
    Table {
        ids: Vec<String>,
        index: BTreeMap<String, usize>,
        rows: Matrix,
    },
}

impl TeacherModel {
    pub fn table(ids: Vec<String>, rows: Matrix) -> Result<Self> {
        if ids.len() != rows.rows() {
            return Err(Error::Pairing {
                left: ids.len(),
                right: rows.rows(),
            });
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate teacher id {id:?}")));
            }
        }
        Ok(TeacherModel::Table { ids, index, rows })
    }

    pub fn dim(&self) -> usize {
        match self {
            TeacherModel::Network(m) => m.embed_dim(),
            TeacherModel::Table { rows, .. } => rows.cols(),
        }
    }

    /// Embeds one batch. A network teacher transforms `inputs`; a table
    /// teacher looks `ids` up and ignores the inputs.
    pub fn embed(&self, inputs: &Matrix, ids: &[String]) -> Result<Matrix> {
        match self {
            TeacherModel::Network(m) => m.embed(inputs),
            TeacherModel::Table { index, rows, .. } => {
                let mut picks = Vec::with_capacity(ids.len());
                for id in ids {
                    match index.get(id) {
                        Some(&i) => picks.push(i),
                        None => {
                            return Err(Error::Data(format!(
                                "teacher table has no embedding for id {id:?}"
                            )))
                        }
                    }
                }
                Ok(rows.select_rows(&picks))
            }
        }
    }

    pub fn digest(&self) -> u64 {
        match self {
            TeacherModel::Network(m) => m.digest(),
            TeacherModel::Table { ids, rows, .. } => {
                let mut h = Fnv1a::new();
                for id in ids {
                    h.update_bytes(id.as_bytes());
                }
                h.update_matrix(rows);
                h.finish()
            }
        }
    }
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }

    pub(crate) fn update_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub(crate) fn update_matrix(&mut self, m: &Matrix) {
        for &v in m.data() {
            self.update_bytes(&v.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

// --- checkpoint format -----------------------------------------------------
//
// Versioned binary layout, little-endian throughout:
//   magic "IBKD" | version u32 | dim count u32 | layer dims u32... |
//   flags u8 (bit 0 projection, bit 1 alignment head) |
//   [proj rows u32, proj cols u32] | [align rows u32, align cols u32] |
//   per layer: weight f64s row-major, bias f64s | proj f64s | align f64s
// Round-trips must be bit-exact.

const CKPT_MAGIC: &[u8; 4] = b"IBKD";
const CKPT_VERSION: u32 = 1;

struct CountingWriter<W: Write> {
    inner: W,
    path: String,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.path.clone(), e))
    }

    fn put_u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn put_matrix(&mut self, m: &Matrix) -> Result<()> {
        for &v in m.data() {
            self.put(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct CountingReader<R: Read> {
    inner: R,
    path: String,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
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

    fn take_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn take_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            self.take(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Matrix::new(rows, cols, data).map_err(|_| Error::Format {
            path: self.path.clone(),
            detail: format!("non-finite parameter value before byte {}", self.offset),
        })
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: format!("{} at byte {}", detail.into(), self.offset),
        }
    }
}

/// Writes a student checkpoint; the round-trip with [`read_student`] is
/// bit-exact.
pub fn write_student(path: impl AsRef<Path>, model: &StudentModel) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = CountingWriter {
        inner: BufWriter::new(file),
        path: path.display().to_string(),
    };
    w.put(CKPT_MAGIC)?;
    w.put_u32(CKPT_VERSION)?;
    let dims = model.mlp.spec().layer_dims();
    w.put_u32(dims.len() as u32)?;
    for &d in dims {
        w.put_u32(d as u32)?;
    }
    let flags = model.proj.is_some() as u8 | (model.align.is_some() as u8) << 1;
    w.put(&[flags])?;
    if let Some(p) = &model.proj {
        w.put_u32(p.rows() as u32)?;
        w.put_u32(p.cols() as u32)?;
    }
    if let Some(a) = &model.align {
        w.put_u32(a.w.rows() as u32)?;
        w.put_u32(a.w.cols() as u32)?;
    }
    for l in 0..model.mlp.weights.len() {
        w.put_matrix(&model.mlp.weights[l])?;
        w.put_matrix(&model.mlp.biases[l])?;
    }
    if let Some(p) = &model.proj {
        w.put_matrix(p)?;
    }
    if let Some(a) = &model.align {
        w.put_matrix(&a.w)?;
    }
    w.inner
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a student checkpoint written by [`write_student`].
pub fn read_student(path: impl AsRef<Path>) -> Result<StudentModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(r.bad(format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let version = r.take_u32()?;
    if version != CKPT_VERSION {
        return Err(r.bad(format!(
            "unsupported version {version}, expected {CKPT_VERSION}"
        )));
    }
    let dim_count = r.take_u32()? as usize;
    if !(2..=64).contains(&dim_count) {
        return Err(r.bad(format!("implausible layer-dim count {dim_count}")));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(r.take_u32()? as usize);
    }
    let spec = MlpSpec::new(dims)?;
    let mut flags = [0u8; 1];
    r.take(&mut flags)?;
    if flags[0] & !0b11 != 0 {
        return Err(r.bad(format!("unknown flag bits {:#04x}", flags[0])));
    }
    let proj_shape = if flags[0] & 1 != 0 {
        Some((r.take_u32()? as usize, r.take_u32()? as usize))
    } else {
        None
    };
    let align_shape = if flags[0] & 2 != 0 {
        Some((r.take_u32()? as usize, r.take_u32()? as usize))
    } else {
        None
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..spec.affine_layers() {
        let (din, dout) = (spec.layer_dims()[l], spec.layer_dims()[l + 1]);
        weights.push(r.take_matrix(din, dout)?);
        biases.push(r.take_matrix(1, dout)?);
    }
    let proj = match proj_shape {
        Some((pr, pc)) => Some(r.take_matrix(pr, pc)?),
        None => None,
    };
    let align = match align_shape {
        Some((ar, ac)) => Some(AlignmentHead::new(r.take_matrix(ar, ac)?)),
        None => None,
    };
    let mut trailing = [0u8; 1];
    if r.inner
        .read(&mut trailing)
        .map_err(|e| Error::io(r.path.clone(), e))?
        != 0
    {
        return Err(r.bad("trailing bytes after checkpoint payload"));
    }
    let mlp = Mlp::from_parts(spec, weights, biases)?;
    StudentModel::new(mlp, proj, align)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_diff_grad;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_mlp(dims: &[usize], seed: u64) -> Mlp {
        Mlp::init(MlpSpec::new(dims.to_vec()).unwrap(), &mut rng(seed))
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_fn(n, d, |_, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn spec_rejects_bad_layouts() {
        assert!(MlpSpec::new(vec![4]).is_err());
        assert!(MlpSpec::new(vec![4, 0, 2]).is_err());
        assert!(MlpSpec::new(vec![4, 3, 2]).is_ok());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let mlp = Mlp::from_parts(
            spec,
            vec![Matrix::zeros(3, 4), Matrix::zeros(4, 2)],
            vec![Matrix::zeros(1, 4), Matrix::zeros(1, 2)],
        )
        .unwrap();
        let (out, _) = mlp.forward(&random_matrix(5, 3, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_is_passthrough() {
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mlp =
            Mlp::from_parts(spec, vec![Matrix::identity(3)], vec![Matrix::zeros(1, 3)]).unwrap();
        let x = random_matrix(4, 3, 2);
        let (out, _) = mlp.forward(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let mlp = random_mlp(&[3, 5, 2], 7);
        let x = random_matrix(4, 3, 8);
        let (out, _) = mlp.forward(&x).unwrap();
        // scalar-loop re-implementation of affine + tanh + affine
        for i in 0..4 {
            let mut hidden = [0.0; 5];
            for j in 0..5 {
                let mut z = mlp.biases()[0].get(0, j);
                for c in 0..3 {
                    z += x.get(i, c) * mlp.weights()[0].get(c, j);
                }
                hidden[j] = z.tanh();
            }
            for j in 0..2 {
                let mut z = mlp.biases()[1].get(0, j);
                for (c, h) in hidden.iter().enumerate() {
                    z += h * mlp.weights()[1].get(c, j);
                }
                assert!((out.get(i, j) - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mlp = random_mlp(&[3, 2], 3);
        assert!(mlp.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn backward_zero_grad_out_gives_zero_grads() {
        let mlp = random_mlp(&[3, 4, 2], 11);
        let x = random_matrix(5, 3, 12);
        let (out, cache) = mlp.forward(&x).unwrap();
        let grads = mlp.backward(&cache, &Matrix::zeros(5, out.cols())).unwrap();
        for g in grads.weights.iter().chain(&grads.biases) {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.grad_in.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_affine_layer_is_input_transpose_times_grad() {
        let mlp = random_mlp(&[3, 2], 13);
        let x = random_matrix(6, 3, 14);
        let (_, cache) = mlp.forward(&x).unwrap();
        let g = random_matrix(6, 2, 15);
        let grads = mlp.backward(&cache, &g).unwrap();
        let expect = x.transpose().matmul(&g).unwrap();
        assert_eq!(grads.weights[0], expect);
    }

    #[test]
    fn backward_matches_finite_differences_per_parameter() {
        let mlp = random_mlp(&[4, 5, 3, 2], 21);
        let x = random_matrix(6, 4, 22);
        // fixed random combination weights make the loss a smooth scalar
        let c = random_matrix(6, 2, 23);
        let loss_of = |m: &Mlp| {
            let (out, _) = m.forward(&x).unwrap();
            out.data()
                .iter()
                .zip(c.data())
                .map(|(&o, &w)| o * w)
                .sum::<f64>()
        };
        let (out, cache) = mlp.forward(&x).unwrap();
        assert_eq!(out.shape(), (6, 2));
        let grads = mlp.backward(&cache, &c).unwrap();
        for l in 0..3 {
            let oracle_w = finite_diff_grad(
                |w| {
                    let mut m = mlp.clone();
                    m.params_mut().0[l] = w.clone();
                    loss_of(&m)
                },
                &mlp.weights()[l],
                1e-5,
            )
            .unwrap();
            let diff = grads.weights[l].sub(&oracle_w).unwrap().frobenius_norm();
            let rel = diff / oracle_w.frobenius_norm().max(1e-8);
            assert!(rel < 1e-4, "layer {l} weight grad rel err {rel}");

            let oracle_b = finite_diff_grad(
                |b| {
                    let mut m = mlp.clone();
                    m.params_mut().1[l] = b.clone();
                    loss_of(&m)
                },
                &mlp.biases()[l],
                1e-5,
            )
            .unwrap();
            let diff = grads.biases[l].sub(&oracle_b).unwrap().frobenius_norm();
            let rel = diff / oracle_b.frobenius_norm().max(1e-8);
            assert!(rel < 1e-4, "layer {l} bias grad rel err {rel}");
        }
        // gradient with respect to the inputs, same oracle
        let oracle_x = finite_diff_grad(
            |xx| {
                let (out, _) = mlp.forward(xx).unwrap();
                out.data()
                    .iter()
                    .zip(c.data())
                    .map(|(&o, &w)| o * w)
                    .sum::<f64>()
            },
            &x,
            1e-5,
        )
        .unwrap();
        let diff = grads.grad_in.sub(&oracle_x).unwrap().frobenius_norm();
        assert!(diff / oracle_x.frobenius_norm() < 1e-4);
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut mlp = random_mlp(&[3, 2], 31);
        let x = random_matrix(4, 3, 32);
        let (_, cache) = mlp.forward(&x).unwrap();
        mlp.params_mut().0[0].set(0, 0, 9.0);
        let err = mlp.backward(&cache, &Matrix::zeros(4, 2)).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn xavier_init_is_bounded_seeded_and_zero_biased() {
        let spec = MlpSpec::new(vec![8, 6, 4]).unwrap();
        let a = Mlp::init(spec.clone(), &mut rng(5));
        let b = Mlp::init(spec, &mut rng(5));
        assert_eq!(a, b);
        let limit0 = (6.0 / (8 + 6) as f64).sqrt();
        assert!(a.weights()[0].data().iter().all(|&v| v.abs() < limit0));
        assert!(a
            .biases()
            .iter()
            .all(|m| m.data().iter().all(|&v| v == 0.0)));
        // different seeds must differ
        let c = Mlp::init(MlpSpec::new(vec![8, 6, 4]).unwrap(), &mut rng(6));
        assert_ne!(a, c);
    }

    #[test]
    fn project_truncates_and_zeroes() {
        let s = random_matrix(4, 6, 41);
        let trunc = Matrix::from_fn(3, 6, |i, j| if i == j { 1.0 } else { 0.0 });
        let out = project(&trunc, &s).unwrap();
        assert_eq!(out.shape(), (4, 3));
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(out.get(i, j), s.get(i, j));
            }
        }
        let zero = Matrix::zeros(3, 6);
        assert!(project(&zero, &s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(project(&Matrix::zeros(3, 5), &s).is_err());
    }

    #[test]
    fn student_rejects_expanding_projection() {
        let mlp = random_mlp(&[4, 3], 43);
        assert!(StudentModel::new(mlp.clone(), Some(Matrix::zeros(3, 3)), None).is_err());
        assert!(StudentModel::new(mlp, Some(Matrix::zeros(2, 3)), None).is_ok());
    }

    #[test]
    fn embed_applies_projection_when_present() {
        let mlp = random_mlp(&[4, 3], 44);
        let x = random_matrix(5, 4, 45);
        let proj = random_matrix(2, 3, 46);
        let plain = StudentModel::new(mlp.clone(), None, None).unwrap();
        let reduced = StudentModel::new(mlp, Some(proj.clone()), None).unwrap();
        assert_eq!(plain.embed_dim(), 3);
        assert_eq!(reduced.embed_dim(), 2);
        let base = plain.embed(&x).unwrap();
        let got = reduced.embed(&x).unwrap();
        assert_eq!(got, project(&proj, &base).unwrap());
    }

    #[test]
    fn teacher_table_lookup_and_errors() {
        let rows = random_matrix(3, 4, 51);
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let teacher = TeacherModel::table(ids, rows.clone()).unwrap();
        assert_eq!(teacher.dim(), 4);
        let got = teacher
            .embed(&Matrix::zeros(2, 1), &["c".to_string(), "a".to_string()])
            .unwrap();
        assert_eq!(got.row(0), rows.row(2));
        assert_eq!(got.row(1), rows.row(0));
        assert!(teacher
            .embed(&Matrix::zeros(1, 1), &["missing".to_string()])
            .is_err());
        let dup = TeacherModel::table(vec!["a".into(), "a".into()], random_matrix(2, 4, 52));
        assert!(dup.is_err());
    }

    #[test]
    fn teacher_digest_tracks_content() {
        let rows = random_matrix(3, 4, 53);
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let t1 = TeacherModel::table(ids.clone(), rows.clone()).unwrap();
        let t2 = TeacherModel::table(ids.clone(), rows.clone()).unwrap();
        assert_eq!(t1.digest(), t2.digest());
        let mut other = rows;
        other.set(0, 0, -100.0);
        let t3 = TeacherModel::table(ids, other).unwrap();
        assert_ne!(t1.digest(), t3.digest());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mlp = random_mlp(&[6, 5, 4], 61);
        let model = StudentModel::new(
            mlp,
            Some(random_matrix(2, 4, 62)),
            Some(AlignmentHead::new(random_matrix(4, 7, 63))),
        )
        .unwrap();
        write_student(&path, &model).unwrap();
        let back = read_student(&path).unwrap();
        assert_eq!(model, back);
        // byte-for-byte stability of a rewrite
        let path2 = dir.path().join("model2.ckpt");
        write_student(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_without_optional_parts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ckpt");
        let model = StudentModel::new(random_mlp(&[3, 2], 64), None, None).unwrap();
        write_student(&path, &model).unwrap();
        assert_eq!(read_student(&path).unwrap(), model);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = StudentModel::new(random_mlp(&[3, 2], 65), None, None).unwrap();
        write_student(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // wrong magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = read_student(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("magic"));

        // unsupported version
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(read_student(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        // truncation cites the byte offset
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_student(&path).unwrap_err();
        assert!(err.to_string().contains("truncated at byte"), "{err}");

        // trailing garbage
        let mut bad = bytes.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(read_student(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }
}
