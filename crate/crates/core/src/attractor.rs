//! The meta-learned attractor regularizer.
//!
//! Each base class `k` gets a memory row `U_k = f_phi(W_a[:, k])`. Every
//! novel class attends over the base classes by cosine similarity between its
//! support mean and the base weights, and its attractor is the attended
//! memory plus a shared bias `U0`. Fast-weight columns are pulled towards
//! their attractors by a diagonal Mahalanobis penalty with log-slopes `gamma`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{BaseClassifier, ClassifierKind, FastShape, FastWeights, LossValue, Penalty};
use crate::container::{to_u32, Reader, Writer};
use crate::error::{dim_check, Error, Result};
use crate::exec::stream_rng;

pub const META_MAGIC: [u8; 4] = *b"TH01";

/// Hidden width of the memory network `f_phi`.
pub const MEMORY_HIDDEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttractorMode {
    /// Plain weight decay towards the origin; nothing is learned.
    Vanilla,
    /// A single learned attractor `U0` shared by all novel classes.
    Static,
    /// Attention over base-class memories.
    #[default]
    Attention,
}

impl std::str::FromStr for AttractorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "static" => Ok(Self::Static),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown attractor mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttractorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Static => "static",
            Self::Attention => "attention",
        })
    }
}

/// One-hidden-layer tanh MLP without biases: `f(x) = W_out tanh(W_in x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryNet {
    /// hidden x D
    pub w_in: DMatrix<f64>,
    /// D x hidden
    pub w_out: DMatrix<f64>,
}

impl MemoryNet {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w_in: DMatrix::zeros(hidden, dim),
            w_out: DMatrix::zeros(dim, hidden),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w_out * (&self.w_in * x).map(f64::tanh)
    }
}

/// Static attractors for the layers of the episodic MLP below its output:
/// every hidden unit's input weights are pulled towards `hidden_center`, every
/// novel class's hidden-to-output weights towards `out_center`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttractors {
    pub hidden_center: DVector<f64>,
    pub hidden_gamma: DVector<f64>,
    pub out_center: DVector<f64>,
    pub out_gamma: DVector<f64>,
}

/// Meta-parameters `theta = {phi, U0, gamma, tau}` (plus the MLP layer
/// attractors when the episodic classifier is an MLP).
///
/// The same structure doubles as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub phi: MemoryNet,
    pub u0: DVector<f64>,
    pub gamma: DVector<f64>,
    pub tau: f64,
    pub layers: Option<LayerAttractors>,
}

impl MetaParams {
    /// `phi ~ N(0, 0.01^2)`, `U0 = 0`, `gamma = 0`, `tau = 1`: plain unit
    /// weight decay towards the origin.
    pub fn init(dim: usize, kind: ClassifierKind, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 4);
        let mut normal = |_: usize, _: usize| 0.01 * rng.sample::<f64, _>(StandardNormal);
        let w_in = DMatrix::from_fn(MEMORY_HIDDEN, dim, &mut normal);
        let w_out = DMatrix::from_fn(dim, MEMORY_HIDDEN, &mut normal);
        Self {
            phi: MemoryNet { w_in, w_out },
            u0: DVector::zeros(dim),
            gamma: DVector::zeros(dim),
            tau: 1.0,
            layers: match kind {
                ClassifierKind::Lr => None,
                ClassifierKind::Mlp => Some(LayerAttractors {
                    hidden_center: DVector::zeros(dim),
                    hidden_gamma: DVector::zeros(dim),
                    out_center: DVector::zeros(crate::classifier::MLP_HIDDEN),
                    out_gamma: DVector::zeros(crate::classifier::MLP_HIDDEN),
                }),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.u0.len()
    }

    /// An all-zero value with the same layout.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.assign(&vec![0.0; self.len()]).expect("same length");
        z
    }

    pub fn len(&self) -> usize {
        let layers = self.layers.as_ref().map_or(0, |l| {
            l.hidden_center.len() + l.hidden_gamma.len() + l.out_center.len() + l.out_gamma.len()
        });
        self.phi.w_in.len() + self.phi.w_out.len() + 2 * self.u0.len() + 1 + layers
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened parameters: `w_in`, `w_out` (column-major), `U0`, `gamma`,
    /// `tau`, then the layer attractors if present.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(self.phi.w_in.as_slice());
        out.extend_from_slice(self.phi.w_out.as_slice());
        out.extend_from_slice(self.u0.as_slice());
        out.extend_from_slice(self.gamma.as_slice());
        out.push(self.tau);
        if let Some(l) = &self.layers {
            out.extend_from_slice(l.hidden_center.as_slice());
            out.extend_from_slice(l.hidden_gamma.as_slice());
            out.extend_from_slice(l.out_center.as_slice());
            out.extend_from_slice(l.out_gamma.as_slice());
        }
        out
    }

    /// Overwrites every parameter from a flat slice in `to_vec` order.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        dim_check("meta parameter vector", self.len(), values.len())?;
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.phi.w_in.as_mut_slice());
        take(self.phi.w_out.as_mut_slice());
        take(self.u0.as_mut_slice());
        take(self.gamma.as_mut_slice());
        take(std::slice::from_mut(&mut self.tau));
        if let Some(l) = &mut self.layers {
            take(l.hidden_center.as_mut_slice());
            take(l.hidden_gamma.as_mut_slice());
            take(l.out_center.as_mut_slice());
            take(l.out_gamma.as_mut_slice());
        }
        Ok(())
    }

    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.assign(values)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = Writer::new(w);
        out.header(&META_MAGIC)?;
        out.u32(to_u32(self.dim(), "dim")?)?;
        out.u32(to_u32(self.phi.hidden(), "memory hidden")?)?;
        out.u8(self.layers.is_some() as u8)?;
        out.f64_block(self.phi.w_in.as_slice())?;
        out.f64_block(self.phi.w_out.as_slice())?;
        out.f64_block(self.u0.as_slice())?;
        out.f64_block(self.gamma.as_slice())?;
        out.f64_block(&[self.tau])?;
        if let Some(l) = &self.layers {
            out.f64_block(l.hidden_center.as_slice())?;
            out.f64_block(l.hidden_gamma.as_slice())?;
            out.f64_block(l.out_center.as_slice())?;
            out.f64_block(l.out_gamma.as_slice())?;
        }
        out.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = Reader::new(r);
        input.header(&META_MAGIC)?;
        let d = input.u32("dim")? as usize;
        let h = input.u32("memory hidden")? as usize;
        let has_layers = match input.u8("layer flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad layer flag {f}"))),
        };
        let mut block = |what: &'static str, expected: Option<usize>| -> Result<Vec<f64>> {
            let b = input.f64_block(what)?;
            if let Some(n) = expected {
                dim_check(what, n, b.len())?;
            }
            Ok(b)
        };
        let w_in = block("phi w_in", Some(h * d))?;
        let w_out = block("phi w_out", Some(d * h))?;
        let u0 = block("U0", Some(d))?;
        let gamma = block("gamma", Some(d))?;
        let tau = block("tau", Some(1))?[0];
        let layers = if has_layers {
            let hidden_center = block("hidden center", Some(d))?;
            let hidden_gamma = block("hidden gamma", Some(d))?;
            let out_center = block("out center", None)?;
            let out_gamma = block("out gamma", Some(out_center.len()))?;
            Some(LayerAttractors {
                hidden_center: DVector::from_vec(hidden_center),
                hidden_gamma: DVector::from_vec(hidden_gamma),
                out_center: DVector::from_vec(out_center),
                out_gamma: DVector::from_vec(out_gamma),
            })
        } else {
            None
        };
        input.finish()?;
        let meta = Self {
            phi: MemoryNet {
                w_in: DMatrix::from_column_slice(h, d, &w_in),
                w_out: DMatrix::from_column_slice(d, h, &w_out),
            },
            u0: DVector::from_vec(u0),
            gamma: DVector::from_vec(gamma),
            tau,
            layers,
        };
        if !meta.is_finite() {
            return Err(Error::NonFinite("meta parameters".into()));
        }
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Memory matrix `U` (K x D): row `k` is `f_phi(W_a[:, k])`.
pub fn memory_from_base(base: &BaseClassifier, phi: &MemoryNet) -> Result<DMatrix<f64>> {
    dim_check("memory network input", phi.dim(), base.dim())?;
    let mut u = DMatrix::zeros(base.classes(), base.dim());
    for (k, col) in base.weights.column_iter().enumerate() {
        let row = phi.forward(&col.into_owned());
        u.row_mut(k).tr_copy_from(&row);
    }
    Ok(u)
}

fn cosine_matrix(class_means: &DMatrix<f64>, base: &BaseClassifier) -> Result<DMatrix<f64>> {
    dim_check("support mean dim", base.dim(), class_means.nrows())?;
    let mean_norms: Vec<f64> = class_means.column_iter().map(|c| c.norm()).collect();
    let base_norms: Vec<f64> = base.weights.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = mean_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("support mean of novel class {j} has zero norm")));
    }
    if let Some(k) = base_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("base weight column {k} has zero norm")));
    }
    let dots = class_means.tr_mul(&base.weights);
    Ok(DMatrix::from_fn(dots.nrows(), dots.ncols(), |j, k| {
        dots[(j, k)] / (mean_norms[j] * base_norms[k])
    }))
}

fn row_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Attention `A` (K' x K): row `j` is `softmax_k(tau * cos(mean_j, W_a[:, k]))`.
///
/// `class_means` holds one support mean per column (D x K').
pub fn compute_attention(
    class_means: &DMatrix<f64>,
    base: &BaseClassifier,
    tau: f64,
) -> Result<DMatrix<f64>> {
    let cos = cosine_matrix(class_means, base)?;
    Ok(row_softmax(&(cos * tau)))
}

/// `u_j = sum_k A[j, k] U_k + U0`, returned as K' x D.
pub fn assemble_attractors(
    memory: &DMatrix<f64>,
    attention: &DMatrix<f64>,
    u0: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    dim_check("attention columns", memory.nrows(), attention.ncols())?;
    dim_check("bias attractor", memory.ncols(), u0.len())?;
    let mut u = attention * memory;
    for mut row in u.row_iter_mut() {
        row += u0.transpose();
    }
    Ok(u)
}

/// `sum_j (W_b[:, j] - u_j)^T diag(exp gamma) (W_b[:, j] - u_j)` with its
/// gradient over `W_b` (column-major flattening).
pub fn regularizer(w_b: &DMatrix<f64>, u: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<LossValue> {
    dim_check("attractor rows", w_b.ncols(), u.nrows())?;
    dim_check("attractor dim", w_b.nrows(), u.ncols())?;
    dim_check("slope dim", w_b.nrows(), gamma.len())?;
    let block = CenterBlock {
        centers: u.transpose(),
        metric: gamma.map(f64::exp),
    };
    let (value, grad) = block.value_grad(w_b.as_slice());
    Ok(LossValue {
        value,
        grad: Some(DVector::from_vec(grad)),
    })
}

/// The regularizer with every attractor equal to `U0`.
pub fn static_regularizer(w_b: &DMatrix<f64>, u0: &DVector<f64>, gamma: &DVector<f64>) -> Result<LossValue> {
    let u = DMatrix::from_fn(w_b.ncols(), u0.len(), |_, i| u0[i]);
    regularizer(w_b, &u, gamma)
}

/// Centers and diagonal metric for one parameter block; column `j` of the
/// block is pulled towards column `j` of `centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBlock {
    pub centers: DMatrix<f64>,
    pub metric: DVector<f64>,
}

impl CenterBlock {
    fn len(&self) -> usize {
        self.centers.len()
    }

    fn value_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let rows = self.centers.nrows();
        let mut value = 0.0;
        let grad = w
            .iter()
            .zip(self.centers.iter())
            .enumerate()
            .map(|(idx, (w, c))| {
                let m = self.metric[idx % rows];
                let diff = w - c;
                value += m * diff * diff;
                2.0 * m * diff
            })
            .collect();
        (value, grad)
    }

    fn hvp(&self, v: &[f64]) -> Vec<f64> {
        let rows = self.centers.nrows();
        v.iter()
            .enumerate()
            .map(|(idx, v)| 2.0 * self.metric[idx % rows] * v)
            .collect()
    }

    /// Given per-entry weights `g`, returns `(d/dc, d/dgamma)` of
    /// `sum g * 2 m (w - c)` when `mixed`, or of the penalty value otherwise.
    fn backward(&self, w: &[f64], g: Option<&[f64]>) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.centers.nrows();
        let mut dc = DMatrix::zeros(rows, self.centers.ncols());
        let mut dgamma = DVector::zeros(rows);
        for (idx, (w, c)) in w.iter().zip(self.centers.iter()).enumerate() {
            let i = idx % rows;
            let m = self.metric[i];
            let diff = w - c;
            match g {
                Some(g) => {
                    dc[idx] = -2.0 * m * g[idx];
                    dgamma[i] += 2.0 * m * g[idx] * diff;
                }
                None => {
                    dc[idx] = -2.0 * m * diff;
                    dgamma[i] += m * diff * diff;
                }
            }
        }
        (dc, dgamma)
    }
}

/// A fully assembled per-episode regularizer over flattened fast weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub shape: FastShape,
    /// Blocks in flattening order: `[W_b]` for LR, `[W1, W2, Wsc]` for MLP.
    pub blocks: Vec<CenterBlock>,
}

impl Regularizer {
    fn split<'a>(&self, w: &'a [f64]) -> Vec<&'a [f64]> {
        let mut rest = w;
        self.blocks
            .iter()
            .map(|b| {
                let (head, tail) = rest.split_at(b.len());
                rest = tail;
                head
            })
            .collect()
    }
}

impl Penalty for Regularizer {
    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        dim_check("regularizer input", self.shape.len(), w.len())?;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(w.len());
        for (b, wb) in self.blocks.iter().zip(self.split(w.as_slice())) {
            let (v, g) = b.value_grad(wb);
            value += v;
            grad.extend(g);
        }
        Ok((value, DVector::from_vec(grad)))
    }

    fn hvp(&self, _w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        dim_check("regularizer direction", self.shape.len(), v.len())?;
        let mut out = Vec::with_capacity(v.len());
        for (b, vb) in self.blocks.iter().zip(self.split(v.as_slice())) {
            out.extend(b.hvp(vb));
        }
        Ok(DVector::from_vec(out))
    }
}

/// Forward quantities of the attractor pipeline for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet {
    pub mode: AttractorMode,
    /// K x D (empty unless attention mode)
    pub memory: DMatrix<f64>,
    /// K' x K (empty unless attention mode)
    pub attention: DMatrix<f64>,
    /// K' x D
    pub attractors: DMatrix<f64>,
    cosine: DMatrix<f64>,
    /// tanh activations of the memory network, hidden x K
    memory_hidden: DMatrix<f64>,
}

impl AttractorSet {
    pub fn build(
        meta: &MetaParams,
        base: &BaseClassifier,
        class_means: &DMatrix<f64>,
        mode: AttractorMode,
    ) -> Result<Self> {
        dim_check("meta dim", base.dim(), meta.dim())?;
        dim_check("support mean dim", base.dim(), class_means.nrows())?;
        let ways = class_means.ncols();
        let d = base.dim();
        match mode {
            AttractorMode::Vanilla | AttractorMode::Static => {
                let fill = if mode == AttractorMode::Static {
                    meta.u0.clone()
                } else {
                    DVector::zeros(d)
                };
                Ok(Self {
                    mode,
                    memory: DMatrix::zeros(0, d),
                    attention: DMatrix::zeros(ways, 0),
                    attractors: DMatrix::from_fn(ways, d, |_, i| fill[i]),
                    cosine: DMatrix::zeros(ways, 0),
                    memory_hidden: DMatrix::zeros(0, 0),
                })
            }
            AttractorMode::Attention => {
                let memory_hidden = (&meta.phi.w_in * &base.weights).map(f64::tanh);
                let memory = (&meta.phi.w_out * &memory_hidden).transpose();
                let cosine = cosine_matrix(class_means, base)?;
                let attention = row_softmax(&(&cosine * meta.tau));
                let attractors = assemble_attractors(&memory, &attention, &meta.u0)?;
                Ok(Self {
                    mode,
                    memory,
                    attention,
                    attractors,
                    cosine,
                    memory_hidden,
                })
            }
        }
    }

    /// Backpropagates a cotangent on the attractors (K' x D) into `grad`.
    fn backward(&self, meta: &MetaParams, base: &BaseClassifier, du: &DMatrix<f64>, grad: &mut MetaParams) {
        match self.mode {
            AttractorMode::Vanilla => {}
            AttractorMode::Static => {
                for row in du.row_iter() {
                    grad.u0 += row.transpose();
                }
            }
            AttractorMode::Attention => {
                for row in du.row_iter() {
                    grad.u0 += row.transpose();
                }
                // u = A U: dU = A^T du, dA = du U^T.
                let d_memory = self.attention.tr_mul(du);
                let d_att = du * self.memory.transpose();
                // Row softmax backward, then through the tau scaling.
                let mut d_tau = 0.0;
                for j in 0..self.attention.nrows() {
                    let a = self.attention.row(j);
                    let inner = a.dot(&d_att.row(j));
                    for k in 0..self.attention.ncols() {
                        let d_logit = a[k] * (d_att[(j, k)] - inner);
                        d_tau += d_logit * self.cosine[(j, k)];
                    }
                }
                grad.tau += d_tau;
                // memory^T = W_out H with H = tanh(W_in W_a).
                let d_mem_t = d_memory.transpose();
                grad.phi.w_out += &d_mem_t * self.memory_hidden.transpose();
                let d_hidden = meta.phi.w_out.tr_mul(&d_mem_t);
                let d_pre = d_hidden.zip_map(&self.memory_hidden, |g, h| g * (1.0 - h * h));
                grad.phi.w_in += d_pre * base.weights.transpose();
            }
        }
    }
}

/// The regularizer of one episode together with what is needed to
/// differentiate it with respect to the meta-parameters.
#[derive(Debug, Clone)]
pub struct EpisodeRegularizer<'a> {
    pub meta: &'a MetaParams,
    pub base: &'a BaseClassifier,
    pub set: AttractorSet,
    pub penalty: Regularizer,
}

impl<'a> EpisodeRegularizer<'a> {
    /// `vanilla_decay` is the weight-decay coefficient of the vanilla mode.
    pub fn new(
        meta: &'a MetaParams,
        base: &'a BaseClassifier,
        class_means: &DMatrix<f64>,
        mode: AttractorMode,
        shape: FastShape,
        vanilla_decay: f64,
    ) -> Result<Self> {
        dim_check("fast weight ways", class_means.ncols(), shape.ways)?;
        dim_check("fast weight dim", base.dim(), shape.dim)?;
        let set = AttractorSet::build(meta, base, class_means, mode)?;
        let out_metric = match mode {
            AttractorMode::Vanilla => DVector::from_element(shape.dim, vanilla_decay),
            _ => meta.gamma.map(f64::exp),
        };
        let out = CenterBlock {
            centers: set.attractors.transpose(),
            metric: out_metric,
        };
        let blocks = match shape.kind {
            ClassifierKind::Lr => vec![out],
            ClassifierKind::Mlp => {
                let (h, k, d) = (shape.hidden, shape.ways, shape.dim);
                let hidden = if mode == AttractorMode::Vanilla {
                    CenterBlock {
                        centers: DMatrix::zeros(d, h),
                        metric: DVector::from_element(d, vanilla_decay),
                    }
                } else {
                    let l = meta
                        .layers
                        .as_ref()
                        .ok_or_else(|| Error::Config("MLP needs layer attractors in meta-parameters".into()))?;
                    dim_check("hidden attractor dim", d, l.hidden_center.len())?;
                    dim_check("output attractor dim", h, l.out_center.len())?;
                    CenterBlock {
                        centers: DMatrix::from_fn(d, h, |i, _| l.hidden_center[i]),
                        metric: l.hidden_gamma.map(f64::exp),
                    }
                };
                let mid = if mode == AttractorMode::Vanilla {
                    CenterBlock {
                        centers: DMatrix::zeros(h, k),
                        metric: DVector::from_element(h, vanilla_decay),
                    }
                } else {
                    let l = meta.layers.as_ref().expect("checked above");
                    CenterBlock {
                        centers: DMatrix::from_fn(h, k, |i, _| l.out_center[i]),
                        metric: l.out_gamma.map(f64::exp),
                    }
                };
                vec![hidden, mid, out]
            }
        };
        Ok(Self {
            meta,
            base,
            set,
            penalty: Regularizer { shape, blocks },
        })
    }

    pub fn mode(&self) -> AttractorMode {
        self.set.mode
    }

    fn backward(&self, w: &DVector<f64>, g: Option<&DVector<f64>>) -> Result<MetaParams> {
        dim_check("regularizer input", self.penalty.shape.len(), w.len())?;
        let mut grad = self.meta.zeros_like();
        if self.mode() == AttractorMode::Vanilla {
            return Ok(grad);
        }
        let ws = self.penalty.split(w.as_slice());
        let gs = g.map(|g| self.penalty.split(g.as_slice()));
        let mut parts = Vec::with_capacity(ws.len());
        for (i, (b, wb)) in self.penalty.blocks.iter().zip(&ws).enumerate() {
            parts.push(b.backward(wb, gs.as_ref().map(|gs| gs[i])));
        }
        let (dc_out, dgamma_out) = parts.pop().expect("output block");
        grad.gamma += dgamma_out;
        self.set
            .backward(self.meta, self.base, &dc_out.transpose(), &mut grad);
        if let [(dc_hidden, dg_hidden), (dc_mid, dg_mid)] = parts.as_slice() {
            let l = grad.layers.as_mut().expect("mlp layers");
            l.hidden_center += dc_hidden.column_sum();
            l.hidden_gamma += dg_hidden;
            l.out_center += dc_mid.column_sum();
            l.out_gamma += dg_mid;
        }
        Ok(grad)
    }

    /// `dR/dtheta` at fixed fast weights.
    pub fn meta_grad(&self, w: &DVector<f64>) -> Result<MetaParams> {
        self.backward(w, None)
    }

    /// `d/dtheta [g . grad_W R(W, theta)]`, the mixed second derivative
    /// contracted with `g`. Only the regularizer couples theta to the inner
    /// gradient, so this is also the mixed term of the episodic objective.
    pub fn mixed_vjp(&self, w: &DVector<f64>, g: &DVector<f64>) -> Result<MetaParams> {
        dim_check("mixed vjp cotangent", w.len(), g.len())?;
        self.backward(w, Some(g))
    }

    /// Regularizer value at `fw`.
    pub fn value(&self, fw: &FastWeights) -> Result<f64> {
        Ok(self.penalty.value_grad(&fw.flatten())?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_phi_gives_zero_memory() {
        let base = BaseClassifier::new(DMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 - 2.0)).unwrap();
        let phi = MemoryNet::zeros(3, MEMORY_HIDDEN);
        let u = memory_from_base(&base, &phi).unwrap();
        assert_eq!(u.shape(), (4, 3));
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memory_matches_hand_mlp() {
        // D = 2, hidden = 1, K = 2.
        let base = BaseClassifier::new(DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.5, -1.0])).unwrap();
        let phi = MemoryNet {
            w_in: DMatrix::from_row_slice(1, 2, &[0.2, 0.4]),
            w_out: DMatrix::from_column_slice(2, 1, &[1.0, -3.0]),
        };
        let u = memory_from_base(&base, &phi).unwrap();
        let h0 = (0.2f64).tanh();
        let h1 = (0.2 * 0.5 - 0.4f64).tanh();
        assert_abs_diff_eq!(u[(0, 0)], h0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[(0, 1)], -3.0 * h0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[(1, 0)], h1, epsilon = 1e-15);
        assert_abs_diff_eq!(u[(1, 1)], -3.0 * h1, epsilon = 1e-15);
        assert!(memory_from_base(&base, &MemoryNet::zeros(3, 2)).is_err());
    }

    #[test]
    fn attention_cases() {
        let base = BaseClassifier::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        let means = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -3.0, 2.0]);
        let a = compute_attention(&means, &base, 4.0).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let base = BaseClassifier::new(DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.0, 5.0])).unwrap();
        let means = DMatrix::from_column_slice(2, 1, &[3.0, 0.0]);
        let a = compute_attention(&means, &base, 0.0).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 0.5, epsilon = 1e-15);
        let a = compute_attention(&means, &base, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(a[(0, 0)], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(a[(0, 1)], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(a[(0, 0)], 0.7311, epsilon = 1e-4);

        let zero = DMatrix::zeros(2, 1);
        assert!(matches!(compute_attention(&zero, &base, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn assemble_cases() {
        let memory = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[0.25, 0.75]);
        let u0 = DVector::from_vec(vec![1.0, 1.0]);
        let u = assemble_attractors(&memory, &a, &u0).unwrap();
        assert_eq!(u.as_slice(), &[1.25, 1.75]);

        let one_hot = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let u = assemble_attractors(&memory, &one_hot, &u0).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 2.0]);

        let u = assemble_attractors(&DMatrix::zeros(2, 2), &a, &u0).unwrap();
        assert_eq!(u.as_slice(), u0.as_slice());
    }

    #[test]
    fn regularizer_cases() {
        let u = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let w = u.transpose();
        assert_eq!(regularizer(&w, &u, &DVector::zeros(2)).unwrap().value, 0.0);

        let w = DMatrix::from_column_slice(2, 1, &[1.5, -1.0]);
        assert_abs_diff_eq!(regularizer(&w, &u, &DVector::zeros(2)).unwrap().value, 1.0);

        let gamma = DVector::from_vec(vec![2f64.ln(), 3f64.ln()]);
        let w = DMatrix::from_column_slice(2, 1, &[1.5, -2.0]);
        let r = regularizer(&w, &u, &gamma).unwrap();
        assert_abs_diff_eq!(r.value, 5.0, epsilon = 1e-12);
        let g = r.grad.unwrap();
        assert_abs_diff_eq!(g[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -6.0, epsilon = 1e-12);
    }

    #[test]
    fn static_regularizer_cases() {
        let u0 = DVector::from_vec(vec![0.5, -1.0]);
        let w = DMatrix::from_column_slice(2, 2, &[0.5, -1.0, 0.5, -1.0]);
        assert_eq!(static_regularizer(&w, &u0, &DVector::zeros(2)).unwrap().value, 0.0);
        let w = DMatrix::from_column_slice(2, 1, &[0.5, 0.0]);
        assert_abs_diff_eq!(static_regularizer(&w, &u0, &DVector::zeros(2)).unwrap().value, 1.0);
        let gamma = DVector::from_vec(vec![2f64.ln(), 3f64.ln()]);
        let w = DMatrix::from_column_slice(2, 1, &[1.5, -2.0]);
        assert_abs_diff_eq!(static_regularizer(&w, &u0, &gamma).unwrap().value, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn meta_params_round_trip() {
        for kind in [ClassifierKind::Lr, ClassifierKind::Mlp] {
            let mut meta = MetaParams::init(3, kind, 9);
            meta.tau = -0.75;
            let mut buf = Vec::new();
            meta.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"TH01");
            assert_eq!(MetaParams::read_from(buf.as_slice()).unwrap(), meta);
            let flat = meta.to_vec();
            assert_eq!(meta.with_values(&flat).unwrap(), meta);
            assert_eq!(flat.len(), meta.len());
            let cut = &buf[..buf.len() - 1];
            assert!(matches!(MetaParams::read_from(cut), Err(Error::Truncated(_))));
        }
    }

    #[test]
    fn mode_parse() {
        assert_eq!("static".parse::<AttractorMode>().unwrap(), AttractorMode::Static);
        assert!("dynamic".parse::<AttractorMode>().is_err());
        assert_eq!(AttractorMode::Attention.to_string(), "attention");
    }
}
