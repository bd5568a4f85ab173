//! Base classifier pretraining, episodic fast-weight models and the joint
//! base+novel softmax losses with analytic gradients and Hessian-vector
//! products.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{to_u32, Reader, Writer};
use crate::embeddings::LabeledExample;
use crate::error::{dim_check, Error, Result};
use crate::exec::stream_rng;
use crate::inner_solver::Objective;

pub const BASE_MAGIC: [u8; 4] = *b"WA01";

/// Hidden width of the episodic MLP.
pub const MLP_HIDDEN: usize = 40;

/// Slow weights `W_a` (D x K), one column per base class.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseClassifier {
    pub weights: DMatrix<f64>,
}

impl BaseClassifier {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base weights".into()));
        }
        Ok(Self { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
        self.weights.tr_mul(x)
    }

    pub fn accuracy(&self, data: &[LabeledExample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|e| argmax(self.logits(&e.feature).as_slice()) == e.label)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Writes `WA01`, version, D, K and a row-major D x K block of f64.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = Writer::new(w);
        out.header(&BASE_MAGIC)?;
        out.u32(to_u32(self.dim(), "dim")?)?;
        out.u32(to_u32(self.classes(), "classes")?)?;
        let row_major: Vec<f64> = self.weights.transpose().as_slice().to_vec();
        out.f64_block(&row_major)?;
        out.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = Reader::new(r);
        input.header(&BASE_MAGIC)?;
        let d = input.u32("dim")? as usize;
        let k = input.u32("classes")? as usize;
        let block = input.f64_block("weights")?;
        input.finish()?;
        dim_check("base weight block", d * k, block.len())?;
        if d == 0 || k == 0 {
            return Err(Error::Format("empty base classifier".into()));
        }
        Self::new(DMatrix::from_row_slice(d, k, &block))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Full-batch gradient descent on K-way softmax cross-entropy with an
/// `0.5 * weight_decay * |W|^2` penalty.
pub fn pretrain_base(
    data: &[LabeledExample],
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<BaseClassifier> {
    let first = data
        .first()
        .ok_or_else(|| Error::InsufficientData("empty base dataset".into()))?;
    let d = first.feature.len();
    let k = data.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; k];
    for e in data {
        dim_check("base example", d, e.feature.len())?;
        counts[e.label] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("base class {c} is empty")));
    }
    if !(lr > 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Config("lr must be positive, weight decay non-negative".into()));
    }

    let mut rng = stream_rng(seed, 0);
    let mut w = DMatrix::from_fn(d, k, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let n = data.len() as f64;
    for epoch in 0..epochs {
        let mut grad = &w * weight_decay;
        let mut loss = 0.5 * weight_decay * w.norm_squared();
        for e in data {
            let z = w.tr_mul(&e.feature);
            let p = softmax(z.as_slice());
            loss -= p[e.label].ln() / n;
            for (c, &pc) in p.iter().enumerate() {
                let r = (pc - if c == e.label { 1.0 } else { 0.0 }) / n;
                grad.column_mut(c).axpy(r, &e.feature, 1.0);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
        }
        w -= grad * lr;
    }
    BaseClassifier::new(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Lr,
    Mlp,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Self::Lr),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown classifier kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lr => "lr",
            Self::Mlp => "mlp",
        })
    }
}

/// Dimensions of the per-episode classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FastShape {
    pub kind: ClassifierKind,
    pub dim: usize,
    pub ways: usize,
    pub hidden: usize,
}

impl FastShape {
    pub fn lr(dim: usize, ways: usize) -> Self {
        Self {
            kind: ClassifierKind::Lr,
            dim,
            ways,
            hidden: 0,
        }
    }

    pub fn mlp(dim: usize, ways: usize, hidden: usize) -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            dim,
            ways,
            hidden,
        }
    }

    pub fn new(kind: ClassifierKind, dim: usize, ways: usize) -> Self {
        match kind {
            ClassifierKind::Lr => Self::lr(dim, ways),
            ClassifierKind::Mlp => Self::mlp(dim, ways, MLP_HIDDEN),
        }
    }

    pub fn len(&self) -> usize {
        match self.kind {
            ClassifierKind::Lr => self.dim * self.ways,
            ClassifierKind::Mlp => {
                self.dim * self.hidden + self.hidden * self.ways + self.dim * self.ways
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(&self) -> FastWeights {
        self.unflatten(&vec![0.0; self.len()])
            .expect("zero vector has the right length")
    }

    /// Zeros for LR; N(0, 0.01^2) entries for the MLP.
    pub fn init(&self, seed: u64) -> FastWeights {
        match self.kind {
            ClassifierKind::Lr => self.zeros(),
            ClassifierKind::Mlp => {
                let mut rng = stream_rng(seed, 3);
                let values: Vec<f64> = (0..self.len())
                    .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                self.unflatten(&values).expect("length matches")
            }
        }
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<FastWeights> {
        dim_check("fast weight vector", self.len(), values.len())?;
        let (d, h, k) = (self.dim, self.hidden, self.ways);
        Ok(match self.kind {
            ClassifierKind::Lr => FastWeights::Lr {
                w: DMatrix::from_column_slice(d, k, values),
            },
            ClassifierKind::Mlp => {
                let (w1, rest) = values.split_at(d * h);
                let (w2, wsc) = rest.split_at(h * k);
                FastWeights::Mlp {
                    w1: DMatrix::from_column_slice(d, h, w1),
                    w2: DMatrix::from_column_slice(h, k, w2),
                    wsc: DMatrix::from_column_slice(d, k, wsc),
                }
            }
        })
    }
}

/// Per-episode classifier parameters `W_b`.
#[derive(Debug, Clone, PartialEq)]
pub enum FastWeights {
    /// Logistic regression, `W_b` is D x K'.
    Lr { w: DMatrix<f64> },
    /// `W2^T tanh(W1^T x) + Wsc^T x`.
    Mlp {
        w1: DMatrix<f64>,
        w2: DMatrix<f64>,
        wsc: DMatrix<f64>,
    },
}

impl FastWeights {
    pub fn shape(&self) -> FastShape {
        match self {
            FastWeights::Lr { w } => FastShape::lr(w.nrows(), w.ncols()),
            FastWeights::Mlp { w1, w2, .. } => FastShape::mlp(w1.nrows(), w2.ncols(), w1.ncols()),
        }
    }

    /// Column-major concatenation of the parameter blocks.
    pub fn flatten(&self) -> DVector<f64> {
        match self {
            FastWeights::Lr { w } => DVector::from_column_slice(w.as_slice()),
            FastWeights::Mlp { w1, w2, wsc } => DVector::from_iterator(
                w1.len() + w2.len() + wsc.len(),
                w1.iter().chain(w2.iter()).chain(wsc.iter()).copied(),
            ),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Novel-class logits of the episodic classifier.
pub fn fast_forward(fw: &FastWeights, x: &DVector<f64>) -> Result<DVector<f64>> {
    let shape = fw.shape();
    dim_check("fast_forward input", shape.dim, x.len())?;
    Ok(match fw {
        FastWeights::Lr { w } => w.tr_mul(x),
        FastWeights::Mlp { w1, w2, wsc } => {
            let a = w1.tr_mul(x).map(f64::tanh);
            w2.tr_mul(&a) + wsc.tr_mul(x)
        }
    })
}

/// `[W_a^T x, h(x; W_b)]`.
pub fn joint_logits(
    base: &BaseClassifier,
    fw: &FastWeights,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    dim_check("joint_logits input", base.dim(), x.len())?;
    let novel = fast_forward(fw, x)?;
    Ok(DVector::from_iterator(
        base.classes() + novel.len(),
        base.logits(x).iter().chain(novel.iter()).copied(),
    ))
}

pub fn joint_predict(
    base: &BaseClassifier,
    fw: &FastWeights,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let z = joint_logits(base, fw, x)?;
    Ok(DVector::from_vec(softmax(z.as_slice())))
}

/// Loss value with an optional gradient over the flattened fast weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<DVector<f64>>,
}

/// A penalty on the flattened fast weights.
pub trait Penalty {
    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;
}

/// The zero penalty.
pub struct NoPenalty;

impl Penalty for NoPenalty {
    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((0.0, DVector::zeros(w.len())))
    }

    fn hvp(&self, _w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(v.len()))
    }
}

/// Mean joint cross-entropy over a labeled set as a function of the flattened
/// fast weights. With `mask_base` the softmax only spans the novel logits.
#[derive(Clone, Copy)]
pub struct JointCrossEntropy<'a> {
    pub base: &'a BaseClassifier,
    pub shape: FastShape,
    pub examples: &'a [LabeledExample],
    pub mask_base: bool,
}

/// Per-example forward quantities.
struct Forward {
    /// Probabilities over the active classes (novel block last).
    probs: Vec<f64>,
    /// Offset of the novel block inside `probs`.
    offset: usize,
    /// Hidden activations for the MLP.
    hidden: Option<DVector<f64>>,
    loss: f64,
}

impl<'a> JointCrossEntropy<'a> {
    pub fn new(
        base: &'a BaseClassifier,
        shape: FastShape,
        examples: &'a [LabeledExample],
        mask_base: bool,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InsufficientData("empty example set".into()));
        }
        dim_check("classifier dim", base.dim(), shape.dim)?;
        let k = base.classes();
        for e in examples {
            dim_check("example feature", shape.dim, e.feature.len())?;
            if e.label >= k + shape.ways || (mask_base && e.label < k) {
                return Err(Error::Config(format!("label {} out of range", e.label)));
            }
        }
        Ok(Self {
            base,
            shape,
            examples,
            mask_base,
        })
    }

    fn forward(&self, fw: &FastWeights, e: &LabeledExample) -> Forward {
        let k = self.base.classes();
        let (novel, hidden) = match fw {
            FastWeights::Lr { w } => (w.tr_mul(&e.feature), None),
            FastWeights::Mlp { w1, w2, wsc } => {
                let a = w1.tr_mul(&e.feature).map(f64::tanh);
                (w2.tr_mul(&a) + wsc.tr_mul(&e.feature), Some(a))
            }
        };
        let (logits, offset, target) = if self.mask_base {
            (novel.as_slice().to_vec(), 0, e.label - k)
        } else {
            let mut z = self.base.logits(&e.feature).as_slice().to_vec();
            z.extend_from_slice(novel.as_slice());
            (z, k, e.label)
        };
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let probs = logits.iter().map(|z| (z - lse).exp()).collect();
        Forward {
            probs,
            offset,
            hidden,
            loss: lse - logits[target],
        }
    }

    /// Residual `p - onehot` restricted to the novel block.
    fn novel_residual(&self, f: &Forward, label: usize) -> DVector<f64> {
        let k = self.base.classes();
        DVector::from_fn(self.shape.ways, |j, _| {
            f.probs[f.offset + j] - if label == k + j { 1.0 } else { 0.0 }
        })
    }

    pub fn value(&self, w: &DVector<f64>) -> Result<f64> {
        let fw = self.shape.unflatten(w.as_slice())?;
        let n = self.examples.len() as f64;
        let v: f64 = self.examples.iter().map(|e| self.forward(&fw, e).loss).sum::<f64>() / n;
        finite(v, "cross-entropy")
    }

    pub fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let fw = self.shape.unflatten(w.as_slice())?;
        let n = self.examples.len() as f64;
        let mut loss = 0.0;
        let mut grad = self.shape.zeros();
        for e in self.examples {
            let f = self.forward(&fw, e);
            loss += f.loss / n;
            let r = self.novel_residual(&f, e.label) / n;
            let x = &e.feature;
            match (&fw, &mut grad) {
                (FastWeights::Lr { .. }, FastWeights::Lr { w: gw }) => {
                    gw.ger(1.0, x, &r, 1.0);
                }
                (FastWeights::Mlp { w2, .. }, FastWeights::Mlp { w1: g1, w2: g2, wsc: gsc }) => {
                    let a = f.hidden.as_ref().expect("mlp hidden");
                    g2.ger(1.0, a, &r, 1.0);
                    gsc.ger(1.0, x, &r, 1.0);
                    let da = w2 * &r;
                    let dpre = da.zip_map(a, |g, a| g * (1.0 - a * a));
                    g1.ger(1.0, x, &dpre, 1.0);
                }
                _ => unreachable!("gradient shares the parameter shape"),
            }
        }
        Ok((finite(loss, "cross-entropy")?, grad.flatten()))
    }

    /// Exact Hessian-vector product (R-operator through the forward pass).
    pub fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let fw = self.shape.unflatten(w.as_slice())?;
        let dir = self.shape.unflatten(v.as_slice())?;
        let n = self.examples.len() as f64;
        let mut out = self.shape.zeros();
        for e in self.examples {
            let f = self.forward(&fw, e);
            let x = &e.feature;
            let p_novel = DVector::from_column_slice(&f.probs[f.offset..f.offset + self.shape.ways]);
            // Directional derivative of the novel logits; base logits are constant.
            let (dz, da) = match (&fw, &dir) {
                (FastWeights::Lr { .. }, FastWeights::Lr { w: vw }) => (vw.tr_mul(x), None),
                (
                    FastWeights::Mlp { w2, .. },
                    FastWeights::Mlp {
                        w1: v1,
                        w2: v2,
                        wsc: vsc,
                    },
                ) => {
                    let a = f.hidden.as_ref().expect("mlp hidden");
                    let da = v1.tr_mul(x).zip_map(a, |d, a| d * (1.0 - a * a));
                    (v2.tr_mul(a) + w2.tr_mul(&da) + vsc.tr_mul(x), Some(da))
                }
                _ => unreachable!(),
            };
            // R{p} on the novel block: p * dz - p (p . dz).
            let pdz = p_novel.dot(&dz);
            let dr = p_novel.zip_map(&dz, |p, d| p * (d - pdz)) / n;
            match (&fw, &dir, &mut out) {
                (FastWeights::Lr { .. }, _, FastWeights::Lr { w: ow }) => {
                    ow.ger(1.0, x, &dr, 1.0);
                }
                (
                    FastWeights::Mlp { w2, .. },
                    FastWeights::Mlp { w2: v2, .. },
                    FastWeights::Mlp {
                        w1: o1,
                        w2: o2,
                        wsc: osc,
                    },
                ) => {
                    let a = f.hidden.as_ref().expect("mlp hidden");
                    let da = da.expect("mlp direction");
                    let r = self.novel_residual(&f, e.label) / n;
                    o2.ger(1.0, &da, &r, 1.0);
                    o2.ger(1.0, a, &dr, 1.0);
                    osc.ger(1.0, x, &dr, 1.0);
                    let back = w2 * &r;
                    let dback = v2 * &r + w2 * &dr;
                    let dpre = DVector::from_fn(a.len(), |i, _| {
                        let s = 1.0 - a[i] * a[i];
                        s * dback[i] - 2.0 * a[i] * da[i] * back[i]
                    });
                    o1.ger(1.0, x, &dpre, 1.0);
                }
                _ => unreachable!(),
            }
        }
        Ok(out.flatten())
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Support cross-entropy plus a penalty: the episodic objective.
pub struct EpisodicObjective<'a, P: Penalty + ?Sized> {
    pub loss: JointCrossEntropy<'a>,
    pub penalty: &'a P,
}

impl<'a, P: Penalty + ?Sized> EpisodicObjective<'a, P> {
    pub fn new(
        base: &'a BaseClassifier,
        shape: FastShape,
        support: &'a [LabeledExample],
        penalty: &'a P,
        mask_base: bool,
    ) -> Result<Self> {
        let k = base.classes();
        if support.iter().any(|e| e.label < k) {
            return Err(Error::Config("support contains base labels".into()));
        }
        Ok(Self {
            loss: JointCrossEntropy::new(base, shape, support, mask_base)?,
            penalty,
        })
    }
}

impl<P: Penalty + ?Sized> Objective for EpisodicObjective<'_, P> {
    fn dim(&self) -> usize {
        self.loss.shape.len()
    }

    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (l, g) = self.loss.value_grad(w)?;
        let (r, gr) = self.penalty.value_grad(w)?;
        Ok((l + r, g + gr))
    }

    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.loss.hvp(w, v)? + self.penalty.hvp(w, v)?)
    }
}

impl Objective for JointCrossEntropy<'_> {
    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        JointCrossEntropy::value_grad(self, w)
    }

    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        JointCrossEntropy::hvp(self, w, v)
    }
}

/// Episodic objective value and gradient at `fw`.
pub fn episodic_loss<P: Penalty + ?Sized>(
    fw: &FastWeights,
    support: &[LabeledExample],
    base: &BaseClassifier,
    penalty: &P,
) -> Result<LossValue> {
    let obj = EpisodicObjective::new(base, fw.shape(), support, penalty, false)?;
    let (value, grad) = obj.value_grad(&fw.flatten())?;
    Ok(LossValue {
        value,
        grad: Some(grad),
    })
}

/// Mean joint cross-entropy on the joint query set.
pub fn query_loss(
    base: &BaseClassifier,
    fw: &FastWeights,
    joint_query: &[LabeledExample],
) -> Result<LossValue> {
    let ce = JointCrossEntropy::new(base, fw.shape(), joint_query, false)?;
    let (value, grad) = ce.value_grad(&fw.flatten())?;
    Ok(LossValue {
        value,
        grad: Some(grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn base_from(cols: &[&[f64]]) -> BaseClassifier {
        let d = cols[0].len();
        BaseClassifier::new(DMatrix::from_fn(d, cols.len(), |i, j| cols[j][i])).unwrap()
    }

    #[test]
    fn lr_forward_zero_and_hand_product() {
        let fw = FastShape::lr(3, 2).zeros();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(fast_forward(&fw, &x).unwrap(), DVector::zeros(2));

        // Columns (1,0) and (0,2).
        let fw = FastWeights::Lr {
            w: DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
        };
        let z = fast_forward(&fw, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(z.as_slice(), &[3.0, 8.0]);
        assert!(fast_forward(&fw, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn mlp_shortcut_path() {
        let shape = FastShape::mlp(4, 2, 5);
        let mut fw = shape.zeros();
        if let FastWeights::Mlp { wsc, .. } = &mut fw {
            wsc[(0, 0)] = 1.0;
            wsc[(1, 1)] = 1.0;
        }
        let x = DVector::from_vec(vec![0.3, -1.2, 5.0, 7.0]);
        assert_eq!(fast_forward(&fw, &x).unwrap().as_slice(), &[0.3, -1.2]);
    }

    #[test]
    fn joint_prediction_cases() {
        let base = BaseClassifier::new(DMatrix::zeros(2, 3)).unwrap();
        let fw = FastShape::lr(2, 2).zeros();
        let p = joint_predict(&base, &fw, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }

        // K=1, K'=1, logits (ln 3, 0).
        let base = base_from(&[&[3f64.ln()]]);
        let fw = FastShape::lr(1, 1).zeros();
        let p = joint_predict(&base, &fw, &DVector::from_vec(vec![1.0])).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -2.0, 4.5, 1.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn episodic_loss_hand_cases() {
        // All-zero logits: ln(K + K').
        let base = BaseClassifier::new(DMatrix::zeros(2, 3)).unwrap();
        let fw = FastShape::lr(2, 2).zeros();
        let support = vec![LabeledExample::new(DVector::from_vec(vec![1.0, 2.0]), 3)];
        let l = episodic_loss(&fw, &support, &base, &NoPenalty).unwrap();
        assert_abs_diff_eq!(l.value, 5f64.ln(), epsilon = 1e-12);

        // Logits (0, ln 3) with the novel label: -ln 0.75.
        let base = base_from(&[&[0.0]]);
        let fw = FastWeights::Lr {
            w: DMatrix::from_element(1, 1, 3f64.ln()),
        };
        let support = vec![LabeledExample::new(DVector::from_vec(vec![1.0]), 1)];
        let l = episodic_loss(&fw, &support, &base, &NoPenalty).unwrap();
        assert_abs_diff_eq!(l.value, -(0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 0.28768207245178, epsilon = 1e-12);

        // Near-certain prediction leaves only the penalty.
        let fw = FastWeights::Lr {
            w: DMatrix::from_element(1, 1, 60.0),
        };
        let l = episodic_loss(&fw, &support, &base, &NoPenalty).unwrap();
        assert!(l.value < 1e-20);
    }

    #[test]
    fn query_loss_includes_base_labels() {
        let base = base_from(&[&[3f64.ln()]]);
        let fw = FastShape::lr(1, 1).zeros();
        let q = vec![
            LabeledExample::new(DVector::from_vec(vec![1.0]), 0),
            LabeledExample::new(DVector::from_vec(vec![1.0]), 1),
        ];
        let l = query_loss(&base, &fw, &q).unwrap();
        let expected = -0.5 * (0.75f64.ln() + 0.25f64.ln());
        assert_abs_diff_eq!(l.value, expected, epsilon = 1e-12);
        assert!(query_loss(&base, &fw, &[]).is_err());
    }

    #[test]
    fn support_rejects_base_labels() {
        let base = base_from(&[&[1.0]]);
        let fw = FastShape::lr(1, 1).zeros();
        let s = vec![LabeledExample::new(DVector::from_vec(vec![1.0]), 0)];
        assert!(episodic_loss(&fw, &s, &base, &NoPenalty).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn base_classifier_round_trip() {
        let base = base_from(&[&[1.0, 2.0, 3.0], &[-0.5, 1e-300, 7.25]]);
        let mut buf = Vec::new();
        base.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WA01");
        assert_eq!(BaseClassifier::read_from(buf.as_slice()).unwrap(), base);
        buf[1] = b'!';
        assert!(matches!(
            BaseClassifier::read_from(buf.as_slice()),
            Err(Error::Magic { .. })
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let shape = FastShape::mlp(3, 2, 4);
        let fw = shape.init(5);
        assert_eq!(shape.unflatten(fw.flatten().as_slice()).unwrap(), fw);
        assert_eq!(fw.flatten().len(), shape.len());
        assert!(shape.unflatten(&[0.0; 3]).is_err());
    }
}
