//! Glue between an episode, the frozen base classifier and the
//! meta-parameters: the bilevel problem whose inner level is the episodic
//! objective and whose outer level is the joint query loss.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attractor::{AttractorMode, EpisodeRegularizer, MetaParams};
use crate::classifier::{
    BaseClassifier, ClassifierKind, EpisodicObjective, FastShape, FastWeights, JointCrossEntropy,
    Penalty,
};
use crate::embeddings::{Episode, LabeledExample};
use crate::error::Result;
use crate::implicit_grad::Bilevel;
use crate::inner_solver::Objective;

/// What kind of episodic model is trained and how it is regularized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ClassifierKind,
    pub mode: AttractorMode,
    /// Weight-decay coefficient used by the vanilla mode.
    pub vanilla_decay: f64,
    /// Restrict the support softmax to the novel logits.
    pub mask_base_in_support: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Lr,
            mode: AttractorMode::Attention,
            vanilla_decay: 1.0,
            mask_base_in_support: false,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ClassifierKind, mode: AttractorMode) -> Self {
        Self {
            kind,
            mode,
            ..Self::default()
        }
    }
}

/// One episode viewed as a bilevel problem over the meta-parameters.
pub struct EpisodeBilevel<'a> {
    pub reg: EpisodeRegularizer<'a>,
    pub shape: FastShape,
    base: &'a BaseClassifier,
    support: &'a [LabeledExample],
    query: Vec<LabeledExample>,
    mask_base: bool,
    init: DVector<f64>,
}

impl<'a> EpisodeBilevel<'a> {
    /// `init_seed` seeds the MLP fast-weight initialization (LR starts at 0).
    pub fn new(
        meta: &'a MetaParams,
        base: &'a BaseClassifier,
        episode: &'a Episode,
        model: &ModelConfig,
        init_seed: u64,
    ) -> Result<Self> {
        let shape = FastShape::new(model.kind, base.dim(), episode.ways);
        let means = episode.support_means()?;
        let reg = EpisodeRegularizer::new(meta, base, &means, model.mode, shape, model.vanilla_decay)?;
        // Validate both example sets once up front.
        let query = episode.joint_query();
        JointCrossEntropy::new(base, shape, &query, false)?;
        EpisodicObjective::new(base, shape, &episode.support, &reg.penalty, model.mask_base_in_support)?;
        Ok(Self {
            reg,
            shape,
            base,
            support: &episode.support,
            query,
            mask_base: model.mask_base_in_support,
            init: shape.init(init_seed).flatten(),
        })
    }

    pub fn inner(&self) -> EpisodicObjective<'_, dyn Penalty + '_> {
        EpisodicObjective {
            loss: JointCrossEntropy {
                base: self.base,
                shape: self.shape,
                examples: self.support,
                mask_base: self.mask_base,
            },
            penalty: &self.reg.penalty,
        }
    }

    pub fn query(&self) -> JointCrossEntropy<'_> {
        JointCrossEntropy {
            base: self.base,
            shape: self.shape,
            examples: &self.query,
            mask_base: false,
        }
    }

    pub fn fast_weights(&self, w: &DVector<f64>) -> Result<FastWeights> {
        self.shape.unflatten(w.as_slice())
    }
}

impl Bilevel for EpisodeBilevel<'_> {
    fn inner_dim(&self) -> usize {
        self.shape.len()
    }

    fn meta_dim(&self) -> usize {
        self.reg.meta.len()
    }

    fn inner_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.inner().value_grad(w)
    }

    fn inner_hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner().hvp(w, v)
    }

    fn mixed_vjp(&self, w: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.reg.mixed_vjp(w, g)?.to_vec()))
    }

    fn outer_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.query().value_grad(w)
    }

    fn initial_point(&self) -> DVector<f64> {
        self.init.clone()
    }
}
