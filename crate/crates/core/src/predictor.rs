//! Two-layer MLP over the normalized similarities, and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{log1p_exp, logistic, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// `[hidden, inputs]`
    pub w1: Param,
    /// `[hidden]`
    pub b: Param,
    /// `[1, hidden]`
    pub w2: Param,
}

impl MlpParams {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: Param::glorot(&[hidden, inputs], inputs, hidden, rng),
            b: Param::zeros(&[hidden]),
            w2: Param::glorot(&[1, hidden], hidden, 1, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn bind(&self, graph: &Graph, requires_grad: bool) -> Result<MlpVars> {
        Ok(MlpVars {
            w1: self.w1.bind(graph, requires_grad)?,
            b: self.b.bind(graph, requires_grad)?,
            w2: self.w2.bind(graph, requires_grad)?,
        })
    }
}

pub struct MlpVars {
    pub w1: Tensor,
    pub b: Tensor,
    pub w2: Tensor,
}

/// Compatibility logits `s = W2·relu(W1·r + b)` for one `[F]` vector or a
/// `[B, F]` batch; the result has shape `[B]` (`[1]` for a single vector).
pub fn score(flat: &Tensor, mlp: &MlpVars) -> Result<Tensor> {
    let inputs = mlp.w1.shape()[1];
    let shape = flat.shape();
    let rows = match shape.as_slice() {
        [f] if *f == inputs => 1,
        [b, f] if *f == inputs => *b,
        _ => {
            return Err(Error::shape(format!(
                "predictor expects {inputs} similarities per outfit, got shape {shape:?}"
            )))
        }
    };
    let x = flat.reshape(&[rows, inputs])?.transpose()?;
    let hidden = mlp.w1.matmul(&x)?.add_channel_bias(&mlp.b)?.relu();
    mlp.w2.matmul(&hidden)?.reshape(&[rows])
}

/// `σ(s)`.
pub fn probability(s: f64) -> f64 {
    logistic(s)
}

/// Binary cross-entropy of one logit, `-ln σ(s)` for `y = 1` and
/// `-ln(1 - σ(s))` for `y = 0`, evaluated in the log domain.
pub fn bce(s: f64, label: u8) -> f64 {
    if label == 1 {
        log1p_exp(-s)
    } else {
        log1p_exp(s)
    }
}

/// Mean binary cross-entropy of a `[B]` vector of logits.
pub fn bce_loss(scores: &Tensor, labels: &[u8]) -> Result<Tensor> {
    if scores.numel() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} logits for {} labels", scores.numel(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("label {bad} is not 0 or 1")));
    }
    let signs: Vec<f64> = labels.iter().map(|&y| if y == 1 { -1.0 } else { 1.0 }).collect();
    let zeros = vec![0.0; labels.len()];
    Ok(scores.affine(&signs, &zeros)?.softplus().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// feature-norm regularizer
    pub lambda1: f64,
    /// mask sparsity
    pub lambda2: f64,
    /// visual-semantic embedding
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5e-3,
            lambda2: 5e-4,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// `clf + λ1·emb + λ2·mask + λ3·vse`.
pub fn total_loss(clf: f64, emb: f64, mask: f64, vse: f64, w: &LossWeights) -> f64 {
    clf + w.lambda1 * emb + w.lambda2 * mask + w.lambda3 * vse
}

/// Loss terms of one step as graph nodes; disabled terms are `None`.
pub struct LossTerms {
    pub clf: Tensor,
    pub emb: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub vse: Option<Tensor>,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let mut total = self.clf.clone();
        for (term, weight) in [(&self.emb, w.lambda1), (&self.mask, w.lambda2), (&self.vse, w.lambda3)] {
            if let Some(t) = term {
                total = total.add(&t.scale(weight))?;
            }
        }
        Ok(total)
    }

    /// `(clf, emb, mask, vse)` values, 0 for disabled terms.
    pub fn values(&self) -> [f64; 4] {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
        [self.clf.item(), v(&self.emb), v(&self.mask), v(&self.vse)]
    }
}
