//! Visual-semantic embedding: descriptor tokens and last-layer visual
//! features mapped into one joint space and tied together by a
//! bidirectional hinge loss over the batch.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Graph, Tensor};

/// Sorted, deduplicated token list with dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Vocabulary::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token {token:?}")))
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VseParams {
    /// word embeddings, `[joint, vocab]`
    pub word: Param,
    /// visual projection, `[joint, visual]`
    pub image: Param,
    pub margin: f64,
}

impl VseParams {
    pub fn init(joint: usize, vocab: usize, visual: usize, margin: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {margin}")));
        }
        if joint == 0 || vocab == 0 {
            return Err(Error::Config("embedding needs a non-empty vocabulary and joint space".into()));
        }
        Ok(VseParams {
            word: Param::glorot(&[joint, vocab], vocab, joint, rng),
            image: Param::glorot(&[joint, visual], visual, joint, rng),
            margin,
        })
    }

    pub fn bind(&self, graph: &Graph, requires_grad: bool) -> Result<VseVars> {
        Ok(VseVars {
            word: self.word.bind(graph, requires_grad)?,
            image: self.image.bind(graph, requires_grad)?,
            margin: self.margin,
        })
    }
}

pub struct VseVars {
    pub word: Tensor,
    pub image: Tensor,
    pub margin: f64,
}

/// Mean of the tokens' embedding columns, L2-normalized (zero stays zero).
pub fn text_embed(token_ids: &[usize], vars: &VseVars) -> Result<Tensor> {
    if token_ids.is_empty() {
        return Err(Error::Input("text embedding of an empty token list".into()));
    }
    let shape = vars.word.shape();
    let (joint, vocab) = (shape[0], shape[1]);
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocab(format!("token id {bad} outside a vocabulary of {vocab}")));
    }
    let idx: Vec<usize> = token_ids.iter().flat_map(|&t| (0..joint).map(move |j| j * vocab + t)).collect();
    let stacked = vars.word.gather(&idx)?.reshape(&[token_ids.len(), joint])?;
    let ones = vars.word.graph().constant(&[1, token_ids.len()], vec![1.0; token_ids.len()])?;
    Ok(ones
        .matmul(&stacked)?
        .reshape(&[joint])?
        .scale(1.0 / token_ids.len() as f64)
        .normalize())
}

/// `W_I·x`, L2-normalized (zero stays zero).
pub fn visual_embed(x: &Tensor, vars: &VseVars) -> Result<Tensor> {
    let shape = vars.image.shape();
    if x.shape() != [shape[1]] {
        return Err(Error::shape(format!("visual embedding expects [{}], got {:?}", shape[1], x.shape())));
    }
    Ok(vars.image.matmul(&x.reshape(&[shape[1], 1])?)?.reshape(&[shape[0]])?.normalize())
}

/// Bidirectional hinge loss over matching `(u_i, v_i)` pairs, with every
/// other pair in the batch as a negative. Each direction is averaged over
/// its `B·(B−1)` terms.
pub fn vse_loss(u: &[Tensor], v: &[Tensor], margin: f64) -> Result<Tensor> {
    let b = u.len();
    if b != v.len() {
        return Err(Error::shape(format!("{b} visual and {} text embeddings", v.len())));
    }
    if b < 2 {
        return Err(Error::Batch(format!("contrastive loss needs at least 2 pairs, got {b}")));
    }
    let joint = u[0].numel();
    let um = Tensor::concat(u)?.reshape(&[b, joint])?;
    let vm = Tensor::concat(v)?.reshape(&[b, joint])?;
    let sim = um.matmul(&vm.transpose()?)?;
    let mut diag = Vec::with_capacity(b * (b - 1));
    let mut row = Vec::with_capacity(b * (b - 1));
    let mut col = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        for k in 0..b {
            if k != i {
                diag.push(i * b + i);
                row.push(i * b + k);
                col.push(k * b + i);
            }
        }
    }
    let d = sim.gather(&diag)?;
    let n = (b * (b - 1)) as f64;
    let image_side = sim.gather(&row)?.sub(&d)?.add_scalar(margin).relu().sum().scale(1.0 / n);
    let text_side = sim.gather(&col)?.sub(&d)?.add_scalar(margin).relu().sum().scale(1.0 / n);
    image_side.add(&text_side)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::param::seeded_rng;
    use crate::tensor::{max_relative_error, numerical_gradient};

    fn vars(g: &Graph, word: Vec<f64>, joint: usize, vocab: usize) -> VseVars {
        VseVars {
            word: g.constant(&[joint, vocab], word).unwrap(),
            image: g.constant(&[joint, 2], vec![1.0, 2.0, 3.0, 4.0][..joint * 2].to_vec()).unwrap(),
            margin: 0.2,
        }
    }

    #[test]
    fn vocabulary_is_sorted_and_dense() {
        let v = Vocabulary::new(["shoe", "red", "striped", "red"]);
        assert_eq!(v.tokens(), ["red", "shoe", "striped"]);
        assert_eq!(v.id("shoe").unwrap(), 1);
        assert!(matches!(v.id("hat"), Err(Error::Vocab(_))));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["red","shoe","striped"]"#);
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }

    #[test]
    fn text_embed_examples() {
        let g = Graph::new();
        // columns: a = (3, 4), b = (-3, -4), c = (1, 0)
        let p = vars(&g, vec![3.0, -3.0, 1.0, 4.0, -4.0, 0.0], 2, 3);
        let single = text_embed(&[0], &p).unwrap().values();
        assert!((single[0] - 0.6).abs() < 1e-15 && (single[1] - 0.8).abs() < 1e-15);
        assert_eq!(text_embed(&[0, 0], &p).unwrap().values(), single);
        assert_eq!(text_embed(&[0, 1], &p).unwrap().values(), vec![0.0, 0.0]);
        assert!(matches!(text_embed(&[], &p), Err(Error::Input(_))));
        assert!(matches!(text_embed(&[3], &p), Err(Error::Vocab(_))));
    }

    #[test]
    fn visual_embed_examples() {
        let g = Graph::new();
        let p = vars(&g, vec![1.0; 2], 2, 1);
        // [[1,2],[3,4]]·(1,1) = (3,7)
        let x = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let u = visual_embed(&x, &p).unwrap().values();
        let n = 58f64.sqrt();
        assert!((u[0] - 3.0 / n).abs() < 1e-15 && (u[1] - 7.0 / n).abs() < 1e-15);
        let x5 = g.constant(&[2], vec![5.0, 5.0]).unwrap();
        let u5 = visual_embed(&x5, &p).unwrap().values();
        assert!(u.iter().zip(&u5).all(|(a, b)| (a - b).abs() < 1e-15));
        let zero = VseVars {
            image: g.constant(&[2, 2], vec![0.0; 4]).unwrap(),
            ..p
        };
        assert_eq!(visual_embed(&x, &zero).unwrap().values(), vec![0.0, 0.0]);
        let bad = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(visual_embed(&bad, &zero), Err(Error::Shape(_))));
    }

    #[test]
    fn vse_loss_examples() {
        let g = Graph::new();
        let basis = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            g.constant(&[3], v).unwrap()
        };
        let u: Vec<_> = (0..3).map(basis).collect();
        assert_eq!(vse_loss(&u, &u, 0.2).unwrap().item(), 0.0);
        let same: Vec<_> = (0..4).map(|_| basis(1)).collect();
        assert!((vse_loss(&same, &same, 0.2).unwrap().item() - 0.4).abs() < 1e-15);
        assert!(matches!(vse_loss(&u[..1], &u[..1], 0.2), Err(Error::Batch(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(4, 2);
        let p = VseParams::init(6, 5, 4, 0.2, &mut rng).unwrap();
        let tokens = [vec![0, 1], vec![2, 3, 4], vec![1, 4], vec![3]];
        let feats: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.77).sin() + 0.1).collect()).collect();
        let eval = |p: &VseParams, grad: bool| {
            let g = Graph::new();
            let vars = p.bind(&g, grad).unwrap();
            let u: Vec<_> = feats
                .iter()
                .map(|f| visual_embed(&g.constant(&[4], f.clone()).unwrap(), &vars).unwrap())
                .collect();
            let v: Vec<_> = tokens.iter().map(|t| text_embed(t, &vars).unwrap()).collect();
            let l = vse_loss(&u, &v, 0.5).unwrap();
            if grad {
                l.backward().unwrap();
            }
            (l.item(), vars.word.grad(), vars.image.grad())
        };
        let (loss, gw, gi) = eval(&p, true);
        assert!(loss > 0.0);
        let num_w = numerical_gradient(
            |w| {
                let mut q = p.clone();
                q.word.values = w.to_vec();
                Ok(eval(&q, false).0)
            },
            &p.word.values,
            1e-6,
        )
        .unwrap();
        let num_i = numerical_gradient(
            |w| {
                let mut q = p.clone();
                q.image.values = w.to_vec();
                Ok(eval(&q, false).0)
            },
            &p.image.values,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&gw.unwrap(), &num_w) < 1e-4);
        assert!(max_relative_error(&gi.unwrap(), &num_i) < 1e-4);
    }

    proptest! {
        /// The loss is non-negative and does not depend on batch order.
        #[test]
        fn nonnegative_and_order_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 2 * 5 * 4),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let g = Graph::new();
            let emb = |off: usize, i: usize| g.constant(&[4], vals[off + i * 4..off + i * 4 + 4].to_vec()).unwrap().normalize();
            let u: Vec<_> = (0..5).map(|i| emb(0, i)).collect();
            let v: Vec<_> = (0..5).map(|i| emb(20, i)).collect();
            let a = vse_loss(&u, &v, 0.2).unwrap().item();
            let up: Vec<_> = perm.iter().map(|&i| u[i].clone()).collect();
            let vp: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
            let b = vse_loss(&up, &vp, 0.2).unwrap().item();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
