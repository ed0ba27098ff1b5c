//! The gating network: a two-layer MLP over the fused unit representation
//! `[z; ℓ; d]`, producing a softmax over (Mamba, T5).

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::expert::ExpertKind;
use crate::rng::SeededRng;
use crate::tensor::{ops, Backend, Tensor};

/// Sequence-level side features of a routing unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterFeatures {
    /// Normalized length in `[0, 1]`.
    pub length: f64,
    /// Binary domain indicator.
    pub domain: f64,
}

impl RouterFeatures {
    pub fn new(length: f64, domain: f64) -> Result<Self> {
        let f = Self { length, domain };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.length) {
            return Err(Error::config("length", format!("{} is outside [0, 1]", self.length)));
        }
        if self.domain != 0.0 && self.domain != 1.0 {
            return Err(Error::config("domain", format!("{} is not 0 or 1", self.domain)));
        }
        Ok(())
    }
}

/// What the router sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterInput {
    /// Unit representation concatenated with `(ℓ, d)`.
    #[default]
    Concat,
    /// `(ℓ, d)` alone.
    FeaturesOnly,
}

impl RouterInput {
    pub fn width(self, d_model: usize) -> usize {
        match self {
            RouterInput::Concat => d_model + 2,
            RouterInput::FeaturesOnly => 2,
        }
    }
}

/// `[token_repr; ℓ; d]`, in that order.
pub fn fuse_features(token_repr: &[f64], features: RouterFeatures) -> Result<Tensor> {
    features.validate()?;
    let mut v = Vec::with_capacity(token_repr.len() + 2);
    v.extend_from_slice(token_repr);
    v.push(features.length);
    v.push(features.domain);
    let t = Tensor::vector(v);
    t.ensure_finite("fuse_features")?;
    Ok(t)
}

/// Router input row for `mode`.
pub fn router_row(token_repr: &[f64], features: RouterFeatures, mode: RouterInput) -> Result<Tensor> {
    match mode {
        RouterInput::Concat => fuse_features(token_repr, features),
        RouterInput::FeaturesOnly => fuse_features(&[], features),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights<T> {
    /// `d_in × hidden`
    pub w1: T,
    pub b1: T,
    /// `hidden × 2`
    pub w2: T,
    pub b2: T,
}

impl<T> RouterWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> RouterWeights<U> {
        RouterWeights { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    pub fn iter(&self) -> [&T; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn iter_mut(&mut self) -> [&mut T; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterMLP {
    pub input: RouterInput,
    pub weights: RouterWeights<Tensor>,
}

impl RouterMLP {
    pub fn init(d_in: usize, hidden: usize, input: RouterInput, rng: &mut SeededRng) -> Result<Self> {
        if d_in == 0 || hidden == 0 {
            return Err(Error::config("hidden", "router dimensions must be positive"));
        }
        Ok(Self {
            input,
            weights: RouterWeights {
                w1: rng.normal_tensor(&[d_in, hidden], 1.0 / (d_in as f64).sqrt()),
                b1: Tensor::zeros(&[hidden]),
                w2: rng.normal_tensor(&[hidden, 2], 1.0 / (hidden as f64).sqrt()),
                b2: Tensor::zeros(&[2]),
            },
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.weights.w1.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().iter().map(|t| t.len()).sum()
    }

    /// Closed form `(d_in)·h + h + 2h + 2`.
    pub fn expected_param_count(d_in: usize, hidden: usize) -> usize {
        d_in * hidden + hidden + hidden * 2 + 2
    }

    /// Gate logits for a batch of fused rows `x: n × d_in`.
    pub fn logits<B: Backend>(be: &mut B, w: &RouterWeights<B::V>, x: &B::V) -> Result<B::V> {
        let h = be.matmul(x, &w.w1)?;
        let h = be.add_row(&h, &w.b1)?;
        let h = be.relu(&h)?;
        let z = be.matmul(&h, &w.w2)?;
        be.add_row(&z, &w.b2)
    }

    /// Gate scores of every row of `x`.
    pub fn scores_batch(&self, x: &Tensor) -> Result<Vec<GateScores>> {
        let z = Self::logits(&mut crate::tensor::Eager, &self.weights, x)?;
        let s = ops::softmax_rows(&z)?;
        Ok((0..s.rows()).map(|i| GateScores([s.get(i, 0), s.get(i, 1)])).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mode = match self.input {
            RouterInput::Concat => 0,
            RouterInput::FeaturesOnly => 1,
        };
        let mut ck = Checkpoint::new(CheckpointKind::Router, vec![self.d_in() as u64, self.hidden() as u64, mode], Vec::new());
        ck.blocks = self.weights.iter().iter().map(|t| (*t).clone()).collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Router)?;
        let input = match ck.dim(2)? {
            0 => RouterInput::Concat,
            1 => RouterInput::FeaturesOnly,
            m => return Err(Error::Checkpoint(format!("unknown router input mode {m}"))),
        };
        let mut r = Self::init(ck.dim(0)?, ck.dim(1)?, input, &mut SeededRng::new(0))?;
        ck.fill(r.weights.iter_mut())?;
        Ok(r)
    }
}

/// Softmax over (Mamba, T5) for one routing unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateScores(pub [f64; 2]);

impl GateScores {
    pub fn mamba(&self) -> f64 {
        self.0[0]
    }

    pub fn t5(&self) -> f64 {
        self.0[1]
    }

    pub fn one_hot(kind: ExpertKind) -> Self {
        let mut s = [0.0; 2];
        s[kind.index()] = 1.0;
        GateScores(s)
    }
}

/// `softmax(W2·ReLU(W1·fused + b1) + b2)` for one fused vector.
pub fn gate_scores(mlp: &RouterMLP, fused: &Tensor) -> Result<GateScores> {
    if fused.len() != mlp.d_in() {
        return Err(Error::Shape { op: "gate_scores", left: fused.shape().to_vec(), right: vec![mlp.d_in()] });
    }
    let x = fused.clone().reshape(&[1, fused.len()])?;
    Ok(mlp.scores_batch(&x)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub expert: ExpertKind,
    pub scores: GateScores,
}

/// Argmax with exact ties going to Mamba.
pub fn hard_select(scores: GateScores) -> RoutingDecision {
    let expert = if scores.t5() > scores.mamba() { ExpertKind::T5 } else { ExpertKind::Mamba };
    RoutingDecision { expert, scores }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate {
    /// `quality(T5) − quality(Mamba)`.
    pub gain: f64,
    pub threshold: f64,
}

/// Utility gain from the two experts' quality on the same unit.
pub fn utility_gain(quality_t5: f64, quality_mamba: f64, threshold: f64) -> UtilityEstimate {
    UtilityEstimate { gain: quality_t5 - quality_mamba, threshold }
}

/// T5 iff the gain strictly exceeds the threshold.
pub fn threshold_route(u: UtilityEstimate) -> ExpertKind {
    if u.gain > u.threshold {
        ExpertKind::T5
    } else {
        ExpertKind::Mamba
    }
}
