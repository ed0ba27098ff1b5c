use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const POSITION_SCALE: f64 = 0.3;

/// Domain-aware input embedding shared by both experts and the router.
///
/// The adapted embedding of token `i` at position `p` under domain `k` is
/// `e_i + P_p + W_d[:, k]`. The tables are fixed at construction and never
/// trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAdaptation {
    /// `vocab × d_model`
    pub tokens: Tensor,
    /// `max_len × d_model`
    pub positions: Tensor,
    /// `d_model × n_domains`
    pub domain_proj: Tensor,
}

impl EmbeddingAdaptation {
    pub fn new(tokens: Tensor, positions: Tensor, domain_proj: Tensor) -> Result<Self> {
        let d = tokens.cols();
        if tokens.shape().len() != 2 || positions.shape().len() != 2 || domain_proj.shape().len() != 2 {
            return Err(Error::contract("embedding tables must be matrices"));
        }
        if positions.cols() != d || domain_proj.rows() != d {
            return Err(Error::Shape {
                op: "embedding",
                left: tokens.shape().to_vec(),
                right: positions.shape().to_vec(),
            });
        }
        Ok(Self { tokens, positions, domain_proj })
    }

    /// Random unit-variance token table, sinusoidal positions and a random
    /// domain projection. Positions and domain enter at reduced scale:
    /// both are nearly constant along a sequence, and a slow recurrence
    /// integrates constant inputs into a bias that swamps the token signal.
    pub fn init(vocab: usize, d_model: usize, max_len: usize, n_domains: usize, rng: &mut SeededRng) -> Self {
        let tokens = rng.normal_tensor(&[vocab, d_model], 1.0);
        let domain_proj = rng.normal_tensor(&[d_model, n_domains], 0.15);
        Self {
            tokens,
            positions: sinusoidal_positions(max_len, d_model, POSITION_SCALE),
            domain_proj,
        }
    }

    pub fn d_model(&self) -> usize {
        self.tokens.cols()
    }

    pub fn vocab(&self) -> usize {
        self.tokens.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positions.rows()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_proj.cols()
    }

    fn check(&self, token: usize, position: usize, domain: usize) -> Result<()> {
        if token >= self.vocab() {
            return Err(Error::Index { what: "token", index: token, len: self.vocab() });
        }
        if position >= self.max_len() {
            return Err(Error::Index { what: "position", index: position, len: self.max_len() });
        }
        if domain >= self.n_domains() {
            return Err(Error::Index { what: "domain", index: domain, len: self.n_domains() });
        }
        Ok(())
    }

    /// Writes the adapted embedding into `out`.
    fn write(&self, token: usize, position: usize, domain: usize, out: &mut [f64]) {
        let nd = self.n_domains();
        let e = self.tokens.row(token);
        let p = self.positions.row(position);
        let w = self.domain_proj.data();
        for (j, o) in out.iter_mut().enumerate() {
            *o = e[j] + p[j] + w[j * nd + domain];
        }
    }

    /// Embeds a sequence whose first token sits at absolute position
    /// `start`; returns `L × d_model`.
    pub fn embed(&self, tokens: &[usize], start: usize, domain: usize) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot embed an empty sequence"));
        }
        let d = self.d_model();
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        for (i, &tok) in tokens.iter().enumerate() {
            self.check(tok, start + i, domain)?;
            self.write(tok, start + i, domain, out.row_mut(i));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dims = [self.vocab(), self.d_model(), self.max_len(), self.n_domains()];
        let mut ck = Checkpoint::new(CheckpointKind::Embedding, dims.map(|d| d as u64).to_vec(), Vec::new());
        ck.blocks = vec![self.tokens.clone(), self.positions.clone(), self.domain_proj.clone()];
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Embedding)?;
        let (v, d, l, k) = (ck.dim(0)?, ck.dim(1)?, ck.dim(2)?, ck.dim(3)?);
        let mut tables = [Tensor::zeros(&[v, d]), Tensor::zeros(&[l, d]), Tensor::zeros(&[d, k])];
        ck.fill(tables.iter_mut())?;
        let [tokens, positions, domain_proj] = tables;
        Self::new(tokens, positions, domain_proj)
    }

    /// Mean of the adapted embeddings over a sequence.
    pub fn mean_embedding(&self, tokens: &[usize], start: usize, domain: usize) -> Result<Vec<f64>> {
        let h = self.embed(tokens, start, domain)?;
        let mut mean = vec![0.0; self.d_model()];
        for r in 0..h.rows() {
            for (m, v) in mean.iter_mut().zip(h.row(r)) {
                *m += v;
            }
        }
        let n = h.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }
}

/// Adapted embedding `e_i + P_p + W_d·d_s` of one token, with `d_s` the
/// one-hot vector of `domain`.
pub fn adapt_embedding(adaptation: &EmbeddingAdaptation, token_id: usize, position: usize, domain: usize) -> Result<Tensor> {
    adaptation.check(token_id, position, domain)?;
    let mut out = vec![0.0; adaptation.d_model()];
    adaptation.write(token_id, position, domain, &mut out);
    Ok(Tensor::vector(out))
}

/// Classic sine/cosine position table, multiplied by `scale`.
pub fn sinusoidal_positions(max_len: usize, d_model: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d_model]);
    for pos in 0..max_len {
        let row = t.row_mut(pos);
        for (i, v) in row.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / d_model as f64);
            let angle = pos as f64 * freq;
            *v = scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
