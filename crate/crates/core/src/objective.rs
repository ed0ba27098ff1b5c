//! Speed-constrained router objective
//! `L = L_CE + λ1·L_Bal + λ2·L_Pen` and the router-only training loop.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{router_rows, SeqRecord};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::router::{GateScores, RouterInput, RouterMLP, RouterWeights};
use crate::tensor::relative_error;
use crate::tensor::{Backend, Eager, Tape, Tensor};

/// Floor applied before every log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Soft T5 usage allowed before the speed penalty engages.
    pub t_u: f64,
    pub lm_weight: f64,
    pub stability_weight: f64,
    /// Uses the balance term with its printed sign, `Σ S·log(U/S)`, which
    /// rewards collapse. For comparison only.
    pub literal_balance: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, t_u: 0.08, lm_weight: 0.1, stability_weight: 0.01, literal_balance: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lm_weight", self.lm_weight),
            ("stability_weight", self.stability_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be a nonnegative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.t_u) {
            return Err(Error::config("t_u", format!("must lie in [0, 1], got {}", self.t_u)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bal: f64,
    pub pen: f64,
    pub total: f64,
}

/// Mean of `−log max(p[i, y_i], 1e-12)` over rows of a probability matrix.
pub fn ce_loss(p: &Tensor, targets: &[usize]) -> Result<f64> {
    if p.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape { op: "ce_loss", left: p.shape().to_vec(), right: vec![targets.len()] });
    }
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = p.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NonFinite { op: "ce_loss: row is not a distribution" });
        }
        let py = *row.get(y).ok_or(Error::Index { what: "target", index: y, len: row.len() })?;
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Mean `KL(S‖U)` to the uniform distribution over the two experts.
pub fn balance_loss(scores: &[GateScores]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let kl: f64 = scores
        .iter()
        .map(|s| s.0.iter().map(|&p| if p > 0.0 { p * (p / 0.5).ln() } else { 0.0 }).sum::<f64>())
        .sum();
    kl / scores.len() as f64
}

/// The printed form `Σ S·log((1/|E|)/S)`, which equals `−KL(S‖U)`.
pub fn balance_loss_literal(scores: &[GateScores]) -> f64 {
    -balance_loss(scores)
}

/// Mean hinge `max(0, S_T5 − T_u)` over units.
pub fn speed_penalty(scores: &[GateScores], t_u: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| (s.t5() - t_u).max(0.0)).sum::<f64>() / scores.len() as f64
}

pub fn total_loss(ce: f64, bal: f64, pen: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown { ce, bal, pen, total: ce + w.lambda1 * bal + w.lambda2 * pen }
}

/// Router inputs and cached expert probabilities for a batch of sequences.
#[derive(Debug, Clone)]
pub struct RouterBatch {
    /// `units × d_in`
    pub x: Tensor,
    /// `slots × 2`: probability of the reference token under (Mamba, T5).
    pub target_prob: Tensor,
    /// Unit row of every slot.
    pub unit_of_slot: Vec<usize>,
}

impl RouterBatch {
    pub fn build(records: &[&SeqRecord], input: RouterInput, domain_feature: bool) -> Result<Self> {
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut uos = Vec::new();
        let mut n_units = 0;
        let mut width = 0;
        for r in records {
            let x = router_rows(&r.units, input, domain_feature)?;
            width = x.cols();
            rows.extend_from_slice(x.data());
            for (s, u) in r.unit_of_slot().into_iter().enumerate() {
                probs.push(r.target_prob[0][s]);
                probs.push(r.target_prob[1][s]);
                uos.push(n_units + u);
            }
            n_units += r.units.len();
        }
        if n_units == 0 {
            return Err(Error::contract("router batch is empty"));
        }
        Ok(Self {
            x: Tensor::matrix(n_units, width, rows)?,
            target_prob: Tensor::matrix(uos.len(), 2, probs)?,
            unit_of_slot: uos,
        })
    }
}

/// Loss terms as graph values, so the same code runs eagerly and on a tape.
pub struct LossGraph<V> {
    pub ce: V,
    pub bal: V,
    pub pen: V,
    pub total: V,
    pub scores: V,
}

pub fn loss_graph<B: Backend>(be: &mut B, w: &RouterWeights<B::V>, batch: &RouterBatch, lw: &LossWeights) -> Result<LossGraph<B::V>> {
    let x = be.constant(batch.x.clone());
    let z = RouterMLP::logits(be, w, &x)?;
    let s = be.softmax_rows(&z)?;
    let log_s = be.log_softmax_rows(&z)?;

    let p = be.constant(batch.target_prob.clone());
    let s_slots = be.gather_rows(&s, &batch.unit_of_slot)?;
    let mix = be.mul(&s_slots, &p)?;
    let mix = be.sum_rows(&mix)?;
    let floor = be.constant(Tensor::full(&[batch.unit_of_slot.len(), 1], PROB_FLOOR));
    let mix = be.maximum(&mix, &floor)?;
    let log_mix = be.log(&mix)?;
    let ce = be.mean(&log_mix)?;
    let ce = be.scale(&ce, -1.0)?;

    let n_units = batch.x.rows() as f64;
    let plogp = be.mul(&s, &log_s)?;
    let bal = be.sum(&plogp)?;
    let bal = be.scale(&bal, 1.0 / n_units)?;
    let mut bal = be.add_scalar(&bal, LN_2)?;
    if lw.literal_balance {
        bal = be.scale(&bal, -1.0)?;
    }

    let st = be.slice_cols(&s, 1, 1)?;
    let over = be.add_scalar(&st, -lw.t_u)?;
    let zero = be.constant(Tensor::zeros(&[batch.x.rows(), 1]));
    let hinge = be.maximum(&over, &zero)?;
    let pen = be.mean(&hinge)?;

    let a = be.scale(&bal, lw.lambda1)?;
    let b = be.scale(&pen, lw.lambda2)?;
    let total = be.add(&ce, &a)?;
    let total = be.add(&total, &b)?;
    Ok(LossGraph { ce, bal, pen, total, scores: s })
}

/// Eager loss breakdown of `router` on a batch.
pub fn router_loss(router: &RouterMLP, batch: &RouterBatch, lw: &LossWeights) -> Result<LossBreakdown> {
    let g = loss_graph(&mut Eager, &router.weights, batch, lw)?;
    Ok(LossBreakdown { ce: g.ce.item(), bal: g.bal.item(), pen: g.pen.item(), total: g.total.item() })
}

/// Loss and gradients for every router parameter, in `w1, b1, w2, b2`
/// order.
pub fn router_grads(router: &RouterMLP, batch: &RouterBatch, lw: &LossWeights) -> Result<(LossBreakdown, Vec<Tensor>, Vec<GateScores>)> {
    let mut tape = Tape::new();
    let w = router.weights.map(&mut |t| tape.leaf(t.clone(), true));
    let g = loss_graph(&mut tape, &w, batch, lw)?;
    let bd = LossBreakdown {
        ce: tape.value(g.ce).item(),
        bal: tape.value(g.bal).item(),
        pen: tape.value(g.pen).item(),
        total: tape.value(g.total).item(),
    };
    if !bd.total.is_finite() {
        return Err(Error::NonFinite { op: "router loss" });
    }
    tape.backward(g.total)?;
    let grads = w
        .iter()
        .iter()
        .map(|v| tape.grad(**v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(**v).shape())))
        .collect();
    let s = tape.value(g.scores);
    let scores = (0..s.rows()).map(|i| GateScores([s.get(i, 0), s.get(i, 1)])).collect();
    Ok((bd, grads, scores))
}

/// Norm-wise relative error between the tape gradient of `L_total` and
/// central finite differences of the eager loss, over all router
/// parameters at once.
pub fn router_gradcheck(router: &RouterMLP, batch: &RouterBatch, lw: &LossWeights, step: f64) -> Result<f64> {
    let (_, grads, _) = router_grads(router, batch, lw)?;
    let analytic = Tensor::vector(grads.iter().flat_map(|g| g.data().iter().copied()).collect());
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = router.clone();
    for k in 0..4 {
        let n = probe.weights.iter()[k].len();
        for i in 0..n {
            let orig = probe.weights.iter()[k].data()[i];
            probe.weights.iter_mut()[k].data_mut()[i] = orig + step;
            let up = router_loss(&probe, batch, lw)?.total;
            probe.weights.iter_mut()[k].data_mut()[i] = orig - step;
            let down = router_loss(&probe, batch, lw)?.total;
            probe.weights.iter_mut()[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    Ok(relative_error(&analytic, &Tensor::vector(numeric)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 64, epochs: 20, patience: None }
    }
}

impl RouterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's training batches.
    pub ce: f64,
    pub bal: f64,
    pub pen: f64,
    pub total: f64,
    /// Mean answer F1 of hard routing on the validation records.
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Mean T5 gate score on the validation records.
    pub soft_util_t5: f64,
    /// Fraction of validation units routed to T5.
    pub hard_util_t5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub cfg: RouterTrainConfig,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: RouterTrainConfig) -> Self {
        let optimizer = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
        Self { step: 0, cfg, optimizer, history: Vec::new() }
    }
}

/// What the router reads from each record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterView {
    pub input: RouterInput,
    pub domain_feature: bool,
}

/// Adam on the router parameters alone, against soft mixtures of the
/// cached expert outputs. Experts are never touched: the records hold
/// their frozen outputs.
pub fn train_router(
    router: &mut RouterMLP,
    train: &[SeqRecord],
    valid: &[SeqRecord],
    view: RouterView,
    lw: &LossWeights,
    state: &mut TrainState,
    rng: &mut SeededRng,
) -> Result<()> {
    lw.validate()?;
    state.cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("dataset", "no training sequences"));
    }
    let valid_batch = if valid.is_empty() {
        None
    } else {
        Some(RouterBatch::build(&valid.iter().collect::<Vec<_>>(), view.input, view.domain_feature)?)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..state.cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for chunk in order.chunks(state.cfg.batch) {
            let recs: Vec<&SeqRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = RouterBatch::build(&recs, view.input, view.domain_feature)?;
            let (bd, grads, _) = router_grads(router, &batch, lw)?;
            state.optimizer.begin_step();
            for (slot, (p, g)) in router.weights.iter_mut().into_iter().zip(&grads).enumerate() {
                state.optimizer.update(slot, p, g)?;
            }
            state.step += 1;
            for (s, v) in sums.iter_mut().zip([bd.ce, bd.bal, bd.pen, bd.total]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let (val_accuracy, val_loss, soft, hard) = match &valid_batch {
            Some(vb) => {
                let (bd, _, scores) = router_grads(router, vb, lw)?;
                let soft = scores.iter().map(|s| s.t5()).sum::<f64>() / scores.len() as f64;
                let hard = scores.iter().filter(|s| s.t5() > s.mamba()).count() as f64 / scores.len() as f64;
                (hard_accuracy(valid, &scores)?, bd.total, soft, hard)
            }
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            ce: sums[0] / n,
            bal: sums[1] / n,
            pen: sums[2] / n,
            total: sums[3] / n,
            val_accuracy,
            val_loss,
            soft_util_t5: soft,
            hard_util_t5: hard,
        });
        if let Some(patience) = state.cfg.patience {
            if val_loss < best {
                best = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Mean answer F1 when each unit takes its argmax expert's predictions.
fn hard_accuracy(records: &[SeqRecord], scores: &[GateScores]) -> Result<f64> {
    let mut u = 0;
    let mut total = 0.0;
    for r in records {
        let n = r.units.len();
        let choice: Vec<usize> = scores[u..u + n].iter().map(|s| crate::router::hard_select(*s).expert.index()).collect();
        u += n;
        let pred = r.prediction_for(&choice);
        total += crate::metrics::token_f1(&pred, &r.answer)?.f1;
    }
    Ok(total / records.len() as f64)
}

pub const EPOCH_CSV_HEADER: &str = "epoch,L_CE,L_Bal,L_Pen,L_total,val_accuracy,soft_util_t5,hard_util_t5";

pub fn epoch_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_CSV_HEADER);
    s.push('\n');
    for e in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, e.ce, e.bal, e.pen, e.total, e.val_accuracy, e.soft_util_t5, e.hard_util_t5
        ));
    }
    s
}
