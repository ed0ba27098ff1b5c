//! Browser demo: loss surface over the T5 gate score, expected-cost
//! curves and op-count scaling. Each export returns a JSON string that
//! `www/index.html` plots on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use moeroute::bench::ProfileTarget;
use moeroute::moe::{expected_cost, Granularity, MixMode, MoEConfig};
use moeroute::objective::{balance_loss, speed_penalty, total_loss, LossWeights};
use moeroute::router::GateScores;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSurface {
    pub s_t5: Vec<f64>,
    pub ce: Vec<f64>,
    pub balance: Vec<f64>,
    pub penalty: Vec<f64>,
    pub total: Vec<f64>,
}

/// Single-unit loss terms as the T5 score sweeps `[0, 1]`. `p_mamba` and
/// `p_t5` are each expert's probability of the reference token.
pub fn loss_surface(p_mamba: f64, p_t5: f64, lambda1: f64, lambda2: f64, t_u: f64, points: usize) -> moeroute::Result<LossSurface> {
    let w = LossWeights { lambda1, lambda2, t_u, ..Default::default() };
    w.validate()?;
    for (field, p) in [("p_mamba", p_mamba), ("p_t5", p_t5)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(moeroute::Error::config(field, "must lie in [0, 1]"));
        }
    }
    let points = points.max(2);
    let mut out = LossSurface { s_t5: vec![], ce: vec![], balance: vec![], penalty: vec![], total: vec![] };
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let s = [GateScores([1.0 - t, t])];
        let ce = -((1.0 - t) * p_mamba + t * p_t5).max(1e-12).ln();
        let (bal, pen) = (balance_loss(&s), speed_penalty(&s, t_u));
        out.s_t5.push(t);
        out.ce.push(ce);
        out.balance.push(bal);
        out.penalty.push(pen);
        out.total.push(total_loss(ce, bal, pen, &w).total);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurves {
    pub n: Vec<f64>,
    pub routed: Vec<f64>,
    pub always_mamba: Vec<f64>,
    pub always_t5: Vec<f64>,
}

/// Expected unit ops `p_mamba·N + p_t5·N²` against both single-expert
/// policies, on a log grid of `N` up to `n_max`.
pub fn cost_curves(p_t5: f64, n_max: usize, points: usize) -> moeroute::Result<CostCurves> {
    let cfg = |p: f64| MoEConfig::new(Granularity::Sequence, MixMode::Hard, (1.0 - p, p));
    let (mixed, mamba, t5) = (cfg(p_t5)?, cfg(0.0)?, cfg(1.0)?);
    let points = points.max(2);
    let top = (n_max.max(2) as f64).ln();
    let mut out = CostCurves { n: vec![], routed: vec![], always_mamba: vec![], always_t5: vec![] };
    let mut last = 0;
    for i in 0..points {
        let n = (top * i as f64 / (points - 1) as f64).exp().round() as usize;
        if n <= last {
            continue;
        }
        last = n;
        out.n.push(n as f64);
        out.routed.push(expected_cost(n, &mixed)?);
        out.always_mamba.push(expected_cost(n, &mamba)?);
        out.always_t5.push(expected_cost(n, &t5)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpScaling {
    pub len: Vec<usize>,
    pub attention: Vec<u64>,
    pub ssm: Vec<u64>,
    pub attention_ratio: Vec<f64>,
    pub ssm_ratio: Vec<f64>,
}

/// One-layer abstract op counts at `l_min · 2^k`, with the ratio to the
/// previous length.
pub fn op_scaling(d_model: usize, num_heads: usize, d_state: usize, l_min: usize, doublings: usize) -> moeroute::Result<OpScaling> {
    if d_model == 0 || num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(moeroute::Error::config("num_heads", "must divide d_model"));
    }
    if l_min == 0 || d_state == 0 || doublings > 20 {
        return Err(moeroute::Error::config("l_min", "need l_min ≥ 1, d_state ≥ 1 and at most 20 doublings"));
    }
    let att = ProfileTarget::AttentionKernel { d_model, num_heads };
    let ssm = ProfileTarget::ScanKernel { channels: d_model, d_state };
    let mut out = OpScaling { len: vec![], attention: vec![], ssm: vec![], attention_ratio: vec![], ssm_ratio: vec![] };
    for k in 0..=doublings {
        let len = l_min << k;
        let (a, s) = (att.abstract_ops(len), ssm.abstract_ops(len));
        if let (Some(&pa), Some(&ps)) = (out.attention.last(), out.ssm.last()) {
            out.attention_ratio.push(a as f64 / pa as f64);
            out.ssm_ratio.push(s as f64 / ps as f64);
        }
        out.len.push(len);
        out.attention.push(a);
        out.ssm.push(s);
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: moeroute::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = lossSurface)]
pub fn loss_surface_js(p_mamba: f64, p_t5: f64, lambda1: f64, lambda2: f64, t_u: f64, points: usize) -> Result<String, JsError> {
    to_js(loss_surface(p_mamba, p_t5, lambda1, lambda2, t_u, points))
}

#[wasm_bindgen(js_name = costCurves)]
pub fn cost_curves_js(p_t5: f64, n_max: usize, points: usize) -> Result<String, JsError> {
    to_js(cost_curves(p_t5, n_max, points))
}

#[wasm_bindgen(js_name = opScaling)]
pub fn op_scaling_js(d_model: usize, num_heads: usize, d_state: usize, l_min: usize, doublings: usize) -> Result<String, JsError> {
    to_js(op_scaling(d_model, num_heads, d_state, l_min, doublings))
}
