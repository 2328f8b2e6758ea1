use rand::Rng;

use super::layers::{Linear, TimeEncoder};
use super::params::{Grads, ParamStore};
use super::tensor::dot;
use crate::error::{Error, Result};

/// One temporal neighbor as seen by the attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub state: &'a [f64],
    pub features: &'a [f64],
    /// Time elapsed since the neighbor interaction.
    pub dt: f64,
}

/// Single-layer multi-head temporal graph attention.
///
/// The query is `[s ‖ te(0)]`, keys and values are `[s_j ‖ e_j ‖ te(dt_j)]`. Each head
/// runs scaled dot-product attention over the neighbors; the concatenated heads are
/// joined with a ReLU projection of the node's own state and mapped back to the model
/// width: `z = W_o [relu(W_p s) ‖ attended]`. Without neighbors the attended block is
/// zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub own: Linear,
    pub combine: Linear,
    pub d_model: usize,
    pub d_edge: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    state: Vec<f64>,
    q_in: Vec<f64>,
    q: Vec<f64>,
    kv_in: Vec<Vec<f64>>,
    dts: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// `weights[h][j]`, softmax over neighbors per head.
    weights: Vec<Vec<f64>>,
    own_pre: Vec<f64>,
    combine_in: Vec<f64>,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Gradients flowing out of the attention layer into its non-parameter inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputGrads {
    pub state: Vec<f64>,
    pub neighbor_states: Vec<Vec<f64>>,
}

impl TemporalAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_edge: usize,
        d_time: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible into {heads} heads"
            )));
        }
        let kv_in = d_model + d_edge + d_time;
        Ok(TemporalAttention {
            query: Linear::new(store, &format!("{name}.query"), d_model + d_time, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.key"), kv_in, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), kv_in, d_model, rng)?,
            own: Linear::new(store, &format!("{name}.own"), d_model, d_model, rng)?,
            combine: Linear::new(store, &format!("{name}.combine"), 2 * d_model, d_model, rng)?,
            d_model,
            d_edge,
            heads,
        })
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        time: &TimeEncoder,
        state: &[f64],
        neighbors: &[Neighbor<'_>],
    ) -> Result<(Vec<f64>, AttentionCache)> {
        let d = self.d_model;
        if state.len() != d {
            return Err(Error::contract(format!("attention query state has length {}, expected {d}", state.len())));
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut cache = AttentionCache {
            state: state.to_vec(),
            q_in: Vec::new(),
            q: Vec::new(),
            kv_in: Vec::with_capacity(neighbors.len()),
            dts: Vec::with_capacity(neighbors.len()),
            keys: Vec::with_capacity(neighbors.len()),
            values: Vec::with_capacity(neighbors.len()),
            weights: Vec::new(),
            own_pre: Vec::new(),
            combine_in: Vec::new(),
        };
        let mut attended = vec![0.0; d];
        if !neighbors.is_empty() {
            let mut q_in = state.to_vec();
            q_in.extend(time.forward(store, 0.0));
            cache.q = self.query.forward(store, &q_in)?;
            cache.q_in = q_in;
            for nb in neighbors {
                if nb.state.len() != d || nb.features.len() != self.d_edge {
                    return Err(Error::contract("attention neighbor has the wrong width"));
                }
                let mut kv = Vec::with_capacity(self.key.in_dim);
                kv.extend_from_slice(nb.state);
                kv.extend_from_slice(nb.features);
                kv.extend(time.forward(store, nb.dt));
                cache.keys.push(self.key.forward(store, &kv)?);
                cache.values.push(self.value.forward(store, &kv)?);
                cache.kv_in.push(kv);
                cache.dts.push(nb.dt);
            }
            for h in 0..self.heads {
                let span = h * dh..(h + 1) * dh;
                let q = &cache.q[span.clone()];
                let scores: Vec<f64> = cache.keys.iter().map(|k| dot(q, &k[span.clone()]) * scale).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
                for (w, v) in weights.iter().zip(&cache.values) {
                    for (a, x) in attended[span.clone()].iter_mut().zip(&v[span.clone()]) {
                        *a += w * x;
                    }
                }
                cache.weights.push(weights);
            }
        }
        cache.own_pre = self.own.forward(store, state)?;
        let mut combine_in: Vec<f64> = cache.own_pre.iter().map(|v| v.max(0.0)).collect();
        combine_in.extend_from_slice(&attended);
        let z = self.combine.forward(store, &combine_in)?;
        cache.combine_in = combine_in;
        Ok((z, cache))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        time: &TimeEncoder,
        cache: &AttentionCache,
        dz: &[f64],
    ) -> Result<AttentionInputGrads> {
        let d = self.d_model;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dcombine = self.combine.backward(store, grads, &cache.combine_in, dz)?;
        let down: Vec<f64> = dcombine[..d]
            .iter()
            .zip(&cache.own_pre)
            .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dstate = self.own.backward(store, grads, &cache.state, &down)?;
        let n = cache.keys.len();
        let mut neighbor_states = Vec::with_capacity(n);
        if n > 0 {
            let datt = &dcombine[d..];
            let mut dq = vec![0.0; d];
            let mut dkeys = vec![vec![0.0; d]; n];
            let mut dvalues = vec![vec![0.0; d]; n];
            for h in 0..self.heads {
                let span = h * dh..(h + 1) * dh;
                let g = &datt[span.clone()];
                let weights = &cache.weights[h];
                let dweights: Vec<f64> = cache.values.iter().map(|v| dot(g, &v[span.clone()])).collect();
                let mean: f64 = weights.iter().zip(&dweights).map(|(w, dw)| w * dw).sum();
                for j in 0..n {
                    for (dv, gi) in dvalues[j][span.clone()].iter_mut().zip(g) {
                        *dv += weights[j] * gi;
                    }
                    let dscore = weights[j] * (dweights[j] - mean) * scale;
                    for (i, idx) in span.clone().enumerate() {
                        dq[idx] += dscore * cache.keys[j][span.start + i];
                        dkeys[j][idx] += dscore * cache.q[idx];
                    }
                }
            }
            let time_off = d + self.d_edge;
            for j in 0..n {
                let mut dkv = self.key.backward(store, grads, &cache.kv_in[j], &dkeys[j])?;
                let dkv_v = self.value.backward(store, grads, &cache.kv_in[j], &dvalues[j])?;
                for (a, b) in dkv.iter_mut().zip(&dkv_v) {
                    *a += b;
                }
                time.backward(store, grads, cache.dts[j], &dkv[time_off..]);
                dkv.truncate(d);
                neighbor_states.push(dkv);
            }
            let dq_in = self.query.backward(store, grads, &cache.q_in, &dq)?;
            for (a, b) in dstate.iter_mut().zip(&dq_in[..d]) {
                *a += b;
            }
            time.backward(store, grads, 0.0, &dq_in[d..]);
        }
        Ok(AttentionInputGrads {
            state: dstate,
            neighbor_states,
        })
    }
}
