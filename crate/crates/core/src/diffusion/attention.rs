//! Multi-head cross-attention from a query feature onto a reference feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Per-head query/key/value width `d`.
    pub key_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.key_dim == 0 {
            return Err(Error::Config("attention needs heads ≥ 1 and key_dim ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-head projections: `wq[i]` is `query_dim × d`, `wk[i]` and `wv[i]`
/// are `ref_dim × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
}

fn check_heads(query_dim: usize, ref_dim: usize, wq: &[Var<'_>], wk: &[Var<'_>], wv: &[Var<'_>]) -> Result<usize> {
    if wq.is_empty() || wq.len() != wk.len() || wq.len() != wv.len() {
        return Err(Error::InvalidArgument("inconsistent attention head count".into()));
    }
    let d = wq[0].shape()[1];
    for i in 0..wq.len() {
        for (w, rows, what) in [(wq[i], query_dim, "W_q"), (wk[i], ref_dim, "W_k"), (wv[i], ref_dim, "W_v")] {
            if w.shape() != [rows, d] {
                return Err(Error::shape(what, &[rows, d], &w.shape()));
            }
        }
    }
    Ok(d)
}

/// Softmax attention maps `softmax(Q Kᵀ / √d)`, one `n × m` matrix per head.
pub fn attention_probabilities<'t>(
    query: Var<'t>,
    reference: Var<'t>,
    wq: &[Var<'t>],
    wk: &[Var<'t>],
    wv: &[Var<'t>],
) -> Result<Vec<Var<'t>>> {
    let (_, cq) = query.value().dims2()?;
    let (_, cr) = reference.value().dims2()?;
    let d = check_heads(cq, cr, wq, wk, wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    wq.iter()
        .zip(wk)
        .map(|(q, k)| {
            let q = query.matmul(*q)?;
            let k = reference.matmul(*k)?;
            q.matmul_nt(k)?.scale(scale).softmax_rows()
        })
        .collect()
}

/// Cross-attention of `query` (`n × c_q`) onto `reference` (`m × c_r`);
/// head outputs are concatenated to `n × (heads·d)`.
pub fn cross_attention_var<'t>(
    query: Var<'t>,
    reference: Var<'t>,
    wq: &[Var<'t>],
    wk: &[Var<'t>],
    wv: &[Var<'t>],
) -> Result<Var<'t>> {
    let probs = attention_probabilities(query, reference, wq, wk, wv)?;
    let heads = probs
        .into_iter()
        .zip(wv)
        .map(|(a, v)| a.matmul(reference.matmul(*v)?))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_last(&heads)
}

/// Flattens both maps to positions × channels, attends, and reshapes the
/// result to the query's spatial layout.
pub fn cross_attention(query: &FeatureMap, reference: &FeatureMap, weights: &AttentionWeights) -> Result<FeatureMap> {
    let tape = Tape::new();
    let consts = |ws: &[Tensor]| -> Vec<Var<'_>> { ws.iter().map(|w| tape.constant(w.clone())).collect() };
    let (wq, wk, wv) = (consts(&weights.wq), consts(&weights.wk), consts(&weights.wv));
    let q = tape
        .constant(query.tensor().clone())
        .reshape(&[query.positions(), query.channels()])?;
    let r = tape
        .constant(reference.tensor().clone())
        .reshape(&[reference.positions(), reference.channels()])?;
    let out = cross_attention_var(q, r, &wq, &wk, &wv)?;
    let width = out.shape()[1];
    FeatureMap::from_tensor((*out.value()).clone().reshape(&[query.height(), query.width(), width])?)
}

/// Cross-attention layer whose projections live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub config: AttentionConfig,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        ref_dim: usize,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.key_dim;
        let mut make = |tag: &str, rows: usize, rng: &mut R| -> Vec<ParamId> {
            (0..config.heads)
                .map(|h| {
                    let std = (1.0 / rows as f64).sqrt();
                    let w = Tensor::randn(&[rows, d], rng).map(|v| v * std);
                    store.add(format!("{name}.{tag}{h}"), w)
                })
                .collect()
        };
        let wq = make("wq", query_dim, rng);
        let wk = make("wk", ref_dim, rng);
        let wv = make("wv", ref_dim, rng);
        Ok(Self { config, wq, wk, wv })
    }

    pub fn output_dim(&self) -> usize {
        self.config.heads * self.config.key_dim
    }

    pub fn weights(&self, store: &ParamStore) -> AttentionWeights {
        let get = |ids: &[ParamId]| ids.iter().map(|i| store.get(*i).clone()).collect();
        AttentionWeights {
            wq: get(&self.wq),
            wk: get(&self.wk),
            wv: get(&self.wv),
        }
    }

    /// `query` is `h × w × c_q`, `reference` is `h' × w' × c_r`; the result
    /// is `h × w × (heads·d)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, query: Var<'t>, reference: Var<'t>) -> Result<Var<'t>> {
        let qs = query.shape();
        let rs = reference.shape();
        if qs.len() != 3 || rs.len() != 3 {
            return Err(Error::InvalidArgument("cross-attention expects rank-3 maps".into()));
        }
        let q = query.reshape(&[qs[0] * qs[1], qs[2]])?;
        let r = reference.reshape(&[rs[0] * rs[1], rs[2]])?;
        let vars = |ids: &[ParamId]| ids.iter().map(|i| p.get(*i)).collect::<Vec<_>>();
        let out = cross_attention_var(q, r, &vars(&self.wq), &vars(&self.wk), &vars(&self.wv))?;
        out.reshape(&[qs[0], qs[1], self.output_dim()])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_weights(heads: usize, cq: usize, cr: usize, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
        let mut g = |rows| (0..heads).map(|_| Tensor::randn(&[rows, d], rng)).collect::<Vec<_>>();
        AttentionWeights {
            wq: g(cq),
            wk: g(cr),
            wv: g(cr),
        }
    }

    fn map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_tensor(Tensor::randn(&[h, w, c], rng)).unwrap()
    }

    #[test]
    fn single_reference_position_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_weights(2, 3, 4, 2, &mut rng);
        let q = map(2, 3, 3, &mut rng);
        let r = map(1, 1, 4, &mut rng);
        let out = cross_attention(&q, &r, &w).unwrap();
        let mut v = Vec::new();
        for wv in &w.wv {
            for j in 0..2 {
                v.push((0..4).map(|k| r.data()[k] * wv.data()[k * 2 + j]).sum::<f64>());
            }
        }
        for y in 0..2 {
            for x in 0..3 {
                for (a, b) in out.at(y, x).iter().zip(&v) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn equal_logits_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random_weights(1, 3, 3, 2, &mut rng);
        w.wq[0] = Tensor::zeros(&[3, 2]);
        let q = map(2, 2, 3, &mut rng);
        let r = map(1, 5, 3, &mut rng);
        let out = cross_attention(&q, &r, &w).unwrap();
        let mut mean = [0.0; 2];
        for p in 0..5 {
            for j in 0..2 {
                mean[j] += (0..3).map(|k| r.data()[p * 3 + k] * w.wv[0].data()[k * 2 + j]).sum::<f64>() / 5.0;
            }
        }
        for p in 0..4 {
            for j in 0..2 {
                assert!((out.data()[p * 2 + j] - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_projection_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(1, 3, 4, 2, &mut rng);
        let q = map(2, 2, 5, &mut rng);
        let r = map(2, 2, 4, &mut rng);
        assert!(cross_attention(&q, &r, &w).is_err());
    }
}
