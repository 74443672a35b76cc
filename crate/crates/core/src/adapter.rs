//! Step-gated low-rank residual deltas on attention projections.
//!
//! Each targeted projection W gets a pair (down, up) whose product is the
//! delta; up starts at zero so a fresh adapter is exactly neutral. Deltas
//! apply only during the final fraction of sampler steps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::error::{Error, Result};
use crate::model::{attention_layer_ids, layer_dims, AttnKind, DenoiserState, LayerId};
use crate::rng;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_GATE_FRACTION: f64 = 0.25;
const DOWN_INIT_STD: f64 = 0.1;

pub fn default_target_kinds() -> BTreeSet<AttnKind> {
    BTreeSet::from([AttnKind::SelfAttn])
}

#[derive(Debug, Clone)]
pub struct LowRankPair {
    /// [d, r]
    pub down: RawTensor,
    /// [r, k]
    pub up: RawTensor,
}

#[derive(Debug, Clone)]
pub struct AdapterParams {
    /// Layer key (e.g. "attn0.self.q") -> low-rank pair.
    pub entries: BTreeMap<String, LowRankPair>,
    pub rank: usize,
    pub gate_fraction: f64,
    pub target_kinds: BTreeSet<AttnKind>,
}

/// Number of gated steps: ceil(gate_fraction * steps), with exact products
/// snapped so e.g. 0.1 * 10 counts as 1 step rather than 2.
pub fn gate_window(gate_fraction: f64, steps: usize) -> usize {
    let x = gate_fraction * steps as f64;
    let w = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (w as usize).clamp(1, steps.max(1))
}

/// First gated step index; steps at or after it receive deltas.
pub fn gate_start(gate_fraction: f64, steps: usize) -> usize {
    steps - gate_window(gate_fraction, steps)
}

pub fn init_adapter(
    state: &DenoiserState,
    rank: usize,
    gate_fraction: f64,
    target_kinds: BTreeSet<AttnKind>,
    seed: u64,
) -> Result<AdapterParams> {
    if rank < 1 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if !(gate_fraction > 0.0 && gate_fraction <= 1.0) {
        return Err(Error::invalid(format!("gate fraction {gate_fraction} outside (0,1]")));
    }
    if target_kinds.is_empty() {
        return Err(Error::invalid("no attention kinds targeted"));
    }
    let mut entries = BTreeMap::new();
    for id in attention_layer_ids(&state.config) {
        if !target_kinds.contains(&id.kind) {
            continue;
        }
        let (d, k) = layer_dims(&state.config, &id);
        if rank > d.min(k) {
            return Err(Error::invalid(format!(
                "rank {rank} exceeds min dimension {} of layer {}",
                d.min(k),
                id.key()
            )));
        }
        let mut r = rng::stream(seed, &format!("adapter.{}", id.key()), 0);
        let down_data: Vec<f64> =
            (0..d * rank).map(|_| r.sample::<f64, _>(StandardNormal) * DOWN_INIT_STD).collect();
        entries.insert(
            id.key(),
            LowRankPair {
                down: RawTensor::new(vec![d, rank], down_data),
                up: RawTensor::zeros(vec![rank, k]),
            },
        );
    }
    Ok(AdapterParams { entries, rank, gate_fraction, target_kinds })
}

impl AdapterParams {
    pub fn delta_weight(&self, layer_key: &str) -> Result<RawTensor> {
        let pair = self
            .entries
            .get(layer_key)
            .ok_or_else(|| Error::Lookup(format!("adapter has no entry for '{layer_key}'")))?;
        Ok(pair.down.matmul(&pair.up))
    }

    pub fn is_gated(&self, step_index: usize, steps: usize) -> bool {
        step_index >= gate_start(self.gate_fraction, steps)
    }

    /// W plus the delta when `step_index` falls inside the gate window.
    pub fn gated_apply(
        &self,
        w: &RawTensor,
        layer_key: &str,
        step_index: usize,
        steps: usize,
    ) -> Result<RawTensor> {
        if step_index > steps {
            return Err(Error::invalid(format!("step {step_index} beyond {steps}")));
        }
        if !self.is_gated(step_index, steps) {
            return Ok(w.clone());
        }
        let delta = self.delta_weight(layer_key)?;
        if delta.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "delta {:?} vs weight {:?} at '{layer_key}'",
                delta.shape(),
                w.shape()
            )));
        }
        Ok(w.add(&delta))
    }

    /// Every entry must target an existing projection of a targeted kind
    /// with matching dimensions.
    pub fn validate_against(&self, state: &DenoiserState) -> Result<()> {
        for (key, pair) in &self.entries {
            let id = LayerId::parse(key)?;
            if !self.target_kinds.contains(&id.kind) {
                return Err(Error::Config(format!(
                    "entry '{key}' is not of a targeted attention kind"
                )));
            }
            let w = state
                .params
                .get(&id.weight_param())
                .ok_or_else(|| Error::Config(format!("model has no projection '{key}'")))?;
            let (d, k) = (w.shape()[0], w.shape()[1]);
            if pair.down.shape() != [d, self.rank] || pair.up.shape() != [self.rank, k] {
                return Err(Error::Config(format!(
                    "entry '{key}' shaped {:?}/{:?}, projection needs [{d},{}]/[{},{k}]",
                    pair.down.shape(),
                    pair.up.shape(),
                    self.rank,
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Graph view for training or sampling.
    pub fn as_tensors(&self, trainable: bool) -> BTreeMap<String, (Tensor, Tensor)> {
        let wrap = |r: &RawTensor| {
            if trainable {
                Tensor::var(r.clone())
            } else {
                Tensor::leaf(r.clone())
            }
        };
        self.entries
            .iter()
            .map(|(k, pair)| (k.clone(), (wrap(&pair.down), wrap(&pair.up))))
            .collect()
    }

    /// Flat parameter map for the optimizer: "{layer}.down" / "{layer}.up".
    pub fn to_param_map(&self) -> BTreeMap<String, RawTensor> {
        let mut m = BTreeMap::new();
        for (k, pair) in &self.entries {
            m.insert(format!("{k}.down"), pair.down.clone());
            m.insert(format!("{k}.up"), pair.up.clone());
        }
        m
    }

    pub fn from_param_map(&mut self, map: &BTreeMap<String, RawTensor>) -> Result<()> {
        for (k, pair) in &mut self.entries {
            pair.down = map
                .get(&format!("{k}.down"))
                .ok_or_else(|| Error::Lookup(format!("missing '{k}.down'")))?
                .clone();
            pair.up = map
                .get(&format!("{k}.up"))
                .ok_or_else(|| Error::Lookup(format!("missing '{k}.up'")))?
                .clone();
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        crate::model::params_checksum(&self.to_param_map())
    }
}

/// An adapter lifted into the autodiff graph, pairing the gating metadata
/// with leaf (frozen) or var (trainable) tensor views of its factors.
#[derive(Debug)]
pub struct AdapterBinding<'a> {
    pub spec: &'a AdapterParams,
    pub tensors: BTreeMap<String, (Tensor, Tensor)>,
}

impl<'a> AdapterBinding<'a> {
    pub fn frozen(spec: &'a AdapterParams) -> Self {
        Self { spec, tensors: spec.as_tensors(false) }
    }

    pub fn trainable(spec: &'a AdapterParams) -> Self {
        Self { spec, tensors: spec.as_tensors(true) }
    }

    /// Factor values (after graph updates) keyed like `to_param_map`.
    pub fn param_values(&self) -> BTreeMap<String, RawTensor> {
        let mut m = BTreeMap::new();
        for (k, (down, up)) in &self.tensors {
            m.insert(format!("{k}.down"), down.value().clone());
            m.insert(format!("{k}.up"), up.value().clone());
        }
        m
    }
}

/// Additive composition view: the effective delta of a layer is the sum of
/// member deltas, and each member's gate is evaluated independently.
#[derive(Debug, Clone)]
pub struct ComposedAdapter {
    pub members: Vec<AdapterParams>,
}

pub fn compose(adapters: &[AdapterParams]) -> Result<ComposedAdapter> {
    let mut dims: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for a in adapters {
        for (key, pair) in &a.entries {
            let shape = (pair.down.shape()[0], pair.up.shape()[1]);
            if let Some(prev) = dims.get(key.as_str()) {
                if *prev != shape {
                    return Err(Error::invalid(format!(
                        "layer '{key}' has incompatible dimensions {prev:?} vs {shape:?}"
                    )));
                }
            } else {
                dims.insert(key, shape);
            }
        }
    }
    Ok(ComposedAdapter { members: adapters.to_vec() })
}

impl ComposedAdapter {
    /// Sum of gated member deltas at one step; zero matrix when every
    /// member is outside its window.
    pub fn effective_delta(
        &self,
        layer_key: &str,
        step_index: usize,
        steps: usize,
    ) -> Result<RawTensor> {
        let mut acc: Option<RawTensor> = None;
        for m in &self.members {
            if let Some(pair) = m.entries.get(layer_key) {
                let contrib = if m.is_gated(step_index, steps) {
                    pair.down.matmul(&pair.up)
                } else {
                    RawTensor::zeros(vec![pair.down.shape()[0], pair.up.shape()[1]])
                };
                acc = Some(match acc {
                    Some(a) => a.add(&contrib),
                    None => contrib,
                });
            }
        }
        acc.ok_or_else(|| Error::Lookup(format!("no member carries layer '{layer_key}'")))
    }
}

/// Bake the deltas into the model weights. Only defined for a full gate
/// window, since merged weights cannot express step gating.
pub fn merge(adapter: &AdapterParams, state: &DenoiserState) -> Result<DenoiserState> {
    if adapter.gate_fraction < 1.0 {
        return Err(Error::MergeUndefined(format!(
            "gate fraction {} gates by step; merge needs 1.0",
            adapter.gate_fraction
        )));
    }
    adapter.validate_against(state)?;
    let mut merged = state.clone();
    for key in adapter.entries.keys() {
        let id = LayerId::parse(key)?;
        let w = merged.params.get(&id.weight_param()).unwrap().clone();
        let delta = adapter.delta_weight(key)?;
        merged.params.insert(id.weight_param(), w.add(&delta));
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tensors_bitwise_eq, ModelConfig, Proj};

    fn tiny_state() -> DenoiserState {
        let cfg = ModelConfig {
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            frames: 2,
            width: 8,
            text_width: 16,
            pixel_h: 8,
            pixel_w: 8,
            blocks: 2,
            identity_decoder: false,
        };
        DenoiserState::init_random(cfg, 1).unwrap()
    }

    fn pair(down: (Vec<usize>, Vec<f64>), up: (Vec<usize>, Vec<f64>)) -> LowRankPair {
        LowRankPair { down: RawTensor::new(down.0, down.1), up: RawTensor::new(up.0, up.1) }
    }

    #[test]
    fn fresh_adapter_has_zero_deltas_on_targeted_layers_only() {
        let state = tiny_state();
        let a = init_adapter(&state, 2, 0.25, default_target_kinds(), 3).unwrap();
        assert_eq!(a.entries.len(), state.config.blocks * 3);
        for key in a.entries.keys() {
            let id = LayerId::parse(key).unwrap();
            assert_eq!(id.kind, AttnKind::SelfAttn);
            let delta = a.delta_weight(key).unwrap();
            assert!(delta.data().iter().all(|v| *v == 0.0));
        }
        assert!(a.delta_weight("attn0.cross.q").is_err());
        a.validate_against(&state).unwrap();
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let state = tiny_state();
        assert!(init_adapter(&state, 0, 0.25, default_target_kinds(), 0).is_err());
        assert!(init_adapter(&state, 2, 0.0, default_target_kinds(), 0).is_err());
        assert!(init_adapter(&state, 2, 1.5, default_target_kinds(), 0).is_err());
        assert!(init_adapter(&state, 99, 0.25, default_target_kinds(), 0).is_err());
        assert!(init_adapter(&state, 2, 0.25, BTreeSet::new(), 0).is_err());
    }

    #[test]
    fn delta_weight_hand_examples() {
        let mut a = init_adapter(&tiny_state(), 1, 1.0, default_target_kinds(), 0).unwrap();
        a.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![1.0, 2.0]), (vec![1, 2], vec![3.0, 4.0])),
        );
        let d = a.delta_weight("attn0.self.q").unwrap();
        assert_eq!(d.to_vec(), vec![3.0, 4.0, 6.0, 8.0]);

        a.entries.insert(
            "attn0.self.k".into(),
            pair((vec![2, 1], vec![1.0, 1.0]), (vec![1, 2], vec![0.0, 0.0])),
        );
        assert!(a.delta_weight("attn0.self.k").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_rank_never_exceeds_r() {
        // Column-space dimension via Gram-Schmidt with a fixed tolerance.
        let numeric_rank = |m: &RawTensor| {
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for j in 0..cols {
                let mut col: Vec<f64> = (0..rows).map(|i| m.data()[i * cols + j]).collect();
                for b in &basis {
                    let dot: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (c, bv) in col.iter_mut().zip(b) {
                        *c -= dot * bv;
                    }
                }
                let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for c in &mut col {
                        *c /= norm;
                    }
                    basis.push(col);
                }
            }
            basis.len()
        };
        for trial in 0..100u64 {
            let r = 1 + (trial % 3) as usize;
            let mut rng = rng::stream(trial, "rank-trial", 0);
            let down = rng::standard_normal(&mut rng, vec![8, r]);
            let up = rng::standard_normal(&mut rng, vec![r, 6]);
            assert!(numeric_rank(&down.matmul(&up)) <= r);
        }
    }

    #[test]
    fn gate_window_cardinality_matches_rational_ceil() {
        // (numerator, denominator) oracles for the float gate fractions.
        let cases = [(0.1, 1u64, 10u64), (0.25, 1, 4), (0.5, 1, 2), (1.0, 1, 1)];
        for t in 1usize..=64 {
            for (g, num, den) in cases {
                let want = ((t as u64 * num + den - 1) / den) as usize;
                let got = gate_window(g, t);
                assert_eq!(got, want, "T={t}, g={g}");
                let start = gate_start(g, t);
                assert_eq!(start + got, t);
            }
        }
    }

    #[test]
    fn gate_window_covers_exactly_the_final_steps() {
        let state = tiny_state();
        let a = init_adapter(&state, 2, 0.25, default_target_kinds(), 1).unwrap();
        let gated: Vec<usize> = (0..16).filter(|i| a.is_gated(*i, 16)).collect();
        assert_eq!(gated, vec![12, 13, 14, 15]);

        let full = AdapterParams { gate_fraction: 1.0, ..a.clone() };
        assert!((0..16).all(|i| full.is_gated(i, 16)));
    }

    #[test]
    fn gated_apply_respects_the_window() {
        let mut a = init_adapter(&tiny_state(), 1, 0.25, default_target_kinds(), 0).unwrap();
        a.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![1.0, 2.0]), (vec![1, 2], vec![3.0, 4.0])),
        );
        let w = RawTensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let early = a.gated_apply(&w, "attn0.self.q", 0, 16).unwrap();
        assert_eq!(early.to_vec(), w.to_vec());
        let late = a.gated_apply(&w, "attn0.self.q", 15, 16).unwrap();
        assert_eq!(late.to_vec(), vec![4.0, 5.0, 7.0, 9.0]);
        assert!(a.gated_apply(&w, "attn0.self.q", 17, 16).is_err());
        let wrong = RawTensor::zeros(vec![3, 2]);
        assert!(a.gated_apply(&wrong, "attn0.self.q", 15, 16).is_err());
    }

    #[test]
    fn composition_sums_member_deltas() {
        let state = tiny_state();
        let zero = init_adapter(&state, 1, 1.0, default_target_kinds(), 5).unwrap();
        let mut a = zero.clone();
        a.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![1.0, 2.0]), (vec![1, 2], vec![3.0, 4.0])),
        );
        let mut b = zero.clone();
        b.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![1.0, 0.0]), (vec![1, 2], vec![10.0, 20.0])),
        );

        let zz = compose(&[zero.clone(), zero.clone()]).unwrap();
        let d = zz.effective_delta("attn0.self.q", 0, 4).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));

        // A zero member shaped like the replaced entry, for mixed sums.
        let mut zero_small = zero.clone();
        zero_small.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![0.0; 2]), (vec![1, 2], vec![0.0; 2])),
        );
        let az = compose(&[a.clone(), zero_small]).unwrap();
        assert_eq!(
            az.effective_delta("attn0.self.q", 0, 4).unwrap().to_vec(),
            a.delta_weight("attn0.self.q").unwrap().to_vec()
        );

        let ab = compose(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(
            ab.effective_delta("attn0.self.q", 0, 4).unwrap().to_vec(),
            vec![13.0, 24.0, 6.0, 8.0]
        );
        assert!(ab.effective_delta("attn7.self.q", 0, 4).is_err());

        let mut clash = b.clone();
        clash.entries.insert(
            "attn0.self.q".into(),
            pair((vec![3, 1], vec![0.0; 3]), (vec![1, 2], vec![0.0; 2])),
        );
        assert!(compose(&[a, clash]).is_err());
    }

    #[test]
    fn composition_gates_each_member_separately() {
        let state = tiny_state();
        let mut early_only = init_adapter(&state, 1, 1.0, default_target_kinds(), 2).unwrap();
        early_only.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![1.0, 0.0]), (vec![1, 2], vec![1.0, 1.0])),
        );
        let mut late_only = early_only.clone();
        late_only.gate_fraction = 0.25;
        late_only.entries.insert(
            "attn0.self.q".into(),
            pair((vec![2, 1], vec![0.0, 1.0]), (vec![1, 2], vec![2.0, 2.0])),
        );
        let c = compose(&[early_only, late_only]).unwrap();
        // Step 0 of 16: only the always-on member contributes.
        assert_eq!(c.effective_delta("attn0.self.q", 0, 16).unwrap().to_vec(), vec![
            1.0, 1.0, 0.0, 0.0
        ]);
        // Step 15: both are inside their windows.
        assert_eq!(c.effective_delta("attn0.self.q", 15, 16).unwrap().to_vec(), vec![
            1.0, 1.0, 2.0, 2.0
        ]);
    }

    #[test]
    fn merge_contract() {
        let state = tiny_state();
        let zero = init_adapter(&state, 1, 1.0, default_target_kinds(), 9).unwrap();
        let merged = merge(&zero, &state).unwrap();
        assert_eq!(merged.checksum(), state.checksum());

        let gated = init_adapter(&state, 1, 0.25, default_target_kinds(), 9).unwrap();
        assert!(matches!(merge(&gated, &state), Err(Error::MergeUndefined(_))));

        let mut a = zero.clone();
        let key = LayerId { block: 0, kind: AttnKind::SelfAttn, proj: Proj::Q };
        let w = state.params[&key.weight_param()].clone();
        let down = rng::standard_normal(&mut rng::stream(1, "d", 0), vec![8, 1]);
        let up = rng::standard_normal(&mut rng::stream(1, "u", 0), vec![1, 8]);
        a.entries.insert(key.key(), LowRankPair { down: down.clone(), up: up.clone() });
        let merged = merge(&a, &state).unwrap();
        let want = w.add(&down.matmul(&up));
        assert!(tensors_bitwise_eq(&merged.params[&key.weight_param()], &want));
        // Untargeted weights stay bitwise identical.
        assert!(tensors_bitwise_eq(
            &merged.params["attn0.cross.wq"],
            &state.params["attn0.cross.wq"]
        ));
    }

    #[test]
    fn param_map_round_trip() {
        let state = tiny_state();
        let mut a = init_adapter(&state, 2, 0.25, default_target_kinds(), 4).unwrap();
        let mut map = a.to_param_map();
        let touched = "attn0.self.q.up";
        map.insert(touched.into(), RawTensor::full(vec![2, 8], 0.5));
        a.from_param_map(&map).unwrap();
        assert_eq!(a.entries["attn0.self.q"].up.to_vec(), vec![0.5; 16]);
        let again = a.to_param_map();
        assert_eq!(again[touched].to_vec(), vec![0.5; 16]);
    }
}
