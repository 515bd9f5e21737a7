//! The full model: one square-token expert per patch size, combined by the gate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::moe::{moe_forward, Expert, ExpertOutput, ExpertSpec, Gate, GateInput, MoeForward};
use crate::numerics::{Graph, ParamStore, Params, Tensor};
use crate::tsa::DEFAULT_BASE_WIDTH;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Samples per segment.
    pub segment_len: usize,
    /// Canonical grid width `T`.
    pub base_width: usize,
    /// One expert per patch size `D`.
    pub patch_sizes: Vec<usize>,
    /// Square token side.
    pub k: usize,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub gate_input: GateInput,
}

impl ModelConfig {
    /// Five experts at `T/4 … 4T` over 10-minute segments with the toy encoder.
    pub fn toy(segment_len: usize) -> Self {
        ModelConfig {
            segment_len,
            base_width: DEFAULT_BASE_WIDTH,
            patch_sizes: crate::moe::default_patch_sizes(DEFAULT_BASE_WIDTH),
            k: 4,
            encoder: EncoderConfig::toy(),
            head_hidden: 16,
            gate_input: GateInput::Summary,
        }
    }

    pub fn expert_spec(&self, patch_size: usize) -> ExpertSpec {
        ExpertSpec {
            patch_size,
            k: self.k,
            encoder: self.encoder.clone(),
            head_hidden: self.head_hidden,
        }
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.segment_len == 0 {
            out.push(String::from("segment length must be positive"));
        }
        if self.base_width == 0 {
            out.push(String::from("base width T must be positive"));
        }
        if self.patch_sizes.is_empty() {
            out.push(String::from("at least one expert patch size is required"));
        }
        if self.head_hidden == 0 {
            out.push(String::from("head_hidden must be positive"));
        }
        if let Err(e) = self.encoder.validate() {
            out.push(format!("{e}"));
        }
        if out.is_empty() {
            for (i, &d) in self.patch_sizes.iter().enumerate() {
                if let Err(e) = Expert::geometry(&self.expert_spec(d), self.segment_len, self.base_width)
                    .and_then(|(_, (r, c))| self.encoder.plan(r, c).map(|_| ()))
                {
                    out.push(format!("expert {i} (D={d}): {e}"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Score and per-expert breakdown for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub experts: Vec<ExpertOutput>,
}

/// Loss, score and parameter gradients for one labelled segment.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub score: f64,
    /// One gradient buffer per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HdFormer {
    pub config: ModelConfig,
    store: ParamStore,
    experts: Vec<Expert>,
    gate: Gate,
}

impl HdFormer {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let experts = config
            .patch_sizes
            .iter()
            .enumerate()
            .map(|(i, &d)| Expert::new(&mut store, i, &config.expert_spec(d), config.segment_len, config.base_width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let feature_dim = config.gate_input.feature_dim(config.segment_len);
        let gate = Gate::new(&mut store, config.gate_input, feature_dim, experts.len());
        Ok(HdFormer {
            config: config.clone(),
            store,
            experts,
            gate,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::validation(
                "parameters",
                format!("expected {} tensors, got {}", self.store.len(), store.len()),
            ));
        }
        for (_, name, t) in store.iter() {
            self.store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, segment: &[f64]) -> Result<MoeForward> {
        moe_forward(g, p, segment, &self.experts, &self.gate)
    }

    pub fn predict(&self, segment: &[f64]) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = g.params(&self.store, false);
        let out = self.forward(&mut g, &p, segment)?;
        let score = g.value(out.y).data()[0];
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("model score {score}")));
        }
        Ok(Prediction {
            score,
            experts: out.outputs(&g, &self.experts),
        })
    }

    pub fn loss_and_grad(&self, segment: &[f64], label: f64) -> Result<SampleGradient> {
        let mut g = Graph::new();
        let p = g.params(&self.store, true);
        let out = self.forward(&mut g, &p, segment)?;
        let loss = g.binary_cross_entropy(out.y, &[label])?;
        let mut grads = g.grad(loss)?;
        let buffers = p
            .vars()
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
            .collect();
        Ok(SampleGradient {
            loss: g.value(loss).data()[0],
            score: g.value(out.y).data()[0],
            grads: buffers,
        })
    }

    /// Binary cross-entropy of one segment without gradients.
    pub fn loss(&self, segment: &[f64], label: f64) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.params(&self.store, false);
        let out = self.forward(&mut g, &p, segment)?;
        let loss = g.binary_cross_entropy(out.y, &[label])?;
        Ok(g.value(loss).data()[0])
    }

    /// Forces the gate to a fixed weight vector (for inspection and tests).
    pub fn predict_with_gate(&self, segment: &[f64], weights: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.params(&self.store, false);
        let scores = self
            .experts
            .iter()
            .map(|e| e.forward(&mut g, &p, segment))
            .collect::<Result<Vec<_>>>()?;
        let w = g.constant(Tensor::new([1, weights.len()], weights.to_vec())?);
        let y = crate::moe::combine(&mut g, w, &scores)?;
        Ok(g.value(y).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Scope;
    use alloc::vec;

    fn small(patches: Vec<usize>) -> ModelConfig {
        ModelConfig {
            segment_len: 2048,
            base_width: 64,
            patch_sizes: patches,
            k: 2,
            encoder: EncoderConfig {
                scope: Scope::Windowed,
                depth: 2,
                d_model: 8,
                heads: 2,
                window: 2,
                shift: true,
                merge_stages: vec![1],
                mlp_ratio: 2,
            },
            head_hidden: 4,
            gate_input: GateInput::Summary,
        }
    }

    #[test]
    fn problems_list_every_violation() {
        let mut cfg = small(vec![16, 32, 64, 128, 256]);
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
        cfg.patch_sizes = vec![96, 4096, 16];
        let p = cfg.problems();
        assert_eq!(p.len(), 2, "{p:?}");
        assert!(p[0].contains("expert 0") && p[1].contains("expert 1"));
        cfg.encoder.heads = 3;
        cfg.head_hidden = 0;
        assert_eq!(cfg.problems().len(), 2);
    }

    #[test]
    fn model_builds_and_predicts_deterministically() {
        let cfg = small(vec![16, 32, 64, 128, 256]);
        let a = HdFormer::new(&cfg, 7).unwrap();
        let b = HdFormer::new(&cfg, 7).unwrap();
        assert_eq!(a.params(), b.params());
        let seg: Vec<f64> = (0..2048).map(|i| libm::sin(i as f64 * 0.09)).collect();
        let pa = a.predict(&seg).unwrap();
        assert_eq!(pa, b.predict(&seg).unwrap());
        assert_eq!(pa.experts.len(), 5);
        assert!(pa.score > 0.0 && pa.score < 1.0);
        let w: f64 = pa.experts.iter().map(|e| e.gate_weight).sum();
        assert!((w - 1.0).abs() < 1e-12);

        let one_hot = a.predict_with_gate(&seg, &[0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(one_hot, pa.experts[3].score);

        let sg = a.loss_and_grad(&seg, 1.0).unwrap();
        assert_eq!(sg.grads.len(), a.params().len());
        assert!((sg.loss - a.loss(&seg, 1.0).unwrap()).abs() < 1e-15);
        assert!((sg.loss + libm::log(pa.score)).abs() < 1e-12);
    }

    #[test]
    fn load_params_checks_shapes() {
        let cfg = small(vec![32]);
        let mut a = HdFormer::new(&cfg, 1).unwrap();
        let b = HdFormer::new(&cfg, 2).unwrap();
        a.load_params(b.params()).unwrap();
        assert_eq!(a.params(), b.params());
        let other = HdFormer::new(&small(vec![32, 64]), 2).unwrap();
        assert!(a.load_params(other.params()).is_err());
    }
}
