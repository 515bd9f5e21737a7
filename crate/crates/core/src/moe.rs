//! Softmax-gated mixture of square-token experts at different patch sizes.
//!
//! `y = Σ_i G(x)_i · E_i(x)` with `G(x) = softmax(x · W_g)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{ClassifierHead, Encoder, EncoderConfig, EncoderPlan};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Params, Tensor, Var};
use crate::tsa::{build_grid, grid_shape, token_shape, tokenize_squares, SquareProjection};

/// Mean-pooled bins in the gate summary.
pub const GATE_BINS: usize = 64;
/// Bins plus std, skewness, min and max.
pub const GATE_FEATURE_DIM: usize = GATE_BINS + 4;

/// What the gate looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInput {
    /// The 68-dimensional summary from [`gate_features`].
    Summary,
    /// The raw segment.
    Raw,
}

impl GateInput {
    pub fn name(self) -> &'static str {
        match self {
            GateInput::Summary => "summary",
            GateInput::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "summary" => Some(GateInput::Summary),
            "raw" => Some(GateInput::Raw),
            _ => None,
        }
    }

    pub fn feature_dim(self, segment_len: usize) -> usize {
        match self {
            GateInput::Summary => GATE_FEATURE_DIM,
            GateInput::Raw => segment_len,
        }
    }
}

/// Fixed-length segment summary: 64 chunk means, then std, skewness, min, max.
///
/// Bin `b` covers samples `[b·L/64, (b+1)·L/64)`; empty bins are 0.
pub fn gate_features(segment: &[f64]) -> Vec<f64> {
    let n = segment.len();
    let mut out = Vec::with_capacity(GATE_FEATURE_DIM);
    for b in 0..GATE_BINS {
        let (lo, hi) = (b * n / GATE_BINS, (b + 1) * n / GATE_BINS);
        let chunk = &segment[lo..hi];
        out.push(if chunk.is_empty() {
            0.0
        } else {
            chunk.iter().sum::<f64>() / chunk.len() as f64
        });
    }
    if n == 0 {
        out.extend([0.0; 4]);
        return out;
    }
    let mean = segment.iter().sum::<f64>() / n as f64;
    let var = segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = libm::sqrt(var);
    let skew = if std > 0.0 {
        segment.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let min = segment.iter().copied().fold(f64::INFINITY, f64::min);
    let max = segment.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend([std, skew, min, max]);
    out
}

/// `softmax(x_g · W_g)` over experts; `x_g` is `[1, F]`, `W_g` is `[F, N]`.
pub fn gate_forward(g: &mut Graph, features: Var, weight: Var) -> Result<Var> {
    let logits = g.matmul(features, weight)?;
    g.softmax(logits, 1)
}

/// Trainable gate matrix.
#[derive(Debug, Clone)]
pub struct Gate {
    pub input: GateInput,
    pub feature_dim: usize,
    pub n_experts: usize,
    pub weight: ParamId,
}

impl Gate {
    /// Starts at `W_g = 0`, i.e. uniform weights.
    pub fn new(store: &mut ParamStore, input: GateInput, feature_dim: usize, n_experts: usize) -> Self {
        Gate {
            input,
            feature_dim,
            n_experts,
            weight: store.add("gate.weight", Tensor::zeros([feature_dim, n_experts])),
        }
    }

    pub fn features(&self, segment: &[f64]) -> Vec<f64> {
        match self.input {
            GateInput::Summary => gate_features(segment),
            GateInput::Raw => segment.to_vec(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, segment: &[f64]) -> Result<Var> {
        let x = self.features(segment);
        if x.len() != self.feature_dim {
            return Err(Error::shape("gate", &[1, x.len()], &[1, self.feature_dim]));
        }
        let xv = g.constant(Tensor::new([1, x.len()], x)?);
        gate_forward(g, xv, p[self.weight])
    }
}

/// Patch size, square side and encoder of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub patch_size: usize,
    pub k: usize,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
}

/// The five patch sizes `T/4, T/2, T, 2T, 4T`.
pub fn default_patch_sizes(base_width: usize) -> Vec<usize> {
    vec![base_width / 4, base_width / 2, base_width, 2 * base_width, 4 * base_width]
}

/// One tokeniser → encoder → head pipeline.
#[derive(Debug, Clone)]
pub struct Expert {
    pub index: usize,
    pub spec: ExpertSpec,
    pub segment_len: usize,
    pub base_width: usize,
    /// Token grid actually fed to the encoder (leading crop).
    pub token_grid: (usize, usize),
    pub projection: SquareProjection,
    pub encoder: Encoder,
    pub head: ClassifierHead,
    pub plan: EncoderPlan,
}

impl Expert {
    /// Checks that `spec` can run on segments of `segment_len`, returning the grid,
    /// full token grid and cropped token grid.
    pub fn geometry(spec: &ExpertSpec, segment_len: usize, base_width: usize) -> Result<((usize, usize), (usize, usize))> {
        let (rows, width, _) = grid_shape(segment_len, spec.patch_size, base_width)?;
        let (tr, tc) = token_shape(rows, width, spec.k)?;
        let crop = spec.encoder.fit_grid(tr, tc).ok_or_else(|| {
            Error::Config(format!(
                "token grid {tr}×{tc} is too small for the encoder (window {}, {} merges)",
                spec.encoder.window,
                spec.encoder.merges()
            ))
        })?;
        Ok(((tr, tc), crop))
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        index: usize,
        spec: &ExpertSpec,
        segment_len: usize,
        base_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wrap = |e: Error| Error::Expert {
            index,
            patch_size: spec.patch_size,
            source: alloc::boxed::Box::new(e),
        };
        let (_, crop) = Self::geometry(spec, segment_len, base_width).map_err(wrap)?;
        let plan = spec.encoder.plan(crop.0, crop.1).map_err(wrap)?;
        let prefix = format!("expert{index}");
        let projection = SquareProjection::new(store, &prefix, spec.k, spec.encoder.d_model, crop.0, crop.1, rng);
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), &spec.encoder, rng).map_err(wrap)?;
        let head = ClassifierHead::new(store, &prefix, spec.encoder.output_dim(), spec.head_hidden, rng);
        Ok(Expert {
            index,
            spec: spec.clone(),
            segment_len,
            base_width,
            token_grid: crop,
            projection,
            encoder,
            head,
            plan,
        })
    }

    /// Positive-class probability `E_i(x)` as a `[1, 1]` node.
    pub fn forward(&self, g: &mut Graph, p: &Params, segment: &[f64]) -> Result<Var> {
        self.forward_inner(g, p, segment).map_err(|e| Error::Expert {
            index: self.index,
            patch_size: self.spec.patch_size,
            source: alloc::boxed::Box::new(e),
        })
    }

    fn forward_inner(&self, g: &mut Graph, p: &Params, segment: &[f64]) -> Result<Var> {
        if segment.len() != self.segment_len {
            return Err(Error::validation(
                "segment",
                format!("length {} but expert was built for {}", segment.len(), self.segment_len),
            ));
        }
        let grid = build_grid(segment, self.spec.patch_size, self.base_width)?;
        let grid = g.constant(grid.to_tensor());
        let tokens = tokenize_squares(g, p, grid, &self.projection, Some(self.token_grid))?;
        let pooled = self.encoder.encode(g, p, &tokens, &self.plan)?;
        let logit = self.head.logit(g, p, pooled)?;
        Ok(g.sigmoid(logit))
    }
}

/// Weighted sum of expert scores: `gate [1, N] · scores [N, 1]`.
pub fn combine(g: &mut Graph, gate: Var, scores: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(scores)?;
    g.matmul(gate, stacked)
}

/// Graph nodes of one mixture forward pass.
#[derive(Debug, Clone)]
pub struct MoeForward {
    /// Final score `[1, 1]`.
    pub y: Var,
    /// Gate weights `[1, N]`.
    pub gate: Var,
    /// Per-expert scores, each `[1, 1]`.
    pub scores: Vec<Var>,
}

/// Inspected result of one expert for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertOutput {
    pub index: usize,
    pub patch_size: usize,
    pub score: f64,
    pub gate_weight: f64,
}

/// Runs every expert and the gate on `segment`, combining them in fixed expert order.
pub fn moe_forward(g: &mut Graph, p: &Params, segment: &[f64], experts: &[Expert], gate: &Gate) -> Result<MoeForward> {
    if experts.is_empty() {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    if gate.n_experts != experts.len() {
        return Err(Error::shape("gate", &[gate.n_experts], &[experts.len()]));
    }
    let scores = experts
        .iter()
        .map(|e| e.forward(g, p, segment))
        .collect::<Result<Vec<_>>>()?;
    let weights = gate.forward(g, p, segment)?;
    let y = combine(g, weights, &scores)?;
    Ok(MoeForward {
        y,
        gate: weights,
        scores,
    })
}

impl MoeForward {
    pub fn outputs(&self, g: &Graph, experts: &[Expert]) -> Vec<ExpertOutput> {
        let weights = g.value(self.gate).data();
        experts
            .iter()
            .zip(&self.scores)
            .zip(weights)
            .map(|((e, &s), &w)| ExpertOutput {
                index: e.index,
                patch_size: e.spec.patch_size,
                score: g.value(s).data()[0],
                gate_weight: w,
            })
            .collect()
    }
}
