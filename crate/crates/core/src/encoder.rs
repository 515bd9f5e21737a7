//! 2D transformer encoder over square tokens with global or shifted-window attention.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Graph, ParamId, ParamStore, Params, Tensor, Var};
use crate::tsa::TokenGrid;

/// Additive pre-softmax bias that removes a key from a query's window.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Every token attends to every token.
    Global,
    /// Attention inside non-overlapping windows, hierarchical with merging.
    Windowed,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Windowed => "windowed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" | "vit" => Some(Scope::Global),
            "windowed" | "swin" => Some(Scope::Windowed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub scope: Scope,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Window side in tokens (windowed scope only).
    pub window: usize,
    /// Alternate blocks attend over windows rolled by `window / 2`.
    pub shift: bool,
    /// Block counts after which 2×2 neighbours merge (grid sides halve, width doubles).
    pub merge_stages: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Small configuration used throughout the tests.
    pub fn toy() -> Self {
        EncoderConfig {
            scope: Scope::Windowed,
            depth: 4,
            d_model: 32,
            heads: 4,
            window: 4,
            shift: true,
            merge_stages: vec![2],
            mlp_ratio: 2,
        }
    }

    /// Shape-independent checks.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.scope == Scope::Windowed && self.window == 0 {
            problems.push(String::from("window must be positive"));
        }
        if self.mlp_ratio == 0 {
            problems.push(String::from("mlp_ratio must be positive"));
        }
        if let Some(bad) = self.merge_stages.iter().find(|&&s| s > self.depth) {
            problems.push(format!("merge stage {bad} beyond depth {}", self.depth));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn merges(&self) -> usize {
        self.merge_stages.len()
    }

    pub fn output_dim(&self) -> usize {
        self.d_model << self.merges()
    }

    /// Largest leading `(rows, cols)` crop of a token grid that this configuration
    /// accepts (maximal area, then more rows), or `None` when nothing fits.
    pub fn fit_grid(&self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for r in (1..=rows).rev() {
            if best.is_some_and(|(br, bc)| r * cols < br * bc) {
                break;
            }
            if let Some(c) = (1..=cols).rev().find(|&c| self.tiles(r, c)) {
                if best.is_none_or(|(br, bc)| r * c > br * bc) {
                    best = Some((r, c));
                }
            }
        }
        best
    }

    /// Window side used on a `rows × cols` stage: the configured window, shrunk to
    /// the shorter side when the stage is smaller.
    pub fn effective_window(&self, rows: usize, cols: usize) -> usize {
        self.window.min(rows).min(cols)
    }

    /// Whether every stage of a `rows × cols` grid can be windowed and merged.
    fn tiles(&self, rows: usize, cols: usize) -> bool {
        let (mut r, mut c) = (rows, cols);
        for stage in 0..=self.merges() {
            if r == 0 || c == 0 {
                return false;
            }
            if self.scope == Scope::Windowed {
                let w = self.effective_window(r, c);
                if r % w != 0 || c % w != 0 {
                    return false;
                }
            }
            if stage < self.merges() {
                if r % 2 != 0 || c % 2 != 0 {
                    return false;
                }
                r /= 2;
                c /= 2;
            }
        }
        true
    }

    /// Precomputes the per-block attention layouts for a `rows × cols` token grid,
    /// rejecting grids whose sides the windows or merges do not divide.
    pub fn plan(&self, rows: usize, cols: usize) -> Result<EncoderPlan> {
        self.validate()?;
        let mut merges = self.merge_stages.clone();
        merges.sort_unstable();
        let mut stages = Vec::new();
        let (mut r, mut c, mut d) = (rows, cols, self.d_model);
        let mut start = 0;
        let mut boundaries = merges.clone();
        boundaries.push(self.depth);
        for (i, &end) in boundaries.iter().enumerate() {
            if r == 0 || c == 0 {
                return Err(Error::Config(format!("empty token grid at stage {i}")));
            }
            let mut blocks = Vec::new();
            for b in start..end {
                blocks.push(self.block_plan(r, c, b - start, i)?);
            }
            let merge = if i < merges.len() {
                if r % 2 != 0 || c % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {i} grid {r}×{c} cannot be merged 2×2"
                    )));
                }
                Some(merge_order(r, c).into())
            } else {
                None
            };
            stages.push(StagePlan {
                rows: r,
                cols: c,
                d_model: d,
                blocks,
                merge,
            });
            if i < merges.len() {
                r /= 2;
                c /= 2;
                d *= 2;
            }
            start = end;
        }
        Ok(EncoderPlan {
            stages,
            out_rows: r,
            out_cols: c,
        })
    }

    fn block_plan(&self, rows: usize, cols: usize, index_in_stage: usize, stage: usize) -> Result<BlockPlan> {
        let n = rows * cols;
        match self.scope {
            Scope::Global => Ok(BlockPlan {
                layout: Arc::new(AttentionLayout::global(n)),
                order: None,
            }),
            Scope::Windowed => {
                let w = self.effective_window(rows, cols);
                if !rows.is_multiple_of(w) || !cols.is_multiple_of(w) {
                    return Err(Error::Config(format!(
                        "window {w} does not tile the {rows}×{cols} token grid at stage {stage}"
                    )));
                }
                let shifted = self.shift && index_in_stage % 2 == 1 && w < rows.min(cols);
                let windows = window_partition(rows, cols, w, shifted)?;
                Ok(compile_windows(&windows, n))
            }
        }
    }
}

/// A token permutation and its inverse.
pub type Permutation = (Arc<[usize]>, Arc<[usize]>);

/// Attention layout and token permutation of one block.
#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub layout: Arc<AttentionLayout>,
    /// `(order, inverse)`: gather `order` to group windows contiguously, `inverse`
    /// to restore grid order. `None` for a single window in grid order.
    pub order: Option<Permutation>,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub rows: usize,
    pub cols: usize,
    pub d_model: usize,
    pub blocks: Vec<BlockPlan>,
    /// Row gather realising the 2×2 merge that ends this stage.
    pub merge: Option<Arc<[usize]>>,
}

/// Geometry of a whole encoder for one token-grid shape.
#[derive(Debug, Clone)]
pub struct EncoderPlan {
    pub stages: Vec<StagePlan>,
    pub out_rows: usize,
    pub out_cols: usize,
}

/// One attention window: token indices (row-major grid indices) and an optional
/// additive mask over `tokens × tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub tokens: Vec<usize>,
    pub mask: Option<Vec<f64>>,
}

/// Grid index found at each position after cyclically rolling the grid by `-shift`
/// along both axes: `rolled[p] = original[(r + shift) % rows, (c + shift) % cols]`.
pub fn roll_indices(rows: usize, cols: usize, shift: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(((r + shift) % rows) * cols + (c + shift) % cols);
        }
    }
    out
}

/// Inverse of a permutation given as a gather list.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits a `rows × cols` grid into `window × window` groups. With `shift` the grid is
/// first rolled by `window / 2`; pairs that were not adjacent before the roll are
/// masked out.
pub fn window_partition(rows: usize, cols: usize, window: usize, shift: bool) -> Result<Vec<Window>> {
    if window == 0 || !rows.is_multiple_of(window) || !cols.is_multiple_of(window) {
        return Err(Error::Config(format!("window {window} does not tile a {rows}×{cols} grid")));
    }
    let s = if shift { window / 2 } else { 0 };
    let rolled = roll_indices(rows, cols, s);
    let region = |pos: usize, side: usize| -> usize {
        if s == 0 || pos < side - window {
            0
        } else if pos < side - s {
            1
        } else {
            2
        }
    };
    let mut windows = Vec::with_capacity((rows / window) * (cols / window));
    for wr in 0..rows / window {
        for wc in 0..cols / window {
            let mut tokens = Vec::with_capacity(window * window);
            let mut labels = Vec::with_capacity(window * window);
            for a in 0..window {
                for b in 0..window {
                    let (r, c) = (wr * window + a, wc * window + b);
                    tokens.push(rolled[r * cols + c]);
                    labels.push(region(r, rows) * 3 + region(c, cols));
                }
            }
            let mask = if labels.iter().all(|&l| l == labels[0]) {
                None
            } else {
                let mut m = vec![0.0; labels.len() * labels.len()];
                for (i, li) in labels.iter().enumerate() {
                    for (j, lj) in labels.iter().enumerate() {
                        if li != lj {
                            m[i * labels.len() + j] = MASK_VALUE;
                        }
                    }
                }
                Some(m)
            };
            windows.push(Window { tokens, mask });
        }
    }
    Ok(windows)
}

fn compile_windows(windows: &[Window], n: usize) -> BlockPlan {
    let group = windows.first().map_or(n, |w| w.tokens.len());
    let order: Vec<usize> = windows.iter().flat_map(|w| w.tokens.iter().copied()).collect();
    let identity = order.iter().enumerate().all(|(i, &t)| i == t);
    let masks: Vec<Option<Vec<f64>>> = if windows.iter().any(|w| w.mask.is_some()) {
        windows.iter().map(|w| w.mask.clone()).collect()
    } else {
        Vec::new()
    };
    let layout = Arc::new(AttentionLayout {
        tokens: n,
        group,
        masks,
    });
    let order = if identity {
        None
    } else {
        let inverse = invert_permutation(&order);
        Some((order.into(), inverse.into()))
    };
    BlockPlan { layout, order }
}

/// Row order that places each 2×2 neighbourhood contiguously:
/// `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)` for every merged token `(i, j)`.
pub fn merge_order(rows: usize, cols: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(rows * cols);
    for i in 0..rows / 2 {
        for j in 0..cols / 2 {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                order.push((2 * i + dr) * cols + 2 * j + dc);
            }
        }
    }
    order
}

/// `Softmax(Q Kᵀ / √d_k) V` for `q[m, d_k]`, `k[n, d_k]`, `v[n, d_v]`, built from
/// primitive graph ops.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[1] != d_k || ks[1] != d_k {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention", &ks, &vs));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / libm::sqrt(d_k as f64));
    let weights = g.softmax(scaled, 1)?;
    g.matmul(weights, v)
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = libm::sqrt(1.0 / fan_in as f64);
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn([fan_in, fan_out], std, rng)),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl Block {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = d * mlp_ratio;
        Block {
            query: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            mlp_in: Linear::new(store, &format!("{name}.mlp1"), d, hidden, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp2"), hidden, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            heads,
        }
    }

    /// attention → residual → norm → MLP → residual → norm.
    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, plan: &BlockPlan) -> Result<Var> {
        let grouped = match &plan.order {
            Some((order, _)) => g.gather_rows(x, order)?,
            None => x,
        };
        let q = self.query.forward(g, p, grouped)?;
        let k = self.key.forward(g, p, grouped)?;
        let v = self.value.forward(g, p, grouped)?;
        let attended = g.grouped_attention(q, k, v, plan.layout.clone(), self.heads)?;
        let attended = match &plan.order {
            Some((_, inverse)) => g.gather_rows(attended, inverse)?,
            None => attended,
        };
        let projected = self.out.forward(g, p, attended)?;
        let x = g.add(x, projected)?;
        let x = self.norm1.forward(g, p, x)?;
        let h = self.mlp_in.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = self.mlp_out.forward(g, p, h)?;
        let x = g.add(x, h)?;
        self.norm2.forward(g, p, x)
    }
}

/// Stack of transformer blocks with optional 2×2 token merging between stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// Blocks grouped by stage.
    pub stages: Vec<Vec<Block>>,
    /// Merge projections `4d → 2d`, one per merge.
    pub merges: Vec<Linear>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut merges_at = config.merge_stages.clone();
        merges_at.sort_unstable();
        let mut boundaries = merges_at.clone();
        boundaries.push(config.depth);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut d = config.d_model;
        let mut start = 0;
        for (i, &end) in boundaries.iter().enumerate() {
            let blocks = (start..end)
                .map(|b| Block::new(store, &format!("{prefix}.block{b}"), d, config.heads, config.mlp_ratio, rng))
                .collect();
            stages.push(blocks);
            if i < merges_at.len() {
                merges.push(Linear::new(store, &format!("{prefix}.merge{i}"), 4 * d, 2 * d, false, rng));
                d *= 2;
            }
            start = end;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
            merges,
        })
    }

    /// Token features after every block and merge: `[out_rows·out_cols, output_dim]`.
    pub fn forward_tokens(&self, g: &mut Graph, p: &Params, x: Var, plan: &EncoderPlan) -> Result<Var> {
        let (n, d) = g.value(x).dims2();
        let first = plan
            .stages
            .first()
            .ok_or_else(|| Error::Config(String::from("empty encoder plan")))?;
        if n != first.rows * first.cols || d != self.config.d_model || plan.stages.len() != self.stages.len() {
            return Err(Error::shape(
                "encode",
                &[n, d],
                &[first.rows * first.cols, self.config.d_model],
            ));
        }
        let mut x = x;
        for (s, (blocks, stage)) in self.stages.iter().zip(&plan.stages).enumerate() {
            for (block, bp) in blocks.iter().zip(&stage.blocks) {
                x = block.forward(g, p, x, bp)?;
            }
            if let Some(order) = &stage.merge {
                let gathered = g.gather_rows(x, order)?;
                let quarter = stage.rows * stage.cols / 4;
                let concat = g.reshape(gathered, &[quarter, 4 * stage.d_model])?;
                x = self.merges[s].forward(g, p, concat)?;
            }
        }
        Ok(x)
    }

    /// Encodes a token grid and mean-pools the final tokens to `[1, output_dim]`.
    pub fn encode(&self, g: &mut Graph, p: &Params, tokens: &TokenGrid, plan: &EncoderPlan) -> Result<Var> {
        let x = self.forward_tokens(g, p, tokens.embeddings, plan)?;
        g.mean_pool(x)
    }
}

/// Two-layer MLP from pooled features to one logit.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub input_dim: usize,
    pub hidden: Linear,
    pub output: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        ClassifierHead {
            input_dim,
            hidden: Linear::new(store, &format!("{prefix}.head1"), input_dim, hidden, true, rng),
            output: Linear::new(store, &format!("{prefix}.head2"), hidden, 1, true, rng),
        }
    }

    pub fn logit(&self, g: &mut Graph, p: &Params, features: Var) -> Result<Var> {
        let (_, d) = g.value(features).dims2();
        if d != self.input_dim {
            return Err(Error::shape("classify", &[1, d], &[1, self.input_dim]));
        }
        let h = self.hidden.forward(g, p, features)?;
        let h = g.gelu(h);
        self.output.forward(g, p, h)
    }
}

/// Positive-class probability `sigmoid(logit)`.
pub fn classify(g: &mut Graph, p: &Params, features: Var, head: &ClassifierHead) -> Result<Var> {
    let logit = head.logit(g, p, features)?;
    Ok(g.sigmoid(logit))
}
