//! Time-square tokenisation: wrap a 1D segment into a 2D grid at patch size `D`,
//! then turn each `k × k` square of the grid into one token.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Params, Tensor, Var};

/// Canonical grid width: 1024 samples, 8 s at 128 Hz.
pub const DEFAULT_BASE_WIDTH: usize = 1024;

/// 2D representation of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub rows: usize,
    pub width: usize,
    /// Row-major `rows × width`.
    pub values: Vec<f64>,
    pub patch_size: usize,
    pub base_width: usize,
    pub downsample_factor: usize,
}

impl Grid2D {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.width..(r + 1) * self.width]
    }

    /// First raw sample index covered by cell `(row, col)`.
    pub fn raw_index(&self, row: usize, col: usize) -> usize {
        row * self.patch_size + col * self.downsample_factor
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.rows, self.width], self.values.clone()).expect("rows × width")
    }
}

/// Grid geometry implied by segment length `len`, patch size `D` and base width `T`.
///
/// Returns `(rows, width, downsample_factor)`.
pub fn grid_shape(len: usize, patch_size: usize, base_width: usize) -> Result<(usize, usize, usize)> {
    if patch_size == 0 || base_width == 0 {
        return Err(Error::validation("patch size", "D and T must be positive"));
    }
    if patch_size > len {
        return Err(Error::validation(
            "patch size",
            format!("D={patch_size} exceeds segment length {len}"),
        ));
    }
    if patch_size > base_width && !patch_size.is_multiple_of(base_width) {
        return Err(Error::validation(
            "patch size",
            format!("D={patch_size} is not a multiple of T={base_width}"),
        ));
    }
    let rows = len / patch_size;
    if patch_size >= base_width {
        Ok((rows, base_width, patch_size / base_width))
    } else {
        Ok((rows, patch_size, 1))
    }
}

/// Wraps `segment` into rows of `D` consecutive samples. For `D > T` each row is
/// mean-pooled down to width `T`; for `D < T` rows keep width `D`. The trailing
/// remainder shorter than `D` is dropped.
pub fn build_grid(segment: &[f64], patch_size: usize, base_width: usize) -> Result<Grid2D> {
    let (rows, width, factor) = grid_shape(segment.len(), patch_size, base_width)?;
    let mut values = Vec::with_capacity(rows * width);
    for raw_row in segment.chunks_exact(patch_size).take(rows) {
        if factor == 1 {
            values.extend_from_slice(raw_row);
        } else {
            values.extend(raw_row.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64));
        }
    }
    Ok(Grid2D {
        rows,
        width,
        values,
        patch_size,
        base_width,
        downsample_factor: factor,
    })
}

/// Token-grid dimensions for squares of side `k`.
pub fn token_shape(rows: usize, width: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 || k > rows.min(width) {
        return Err(Error::validation(
            "square size",
            format!("k={k} must be in 1..={} for a {rows}×{width} grid", rows.min(width)),
        ));
    }
    Ok((rows / k, width / k))
}

/// Flat grid indices of every square, token-major in row-major token order and
/// row-major inside each square. Covers only the first `token_rows × token_cols` tokens.
pub fn square_indices(width: usize, k: usize, token_rows: usize, token_cols: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(token_rows * token_cols * k * k);
    for tr in 0..token_rows {
        for tc in 0..token_cols {
            for a in 0..k {
                let base = (tr * k + a) * width + tc * k;
                index.extend(base..base + k);
            }
        }
    }
    index
}

/// Tokens of one grid: `(token_rows·token_cols) × d_model` embeddings on a graph.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub token_rows: usize,
    pub token_cols: usize,
    pub k: usize,
    pub embeddings: Var,
    /// `(row, col)` of each token, row-major.
    pub positions: Vec<(usize, usize)>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.token_rows * self.token_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learned linear projection of `k × k` squares plus additive row and column
/// position embeddings.
#[derive(Debug, Clone)]
pub struct SquareProjection {
    pub k: usize,
    pub d_model: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    weight: ParamId,
    bias: ParamId,
    row_pos: ParamId,
    col_pos: ParamId,
}

impl SquareProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        d_model: usize,
        max_rows: usize,
        max_cols: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (k * k) as f64;
        SquareProjection {
            k,
            d_model,
            max_rows,
            max_cols,
            weight: store.add(
                format!("{prefix}.proj.weight"),
                Tensor::randn([k * k, d_model], libm::sqrt(1.0 / fan_in), rng),
            ),
            bias: store.add(format!("{prefix}.proj.bias"), Tensor::zeros([d_model])),
            row_pos: store.add(format!("{prefix}.pos.row"), Tensor::randn([max_rows, d_model], 0.02, rng)),
            col_pos: store.add(format!("{prefix}.pos.col"), Tensor::randn([max_cols, d_model], 0.02, rng)),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

/// Projects every `k × k` square of `grid` (a `[rows, width]` node) to a
/// `d_model` embedding and adds its position embedding.
///
/// `crop` keeps only the leading `(token_rows, token_cols)` block; edge squares that do
/// not fill `k × k` are always dropped.
pub fn tokenize_squares(
    g: &mut Graph,
    params: &Params,
    grid: Var,
    projection: &SquareProjection,
    crop: Option<(usize, usize)>,
) -> Result<TokenGrid> {
    let shape = g.shape(grid).to_vec();
    let [rows, width] = shape[..] else {
        return Err(Error::shape("tokenize_squares", &shape, &[0, 0]));
    };
    let k = projection.k;
    let (full_rows, full_cols) = token_shape(rows, width, k)?;
    let (token_rows, token_cols) = match crop {
        Some((r, c)) if r <= full_rows && c <= full_cols && r > 0 && c > 0 => (r, c),
        Some((r, c)) => {
            return Err(Error::Config(format!(
                "crop {r}×{c} outside token grid {full_rows}×{full_cols}"
            )))
        }
        None => (full_rows, full_cols),
    };
    if token_rows > projection.max_rows || token_cols > projection.max_cols {
        return Err(Error::Config(format!(
            "token grid {token_rows}×{token_cols} exceeds position tables {}×{}",
            projection.max_rows, projection.max_cols
        )));
    }
    let n = token_rows * token_cols;
    let index: Arc<[usize]> = square_indices(width, k, token_rows, token_cols).into();
    let patches = g.gather(grid, index, &[n, k * k])?;
    let embedded = g.matmul(patches, params[projection.weight])?;
    let embedded = g.add_row(embedded, params[projection.bias])?;

    let positions: Vec<(usize, usize)> = (0..token_rows)
        .flat_map(|r| (0..token_cols).map(move |c| (r, c)))
        .collect();
    let row_ids: Vec<usize> = positions.iter().map(|&(r, _)| r).collect();
    let col_ids: Vec<usize> = positions.iter().map(|&(_, c)| c).collect();
    let row_emb = g.gather_rows(params[projection.row_pos], &row_ids)?;
    let col_emb = g.gather_rows(params[projection.col_pos], &col_ids)?;
    let pos = g.add(row_emb, col_emb)?;
    let embeddings = g.add(embedded, pos)?;
    Ok(TokenGrid {
        token_rows,
        token_cols,
        k,
        embeddings,
        positions,
    })
}

/// Attention pattern whose cost is being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Every sample attends to every sample.
    Full1d,
    /// Samples attend within contiguous blocks of `block`.
    BlockSparse { block: usize },
    /// Each sample attends to itself and to neighbours at offsets ±1, ±2, ±4, …,
    /// nearest first, up to `budget` keys.
    TimeDecaySparse { budget: usize },
    /// Full attention over `k × k` square tokens of the `(D, T)` grid.
    Tsa {
        patch_size: usize,
        base_width: usize,
        k: usize,
    },
}

/// Variant names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Full1d,
    BlockSparse,
    TimeDecaySparse,
    Tsa,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Full1d,
        VariantKind::BlockSparse,
        VariantKind::TimeDecaySparse,
        VariantKind::Tsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full1d => "full_1d",
            VariantKind::BlockSparse => "block_sparse",
            VariantKind::TimeDecaySparse => "time_decay_sparse",
            VariantKind::Tsa => "tsa",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation("attention variant", String::from(s)))
    }
}

impl AttentionVariant {
    pub fn kind(&self) -> VariantKind {
        match self {
            AttentionVariant::Full1d => VariantKind::Full1d,
            AttentionVariant::BlockSparse { .. } => VariantKind::BlockSparse,
            AttentionVariant::TimeDecaySparse { .. } => VariantKind::TimeDecaySparse,
            AttentionVariant::Tsa { .. } => VariantKind::Tsa,
        }
    }

    /// The variant's size parameter: `k`, `b` or the time-decay budget (0 for full).
    pub fn parameter(&self) -> usize {
        match *self {
            AttentionVariant::Full1d => 0,
            AttentionVariant::BlockSparse { block } => block,
            AttentionVariant::TimeDecaySparse { budget } => budget,
            AttentionVariant::Tsa { k, .. } => k,
        }
    }
}

/// Token and attention-pair counts of one variant at sequence length `length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub variant: AttentionVariant,
    pub length: usize,
    pub token_count: u64,
    pub attention_pair_count: u64,
}

pub fn build_cost_model(variant: AttentionVariant, length: usize) -> Result<CostModel> {
    if length == 0 {
        return Err(Error::validation("sequence length", "must be positive"));
    }
    let l = length as u64;
    let (tokens, pairs) = match variant {
        AttentionVariant::Full1d => (l, l * l),
        AttentionVariant::BlockSparse { block } => {
            if block == 0 {
                return Err(Error::validation("block size", "must be positive"));
            }
            let b = block as u64;
            let rem = l % b;
            (l, (l / b) * b * b + rem * rem)
        }
        AttentionVariant::TimeDecaySparse { budget } => {
            if budget == 0 {
                return Err(Error::validation("time-decay budget", "must be positive"));
            }
            (l, time_decay_pairs(length, budget))
        }
        AttentionVariant::Tsa {
            patch_size,
            base_width,
            k,
        } => {
            let (rows, width, _) = grid_shape(length, patch_size, base_width)?;
            if k == 0 {
                return Err(Error::validation("square size", "k must be positive"));
            }
            let tokens = ((rows / k) * (width / k)) as u64;
            (tokens, tokens * tokens)
        }
    };
    Ok(CostModel {
        variant,
        length,
        token_count: tokens,
        attention_pair_count: pairs,
    })
}

fn time_decay_pairs(length: usize, budget: usize) -> u64 {
    let mut total = 0u64;
    for i in 0..length {
        let mut keys = 1usize;
        let mut offset = 1usize;
        while keys < budget && offset < length {
            if i >= offset {
                keys += 1;
            }
            if keys < budget && i + offset < length {
                keys += 1;
            }
            offset *= 2;
        }
        total += keys as u64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn grid_shapes_at_ten_minutes() {
        let seg = ramp(76_800);
        let g = build_grid(&seg, 1024, 1024).unwrap();
        assert_eq!((g.rows, g.width, g.downsample_factor), (75, 1024, 1));
        let g = build_grid(&seg, 2048, 1024).unwrap();
        assert_eq!((g.rows, g.width, g.downsample_factor), (37, 1024, 2));
        // Last consumed raw index is 37·2048 − 1 = 75775, so the final 1024 are dropped.
        assert_eq!(g.values.last().copied(), Some((75_774.0 + 75_775.0) / 2.0));
        let g = build_grid(&seg, 512, 1024).unwrap();
        assert_eq!((g.rows, g.width, g.downsample_factor), (150, 512, 1));
        let g = build_grid(&seg, 4096, 1024).unwrap();
        assert_eq!((g.rows, g.width, g.downsample_factor), (18, 1024, 4));
        let g = build_grid(&seg, 256, 1024).unwrap();
        assert_eq!((g.rows, g.width), (300, 256));
    }

    #[test]
    fn grid_validation() {
        assert!(build_grid(&ramp(100), 200, 64).is_err());
        assert!(build_grid(&ramp(10_000), 1536, 1024).is_err());
        assert!(build_grid(&ramp(100), 0, 64).is_err());
    }

    #[test]
    fn flatten_reproduces_consumed_prefix() {
        let seg: Vec<f64> = (0..5000).map(|i| libm::sin(i as f64 * 0.37)).collect();
        for d in [64, 100, 128] {
            let g = build_grid(&seg, d, 128).unwrap();
            assert_eq!(g.values, seg[..g.rows * d]);
        }
    }

    #[test]
    fn downsampling_is_chunk_mean() {
        let seg: Vec<f64> = (0..4096).map(|i| libm::cos(i as f64 * 0.11) * (i % 7) as f64).collect();
        let g = build_grid(&seg, 512, 128).unwrap();
        assert_eq!(g.downsample_factor, 4);
        for r in 0..g.rows {
            for c in 0..g.width {
                let start = r * 512 + c * 4;
                let brute = (seg[start] + seg[start + 1] + seg[start + 2] + seg[start + 3]) / 4.0;
                assert!((g.row(r)[c] - brute).abs() < 1e-12);
                assert_eq!(g.raw_index(r, c), start);
            }
        }
        let constant = vec![3.25; 4096];
        let g = build_grid(&constant, 1024, 128).unwrap();
        assert!(g.values.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn square_tokens_follow_time_order() {
        let seg = ramp(8192);
        let grid = build_grid(&seg, 256, 128).unwrap();
        let (tr, tc) = token_shape(grid.rows, grid.width, 4).unwrap();
        let idx = square_indices(grid.width, 4, tr, tc);
        let per_token = 16;
        let mut last_row_start = None;
        for r in 0..tr {
            let first = &idx[r * tc * per_token..(r * tc + 1) * per_token];
            let min_raw = first.iter().map(|&i| grid.values[i]).fold(f64::INFINITY, f64::min);
            if let Some(prev) = last_row_start {
                assert!(min_raw > prev);
            }
            last_row_start = Some(min_raw);
            // Token (r, 0) starts at raw index r·k·D/f.
            assert_eq!(min_raw, (r * 4 * 256) as f64 + 0.5);
        }
    }

    #[test]
    fn tokenize_shapes_and_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = SquareProjection::new(&mut store, "e0", 2, 8, 16, 16, &mut rng);
        let seg: Vec<f64> = (0..640).map(|i| i as f64 / 640.0).collect();
        let grid = build_grid(&seg, 32, 32).unwrap();
        let mut g = Graph::new();
        let p = g.params(&store, false);
        let gv = g.constant(grid.to_tensor());
        let tokens = tokenize_squares(&mut g, &p, gv, &proj, None).unwrap();
        assert_eq!((tokens.token_rows, tokens.token_cols), (10, 16));
        assert_eq!(g.shape(tokens.embeddings), &[160, 8]);
        assert_eq!(tokens.positions[17], (1, 1));
        let cropped = tokenize_squares(&mut g, &p, gv, &proj, Some((8, 16))).unwrap();
        assert_eq!(g.shape(cropped.embeddings), &[128, 8]);
        // Cropping keeps the leading tokens unchanged.
        assert_eq!(
            &g.value(cropped.embeddings).data()[..128 * 8],
            &g.value(tokens.embeddings).data()[..128 * 8]
        );
        assert!(tokenize_squares(&mut g, &p, gv, &proj, Some((11, 16))).is_err());

        let big = SquareProjection::new(&mut store, "e1", 40, 8, 16, 16, &mut rng);
        let p = g.params(&store, false);
        assert!(tokenize_squares(&mut g, &p, gv, &big, None).is_err());
    }

    #[test]
    fn cost_model_examples() {
        let full = build_cost_model(AttentionVariant::Full1d, 1024).unwrap();
        assert_eq!((full.token_count, full.attention_pair_count), (1024, 1_048_576));
        let block = build_cost_model(AttentionVariant::BlockSparse { block: 64 }, 1024).unwrap();
        assert_eq!(block.attention_pair_count, 65_536);
        let tsa = AttentionVariant::Tsa {
            patch_size: 1024,
            base_width: 1024,
            k: 4,
        };
        let c = build_cost_model(tsa, 76_800).unwrap();
        assert_eq!(c.token_count, 4608);
        assert_eq!(c.attention_pair_count, 4608 * 4608);
        let full = build_cost_model(AttentionVariant::Full1d, 76_800).unwrap();
        let ratio = full.attention_pair_count as f64 / c.attention_pair_count as f64;
        assert!((ratio - 277.78).abs() < 0.01, "{ratio}");
        assert!("nope".parse::<VariantKind>().is_err());
        assert_eq!("tsa".parse::<VariantKind>().unwrap(), VariantKind::Tsa);
    }

    #[test]
    fn time_decay_matches_enumeration() {
        // Enumerate the neighbourhood sets explicitly.
        for (len, budget) in [(1, 3), (7, 4), (33, 6), (100, 50)] {
            let mut total = 0u64;
            for i in 0..len as i64 {
                let mut keys = vec![i];
                let mut off = 1i64;
                while off < len as i64 {
                    for j in [i - off, i + off] {
                        if (0..len as i64).contains(&j) && keys.len() < budget {
                            keys.push(j);
                        }
                    }
                    off *= 2;
                }
                total += keys.len() as u64;
            }
            let c = build_cost_model(AttentionVariant::TimeDecaySparse { budget }, len).unwrap();
            assert_eq!(c.attention_pair_count, total);
            assert!(c.attention_pair_count <= (len * budget) as u64);
        }
    }

    proptest! {
        #[test]
        fn token_reduction_at_least_tenfold(len in 76_800usize..400_000, k in 4usize..9) {
            let c = build_cost_model(
                AttentionVariant::Tsa { patch_size: 1024, base_width: 1024, k },
                len,
            ).unwrap();
            prop_assert!(c.token_count * 10 <= len as u64);
        }

        #[test]
        fn grid_row_count_rule(len in 1usize..20_000, d_exp in 0u32..6, t_exp in 3u32..8) {
            let d = 16usize << d_exp;
            let t = 1usize << t_exp;
            match build_grid(&vec![0.0; len], d, t) {
                Ok(g) => {
                    prop_assert_eq!(g.rows, len / d);
                    prop_assert_eq!(g.width, d.min(t));
                    prop_assert_eq!(g.downsample_factor * g.width, d.max(g.width));
                    prop_assert_eq!(g.values.len(), g.rows * g.width);
                }
                Err(_) => prop_assert!(d > len || (d > t && !d.is_multiple_of(t))),
            }
        }
    }
}
