use rand::Rng;

use super::pool::{atten_pool, PoolParams};
use super::{lecun_std, LessConfig};
use crate::embed::TokenGrid;
use crate::error::{Error, Result};
use crate::rope::PhaseTable;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Per-head query/key/value maps of one branch, each `[H, d, d]`.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl BranchParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        heads: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = vec![heads, d, d];
        Ok(Self {
            wq: store.normal(format!("{prefix}.wq"), shape.clone(), lecun_std(d), rng)?,
            wk: store.normal(format!("{prefix}.wk"), shape.clone(), lecun_std(d), rng)?,
            wv: store.normal(format!("{prefix}.wv"), shape, lecun_std(d), rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RankParams {
    pub spatial: BranchParams,
    pub spectral: BranchParams,
}

#[derive(Debug, Clone)]
pub struct LessAttnParams {
    pub cfg: LessConfig,
    /// Pools the spectral axis into spatial tokens of width `d1`.
    pub pool_spatial: PoolParams,
    /// Pools the spatial axis into spectral tokens of width `d2`.
    pub pool_spectral: PoolParams,
    pub ranks: Vec<RankParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl LessAttnParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: LessConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.heads);
        let pool_spatial = PoolParams::init(store, &format!("{prefix}.pool_s"), d, h, cfg.d1, rng)?;
        let pool_spectral = PoolParams::init(store, &format!("{prefix}.pool_c"), d, h, cfg.d2, rng)?;
        let ranks = (0..cfg.rank)
            .map(|i| {
                Ok(RankParams {
                    spatial: BranchParams::init(store, &format!("{prefix}.r{i}.s"), h, cfg.d1, rng)?,
                    spectral: BranchParams::init(store, &format!("{prefix}.r{i}.c"), h, cfg.d2, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            pool_spatial,
            pool_spectral,
            ranks,
            out_w: store.normal(format!("{prefix}.out_w"), vec![d, d], lecun_std(d), rng)?,
            out_b: store.zeros(format!("{prefix}.out_b"), vec![d])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[H, L, L]`, rows sum to one.
    pub attn: Var,
    /// `[H, L, d]`.
    pub values: Var,
    /// `[H, L, d]`, `attn * values`.
    pub output: Var,
}

/// Single-axis multi-head attention over pooled tokens `[H, L, d]`. Queries
/// and keys are rotated by `phases` when given; row 0 of the table is the
/// CLS token and carries angle zero.
pub fn branch_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    tokens: Var,
    params: &BranchParams,
    phases: Option<&PhaseTable>,
    label: &str,
) -> Result<BranchOutput> {
    let &[_, l, d] = g.shape(tokens) else {
        return Err(Error::dim(format!("branch tokens must be [H, L, d], got {:?}", g.shape(tokens))));
    };
    let (wq, wk, wv) = (g.param(params.wq), g.param(params.wk), g.param(params.wv));
    let mut q = g.bmm(tokens, wq, false, "branch_proj")?;
    let mut k = g.bmm(tokens, wk, false, "branch_proj")?;
    let values = g.bmm(tokens, wv, false, "branch_proj")?;
    if let Some(table) = phases {
        if table.tokens() != l || 2 * table.pairs() != d {
            return Err(Error::dim(format!(
                "phase table [{}, {}] does not fit {l} tokens of width {d}",
                table.tokens(),
                table.pairs()
            )));
        }
        let (cos, sin) = table.trig::<T>();
        q = g.rope(q, cos.clone(), sin.clone())?;
        k = g.rope(k, cos, sin)?;
    }
    let q = g.scale(q, T::from_f64((d as f64).sqrt().recip()))?;
    let scores = g.bmm(q, k, true, label)?;
    let attn = g.softmax(scores)?;
    let output = g.bmm(attn, values, false, label)?;
    Ok(BranchOutput { attn, values, output })
}

#[derive(Debug, Clone)]
pub struct RankFactors {
    pub spatial: BranchOutput,
    pub spectral: BranchOutput,
}

#[derive(Debug, Clone)]
pub struct LessOutput {
    /// `[N', C', D]` after the output projection.
    pub out: Var,
    /// `[N', C', D]` sum of Kronecker compositions, before projection.
    pub composed: Var,
    pub factors: Vec<RankFactors>,
}

/// Factorized attention: pool each axis, run per-rank spatial and spectral
/// branch attention, compose by Kronecker product and sum over ranks.
///
/// With spatial-major token flattening `t = n * C' + c`, rank `i` realizes
/// the joint operator `(A_S^i (x) A_C^i)(V_S^i (x) V_C^i)`.
pub fn less_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: &TokenGrid,
    params: &LessAttnParams,
) -> Result<LessOutput> {
    let cfg = &params.cfg;
    let (ns, nc) = (grid.spatial_len(), grid.spectral_len());
    if g.shape(grid.tokens) != [ns, nc, cfg.dim] {
        return Err(Error::dim(format!(
            "grid {:?} does not match [{ns}, {nc}, {}]",
            g.shape(grid.tokens),
            cfg.dim
        )));
    }
    cfg.check_grid(ns, nc)?;

    let spatial_tokens = atten_pool(g, grid.tokens, &params.pool_spatial, "pool")?.tokens;
    let swapped = g.transpose01(grid.tokens)?;
    let spectral_tokens = atten_pool(g, swapped, &params.pool_spectral, "pool")?.tokens;

    let (spatial_phases, spectral_phases) = if cfg.use_rope {
        (
            Some(cfg.rope.spatial_table(&grid.coords)),
            Some(cfg.rope.spectral_table(&grid.wavelengths)),
        )
    } else {
        (None, None)
    };

    let mut composed: Option<Var> = None;
    let mut factors = Vec::with_capacity(params.ranks.len());
    for rank in &params.ranks {
        let s = branch_attention(g, spatial_tokens, &rank.spatial, spatial_phases.as_ref(), "spatial")?;
        let c = branch_attention(g, spectral_tokens, &rank.spectral, spectral_phases.as_ref(), "spectral")?;
        let y = g.kron_compose(s.output, c.output, "compose")?;
        composed = Some(match composed {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
        factors.push(RankFactors { spatial: s, spectral: c });
    }
    let composed = composed.expect("rank >= 1");
    let (w, b) = (g.param(params.out_w), g.param(params.out_b));
    let out = g.linear(composed, w, "out_proj")?;
    let out = g.add_bias(out, b)?;
    Ok(LessOutput { out, composed, factors })
}
