use rand::Rng;

use super::lecun_std;
use crate::embed::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Largest flattened token count the dense oracle accepts by default.
pub const DEFAULT_TOKEN_CAP: usize = 20_000;

/// Standard multi-head attention maps over flattened grid tokens.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl DenseParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        let std = lecun_std(dim);
        Ok(Self {
            dim,
            heads,
            wq: store.normal(format!("{prefix}.wq"), vec![dim, dim], std, rng)?,
            wk: store.normal(format!("{prefix}.wk"), vec![dim, dim], std, rng)?,
            wv: store.normal(format!("{prefix}.wv"), vec![dim, dim], std, rng)?,
            wo: store.normal(format!("{prefix}.wo"), vec![dim, dim], std, rng)?,
            bo: store.zeros(format!("{prefix}.bo"), vec![dim])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DenseOutput {
    /// `[N', C', D]`.
    pub out: Var,
    /// `[H, T, T]` with `T = N' * C'`, tokens flattened spatial-major.
    pub attn: Var,
}

/// Full attention over all `T = N' * C'` grid tokens. Refuses grids with more
/// than `token_cap` tokens with [`Error::Capacity`] before allocating.
pub fn full_ss_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: &TokenGrid,
    params: &DenseParams,
    token_cap: usize,
) -> Result<DenseOutput> {
    let (ns, nc) = (grid.spatial_len(), grid.spectral_len());
    let tokens = ns * nc;
    if tokens > token_cap {
        return Err(Error::Capacity { tokens, cap: token_cap });
    }
    let (d, h) = (params.dim, params.heads);
    if g.shape(grid.tokens) != [ns, nc, d] {
        return Err(Error::dim(format!(
            "grid {:?} does not match [{ns}, {nc}, {d}]",
            g.shape(grid.tokens)
        )));
    }
    let dh = d / h;
    let x = g.reshape(grid.tokens, vec![tokens, d])?;
    let split = |g: &mut Graph<'_, T>, w: ParamId| -> Result<Var> {
        let wv = g.param(w);
        let y = g.linear(x, wv, "dense_proj")?;
        let y = g.reshape(y, vec![tokens, h, dh])?;
        g.transpose01(y)
    };
    let q = split(g, params.wq)?;
    let k = split(g, params.wk)?;
    let v = split(g, params.wv)?;
    let q = g.scale(q, T::from_f64((dh as f64).sqrt().recip()))?;
    let scores = g.bmm(q, k, true, "dense")?;
    let attn = g.softmax(scores)?;
    let y = g.bmm(attn, v, false, "dense")?;
    let y = g.transpose01(y)?;
    let y = g.reshape(y, vec![tokens, d])?;
    let (wo, bo) = (g.param(params.wo), g.param(params.bo));
    let y = g.linear(y, wo, "dense_proj")?;
    let y = g.add_bias(y, bo)?;
    let out = g.reshape(y, vec![ns, nc, d])?;
    Ok(DenseOutput { out, attn })
}
