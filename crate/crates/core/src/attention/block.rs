use rand::Rng;

use super::less::{less_attention, LessAttnParams};
use super::{lecun_std, LessConfig};
use crate::embed::TokenGrid;
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar};

/// Pre-norm residual block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))` with
/// a `4D` GELU hidden layer.
#[derive(Debug, Clone)]
pub struct LessBlockParams {
    pub attn: LessAttnParams,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl LessBlockParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: LessConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        let hidden = 4 * d;
        Ok(Self {
            attn: LessAttnParams::init(store, &format!("{prefix}.attn"), cfg, rng)?,
            ln1_g: store.ones(format!("{prefix}.ln1_g"), vec![d])?,
            ln1_b: store.zeros(format!("{prefix}.ln1_b"), vec![d])?,
            ln2_g: store.ones(format!("{prefix}.ln2_g"), vec![d])?,
            ln2_b: store.zeros(format!("{prefix}.ln2_b"), vec![d])?,
            mlp_w1: store.normal(format!("{prefix}.mlp_w1"), vec![d, hidden], lecun_std(d), rng)?,
            mlp_b1: store.zeros(format!("{prefix}.mlp_b1"), vec![hidden])?,
            mlp_w2: store.normal(format!("{prefix}.mlp_w2"), vec![hidden, d], lecun_std(hidden), rng)?,
            mlp_b2: store.zeros(format!("{prefix}.mlp_b2"), vec![d])?,
        })
    }

    pub fn cfg(&self) -> &LessConfig {
        &self.attn.cfg
    }
}

pub fn less_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: &TokenGrid,
    params: &LessBlockParams,
) -> Result<TokenGrid> {
    let x = grid.tokens;
    let (g1, b1) = (g.param(params.ln1_g), g.param(params.ln1_b));
    let h = g.layer_norm(x, g1, b1)?;
    let attn = less_attention(g, &grid.with_tokens(h), &params.attn)?;
    let x = g.add(x, attn.out)?;

    let (g2, b2) = (g.param(params.ln2_g), g.param(params.ln2_b));
    let h = g.layer_norm(x, g2, b2)?;
    let (w1, bb1) = (g.param(params.mlp_w1), g.param(params.mlp_b1));
    let h = g.linear(h, w1, "mlp")?;
    let h = g.add_bias(h, bb1)?;
    let h = g.gelu(h)?;
    let (w2, bb2) = (g.param(params.mlp_w2), g.param(params.mlp_b2));
    let h = g.linear(h, w2, "mlp")?;
    let h = g.add_bias(h, bb2)?;
    let x = g.add(x, h)?;
    Ok(grid.with_tokens(x))
}
