//! Tied patch embedding and CLS augmentation.
//!
//! A single `P^2 x D` projection is shared by every channel, so the same
//! parameters embed cubes with any channel count. The augmented grid is
//! `[(N+1), (C+1), D]`: row 0 holds the spectral CLS token (the query used
//! when pooling the spatial axis), column 0 holds the spatial CLS token, and
//! `[0, 0]` is the global CLS token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::spectral::HyperCube;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub patch: usize,
    pub dim: usize,
    pub proj: ParamId,
    pub bias: ParamId,
    pub cls_spatial: ParamId,
    pub cls_spectral: ParamId,
    pub cls_global: ParamId,
}

impl EmbedParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (patch * patch) as f64;
        Ok(Self {
            patch,
            dim,
            proj: store.normal(format!("{prefix}.proj"), vec![patch * patch, dim], fan_in.sqrt().recip(), rng)?,
            bias: store.zeros(format!("{prefix}.bias"), vec![dim])?,
            cls_spatial: store.normal(format!("{prefix}.cls_spatial"), vec![dim], 0.02, rng)?,
            cls_spectral: store.normal(format!("{prefix}.cls_spectral"), vec![dim], 0.02, rng)?,
            cls_global: store.normal(format!("{prefix}.cls_global"), vec![dim], 0.02, rng)?,
        })
    }
}

/// Token grid flowing through the encoder/decoder. `tokens` is a graph
/// variable shaped `[spatial, spectral, D]` where both extents include CLS.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Var,
    /// `(u, v)` patch-grid coordinates of the non-CLS spatial tokens.
    pub coords: Vec<(f64, f64)>,
    /// Central wavelength (nm) of each non-CLS spectral token.
    pub wavelengths: Vec<f64>,
}

impl TokenGrid {
    /// `N + 1`.
    pub fn spatial_len(&self) -> usize {
        self.coords.len() + 1
    }

    /// `C + 1`.
    pub fn spectral_len(&self) -> usize {
        self.wavelengths.len() + 1
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            coords: self.coords.clone(),
            wavelengths: self.wavelengths.clone(),
        }
    }
}

/// `(u, v)` = (patch row, patch column) for each spatial index, row-major.
pub fn patch_coords(height: usize, width: usize, patch: usize) -> Vec<(f64, f64)> {
    let (rows, cols) = (height / patch, width / patch);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r as f64, c as f64)))
        .collect()
}

/// Splits a `[C, H, W]` cube into `[N, C, P^2]` patches; spatial index `n`
/// runs over patch rows, then columns, and each patch is flattened row-major.
pub fn patchify(cube: &HyperCube, patch: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = (cube.channels(), cube.height(), cube.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} image is not divisible by patch size {patch}"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let src = cube.values.data();
    let mut out = Vec::with_capacity(c * h * w);
    for pr in 0..rows {
        for pc in 0..cols {
            for ch in 0..c {
                for y in 0..patch {
                    let start = ch * h * w + (pr * patch + y) * w + pc * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, c, patch * patch], out)
}

/// `tokens[n, c] = patches[n, c] * proj + bias`.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, patches: Var, params: &EmbedParams) -> Result<Var> {
    let p2 = params.patch * params.patch;
    if g.value(patches).width() != p2 || g.value(patches).rank() != 3 {
        return Err(Error::dim(format!(
            "patches {:?} do not match patch size {}",
            g.shape(patches),
            params.patch
        )));
    }
    let proj = g.param(params.proj);
    let bias = g.param(params.bias);
    let x = g.linear(patches, proj, "embed")?;
    g.add_bias(x, bias)
}

/// Places the embedded `[N, C, D]` tokens into the CLS-augmented grid.
pub fn augment_cls<T: Scalar>(
    g: &mut Graph<'_, T>,
    tokens: Var,
    params: &EmbedParams,
    coords: Vec<(f64, f64)>,
    wavelengths: Vec<f64>,
) -> Result<TokenGrid> {
    let &[n, c, d] = g.shape(tokens) else {
        return Err(Error::dim(format!("tokens must be [N, C, D], got {:?}", g.shape(tokens))));
    };
    if d != params.dim || coords.len() != n || wavelengths.len() != c {
        return Err(Error::dim(format!(
            "tokens [{n}, {c}, {d}] vs {} coords, {} wavelengths, width {}",
            coords.len(),
            wavelengths.len(),
            params.dim
        )));
    }
    const TOKENS: usize = 0;
    const GLOBAL: usize = 1;
    const SPATIAL: usize = 2;
    const SPECTRAL: usize = 3;
    let mut picks = Vec::with_capacity((n + 1) * (c + 1));
    picks.push((GLOBAL, 0));
    picks.extend(std::iter::repeat_n((SPECTRAL, 0), c));
    for i in 0..n {
        picks.push((SPATIAL, 0));
        picks.extend((0..c).map(|j| (TOKENS, i * c + j)));
    }
    let sources = [
        tokens,
        g.param(params.cls_global),
        g.param(params.cls_spatial),
        g.param(params.cls_spectral),
    ];
    let rows = g.gather(&sources, &picks)?;
    let grid = g.reshape(rows, vec![n + 1, c + 1, d])?;
    Ok(TokenGrid {
        tokens: grid,
        coords,
        wavelengths,
    })
}

/// Patchify, embed and augment a whole cube.
pub fn embed_cube<T: Scalar>(
    g: &mut Graph<'_, T>,
    cube: &HyperCube,
    params: &EmbedParams,
) -> Result<TokenGrid> {
    let patches = g.constant(patchify(cube, params.patch)?.cast());
    let tokens = embed(g, patches, params)?;
    let coords = patch_coords(cube.height(), cube.width(), params.patch);
    augment_cls(g, tokens, params, coords, cube.wavelengths.clone())
}
