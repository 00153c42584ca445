use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masking::{HcsRange, MaskPlan};
use crate::attention::{less_block, LessBlockParams, LessConfig};
use crate::embed::{augment_cls, embed, patch_coords, patchify, EmbedParams, TokenGrid};
use crate::error::{Error, Result};
use crate::spectral::{evenly_spaced, make_config, make_reference_grid, ConfigKind, HyperCube};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Named model preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    Reference,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Reference => "reference",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "reference" | "reference-shape-only" => Ok(Preset::Reference),
            other => Err(Error::Parse(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub preset: Preset,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Central wavelengths (nm) of the input channels.
    pub wavelengths: Vec<f64>,
    pub encoder: LessConfig,
    pub encoder_depth: usize,
    pub decoder: LessConfig,
    pub decoder_depth: usize,
    pub hcs: HcsRange,
    /// Spatial and spectral mask ratios.
    pub mask_ratios: (f64, f64),
}

impl MaeConfig {
    /// Desk-scale default: 8 channels of 16x16 pixels, 4x4 patches.
    pub fn toy() -> Result<Self> {
        let grid = make_reference_grid();
        let picks = evenly_spaced(8, grid.len())?;
        Ok(Self {
            preset: Preset::Toy,
            patch: 4,
            height: 16,
            width: 16,
            wavelengths: picks.iter().map(|&i| grid.wavelengths()[i]).collect(),
            encoder: LessConfig::new(64, 4, 8, 2, 1)?,
            encoder_depth: 2,
            decoder: LessConfig::new(32, 2, 8, 2, 1)?,
            decoder_depth: 1,
            hcs: HcsRange::new(0.75, 1.0)?,
            mask_ratios: (0.75, 0.75),
        })
    }

    /// Full-size shapes: 768-wide 12-block encoder, 512-wide 8-block decoder,
    /// 16x16 patches over a 120-channel input.
    pub fn reference() -> Result<Self> {
        let grid = make_reference_grid();
        let channels = make_config(&grid, ConfigKind::VnirPlus)?;
        Ok(Self {
            preset: Preset::Reference,
            patch: 16,
            height: 32,
            width: 32,
            wavelengths: channels.wavelengths,
            encoder: LessConfig::new(768, 12, 32, 2, 1)?,
            encoder_depth: 12,
            decoder: LessConfig::new(512, 8, 32, 2, 1)?,
            decoder_depth: 8,
            hcs: HcsRange::new(0.2, 0.3)?,
            mask_ratios: (0.75, 0.75),
        })
    }

    pub fn from_preset(preset: Preset) -> Result<Self> {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Reference => Self::reference(),
        }
    }

    pub fn channels(&self) -> usize {
        self.wavelengths.len()
    }

    /// Number of spatial patches `N`.
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "{}x{} input is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.wavelengths.is_empty() {
            return Err(Error::config("model needs at least one input channel"));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        HcsRange::new(self.hcs.r_l, self.hcs.r_h)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<LessBlockParams>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct HyperMae {
    pub cfg: MaeConfig,
    pub embed: EmbedParams,
    pub encoder: Vec<LessBlockParams>,
    pub enc_norm_g: ParamId,
    pub enc_norm_b: ParamId,
    /// `None` for the encoder-only inference model.
    pub decoder: Option<DecoderParams>,
}

impl HyperMae {
    pub fn init<T: Scalar>(cfg: MaeConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        Self::build(cfg, seed, true)
    }

    /// Encoder without any decoder parameters.
    pub fn init_encoder_only<T: Scalar>(cfg: MaeConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        Self::build(cfg, seed, false)
    }

    fn build<T: Scalar>(cfg: MaeConfig, seed: u64, with_decoder: bool) -> Result<(ParamStore<T>, Self)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (de, dd) = (cfg.encoder.dim, cfg.decoder.dim);
        let embed = EmbedParams::init(&mut store, "embed", cfg.patch, de, &mut rng)?;
        let encoder = (0..cfg.encoder_depth)
            .map(|i| LessBlockParams::init(&mut store, &format!("enc{i}"), cfg.encoder, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm_g = store.ones("enc_norm_g", vec![de])?;
        let enc_norm_b = store.zeros("enc_norm_b", vec![de])?;
        let decoder = if with_decoder {
            let p2 = cfg.patch * cfg.patch;
            Some(DecoderParams {
                proj_w: store.normal("dec_proj_w", vec![de, dd], (de as f64).sqrt().recip(), &mut rng)?,
                proj_b: store.zeros("dec_proj_b", vec![dd])?,
                mask_token: store.normal("mask_token", vec![dd], 0.02, &mut rng)?,
                blocks: (0..cfg.decoder_depth)
                    .map(|i| LessBlockParams::init(&mut store, &format!("dec{i}"), cfg.decoder, &mut rng))
                    .collect::<Result<_>>()?,
                norm_g: store.ones("dec_norm_g", vec![dd])?,
                norm_b: store.zeros("dec_norm_b", vec![dd])?,
                head_w: store.normal("head_w", vec![dd, p2], (dd as f64).sqrt().recip(), &mut rng)?,
                head_b: store.zeros("head_b", vec![p2])?,
            })
        } else {
            None
        };
        let model = Self {
            cfg,
            embed,
            encoder,
            enc_norm_g,
            enc_norm_b,
            decoder,
        };
        Ok((store, model))
    }

    fn decoder(&self) -> Result<&DecoderParams> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::config("model was built without a decoder"))
    }
}

fn check_cube(model: &HyperMae, cube: &HyperCube) -> Result<()> {
    let p = model.cfg.patch;
    if cube.height() % p != 0 || cube.width() % p != 0 {
        return Err(Error::dim(format!(
            "{}x{} cube is not divisible into {p}-pixel patches",
            cube.height(),
            cube.width()
        )));
    }
    Ok(())
}

fn run_encoder<T: Scalar>(g: &mut Graph<'_, T>, model: &HyperMae, grid: TokenGrid) -> Result<TokenGrid> {
    let mut grid = grid;
    for block in &model.encoder {
        grid = less_block(g, &grid, block)?;
    }
    let (ng, nb) = (g.param(model.enc_norm_g), g.param(model.enc_norm_b));
    let out = g.layer_norm(grid.tokens, ng, nb)?;
    Ok(grid.with_tokens(out))
}

/// Encoder forward over every patch and channel of `cube`.
pub fn encode<T: Scalar>(g: &mut Graph<'_, T>, model: &HyperMae, cube: &HyperCube) -> Result<TokenGrid> {
    check_cube(model, cube)?;
    let n = (cube.height() / model.cfg.patch) * (cube.width() / model.cfg.patch);
    encode_visible(g, model, cube, &MaskPlan::unmasked(n, (0..cube.channels()).collect()))
}

/// Embeds only the visible sub-grid `spatial_visible x spectral_visible` of
/// `cube` and runs the encoder. Surviving tokens keep their original patch
/// coordinates and wavelengths.
pub fn encode_visible<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &HyperMae,
    cube: &HyperCube,
    plan: &MaskPlan,
) -> Result<TokenGrid> {
    check_cube(model, cube)?;
    if plan.spatial_visible.is_empty() || plan.spectral_visible.is_empty() {
        return Err(Error::DegenerateInput("no visible tokens along one axis".into()));
    }
    let p = model.cfg.patch;
    let all_coords = patch_coords(cube.height(), cube.width(), p);
    if plan.spatial_len() != all_coords.len() {
        return Err(Error::dim(format!(
            "plan covers {} patches, cube has {}",
            plan.spatial_len(),
            all_coords.len()
        )));
    }
    if let Some(&c) = plan.spectral_visible.iter().find(|&&c| c >= cube.channels()) {
        return Err(Error::dim(format!("channel {c} outside cube of {}", cube.channels())));
    }
    let patches = patchify(cube, p)?;
    let (cn, p2) = (cube.channels(), p * p);
    let mut data = Vec::with_capacity(plan.visible_tokens() * p2);
    for &n in &plan.spatial_visible {
        for &c in &plan.spectral_visible {
            let start = (n * cn + c) * p2;
            data.extend(patches.data()[start..start + p2].iter().map(|&v| T::from_f64(v)));
        }
    }
    let visible = Tensor::new(vec![plan.spatial_visible.len(), plan.spectral_visible.len(), p2], data)?;
    let input = g.constant(visible);
    let tokens = embed(g, input, &model.embed)?;
    let coords = plan.spatial_visible.iter().map(|&n| all_coords[n]).collect();
    let wavelengths = plan.spectral_visible.iter().map(|&c| cube.wavelengths[c]).collect();
    let grid = augment_cls(g, tokens, &model.embed, coords, wavelengths)?;
    run_encoder(g, model, grid)
}

/// Scatters the encoded sub-grid into the full `(N+1) x (C_hcs+1)` decoder
/// grid, fills every other position (CLS entries of masked rows/columns
/// included) with the mask token, runs the decoder and predicts `P^2`
/// pixels per non-CLS token. Returns `[N, C_hcs, P^2]`.
pub fn decode_reconstruct<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &HyperMae,
    encoded: &TokenGrid,
    plan: &MaskPlan,
    cube: &HyperCube,
) -> Result<Var> {
    let dec = model.decoder()?;
    let n = plan.spatial_len();
    let c = plan.hcs_channels.len();
    let (nv, cv) = (plan.spatial_visible.len(), plan.spectral_visible.len());
    if g.shape(encoded.tokens) != [nv + 1, cv + 1, model.cfg.encoder.dim] {
        return Err(Error::dim(format!(
            "encoded grid {:?} does not match plan ({nv} x {cv} visible)",
            g.shape(encoded.tokens)
        )));
    }
    let (pw, pb) = (g.param(dec.proj_w), g.param(dec.proj_b));
    let x = g.linear(encoded.tokens, pw, "dec_proj")?;
    let x = g.add_bias(x, pb)?;
    let mask = g.param(dec.mask_token);

    // row/column of the encoded grid feeding each full-grid position
    let mut row_src = vec![None; n + 1];
    row_src[0] = Some(0);
    for (i, &s) in plan.spatial_visible.iter().enumerate() {
        row_src[s + 1] = Some(i + 1);
    }
    let mut col_src = vec![None; c + 1];
    col_src[0] = Some(0);
    for (j, local) in plan.spectral_visible_local().into_iter().enumerate() {
        col_src[local + 1] = Some(j + 1);
    }
    let mut picks = Vec::with_capacity((n + 1) * (c + 1));
    for r in &row_src {
        for col in &col_src {
            picks.push(match (r, col) {
                (Some(i), Some(j)) => (0, i * (cv + 1) + j),
                _ => (1, 0),
            });
        }
    }
    let full = g.gather(&[x, mask], &picks)?;
    let full = g.reshape(full, vec![n + 1, c + 1, model.cfg.decoder.dim])?;

    let coords = patch_coords(cube.height(), cube.width(), model.cfg.patch);
    let wavelengths = plan.hcs_channels.iter().map(|&ch| cube.wavelengths[ch]).collect();
    let mut grid = TokenGrid { tokens: full, coords, wavelengths };
    for block in &dec.blocks {
        grid = less_block(g, &grid, block)?;
    }
    let (ng, nb) = (g.param(dec.norm_g), g.param(dec.norm_b));
    let h = g.layer_norm(grid.tokens, ng, nb)?;
    let (hw, hb) = (g.param(dec.head_w), g.param(dec.head_b));
    let h = g.linear(h, hw, "head")?;
    let h = g.add_bias(h, hb)?;
    let picks: Vec<_> = (0..n)
        .flat_map(|i| (0..c).map(move |j| (0, (i + 1) * (c + 1) + j + 1)))
        .collect();
    let pred = g.gather(&[h], &picks)?;
    let p2 = model.cfg.patch * model.cfg.patch;
    g.reshape(pred, vec![n, c, p2])
}

/// Each `P^2` patch shifted and scaled to zero mean and unit variance.
pub fn normalize_patches(patches: &Tensor<f64>) -> Tensor<f64> {
    let w = patches.width();
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Mean squared error against per-patch normalized targets over every token
/// outside the visible sub-grid. `pred` and `target` are `[N, C_hcs, P^2]`.
pub fn mae_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: &Tensor<f64>, plan: &MaskPlan) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let &[n, c, p2] = target.shape() else {
        return Err(Error::dim("target must be [N, C, P^2]"));
    };
    if plan.spatial_len() != n || plan.hcs_channels.len() != c {
        return Err(Error::dim(format!(
            "plan ({} x {}) does not match target [{n}, {c}]",
            plan.spatial_len(),
            plan.hcs_channels.len()
        )));
    }
    let masked = n * c - plan.visible_tokens();
    if masked == 0 {
        return Err(Error::DegenerateInput("no masked tokens to reconstruct".into()));
    }
    let weight = 1.0 / (masked * p2) as f64;
    let mut w = Vec::with_capacity(n * c * p2);
    for i in 0..n {
        for j in 0..c {
            let v = if plan.is_masked(i, j) { weight } else { 0.0 };
            w.extend(std::iter::repeat_n(T::from_f64(v), p2));
        }
    }
    let target = g.constant(normalize_patches(target).cast());
    let weights = g.constant(Tensor::new(vec![n, c, p2], w)?);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weights)?;
    g.sum(weighted)
}

/// Encoder, decoder and loss for one cube; returns the scalar loss node.
pub fn forward_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &HyperMae,
    cube: &HyperCube,
    plan: &MaskPlan,
) -> Result<Var> {
    let encoded = encode_visible(g, model, cube, plan)?;
    let pred = decode_reconstruct(g, model, &encoded, plan, cube)?;
    let target = patchify(&cube.select_channels(&plan.hcs_channels)?, model.cfg.patch)?;
    mae_loss(g, pred, &target, plan)
}
