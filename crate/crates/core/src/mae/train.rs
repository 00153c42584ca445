use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::masking::{derive_seed, hcs_sample, make_mask_plan, MaskPlan};
use super::model::{forward_loss, HyperMae, MaeConfig};
use crate::error::{Error, Result};
use crate::spectral::{synth_cube, HyperCube};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

/// Update rule applied by [`Optimizer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// `v = momentum * v + g; p -= lr * v` (`momentum = 0` is plain descent).
    Sgd { momentum: f64 },
    /// Bias-corrected first/second moment scaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub lr: f64,
    pub kind: OptimizerKind,
    steps: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(lr: f64, kind: OptimizerKind) -> Result<Self> {
        let valid = match kind {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !(lr.is_finite() && lr >= 0.0) || !valid {
            return Err(Error::config(format!("invalid optimizer lr {lr}, {kind:?}")));
        }
        Ok(Self {
            lr,
            kind,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(lr, OptimizerKind::Sgd { momentum: 0.0 })
    }

    pub fn describe(&self) -> String {
        match self.kind {
            OptimizerKind::Sgd { momentum } if momentum == 0.0 => format!("sgd(lr={})", self.lr),
            OptimizerKind::Sgd { momentum } => format!("sgd(lr={}, momentum={momentum})", self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                format!("adam(lr={}, beta1={beta1}, beta2={beta2}, eps={eps})", self.lr)
            }
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        self.steps += 1;
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        let lr = T::from_f64(self.lr);
        let ids: Vec<_> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let i = id.index();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64(momentum);
                    let v = match self.first[i].take() {
                        Some(mut v) => {
                            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                                *vi = mu * *vi + *gi;
                            }
                            v
                        }
                        None => grad,
                    };
                    for (p, vi) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                        *p = *p - lr * *vi;
                    }
                    if momentum > 0.0 {
                        self.first[i] = Some(v);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let zeros = || Tensor::zeros(grad.shape().to_vec());
                    let mut m = self.first[i].take().map_or_else(zeros, Ok)?;
                    let mut v = self.second[i].take().map_or_else(zeros, Ok)?;
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let c1 = T::from_f64(1.0 - beta1.powi(self.steps as i32));
                    let c2 = T::from_f64(1.0 - beta2.powi(self.steps as i32));
                    let eps = T::from_f64(eps);
                    let one = T::one();
                    let param = store.get_mut(id).data_mut();
                    for (((p, g), mi), vi) in param
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (one - b1) * *g;
                        *vi = b2 * *vi + (one - b2) * *g * *g;
                        *p = *p - lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                }
            }
        }
        if !store.all_finite() {
            return Err(Error::Numeric("parameters became non-finite after update".into()));
        }
        Ok(())
    }
}

/// Channel sample and mask plan for one step.
pub fn step_plan(cfg: &MaeConfig, channels: usize, step_seed: u64) -> Result<MaskPlan> {
    let hcs = hcs_sample(channels, cfg.hcs, derive_seed(step_seed, 1))?;
    make_mask_plan(cfg.patches(), &hcs, cfg.mask_ratios, derive_seed(step_seed, 2))
}

/// One gradient step on the mean loss over `batch`. All cubes share the
/// step's channel sample and mask plan; per-cube gradients are summed in
/// batch order.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    model: &HyperMae,
    opt: &mut Optimizer<T>,
    batch: &[&HyperCube],
    step_seed: u64,
) -> Result<f64> {
    let Some(first) = batch.first() else {
        return Err(Error::DegenerateInput("empty batch".into()));
    };
    let plan = step_plan(&model.cfg, first.channels(), step_seed)?;
    let scale = T::from_f64(1.0 / batch.len() as f64);
    let mut total: Vec<Option<Tensor<T>>> = vec![None; store.len()];
    let mut loss = 0.0;
    for cube in batch {
        let mut g = Graph::new(store);
        let l = forward_loss(&mut g, model, cube, &plan)?;
        let value = g.value(l).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} (plan seed {}, {} channels)",
                plan.seed,
                plan.hcs_channels.len()
            )));
        }
        loss += value / batch.len() as f64;
        let l = g.scale(l, scale)?;
        for (acc, grad) in total.iter_mut().zip(g.backward(l)?.into_param_grads(store.len())) {
            match (acc.as_mut(), grad) {
                (Some(a), Some(gr)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                        *x = *x + *y;
                    }
                }
                (None, Some(gr)) => *acc = Some(gr),
                _ => {}
            }
        }
    }
    opt.step(store, total)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub seed: u64,
    /// Cubes per step.
    pub batch: usize,
    /// Size of the fixed synthetic training set.
    pub dataset: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            batch: 2,
            dataset: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
        }
    }
}

/// Synthetic training cubes for `cfg`, generated from `seed`.
pub fn synth_dataset(cfg: &MaeConfig, seed: u64, count: usize) -> Result<Vec<HyperCube>> {
    (0..count as u64)
        .map(|i| synth_cube(&cfg.wavelengths, cfg.height, cfg.width, derive_seed(seed, 1000 + i)))
        .collect()
}

pub struct PretrainRun<T> {
    pub store: ParamStore<T>,
    pub model: HyperMae,
    pub losses: Vec<f64>,
    pub optimizer: String,
}

/// Initializes a model from `opts.seed` and runs `opts.steps` steps. The
/// callback sees `(step, loss)` with steps counted from 1.
pub fn pretrain<T: Scalar>(
    cfg: MaeConfig,
    opts: &PretrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainRun<T>> {
    if opts.batch == 0 || opts.dataset < opts.batch {
        return Err(Error::config(format!(
            "batch {} must be positive and at most the dataset size {}",
            opts.batch, opts.dataset
        )));
    }
    let data = synth_dataset(&cfg, opts.seed, opts.dataset)?;
    let (mut store, model) = HyperMae::init::<T>(cfg, opts.seed)?;
    let mut opt = Optimizer::new(opts.lr, opts.optimizer)?;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let step_seed = derive_seed(opts.seed, step as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let batch: Vec<&HyperCube> = sample(&mut rng, data.len(), opts.batch)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let loss = train_step(&mut store, &model, &mut opt, &batch, step_seed).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(PretrainRun {
        store,
        model,
        losses,
        optimizer: opt.describe(),
    })
}
