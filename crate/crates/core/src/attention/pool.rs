use rand::Rng;

use super::lecun_std;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// One head of attention pooling: query/key/value maps `D x (D/H)` and the
/// projection to the branch width.
#[derive(Debug, Clone)]
pub struct PoolHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct PoolParams {
    pub dim: usize,
    pub d_out: usize,
    pub heads: Vec<PoolHead>,
}

impl PoolParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        let dh = dim / heads;
        let heads = (0..heads)
            .map(|h| {
                Ok(PoolHead {
                    wq: store.normal(format!("{prefix}.h{h}.wq"), vec![dim, dh], lecun_std(dim), rng)?,
                    wk: store.normal(format!("{prefix}.h{h}.wk"), vec![dim, dh], lecun_std(dim), rng)?,
                    wv: store.normal(format!("{prefix}.h{h}.wv"), vec![dim, dh], lecun_std(dim), rng)?,
                    proj: store.normal(format!("{prefix}.h{h}.proj"), vec![dh, d_out], lecun_std(dh), rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim, d_out, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.len()
    }
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    /// `[H, A, d_out]`.
    pub tokens: Var,
    /// Per head, `[A, 1, B]` pooling weights.
    pub weights: Vec<Var>,
}

/// Collapses axis 1 of a `[A, B, D]` grid. For each `a`, the query is the
/// axis CLS token `x[a, 0]` and keys/values are `x[a, :]`; each head attends
/// with its own maps and projects the pooled vector to `d_out`.
pub fn atten_pool<T: Scalar>(
    g: &mut Graph<'_, T>,
    grid: Var,
    params: &PoolParams,
    label: &str,
) -> Result<PoolOutput> {
    let &[a, b, d] = g.shape(grid) else {
        return Err(Error::dim(format!("pooling expects [A, B, D], got {:?}", g.shape(grid))));
    };
    if d != params.dim {
        return Err(Error::dim(format!("grid width {d} != pooling width {}", params.dim)));
    }
    let dh = params.head_dim();
    let picks: Vec<_> = (0..a).map(|i| (0, i * b)).collect();
    let query = g.gather(&[grid], &picks)?;
    let scale = T::from_f64((dh as f64).sqrt().recip());

    let mut outs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let (wq, wk, wv, proj) = (g.param(head.wq), g.param(head.wk), g.param(head.wv), g.param(head.proj));
        let q = g.linear(query, wq, label)?;
        let q = g.scale(q, scale)?;
        let q = g.reshape(q, vec![a, 1, dh])?;
        let k = g.linear(grid, wk, label)?;
        let v = g.linear(grid, wv, label)?;
        let s = g.bmm(q, k, true, label)?;
        let w = g.softmax(s)?;
        let o = g.bmm(w, v, false, label)?;
        let o = g.reshape(o, vec![a, dh])?;
        outs.push(g.linear(o, proj, label)?);
        weights.push(w);
    }
    let picks: Vec<_> = (0..outs.len())
        .flat_map(|h| (0..a).map(move |i| (h, i)))
        .collect();
    let stacked = g.gather(&outs, &picks)?;
    let tokens = g.reshape(stacked, vec![params.heads.len(), a, params.d_out])?;
    Ok(PoolOutput { tokens, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_explicit_loop() {
        // N' = 3, C' = 3, D = 4, two heads
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let params = PoolParams::init(&mut store, "pool", 4, 2, 3, &mut rng).unwrap();
        let x = random(&mut rng, vec![3, 3, 4]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = atten_pool(&mut g, xv, &params, "pool").unwrap();
        let got = g.value(out.tokens);
        assert_eq!(got.shape(), &[2, 3, 3]);

        let mm = |row: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..w.shape()[1])
                .map(|j| (0..row.len()).map(|i| row[i] * w.get(&[i, j])).sum())
                .collect()
        };
        for (h, head) in params.heads.iter().enumerate() {
            let (wq, wk, wv, wp) = (store.get(head.wq), store.get(head.wk), store.get(head.wv), store.get(head.proj));
            for n in 0..3 {
                let q = mm(x.row(n * 3), wq);
                let logits: Vec<f64> = (0..3)
                    .map(|c| {
                        let k = mm(x.row(n * 3 + c), wk);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 2f64.sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut pooled = vec![0.0; 2];
                for c in 0..3 {
                    let v = mm(x.row(n * 3 + c), wv);
                    for j in 0..2 {
                        pooled[j] += e[c] / z * v[j];
                    }
                }
                let expect = mm(&pooled, wp);
                for j in 0..3 {
                    assert!((got.get(&[h, n, j]) - expect[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_tokens_pool_to_their_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = PoolParams::init(&mut store, "pool", 4, 1, 2, &mut rng).unwrap();
        let token = [0.5, -1.0, 0.25, 2.0];
        let x = Tensor::from_f64(vec![1, 5, 4], &token.repeat(5)).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let out = atten_pool(&mut g, xv, &params, "pool").unwrap();
        let tok = Tensor::from_f64(vec![1, 4], &token).unwrap();
        let head = &params.heads[0];
        let expect = crate::tensor::ops::matmul(
            &crate::tensor::ops::matmul(&tok, store.get(head.wv)).unwrap(),
            store.get(head.proj),
        )
        .unwrap();
        assert!(g.value(out.tokens).data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_channel_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let params = PoolParams::init(&mut store, "pool", 4, 2, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(random(&mut rng, vec![3, 2, 4]));
        let out = atten_pool(&mut g, xv, &params, "pool").unwrap();
        for &w in &out.weights {
            for row in g.value(w).data().chunks(2) {
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(PoolParams::init(&mut store, "p", 6, 4, 2, &mut rng), Err(Error::Config(_))));
        let params = PoolParams::init(&mut store, "pool", 4, 2, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::zeros(vec![2, 2, 6]).unwrap());
        assert!(atten_pool(&mut g, xv, &params, "pool").is_err());
    }
}
