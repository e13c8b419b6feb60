//! Helpers shared by the integration tests: random graph instances and a
//! dense f64 evaluation of the layer that never touches library code.

#![allow(dead_code)]

use rand::Rng;
use stgcn::graph::AdjacencyPair;
use stgcn::Tensor;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Symmetric nonnegative `n × n` matrix with zero diagonal; each pair is
/// connected with probability `density`.
pub fn random_symmetric(rng: &mut impl Rng, n: usize, density: f64) -> Tensor {
    let mut a = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.0f32..2.0);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
    }
    Tensor::new(&[n, n], a).unwrap()
}

pub fn random_pair(rng: &mut impl Rng, steps: usize, nodes: usize, with_temporal: bool) -> AdjacencyPair {
    let spatial = (0..steps).map(|_| random_symmetric(rng, nodes, 0.6)).collect();
    let nt = steps * nodes;
    let temporal = if with_temporal {
        random_symmetric(rng, nt, 0.3)
    } else {
        Tensor::zeros(&[nt, nt])
    };
    AdjacencyPair {
        steps,
        nodes,
        spatial,
        temporal,
    }
}

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|p| a[i][p] * b[p][j]).sum();
        }
    }
    out
}

/// `D̂^{-1/2} (I + A) D̂^{-1/2}` straight from the definition.
pub fn renormalize(a: &Dense) -> Dense {
    let n = a.len();
    let hat: Dense = (0..n)
        .map(|i| (0..n).map(|j| a[i][j] + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let deg: Vec<f64> = hat.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| hat[i][j] / (deg[i].sqrt() * deg[j].sqrt())).collect())
        .collect()
}

/// Block-diagonal `T·N × T·N` spatial matrix of a pair.
pub fn spatial_dense(adj: &AdjacencyPair) -> Dense {
    let n = adj.nodes;
    let nt = adj.steps * n;
    let mut out = vec![vec![0.0; nt]; nt];
    for (t, block) in adj.spatial.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                out[t * n + i][t * n + j] = block.at(i, j) as f64;
            }
        }
    }
    out
}

/// `relu(N(A_t) · N(A_s) · H · W_s · W_t)` step by step in f64. The
/// renormalization of the block-diagonal spatial matrix equals the
/// per-step renormalization, so it is applied to the whole matrix here.
pub fn layer_oracle(adj: &AdjacencyPair, h: &Tensor, ws: &Tensor, wt: &Tensor) -> Dense {
    let ns = renormalize(&spatial_dense(adj));
    let nt = renormalize(&to_dense(&adj.temporal));
    let hs = matmul(&matmul(&ns, &to_dense(h)), &to_dense(ws));
    let pre = matmul(&nt, &matmul(&hs, &to_dense(wt)));
    pre.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Dense) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a.at(i, j) as f64 - v).abs());
        }
    }
    worst
}
