//! Parameterized building blocks on top of the autodiff tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = if bound > 0.0 {
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(store, rng, name, fan_in, fan_out, bound)
    }

    /// Weights uniform in `±bound`, zero bias.
    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::new(vec![dim], vec![1.0; dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1]),
            l2: Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Standard multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// `query[Lq, D]`, `key`/`value` `[Lk, D]` → `[Lq, D]`.
    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var) -> Var {
        let q = self.wq.forward(g, query);
        let k = self.wk.forward(g, key);
        let v = self.wv.forward(g, value);
        let dim = self.wq.fan_out;
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, h * hd, hd);
            let kh = g.narrow(k, h * hd, hd);
            let vh = g.narrow(v, h * hd, hd);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax(s, None);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
        self.wo.forward(g, o)
    }
}

/// Convolution parameters plus stride/padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // He-uniform for ReLU networks.
        let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[out_ch, in_ch, k, k], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_key_attention_is_value_path() {
        // With one key the softmax weight is 1, so the output is wo(wv(value)).
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 2);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::new(vec![2, 4], vec![0.3, -0.1, 0.2, 0.5, 1.0, 2.0, -1.0, 0.0]));
        let m = g.constant(Tensor::new(vec![1, 4], vec![0.7, 0.1, -0.4, 0.2]));
        let out = mha.forward(&mut g, q, m, m);
        let v = mha.wv.forward(&mut g, m);
        let direct = mha.wo.forward(&mut g, v);
        let d = g.value(direct).data.clone();
        for r in 0..2 {
            for c in 0..4 {
                assert!((g.value(out).data[r * 4 + c] - d[c]).abs() < 1e-12);
            }
        }
    }
}
