//! Parameterized building blocks shared by every learned module.

use rand::Rng;

use super::graph::{softmax_in_place, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Array;
use crate::error::{LadError, Result};

/// Affine map over the last axis: `x W + b` with `W: [in, out]`.
pub fn linear(g: &mut Graph, x: Var, weights: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weights)?;
    g.add_bias(y, bias)
}

/// Softmax of a non-empty vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LadError::Config("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LadError::Numeric("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Sinusoidal embedding: entries `2j` and `2j + 1` hold `sin(t w_j)` and
/// `cos(t w_j)` with `w_j = 10000^(-j / (dim / 2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(LadError::Config(format!("timestep embedding dim must be even, got {dim}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(LadError::Config(format!("timestep must be non-negative, got {t}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], bound, rng)?;
        let b = store.add(format!("{name}.b"), Array::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        linear(g, x, w, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        store.value_mut(self.b).data_mut().fill(0.0);
    }
}

/// Two-layer feed-forward net with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Array::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Array::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm multi-head cross-attention block with a residual connection:
/// `out = queries + W_o · attn(W_q · LN(queries), W_k · kv, W_v · kv)`.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(LadError::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// `queries` has `groups * nq` rows and `keys_values` `groups * nk` rows.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var, groups: usize) -> Result<Var> {
        let qn = self.norm.forward(g, queries)?;
        let q = self.q.forward(g, qn)?;
        let k = self.k.forward(g, keys_values)?;
        let v = self.v.forward(g, keys_values)?;
        let a = g.attention(q, k, v, groups, self.heads)?;
        let o = self.o.forward(g, a)?;
        g.add(queries, o)
    }
}

/// Single-sequence cross-attention: `queries: [Q, d]`, `keys_values: [K, d]`.
pub fn mhca(g: &mut Graph, block: &CrossAttention, queries: Var, keys_values: Var) -> Result<Var> {
    block.forward(g, queries, keys_values, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut g = Graph::detached();
        let x = g.constant(Array::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = g.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Array::vector(vec![0.0, 0.0]).unwrap());
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w0 = g.constant(Array::zeros(&[2, 1]));
        let b3 = g.constant(Array::vector(vec![3.0]).unwrap());
        let y = linear(&mut g, x, w0, b3).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_matches_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xa = rand_array(&mut rng, &[2, 3]);
        let wa = rand_array(&mut rng, &[3, 4]);
        let ba = rand_array(&mut rng, &[4]);
        let mut g = Graph::detached();
        let (x, w, b) = (g.constant(xa.clone()), g.constant(wa.clone()), g.constant(ba.clone()));
        let y = linear(&mut g, x, w, b).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = ba.data()[j];
                for k in 0..3 {
                    acc += xa.data()[i * 3 + k] * wa.data()[k * 4 + j];
                }
                assert!((g.value(y).data()[i * 4 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut g = Graph::detached();
        let x = g.constant(Array::zeros(&[1, 3]));
        let w = g.constant(Array::zeros(&[2, 2]));
        let b = g.constant(Array::zeros(&[2]));
        let err = linear(&mut g, x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0; 6]).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let total: f64 = v.iter().map(|x| x.exp()).sum();
        for (a, x) in softmax(&v).unwrap().iter().zip(&v) {
            assert!((a - x.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_embedding_examples() {
        let e = timestep_embedding(0.0, 8).unwrap();
        for j in 0..4 {
            assert_eq!(e[2 * j], 0.0);
            assert_eq!(e[2 * j + 1], 1.0);
        }
        assert!(timestep_embedding(1.0, 7).is_err());
        assert_eq!(timestep_embedding(3.0, 16).unwrap(), timestep_embedding(3.0, 16).unwrap());

        // t = 7, dim = 8: frequencies 1, 0.1, 0.01, 0.001
        let e = timestep_embedding(7.0, 8).unwrap();
        let table = [
            7f64.sin(),
            7f64.cos(),
            0.7f64.sin(),
            0.7f64.cos(),
            0.07f64.sin(),
            0.07f64.cos(),
            0.007f64.sin(),
            0.007f64.cos(),
        ];
        for (a, b) in e.iter().zip(table) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn attention_block(d: usize, heads: usize, seed: u64) -> (ParamStore, CrossAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let block = CrossAttention::new(&mut s, "attn", d, heads, &mut rng).unwrap();
        // randomize the layer norm so the oracle covers gain and bias
        let gain = rand_array(&mut rng, &[d]);
        let bias = rand_array(&mut rng, &[d]);
        *s.value_mut(block.norm.gain) = gain;
        *s.value_mut(block.norm.bias) = bias;
        (s, block)
    }

    #[test]
    fn mhca_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        assert!(CrossAttention::new(&mut s, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn mhca_single_token_and_duplicates_agree() {
        let (s, block) = attention_block(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_array(&mut rng, &[3, 8]);
        let kv1 = rand_array(&mut rng, &[1, 8]);
        let mut both = kv1.data().to_vec();
        both.extend_from_slice(kv1.data());
        let kv2 = Array::matrix(2, 8, both).unwrap();

        let mut g = Graph::new(&s);
        let qv = g.constant(q);
        let k1 = g.constant(kv1);
        let k2 = g.constant(kv2);
        let o1 = mhca(&mut g, &block, qv, k1).unwrap();
        let o2 = mhca(&mut g, &block, qv, k2).unwrap();
        for (a, b) in g.value(o1).data().iter().zip(g.value(o2).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Dense single-head attention written out element by element.
    #[test]
    fn mhca_matches_brute_force() {
        let (s, block) = attention_block(4, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = rand_array(&mut rng, &[2, 4]);
        let kv = rand_array(&mut rng, &[3, 4]);

        let mut g = Graph::new(&s);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let out = mhca(&mut g, &block, qv, kvv).unwrap();

        let val = |id| s.value(id).data().to_vec();
        let affine = |x: &[f64], l: &Linear| -> Vec<f64> {
            let (w, b) = (val(l.w), val(l.b));
            (0..l.out_dim)
                .map(|j| b[j] + (0..l.in_dim).map(|i| x[i] * w[i * l.out_dim + j]).sum::<f64>())
                .collect()
        };
        let (gain, bias) = (val(block.norm.gain), val(block.norm.bias));
        for i in 0..2 {
            let row = q.row(i);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let normed: Vec<f64> = (0..4)
                .map(|j| (row[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
                .collect();
            let qi = affine(&normed, &block.q);
            let keys: Vec<Vec<f64>> = (0..3).map(|j| affine(kv.row(j), &block.k)).collect();
            let vals: Vec<Vec<f64>> = (0..3).map(|j| affine(kv.row(j), &block.v)).collect();
            let logits: Vec<f64> = keys.iter().map(|k| dot(&qi, k) / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut mixed = vec![0.0; 4];
            for (l, v) in logits.iter().zip(&vals) {
                for t in 0..4 {
                    mixed[t] += l.exp() / z * v[t];
                }
            }
            let o = affine(&mixed, &block.o);
            for t in 0..4 {
                let expect = row[t] + o[t];
                assert!((g.value(out).data()[i * 4 + t] - expect).abs() < 1e-10);
            }
        }
    }
}
