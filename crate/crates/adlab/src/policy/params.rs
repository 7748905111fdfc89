//! Named parameter tensors and elementwise bulk operations shared by
//! parameters and gradients.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PolicyConfig, PolicyError};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub wte: Array2<f64>,
    pub wpe: Array2<f64>,
    pub layers: Vec<LayerTensors>,
    pub ln_f_g: Array1<f64>,
    pub ln_f_b: Array1<f64>,
    pub w_head: Array2<f64>,
}

/// Gradients are shape-congruent with the parameters they differentiate.
pub type Gradients = TensorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub version: u64,
    pub t: TensorSet,
}

enum TensorRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

enum TensorMut<'a> {
    V(&'a mut Array1<f64>),
    M(&'a mut Array2<f64>),
}

impl TensorSet {
    pub fn zeros(config: &PolicyConfig) -> TensorSet {
        let (v, c, d) = (config.vocab_size, config.context_len, config.embed_dim);
        let f = config.ff_dim();
        TensorSet {
            wte: Array2::zeros((v, d)),
            wpe: Array2::zeros((c, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerTensors {
                    ln1_g: Array1::zeros(d),
                    ln1_b: Array1::zeros(d),
                    w_qkv: Array2::zeros((d, 3 * d)),
                    b_qkv: Array1::zeros(3 * d),
                    w_o: Array2::zeros((d, d)),
                    b_o: Array1::zeros(d),
                    ln2_g: Array1::zeros(d),
                    ln2_b: Array1::zeros(d),
                    w_fc: Array2::zeros((d, f)),
                    b_fc: Array1::zeros(f),
                    w_proj: Array2::zeros((f, d)),
                    b_proj: Array1::zeros(d),
                })
                .collect(),
            ln_f_g: Array1::zeros(d),
            ln_f_b: Array1::zeros(d),
            w_head: Array2::zeros((d, v)),
        }
    }

    fn refs(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef)> = vec![
            ("wte".into(), TensorRef::M(&self.wte)),
            ("wpe".into(), TensorRef::M(&self.wpe)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.ln1.g"), TensorRef::V(&l.ln1_g)));
            out.push((format!("l{i}.ln1.b"), TensorRef::V(&l.ln1_b)));
            out.push((format!("l{i}.attn.w_qkv"), TensorRef::M(&l.w_qkv)));
            out.push((format!("l{i}.attn.b_qkv"), TensorRef::V(&l.b_qkv)));
            out.push((format!("l{i}.attn.w_o"), TensorRef::M(&l.w_o)));
            out.push((format!("l{i}.attn.b_o"), TensorRef::V(&l.b_o)));
            out.push((format!("l{i}.ln2.g"), TensorRef::V(&l.ln2_g)));
            out.push((format!("l{i}.ln2.b"), TensorRef::V(&l.ln2_b)));
            out.push((format!("l{i}.mlp.w_fc"), TensorRef::M(&l.w_fc)));
            out.push((format!("l{i}.mlp.b_fc"), TensorRef::V(&l.b_fc)));
            out.push((format!("l{i}.mlp.w_proj"), TensorRef::M(&l.w_proj)));
            out.push((format!("l{i}.mlp.b_proj"), TensorRef::V(&l.b_proj)));
        }
        out.push(("ln_f.g".into(), TensorRef::V(&self.ln_f_g)));
        out.push(("ln_f.b".into(), TensorRef::V(&self.ln_f_b)));
        out.push(("w_head".into(), TensorRef::M(&self.w_head)));
        out
    }

    fn muts(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out: Vec<(String, TensorMut)> = vec![
            ("wte".into(), TensorMut::M(&mut self.wte)),
            ("wpe".into(), TensorMut::M(&mut self.wpe)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("l{i}.ln1.g"), TensorMut::V(&mut l.ln1_g)));
            out.push((format!("l{i}.ln1.b"), TensorMut::V(&mut l.ln1_b)));
            out.push((format!("l{i}.attn.w_qkv"), TensorMut::M(&mut l.w_qkv)));
            out.push((format!("l{i}.attn.b_qkv"), TensorMut::V(&mut l.b_qkv)));
            out.push((format!("l{i}.attn.w_o"), TensorMut::M(&mut l.w_o)));
            out.push((format!("l{i}.attn.b_o"), TensorMut::V(&mut l.b_o)));
            out.push((format!("l{i}.ln2.g"), TensorMut::V(&mut l.ln2_g)));
            out.push((format!("l{i}.ln2.b"), TensorMut::V(&mut l.ln2_b)));
            out.push((format!("l{i}.mlp.w_fc"), TensorMut::M(&mut l.w_fc)));
            out.push((format!("l{i}.mlp.b_fc"), TensorMut::V(&mut l.b_fc)));
            out.push((format!("l{i}.mlp.w_proj"), TensorMut::M(&mut l.w_proj)));
            out.push((format!("l{i}.mlp.b_proj"), TensorMut::V(&mut l.b_proj)));
        }
        out.push(("ln_f.g".into(), TensorMut::V(&mut self.ln_f_g)));
        out.push(("ln_f.b".into(), TensorMut::V(&mut self.ln_f_b)));
        out.push(("w_head".into(), TensorMut::M(&mut self.w_head)));
        out
    }

    /// Visits every tensor in canonical order as (name, shape, data).
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        for (name, t) in self.refs() {
            match t {
                TensorRef::V(a) => f(&name, &[a.len()], a.as_slice().expect("contiguous")),
                TensorRef::M(a) => {
                    let shape = a.shape().to_vec();
                    f(&name, &shape, a.as_slice().expect("contiguous"))
                }
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (name, t) in self.muts() {
            match t {
                TensorMut::V(a) => f(&name, a.as_slice_mut().expect("contiguous")),
                TensorMut::M(a) => f(&name, a.as_slice_mut().expect("contiguous")),
            }
        }
    }

    /// self += scale * other, tensorwise.
    pub fn add_scaled(&mut self, other: &TensorSet, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(|_, data| {
            for (d, s) in data.iter_mut().zip(&flat[offset..]) {
                *d += scale * s;
            }
            offset += data.len();
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, data| {
            for d in data {
                *d *= factor;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, data| ok &= data.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, data| n += data.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|_, _, data| out.extend_from_slice(data));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_mut(|_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat buffer length mismatch");
    }
}

/// Deterministic initialization: weights drawn from N(0, 1/embed_dim),
/// norm gains 1, biases 0.
pub fn init_params(config: &PolicyConfig) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (config.embed_dim as f64).sqrt())
        .expect("valid normal distribution");
    let mut t = TensorSet::zeros(config);
    t.for_each_mut(|name, data| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf == "g" {
            data.fill(1.0);
        } else if leaf.starts_with('b') {
            data.fill(0.0);
        } else {
            for x in data {
                *x = normal.sample(&mut rng);
            }
        }
    });
    Ok(PolicyParams { config: config.clone(), version: 0, t })
}
