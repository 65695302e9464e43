//! Transformer building blocks on top of [`crate::tensor`].
//!
//! Parameters live in a [`ParamStore`] keyed by dot-separated path, so a
//! model is a lightweight description (prefix + sizes) plus the store. All
//! blocks are pre-norm with residual connections and a final layer norm;
//! feed-forward hidden width is 4x the model width.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Tensor};

/// Named parameter table with deterministic (sorted) iteration order.
pub struct ParamStore<R: Scalar> {
    params: BTreeMap<String, Tensor<R>>,
    pub rng_seed: u64,
}

impl<R: Scalar> ParamStore<R> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<R>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Replace an existing parameter (optimizer updates).
    pub fn replace(&mut self, name: &str, t: Tensor<R>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                *slot = t;
                Ok(())
            }
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Translate pointer-keyed gradients into a name-keyed map. Parameters
    /// that did not participate in the graph are absent.
    pub fn named_grads(&self, grads: &GradMap<R>) -> BTreeMap<String, Vec<R>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.params {
            if let Some(g) = grads.get(t) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

fn uniform_init<R: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Vec<R> {
    (0..rows * cols)
        .map(|_| R::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

/// Register a linear layer `name.w [in,out]`, `name.b [1,out]` with
/// U(-1/sqrt(in), 1/sqrt(in)) init.
pub fn init_linear<R: Scalar>(
    store: &mut ParamStore<R>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        &format!("{name}.w"),
        Tensor::param(fan_in, fan_out, uniform_init(rng, fan_in, fan_out, bound))?,
    )?;
    store.insert(
        &format!("{name}.b"),
        Tensor::param(1, fan_out, uniform_init(rng, 1, fan_out, bound))?,
    )?;
    Ok(())
}

pub fn linear<R: Scalar>(store: &ParamStore<R>, name: &str, x: &Tensor<R>) -> Result<Tensor<R>> {
    let w = store.get(&format!("{name}.w"))?;
    let b = store.get(&format!("{name}.b"))?;
    x.matmul(w)?.add_row(b)
}

fn init_layer_norm<R: Scalar>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Result<()> {
    store.insert(
        &format!("{name}.g"),
        Tensor::param(1, dim, vec![R::ONE; dim])?,
    )?;
    store.insert(
        &format!("{name}.b"),
        Tensor::param(1, dim, vec![R::ZERO; dim])?,
    )?;
    Ok(())
}

fn layer_norm<R: Scalar>(store: &ParamStore<R>, name: &str, x: &Tensor<R>) -> Result<Tensor<R>> {
    x.layer_norm(
        store.get(&format!("{name}.g"))?,
        store.get(&format!("{name}.b"))?,
    )
}

/// Two-layer MLP with GELU in the middle.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl Mlp {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            prefix: prefix.to_string(),
            d_in,
            hidden,
            d_out,
        }
    }

    pub fn init<R: Scalar>(&self, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<()> {
        init_linear(store, rng, &format!("{}.fc1", self.prefix), self.d_in, self.hidden)?;
        init_linear(store, rng, &format!("{}.fc2", self.prefix), self.hidden, self.d_out)?;
        Ok(())
    }

    pub fn forward<R: Scalar>(&self, store: &ParamStore<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let h = linear(store, &format!("{}.fc1", self.prefix), x)?.gelu()?;
        linear(store, &format!("{}.fc2", self.prefix), &h)
    }
}

/// Multi-head scaled dot-product attention with learned q/k/v/out
/// projections. `key_mask` marks the active memory rows; a query never
/// attends to an inactive key.
pub fn multi_head_attention<R: Scalar>(
    store: &ParamStore<R>,
    prefix: &str,
    queries: &Tensor<R>,
    memory: &Tensor<R>,
    key_mask: &[bool],
    n_heads: usize,
) -> Result<Tensor<R>> {
    let dim = queries.cols();
    if dim % n_heads != 0 {
        return Err(Error::InvalidArgument {
            op: "multi_head_attention",
            detail: format!("model dim {dim} not divisible by {n_heads} heads"),
        });
    }
    if memory.rows() != key_mask.len() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            detail: format!("{} memory rows vs mask of {}", memory.rows(), key_mask.len()),
        });
    }
    if !key_mask.iter().any(|&b| b) {
        return Err(Error::EmptyMask {
            context: "multi_head_attention",
        });
    }
    let head = dim / n_heads;
    let q = linear(store, &format!("{prefix}.q"), queries)?;
    let k = linear(store, &format!("{prefix}.k"), memory)?;
    let v = linear(store, &format!("{prefix}.v"), memory)?;
    let scale = 1.0 / (head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.narrow_cols(h * head, head)?;
        let kh = k.narrow_cols(h * head, head)?;
        let vh = v.narrow_cols(h * head, head)?;
        let scores = qh.matmul(&kh.transpose()?)?.mul_scalar(scale)?;
        let probs = scores.softmax_rows(key_mask)?;
        // Contraction over the memory axis: canonical order keeps the output
        // bit-identical under memory permutations.
        head_outs.push(probs.matmul_canonical(&vh)?);
    }
    let refs: Vec<&Tensor<R>> = head_outs.iter().collect();
    let merged = Tensor::concat_cols(&refs)?;
    linear(store, &format!("{prefix}.o"), &merged)
}

pub fn init_attention<R: Scalar>(
    store: &mut ParamStore<R>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim)?;
    }
    Ok(())
}

/// Pre-norm transformer encoder over a set of rows.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub prefix: String,
    pub layers: usize,
    pub n_heads: usize,
    pub dim: usize,
}

impl TransformerEncoder {
    pub fn new(prefix: &str, layers: usize, n_heads: usize, dim: usize) -> Self {
        TransformerEncoder {
            prefix: prefix.to_string(),
            layers,
            n_heads,
            dim,
        }
    }

    fn ff(&self, l: usize) -> Mlp {
        Mlp::new(&format!("{}.l{}.ff", self.prefix, l), self.dim, 4 * self.dim, self.dim)
    }

    pub fn init<R: Scalar>(&self, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in 0..self.layers {
            init_layer_norm(store, &format!("{}.l{}.ln1", self.prefix, l), self.dim)?;
            init_attention(store, rng, &format!("{}.l{}.attn", self.prefix, l), self.dim)?;
            init_layer_norm(store, &format!("{}.l{}.ln2", self.prefix, l), self.dim)?;
            self.ff(l).init(store, rng)?;
        }
        init_layer_norm(store, &format!("{}.ln_final", self.prefix), self.dim)?;
        Ok(())
    }

    pub fn forward<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        x: &Tensor<R>,
        mask: &[bool],
    ) -> Result<Tensor<R>> {
        if x.cols() != self.dim {
            return Err(Error::Shape {
                op: "transformer_encoder",
                detail: format!("input width {} vs model dim {}", x.cols(), self.dim),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask {
                context: "transformer_encoder",
            });
        }
        let mut h = x.clone();
        for l in 0..self.layers {
            let normed = layer_norm(store, &format!("{}.l{}.ln1", self.prefix, l), &h)?;
            let attn = multi_head_attention(
                store,
                &format!("{}.l{}.attn", self.prefix, l),
                &normed,
                &normed,
                mask,
                self.n_heads,
            )?;
            h = h.add(&attn)?;
            let normed = layer_norm(store, &format!("{}.l{}.ln2", self.prefix, l), &h)?;
            let ff = self.ff(l).forward(store, &normed)?;
            h = h.add(&ff)?;
        }
        layer_norm(store, &format!("{}.ln_final", self.prefix), &h)
    }
}

/// Pre-norm transformer decoder: slot self-attention, cross-attention into
/// the memory rows, then feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub prefix: String,
    pub layers: usize,
    pub n_heads: usize,
    pub dim: usize,
}

impl TransformerDecoder {
    pub fn new(prefix: &str, layers: usize, n_heads: usize, dim: usize) -> Self {
        TransformerDecoder {
            prefix: prefix.to_string(),
            layers,
            n_heads,
            dim,
        }
    }

    fn ff(&self, l: usize) -> Mlp {
        Mlp::new(&format!("{}.l{}.ff", self.prefix, l), self.dim, 4 * self.dim, self.dim)
    }

    pub fn init<R: Scalar>(&self, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in 0..self.layers {
            init_layer_norm(store, &format!("{}.l{}.ln1", self.prefix, l), self.dim)?;
            init_attention(store, rng, &format!("{}.l{}.self", self.prefix, l), self.dim)?;
            init_layer_norm(store, &format!("{}.l{}.ln2", self.prefix, l), self.dim)?;
            init_attention(store, rng, &format!("{}.l{}.cross", self.prefix, l), self.dim)?;
            init_layer_norm(store, &format!("{}.l{}.ln3", self.prefix, l), self.dim)?;
            self.ff(l).init(store, rng)?;
        }
        init_layer_norm(store, &format!("{}.ln_final", self.prefix), self.dim)?;
        Ok(())
    }

    pub fn forward<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        slots: &Tensor<R>,
        memory: &Tensor<R>,
        memory_mask: &[bool],
    ) -> Result<Tensor<R>> {
        if memory.rows() == 0 || !memory_mask.iter().any(|&b| b) {
            return Err(Error::EmptyMask {
                context: "transformer_decoder",
            });
        }
        let self_mask = vec![true; slots.rows()];
        let mut h = slots.clone();
        for l in 0..self.layers {
            let normed = layer_norm(store, &format!("{}.l{}.ln1", self.prefix, l), &h)?;
            let sa = multi_head_attention(
                store,
                &format!("{}.l{}.self", self.prefix, l),
                &normed,
                &normed,
                &self_mask,
                self.n_heads,
            )?;
            h = h.add(&sa)?;
            let normed = layer_norm(store, &format!("{}.l{}.ln2", self.prefix, l), &h)?;
            let ca = multi_head_attention(
                store,
                &format!("{}.l{}.cross", self.prefix, l),
                &normed,
                memory,
                memory_mask,
                self.n_heads,
            )?;
            h = h.add(&ca)?;
            let normed = layer_norm(store, &format!("{}.l{}.ln3", self.prefix, l), &h)?;
            let ff = self.ff(l).forward(store, &normed)?;
            h = h.add(&ff)?;
        }
        layer_norm(store, &format!("{}.ln_final", self.prefix), &h)
    }
}
