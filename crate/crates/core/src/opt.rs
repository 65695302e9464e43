//! AdamW with decoupled weight decay, the linear-warmup / exponential-decay
//! learning-rate schedule, and a central finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyperparameters and schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptHyper {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Steps per factor-of-`decay_factor` reduction after warmup.
    pub decay_period: u64,
    pub decay_factor: f64,
}

impl Default for OptHyper {
    fn default() -> Self {
        OptHyper {
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
            decay_period: 50_000,
            decay_factor: 10.0,
        }
    }
}

/// Linear ramp 0 -> peak over `warmup_steps`, then continuous exponential
/// decay by `decay_factor` every `decay_period` steps.
pub fn lr_at_step(step: u64, hp: &OptHyper) -> f64 {
    if hp.warmup_steps > 0 && step < hp.warmup_steps {
        hp.peak_lr * step as f64 / hp.warmup_steps as f64
    } else {
        let past = (step - hp.warmup_steps) as f64;
        hp.peak_lr * hp.decay_factor.powf(-past / hp.decay_period as f64)
    }
}

/// Per-parameter moment buffers plus the step counter.
pub struct OptState<R: Scalar> {
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
    pub step: u64,
    pub hp: OptHyper,
}

impl<R: Scalar> OptState<R> {
    pub fn new(hp: OptHyper) -> Self {
        OptState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            hp,
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[R], &[R])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<R>, v: Vec<R>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One AdamW step over every parameter in the store (sorted order).
/// Parameters absent from `grads` are treated as zero-gradient. Returns the
/// learning rate that was applied.
pub fn adamw_step<R: Scalar>(
    params: &mut ParamStore<R>,
    grads: &BTreeMap<String, Vec<R>>,
    state: &mut OptState<R>,
) -> Result<f64> {
    let t = state.step + 1;
    let lr = lr_at_step(t, &state.hp);
    let hp = state.hp;
    let b1 = R::from_f64(hp.beta1);
    let b2 = R::from_f64(hp.beta2);
    let one_m_b1 = R::from_f64(1.0 - hp.beta1);
    let one_m_b2 = R::from_f64(1.0 - hp.beta2);
    let bias1 = R::from_f64(1.0 - hp.beta1.powi(t as i32));
    let bias2 = R::from_f64(1.0 - hp.beta2.powi(t as i32));
    let lr_r = R::from_f64(lr);
    let eps = R::from_f64(hp.eps);
    let decay = R::from_f64(lr * hp.weight_decay);

    let names: Vec<String> = params.names().cloned().collect();
    let zero: Vec<R> = Vec::new();
    for name in names {
        let p = params.get(&name)?;
        let (rows, cols) = p.shape();
        let n = p.numel();
        let g = grads.get(&name).map(|v| v.as_slice()).unwrap_or(&zero);
        if !g.is_empty() && g.len() != n {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!("grad len {} vs param `{}` of {}", g.len(), name, n),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad { name });
        }
        let mut m = state.m.remove(&name).unwrap_or_else(|| vec![R::ZERO; n]);
        let mut v = state.v.remove(&name).unwrap_or_else(|| vec![R::ZERO; n]);
        let mut new_data = Vec::with_capacity(n);
        for i in 0..n {
            let gi = if g.is_empty() { R::ZERO } else { g[i] };
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let pi = p.data()[i];
            new_data.push(pi - lr_r * (m_hat / (v_hat.sqrt() + eps)) - decay * pi);
        }
        state.m.insert(name.clone(), m);
        state.v.insert(name.clone(), v);
        params.replace(&name, Tensor::param(rows, cols, new_data)?)?;
    }
    state.step = t;
    Ok(lr)
}

/// Gradient-check report; `max_rel_err` compares reverse-mode gradients to
/// central finite differences (h = 1e-5).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences on randomly probed parameter coordinates (64-bit stores only).
///
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-2)`; the floor keeps
/// finite-difference noise on near-zero gradients from dominating while a
/// genuinely wrong gradient of any visible magnitude still fails.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    f: F,
    n_probes: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let h = 1e-5;
    let loss = f(store)?;
    let grads = loss.backward()?;
    let named = store.named_grads(&grads);

    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter() {
        for i in 0..t.numel() {
            coords.push((name.clone(), i));
        }
    }
    if coords.is_empty() {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            detail: "empty parameter store".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        probes: n_probes,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        tolerance,
    };
    for _ in 0..n_probes {
        let (name, idx) = coords[rng.random_range(0..coords.len())].clone();
        let analytic = named.get(&name).map(|g| g[idx]).unwrap_or(0.0);
        let eval_at = |delta: f64| -> Result<f64> {
            let mut probe_store = ParamStore::new(store.rng_seed);
            for (n, t) in store.iter() {
                if n == &name {
                    let mut data = t.data().to_vec();
                    data[idx] += delta;
                    let (r, c) = t.shape();
                    probe_store.insert(n, Tensor::param(r, c, data)?)?;
                } else {
                    probe_store.insert(n, t.clone())?;
                }
            }
            Ok(f(&probe_store)?.item())
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name;
            report.worst_index = idx;
        }
    }
    Ok(report)
}
