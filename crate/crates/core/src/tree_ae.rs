//! Second-stage model: the full-tree encoder branch pools edge encodings
//! into `z_t` (or a variational pair), the partial-tree encoder builds the
//! decoder memory conditioned on `z_t`, and a slot-based transformer decoder
//! predicts child-node properties in the lifted domain.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    decode_steps, featurize_full, featurize_partial, filter_non_proximal, lift_targets,
    ChildTarget, DecodeStep, EdgeFeatures, FeatureLayout, LiftFrame,
};
use crate::geometry::FourierConfig;
use crate::matching::{tree_loss, TreeLossParts};
use crate::nn::{init_linear, linear, Mlp, ParamStore, TransformerDecoder, TransformerEncoder};
use crate::opt::{adamw_step, OptHyper, OptState};
use crate::scalar::Scalar;
use crate::synth::{augment_global, augment_jitter, item_seed};
use crate::tensor::Tensor;
use crate::tree::{NodeId, VesselTree};
use crate::vessel_ae::{prepare_vessel, sample_training_points, SampleMode, TrainLogRow, VesselAe};

pub type EdgeCodeMap = BTreeMap<(NodeId, NodeId), Vec<f64>>;

/// Architecture and objective constants for the tree autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeAeConfig {
    pub dims: u8,
    /// Attention heads; the model width is `64 * heads`.
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub z_dim: usize,
    pub mlp_hidden: usize,
    pub slots: usize,
    /// Minimum matched slots per target in the loss.
    pub k: usize,
    pub variational: bool,
    pub lambda_kl: f64,
    pub fourier: FourierConfig,
    /// Std of the partial-tree position jitter during training.
    pub jitter_sigma: f64,
    pub max_nodes: usize,
}

impl TreeAeConfig {
    pub fn default_2d() -> Self {
        TreeAeConfig {
            dims: 2,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            z_dim: 256,
            mlp_hidden: 512,
            slots: 32,
            k: 3,
            variational: false,
            lambda_kl: 1e-6,
            fourier: FourierConfig::default(),
            jitter_sigma: 0.005,
            max_nodes: 64,
        }
    }

    pub fn default_3d() -> Self {
        TreeAeConfig { dims: 3, max_nodes: 128, ..TreeAeConfig::default_2d() }
    }

    pub fn model_dim(&self) -> usize {
        64 * self.heads
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.dims, self.fourier.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.slots == 0 || self.k == 0 {
            return Err(Error::Config("heads, slots and k must be positive".into()));
        }
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.slots < 2 * self.k {
            return Err(Error::Config(format!(
                "{} slots cannot give 2 targets {} matches each",
                self.slots, self.k
            )));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config("lambda_kl must be non-negative".into()));
        }
        self.fourier.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Model wrapper; all parameters live under the `tenc.` / `tdec.` prefixes.
pub struct TreeAe {
    pub cfg: TreeAeConfig,
    pub layout: FeatureLayout,
    full_edge: Mlp,
    full_enc: TransformerEncoder,
    pool: Mlp,
    partial_edge: Mlp,
    partial_enc: TransformerEncoder,
    decoder: TransformerDecoder,
    head: Mlp,
}

impl TreeAe {
    pub fn new(cfg: TreeAeConfig) -> Self {
        let layout = cfg.layout();
        let dim = cfg.model_dim();
        let z_out = if cfg.variational { 2 * cfg.z_dim } else { cfg.z_dim };
        let full_edge = Mlp::new("tenc.edge", layout.full_edge_width(), cfg.mlp_hidden, dim);
        let full_enc = TransformerEncoder::new("tenc.tf", cfg.enc_layers, cfg.heads, dim);
        let pool = Mlp::new("tenc.pool", dim, cfg.mlp_hidden, z_out);
        let partial_edge = Mlp::new("tdec.edge", layout.partial_edge_width(), cfg.mlp_hidden, dim);
        let partial_enc = TransformerEncoder::new("tdec.tf", cfg.enc_layers, cfg.heads, dim);
        let decoder = TransformerDecoder::new("tdec.xf", cfg.dec_layers, cfg.heads, dim);
        let head = Mlp::new("tdec.head", dim, cfg.mlp_hidden, layout.slot_width());
        TreeAe {
            cfg,
            layout,
            full_edge,
            full_enc,
            pool,
            partial_edge,
            partial_enc,
            decoder,
            head,
        }
    }

    pub fn init<R: Scalar>(&self, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.cfg.validate()?;
        let dim = self.cfg.model_dim();
        self.full_edge.init(store, rng)?;
        self.full_enc.init(store, rng)?;
        self.pool.init(store, rng)?;
        self.partial_edge.init(store, rng)?;
        self.partial_enc.init(store, rng)?;
        // start token and slot bank: U(-1, 1)
        let start: Vec<R> = (0..dim).map(|_| R::from_f64(rng.random_range(-1.0..1.0))).collect();
        store.insert("tdec.start", Tensor::param(1, dim, start)?)?;
        let slots: Vec<R> = (0..self.cfg.slots * dim)
            .map(|_| R::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        store.insert("tdec.slots", Tensor::param(self.cfg.slots, dim, slots)?)?;
        init_linear(store, rng, "tdec.zproj", dim + self.cfg.z_dim, dim)?;
        self.decoder.init(store, rng)?;
        self.head.init(store, rng)?;
        Ok(())
    }

    /// Masked-mean pooled tree embedding: `[1, z_dim]`, or `[1, 2 z_dim]`
    /// (mu then log-variance) in the variational configuration.
    pub fn encode_full<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        feats: &EdgeFeatures,
    ) -> Result<Tensor<R>> {
        if feats.active_count() == 0 {
            return Err(Error::EmptyMask { context: "encode_full_tree" });
        }
        let n = feats.rows.len();
        let flat: Vec<f64> = feats.rows.iter().flatten().copied().collect();
        let x = Tensor::<R>::from_f64s(n, feats.width, &flat)?;
        let e = self.full_edge.forward(store, &x)?;
        let enc = self.full_enc.forward(store, &e, &feats.mask)?;
        let mapped = self.pool.forward(store, &enc)?;
        mapped.mean_rows_canonical(&feats.mask)
    }

    /// Split a variational encoding into `(mu, logvar)`.
    pub fn split_variational<R: Scalar>(&self, z2: &Tensor<R>) -> Result<(Tensor<R>, Tensor<R>)> {
        let z = self.cfg.z_dim;
        Ok((z2.narrow_cols(0, z)?, z2.narrow_cols(z, z)?))
    }

    /// Partial-tree memory: single-edge MLP (start row replaced by the
    /// learned token), partial encoder, `z_t` concatenated to every row,
    /// then a linear projection back to the model width.
    pub fn encode_partial<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        feats: &EdgeFeatures,
        z_t: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let n = feats.rows.len();
        let flat: Vec<f64> = feats.rows.iter().flatten().copied().collect();
        let x = Tensor::<R>::from_f64s(n, feats.width, &flat)?;
        let encoded = self.partial_edge.forward(store, &x)?;
        let start = store.get("tdec.start")?;
        let with_token = match feats.start_row {
            Some(0) if n == 1 => start.clone(),
            Some(0) => {
                let rest = encoded.narrow_rows(1, n - 1)?;
                Tensor::concat_rows(&[start, &rest])?
            }
            _ => encoded,
        };
        let enc = self.partial_enc.forward(store, &with_token, &feats.mask)?;
        let zrep = z_t.repeat_row(n)?;
        let joined = Tensor::concat_cols(&[&enc, &zrep])?;
        linear(store, "tdec.zproj", &joined)
    }

    /// Slot predictions `[slots, slot_width]` from the decoder memory.
    pub fn decode_slots<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        memory: &Tensor<R>,
        memory_mask: &[bool],
    ) -> Result<Tensor<R>> {
        let slots = store.get("tdec.slots")?;
        let out = self.decoder.forward(store, slots, memory, memory_mask)?;
        self.head.forward(store, &out)
    }
}

/// Reparameterize `z = mu + exp(logvar / 2) * eps` and return the KL
/// divergence to the standard normal: `0.5 * sum(mu^2 + sigma^2 - logvar - 1)`.
pub fn reparameterize_and_kl<R: Scalar>(
    mu: &Tensor<R>,
    logvar: &Tensor<R>,
    eps: &[f64],
) -> Result<(Tensor<R>, Tensor<R>)> {
    let eps_t = Tensor::<R>::from_f64s(1, mu.cols(), eps)?;
    let sigma = logvar.mul_scalar(0.5)?.exp()?;
    let z = mu.add(&sigma.mul(&eps_t)?)?;
    let mu_sq = mu.mul(mu)?;
    let var = logvar.exp()?;
    let inner = mu_sq.add(&var)?.sub(logvar)?.add_scalar(-1.0)?;
    let kl = inner.sum_all()?.mul_scalar(0.5)?;
    Ok((z, kl))
}

/// Frozen first-stage encoder used to produce per-edge vessel embeddings
/// for 3-D tree featurization.
pub struct VesselCoder<'a> {
    pub model: &'a VesselAe,
    pub store: &'a ParamStore<f32>,
}

impl VesselCoder<'_> {
    /// `z_v` for every non-skip edge that carries polyline geometry.
    pub fn edge_codes(&self, tree: &VesselTree) -> Result<EdgeCodeMap> {
        let mut map = EdgeCodeMap::new();
        for e in &tree.edges {
            if e.skip {
                continue;
            }
            let Some(poly) = &e.polyline else { continue };
            let pv = crate::geometry::PolylineVessel::new(poly.clone())?;
            let item = prepare_vessel(&pv, &self.model.cfg)?;
            let samples = sample_training_points(&item.vessel, &self.model.cfg, SampleMode::Eval)?;
            let z = self.model.encode(self.store, &samples)?;
            map.insert((e.parent, e.child), z.to_f64_vec());
        }
        Ok(map)
    }
}

/// Everything produced by one teacher-forced decoding step.
pub struct StepLoss<R: Scalar> {
    pub loss: Tensor<R>,
    pub kl_value: Option<f64>,
    pub matching: TreeLossParts<R>,
}

/// Targets for a decode step, padded to capacity 2 with an inactive column.
fn step_targets(
    tree: &VesselTree,
    step: &DecodeStep,
    codes: Option<&EdgeCodeMap>,
    layout: &FeatureLayout,
    frame: &LiftFrame,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let mut targets = Vec::new();
    for &child in &step.targets {
        let mut t = ChildTarget::from_tree(tree, step.query, child);
        if let (Some(codes), Some(q)) = (codes, step.query) {
            t.z_v = codes.get(&(q, child)).cloned();
        }
        targets.push(t);
    }
    let (mut rows, mut comp_mask) = lift_targets(&targets, layout, frame)?;
    let w = layout.slot_width();
    let capacity = 2;
    let mut mask = vec![true; targets.len()];
    while mask.len() < capacity {
        rows.extend(std::iter::repeat(0.0).take(w));
        comp_mask.extend(std::iter::repeat(0.0).take(w));
        mask.push(false);
    }
    Ok((rows, comp_mask, mask))
}

/// Loss of one teacher-forced decoding step: encode the full tree, encode
/// the filtered (and optionally jittered) partial tree, decode slots, and
/// apply the top-k matching loss; the KL term is added in the variational
/// setting.
#[allow(clippy::too_many_arguments)]
pub fn step_loss<R: Scalar>(
    model: &TreeAe,
    store: &ParamStore<R>,
    tree: &VesselTree,
    codes: Option<&EdgeCodeMap>,
    step: &DecodeStep,
    frame: &LiftFrame,
    jitter_seed: Option<u64>,
    reparam_eps: Option<&[f64]>,
) -> Result<StepLoss<R>> {
    let full = featurize_full(tree, &model.layout, frame, codes)?;
    let z2 = model.encode_full(store, &full)?;
    let (z, kl) = if model.cfg.variational {
        let (mu, logvar) = model.split_variational(&z2)?;
        let zeros;
        let eps: &[f64] = match reparam_eps {
            Some(e) => e,
            None => {
                zeros = vec![0.0; model.cfg.z_dim];
                &zeros
            }
        };
        let (z, kl) = reparameterize_and_kl(&mu, &logvar, eps)?;
        (z, Some(kl))
    } else {
        (z2, None)
    };

    let override_positions = jitter_seed.map(|seed| {
        let positions: BTreeMap<NodeId, [f64; 3]> =
            step.partial.nodes.iter().map(|(&id, n)| (id, n.pos)).collect();
        augment_jitter(&positions, model.cfg.dims, seed, model.cfg.jitter_sigma)
    });
    let mut partial = featurize_partial(
        &step.partial,
        step.query,
        &model.layout,
        frame,
        override_positions.as_ref(),
    )?;
    if let Some(q) = step.query {
        filter_non_proximal(&mut partial, &step.partial, q)?;
    }
    let memory = model.encode_partial(store, &partial, &z)?;
    let slots = model.decode_slots(store, &memory, &partial.mask)?;

    let (rows, comp_mask, tmask) = step_targets(tree, step, codes, &model.layout, frame)?;
    let matching = tree_loss(&slots, &rows, &comp_mask, tmask.len(), &tmask, model.cfg.k)?;
    let (loss, kl_value) = match kl {
        Some(kl) => {
            let kl_value = kl.item().to_f64();
            let scaled = kl.mul_scalar(model.cfg.lambda_kl)?;
            (matching.loss.add(&scaled)?, Some(kl_value))
        }
        None => (matching.loss.clone(), None),
    };
    Ok(StepLoss { loss, kl_value, matching })
}

/// Deterministic full-tree latent for evaluation (the variational branch
/// returns `mu`), plus the lift frame the tree was encoded in.
pub fn encode_tree_latent(
    model: &TreeAe,
    store: &ParamStore<f32>,
    tree: &VesselTree,
    codes: Option<&EdgeCodeMap>,
) -> Result<(Vec<f64>, LiftFrame)> {
    let frame = if model.cfg.dims == 2 {
        LiftFrame::for_2d()
    } else {
        LiftFrame::for_3d_tree(tree)
    };
    let full = featurize_full(tree, &model.layout, &frame, codes)?;
    let z2 = model.encode_full(store, &full)?;
    let z = if model.cfg.variational {
        let (mu, _) = model.split_variational(&z2)?;
        mu.to_f64_vec()
    } else {
        z2.to_f64_vec()
    };
    Ok((z, frame))
}

/// Training options for the tree stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub hyper: OptHyper,
    pub log_every: u64,
    pub augment: bool,
}

impl Default for TreeTrainConfig {
    fn default() -> Self {
        TreeTrainConfig {
            steps: 20_000,
            batch: 32,
            seed: 0,
            hyper: OptHyper { decay_period: 16_000, warmup_steps: 500, ..OptHyper::default() },
            log_every: 100,
            augment: true,
        }
    }
}

/// Train the tree autoencoder with one decoding step per tree per batch
/// element (the step is sampled uniformly from the root step and every
/// internal-node expansion). Per-sample passes run in parallel; gradient
/// accumulation order is fixed, so runs are bit-reproducible per seed.
pub fn train_tree_ae<F>(
    model: &TreeAe,
    trees: &[VesselTree],
    coder: Option<&VesselCoder<'_>>,
    train: &TreeTrainConfig,
    store: &mut ParamStore<f32>,
    opt: &mut OptState<f32>,
    mut on_step: F,
) -> Result<Vec<TrainLogRow>>
where
    F: FnMut(u64, &ParamStore<f32>, &OptState<f32>, f64) -> Result<()>,
{
    if trees.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_tree_ae",
            detail: "empty dataset".into(),
        });
    }
    let mut log = Vec::new();
    let start = opt.step;
    for step in start..train.steps {
        let step_seed = item_seed(train.seed ^ 0x7245, step);
        let mut batch_rng = ChaCha8Rng::seed_from_u64(step_seed);
        let batch: Vec<usize> = (0..train.batch)
            .map(|_| batch_rng.random_range(0..trees.len()))
            .collect();
        let store_ref: &ParamStore<f32> = store;
        type ItemOut = (BTreeMap<String, Vec<f32>>, f64, Option<f64>);
        let results: Vec<Result<ItemOut>> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &idx)| {
                let sample_seed = item_seed(step_seed, bi as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let tree = if train.augment {
                    augment_global(&trees[idx], item_seed(sample_seed, 1)).0
                } else {
                    trees[idx].clone()
                };
                let codes = match coder {
                    Some(c) => Some(c.edge_codes(&tree)?),
                    None => None,
                };
                let frame = if model.cfg.dims == 2 {
                    LiftFrame::for_2d()
                } else {
                    LiftFrame::for_3d_tree(&tree)
                };
                let steps = decode_steps(&tree);
                let chosen = &steps[rng.random_range(0..steps.len())];
                let jitter_seed =
                    (model.cfg.jitter_sigma > 0.0).then(|| item_seed(sample_seed, 2));
                let eps: Option<Vec<f64>> = if model.cfg.variational {
                    let normal = Normal::new(0.0, 1.0).unwrap();
                    Some((0..model.cfg.z_dim).map(|_| normal.sample(&mut rng)).collect())
                } else {
                    None
                };
                let out = step_loss(
                    model,
                    store_ref,
                    &tree,
                    codes.as_ref(),
                    chosen,
                    &frame,
                    jitter_seed,
                    eps.as_deref(),
                )?;
                let value = out.loss.item().to_f64();
                let grads = out.loss.backward()?;
                Ok((store_ref.named_grads(&grads), value, out.kl_value))
            })
            .collect();
        let mut grads: BTreeMap<String, Vec<f32>> = Default::default();
        let mut loss_sum = 0.0f64;
        let mut kl_sum = 0.0f64;
        let mut kl_seen = false;
        let inv_batch = 1.0f32 / train.batch as f32;
        for r in results {
            let (g, value, kl) = r?;
            loss_sum += value;
            if let Some(k) = kl {
                kl_sum += k;
                kl_seen = true;
            }
            for (name, gv) in g {
                let entry = grads.entry(name).or_insert_with(|| vec![0.0f32; gv.len()]);
                for (e, v) in entry.iter_mut().zip(gv) {
                    *e += v * inv_batch;
                }
            }
        }
        let mean_loss = loss_sum / train.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingAbort {
                step,
                detail: format!("non-finite loss {mean_loss}"),
            });
        }
        let lr = adamw_step(store, &grads, opt)?;
        if (step + 1) % train.log_every == 0 || step + 1 == train.steps {
            log.push(TrainLogRow {
                step: step + 1,
                lr,
                loss: mean_loss,
                kl: kl_seen.then_some(kl_sum / train.batch as f64),
            });
        }
        on_step(step + 1, store, opt, mean_loss)?;
    }
    Ok(log)
}
