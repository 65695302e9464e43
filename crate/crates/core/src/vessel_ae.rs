//! First-stage autoencoder: a transformer set encoder maps 64
//! curvature-balanced samples of a normalized vessel to `z_v` (length 64),
//! and a small MLP decodes a residual to the endpoint linear interpolation
//! at any `t`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compute_segments, decode_curve_point, gaussian_smoothed_curvature, lift_fourier,
    normalize_vessel, FourierConfig, NormalizedVessel, PolylineVessel,
};
use crate::nn::{Mlp, ParamStore, TransformerEncoder};
use crate::opt::{adamw_step, OptHyper, OptState};
use crate::scalar::Scalar;
use crate::synth::item_seed;
use crate::tensor::Tensor;
use crate::tree::sample_polyline;

pub const VESSEL_SAMPLES: usize = 64;
pub const Z_V_DIM: usize = 64;

/// Architecture and loss constants for the vessel autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VesselAeConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub fourier: FourierConfig,
    /// Gaussian sigma (in samples) for curvature smoothing.
    pub curvature_sigma: f64,
    pub segment_sensitivity: f64,
    /// Std of the Gaussian noise added to `z_v` during training.
    pub noise_std: f64,
    /// Per-vessel loss weight is `alpha * d_a / sqrt(d_e)`.
    pub alpha: f64,
    pub radius_weight: f64,
    /// Polylines are resampled to this many arc-uniform points before
    /// curvature splitting (the splitter needs more samples than segments).
    pub resample_points: usize,
}

impl Default for VesselAeConfig {
    fn default() -> Self {
        VesselAeConfig {
            dim: 256,
            heads: 4,
            layers: 2,
            mlp_hidden: 512,
            fourier: FourierConfig::default(),
            curvature_sigma: 2.0,
            segment_sensitivity: 0.75,
            noise_std: 0.05,
            alpha: 0.3,
            radius_weight: 0.01,
            resample_points: 128,
        }
    }
}

impl VesselAeConfig {
    /// Encoder input width: lifted (x, y, z, t) plus the raw radius.
    pub fn input_width(&self) -> usize {
        4 * self.fourier.width_per_coord() + 1
    }

    /// Decoder input width: `z_v` plus lifted `t`.
    pub fn decoder_input_width(&self) -> usize {
        Z_V_DIM + self.fourier.width_per_coord()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "vessel model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.resample_points < VESSEL_SAMPLES + 2 {
            return Err(Error::Config(format!(
                "resample_points {} cannot produce {} curvature segments",
                self.resample_points, VESSEL_SAMPLES
            )));
        }
        self.fourier.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Model wrapper: parameter prefixes plus forward passes.
pub struct VesselAe {
    pub cfg: VesselAeConfig,
    input_mlp: Mlp,
    encoder: TransformerEncoder,
    out_mlp: Mlp,
    dec_mlp: Mlp,
}

impl VesselAe {
    pub fn new(cfg: VesselAeConfig) -> Self {
        let input_mlp = Mlp::new("venc.in", cfg.input_width(), cfg.mlp_hidden, cfg.dim);
        let encoder = TransformerEncoder::new("venc.tf", cfg.layers, cfg.heads, cfg.dim);
        let out_mlp = Mlp::new("venc.out", cfg.dim, cfg.mlp_hidden, Z_V_DIM);
        let dec_mlp = Mlp::new("vdec", cfg.decoder_input_width(), cfg.mlp_hidden, 4);
        VesselAe { cfg, input_mlp, encoder, out_mlp, dec_mlp }
    }

    pub fn init<R: Scalar>(&self, store: &mut ParamStore<R>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.cfg.validate()?;
        self.input_mlp.init(store, rng)?;
        self.encoder.init(store, rng)?;
        self.out_mlp.init(store, rng)?;
        self.dec_mlp.init(store, rng)?;
        Ok(())
    }

    /// Encode a sample set into `z_v` (`[1, 64]`); permutation-invariant in
    /// the samples.
    pub fn encode<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        samples: &[VesselSample],
    ) -> Result<Tensor<R>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument {
                op: "encode_vessel",
                detail: "no samples".into(),
            });
        }
        let w = self.cfg.input_width();
        let mut rows = Vec::with_capacity(samples.len() * w);
        for s in samples {
            rows.extend(lift_fourier(
                &[s.point[0], s.point[1], s.point[2], s.t],
                &self.cfg.fourier,
            ));
            rows.push(s.point[3]);
        }
        let x = Tensor::<R>::from_f64s(samples.len(), w, &rows)?;
        let h = self.input_mlp.forward(store, &x)?;
        let mask = vec![true; samples.len()];
        let enc = self.encoder.forward(store, &h, &mask)?;
        let pooled = enc.mean_rows_canonical(&mask)?;
        self.out_mlp.forward(store, &pooled)
    }

    /// Decode residual 4-vectors for a batch of `t` values.
    pub fn decode_residuals<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        z_v: &Tensor<R>,
        ts: &[f64],
    ) -> Result<Tensor<R>> {
        if z_v.shape() != (1, Z_V_DIM) {
            return Err(Error::Shape {
                op: "decode_vessel",
                detail: format!("z_v of {:?}", z_v.shape()),
            });
        }
        let lift_w = self.cfg.fourier.width_per_coord();
        let mut tdata = Vec::with_capacity(ts.len() * lift_w);
        for &t in ts {
            tdata.extend(lift_fourier(&[t], &self.cfg.fourier));
        }
        let tcols = Tensor::<R>::from_f64s(ts.len(), lift_w, &tdata)?;
        let zrep = z_v.repeat_row(ts.len())?;
        let inp = Tensor::concat_cols(&[&zrep, &tcols])?;
        self.dec_mlp.forward(store, &inp)
    }

    /// Evaluate the full curve: residual MLP plus the masked linear
    /// interpolation between the normalized endpoints.
    pub fn reconstruct_points<R: Scalar>(
        &self,
        store: &ParamStore<R>,
        z_v: &Tensor<R>,
        a: &[f64; 4],
        b: &[f64; 4],
        ts: &[f64],
        training: bool,
    ) -> Result<Vec<[f64; 4]>> {
        let residuals = self.decode_residuals(store, z_v, ts)?;
        let mut out = Vec::with_capacity(ts.len());
        for (i, &t) in ts.iter().enumerate() {
            let row = residuals.row(i);
            let res = [
                row[0].to_f64(),
                row[1].to_f64(),
                row[2].to_f64(),
                row[3].to_f64(),
            ];
            out.push(decode_curve_point(a, b, &res, t, training)?);
        }
        Ok(out)
    }
}

/// One encoder input sample: a normalized-frame point and its arc position.
#[derive(Debug, Clone, Copy)]
pub struct VesselSample {
    pub point: [f64; 4],
    pub t: f64,
}

/// Resample a polyline to `n` arc-length-uniform points.
pub fn resample_polyline(pv: &PolylineVessel, n: usize) -> Result<PolylineVessel> {
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        pts.push(sample_polyline(pv, t));
    }
    PolylineVessel::new(pts)
}

/// Sampling mode: one uniformly random index per curvature segment during
/// training, the segment midpoint for evaluation.
pub enum SampleMode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// Split the vessel into 64 segments of equal Gaussian-smoothed curvature
/// and draw one `(x, y, z, r, t)` sample per segment. `t` is the
/// arc-length-normalized position.
pub fn sample_training_points(
    v: &NormalizedVessel,
    cfg: &VesselAeConfig,
    mode: SampleMode<'_>,
) -> Result<Vec<VesselSample>> {
    let curvature = gaussian_smoothed_curvature(&v.points, cfg.curvature_sigma)?;
    if curvature.len() < VESSEL_SAMPLES {
        return Err(Error::InvalidArgument {
            op: "sample_training_points",
            detail: format!(
                "{} curvature values for {} segments; resample the polyline first",
                curvature.len(),
                VESSEL_SAMPLES
            ),
        });
    }
    let segments = compute_segments(&curvature, VESSEL_SAMPLES, cfg.segment_sensitivity)?;
    let arcs = PolylineVessel::new(v.points.clone())?.arc_positions();
    let mut rng_opt = mode;
    let mut out = Vec::with_capacity(VESSEL_SAMPLES);
    for &(s, e) in &segments {
        let idx = match &mut rng_opt {
            SampleMode::Train(rng) => rng.random_range(s..e),
            SampleMode::Eval => (s + e) / 2,
        };
        // curvature index i is centered on point i + 1
        let p = idx + 1;
        out.push(VesselSample { point: v.points[p], t: arcs[p] });
    }
    Ok(out)
}

/// Preprocessed training item: resampled + normalized vessel plus its loss
/// weight.
#[derive(Debug, Clone)]
pub struct VesselItem {
    pub vessel: NormalizedVessel,
    pub loss_weight: f64,
}

pub fn prepare_vessel(pv: &PolylineVessel, cfg: &VesselAeConfig) -> Result<VesselItem> {
    let resampled = resample_polyline(pv, cfg.resample_points)?;
    let vessel = normalize_vessel(&resampled)?;
    let weight = cfg.alpha * vessel.source_arc_length / vessel.source_endpoint_distance.sqrt();
    Ok(VesselItem { vessel, loss_weight: weight })
}

/// Reconstruction loss for one vessel: squared error of `g(z + eps, t)`
/// against the sampled targets, position components weighted 1.0 and the
/// radius `radius_weight`, scaled by the per-vessel weight.
pub fn vessel_loss<R: Scalar>(
    model: &VesselAe,
    store: &ParamStore<R>,
    item: &VesselItem,
    samples: &[VesselSample],
    noise: Option<&[f64]>,
) -> Result<Tensor<R>> {
    let z = model.encode(store, samples)?;
    let z_noised = match noise {
        Some(eps) => {
            let noise_t = Tensor::<R>::from_f64s(1, Z_V_DIM, eps)?;
            z.add(&noise_t)?
        }
        None => z,
    };
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let residuals = model.decode_residuals(store, &z_noised, &ts)?;
    // training mode: m(t) = 1, so g = lerp + residual
    let n = samples.len();
    let a = item.vessel.points[0];
    let b = item.vessel.points[item.vessel.points.len() - 1];
    let mut lerp = Vec::with_capacity(n * 4);
    let mut tgt = Vec::with_capacity(n * 4);
    for s in samples {
        for c in 0..4 {
            lerp.push(a[c] + (b[c] - a[c]) * s.t);
            tgt.push(s.point[c]);
        }
    }
    let lerp_t = Tensor::<R>::from_f64s(n, 4, &lerp)?;
    let tgt_t = Tensor::<R>::from_f64s(n, 4, &tgt)?;
    let recon = residuals.add(&lerp_t)?;
    let diff = recon.sub(&tgt_t)?;
    let sq = diff.mul(&diff)?;
    let wrow = Tensor::<R>::from_f64s(1, 4, &[1.0, 1.0, 1.0, model.cfg.radius_weight])?;
    let weights = wrow.repeat_row(n)?;
    let weighted = sq.mul(&weights)?;
    weighted.sum_all()?.mul_scalar(item.loss_weight / n as f64)
}

/// Deterministic eval-mode reconstruction MSE (unweighted, all four
/// components) over midpoint samples. `zero_residual` replaces the decoder
/// output with zero, giving the pure linear-interpolation baseline.
pub fn eval_mse<R: Scalar>(
    model: &VesselAe,
    store: &ParamStore<R>,
    items: &[VesselItem],
    zero_residual: bool,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for item in items {
        let samples = sample_training_points(&item.vessel, &model.cfg, SampleMode::Eval)?;
        let a = item.vessel.points[0];
        let b = item.vessel.points[item.vessel.points.len() - 1];
        let recon: Vec<[f64; 4]> = if zero_residual {
            samples
                .iter()
                .map(|s| decode_curve_point(&a, &b, &[0.0; 4], s.t, false))
                .collect::<Result<_>>()?
        } else {
            let z = model.encode(store, &samples)?;
            let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
            model.reconstruct_points(store, &z, &a, &b, &ts, false)?
        };
        for (r, s) in recon.iter().zip(&samples) {
            for c in 0..4 {
                let d = r[c] - s.point[c];
                total += d * d;
            }
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Training options for the vessel stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VesselTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub hyper: OptHyper,
    pub log_every: u64,
}

impl Default for VesselTrainConfig {
    fn default() -> Self {
        VesselTrainConfig {
            steps: 5000,
            batch: 64,
            seed: 0,
            hyper: OptHyper { decay_period: 1800, warmup_steps: 250, ..OptHyper::default() },
            log_every: 50,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub kl: Option<f64>,
}

/// Train the vessel autoencoder. Per-sample forward/backward passes run in
/// parallel; gradients accumulate in batch-index order, so a given seed is
/// bit-reproducible regardless of thread count. Training resumes from
/// `opt.step` when it is nonzero.
pub fn train_vessel_ae<F>(
    model: &VesselAe,
    items: &[VesselItem],
    train: &VesselTrainConfig,
    store: &mut ParamStore<f32>,
    opt: &mut OptState<f32>,
    mut on_step: F,
) -> Result<Vec<TrainLogRow>>
where
    F: FnMut(u64, &ParamStore<f32>, &OptState<f32>, f64) -> Result<()>,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_vessel_ae",
            detail: "empty dataset".into(),
        });
    }
    let mut log = Vec::new();
    let start = opt.step;
    for step in start..train.steps {
        let step_seed = item_seed(train.seed, step.wrapping_mul(3));
        let mut batch_rng = ChaCha8Rng::seed_from_u64(step_seed);
        let batch: Vec<usize> = (0..train.batch)
            .map(|_| batch_rng.random_range(0..items.len()))
            .collect();
        let store_ref: &ParamStore<f32> = store;
        let results: Vec<Result<(std::collections::BTreeMap<String, Vec<f32>>, f64)>> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &idx)| {
                let item = &items[idx];
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(step_seed, bi as u64 * 2 + 1));
                let samples =
                    sample_training_points(&item.vessel, &model.cfg, SampleMode::Train(&mut rng))?;
                let normal = Normal::new(0.0, model.cfg.noise_std).unwrap();
                let eps: Vec<f64> = (0..Z_V_DIM).map(|_| normal.sample(&mut rng)).collect();
                let loss = vessel_loss(model, store_ref, item, &samples, Some(&eps))?;
                let value = loss.item().to_f64();
                let grads = loss.backward()?;
                Ok((store_ref.named_grads(&grads), value))
            })
            .collect();
        let mut grads: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        let mut loss_sum = 0.0f64;
        let inv_batch = 1.0f32 / train.batch as f32;
        for r in results {
            let (g, value) = r?;
            loss_sum += value;
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
            log.push(TrainLogRow { step: step + 1, lr, loss: mean_loss, kl: None });
        }
        on_step(step + 1, store, opt, mean_loss)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opt::grad_check;
    use crate::synth::generate_synthetic_vessel;

    fn tiny_cfg() -> VesselAeConfig {
        VesselAeConfig {
            dim: 32,
            heads: 2,
            layers: 1,
            mlp_hidden: 32,
            ..VesselAeConfig::default()
        }
    }

    fn norm_vessel(seed: u64, cfg: &VesselAeConfig) -> VesselItem {
        prepare_vessel(&generate_synthetic_vessel(seed), cfg).unwrap()
    }

    #[test]
    fn samples_always_64_with_nondecreasing_t() {
        let cfg = VesselAeConfig::default();
        for seed in 0..20 {
            let item = norm_vessel(seed, &cfg);
            let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
            assert_eq!(samples.len(), VESSEL_SAMPLES);
            for w in samples.windows(2) {
                assert!(w[0].t <= w[1].t, "t non-decreasing");
            }
            let again = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
            for (a, b) in samples.iter().zip(&again) {
                assert_eq!(a.t, b.t, "eval sampling is deterministic");
            }
        }
    }

    #[test]
    fn encoder_permutation_invariant_bitwise() {
        let cfg = tiny_cfg();
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f32>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.init(&mut store, &mut rng).unwrap();
        let item = norm_vessel(3, &cfg);
        let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
        let z = model.encode(&store, &samples).unwrap();
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.swap(5, 40);
        let z2 = model.encode(&store, &shuffled).unwrap();
        assert_eq!(z.data(), z2.data(), "z_v bit-identical under permutation");
    }

    #[test]
    fn encoder_finite_on_many_vessels() {
        let cfg = tiny_cfg();
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f32>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.init(&mut store, &mut rng).unwrap();
        for seed in 0..50 {
            let item = norm_vessel(seed + 100, &cfg);
            let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
            let z = model.encode(&store, &samples).unwrap();
            assert!(z.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_mode_reconstruction_hits_endpoints_exactly() {
        let cfg = tiny_cfg();
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.init(&mut store, &mut rng).unwrap();
        let item = norm_vessel(9, &cfg);
        let a = item.vessel.points[0];
        let b = *item.vessel.points.last().unwrap();
        let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
        let z = model.encode(&store, &samples).unwrap();
        let pts = model
            .reconstruct_points(&store, &z, &a, &b, &[0.0, 0.5, 1.0], false)
            .unwrap();
        for c in 0..4 {
            assert!((pts[0][c] - a[c]).abs() <= 1e-6);
            assert!((pts[2][c] - b[c]).abs() <= 1e-6);
        }
    }

    #[test]
    fn zeroed_residual_head_reduces_to_linear_interpolation_loss() {
        let cfg = tiny_cfg();
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        model.init(&mut store, &mut rng).unwrap();
        // zero the decoder output layer -> residual head contributes nothing
        for name in ["vdec.fc2.w", "vdec.fc2.b"] {
            let t = store.get(name).unwrap();
            let (r, c) = t.shape();
            store.replace(name, Tensor::param(r, c, vec![0.0; r * c]).unwrap()).unwrap();
        }
        let item = norm_vessel(4, &cfg);
        let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
        let loss = vessel_loss(&model, &store, &item, &samples, None).unwrap().item();

        // manual pure-lerp loss with the same weighting
        let a = item.vessel.points[0];
        let b = *item.vessel.points.last().unwrap();
        let mut manual = 0.0;
        for s in &samples {
            for c in 0..4 {
                let lerp = a[c] + (b[c] - a[c]) * s.t;
                let d = lerp - s.point[c];
                manual += d * d * if c == 3 { cfg.radius_weight } else { 1.0 };
            }
        }
        manual *= item.loss_weight / samples.len() as f64;
        assert!((loss - manual).abs() < 1e-9 * manual.max(1.0));
    }

    #[test]
    fn straight_vessel_weight_is_alpha() {
        // d_a = d_e -> weight = alpha * d_a / sqrt(d_e); unit length -> alpha
        let pts: Vec<[f64; 4]> = (0..80).map(|i| [0.0, 0.0, i as f64 / 79.0, 1.0]).collect();
        let pv = PolylineVessel::new(pts).unwrap();
        let cfg = VesselAeConfig::default();
        let item = prepare_vessel(&pv, &cfg).unwrap();
        assert!((item.loss_weight - cfg.alpha).abs() < 1e-9);
    }

    #[test]
    fn gradients_of_vessel_loss_match_finite_differences() {
        let cfg = VesselAeConfig {
            dim: 16,
            heads: 2,
            layers: 1,
            mlp_hidden: 12,
            ..VesselAeConfig::default()
        };
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f64>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        model.init(&mut store, &mut rng).unwrap();
        let item = norm_vessel(11, &cfg);
        let samples = sample_training_points(&item.vessel, &cfg, SampleMode::Eval).unwrap();
        let report = grad_check(
            &store,
            |s| vessel_loss(&model, s, &item, &samples, None),
            60,
            17,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {} at {}", report.max_rel_err, report.worst_param);
    }

    #[test]
    fn short_training_beats_linear_baseline_on_curved_vessels() {
        // gently curved arcs: the residual head must beat pure interpolation
        let cfg = VesselAeConfig {
            dim: 32,
            heads: 2,
            layers: 1,
            mlp_hidden: 64,
            ..VesselAeConfig::default()
        };
        let model = VesselAe::new(cfg.clone());
        let mut store = ParamStore::<f32>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.init(&mut store, &mut rng).unwrap();
        let items: Vec<VesselItem> = (0..50).map(|seed| norm_vessel(seed + 500, &cfg)).collect();
        let train = VesselTrainConfig {
            steps: 200,
            batch: 16,
            seed: 3,
            hyper: OptHyper {
                peak_lr: 2e-3,
                warmup_steps: 20,
                decay_period: 10_000,
                ..OptHyper::default()
            },
            log_every: 50,
        };
        let mut opt = OptState::new(train.hyper);
        let log = train_vessel_ae(&model, &items, &train, &mut store, &mut opt, |_, _, _, _| Ok(()))
            .unwrap();
        assert!(log.iter().all(|r| r.loss.is_finite()));
        let baseline = eval_mse(&model, &store, &items, true).unwrap();
        let trained = eval_mse(&model, &store, &items, false).unwrap();
        assert!(trained < 0.5 * baseline, "trained {trained} vs baseline {baseline}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_cfg();
        let model = VesselAe::new(cfg.clone());
        let items: Vec<VesselItem> = (0..8).map(|s| norm_vessel(s + 900, &cfg)).collect();
        let train = VesselTrainConfig {
            steps: 6,
            batch: 4,
            seed: 5,
            hyper: OptHyper { warmup_steps: 2, decay_period: 100, ..OptHyper::default() },
            log_every: 1,
        };
        let run = |until: u64| -> (Vec<TrainLogRow>, Vec<f32>) {
            let mut store = ParamStore::<f32>::new(0);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            model.init(&mut store, &mut rng).unwrap();
            let mut opt = OptState::new(train.hyper);
            let cfg_until = VesselTrainConfig { steps: until, ..train.clone() };
            let log =
                train_vessel_ae(&model, &items, &cfg_until, &mut store, &mut opt, |_, _, _, _| Ok(()))
                    .unwrap();
            (log, store.get("vdec.fc2.w").unwrap().data().to_vec())
        };
        let (log_a, w_a) = run(6);
        let (log_b, w_b) = run(6);
        assert_eq!(log_a, log_b, "bit-identical training runs");
        assert_eq!(w_a, w_b);

        // resume after 3 steps and continue to 6: identical to the straight run
        let mut store = ParamStore::<f32>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.init(&mut store, &mut rng).unwrap();
        let mut opt = OptState::new(train.hyper);
        let first = VesselTrainConfig { steps: 3, ..train.clone() };
        train_vessel_ae(&model, &items, &first, &mut store, &mut opt, |_, _, _, _| Ok(())).unwrap();
        let rest = VesselTrainConfig { steps: 6, ..train.clone() };
        let log_resumed =
            train_vessel_ae(&model, &items, &rest, &mut store, &mut opt, |_, _, _, _| Ok(()))
                .unwrap();
        assert_eq!(&log_a[3..], &log_resumed[..], "resumed losses match");
        assert_eq!(w_a, store.get("vdec.fc2.w").unwrap().data().to_vec());
    }
}
