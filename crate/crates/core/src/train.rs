//! Optimization: augmentation, AdamW with clipping, cosine schedule, the
//! epoch loop with prototype-bank maintenance, and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ac2d_tensor::{Float, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::kl_divergence;
use crate::causal::{BankPolicy, CausalMode};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::LandmarkSet;
use crate::metrics::{f1_frame, F1Report, LabelStats, DEFAULT_THRESHOLD};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::prior::generate_priors;
use crate::rules::RuleSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Base rate `2e-3 / 256 × batch`.
    pub fn scaled_base_lr(batch_size: usize) -> f64 {
        2e-3 / 256.0 * batch_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup of {} steps must be shorter than {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from zero, then half-cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps).max(1) as f64;
    let progress = ((step - s.warmup_steps) as f64 / span).min(1.0);
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numeric("gradient has a non-finite entry".into()));
    }
    // Scaled by the largest magnitude so that huge but finite entries do not overflow.
    let peak = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max);
    let norm = if peak > 0.0 && peak.is_finite() {
        peak * grads
            .iter()
            .map(|g| g.data().iter().map(|v| (v.as_f64() / peak).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    } else {
        peak
    };
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::lit(v.as_f64() * s);
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    /// Weight decay applies to parameters of rank two or more.
    pub fn new(params: &ParamStore<T>, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            m: params.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: params.values().iter().map(|p| p.ndim() >= 2).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips, then applies one decoupled-decay update. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, mut grads: Vec<Tensor<T>>, lr: f64) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::State(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    params.name(crate::nn::ParamId(i))
                )));
            }
        }
        let norm = clip_global_norm(&mut grads, self.clip_norm)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(&grads).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                *mv = T::lit(mf);
                *vv = T::lit(vf);
                let x = pv.as_f64();
                let upd = (mf / c1) / ((vf / c2).sqrt() + self.eps) + wd * x;
                *pv = T::lit(x - lr * upd);
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop: usize,
    pub random_crop: bool,
    pub mirror: bool,
    /// Half-width of the brightness and contrast jitter.
    pub jitter: f64,
}

impl AugmentConfig {
    pub fn eval(crop: usize) -> Self {
        Self {
            crop,
            random_crop: false,
            mirror: false,
            jitter: 0.0,
        }
    }

    pub fn train(crop: usize, jitter: f64) -> Self {
        Self {
            crop,
            random_crop: true,
            mirror: true,
            jitter,
        }
    }
}

/// Crops, optionally mirrors and color-jitters one sample; landmarks follow.
pub fn augment<R: Rng>(
    image: &Image,
    landmarks: &LandmarkSet,
    cfg: &AugmentConfig,
    rules: &RuleSet,
    rng: &mut R,
) -> Result<(Image, LandmarkSet)> {
    let l = cfg.crop;
    if image.width < l || image.height < l {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than the {l} crop",
            image.width, image.height
        )));
    }
    let (dx, dy) = if cfg.random_crop {
        (rng.random_range(0..=image.width - l), rng.random_range(0..=image.height - l))
    } else {
        ((image.width - l) / 2, (image.height - l) / 2)
    };
    let mut view = image.crop(dx, dy, l)?;
    let mut lm = landmarks.translated(-(dx as f64), -(dy as f64));
    if cfg.mirror && rng.random_bool(0.5) {
        view = view.mirrored();
        lm = rules.mirror_landmarks(&lm, l as f64)?;
    }
    if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        let brightness = rng.random_range(-j..=j) as f32;
        let contrast = 1.0 + rng.random_range(-j..=j) as f32;
        let mean = view.data.iter().sum::<f32>() / view.data.len() as f32;
        for v in &mut view.data {
            *v = ((*v - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
        }
    }
    Ok((view, lm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub jitter: f64,
    /// Overrides the batch-scaled base rate.
    pub base_lr: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            warmup_epochs: 1,
            weight_decay: 0.05,
            clip_norm: 3.0,
            jitter: 0.2,
            base_lr: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_u: f64,
    pub loss_a: f64,
    pub loss: f64,
    /// Mean KL between prior and averaged attention on the evaluation split.
    pub kl: f64,
    pub f1: Vec<f64>,
    pub f1_avg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub initial_kl: f64,
    pub stats: LabelStats,
    pub final_eval: Evaluation,
    pub steps: u64,
}

pub fn metrics_header(aus: &[u32]) -> String {
    let mut s = String::from("epoch,loss_u,loss_a,loss,kl");
    for au in aus {
        let _ = write!(s, ",f1_au{au}");
    }
    s.push_str(",f1_avg\n");
    s
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    let mut s = format!("{},{:.8},{:.8},{:.8},{:.8}", m.epoch, m.loss_u, m.loss_a, m.loss, m.kl);
    for f in &m.f1 {
        let _ = write!(s, ",{f:.4}");
    }
    let _ = writeln!(s, ",{:.4}", m.f1_avg);
    s
}

/// A prepared mini-batch.
pub struct Batch<T: Float> {
    pub ids: Vec<usize>,
    pub images: Tensor<T>,
    /// One `[B, n]` map per AU.
    pub priors: Vec<Tensor<T>>,
    pub labels: Tensor<T>,
}

pub fn make_batch<T: Float, R: Rng>(
    samples: &[Sample],
    ids: &[usize],
    model_aus: &[u32],
    crop: &AugmentConfig,
    delta: f64,
    rules: &RuleSet,
    rng: &mut R,
) -> Result<Batch<T>> {
    let l = crop.crop;
    let m = model_aus.len();
    let b = ids.len();
    let side = l / 8;
    let n = side * side;
    let mut images = Vec::with_capacity(b * 3 * l * l);
    let mut priors = vec![Vec::with_capacity(b * n); m];
    let mut labels = Vec::with_capacity(b * m);
    for &i in ids {
        let s = &samples[i];
        let (view, lm) = augment(&s.image, &s.landmarks, crop, rules, rng)?;
        images.extend(view.data.iter().map(|&v| T::lit(v as f64)));
        for (j, p) in generate_priors(rules, &lm, model_aus, l, delta)?.into_iter().enumerate() {
            priors[j].extend(p.values.iter().map(|&v| T::lit(v)));
        }
        labels.extend(s.labels.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Batch {
        ids: ids.to_vec(),
        images: Tensor::new(&[b, 3, l, l], images)?,
        priors: priors
            .into_iter()
            .map(|p| Tensor::new(&[b, n], p))
            .collect::<ac2d_tensor::Result<_>>()?,
        labels: Tensor::new(&[b, m], labels)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: F1Report,
    pub predictions: Vec<Vec<f64>>,
    pub loss_u: Option<f64>,
    pub loss_a: Option<f64>,
    pub loss: Option<f64>,
    /// Mean over samples and AUs of KL(prior ‖ averaged attention).
    pub kl: f64,
}

fn check_compatible<T: Float>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if data.meta.aus != model.config.aus {
        return Err(Error::Config(format!(
            "dataset AUs {:?} differ from model AUs {:?}",
            data.meta.aus, model.config.aus
        )));
    }
    if data.meta.scheme != model.config.scheme {
        return Err(Error::Config(format!(
            "dataset uses {}-point landmarks, model expects {}",
            data.meta.scheme.name(),
            model.config.scheme.name()
        )));
    }
    Ok(())
}

fn constants<'g, T: Float>(g: &'g Graph<T>, params: &ParamStore<T>) -> Vec<Var<'g, T>> {
    params.values().iter().map(|v| g.constant(v.clone())).collect()
}

/// Center-crop evaluation with frozen bank summaries.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    data: &Dataset,
    rules: &RuleSet,
    stats: Option<&LabelStats>,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    check_compatible(model, data)?;
    let cfg = &model.config;
    let crop = AugmentConfig::eval(cfg.l);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..data.len()).collect();
    let (mut predictions, mut kl_sum) = (Vec::with_capacity(data.len()), 0.0);
    let (mut lu, mut la, mut l) = (0.0, 0.0, 0.0);
    let n = cfg.grid() * cfg.grid();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch: Batch<T> = make_batch(&data.samples, chunk, &cfg.aus, &crop, cfg.delta, rules, &mut rng)?;
        let g = Graph::new();
        let p = constants(&g, &model.params);
        let labels = stats.map(|s| (&batch.labels, s));
        let out = model.forward(&p, g.constant(batch.images.clone()), Some(&batch.priors), labels)?;
        let w = chunk.len() as f64;
        if let Some(v) = out.loss_u {
            lu += v.item().as_f64() * w;
        }
        if let Some(v) = out.loss_a {
            la += v.item().as_f64() * w;
        }
        if let Some(v) = out.loss {
            l += v.item().as_f64() * w;
        }
        for (a, prior) in out.avg_attention.iter().zip(&batch.priors) {
            let (av, pv) = (a.value().to_f64_vec(), prior.to_f64_vec());
            for b in 0..chunk.len() {
                kl_sum += kl_divergence(&pv[b * n..(b + 1) * n], &av[b * n..(b + 1) * n]);
            }
        }
        predictions.extend(out.probs);
    }
    let total = data.len() as f64;
    let report = f1_frame(&cfg.aus, &predictions, &data.labels(), DEFAULT_THRESHOLD)?;
    let constrained = out_has_constraint(model);
    Ok(Evaluation {
        report,
        predictions,
        loss_u: stats.map(|_| lu / total),
        loss_a: (constrained).then_some(la / total),
        loss: stats.map(|_| l / total),
        kl: kl_sum / (total * cfg.m() as f64),
    })
}

fn out_has_constraint<T: Float>(model: &Model<T>) -> bool {
    model.config.variant.constraint() != crate::model::Constraint::None
}

/// Fills every bank slot from a center-crop pass over `data`.
fn recompute_bank_slots<T: Float>(model: &mut Model<T>, data: &Dataset, rules: &RuleSet, batch_size: usize) -> Result<()> {
    let cfg = model.config.clone();
    let crop = AugmentConfig::eval(cfg.l);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch: Batch<T> = make_batch(&data.samples, chunk, &cfg.aus, &crop, cfg.delta, rules, &mut rng)?;
        let g = Graph::new();
        let p = constants(&g, &model.params);
        let out = model.forward(&p, g.constant(batch.images), None, None)?;
        store_features(model, &out.features, chunk)?;
    }
    Ok(())
}

fn store_features<T: Float>(model: &mut Model<T>, features: &[Var<'_, T>], ids: &[usize]) -> Result<()> {
    for (bank, f) in model.banks.iter_mut().zip(features) {
        let v = f.value();
        let dim = v.shape()[1];
        for (row, &id) in ids.iter().enumerate() {
            let feat: Vec<f32> = v.data()[row * dim..(row + 1) * dim].iter().map(|x| x.as_f64() as f32).collect();
            bank.update(id, &feat)?;
        }
    }
    Ok(())
}

fn refresh_banks<T: Float>(model: &mut Model<T>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mode = model.config.causal_mode;
    for bank in &mut model.banks {
        bank.refresh(mode, rng)?;
    }
    Ok(())
}

/// Runs the full optimization loop. With `out_dir`, the metrics log and the
/// checkpoint are rewritten after every epoch.
pub fn train<T: Float>(
    model: &mut Model<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    rules: &RuleSet,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Usage("batch size and epoch count must be positive".into()));
    }
    check_compatible(model, data)?;
    let eval = eval.unwrap_or(data);
    check_compatible(model, eval)?;
    let mcfg = model.config.clone();
    let stats = LabelStats::from_labels(&data.labels())?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = ScheduleConfig {
        base_lr: cfg.base_lr.unwrap_or_else(|| ScheduleConfig::scaled_base_lr(cfg.batch_size)),
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    schedule.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba4c);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay, cfg.clip_norm);
    let aug = AugmentConfig::train(mcfg.l, cfg.jitter);
    let policy = mcfg.variant.bank_policy();
    let literal = mcfg.causal_mode == CausalMode::Literal;

    let metrics_path: Option<PathBuf> = out_dir.map(|d| d.join("metrics.csv"));
    let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join("model.ckpt"));
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut log = metrics_header(&mcfg.aus);

    if policy.is_some() {
        // Warm start: one pass over the first mini-batch populates the banks.
        model.init_banks(data.len());
        for bank in &mut model.banks {
            bank.set_snapshot(vec![vec![0.0; bank.dim()]])?;
        }
        let ids: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
        let batch: Batch<T> = make_batch(&data.samples, &ids, &mcfg.aus, &AugmentConfig::eval(mcfg.l), mcfg.delta, rules, &mut rng)?;
        let g = Graph::new();
        let p = constants(&g, &model.params);
        let out = model.forward(&p, g.constant(batch.images), None, None)?;
        store_features(model, &out.features, &ids)?;
        refresh_banks(model, &mut bank_rng)?;
    }
    let initial = evaluate(model, eval, rules, Some(&stats), cfg.batch_size.max(32))?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_eval = initial.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_u, mut sum_a, mut sum_l) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if policy == Some(BankPolicy::Dynamic) && literal {
                refresh_banks(model, &mut bank_rng)?;
            }
            let batch: Batch<T> = make_batch(&data.samples, chunk, &mcfg.aus, &aug, mcfg.delta, rules, &mut rng)?;
            let lr = lr_at(opt.steps() as usize, &schedule);
            let g = Graph::new();
            let p = model.params.bind(&g);
            let out = model.forward(&p, g.constant(batch.images), Some(&batch.priors), Some((&batch.labels, &stats)))?;
            let loss = out.loss.expect("labels were given");
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} in epoch {epoch}")));
            }
            let w = chunk.len() as f64;
            sum_l += lv * w;
            sum_u += out.loss_u.map(|v| v.item().as_f64()).unwrap_or(0.0) * w;
            sum_a += out.loss_a.map(|v| v.item().as_f64()).unwrap_or(0.0) * w;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<T>> = p
                .iter()
                .zip(model.params.values())
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            if policy == Some(BankPolicy::Dynamic) {
                store_features(model, &out.features, chunk)?;
            }
            drop(out);
            opt.step(&mut model.params, grads, lr)?;
        }
        match policy {
            Some(BankPolicy::Static) => {
                recompute_bank_slots(model, data, rules, cfg.batch_size.max(32))?;
                refresh_banks(model, &mut bank_rng)?;
            }
            Some(BankPolicy::Dynamic) => refresh_banks(model, &mut bank_rng)?,
            None => {}
        }
        let ev = evaluate(model, eval, rules, Some(&stats), cfg.batch_size.max(32))?;
        let n = data.len() as f64;
        let m = EpochMetrics {
            epoch,
            loss_u: sum_u / n,
            loss_a: sum_a / n,
            loss: sum_l / n,
            kl: ev.kl,
            f1: ev.report.f1.clone(),
            f1_avg: ev.report.average,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (u {:.5}, a {:.6}) kl {:.4} f1 {:.2}",
            m.loss,
            m.loss_u,
            m.loss_a,
            m.kl,
            m.f1_avg
        );
        log.push_str(&metrics_row(&m));
        epochs.push(m);
        last_eval = ev;
        if let (Some(mp), Some(cp)) = (&metrics_path, &ckpt_path) {
            std::fs::write(mp, &log).map_err(|e| Error::io(mp, e))?;
            model.save(cp)?;
        }
    }
    Ok(TrainReport {
        epochs,
        initial_kl: initial.kl,
        stats,
        final_eval: last_eval,
        steps: opt.steps(),
    })
}
