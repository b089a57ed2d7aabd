//! Training loop, optimizer and the finite-difference gradient checker.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::generative::{draw_noise, loss_kl, loss_reconstruction, reparameterize, KlTerms};
use crate::loss::{cccl_total, cosine_matrix, info_nce, info_nce_filtered, lambda_schedule, CcclConfig, SwipeConfig};
use crate::model::{ModelConfig, RetrievalModel};
use crate::nn::{ensure_finite, Ctx};
use crate::text::{teacher_matrix, Teacher, TfidfTeacher, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// InfoNCE plus cross-consistency terms, teacher faded out by the swipe.
    Cccl,
    /// InfoNCE with wrong negatives filtered by teacher similarity.
    InfonceF,
    /// Cross-consistency only, no teacher (lambda fixed at 1).
    CcclSelf,
    /// Teacher supervision only (lambda fixed at 0).
    CcclSupervised,
    /// Plain symmetric InfoNCE.
    Infonce,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cccl" => LossMode::Cccl,
            "infonce_f" => LossMode::InfonceF,
            "cccl_self" => LossMode::CcclSelf,
            "cccl_supervised" => LossMode::CcclSupervised,
            "infonce" => LossMode::Infonce,
            _ => return Err(Error::Config(format!("unknown loss mode {s:?}"))),
        })
    }
}

impl LossMode {
    pub fn lambda(&self, epoch: usize, swipe: &SwipeConfig) -> Option<f64> {
        match self {
            LossMode::Cccl => Some(lambda_schedule(epoch, swipe)),
            LossMode::CcclSelf => Some(1.0),
            LossMode::CcclSupervised => Some(0.0),
            LossMode::InfonceF | LossMode::Infonce => None,
        }
    }

    fn needs_teacher(&self) -> bool {
        !matches!(self, LossMode::CcclSelf | LossMode::Infonce)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub swipe: SwipeConfig,
    pub loss_mode: LossMode,
    /// Manifest paths; more than one means joint-dataset training.
    pub datasets: Vec<PathBuf>,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub kl_terms: KlTerms,
    pub cccl: CcclConfig,
    /// Teacher similarity at or above which a negative is dropped.
    pub filter_threshold: f64,
    /// Optional precomputed teacher embedding file; the TF-IDF stub otherwise.
    pub teacher_embeddings: Option<PathBuf>,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Single-core scale: width 64, 4 encoder layers, batch 16.
    pub fn desk() -> Self {
        let mut model = ModelConfig::desk();
        model.motion.dropout = 0.0;
        model.text.dropout = 0.0;
        Self {
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            swipe: SwipeConfig { t_start: 8, t_end: 20 },
            loss_mode: LossMode::Cccl,
            datasets: Vec::new(),
            lambda_rec: 1.0,
            lambda_kl: 1e-5,
            kl_terms: KlTerms::default(),
            cccl: CcclConfig::default(),
            filter_threshold: 0.95,
            teacher_embeddings: None,
            model,
        }
    }

    /// 250 epochs at learning rate 5e-5 with the (40, 100) swipe.
    pub fn full() -> Self {
        Self {
            epochs: 250,
            batch_size: 32,
            learning_rate: 5e-5,
            swipe: SwipeConfig::FULL,
            model: ModelConfig::full(),
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.swipe.validate()?;
        self.model.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut x = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One training example: a pair and the caption drawn for it this epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub pair: usize,
    pub caption: usize,
}

/// Shuffles the train split with `seed`, draws one caption per pair and cuts
/// full batches. Indices refer to `ds.pairs`.
pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<BatchItem>>> {
    let train: Vec<usize> = (0..ds.pairs.len())
        .filter(|&i| ds.pairs[i].split == Split::Train)
        .collect();
    if batch_size < 2 || train.len() < batch_size {
        return Err(Error::Invalid(format!(
            "{} training pairs cannot fill a batch of {batch_size}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train;
    order.shuffle(&mut rng);
    let items: Vec<BatchItem> = order
        .into_iter()
        .map(|pair| BatchItem { pair, caption: rng.random_range(0..ds.pairs[pair].texts.len()) })
        .collect();
    Ok(items
        .chunks_exact(batch_size)
        .map(<[BatchItem]>::to_vec)
        .collect())
}

/// Adaptive-moment gradient descent with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    state: Vec<(Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: impl IntoIterator<Item = Var>, lr: f64) -> Result<Self> {
        let state = vars
            .into_iter()
            .map(|v| {
                let z = v.zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<_>>()?;
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (var, m, v) in &mut self.state {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&*m / c1)? / ((&*v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

/// One metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).expect("history records serialize");
        out.push(b'\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub struct TrainOutput {
    pub model: RetrievalModel,
    pub history: Vec<HistoryRecord>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Where per-epoch checkpoints and history are written.
#[derive(Clone, Debug, Default)]
pub struct TrainSink {
    pub out_dir: Option<PathBuf>,
}

/// Builds the teacher configured for `cfg` over the training captions.
pub fn build_teacher(cfg: &TrainConfig, ds: &Dataset) -> Result<Teacher> {
    if let Some(path) = &cfg.teacher_embeddings {
        return Ok(Teacher::Embeddings(crate::text::EmbeddingTeacher::load(path)?));
    }
    Ok(Teacher::Tfidf(TfidfTeacher::fit(
        ds.split(Split::Train)
            .into_iter()
            .flat_map(|p| p.texts.iter().map(String::as_str)),
    )))
}

/// Vocabulary over all training captions.
pub fn build_vocab(ds: &Dataset) -> Vocab {
    Vocab::build(
        ds.split(Split::Train)
            .into_iter()
            .flat_map(|p| p.texts.iter().map(String::as_str)),
    )
}

/// Everything a step needs, resolved once per run.
struct Prepared {
    motions: Vec<Option<Arc<MotionSequence>>>,
}

impl Prepared {
    fn new(ds: &Dataset, max_frames: usize) -> Result<Self> {
        let motions = ds
            .pairs
            .iter()
            .map(|p| {
                if p.split != Split::Train {
                    return Ok(None);
                }
                let m = p.motion.load()?;
                Ok(Some(if m.frames() > max_frames { Arc::new(m.downsample(max_frames)) } else { m }))
            })
            .collect::<Result<_>>()?;
        Ok(Self { motions })
    }
}

/// Per-step losses as scalar tensors.
pub struct StepLoss {
    pub total: Tensor,
    pub terms: Vec<(&'static str, f64)>,
}

/// Forward pass and loss for one batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &RetrievalModel,
    cfg: &TrainConfig,
    motions: &[&MotionSequence],
    captions: &[&str],
    teacher: Option<&Teacher>,
    lambda: Option<f64>,
    noise_rng: &mut ChaCha8Rng,
    ctx: &Ctx,
) -> Result<StepLoss> {
    let mbatch = model.motion_batch(motions)?;
    let mg = model.motion.forward(&mbatch, ctx)?;
    let tg = model.text.forward(&model.text_batch(captions)?, ctx)?;
    let tau = model.temperature.tau()?;
    let dtype = model.dtype();
    let teacher_sim = match (cfg.loss_mode.needs_teacher() && lambda != Some(1.0), teacher) {
        (true, Some(t)) => Some(teacher_matrix(captions, t, dtype)?),
        (true, None) => return Err(Error::TeacherUnavailable("loss mode needs a teacher".into())),
        (false, _) => None,
    };
    let mut terms = Vec::new();
    let retrieval = match cfg.loss_mode {
        LossMode::Infonce => info_nce(&cosine_matrix(&tg.mu, &mg.mu)?, &tau)?,
        LossMode::InfonceF => info_nce_filtered(
            &cosine_matrix(&tg.mu, &mg.mu)?,
            teacher_sim.as_ref().unwrap(),
            cfg.filter_threshold,
            &tau,
        )?,
        _ => {
            let out = cccl_total(&tg.mu, &mg.mu, &tau, teacher_sim.as_ref(), lambda.unwrap(), &cfg.cccl)?;
            terms.extend(out.breakdown()?.into_iter().filter(|(n, _)| !matches!(*n, "total" | "lambda")));
            out.total
        }
    };
    terms.push(("retrieval", scalar(&retrieval)?));
    let mut total = retrieval;
    if cfg.lambda_rec > 0.0 {
        let sample = reparameterize(&mg, &draw_noise(noise_rng, &mg.mu)?)?;
        let decoded = model.decoder.forward(&sample.z, &mbatch.mask, ctx)?;
        let rec = loss_reconstruction(&mbatch.groups, &decoded.groups, &mbatch.mask)?;
        terms.push(("reconstruction", scalar(&rec)?));
        total = (total + (rec * cfg.lambda_rec)?)?;
    }
    if cfg.lambda_kl > 0.0 {
        let kl = loss_kl(&mg, &tg, cfg.kl_terms)?;
        terms.push(("kl", scalar(&kl)?));
        total = (total + (kl * cfg.lambda_kl)?)?;
    }
    let value = scalar(&total)?;
    terms.insert(0, ("total", value));
    Ok(StepLoss { total, terms })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains a fresh model on the train split of `ds`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, sink: &TrainSink) -> Result<TrainOutput> {
    cfg.validate()?;
    let vocab = build_vocab(ds);
    let model = RetrievalModel::new(&cfg.model, vocab, DType::F32, cfg.seed)?;
    train_model(cfg, ds, model, sink)
}

/// Continues training `model` on the train split of `ds`.
pub fn train_model(cfg: &TrainConfig, ds: &Dataset, model: RetrievalModel, sink: &TrainSink) -> Result<TrainOutput> {
    cfg.validate()?;
    let teacher = if cfg.loss_mode.needs_teacher() { Some(build_teacher(cfg, ds)?) } else { None };
    let prepared = Prepared::new(ds, cfg.model.motion.max_frames)?;
    let mut adam = Adam::new(model.store.vars().iter().map(|(_, v)| v.clone()), cfg.learning_rate)?;
    let mut history = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let dropout = cfg.model.motion.dropout;

    for epoch in 0..cfg.epochs {
        let eseed = epoch_seed(cfg.seed, epoch);
        let batches = make_batches(ds, cfg.batch_size, eseed)?;
        let lambda = cfg.loss_mode.lambda(epoch, &cfg.swipe);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(eseed ^ 0x6E6F_6973_6500_0000);
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        for (step, batch) in batches.iter().enumerate() {
            let motions: Vec<&MotionSequence> = batch
                .iter()
                .map(|it| prepared.motions[it.pair].as_deref().expect("train pair preloaded"))
                .collect();
            let captions: Vec<&str> = batch
                .iter()
                .map(|it| ds.pairs[it.pair].texts[it.caption].as_str())
                .collect();
            let ctx = Ctx::train(dropout, eseed.wrapping_add(step as u64));
            let loss = batch_loss(&model, cfg, &motions, &captions, teacher.as_ref(), lambda, &mut noise_rng, &ctx)
                .map_err(|e| with_position(e, epoch, step))?;
            ensure_finite(&loss.total, "training loss").map_err(|e| with_position(e, epoch, step))?;
            for (name, value) in &loss.terms {
                log::debug!("epoch={epoch} step={step} term={name} value={value}");
            }
            let grads = loss.total.backward()?;
            adam.step(&grads)?;
            if sums.is_empty() {
                sums = loss.terms.iter().map(|(n, _)| (*n, 0.0)).collect();
            }
            for ((_, s), (_, v)) in sums.iter_mut().zip(&loss.terms) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        for (name, s) in &sums {
            history.push(HistoryRecord { epoch, term: name.to_string(), value: s / n });
        }
        if let Some(l) = lambda {
            history.push(HistoryRecord { epoch, term: "lambda".into(), value: l });
        }
        history.push(HistoryRecord { epoch, term: "tau".into(), value: scalar(&model.temperature.tau()?)? });
        let mean = sums.first().map(|(_, s)| s / n).unwrap_or(f64::NAN);
        epoch_losses.push(mean);
        log::info!("epoch {epoch}: loss {mean:.5}");
        if let Some(dir) = &sink.out_dir {
            model.save(&dir.join("checkpoint.motc"))?;
            write_history(&dir.join("history.jsonl"), &history)?;
        }
    }
    Ok(TrainOutput { model, history, epoch_losses })
}

fn with_position(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (epoch {epoch}, step {step})")),
        other => other,
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub passed: bool,
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor, relative to `max(1, |f|)`, so that gradients near
    /// zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, samples: 6, seed: 0, floor: 1e-6 }
    }
}

/// Compares autodiff gradients of `loss` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on sampled coordinates of every `params`
/// tensor. Run in f64.
pub fn grad_check(
    loss: impl Fn() -> Result<Tensor>,
    params: &[(String, Var)],
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let value = loss()?;
    // Central differences carry roundoff proportional to |f|, so the
    // denominator floor scales with it.
    let floor = cfg.floor * scalar(&value)?.abs().max(1.0);
    let grads = value.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (name, var) in params {
        let base = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut coords: Vec<usize> = (0..base.len()).collect();
        if coords.len() > cfg.samples {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.samples);
        }
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let eval_at = |x: f64| -> Result<f64> {
                let mut data = base.clone();
                data[k] = x;
                var.set(&Tensor::from_vec(data, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
                scalar(&loss()?)
            };
            let plus = eval_at(base[k] + cfg.eps)?;
            let minus = eval_at(base[k] - cfg.eps)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let denom = analytic[k].abs().max(numeric.abs()).max(floor);
            let rel = (analytic[k] - numeric).abs() / denom;
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            checked += 1;
        }
        var.set(&Tensor::from_vec(base, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
        per_tensor.push((name.clone(), worst));
    }
    let (worst, max_rel_error) = per_tensor
        .iter()
        .fold((String::new(), 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc });
    Ok(GradReport { passed: max_rel_error < cfg.tol, per_tensor, max_rel_error, worst, checked })
}
