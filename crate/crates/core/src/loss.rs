//! Retrieval objectives: symmetric InfoNCE, InfoNCE with filtered negatives,
//! in-batch score distributions and the cross-consistent KL terms.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, Init, MASKED_LOGIT};

/// Learnable InfoNCE temperature stored as `log_tau`.
#[derive(Clone, Debug)]
pub struct Temperature {
    pub log_tau: Tensor,
}

impl Temperature {
    pub const INITIAL_TAU: f32 = 0.1;

    pub fn new(init: &mut Init) -> Result<Self> {
        Ok(Self { log_tau: init.constant("log_tau", &[], Self::INITIAL_TAU.ln())? })
    }

    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.log_tau.exp()?)
    }
}

fn identity(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::eye(n, dtype, device)?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    crate::nn::ensure_finite(t, what)
}

/// Pairwise cosine similarities `[Bx, By]`.
pub fn cosine_matrix(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(normalize_rows(x)?.matmul(&normalize_rows(y)?.t()?)?)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min = norms.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min == 0.0 {
        return Err(Error::Numeric("zero-norm feature row in cosine similarity".into()));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Sum over `i` of the diagonal of `m`, divided by `B`.
fn diag_mean(m: &Tensor) -> Result<Tensor> {
    let n = m.dim(0)?;
    let eye = identity(n, m.dtype(), m.device())?;
    Ok((m.mul(&eye)?.sum_all()? / n as f64)?)
}

fn nce_from_logits(logits: &Tensor) -> Result<Tensor> {
    let rows = log_softmax(logits, 1)?;
    let cols = log_softmax(logits, 0)?;
    Ok((diag_mean(&(rows + cols)?)? * -1.0)?)
}

/// Symmetric InfoNCE over a `[B, B]` similarity matrix with positives on the
/// diagonal. `tau` is a scalar tensor.
pub fn info_nce(sim: &Tensor, tau: &Tensor) -> Result<Tensor> {
    check_similarity(sim)?;
    nce_from_logits(&sim.broadcast_div(tau)?)
}

fn check_similarity(sim: &Tensor) -> Result<()> {
    let (b, b2) = sim.dims2()?;
    if b < 2 || b != b2 {
        return Err(Error::Invalid(format!("InfoNCE needs a square matrix with B >= 2, got {b}x{b2}")));
    }
    check_finite(sim, "similarity matrix")
}

/// Additive `[B, B]` bias that removes off-diagonal pairs whose teacher
/// similarity reaches `threshold`. `None` when nothing is filtered.
pub fn negative_filter(teacher_sim: &Tensor, threshold: f64) -> Result<Option<Tensor>> {
    let (b, _) = teacher_sim.dims2()?;
    let t = teacher_sim.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut bias = vec![0.0f64; b * b];
    let mut any = false;
    for i in 0..b {
        for j in 0..b {
            if i != j && t[i][j] >= threshold {
                bias[i * b + j] = MASKED_LOGIT;
                any = true;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    Ok(Some(Tensor::from_vec(bias, (b, b), teacher_sim.device())?.to_dtype(teacher_sim.dtype())?))
}

/// InfoNCE with wrong negatives (teacher similarity at or above `threshold`)
/// removed from both softmax denominators. A row whose negatives are all
/// removed contributes zero.
pub fn info_nce_filtered(sim: &Tensor, teacher_sim: &Tensor, threshold: f64, tau: &Tensor) -> Result<Tensor> {
    if sim.dims() != teacher_sim.dims() {
        return Err(Error::Invalid(format!(
            "similarity {:?} and teacher {:?} shapes differ",
            sim.dims(),
            teacher_sim.dims()
        )));
    }
    match negative_filter(teacher_sim, threshold)? {
        None => info_nce(sim, tau),
        Some(bias) => {
            check_similarity(sim)?;
            nce_from_logits(&(sim.broadcast_div(tau)? + bias.to_dtype(sim.dtype())?)?)
        }
    }
}

/// Column-stochastic score distributions with their logs.
#[derive(Clone, Debug)]
pub struct ScoreDistributions {
    pub s_t2m: Tensor,
    pub s_m2t: Tensor,
    pub s_m2m: Tensor,
    pub s_t2t: Tensor,
    pub log_t2m: Tensor,
    pub log_m2t: Tensor,
    pub log_m2m: Tensor,
    pub log_t2t: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionConfig {
    /// Softmax temperature for the score distributions (not the InfoNCE tau).
    pub temperature: f64,
    /// Drop the diagonal from every distribution, including the teacher's.
    pub exclude_diagonal: bool,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self { temperature: 1.0, exclude_diagonal: false }
    }
}

fn diag_bias(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok((identity(n, dtype, device)? * MASKED_LOGIT)?)
}

/// Log of the column softmax of `scores / temperature`.
fn log_column_softmax(scores: &Tensor, cfg: &DistributionConfig) -> Result<Tensor> {
    let mut logits = (scores / cfg.temperature)?;
    if cfg.exclude_diagonal {
        let n = logits.dim(0)?;
        logits = (logits + diag_bias(n, scores.dtype(), scores.device())?)?;
    }
    log_softmax(&logits, 0)
}

/// Column `j` of each matrix is a softmax over `i`:
/// t2m uses `s(t_j, m_i)`, m2t uses `s(m_j, t_i)`, and the uni-modal ones use
/// `s(m_j, m_i)` and `s(t_j, t_i)`.
pub fn score_distributions(t: &Tensor, m: &Tensor, cfg: &DistributionConfig) -> Result<ScoreDistributions> {
    let (b, _) = t.dims2()?;
    if b < 2 || m.dims() != t.dims() {
        return Err(Error::Invalid("score distributions need matching features with B >= 2".into()));
    }
    let c_tm = cosine_matrix(t, m)?;
    let c_mm = cosine_matrix(m, m)?;
    let c_tt = cosine_matrix(t, t)?;
    let log_t2m = log_column_softmax(&c_tm.t()?, cfg)?;
    let log_m2t = log_column_softmax(&c_tm, cfg)?;
    let log_m2m = log_column_softmax(&c_mm, cfg)?;
    let log_t2t = log_column_softmax(&c_tt, cfg)?;
    Ok(ScoreDistributions {
        s_t2m: log_t2m.exp()?,
        s_m2t: log_m2t.exp()?,
        s_m2m: log_m2m.exp()?,
        s_t2t: log_t2t.exp()?,
        log_t2m,
        log_m2t,
        log_m2m,
        log_t2t,
    })
}

/// Reference distribution from raw teacher similarities, column softmax.
pub fn teacher_distribution(teacher_sim: &Tensor, temperature: f64, exclude_diagonal: bool) -> Result<Tensor> {
    log_column_softmax(
        teacher_sim,
        &DistributionConfig { temperature, exclude_diagonal },
    )
}

/// Per-column `KL(P_j || Q_j)` from log-probabilities, `[B]`.
pub fn kl_columns(log_p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    Ok(log_p.exp()?.mul(&(log_p - log_q)?)?.sum(0)?)
}

/// Per-column symmetric KL, `[B]`.
pub fn symm_kl_columns(log_p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    Ok(((kl_columns(log_p, log_q)? + kl_columns(log_q, log_p)?)? * 0.5)?)
}

/// Symmetric KL of two strictly positive distributions.
pub fn symm_kl(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.dims() != q.dims() {
        return Err(Error::Invalid("distributions have different shapes".into()));
    }
    let min = p.min_all()?.minimum(&q.min_all()?)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min <= 0.0 {
        return Err(Error::Numeric("symmetric KL of a distribution with a zero entry".into()));
    }
    let n = p.elem_count();
    let (lp, lq) = (p.reshape((n, 1))?.log()?, q.reshape((n, 1))?.log()?);
    Ok(symm_kl_columns(&lp, &lq)?.sum_all()?)
}

/// Cross-modal distributions pulled toward each uni-modal one with symmetric
/// KL, averaged over columns, summed over the two uni-modal targets.
pub fn loss_cross_to_uni(d: &ScoreDistributions) -> Result<Tensor> {
    let b = d.log_t2m.dim(1)? as f64;
    let mut total: Option<Tensor> = None;
    for uni in [&d.log_t2t, &d.log_m2m] {
        let pair = (symm_kl_columns(&d.log_t2m, uni)? + symm_kl_columns(&d.log_m2t, uni)?)?;
        let term = ((pair.sum_all()? * 0.5)? / b)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// `KL(GT || t2t) + KL(GT || m2m)`, each averaged over columns. `log_gt` is
/// the log of the column-stochastic teacher distribution.
pub fn loss_teacher_to_uni(log_gt: &Tensor, d: &ScoreDistributions) -> Result<Tensor> {
    let b = log_gt.dim(1)? as f64;
    let t2t = kl_columns(log_gt, &d.log_t2t)?.sum_all()?;
    let m2m = kl_columns(log_gt, &d.log_m2m)?.sum_all()?;
    Ok(((t2t + m2m)? / b)?)
}

/// Linear transition from teacher supervision to self-consistency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwipeConfig {
    pub t_start: usize,
    pub t_end: usize,
}

impl SwipeConfig {
    pub const FULL: SwipeConfig = SwipeConfig { t_start: 40, t_end: 100 };

    pub fn new(t_start: usize, t_end: usize) -> Result<Self> {
        let s = Self { t_start, t_end };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start >= self.t_end {
            return Err(Error::Config(format!(
                "swipe start {} must precede end {}",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for SwipeConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("swipe must be start:end, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad swipe epoch {v:?}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

/// `clamp((t - t_start) / (t_end - t_start), 0, 1)`.
pub fn lambda_schedule(epoch: usize, cfg: &SwipeConfig) -> f64 {
    let x = (epoch as f64 - cfg.t_start as f64) / (cfg.t_end as f64 - cfg.t_start as f64);
    x.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcclConfig {
    pub distributions: DistributionConfig,
    pub teacher_temperature: f64,
    /// Filter wrong negatives inside the InfoNCE term as well.
    pub nce_filter: Option<f64>,
}

impl Default for CcclConfig {
    fn default() -> Self {
        Self {
            distributions: DistributionConfig::default(),
            teacher_temperature: 1.0,
            nce_filter: None,
        }
    }
}

/// Loss value with its parts. Terms carrying zero weight are not computed
/// and reported as `None`.
#[derive(Clone, Debug)]
pub struct CcclOutput {
    pub total: Tensor,
    pub nce: Tensor,
    pub cross_to_uni: Option<Tensor>,
    pub teacher_to_uni: Option<Tensor>,
    pub lambda: f64,
}

impl CcclOutput {
    /// `(name, value)` pairs for logging.
    pub fn breakdown(&self) -> Result<Vec<(&'static str, f64)>> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut out = vec![("total", v(&self.total)?), ("nce", v(&self.nce)?)];
        if let Some(t) = &self.cross_to_uni {
            out.push(("cross_to_uni", v(t)?));
        }
        if let Some(t) = &self.teacher_to_uni {
            out.push(("teacher_to_uni", v(t)?));
        }
        out.push(("lambda", self.lambda));
        Ok(out)
    }
}

/// `L_nce + lambda * L_cross_to_uni + (1 - lambda) * L_teacher_to_uni`.
/// `teacher_sim` holds raw teacher similarities and is required unless
/// `lambda == 1`.
pub fn cccl_total(
    t: &Tensor,
    m: &Tensor,
    tau: &Tensor,
    teacher_sim: Option<&Tensor>,
    lambda: f64,
    cfg: &CcclConfig,
) -> Result<CcclOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let sim = cosine_matrix(t, m)?;
    let nce = match (cfg.nce_filter, teacher_sim) {
        (Some(th), Some(ts)) => info_nce_filtered(&sim, ts, th, tau)?,
        (Some(_), None) => return Err(Error::Invalid("negative filtering needs teacher similarities".into())),
        (None, _) => info_nce(&sim, tau)?,
    };
    let d = score_distributions(t, m, &cfg.distributions)?;
    let mut total = nce.clone();
    let mut cross_to_uni = None;
    let mut teacher_to_uni = None;
    if lambda > 0.0 {
        let c = loss_cross_to_uni(&d)?;
        total = (total + (&c * lambda)?)?;
        cross_to_uni = Some(c);
    }
    if lambda < 1.0 {
        let ts = teacher_sim
            .ok_or_else(|| Error::Invalid("teacher similarities required when lambda < 1".into()))?;
        let log_gt = teacher_distribution(
            &ts.to_dtype(t.dtype())?,
            cfg.teacher_temperature,
            cfg.distributions.exclude_diagonal,
        )?;
        let tu = loss_teacher_to_uni(&log_gt, &d)?;
        total = (total + (&tu * (1.0 - lambda))?)?;
        teacher_to_uni = Some(tu);
    }
    check_finite(&total, "retrieval loss")?;
    Ok(CcclOutput { total, nce, cross_to_uni, teacher_to_uni, lambda })
}
