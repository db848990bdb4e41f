//! Distillation objectives.
//!
//! Every function records its computation on the caller's graph. Teacher-side
//! inputs are expected to be constants (see [`ForwardValues::to_graph`]), so
//! gradients can only reach the student and its adapters.
//!
//! Batch conventions: cross-entropy and KL terms are averaged over the batch;
//! feature distances are summed over the elements of each sample and then
//! averaged over the batch.
//!
//! [`ForwardValues::to_graph`]: crate::nn::ForwardValues::to_graph

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Norm, Var};
use crate::nn::{FeatureTransform, ForwardOutput, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable loss identifiers used by configs and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ce,
    Kd,
    Ban,
    At,
    L1,
    Ft,
    Feed,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ce,
        LossKind::Kd,
        LossKind::Ban,
        LossKind::At,
        LossKind::L1,
        LossKind::Ft,
        LossKind::Feed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Kd => "kd",
            LossKind::Ban => "ban",
            LossKind::At => "at",
            LossKind::L1 => "l1",
            LossKind::Ft => "ft",
            LossKind::Feed => "feed",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != LossKind::Ce
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!("unknown loss {s:?} (ce|kd|ban|at|l1|ft|feed)"))
            })
    }
}

/// Weight and temperature of the softened-label term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdParams<S> {
    pub alpha: S,
    pub temperature: S,
}

impl<S: Scalar> Default for KdParams<S> {
    fn default() -> Self {
        Self {
            alpha: S::of(0.9),
            temperature: S::of(4.0),
        }
    }
}

impl<S: Scalar> KdParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= S::zero() && self.alpha <= S::one()) {
            return Err(Error::Parameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.temperature > S::zero()) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// What a feature map is divided by before distances are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizeScope {
    /// Each sample's map by its own L2 norm.
    #[default]
    Sample,
    /// The whole batch tensor by one L2 norm.
    Batch,
}

impl FromStr for NormalizeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "batch" => Ok(Self::Batch),
            _ => Err(Error::Parameter(format!(
                "unknown normalize scope {s:?} (sample|batch)"
            ))),
        }
    }
}

impl fmt::Display for NormalizeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sample => "sample",
            Self::Batch => "batch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureLossParams<S> {
    /// Weight of the feature term against cross-entropy.
    pub beta: S,
    /// Added to every L2-norm denominator.
    pub eps: S,
    pub scope: NormalizeScope,
}

impl<S: Scalar> Default for FeatureLossParams<S> {
    fn default() -> Self {
        Self {
            beta: S::of(500.0),
            eps: S::of(1e-8),
            scope: NormalizeScope::Sample,
        }
    }
}

impl<S: Scalar> FeatureLossParams<S> {
    pub fn with_beta(beta: S) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > S::zero()) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.eps > S::zero()) {
            return Err(Error::Parameter(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// How several teachers' logits become one soft target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KdEnsemble {
    /// Average of the softened distributions.
    #[default]
    Prob,
    /// Softened distribution of the averaged logits.
    Logit,
}

impl FromStr for KdEnsemble {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(Self::Prob),
            "logit" => Ok(Self::Logit),
            _ => Err(Error::Parameter(format!(
                "unknown kd ensemble mode {s:?} (prob|logit)"
            ))),
        }
    }
}

impl fmt::Display for KdEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prob => "prob",
            Self::Logit => "logit",
        })
    }
}

/// A loss split into the pieces that are logged.
///
/// `total == ce + feature`; `ce` and `feature` are the weighted terms as they
/// enter the total, `per_teacher` are the unweighted per-teacher terms.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub feature: Var,
    pub per_teacher: Vec<Var>,
}

/// Scalar snapshot of a [`LossParts`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub feature: f64,
    pub per_teacher: Vec<f64>,
}

impl LossParts {
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> Result<LossValues> {
        Ok(LossValues {
            total: g.item(self.total)?.as_f64(),
            ce: g.item(self.ce)?.as_f64(),
            feature: g.item(self.feature)?.as_f64(),
            per_teacher: self
                .per_teacher
                .iter()
                .map(|&v| g.item(v).map(|x| x.as_f64()))
                .collect::<Result<_>>()?,
        })
    }

    fn ce_only<S: Scalar>(g: &mut Graph<S>, ce: Var) -> Self {
        let feature = g.constant(Tensor::scalar(S::zero()));
        Self {
            total: ce,
            ce,
            feature,
            per_teacher: Vec::new(),
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits, S::one())?;
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -S::one()))
}

/// Plain cross-entropy wrapped as [`LossParts`].
pub fn ce_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<LossParts> {
    let ce = cross_entropy(g, logits, labels)?;
    Ok(LossParts::ce_only(g, ce))
}

/// Mean over rows of `sum_k p_k (log p_k - log q_k)`, with both arguments
/// given as log-probabilities.
fn kl_rows<S: Scalar>(g: &mut Graph<S>, log_p: Var, log_q: Var) -> Result<Var> {
    let p = g.exp(log_p);
    let d = g.sub(log_p, log_q)?;
    let w = g.mul(p, d)?;
    let rows = g.sum_per_sample(w)?;
    g.mean(rows)
}

/// Log of the soft target built from one or more teachers' logits.
pub fn soft_target<S: Scalar>(
    teachers: &[&Tensor<S>],
    temperature: S,
    mode: KdEnsemble,
) -> Result<Tensor<S>> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::Config("soft target needs at least one teacher".into()))?;
    if let Some(bad) = teachers.iter().find(|t| t.shape() != first.shape()) {
        return Err(shape_err("teacher logits", first.shape(), bad.shape()));
    }
    let inv_n = S::one() / S::of(teachers.len() as f64);
    let mut g = Graph::no_grad();
    match mode {
        KdEnsemble::Logit => {
            let mut acc = vec![S::zero(); first.numel()];
            for t in teachers {
                acc.iter_mut()
                    .zip(t.data())
                    .for_each(|(a, &v)| *a += v * inv_n);
            }
            let mean = g.constant(Tensor::new(first.shape(), acc)?);
            let out = g.log_softmax(mean, temperature)?;
            Ok(g.value(out).detached())
        }
        KdEnsemble::Prob => {
            let mut acc = vec![S::zero(); first.numel()];
            for t in teachers {
                let v = g.constant((*t).clone());
                let p = g.softmax(v, temperature)?;
                acc.iter_mut()
                    .zip(g.value(p).data())
                    .for_each(|(a, &v)| *a += v * inv_n);
            }
            Ok(Tensor::new(
                first.shape(),
                acc.into_iter().map(|v| v.ln()).collect(),
            )?)
        }
    }
}

/// `(1 - a) CE(y, softmax(s)) + a T^2 KL(softmax(s/T), softmax(t/T))`, KL
/// taken with the student distribution as its first argument.
pub fn kd_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    params: &KdParams<S>,
) -> Result<LossParts> {
    let t = g.value(teacher_logits).detached();
    kd_loss_ensemble(g, student_logits, &[&t], labels, params, KdEnsemble::Prob)
}

/// [`kd_loss`] against the combined target of several teachers.
pub fn kd_loss_ensemble<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_logits: &[&Tensor<S>],
    labels: &[usize],
    params: &KdParams<S>,
    mode: KdEnsemble,
) -> Result<LossParts> {
    params.validate()?;
    for t in teacher_logits {
        if t.shape() != g.shape(student_logits) {
            return Err(shape_err(
                "kd student vs teacher logits",
                g.shape(student_logits),
                t.shape(),
            ));
        }
    }
    let ce_raw = cross_entropy(g, student_logits, labels)?;
    let log_q = soft_target(teacher_logits, params.temperature, mode)?;
    let log_q = g.constant(log_q);
    let log_p = g.log_softmax(student_logits, params.temperature)?;
    let kl = kl_rows(g, log_p, log_q)?;
    let ce = g.scale(ce_raw, S::one() - params.alpha);
    let t2 = params.temperature * params.temperature;
    let feature = g.scale(kl, params.alpha * t2);
    let total = g.add(ce, feature)?;
    Ok(LossParts {
        total,
        ce,
        feature,
        per_teacher: vec![kl],
    })
}

/// `CE(y, softmax(s)) + KL(softmax(t), softmax(s))`, KL taken with the
/// teacher distribution as its first argument and no temperature.
pub fn ban_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
) -> Result<LossParts> {
    if g.shape(teacher_logits) != g.shape(student_logits) {
        return Err(shape_err(
            "ban student vs teacher logits",
            g.shape(student_logits),
            g.shape(teacher_logits),
        ));
    }
    let ce = cross_entropy(g, student_logits, labels)?;
    let t = g.value(teacher_logits).detached();
    let t = g.constant(t);
    let log_q = g.log_softmax(t, S::one())?;
    let log_p = g.log_softmax(student_logits, S::one())?;
    let kl = kl_rows(g, log_q, log_p)?;
    let total = g.add(ce, kl)?;
    Ok(LossParts {
        total,
        ce,
        feature: kl,
        per_teacher: vec![kl],
    })
}

/// Channel mean of squared activations: `[N, C, H, W] -> [N, H, W]`.
pub fn attention_map<S: Scalar>(g: &mut Graph<S>, a: Var) -> Result<Var> {
    if g.shape(a).len() != 4 {
        return Err(Error::Dimension(format!(
            "attention map expects [N,C,H,W], got {:?}",
            g.shape(a)
        )));
    }
    let sq = g.square(a);
    g.mean_axis1(sq)
}

/// Divides `x` by its L2 norm (plus `eps`) under the configured scope.
pub fn normalize<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    params: &FeatureLossParams<S>,
) -> Result<Var> {
    match params.scope {
        NormalizeScope::Sample => {
            let n = g.norm_per_sample(x, Norm::L2)?;
            let d = g.add_scalar(n, params.eps);
            g.div_per_sample(x, d)
        }
        NormalizeScope::Batch => {
            let n = g.reduce_norm(x, Norm::L2)?;
            let d = g.add_scalar(n, params.eps);
            g.div_scalar(x, d)
        }
    }
}

/// Batch mean of `|| t/||t|| - s/||s|| ||_p` between two equally shaped maps.
pub fn normalized_distance<S: Scalar>(
    g: &mut Graph<S>,
    teacher: Var,
    student: Var,
    p: Norm,
    params: &FeatureLossParams<S>,
) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(shape_err(
            "teacher vs student feature map",
            g.shape(teacher),
            g.shape(student),
        ));
    }
    let t = normalize(g, teacher, params)?;
    let s = normalize(g, student, params)?;
    let d = g.sub(t, s)?;
    let per = g.norm_per_sample(d, p)?;
    g.mean(per)
}

/// Sum over matching groups of the normalized attention-map distance.
pub fn attention_term<S: Scalar>(
    g: &mut Graph<S>,
    student: &ForwardOutput,
    teacher: &ForwardOutput,
    params: &FeatureLossParams<S>,
) -> Result<Var> {
    let groups = student.groups();
    if groups.is_empty() {
        return Err(Error::Config(
            "attention transfer needs at least one group tap".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for (name, s_tap) in groups {
        let t_tap = teacher.tap(name)?;
        let (ss, ts) = (g.shape(s_tap), g.shape(t_tap));
        if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[2..] != ts[2..] {
            return Err(shape_err(&format!("attention group {name}"), ss, ts));
        }
        let fs = attention_map(g, s_tap)?;
        let ft = attention_map(g, t_tap)?;
        let term = normalized_distance(g, ft, fs, Norm::L2, params)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one group"))
}

/// `CE + beta * sum(terms)`.
fn ce_plus_terms<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &[usize],
    terms: Vec<Var>,
    beta: S,
) -> Result<LossParts> {
    let ce = cross_entropy(g, logits, labels)?;
    let mut sum = *terms
        .first()
        .ok_or_else(|| Error::Config("feature loss without teachers".into()))?;
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    let feature = g.scale(sum, beta);
    let total = g.add(ce, feature)?;
    Ok(LossParts {
        total,
        ce,
        feature,
        per_teacher: terms,
    })
}

/// Attention transfer from one teacher.
pub fn at_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: &ForwardOutput,
    teacher: &ForwardOutput,
    labels: &[usize],
    params: &FeatureLossParams<S>,
) -> Result<LossParts> {
    at_loss_multi(g, student, std::slice::from_ref(teacher), labels, params)
}

/// Attention transfer with one unchanged-beta term per teacher.
pub fn at_loss_multi<S: Scalar>(
    g: &mut Graph<S>,
    student: &ForwardOutput,
    teachers: &[ForwardOutput],
    labels: &[usize],
    params: &FeatureLossParams<S>,
) -> Result<LossParts> {
    params.validate()?;
    let terms = teachers
        .iter()
        .map(|t| attention_term(g, student, t, params))
        .collect::<Result<Vec<_>>>()?;
    ce_plus_terms(g, student.logits(), labels, terms, params.beta)
}

/// One teacher's feature term: normalized L1 distance between the teacher's
/// map and the transformed student map.
pub fn feed_loss<S: Scalar, T: FeatureTransform<S> + ?Sized>(
    g: &mut Graph<S>,
    teacher_feat: Var,
    student_feat: Var,
    ntl: &mut T,
    mode: Mode,
    params: &FeatureLossParams<S>,
) -> Result<Var> {
    let y = ntl.transform(g, student_feat, mode)?;
    if g.shape(y) != g.shape(teacher_feat) {
        return Err(shape_err(
            "NTL output vs teacher feature",
            g.shape(y),
            g.shape(teacher_feat),
        ));
    }
    normalized_distance(g, teacher_feat, y, Norm::L1, params)
}

/// `CE + beta * sum_n feed_loss(teacher_n, student, ntl_n)`.
pub fn pfeed_total<S: Scalar, T: FeatureTransform<S>>(
    g: &mut Graph<S>,
    student: &ForwardOutput,
    teacher_feats: &[Var],
    ntls: &mut [T],
    labels: &[usize],
    mode: Mode,
    params: &FeatureLossParams<S>,
) -> Result<LossParts> {
    params.validate()?;
    if teacher_feats.is_empty() || teacher_feats.len() != ntls.len() {
        return Err(Error::Config(format!(
            "{} teachers but {} NTLs",
            teacher_feats.len(),
            ntls.len()
        )));
    }
    let x_s = student.final_tap()?;
    let terms = teacher_feats
        .iter()
        .zip(ntls.iter_mut())
        .map(|(&t, ntl)| feed_loss(g, t, x_s, ntl, mode, params))
        .collect::<Result<Vec<_>>>()?;
    ce_plus_terms(g, student.logits(), labels, terms, params.beta)
}

/// `CE + beta * sum_n ||x_T/||x_T|| - x_S/||x_S|| ||_1` on the final maps,
/// i.e. FEED without any transformation layer.
pub fn l1_feature_loss<S: Scalar>(
    g: &mut Graph<S>,
    teacher_feats: &[Var],
    student: &ForwardOutput,
    labels: &[usize],
    params: &FeatureLossParams<S>,
) -> Result<LossParts> {
    params.validate()?;
    let x_s = student.final_tap()?;
    let terms = teacher_feats
        .iter()
        .map(|&t| normalized_distance(g, t, x_s, Norm::L1, params))
        .collect::<Result<Vec<_>>>()?;
    ce_plus_terms(g, student.logits(), labels, terms, params.beta)
}

/// Batch mean of `||x - P(x)||_2^2`.
pub fn reconstruction_loss<S: Scalar>(g: &mut Graph<S>, x: Var, recon: Var) -> Result<Var> {
    let d = g.sub(x, recon)?;
    let sq = g.square(d);
    let per = g.sum_per_sample(sq)?;
    g.mean(per)
}

/// Factor-transfer student objective given teacher factors (constants) and
/// the translated student factors, one pair per teacher.
pub fn ft_student_loss<S: Scalar>(
    g: &mut Graph<S>,
    teacher_factors: &[Var],
    student_factors: &[Var],
    logits: Var,
    labels: &[usize],
    params: &FeatureLossParams<S>,
) -> Result<LossParts> {
    params.validate()?;
    if teacher_factors.len() != student_factors.len() {
        return Err(Error::Config(format!(
            "{} teacher factors but {} translated student factors",
            teacher_factors.len(),
            student_factors.len()
        )));
    }
    let terms = teacher_factors
        .iter()
        .zip(student_factors)
        .map(|(&ft, &fs)| normalized_distance(g, ft, fs, Norm::L1, params))
        .collect::<Result<Vec<_>>>()?;
    ce_plus_terms(g, logits, labels, terms, params.beta)
}

/// Both factor-transfer losses for one teacher: the paraphraser's
/// reconstruction loss on the teacher map and the student loss against the
/// paraphraser's (detached) factor.
#[allow(clippy::too_many_arguments)]
pub fn ft_losses<S: Scalar, P: FeatureTransform<S>>(
    g: &mut Graph<S>,
    teacher_feat: Var,
    student: &ForwardOutput,
    paraphraser: &mut crate::nn::Paraphraser<S>,
    translator: &mut P,
    labels: &[usize],
    mode: Mode,
    params: &FeatureLossParams<S>,
) -> Result<(Var, LossParts)> {
    let (z, recon) = paraphraser.forward(g, teacher_feat, mode)?;
    let rec = reconstruction_loss(g, teacher_feat, recon)?;
    let f_t = g.value(z).detached();
    let f_t = g.constant(f_t);
    let f_s = translator.transform(g, student.final_tap()?, mode)?;
    if g.shape(f_s) != g.shape(f_t) {
        return Err(shape_err(
            "translator output vs paraphraser factor",
            g.shape(f_s),
            g.shape(f_t),
        ));
    }
    let student_loss = ft_student_loss(g, &[f_t], &[f_s], student.logits(), labels, params)?;
    Ok((rec, student_loss))
}
