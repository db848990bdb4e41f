//! Training loops: scratch, single- and multi-teacher distillation, pFEED
//! and sequential FEED stacking.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use feedkit_core::losses::{
    at_loss_multi, ban_loss, ce_loss, ft_student_loss, kd_loss_ensemble, l1_feature_loss,
    pfeed_total, LossKind, LossParts,
};
use feedkit_core::nn::{build_paraphraser, build_translator, FINAL_TAP};
use feedkit_core::{
    Arch, ForwardOutput, ForwardValues, Graph32, Mode, Network32, Paraphraser32, Sgd32, Tensor32,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    checkpoint_hash, encode, read_checkpoint, save_checkpoint, CheckpointMeta,
};
use crate::config::{Data, TrainConfig};
use crate::dataset::{augment, shuffled, Dataset};
use crate::error::{Result, TrainError};
use crate::recon::{extract_features, fit_paraphraser, ReconOptions};

/// Pixels of zero padding for random-crop augmentation.
const CROP_PAD: usize = 4;
const EVAL_BATCH: usize = 256;

/// Forward passes issued by the training steps of one run.
#[derive(Debug, Default)]
pub struct Counters {
    pub teacher_forwards: AtomicUsize,
    pub student_forwards: AtomicUsize,
    pub steps: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub teacher_forwards: usize,
    pub student_forwards: usize,
    pub steps: usize,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            teacher_forwards: self.teacher_forwards.load(Ordering::Relaxed),
            student_forwards: self.student_forwards.load(Ordering::Relaxed),
            steps: self.steps.load(Ordering::Relaxed),
        }
    }
}

/// Loss decomposition of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub feature: f64,
    pub per_teacher: Vec<f64>,
}

/// Sample-weighted epoch averages plus the end-of-epoch test error.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ce: f64,
    pub feature: f64,
    pub per_teacher: Vec<f64>,
    /// Percent.
    pub test_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub stack: usize,
    pub method: LossKind,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Empty for runs restored from disk.
    pub steps: Vec<StepLog>,
    pub checkpoint: Option<PathBuf>,
    /// Hash of the final student's checkpoint encoding.
    pub checkpoint_hash: u64,
    /// Teacher checkpoint hashes as loaded.
    pub teacher_hashes: Vec<u64>,
    /// Teacher state hashes after training, for the frozen-teacher check.
    pub teacher_hashes_after: Vec<u64>,
    pub counters: CounterSnapshot,
    pub resumed: bool,
}

impl RunRecord {
    pub fn final_test_error(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_error)
    }

    /// One row per epoch:
    /// `run_id,stack,epoch,lr,train_loss,ce_component,feat_component,test_error`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "run_id,stack,epoch,lr,train_loss,ce_component,feat_component,test_error\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.run_id, self.stack, e.epoch, e.lr, e.train_loss, e.ce, e.feature, e.test_error
            );
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,total,ce_component,feat_component,per_teacher\n");
        for s in &self.steps {
            let per: Vec<String> = s.per_teacher.iter().map(f64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.epoch,
                s.step,
                s.lr,
                s.total,
                s.ce,
                s.feature,
                per.join(";")
            );
        }
        out
    }
}

/// Reads a metrics CSV written by [`RunRecord::metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| -> Result<f64> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                TrainError::Format(format!("{}: bad field {i} in {row:?}", path.display()))
            })
        };
        out.push(EpochMetrics {
            epoch: field(2)? as usize,
            lr: field(3)?,
            train_loss: field(4)?,
            ce: field(5)?,
            feature: field(6)?,
            per_teacher: Vec::new(),
            test_error: field(7)?,
        });
    }
    Ok(out)
}

/// A finished run and its trained student.
#[derive(Clone, Debug)]
pub struct Run {
    pub record: RunRecord,
    pub student: Network32,
}

struct Teacher {
    net: Network32,
    meta: CheckpointMeta,
    hash: u64,
}

fn load_teachers(cfg: &TrainConfig) -> Result<Vec<Teacher>> {
    for p in &cfg.distill.teachers {
        if !p.is_file() {
            return Err(TrainError::Config(format!(
                "teacher checkpoint {} not found",
                p.display()
            )));
        }
    }
    cfg.distill
        .teachers
        .iter()
        .map(|p| {
            let ck = read_checkpoint(p)?;
            let mut net: Network32 = ck.to_network()?;
            net.set_frozen(true);
            Ok(Teacher {
                net,
                meta: ck.meta,
                hash: ck.hash,
            })
        })
        .collect()
}

/// Per-teacher adapters trained alongside the student.
enum Adapters {
    None,
    Ntls(Vec<Network32>),
    Ft {
        paraphrasers: Vec<Paraphraser32>,
        translators: Vec<Network32>,
    },
}

/// Eval-mode forwards of every teacher; several teachers run on their own
/// threads.
fn teacher_forwards(
    teachers: &[Teacher],
    x: &Tensor32,
    counters: &Counters,
) -> Result<Vec<ForwardValues<f32>>> {
    counters
        .teacher_forwards
        .fetch_add(teachers.len(), Ordering::Relaxed);
    if teachers.len() <= 1 {
        return teachers.iter().map(|t| Ok(t.net.infer(x)?)).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = teachers
            .iter()
            .map(|t| s.spawn(move || t.net.infer(x)))
            .collect();
        handles
            .into_iter()
            .map(|h| Ok(h.join().expect("teacher forward panicked")?))
            .collect()
    })
}

fn step_loss(
    g: &mut Graph32,
    cfg: &TrainConfig,
    student: &ForwardOutput,
    teachers: &[ForwardValues<f32>],
    adapters: &mut Adapters,
    labels: &[usize],
    mode: Mode,
) -> Result<LossParts> {
    let spec = &cfg.distill;
    let finals = |g: &mut Graph32| -> Result<Vec<_>> {
        teachers
            .iter()
            .map(|t| Ok(g.constant(t.final_tap()?.clone())))
            .collect()
    };
    let parts = match spec.method {
        LossKind::Ce => ce_loss(g, student.logits(), labels)?,
        LossKind::Kd => {
            let logits: Vec<&Tensor32> = teachers.iter().map(|t| &t.output).collect();
            kd_loss_ensemble(
                g,
                student.logits(),
                &logits,
                labels,
                &spec.kd,
                spec.kd_ensemble,
            )?
        }
        LossKind::Ban => {
            let t = g.constant(teachers[0].output.clone());
            ban_loss(g, student.logits(), t, labels)?
        }
        LossKind::At => {
            let outs: Vec<ForwardOutput> = teachers.iter().map(|t| t.to_graph(g)).collect();
            at_loss_multi(g, student, &outs, labels, &spec.feature)?
        }
        LossKind::L1 => {
            let feats = finals(g)?;
            l1_feature_loss(g, &feats, student, labels, &spec.feature)?
        }
        LossKind::Feed => {
            let feats = finals(g)?;
            let Adapters::Ntls(ntls) = adapters else {
                unreachable!("feed runs carry NTLs")
            };
            pfeed_total(g, student, &feats, ntls, labels, mode, &spec.feature)?
        }
        LossKind::Ft => {
            let Adapters::Ft {
                paraphrasers,
                translators,
            } = adapters
            else {
                unreachable!("ft runs carry paraphrasers")
            };
            let x_s = student.final_tap()?;
            let mut f_t = Vec::new();
            let mut f_s = Vec::new();
            for ((t, p), tr) in teachers
                .iter()
                .zip(paraphrasers.iter())
                .zip(translators.iter_mut())
            {
                let z = p.encoder.infer(t.final_tap()?)?;
                f_t.push(g.constant(z.output));
                f_s.push(tr.forward(g, x_s, mode)?.output);
            }
            ft_student_loss(g, &f_t, &f_s, student.logits(), labels, &spec.feature)?
        }
    };
    Ok(parts)
}

fn ntl_seed(cfg: &TrainConfig, i: usize) -> u64 {
    let offset = if cfg.distill.shared_ntl_seed {
        0
    } else {
        i as u64
    };
    cfg.seed.wrapping_add(1000 + offset)
}

/// Channel count of the final tap the network produces on `x`.
fn final_channels(net: &Network32, x: &Tensor32) -> Result<usize> {
    Ok(net.infer(x)?.final_tap()?.shape()[1])
}

fn build_adapters(
    cfg: &TrainConfig,
    teachers: &[Teacher],
    data: &Data,
    probe: &Tensor32,
) -> Result<Adapters> {
    let spec = &cfg.distill;
    match spec.method {
        LossKind::Feed => {
            let student = Network32::build(&cfg.arch, cfg.seed)?;
            let c = final_channels(&student, probe)?;
            let ntls = (0..teachers.len())
                .map(|i| {
                    Network32::build(
                        &Arch::Ntl {
                            channels: c,
                            style: spec.ntl_style,
                        },
                        ntl_seed(cfg, i),
                    )
                })
                .collect::<feedkit_core::Result<Vec<_>>>()?;
            Ok(Adapters::Ntls(ntls))
        }
        LossKind::Ft => {
            let student = Network32::build(&cfg.arch, cfg.seed)?;
            let c_s = final_channels(&student, probe)?;
            let opts = ReconOptions {
                epochs: cfg.ft_pretrain_epochs(),
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                seed: cfg.seed,
            };
            let mut paraphrasers = Vec::new();
            let mut translators = Vec::new();
            for (i, t) in teachers.iter().enumerate() {
                let feats = extract_features(&t.net, &data.train.images, EVAL_BATCH)?;
                let seed = cfg.seed.wrapping_add(2000 + 2 * i as u64);
                let mut p =
                    build_paraphraser::<f32>(feats.shape()[1], spec.paraphraser_rate, seed)?;
                fit_paraphraser(&mut p, &feats, &opts)?;
                p.set_frozen(true);
                translators.push(build_translator(
                    c_s,
                    p.factor_channels(),
                    cfg.seed.wrapping_add(3000 + i as u64),
                )?);
                paraphrasers.push(p);
            }
            Ok(Adapters::Ft {
                paraphrasers,
                translators,
            })
        }
        _ => Ok(Adapters::None),
    }
}

fn adapters_networks(adapters: &mut Adapters) -> Vec<(String, &mut Network32)> {
    match adapters {
        Adapters::None => Vec::new(),
        Adapters::Ntls(ntls) => ntls
            .iter_mut()
            .enumerate()
            .map(|(i, n)| (format!("ntl{i}"), n))
            .collect(),
        Adapters::Ft { translators, .. } => translators
            .iter_mut()
            .enumerate()
            .map(|(i, n)| (format!("translator{i}"), n))
            .collect(),
    }
}

/// Top-1 error in percent, eval mode, ties resolved toward the lowest
/// class index.
pub fn evaluate(net: &Network32, data: &Dataset) -> Result<f64> {
    let classes = net.arch().num_classes();
    if classes != Some(data.num_classes) {
        return Err(TrainError::Config(format!(
            "{} predicts {:?} classes but the dataset has {}",
            net.arch(),
            classes,
            data.num_classes
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Config(
            "cannot evaluate on an empty split".into(),
        ));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let out = net.infer(&x)?;
        for (row, &label) in out.output.data().chunks_exact(data.num_classes).zip(&y) {
            if argmax(row) != label {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates a stored checkpoint.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset) -> Result<f64> {
    let net: Network32 = read_checkpoint(path)?.to_network()?;
    evaluate(&net, data)
}

fn hex_list(hashes: &[u64]) -> String {
    hashes
        .iter()
        .map(|h| format!("{h:016x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_hex_list(s: &str) -> Vec<u64> {
    s.split(',')
        .filter_map(|h| u64::from_str_radix(h.trim(), 16).ok())
        .collect()
}

fn checkpoint_meta(cfg: &TrainConfig, teacher_hashes: &[u64]) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new(cfg.arch, cfg.stack, cfg.seed);
    meta.extra.insert("run_id".into(), cfg.run_id.clone());
    meta.extra
        .insert("method".into(), cfg.distill.method.to_string());
    if !teacher_hashes.is_empty() {
        meta.extra
            .insert("teacher_hashes".into(), hex_list(teacher_hashes));
    }
    meta
}

/// Runs whatever `cfg.distill` describes.
pub fn train(cfg: &TrainConfig, data: &Data) -> Result<Run> {
    cfg.validate()?;
    let classes = cfg.arch.num_classes().expect("validated classifier");
    if classes != data.train.num_classes {
        return Err(TrainError::Config(format!(
            "{} has {classes} outputs but the dataset has {} classes",
            cfg.arch, data.train.num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let teachers = load_teachers(cfg)?;
    let probe_idx: Vec<usize> = (0..data.train.len().min(2)).collect();
    let (probe, probe_y) = data.train.batch(&probe_idx)?;
    let mut adapters = build_adapters(cfg, &teachers, data, &probe)?;
    let mut student = Network32::build(&cfg.arch, cfg.seed)?;

    // Dry run on scratch copies so that incompatible teachers are reported
    // before any training.
    {
        let mut s = student.clone();
        let mut a = match &adapters {
            Adapters::None => Adapters::None,
            Adapters::Ntls(n) => Adapters::Ntls(n.clone()),
            Adapters::Ft {
                paraphrasers,
                translators,
            } => Adapters::Ft {
                paraphrasers: paraphrasers.clone(),
                translators: translators.clone(),
            },
        };
        let mut g = Graph32::no_grad();
        let tv = teachers
            .iter()
            .map(|t| t.net.infer(&probe))
            .collect::<feedkit_core::Result<Vec<_>>>()?;
        let xv = g.constant(probe.clone());
        let out = s.forward(&mut g, xv, Mode::Eval)?;
        step_loss(&mut g, cfg, &out, &tv, &mut a, &probe_y, Mode::Eval).map_err(|e| {
            TrainError::Config(format!(
                "teachers incompatible with {} ({FINAL_TAP} tap): {e}",
                cfg.arch
            ))
        })?;
    }

    let counters = Counters::default();
    let mut opt = Sgd32::new(cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let do_augment = cfg.data.augment();
    let n_teachers = teachers.len().max(1);
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        opt.lr = lr as f32;
        let order = shuffled(data.train.len(), &mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0, vec![0.0; n_teachers]);
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = data.train.batch(chunk)?;
            if do_augment {
                augment(&mut x, CROP_PAD, &mut aug_rng);
            }
            let tv = teacher_forwards(&teachers, &x, &counters)?;
            let mut g = Graph32::new();
            let xv = g.constant(x);
            counters.student_forwards.fetch_add(1, Ordering::Relaxed);
            let out = student.forward(&mut g, xv, Mode::Train)?;
            let parts = step_loss(&mut g, cfg, &out, &tv, &mut adapters, &y, Mode::Train)?;
            let v = parts.values(&g)?;
            if !v.total.is_finite() {
                return Err(TrainError::Diverged(format!(
                    "{}: loss {} at epoch {epoch} step {} (lr {lr})",
                    cfg.run_id,
                    v.total,
                    step + 1
                )));
            }
            g.backward(parts.total)?;
            student.collect_grads(&g)?;
            opt.step("student", &mut student);
            for (key, net) in adapters_networks(&mut adapters) {
                net.collect_grads(&g)?;
                opt.step(&key, net);
            }
            counters.steps.fetch_add(1, Ordering::Relaxed);
            let w = chunk.len() as f64;
            sums.0 += v.total * w;
            sums.1 += v.ce * w;
            sums.2 += v.feature * w;
            for (a, b) in sums.3.iter_mut().zip(&v.per_teacher) {
                *a += b * w;
            }
            seen += chunk.len();
            steps.push(StepLog {
                epoch,
                step: step + 1,
                lr,
                total: v.total,
                ce: v.ce,
                feature: v.feature,
                per_teacher: v.per_teacher,
            });
        }
        let n = seen as f64;
        let per_teacher = if cfg.distill.method == LossKind::Ce {
            Vec::new()
        } else {
            sums.3.iter().map(|s| s / n).collect()
        };
        epochs.push(EpochMetrics {
            epoch,
            lr,
            train_loss: sums.0 / n,
            ce: sums.1 / n,
            feature: sums.2 / n,
            per_teacher,
            test_error: evaluate(&student, &data.test)?,
        });
    }

    let teacher_hashes: Vec<u64> = teachers.iter().map(|t| t.hash).collect();
    let teacher_hashes_after = teachers
        .iter()
        .map(|t| {
            Ok(crate::checkpoint::fnv1a_of_encoding(&encode(
                &t.net, &t.meta,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = checkpoint_meta(cfg, &teacher_hashes);
    let checkpoint_hash = crate::checkpoint::fnv1a_of_encoding(&encode(&student, &meta)?);
    let mut record = RunRecord {
        run_id: cfg.run_id.clone(),
        stack: cfg.stack,
        method: cfg.distill.method,
        seed: cfg.seed,
        epochs,
        steps,
        checkpoint: None,
        checkpoint_hash,
        teacher_hashes,
        teacher_hashes_after,
        counters: counters.snapshot(),
        resumed: false,
    };
    if let Some(dir) = &cfg.out_dir {
        let path = dir.join(format!("{}.ckpt", cfg.run_id));
        save_checkpoint(&student, &meta, &path)?;
        write_file(
            &dir.join(format!("{}.csv", cfg.run_id)),
            &record.metrics_csv(),
        )?;
        write_file(
            &dir.join(format!("{}.steps.csv", cfg.run_id)),
            &record.steps_csv(),
        )?;
        record.checkpoint = Some(path);
    }
    Ok(Run { record, student })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(TrainError::Config(msg()))
    }
}

/// Plain cross-entropy training.
pub fn train_scratch(cfg: &TrainConfig, data: &Data) -> Result<Run> {
    require(cfg.distill.method == LossKind::Ce, || {
        format!(
            "train_scratch expects method ce, got {}",
            cfg.distill.method
        )
    })?;
    train(cfg, data)
}

/// Distillation from exactly one teacher with any method.
pub fn train_distill(cfg: &TrainConfig, data: &Data) -> Result<Run> {
    require(cfg.distill.teachers.len() == 1, || {
        format!(
            "single-teacher distillation got {} teachers",
            cfg.distill.teachers.len()
        )
    })?;
    train(cfg, data)
}

/// FEED with N >= 2 teachers, one NTL each.
pub fn train_pfeed(cfg: &TrainConfig, data: &Data) -> Result<Run> {
    require(cfg.distill.method == LossKind::Feed, || {
        format!("pfeed expects method feed, got {}", cfg.distill.method)
    })?;
    require(cfg.distill.teachers.len() >= 2, || {
        format!(
            "pfeed needs at least 2 teachers, got {}",
            cfg.distill.teachers.len()
        )
    })?;
    train(cfg, data)
}

/// One unchanged-beta l1/at/ft term per teacher, N >= 2.
pub fn train_multi_baseline(cfg: &TrainConfig, method: LossKind, data: &Data) -> Result<Run> {
    require(
        matches!(method, LossKind::L1 | LossKind::At | LossKind::Ft),
        || format!("multi-teacher baseline must be l1, at or ft, got {method}"),
    )?;
    require(cfg.distill.teachers.len() >= 2, || {
        format!(
            "multi-teacher baseline needs at least 2 teachers, got {}",
            cfg.distill.teachers.len()
        )
    })?;
    let mut cfg = cfg.clone();
    cfg.distill.method = method;
    train(&cfg, data)
}

/// Paths of the files stack `i` of an sFEED chain writes.
pub fn stack_run_id(base: &TrainConfig, stack: usize) -> String {
    format!("{}-stack{stack}", base.run_id)
}

/// Config of stack `i`: scratch for the first, FEED from the previous
/// stack's checkpoint afterwards, fresh initialization from `seed + i`.
pub fn stack_config(base: &TrainConfig, stack: usize, prev: Option<PathBuf>) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.run_id = stack_run_id(base, stack);
    cfg.stack = stack;
    cfg.seed = base.seed.wrapping_add(stack as u64);
    match prev {
        None => {
            cfg.distill.method = LossKind::Ce;
            cfg.distill.teachers.clear();
        }
        Some(p) => {
            cfg.distill.method = LossKind::Feed;
            cfg.distill.teachers = vec![p];
        }
    }
    cfg
}

/// Restores a finished stack from its checkpoint and metrics, if both
/// exist and match the expected run.
fn try_resume(cfg: &TrainConfig, dir: &Path) -> Result<Option<RunRecord>> {
    let ckpt = dir.join(format!("{}.ckpt", cfg.run_id));
    let csv = dir.join(format!("{}.csv", cfg.run_id));
    if !ckpt.is_file() || !csv.is_file() {
        return Ok(None);
    }
    let ck = match read_checkpoint(&ckpt) {
        Ok(ck) => ck,
        Err(_) => return Ok(None),
    };
    if ck.meta.arch != cfg.arch || ck.meta.stack != cfg.stack || ck.meta.seed != cfg.seed {
        return Ok(None);
    }
    let epochs = read_metrics_csv(&csv)?;
    if epochs.len() != cfg.epochs {
        return Ok(None);
    }
    let teacher_hashes = ck
        .meta
        .extra
        .get("teacher_hashes")
        .map(|s| parse_hex_list(s))
        .unwrap_or_default();
    Ok(Some(RunRecord {
        run_id: cfg.run_id.clone(),
        stack: cfg.stack,
        method: cfg.distill.method,
        seed: cfg.seed,
        epochs,
        steps: Vec::new(),
        checkpoint: Some(ckpt),
        checkpoint_hash: ck.hash,
        teacher_hashes: teacher_hashes.clone(),
        teacher_hashes_after: teacher_hashes,
        counters: CounterSnapshot::default(),
        resumed: true,
    }))
}

/// Sequential FEED: `stacks` generations, each distilled from the previous
/// one. Finished stacks found in `out_dir` are reused, so an interrupted
/// chain resumes at the first missing stack.
pub fn train_sfeed(base: &TrainConfig, stacks: usize, data: &Data) -> Result<Vec<RunRecord>> {
    require(stacks >= 2, || {
        format!("sfeed needs at least 2 stacks, got {stacks}")
    })?;
    let dir = base.out_dir.clone().ok_or_else(|| {
        TrainError::Config("sfeed needs out_dir for the chain checkpoints".into())
    })?;
    let mut records = Vec::with_capacity(stacks);
    let mut prev: Option<PathBuf> = None;
    for stack in 1..=stacks {
        let expected = match &prev {
            Some(p) => vec![checkpoint_hash(p)?],
            None => Vec::new(),
        };
        let cfg = stack_config(base, stack, prev.take());
        // A stored stack only counts if it was distilled from this chain's previous stack.
        let record = match try_resume(&cfg, &dir)? {
            Some(r) if r.teacher_hashes == expected => r,
            _ => train(&cfg, data)?.record,
        };
        prev = record.checkpoint.clone();
        records.push(record);
    }
    Ok(records)
}
