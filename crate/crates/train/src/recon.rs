//! Paraphraser reconstruction probe: fit an autoencoder to a frozen
//! network's final feature maps and record how well it reconstructs them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use feedkit_core::losses::reconstruction_loss;
use feedkit_core::{Graph, Mode, Network32, Paraphraser32, Scalar, Sgd32, Tensor32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::fnv1a;
use crate::dataset::{shuffled, Dataset};
use crate::error::{Result, TrainError};

/// Optimization settings for paraphraser training.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Shuffle seed.
    pub seed: u64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Per-epoch training reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconEpoch {
    pub epoch: usize,
    /// `||x - P(x)||^2` divided by the number of feature elements.
    pub mse_per_element: f64,
    /// `||x - P(x)||^2` per sample, averaged over the epoch's samples.
    pub sum_sq_error: f64,
}

/// Everything that must agree for two reports to be comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconSettings {
    pub channels: usize,
    pub factor_channels: usize,
    pub rate: f64,
    /// Hash of the paraphraser's initial parameters.
    pub init_hash: u64,
    pub options: ReconOptions,
    /// Sample count and content hash of the input images.
    pub dataset: (usize, u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub checkpoint_id: String,
    pub settings: ReconSettings,
    pub curve: Vec<ReconEpoch>,
}

impl ReconReport {
    pub fn final_value(&self) -> Option<f64> {
        self.curve.last().map(|e| e.mse_per_element)
    }

    /// True when every epoch's loss is at most `1 + tol` times the previous.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.curve
            .windows(2)
            .all(|w| w[1].mse_per_element <= w[0].mse_per_element * (1.0 + tol))
    }

    pub fn to_csv(&self) -> String {
        let s = &self.settings;
        let mut out = format!(
            "# checkpoint={} channels={} factor_channels={} rate={} init_hash={:016x} epochs={} batch_size={} lr={} momentum={} weight_decay={} seed={} samples={} data_hash={:016x}\n",
            self.checkpoint_id,
            s.channels,
            s.factor_channels,
            s.rate,
            s.init_hash,
            s.options.epochs,
            s.options.batch_size,
            s.options.lr,
            s.options.momentum,
            s.options.weight_decay,
            s.options.seed,
            s.dataset.0,
            s.dataset.1
        );
        out.push_str("epoch,mse_per_element,sum_sq_error\n");
        for e in &self.curve {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.mse_per_element, e.sum_sq_error);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| TrainError::io(path, e))
    }
}

fn param_hash(p: &Paraphraser32) -> u64 {
    let mut bytes = Vec::new();
    for net in [&p.encoder, &p.decoder] {
        for (name, t) in net.state() {
            bytes.extend_from_slice(name.as_bytes());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
        }
    }
    fnv1a(&bytes)
}

fn dataset_fingerprint(images: &Tensor32) -> (usize, u64) {
    let mut bytes = Vec::with_capacity(images.numel() * 4);
    for &v in images.data() {
        v.write_le(&mut bytes);
    }
    (images.shape()[0], fnv1a(&bytes))
}

/// Final-tap features of `source` for every sample, in eval mode.
pub fn extract_features(
    source: &Network32,
    images: &Tensor32,
    batch_size: usize,
) -> Result<Tensor32> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = images.select_rows(chunk)?;
        let out = source.infer(&x)?;
        let f = out.final_tap()?;
        shape = f.shape().to_vec();
        data.extend_from_slice(f.data());
    }
    if n == 0 {
        return Err(TrainError::Config(
            "no samples to extract features from".into(),
        ));
    }
    shape[0] = n;
    Ok(Tensor32::new(&shape, data)?)
}

/// Trains `p` to reconstruct `feats` (`[N, C, H, W]`), returning the
/// per-epoch training curve.
///
/// The objective is the per-element mean squared error (the per-sample
/// squared reconstruction error divided by the feature size), so the step
/// size does not depend on the map dimensions.
pub fn fit_paraphraser(
    p: &mut Paraphraser32,
    feats: &Tensor32,
    opts: &ReconOptions,
) -> Result<Vec<ReconEpoch>> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(TrainError::Config(
            "paraphraser training needs epochs >= 1 and batch_size >= 1".into(),
        ));
    }
    let n = feats.shape()[0];
    let per_sample = feats.numel() / n.max(1);
    let mut opt = Sgd32::new(
        opts.lr as f32,
        opts.momentum as f32,
        opts.weight_decay as f32,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let order = shuffled(n, &mut rng);
        let mut sq_total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let x = feats.select_rows(chunk)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (_, recon) = p.forward(&mut g, xv, Mode::Train)?;
            let sq_err = reconstruction_loss(&mut g, xv, recon)?;
            let value = g.item(sq_err)? as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged(format!(
                    "reconstruction loss {value} at epoch {epoch} with lr {}; lower the learning rate",
                    opts.lr
                )));
            }
            let objective = g.scale(sq_err, 1.0 / per_sample as f32);
            g.backward(objective)?;
            p.collect_grads(&g)?;
            opt.step("encoder", &mut p.encoder);
            opt.step("decoder", &mut p.decoder);
            sq_total += value * chunk.len() as f64;
        }
        let sq_err = sq_total / n as f64;
        curve.push(ReconEpoch {
            epoch,
            mse_per_element: sq_err / per_sample as f64,
            sum_sq_error: sq_err,
        });
    }
    Ok(curve)
}

/// Fits `p` on the final feature maps `source` produces for `data` and
/// reports the training curve. `source` is only read.
pub fn train_paraphraser(
    p: &mut Paraphraser32,
    source: &Network32,
    data: &Dataset,
    opts: &ReconOptions,
    checkpoint_id: &str,
) -> Result<ReconReport> {
    let feats = extract_features(source, &data.images, opts.batch_size)?;
    if feats.shape()[1] != p.channels() {
        return Err(TrainError::Config(format!(
            "paraphraser expects {} channels but {checkpoint_id} produces {:?}",
            p.channels(),
            feats.shape()
        )));
    }
    let settings = ReconSettings {
        channels: p.channels(),
        factor_channels: p.factor_channels(),
        rate: p.rate(),
        init_hash: param_hash(p),
        options: opts.clone(),
        dataset: dataset_fingerprint(&data.images),
    };
    let curve = fit_paraphraser(p, &feats, opts)?;
    Ok(ReconReport {
        checkpoint_id: checkpoint_id.to_string(),
        settings,
        curve,
    })
}

/// Final losses of several reports, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconSummary {
    /// `(checkpoint id, final mse per element, final sq_err sum)`.
    pub rows: Vec<(String, f64, f64)>,
}

impl ReconSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,final_mse_per_element,final_sum_sq_error\n");
        for (id, mse, sq_err) in &self.rows {
            let _ = writeln!(out, "{id},{mse},{sq_err}");
        }
        out
    }
}

/// Lines up final reconstruction losses. Reports must share paraphraser
/// architecture, initialization, schedule and input data; the ordering of
/// the values is left to the reader.
pub fn compare_recon(reports: &[ReconReport]) -> Result<ReconSummary> {
    let Some(first) = reports.first() else {
        return Ok(ReconSummary::default());
    };
    for r in &reports[1..] {
        if r.settings != first.settings {
            return Err(TrainError::Comparability(format!(
                "{} was produced with {:?}, {} with {:?}",
                first.checkpoint_id, first.settings, r.checkpoint_id, r.settings
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| {
            let last = r.curve.last().copied().unwrap_or(ReconEpoch {
                epoch: 0,
                mse_per_element: f64::NAN,
                sum_sq_error: f64::NAN,
            });
            (
                r.checkpoint_id.clone(),
                last.mse_per_element,
                last.sum_sq_error,
            )
        })
        .collect();
    Ok(ReconSummary { rows })
}
