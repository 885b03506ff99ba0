//! SGD with momentum on the end-point-error loss.

use std::time::Instant;

use super::dataset::{gen_flow_dataset, stack, DatasetConfig, Motion};
use super::metric::epe_loss;
use super::models::{build_model, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::layer::LsDfnConfig;
use crate::model::Sequential;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Learning rate `i` applies from `lr_milestones[i - 1]` (iteration
    /// index) on; `lr_milestones.len() == learning_rates.len() - 1`.
    pub learning_rates: Vec<f64>,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub log_interval: usize,
    /// Trailing window of the smoothed per-iteration loss series.
    pub smoothing_window: usize,
    pub model: ModelSpec,
    pub data: DatasetConfig,
}

/// Keys accepted by [`TrainConfig::from_kv`]; `block.<key>` accepts every
/// block configuration key except `in_channels` (tied to `channels`).
pub const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "learning_rates",
    "lr_milestones",
    "momentum",
    "seed",
    "log_interval",
    "smoothing_window",
    "model",
    "channels",
    "data.count",
    "data.height",
    "data.width",
    "data.objects",
    "data.max_displacement",
    "data.motion",
    "data.seed",
    "data.min_object",
    "data.max_object",
];

impl TrainConfig {
    /// Desk-scale defaults: 32×32 frames, two opposing objects, 512 samples.
    pub fn default_for(kind: ModelKind) -> Self {
        let mut block = LsDfnConfig::new(8, 4, 3, 5, 2);
        block.branch_kernel_size = 3;
        let mut data = DatasetConfig::new(512, 32, 32, 2, 6, 7);
        data.motion = Motion::Opposing;
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            learning_rates: vec![0.01, 0.0025],
            lr_milestones: vec![1500],
            momentum: 0.9,
            seed: 1,
            log_interval: 100,
            smoothing_window: 20,
            model: ModelSpec::new(kind, block),
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_interval == 0 || self.smoothing_window == 0 {
            return Err(Error::Config(
                "iterations, batch_size, log_interval and smoothing_window must be >= 1".into(),
            ));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.lr_milestones.len() + 1 != self.learning_rates.len() {
            return Err(Error::Config(format!(
                "{} learning rates need {} milestones, got {}",
                self.learning_rates.len(),
                self.learning_rates.len() - 1,
                self.lr_milestones.len()
            )));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_milestones must be increasing".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.data.validate()
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let idx = self.lr_milestones.iter().filter(|&&m| iteration >= m).count();
        self.learning_rates[idx]
    }

    pub fn to_kv(&self) -> KvMap {
        let join = |xs: Vec<String>| xs.join(",");
        let mut m = KvMap::default();
        m.insert("iterations", self.iterations);
        m.insert("batch_size", self.batch_size);
        m.insert("learning_rates", join(self.learning_rates.iter().map(|v| v.to_string()).collect()));
        m.insert("lr_milestones", join(self.lr_milestones.iter().map(|v| v.to_string()).collect()));
        m.insert("momentum", self.momentum);
        m.insert("seed", self.seed);
        m.insert("log_interval", self.log_interval);
        m.insert("smoothing_window", self.smoothing_window);
        m.insert("model", self.model.kind);
        m.insert("channels", self.model.channels);
        for (k, v) in self.model.block.to_kv().iter() {
            if k != "in_channels" {
                m.insert(format!("block.{k}"), v);
            }
        }
        let d = &self.data;
        m.insert("data.count", d.count);
        m.insert("data.height", d.height);
        m.insert("data.width", d.width);
        m.insert("data.objects", d.objects_per_image);
        m.insert("data.max_displacement", d.max_displacement);
        m.insert("data.motion", d.motion);
        m.insert("data.seed", d.seed);
        m.insert("data.min_object", d.min_object);
        m.insert("data.max_object", d.max_object);
        m
    }

    /// Values in `m` override `base`; unknown keys are rejected.
    pub fn from_kv_over(m: &KvMap, base: &TrainConfig) -> Result<Self> {
        let mut allowed: Vec<String> = TRAIN_KEYS.iter().map(|k| k.to_string()).collect();
        allowed.extend(
            crate::layer::config::CONFIG_KEYS
                .iter()
                .filter(|&&k| k != "in_channels")
                .map(|k| format!("block.{k}")),
        );
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        m.reject_unknown(&allowed)?;

        let mut c = base.clone();
        c.iterations = m.parsed_or("iterations", c.iterations)?;
        c.batch_size = m.parsed_or("batch_size", c.batch_size)?;
        if let Some(v) = m.list("learning_rates")? {
            c.learning_rates = v;
        }
        if let Some(v) = m.list("lr_milestones")? {
            c.lr_milestones = v;
        }
        c.momentum = m.parsed_or("momentum", c.momentum)?;
        c.seed = m.parsed_or("seed", c.seed)?;
        c.log_interval = m.parsed_or("log_interval", c.log_interval)?;
        c.smoothing_window = m.parsed_or("smoothing_window", c.smoothing_window)?;
        c.model.kind = m.parsed_or("model", c.model.kind)?;
        c.model.channels = m.parsed_or("channels", c.model.channels)?;
        let mut block = LsDfnConfig::from_kv_over(m, "block.", &c.model.block)?;
        block.in_channels = c.model.channels;
        c.model.block = block;
        let d = &mut c.data;
        d.count = m.parsed_or("data.count", d.count)?;
        d.height = m.parsed_or("data.height", d.height)?;
        d.width = m.parsed_or("data.width", d.width)?;
        d.objects_per_image = m.parsed_or("data.objects", d.objects_per_image)?;
        d.max_displacement = m.parsed_or("data.max_displacement", d.max_displacement)?;
        d.motion = m.parsed_or("data.motion", d.motion)?;
        d.seed = m.parsed_or("data.seed", d.seed)?;
        d.min_object = m.parsed_or("data.min_object", d.min_object)?;
        d.max_object = m.parsed_or("data.max_object", d.max_object)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Parameter updates applied so far.
    pub iteration: usize,
    /// Mean mini-batch loss since the previous row (full-set value at 0).
    pub loss: f64,
    /// End-point error over the whole training set with current parameters.
    pub aepe: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub rows: Vec<MetricsRow>,
    /// Mini-batch loss of every iteration, before its update.
    pub batch_losses: Vec<f64>,
    pub model: Sequential<f32>,
}

impl TrainResult {
    /// The final training loss: full-set end-point error after the last
    /// update.
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.aepe)
    }
}

/// Trailing moving average over `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Predictions for `inputs`, evaluated in chunks.
pub fn predict_all(model: &Sequential<f32>, inputs: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let n = inputs.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        parts.push(model.predict(&inputs.gather_batch(&idx)?)?);
        start += chunk;
    }
    let (_, c, h, w) = parts[0].dims4()?;
    let data: Vec<f32> = parts.into_iter().flat_map(|p| p.into_data()).collect();
    Tensor::new(&[n, c, h, w], data)
}

/// Batch size of full-set evaluations.
pub const EVAL_CHUNK: usize = 32;

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { stage } => Error::Diverged { iteration, stage },
        other => other,
    }
}

/// Train `model` on `(inputs, flows)`.
pub fn train_model(
    mut model: Sequential<f32>,
    inputs: &Tensor<f32>,
    flows: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let n = inputs.shape()[0];
    if n == 0 || flows.shape()[0] != n {
        return Err(Error::Dataset("inputs and flows must be non-empty and aligned".into()));
    }
    let start = Instant::now();
    let full_set = |model: &Sequential<f32>, iteration: usize| -> Result<f64> {
        let pred = predict_all(model, inputs, EVAL_CHUNK).map_err(diverged(iteration))?;
        let loss = epe_loss(&pred, flows)?.0;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                stage: "training-set end-point error".into(),
            });
        }
        Ok(loss)
    };
    let initial = full_set(&model, 0)?;
    let mut rows = vec![MetricsRow {
        iteration: 0,
        loss: initial,
        aepe: initial,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }];

    let mut order_rng = Rng::new(cfg.seed ^ 0x5bd1_e995_0000_0001);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let batch = cfg.batch_size.min(n);
    let mut velocity = model.zeros_like();
    let mut batch_losses = Vec::with_capacity(cfg.iterations);
    let mut window = 0.0;
    let mut window_len = 0usize;

    for it in 0..cfg.iterations {
        if cursor + batch > n {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = inputs.gather_batch(idx)?;
        let gt = flows.gather_batch(idx)?;
        let (pred, tape) = model.forward(&x).map_err(diverged(it))?;
        let (loss, grad) = epe_loss(&pred, &gt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                stage: "loss".into(),
            });
        }
        let (_, grads) = model.backward(&grad, &tape).map_err(diverged(it))?;
        let lr = cfg.learning_rate(it) as f32;
        let mu = cfg.momentum as f32;
        for ((p, v), g) in model
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.named_tensors().into_iter().map(|(_, t)| t))
        {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        batch_losses.push(loss);
        window += loss;
        window_len += 1;
        let done = it + 1;
        if done % cfg.log_interval == 0 || done == cfg.iterations {
            let aepe = full_set(&model, done)?;
            rows.push(MetricsRow {
                iteration: done,
                loss: window / window_len as f64,
                aepe,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainResult {
        rows,
        batch_losses,
        model,
    })
}

/// Generate the dataset, build the model and train it.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let samples = gen_flow_dataset(&cfg.data)?;
    let (inputs, flows) = stack(&samples)?;
    let model = build_model(&cfg.model, cfg.seed)?;
    train_model(model, &inputs, &flows, cfg)
}

/// Metrics CSV with `#` comment lines carrying the configuration.
pub fn metrics_csv(rows: &[MetricsRow], config: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in config.iter() {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("iteration,loss,aepe,wall_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.iteration, r.loss, r.aepe, r.wall_ms));
    }
    out
}

/// Per-iteration loss with its trailing moving average.
pub fn loss_series_csv(losses: &[f64], window: usize) -> String {
    let mut out = format!("# smoothing: trailing moving average, window={window}\niteration,loss,smoothed\n");
    for (i, (l, s)) in losses.iter().zip(smoothed(losses, window)).enumerate() {
        out.push_str(&format!("{i},{l},{s}\n"));
    }
    out
}

/// Write the model tensors and the full training configuration to `dir`.
pub fn save_trained(dir: impl AsRef<std::path::Path>, model: &Sequential<f32>, cfg: &TrainConfig) -> Result<()> {
    crate::checkpoint::save_checkpoint(dir, &model.named_tensors(), &cfg.to_kv())
}

/// Rebuild a trained model. `overrides` may change the data settings; any
/// model key that disagrees with the stored configuration is a mismatch.
pub fn load_trained(dir: impl AsRef<std::path::Path>, overrides: &KvMap) -> Result<(Sequential<f32>, TrainConfig)> {
    let (tensors, kv) = crate::checkpoint::load_checkpoint(dir)?;
    let stored = TrainConfig::from_kv_over(&kv, &TrainConfig::default_for(ModelKind::Baseline))?;
    let requested = TrainConfig::from_kv_over(overrides, &stored)?;
    if requested.model != stored.model {
        let (want, have) = (requested.to_kv(), stored.to_kv());
        let differing: Vec<String> = have
            .iter()
            .filter(|(k, _)| *k == "model" || *k == "channels" || k.starts_with("block."))
            .filter(|(k, v)| want.get(k) != Some(*v))
            .map(|(k, v)| format!("{k}: checkpoint has {v}, requested {}", want.get(k).unwrap_or("?")))
            .collect();
        return Err(Error::CheckpointMismatch(differing.join("; ")));
    }
    let mut model = build_model(&stored.model, stored.seed)?;
    crate::checkpoint::restore_into(tensors, model.named_tensors_mut())?;
    Ok((model, requested))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ModelKind) -> TrainConfig {
        let mut c = TrainConfig::default_for(kind);
        c.iterations = 3;
        c.log_interval = 2;
        c.data = DatasetConfig::new(4, 12, 12, 2, 3, 1);
        c.model = ModelSpec::new(kind, LsDfnConfig::new(4, 2, 3, 3, 1));
        c
    }

    #[test]
    fn kv_round_trip() {
        let c = tiny(ModelKind::Lsdfn);
        assert_eq!(TrainConfig::from_kv_over(&c.to_kv(), &TrainConfig::default_for(ModelKind::Baseline)).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut m = KvMap::default();
        m.insert("iteratons", 3);
        assert!(TrainConfig::from_kv_over(&m, &tiny(ModelKind::Baseline)).is_err());
    }

    #[test]
    fn piecewise_rate() {
        let mut c = tiny(ModelKind::Baseline);
        c.learning_rates = vec![1.0, 0.5, 0.25];
        c.lr_milestones = vec![2, 5];
        let rates: Vec<f64> = (0..7).map(|i| c.learning_rate(i)).collect();
        assert_eq!(rates, vec![1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn rows_at_log_points_and_end() {
        let r = train(&tiny(ModelKind::Lsdfn)).unwrap();
        let its: Vec<usize> = r.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 2, 3]);
        assert_eq!(r.batch_losses.len(), 3);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
