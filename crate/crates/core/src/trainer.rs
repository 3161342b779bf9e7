//! Pretraining loop.
//!
//! One step: build the four views of a batch, route aggressive views
//! through the online network (with predictor) and weak views through the
//! target network, combine the four pairs with the scheduled β, run one
//! backward pass, apply SGD with momentum and weight decay to the online
//! parameters only, then move the target by EMA. Baseline modes reroute
//! the views (BYOL symmetric pairs) or replace the EMA target with a
//! stop-gradient copy of the online network (SimSiam variant).

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::augment::{batch_to_tensor, make_views, AugSpec, Image};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::kv::{self, KvReader};
use crate::nn::{
    self, ema_schedule, ema_update, init_models, BnPolicy, EmaSchedule, ModelPair,
};
use crate::objective::{beta_at, cosine_lr, total_loss, BetaSchedule, Similarity};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{Elem, Tensor, DTYPE};

/// Training objective/routing variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Msr,
    ByolAa,
    ByolAw,
    SimsiamMsr,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Msr => "msr",
            TrainMode::ByolAa => "byol_aa",
            TrainMode::ByolAw => "byol_aw",
            TrainMode::SimsiamMsr => "simsiam_msr",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "msr" => Ok(TrainMode::Msr),
            "byol_aa" => Ok(TrainMode::ByolAa),
            "byol_aw" => Ok(TrainMode::ByolAw),
            "simsiam_msr" => Ok(TrainMode::SimsiamMsr),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    /// The β-weighted pairs exist only in the four-pair modes.
    pub fn uses_beta(self) -> bool {
        matches!(self, TrainMode::Msr | TrainMode::SimsiamMsr)
    }
}

/// Everything a pretraining run depends on.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: Elem,
    pub momentum: Elem,
    pub weight_decay: Elem,
    pub beta_base: Elem,
    pub beta_schedule: BetaSchedule,
    pub similarity: Similarity,
    pub tau_base: Elem,
    pub tau_schedule: EmaSchedule,
    pub seed: u64,
    pub detach_online_partner: bool,
    pub target_bn_batch_stats: bool,
    pub aug: AugSpec,
}

impl TrainConfig {
    /// Mode-appropriate defaults: β_base 0.3 with cosine decay and a
    /// constant τ = 0.99 for the four-pair modes; cosine-increasing τ for
    /// the BYOL baselines; negative-cosine similarity for the SimSiam
    /// variant.
    pub fn for_mode(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            arch: "cifar-small".to_string(),
            epochs: 50,
            batch_size: 256,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta_base: 0.3,
            beta_schedule: BetaSchedule::Cosine,
            similarity: if mode == TrainMode::SimsiamMsr {
                Similarity::NegCosine
            } else {
                Similarity::Mse
            },
            tau_base: 0.99,
            tau_schedule: match mode {
                TrainMode::ByolAa | TrainMode::ByolAw => EmaSchedule::CosineIncrease,
                _ => EmaSchedule::Constant,
            },
            seed: 1,
            detach_online_partner: true,
            target_bn_batch_stats: true,
            aug: AugSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_base) {
            return Err(Error::Config(format!("beta_base {} outside [0,1]", self.beta_base)));
        }
        if !(0.0..=1.0).contains(&self.tau_base) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("tau_base and momentum must lie in [0,1]".into()));
        }
        if self.lr0 < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        nn::arch_by_name(&self.arch)?;
        self.aug.validate()
    }

    /// Read the trainer's keys from a parsed config, starting from the
    /// mode's defaults. Keys that contradict the mode are rejected.
    pub fn from_reader(reader: &KvReader) -> Result<TrainConfig> {
        let mode = match reader.raw("mode") {
            Some(m) => TrainMode::parse(m)?,
            None => TrainMode::Msr,
        };
        let mut cfg = TrainConfig::for_mode(mode);
        if !mode.uses_beta() {
            for key in ["beta_base", "beta_schedule"] {
                if reader.raw(key).is_some() {
                    return Err(Error::Config(format!(
                        "`{key}` conflicts with mode `{}` (no β-weighted pairs)",
                        mode.as_str()
                    )));
                }
            }
        }
        if mode == TrainMode::SimsiamMsr
            && (reader.raw("tau_base").is_some() || reader.raw("tau_schedule").is_some())
        {
            return Err(Error::Config(
                "`tau_*` conflicts with mode `simsiam_msr` (stop-gradient target)".into(),
            ));
        }
        if let Some(v) = reader.raw("arch") {
            cfg.arch = v.to_string();
        }
        if let Some(v) = reader.parse_as::<usize>("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = reader.parse_as::<usize>("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("lr")? {
            cfg.lr0 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("momentum")? {
            cfg.momentum = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("weight_decay")? {
            cfg.weight_decay = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("beta_base")? {
            cfg.beta_base = v;
        }
        if let Some(v) = reader.raw("beta_schedule") {
            cfg.beta_schedule = match v {
                "fixed" => BetaSchedule::Fixed,
                "cosine" => BetaSchedule::Cosine,
                other => return Err(Error::Config(format!("unknown beta_schedule `{other}`"))),
            };
        }
        if let Some(v) = reader.raw("similarity") {
            cfg.similarity = match v {
                "mse" => Similarity::Mse,
                "neg_cosine" => Similarity::NegCosine,
                other => return Err(Error::Config(format!("unknown similarity `{other}`"))),
            };
        }
        if let Some(v) = reader.parse_as::<Elem>("tau_base")? {
            cfg.tau_base = v;
        }
        if let Some(v) = reader.raw("tau_schedule") {
            cfg.tau_schedule = match v {
                "constant" => EmaSchedule::Constant,
                "cosine_increase" => EmaSchedule::CosineIncrease,
                other => return Err(Error::Config(format!("unknown tau_schedule `{other}`"))),
            };
        }
        if let Some(v) = reader.parse_as::<u64>("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = reader.parse_bool("detach_online_partner")? {
            cfg.detach_online_partner = v;
        }
        if let Some(v) = reader.parse_bool("target_bn_batch_stats")? {
            cfg.target_bn_batch_stats = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.crop_scale_min")? {
            cfg.aug.crop_scale.0 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.crop_scale_max")? {
            cfg.aug.crop_scale.1 = v;
        }
        if let Some(v) = reader.parse_as::<usize>("aug.crop_size")? {
            cfg.aug.crop_size = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.flip_p")? {
            cfg.aug.flip_p = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.jitter_brightness")? {
            cfg.aug.jitter_strength.0 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.jitter_contrast")? {
            cfg.aug.jitter_strength.1 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.jitter_saturation")? {
            cfg.aug.jitter_strength.2 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.jitter_hue")? {
            cfg.aug.jitter_strength.3 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.jitter_p")? {
            cfg.aug.jitter_p = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.grayscale_p")? {
            cfg.aug.grayscale_p = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.blur_sigma_min")? {
            cfg.aug.blur_sigma.0 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.blur_sigma_max")? {
            cfg.aug.blur_sigma.1 = v;
        }
        if let Some(v) = reader.parse_as::<Elem>("aug.blur_p")? {
            cfg.aug.blur_p = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` text with every field materialized.
    pub fn canonical_text(&self) -> String {
        let mut map = std::collections::BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("mode", self.mode.as_str().to_string());
        put("arch", self.arch.clone());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", format!("{}", self.lr0));
        put("momentum", format!("{}", self.momentum));
        put("weight_decay", format!("{}", self.weight_decay));
        if self.mode.uses_beta() {
            put("beta_base", format!("{}", self.beta_base));
            put(
                "beta_schedule",
                match self.beta_schedule {
                    BetaSchedule::Fixed => "fixed",
                    BetaSchedule::Cosine => "cosine",
                }
                .to_string(),
            );
        }
        put(
            "similarity",
            match self.similarity {
                Similarity::Mse => "mse",
                Similarity::NegCosine => "neg_cosine",
            }
            .to_string(),
        );
        if self.mode != TrainMode::SimsiamMsr {
            put("tau_base", format!("{}", self.tau_base));
            put(
                "tau_schedule",
                match self.tau_schedule {
                    EmaSchedule::Constant => "constant",
                    EmaSchedule::CosineIncrease => "cosine_increase",
                }
                .to_string(),
            );
        }
        put("seed", self.seed.to_string());
        put("detach_online_partner", self.detach_online_partner.to_string());
        put("target_bn_batch_stats", self.target_bn_batch_stats.to_string());
        put("aug.crop_scale_min", format!("{}", self.aug.crop_scale.0));
        put("aug.crop_scale_max", format!("{}", self.aug.crop_scale.1));
        put("aug.crop_size", self.aug.crop_size.to_string());
        put("aug.flip_p", format!("{}", self.aug.flip_p));
        put("aug.jitter_brightness", format!("{}", self.aug.jitter_strength.0));
        put("aug.jitter_contrast", format!("{}", self.aug.jitter_strength.1));
        put("aug.jitter_saturation", format!("{}", self.aug.jitter_strength.2));
        put("aug.jitter_hue", format!("{}", self.aug.jitter_strength.3));
        put("aug.jitter_p", format!("{}", self.aug.jitter_p));
        put("aug.grayscale_p", format!("{}", self.aug.grayscale_p));
        put("aug.blur_sigma_min", format!("{}", self.aug.blur_sigma.0));
        put("aug.blur_sigma_max", format!("{}", self.aug.blur_sigma.1));
        put("aug.blur_p", format!("{}", self.aug.blur_p));
        kv::serialize(&map)
    }

    /// Rebuild a config from its canonical text.
    pub fn from_canonical(text: &str) -> Result<TrainConfig> {
        let reader = KvReader::new(kv::parse(text)?);
        let cfg = TrainConfig::from_reader(&reader)?;
        reader.finish()?;
        Ok(cfg)
    }
}

/// Which augmentation stage produced a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Weak,
    Aggressive,
}

/// Per-step observability: schedule values, loss, and the routing/effort
/// counters the efficiency invariants are asserted on.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: Elem,
    pub beta: Elem,
    pub lr: Elem,
    pub tau: Elem,
    pub backward_passes: u64,
    pub encoder_forwards: u32,
    pub online_views: Vec<ViewKind>,
    pub target_views: Vec<ViewKind>,
}

/// Model pair plus optimizer state and step counters.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub pair: ModelPair,
    momentum: Vec<(String, Vec<Elem>)>,
    pub step: u64,
    pub total_steps: u64,
    pub metrics: Vec<StepMetrics>,
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len / batch_size
}

/// Fresh state: initialized models, zero momentum, step 0.
pub fn init_state(config: &TrainConfig, dataset_len: usize) -> Result<TrainState> {
    config.validate()?;
    let spe = steps_per_epoch(dataset_len, config.batch_size);
    if spe == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {dataset_len}",
            config.batch_size
        )));
    }
    let pair = init_models(&config.arch, config.seed)?;
    let momentum = pair
        .online
        .iter_params()
        .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
        .collect();
    Ok(TrainState {
        config: config.clone(),
        pair,
        momentum,
        step: 0,
        total_steps: (config.epochs * spe) as u64,
        metrics: Vec::new(),
    })
}

fn sgd_update(state: &mut TrainState, grads: &crate::tape::Gradients, lr: Elem) -> Result<()> {
    let (mu, wd) = (state.config.momentum, state.config.weight_decay);
    for (name, velocity) in &mut state.momentum {
        let tensor = state.pair.online.param(name);
        let mut g = grads.wrt(tensor);
        let theta = tensor.data();
        for ((gi, vi), th) in g.iter_mut().zip(velocity.iter_mut()).zip(theta) {
            *gi += wd * th;
            *vi = mu * *vi + *gi;
        }
        let updated: Vec<Elem> =
            theta.iter().zip(velocity.iter()).map(|(th, vi)| th - lr * vi).collect();
        let shape = tensor.shape().to_vec();
        state.pair.online.set_param(name, Tensor::param(shape, updated))?;
    }
    Ok(())
}

fn encode_online_view(tape: &Tape, state: &mut TrainState, images: &[Image]) -> Result<Tensor> {
    let batch = batch_to_tensor(images);
    nn::encode_online(tape, &mut state.pair.online, &batch, BnPolicy::TrainUpdate)
}

fn encode_target_view(tape: &Tape, state: &TrainState, images: &[Image]) -> Result<Tensor> {
    let batch = batch_to_tensor(images);
    nn::encode_target(tape, &state.pair.target, &batch, state.config.target_bn_batch_stats)
}

/// One optimizer step on one raw image batch.
pub fn pretrain_step(state: &mut TrainState, batch: &[Image]) -> Result<StepMetrics> {
    let (k, total) = (state.step, state.total_steps);
    if k >= total {
        return Err(Error::Config(format!("step {k} is past the end of the run ({total})")));
    }
    let cfg = state.config.clone();
    let beta = if cfg.mode.uses_beta() {
        beta_at(k, total, cfg.beta_base, cfg.beta_schedule)?
    } else {
        0.0
    };
    let lr = cosine_lr(k, total, cfg.lr0)?;
    let tau = match cfg.mode {
        TrainMode::SimsiamMsr => 0.0,
        _ => ema_schedule(k, total, cfg.tau_base, cfg.tau_schedule)?,
    };

    let step_seed = rng::derive_seed(cfg.seed, "views", &[k]);
    let views = make_views(batch, step_seed, &cfg.aug)?;

    let tape = Tape::new();
    let mut online_views = Vec::new();
    let mut target_views = Vec::new();

    let loss = match cfg.mode {
        TrainMode::Msr | TrainMode::SimsiamMsr => {
            online_views.extend([ViewKind::Aggressive, ViewKind::Aggressive]);
            target_views.extend([ViewKind::Weak, ViewKind::Weak]);
            let z_on_a = encode_online_view(&tape, state, &views.v_a)?;
            let z_on_ap = encode_online_view(&tape, state, &views.v_a_prime)?;
            let z_tg_w = encode_target_view(&tape, state, &views.v_w)?;
            let z_tg_wp = encode_target_view(&tape, state, &views.v_w_prime)?;
            total_loss(
                &tape,
                &z_on_a,
                &z_on_ap,
                &z_tg_w,
                &z_tg_wp,
                beta,
                cfg.similarity,
                cfg.detach_online_partner,
            )?
        }
        TrainMode::ByolAa | TrainMode::ByolAw => {
            // Symmetric two-view loss; both views pass through both
            // networks. AA pairs two aggressive views, AW pairs one
            // aggressive view with an independent weak view.
            let (v1, kind1, v2, kind2) = match cfg.mode {
                TrainMode::ByolAa => {
                    (&views.v_a, ViewKind::Aggressive, &views.v_a_prime, ViewKind::Aggressive)
                }
                _ => (&views.v_a, ViewKind::Aggressive, &views.v_w_prime, ViewKind::Weak),
            };
            online_views.extend([kind1, kind2]);
            target_views.extend([kind1, kind2]);
            let z1 = encode_online_view(&tape, state, v1)?;
            let z2 = encode_online_view(&tape, state, v2)?;
            let t1 = encode_target_view(&tape, state, v1)?;
            let t2 = encode_target_view(&tape, state, v2)?;
            let similarity = |a: &Tensor, b: &Tensor| match cfg.similarity {
                Similarity::Mse => crate::objective::mse_loss(&tape, a, b),
                Similarity::NegCosine => crate::objective::neg_cosine_loss(&tape, a, b),
            };
            tape.add(&similarity(&z1, &t2)?, &similarity(&z2, &t1)?)?
        }
    };
    let encoder_forwards = (online_views.len() + target_views.len()) as u32;

    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::Runtime(format!("non-finite loss {loss_value} at step {k}")));
    }
    let grads = tape.backward(&loss)?;
    sgd_update(state, &grads, lr)?;
    ema_update(&mut state.pair, tau)?;

    let metrics = StepMetrics {
        step: k,
        loss: loss_value,
        beta,
        lr,
        tau,
        backward_passes: tape.backward_passes(),
        encoder_forwards,
        online_views,
        target_views,
    };
    state.metrics.push(metrics.clone());
    state.step += 1;
    Ok(metrics)
}

/// Run from the current step to the end of the configured schedule.
pub fn run_to_end(state: &mut TrainState, dataset: &Dataset) -> Result<()> {
    let cfg = state.config.clone();
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size);
    if (cfg.epochs * spe) as u64 != state.total_steps {
        return Err(Error::Config(format!(
            "dataset yields {} steps but the run was created for {}",
            cfg.epochs * spe,
            state.total_steps
        )));
    }
    let mut epoch_order: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < state.total_steps {
        let epoch = state.step / spe as u64;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = rng::derive_seed(cfg.seed, "epoch", &[epoch]);
            epoch_order = Some((epoch, batches(dataset.len(), cfg.batch_size, seed, true)?));
        }
        let order = &epoch_order.as_ref().expect("just set").1;
        let batch = dataset.gather(&order[(state.step % spe as u64) as usize]);
        pretrain_step(state, &batch)?;
    }
    Ok(())
}

/// Full training run: init, then every scheduled step.
pub fn pretrain(config: &TrainConfig, dataset: &Dataset) -> Result<TrainState> {
    let mut state = init_state(config, dataset.len())?;
    run_to_end(&mut state, dataset)?;
    Ok(state)
}

/// Metric log as CSV.
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,loss,beta,lr,tau,backward_passes,encoder_forwards\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.step, m.loss, m.beta, m.lr, m.tau, m.backward_passes, m.encoder_forwards
        ));
    }
    out
}

// ── Checkpointing ───────────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"MSRCKPT1";

fn manifest_tensor_line(section: &str, name: &str, shape: &[usize], count: usize) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("tensor {section}:{name} {DTYPE} {} {count}\n", dims.join(","))
}

/// Serialize parameters, buffers, optimizer state, counters and the config
/// (with content hash) into the checkpoint layout: magic bytes, a
/// length-prefixed manifest, then raw little-endian payloads.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str("version=1\n");
    manifest.push_str(&format!("dtype={DTYPE}\n"));
    manifest.push_str(&format!("step={}\n", state.step));
    manifest.push_str(&format!("total_steps={}\n", state.total_steps));
    let config_text = state.config.canonical_text();
    manifest.push_str(&format!("config_sha256={}\n", kv::content_hash(&config_text)));
    manifest.push_str("config_begin\n");
    manifest.push_str(&config_text);
    manifest.push_str("config_end\n");

    let mut payload: Vec<Elem> = Vec::new();
    let mut record = |section: &str, name: &str, shape: &[usize], data: &[Elem], manifest: &mut String| {
        manifest.push_str(&manifest_tensor_line(section, name, shape, data.len()));
        payload.extend_from_slice(data);
    };
    for (name, t) in state.pair.online.iter_params() {
        record("online", name, t.shape(), t.data(), &mut manifest);
    }
    for (name, d) in state.pair.online.iter_buffers() {
        record("online_buf", name, &[d.len()], d, &mut manifest);
    }
    for (name, t) in state.pair.target.iter_params() {
        record("target", name, t.shape(), t.data(), &mut manifest);
    }
    for (name, d) in state.pair.target.iter_buffers() {
        record("target_buf", name, &[d.len()], d, &mut manifest);
    }
    for (name, v) in &state.momentum {
        record("momentum", name, &[v.len()], v, &mut manifest);
    }

    let mut bytes = Vec::with_capacity(
        MAGIC.len() + 8 + manifest.len() + payload.len() * std::mem::size_of::<Elem>(),
    );
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint; the inverse of [`save_checkpoint`] minus the metric
/// log, which is not persisted.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint shorter than its magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("checkpoint truncated before manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Format("checkpoint truncated inside manifest".into()))?;
    let manifest = String::from_utf8(manifest_bytes)
        .map_err(|_| Error::Format("manifest is not valid utf-8".into()))?;

    let mut step = None;
    let mut total_steps = None;
    let mut config_hash = None;
    let mut config_text = String::new();
    let mut in_config = false;
    let mut tensors: Vec<(String, String, Vec<usize>, usize)> = Vec::new();
    for line in manifest.lines() {
        if in_config {
            if line == "config_end" {
                in_config = false;
            } else {
                config_text.push_str(line);
                config_text.push('\n');
            }
            continue;
        }
        if line == "config_begin" {
            in_config = true;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("malformed tensor line `{line}`")));
            }
            let (section, name) = parts[0]
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("malformed tensor id `{}`", parts[0])))?;
            if parts[1] != DTYPE {
                return Err(Error::Format(format!(
                    "checkpoint dtype {} does not match this build ({DTYPE})",
                    parts[1]
                )));
            }
            let shape: Vec<usize> = parts[2]
                .split(',')
                .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dim in `{line}`"))))
                .collect::<Result<_>>()?;
            let count: usize =
                parts[3].parse().map_err(|_| Error::Format(format!("bad count in `{line}`")))?;
            tensors.push((section.to_string(), name.to_string(), shape, count));
        } else if let Some(v) = line.strip_prefix("version=") {
            if v != "1" {
                return Err(Error::Format(format!("unsupported checkpoint version {v}")));
            }
        } else if let Some(v) = line.strip_prefix("dtype=") {
            if v != DTYPE {
                return Err(Error::Format(format!(
                    "checkpoint dtype {v} does not match this build ({DTYPE})"
                )));
            }
        } else if let Some(v) = line.strip_prefix("step=") {
            step = Some(v.parse().map_err(|_| Error::Format("bad step".into()))?);
        } else if let Some(v) = line.strip_prefix("total_steps=") {
            total_steps =
                Some(v.parse().map_err(|_| Error::Format("bad total_steps".into()))?);
        } else if let Some(v) = line.strip_prefix("config_sha256=") {
            config_hash = Some(v.to_string());
        } else if !line.is_empty() {
            return Err(Error::Format(format!("unrecognized manifest line `{line}`")));
        }
    }
    let step = step.ok_or_else(|| Error::Format("manifest missing step".into()))?;
    let total_steps =
        total_steps.ok_or_else(|| Error::Format("manifest missing total_steps".into()))?;
    let config_hash =
        config_hash.ok_or_else(|| Error::Format("manifest missing config hash".into()))?;
    if kv::content_hash(&config_text) != config_hash {
        return Err(Error::Format("config hash does not match config text".into()));
    }
    let config = TrainConfig::from_canonical(&config_text)?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let elem_size = std::mem::size_of::<Elem>();
    let expected: usize = tensors.iter().map(|(_, _, _, c)| c).sum::<usize>() * elem_size;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, manifest promises {expected}",
            payload.len()
        )));
    }

    // Structure from a fresh init, values from the payload.
    let pair = init_models(&config.arch, config.seed)?;
    let mut state = TrainState {
        momentum: pair
            .online
            .iter_params()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
            .collect(),
        config,
        pair,
        step,
        total_steps,
        metrics: Vec::new(),
    };

    let mut offset = 0usize;
    for (section, name, shape, count) in tensors {
        let bytes = &payload[offset * elem_size..(offset + count) * elem_size];
        offset += count;
        let data: Vec<Elem> = bytes
            .chunks_exact(elem_size)
            .map(|c| Elem::from_le_bytes(c.try_into().expect("chunk size")))
            .collect();
        match section.as_str() {
            "online" => state.pair.online.set_param(&name, Tensor::param(shape, data))?,
            "target" => state.pair.target.set_param(&name, Tensor::constant(shape, data))?,
            "online_buf" => {
                let buf = state.pair.online.buffer_mut(&name);
                if buf.len() != data.len() {
                    return Err(Error::Format(format!("buffer `{name}` length mismatch")));
                }
                *buf = data;
            }
            "target_buf" => {
                let buf = state.pair.target.buffer_mut(&name);
                if buf.len() != data.len() {
                    return Err(Error::Format(format!("buffer `{name}` length mismatch")));
                }
                *buf = data;
            }
            "momentum" => {
                let slot = state
                    .momentum
                    .iter_mut()
                    .find(|(n, _)| n == &name)
                    .ok_or_else(|| Error::Format(format!("unknown momentum buffer `{name}`")))?;
                if slot.1.len() != data.len() {
                    return Err(Error::Format(format!("momentum `{name}` length mismatch")));
                }
                slot.1 = data;
            }
            other => return Err(Error::Format(format!("unknown section `{other}`"))),
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Tiny 8x8 dataset matched to the `tiny` arch for fast loop tests.
    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed);
        let images = (0..n)
            .map(|_| {
                let mut img = Image::new(8, 8);
                for v in &mut img.data {
                    *v = r.gen::<f64>();
                }
                img
            })
            .collect();
        Dataset { images, labels: vec![0; n], class_count: 2 }
    }

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.arch = "tiny".to_string();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.aug.crop_size = 8;
        cfg
    }

    fn online_snapshot(state: &TrainState) -> Vec<Vec<Elem>> {
        state.pair.online.iter_params().map(|(_, t)| t.data().to_vec()).collect()
    }

    fn target_snapshot(state: &TrainState) -> Vec<Vec<Elem>> {
        state.pair.target.iter_params().map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn msr_step_counters_and_routing() {
        let ds = tiny_dataset(8, 1);
        let cfg = tiny_config(TrainMode::Msr);
        let mut state = init_state(&cfg, ds.len()).unwrap();
        let m = pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
        assert_eq!(m.encoder_forwards, 4);
        assert_eq!(m.backward_passes, 1);
        assert_eq!(m.online_views, vec![ViewKind::Aggressive, ViewKind::Aggressive]);
        assert_eq!(m.target_views, vec![ViewKind::Weak, ViewKind::Weak]);
        assert!(m.loss.is_finite());
    }

    #[test]
    fn byol_modes_route_two_views_per_network() {
        for (mode, expect_online) in [
            (TrainMode::ByolAa, vec![ViewKind::Aggressive, ViewKind::Aggressive]),
            (TrainMode::ByolAw, vec![ViewKind::Aggressive, ViewKind::Weak]),
        ] {
            let ds = tiny_dataset(8, 2);
            let cfg = tiny_config(mode);
            let mut state = init_state(&cfg, ds.len()).unwrap();
            let m = pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
            assert_eq!(m.encoder_forwards, 4);
            assert_eq!(m.online_views, expect_online);
            assert_eq!(m.target_views, expect_online);
        }
    }

    #[test]
    fn tau_one_keeps_target_bits() {
        let ds = tiny_dataset(8, 3);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.tau_base = 1.0;
        let mut state = init_state(&cfg, ds.len()).unwrap();
        let before = target_snapshot(&state);
        pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
        let after = target_snapshot(&state);
        assert_eq!(before, after);
    }

    #[test]
    fn zero_lr_and_decay_keep_online_bits() {
        let ds = tiny_dataset(8, 4);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.lr0 = 0.0;
        cfg.weight_decay = 0.0;
        let mut state = init_state(&cfg, ds.len()).unwrap();
        let before = online_snapshot(&state);
        pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
        assert_eq!(before, online_snapshot(&state));
    }

    #[test]
    fn simsiam_target_tracks_online_exactly() {
        let ds = tiny_dataset(8, 5);
        let cfg = tiny_config(TrainMode::SimsiamMsr);
        let mut state = init_state(&cfg, ds.len()).unwrap();
        pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
        for (name, t) in state.pair.target.iter_params() {
            assert_eq!(t.data(), state.pair.online.param(name).data(), "{name}");
        }
    }

    #[test]
    fn target_drift_is_bounded_by_ema_factor() {
        let ds = tiny_dataset(8, 6);
        let cfg = tiny_config(TrainMode::Msr);
        let mut state = init_state(&cfg, ds.len()).unwrap();
        let xi_before = target_snapshot(&state);
        let m = pretrain_step(&mut state, &ds.gather(&[0, 1, 2, 3])).unwrap();
        let xi_after = target_snapshot(&state);
        let theta_after = online_snapshot(&state);
        for ((before, after), theta) in xi_before.iter().zip(&xi_after).zip(&theta_after) {
            let drift = before
                .iter()
                .zip(after)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, Elem::max);
            let gap = before
                .iter()
                .zip(theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, Elem::max);
            assert!(drift <= (1.0 - m.tau) * gap + 1e-12, "drift {drift} gap {gap}");
        }
    }

    #[test]
    fn zero_epochs_is_rejected_and_one_epoch_runs() {
        let ds = tiny_dataset(8, 7);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.epochs = 0;
        assert!(init_state(&cfg, ds.len()).is_err());
    }

    #[test]
    fn pretrain_is_bit_deterministic() {
        let ds = tiny_dataset(8, 8);
        let cfg = tiny_config(TrainMode::Msr);
        let a = pretrain(&cfg, &ds).unwrap();
        let b = pretrain(&cfg, &ds).unwrap();
        assert_eq!(online_snapshot(&a), online_snapshot(&b));
        assert_eq!(target_snapshot(&a), target_snapshot(&b));
    }

    #[test]
    fn metric_beta_column_follows_the_schedule() {
        let ds = tiny_dataset(8, 9);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.epochs = 3;
        let state = pretrain(&cfg, &ds).unwrap();
        for m in &state.metrics {
            let expect =
                beta_at(m.step, state.total_steps, cfg.beta_base, cfg.beta_schedule).unwrap();
            assert_eq!(m.beta, expect);
            let lr = cosine_lr(m.step, state.total_steps, cfg.lr0).unwrap();
            assert_eq!(m.lr, lr);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let ds = tiny_dataset(8, 10);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.epochs = 2;
        let state = pretrain(&cfg, &ds).unwrap();
        let path = std::env::temp_dir().join(format!("msr-ckpt-{}.bin", std::process::id()));
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.total_steps, state.total_steps);
        assert_eq!(online_snapshot(&state), online_snapshot(&loaded));
        assert_eq!(target_snapshot(&state), target_snapshot(&loaded));
        assert_eq!(state.momentum, loaded.momentum);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let path = std::env::temp_dir().join(format!("msr-badmagic-{}.bin", std::process::id()));
        fs::write(&path, b"NOTMYFMT0000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checkpoint_rejects_truncated_payload() {
        let ds = tiny_dataset(8, 11);
        let cfg = tiny_config(TrainMode::Msr);
        let state = pretrain(&cfg, &ds).unwrap();
        let path = std::env::temp_dir().join(format!("msr-trunc-{}.bin", std::process::id()));
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn resumed_run_equals_uninterrupted_run() {
        let ds = tiny_dataset(8, 12);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.epochs = 4; // 8 steps of 2 batches
        let full = pretrain(&cfg, &ds).unwrap();

        let mut partial = init_state(&cfg, ds.len()).unwrap();
        let spe = steps_per_epoch(ds.len(), cfg.batch_size);
        let halfway = (cfg.epochs / 2 * spe) as u64;
        while partial.step < halfway {
            let epoch = partial.step / spe as u64;
            let order = batches(
                ds.len(),
                cfg.batch_size,
                rng::derive_seed(cfg.seed, "epoch", &[epoch]),
                true,
            )
            .unwrap();
            let batch = ds.gather(&order[(partial.step % spe as u64) as usize]);
            pretrain_step(&mut partial, &batch).unwrap();
        }
        let path = std::env::temp_dir().join(format!("msr-resume-{}.bin", std::process::id()));
        save_checkpoint(&partial, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        run_to_end(&mut resumed, &ds).unwrap();
        assert_eq!(online_snapshot(&full), online_snapshot(&resumed));
        assert_eq!(target_snapshot(&full), target_snapshot(&resumed));
        assert_eq!(full.momentum, resumed.momentum);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn config_round_trips_through_canonical_text() {
        let mut cfg = TrainConfig::for_mode(TrainMode::ByolAw);
        cfg.epochs = 7;
        cfg.aug.jitter_p = 0.55;
        let text = cfg.canonical_text();
        let parsed = TrainConfig::from_canonical(&text).unwrap();
        assert_eq!(parsed.canonical_text(), text);
    }

    #[test]
    fn conflicting_mode_keys_are_rejected() {
        let reader = KvReader::new(kv::parse("mode=byol_aa\nbeta_base=0.4").unwrap());
        assert!(TrainConfig::from_reader(&reader).is_err());
        let reader = KvReader::new(kv::parse("mode=simsiam_msr\ntau_base=0.5").unwrap());
        assert!(TrainConfig::from_reader(&reader).is_err());
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let ds = tiny_dataset(8, 13);
        let mut cfg = tiny_config(TrainMode::Msr);
        cfg.lr0 = 1e300; // guaranteed overflow after the first update
        cfg.epochs = 2;
        let err = pretrain(&cfg, &ds).unwrap_err();
        match err {
            Error::Runtime(msg) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected runtime error, got {other:?}"),
        }
    }
}
