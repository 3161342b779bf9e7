//! Representation quality measurement.
//!
//! The linear probe freezes the encoder (eval-mode BN on running stats),
//! trains a softmax classifier on its features with the fixed
//! 30 -> 3 -> 0.3 learning-rate staircase, and reports top-1 accuracy on a
//! held-out split. A cosine kNN probe serves as a faster sanity metric.
//! [`run_grid`] fans experiment cells out over worker threads and
//! aggregates per-configuration mean and standard deviation over seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::augment::{weak_augment, AugSpec, Image};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::objective::BetaSchedule;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{Elem, Tensor};
use crate::trainer::{pretrain, TrainConfig, TrainMode};

/// Linear evaluation protocol settings.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr0: Elem,
    pub momentum: Elem,
    pub weight_decay: Elem,
    /// Epochs at which the learning rate is divided by 10.
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Weak-augment the probe's training inputs (the protocol default).
    pub augment: bool,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            epochs: 100,
            lr0: 30.0,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_epochs: vec![60, 80],
            batch_size: 256,
            seed: 0,
            augment: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be positive".into()));
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "decay epochs {:?} must all precede the total {}",
                self.decay_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: lr0 divided by ten per passed decay epoch.
pub fn probe_lr(cfg: &ProbeConfig, epoch: usize) -> Elem {
    let mut lr = cfg.lr0;
    for &at in &cfg.decay_epochs {
        if epoch >= at {
            lr /= 10.0;
        }
    }
    lr
}

/// Where probe features come from: a frozen encoder or the raw pixels.
pub enum FeatureSource {
    Encoder(ModelParams),
    Identity,
}

impl FeatureSource {
    /// Freeze an encoder: gradients can never reach the copy.
    pub fn encoder(params: &ModelParams) -> FeatureSource {
        FeatureSource::Encoder(params.detached_clone())
    }

    fn dim(&self, sample: &Image) -> usize {
        match self {
            FeatureSource::Encoder(p) => p.arch.feature_dim(),
            FeatureSource::Identity => sample.data.len(),
        }
    }

    /// Row-major [len, dim] feature matrix. Encoder features use eval-mode
    /// BN with running statistics.
    pub fn features(&self, images: &[Image], batch_size: usize) -> Result<Vec<Elem>> {
        match self {
            FeatureSource::Identity => {
                let mut out = Vec::with_capacity(images.len() * images[0].data.len());
                for img in images {
                    out.extend_from_slice(&img.data);
                }
                Ok(out)
            }
            FeatureSource::Encoder(params) => {
                let dim = params.arch.feature_dim();
                let mut out = Vec::with_capacity(images.len() * dim);
                let tape = Tape::new();
                for chunk in images.chunks(batch_size.max(1)) {
                    let batch = crate::augment::batch_to_tensor(chunk);
                    let feats = crate::nn::encoder_forward(
                        &tape,
                        &mut params.clone(),
                        &batch,
                        crate::nn::BnPolicy::Eval,
                    )?;
                    out.extend_from_slice(feats.data());
                }
                Ok(out)
            }
        }
    }
}

fn check_splits(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe splits must be non-empty".into()));
    }
    if train.class_count != test.class_count {
        return Err(Error::Config(format!(
            "class mismatch between splits: {} vs {}",
            train.class_count, test.class_count
        )));
    }
    Ok(())
}

/// Top-1 accuracy of `predictions` argmaxed rows against labels; ties go
/// to the lowest class id.
fn argmax_accuracy(logits: &[Elem], classes: usize, labels: &[u32]) -> Elem {
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best as u32 == label {
            correct += 1;
        }
    }
    correct as Elem / labels.len() as Elem
}

/// Train a linear classifier on frozen features and return top-1 test
/// accuracy. The encoder itself is never touched.
pub fn linear_probe(
    source: &FeatureSource,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<Elem> {
    cfg.validate()?;
    check_splits(train, test)?;
    let classes = train.class_count as usize;
    let dim = source.dim(&train.images[0]);
    let aug_spec = AugSpec {
        crop_size: train.images[0].width,
        ..AugSpec::default()
    };

    let mut weight = vec![0.0 as Elem; dim * classes];
    let mut bias = vec![0.0 as Elem; classes];
    let mut vel_w = vec![0.0 as Elem; dim * classes];
    let mut vel_b = vec![0.0 as Elem; classes];

    for epoch in 0..cfg.epochs {
        let lr = probe_lr(cfg, epoch);
        let order = batches(
            train.len(),
            cfg.batch_size,
            rng::derive_seed(cfg.seed, "probe_epoch", &[epoch as u64]),
            false,
        )?;
        for index_batch in order {
            let images: Vec<Image> = index_batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let seed = rng::derive_seed(cfg.seed, "probe_aug", &[epoch as u64, i as u64]);
                        weak_augment(&train.images[i], &mut rng::stream(seed), &aug_spec)
                    } else {
                        train.images[i].clone()
                    }
                })
                .collect();
            let feats = source.features(&images, cfg.batch_size)?;
            let bsz = images.len();

            // logits = feats . W + bias
            let f = Tensor::constant(vec![bsz, dim], feats);
            let w = Tensor::constant(vec![dim, classes], weight.clone());
            let tape = Tape::new();
            let mut logits = tape.matmul(&f, &w)?.data().to_vec();
            for (i, v) in logits.iter_mut().enumerate() {
                *v += bias[i % classes];
            }

            // Softmax cross-entropy gradient: (p - onehot) / batch.
            let mut delta = logits;
            for r in 0..bsz {
                let row = &mut delta[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
                row[train.labels[index_batch[r]] as usize] -= 1.0;
                for v in row.iter_mut() {
                    *v /= bsz as Elem;
                }
            }

            // dW = feats^T . delta, db = column sums of delta.
            let d = Tensor::constant(vec![bsz, classes], delta);
            let ft = tape.reshape(&f, vec![bsz, dim])?; // same layout; transpose via strides below
            let _ = ft;
            let mut dw = vec![0.0; dim * classes];
            // feats^T is [dim, bsz]; reuse the tape's matmul by building the
            // transpose explicitly (small matrices).
            let mut feats_t = vec![0.0; dim * bsz];
            for r in 0..bsz {
                for c in 0..dim {
                    feats_t[c * bsz + r] = f.data()[r * dim + c];
                }
            }
            let ft = Tensor::constant(vec![dim, bsz], feats_t);
            dw.copy_from_slice(tape.matmul(&ft, &d)?.data());
            let mut db = vec![0.0; classes];
            for r in 0..bsz {
                for c in 0..classes {
                    db[c] += d.data()[r * classes + c];
                }
            }

            for ((w, vw), g) in weight.iter_mut().zip(&mut vel_w).zip(&dw) {
                let g = g + cfg.weight_decay * *w;
                *vw = cfg.momentum * *vw + g;
                *w -= lr * *vw;
            }
            for ((b, vb), g) in bias.iter_mut().zip(&mut vel_b).zip(&db) {
                *vb = cfg.momentum * *vb + g;
                *b -= lr * *vb;
            }
        }
    }

    let test_feats = source.features(&test.images, cfg.batch_size)?;
    let f = Tensor::constant(vec![test.len(), dim], test_feats);
    let w = Tensor::constant(vec![dim, classes], weight);
    let tape = Tape::new();
    let mut logits = tape.matmul(&f, &w)?.data().to_vec();
    for (i, v) in logits.iter_mut().enumerate() {
        *v += bias[i % classes];
    }
    Ok(argmax_accuracy(&logits, classes, &test.labels))
}

/// Cosine-similarity k-nearest-neighbor vote on l2-normalized features.
pub fn knn_probe(
    source: &FeatureSource,
    train: &Dataset,
    test: &Dataset,
    k: usize,
) -> Result<Elem> {
    check_splits(train, test)?;
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            train.len()
        )));
    }
    let dim = source.dim(&train.images[0]);
    let classes = train.class_count as usize;
    let normalize = |flat: Vec<Elem>, rows: usize| -> Vec<Elem> {
        let mut out = flat;
        for r in 0..rows {
            let row = &mut out[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<Elem>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        out
    };
    let train_feats = normalize(source.features(&train.images, 256)?, train.len());
    let test_feats = normalize(source.features(&test.images, 256)?, test.len());

    let tape = Tape::new();
    let a = Tensor::constant(vec![test.len(), dim], test_feats);
    let mut bt = vec![0.0; dim * train.len()];
    for r in 0..train.len() {
        for c in 0..dim {
            bt[c * train.len() + r] = train_feats[r * dim + c];
        }
    }
    let b = Tensor::constant(vec![dim, train.len()], bt);
    let scores = tape.matmul(&a, &b)?;

    let mut correct = 0usize;
    for (i, &label) in test.labels.iter().enumerate() {
        let row = &scores.data()[i * train.len()..(i + 1) * train.len()];
        let mut ranked: Vec<usize> = (0..train.len()).collect();
        ranked.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).expect("finite scores"));
        let mut votes = vec![0usize; classes];
        for &n in ranked.iter().take(k) {
            votes[train.labels[n] as usize] += 1;
        }
        let mut best = 0usize;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        if best as u32 == label {
            correct += 1;
        }
    }
    Ok(correct as Elem / test.len() as Elem)
}

// ── Experiment grid ─────────────────────────────────────────────────────

/// One grid cell: a training mode, its β settings (absent for the BYOL
/// baselines) and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub mode: TrainMode,
    pub beta_schedule: Option<BetaSchedule>,
    pub beta_base: Option<Elem>,
    pub seed: u64,
}

impl GridCell {
    fn schedule_label(&self) -> &'static str {
        match self.beta_schedule {
            None => "-",
            Some(BetaSchedule::Fixed) => "fixed",
            Some(BetaSchedule::Cosine) => "cosine",
        }
    }

    fn beta_label(&self) -> String {
        match self.beta_base {
            None => "-".to_string(),
            Some(b) => format!("{b}"),
        }
    }
}

/// The Table-1-style preliminary grid: both BYOL augmentation baselines
/// plus the four-pair mode with fixed and with decayed β.
pub fn table1_cells(beta_base: Elem, seeds: &[u64]) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &seed in seeds {
        cells.push(GridCell { mode: TrainMode::ByolAa, beta_schedule: None, beta_base: None, seed });
        cells.push(GridCell { mode: TrainMode::ByolAw, beta_schedule: None, beta_base: None, seed });
        cells.push(GridCell {
            mode: TrainMode::Msr,
            beta_schedule: Some(BetaSchedule::Fixed),
            beta_base: Some(beta_base),
            seed,
        });
        cells.push(GridCell {
            mode: TrainMode::Msr,
            beta_schedule: Some(BetaSchedule::Cosine),
            beta_base: Some(beta_base),
            seed,
        });
    }
    cells
}

/// β_base sensitivity sweep cells (cosine decay).
pub fn beta_sweep_cells(beta_bases: &[Elem], seeds: &[u64]) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &beta in beta_bases {
        for &seed in seeds {
            cells.push(GridCell {
                mode: TrainMode::Msr,
                beta_schedule: Some(BetaSchedule::Cosine),
                beta_base: Some(beta),
                seed,
            });
        }
    }
    cells
}

/// Shared budget and cell list for one grid run.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    pub base: TrainConfig,
    pub probe: ProbeConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.cells.iter().enumerate() {
            for b in &self.cells[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!("duplicate grid cell {a:?}")));
                }
            }
        }
        self.base.validate()?;
        self.probe.validate()
    }
}

/// Result of one cell; failed cells carry the error text instead of a
/// value.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub accuracy: Option<Elem>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub outcomes: Vec<CellOutcome>,
}

/// Aggregated accuracy for one configuration across its seeds.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub mode: TrainMode,
    pub beta_schedule: Option<BetaSchedule>,
    pub beta_base: Option<Elem>,
    pub seeds: usize,
    pub mean: Elem,
    pub std: Elem,
    pub failed: usize,
}

impl GridReport {
    /// CSV with one row per cell.
    pub fn csv(&self) -> String {
        let mut out = String::from("mode,beta_schedule,beta_base,seed,accuracy\n");
        for o in &self.outcomes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                o.cell.mode.as_str(),
                o.cell.schedule_label(),
                o.cell.beta_label(),
                o.cell.seed,
                o.accuracy.map_or_else(|| "nan".to_string(), |a| format!("{a}")),
            ));
        }
        out
    }

    /// Group outcomes by (mode, schedule, β_base), preserving first-seen
    /// order; mean and population standard deviation over succeeded seeds.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut rows: Vec<AggregateRow> = Vec::new();
        for o in &self.outcomes {
            let key = (o.cell.mode, o.cell.beta_schedule, o.cell.beta_base);
            let row = match rows.iter_mut().find(|r| {
                (r.mode, r.beta_schedule, r.beta_base) == key
            }) {
                Some(r) => r,
                None => {
                    rows.push(AggregateRow {
                        mode: o.cell.mode,
                        beta_schedule: o.cell.beta_schedule,
                        beta_base: o.cell.beta_base,
                        seeds: 0,
                        mean: 0.0,
                        std: 0.0,
                        failed: 0,
                    });
                    rows.last_mut().expect("just pushed")
                }
            };
            match o.accuracy {
                Some(a) => {
                    // Accumulate sum in `mean`, sum of squares in `std`.
                    row.seeds += 1;
                    row.mean += a;
                    row.std += a * a;
                }
                None => row.failed += 1,
            }
        }
        for row in &mut rows {
            if row.seeds > 0 {
                let n = row.seeds as Elem;
                row.mean /= n;
                row.std = (row.std / n - row.mean * row.mean).max(0.0).sqrt();
            }
        }
        rows
    }

    /// Fixed-width text table of the aggregated rows.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:<8} {:<9} {:>5} {:>16}\n",
            "mode", "beta", "schedule", "n", "accuracy"
        ));
        for row in self.aggregate() {
            let acc = if row.seeds == 0 {
                format!("failed x{}", row.failed)
            } else if row.failed > 0 {
                format!("{:.4} +- {:.4} ({} failed)", row.mean, row.std, row.failed)
            } else {
                format!("{:.4} +- {:.4}", row.mean, row.std)
            };
            let beta = row.beta_base.map_or_else(|| "-".to_string(), |b| format!("{b}"));
            let schedule = match row.beta_schedule {
                None => "-",
                Some(BetaSchedule::Fixed) => "fixed",
                Some(BetaSchedule::Cosine) => "cosine",
            };
            out.push_str(&format!(
                "{:<12} {:<8} {:<9} {:>5} {:>16}\n",
                row.mode.as_str(),
                beta,
                schedule,
                row.seeds,
                acc
            ));
        }
        out
    }
}

/// Worker count: `MSR_THREADS` when set, otherwise the machine's
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MSR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(std::num::NonZeroUsize::get).unwrap_or(1)
        })
}

fn run_cell(
    grid: &ExperimentGrid,
    cell: &GridCell,
    train: &Dataset,
    test: &Dataset,
) -> Result<Elem> {
    let mut cfg = grid.base.clone();
    cfg.mode = cell.mode;
    if let Some(schedule) = cell.beta_schedule {
        cfg.beta_schedule = schedule;
    }
    if let Some(beta) = cell.beta_base {
        cfg.beta_base = beta;
    }
    if cell.mode == TrainMode::SimsiamMsr {
        cfg.similarity = crate::objective::Similarity::NegCosine;
    }
    cfg.seed = cell.seed;
    let state = pretrain(&cfg, train)?;
    let mut probe = grid.probe.clone();
    probe.seed = rng::derive_seed(cell.seed, "probe", &[]);
    linear_probe(&FeatureSource::encoder(&state.pair.online), train, test, &probe)
}

/// Run every cell, fanning out over at most `threads` workers. Cell
/// failures are recorded, not propagated.
pub fn run_grid(
    grid: &ExperimentGrid,
    train: &Dataset,
    test: &Dataset,
    threads: usize,
) -> Result<GridReport> {
    grid.validate()?;
    check_splits(train, test)?;
    let slots: Vec<Mutex<Option<CellOutcome>>> =
        grid.cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, grid.cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.cells.len() {
                    break;
                }
                let cell = &grid.cells[i];
                let outcome = match run_cell(grid, cell, train, test) {
                    Ok(acc) => {
                        CellOutcome { cell: cell.clone(), accuracy: Some(acc), error: None }
                    }
                    Err(e) => CellOutcome {
                        cell: cell.clone(),
                        accuracy: None,
                        error: Some(e.to_string()),
                    },
                };
                *slots[i].lock().expect("no poisoned slots") = Some(outcome);
            });
        }
    });
    let outcomes = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("no poisoned slots").expect("every cell filled"))
        .collect();
    Ok(GridReport { outcomes })
}
