use std::fmt::Debug;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, RngState};
use super::loss::{loss_positions, reconstruction_loss};
use super::masking::mask_plan;
use crate::autodiff::{Graph, Real};
use crate::error::{Error, Result};
use crate::ingest::EntitySequence;
use crate::transformer::{ForwardCtx, MaskPlan, Model, SeqBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub workers: usize,
    /// Restrict the loss to masked positions instead of all real ones.
    pub loss_masked_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            workers: 1,
            loss_masked_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.batch_size < self.workers {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than workers {}",
                self.batch_size, self.workers
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config("invalid Adam betas or eps".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTiming {
    pub epoch: u64,
    pub wall_seconds: f64,
    /// `workers × wall_seconds`.
    pub total_worker_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub workers: usize,
    pub epochs: Vec<EpochTiming>,
}

impl TimingReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        mean(self.epochs.iter().map(|e| e.wall_seconds))
    }

    pub fn mean_total_worker_seconds(&self) -> f64 {
        mean(self.epochs.iter().map(|e| e.total_worker_seconds))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<EpochLog>,
    pub timing: TimingReport,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError<T: Debug> {
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: u64,
        reason: String,
        /// State at the end of the last completed epoch.
        last_good: Box<Checkpoint<T>>,
    },
    #[error(transparent)]
    Failed(#[from] Error),
}

impl<T: Debug> From<TrainError<T>> for Error {
    fn from(e: TrainError<T>) -> Self {
        match e {
            TrainError::Diverged { epoch, reason, .. } => {
                Error::Numeric(format!("training diverged in epoch {epoch}: {reason}"))
            }
            TrainError::Failed(e) => e,
        }
    }
}

/// Loss and summed parameter gradients for one global batch.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Fresh checkpoint at epoch 0 with zero optimizer moments.
pub fn initial_checkpoint<T: Real>(model: Model<T>, cfg: &TrainConfig) -> Checkpoint<T> {
    let adam = AdamState::new(&model.weights);
    Checkpoint {
        model,
        adam,
        rng: RngState {
            seed: cfg.seed,
            stream: 0,
            word_pos: 0,
        },
        epoch: 0,
        train: cfg.clone(),
    }
}

/// Pretrains `model` on `seqs` for `cfg.epochs` epochs.
pub fn train<T: Real>(
    seqs: &[EntitySequence],
    model: Model<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError<T>> {
    resume(initial_checkpoint(model, cfg), seqs, cfg)
}

/// Same as [`train`] but requires at least two workers.
pub fn train_data_parallel<T: Real>(
    seqs: &[EntitySequence],
    model: Model<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError<T>> {
    if cfg.workers < 2 {
        return Err(Error::Config("data-parallel training needs at least 2 workers".into()).into());
    }
    train(seqs, model, cfg)
}

/// Continues from `ck` until `cfg.epochs` epochs are complete in total.
pub fn resume<T: Real>(
    mut ck: Checkpoint<T>,
    seqs: &[EntitySequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError<T>> {
    cfg.validate()?;
    ck.model.config.validate()?;
    if cfg.epochs > 0 && seqs.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    ck.train = cfg.clone();
    let mut log = Vec::new();
    let mut timing = TimingReport {
        workers: cfg.workers,
        epochs: Vec::new(),
    };
    while ck.epoch < cfg.epochs {
        let epoch = ck.epoch + 1;
        let started = Instant::now();
        let last_good = ck.clone();
        let diverged = |reason: String| TrainError::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&EntitySequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let batch = ck.model.batch(&refs)?;
            let mcfg = &ck.model.config;
            let plan = mask_plan(&batch, mcfg.mask_p, mcfg.mask_mode, &mut rng);
            let row_seeds: Vec<u64> = (0..batch.b).map(|_| rng.random()).collect();
            let step = match batch_gradients(
                &ck.model,
                &batch,
                &plan,
                &row_seeds,
                cfg.loss_masked_only,
                cfg.workers,
            ) {
                Ok(s) => s,
                Err(Error::Numeric(msg)) => return Err(diverged(msg)),
                Err(e) => return Err(e.into()),
            };
            if !step.loss.is_finite() {
                return Err(diverged(format!("loss is {}", step.loss)));
            }
            if let Some(i) = step.grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
                let name = &ck.model.weights.names()[i];
                return Err(diverged(format!("non-finite gradient for `{name}`")));
            }
            adam_step(&mut ck.model.weights, &step.grads, &mut ck.adam, &cfg.adam())?;
            losses.push(step.loss);
        }
        let wall = started.elapsed().as_secs_f64();
        let mean_loss = mean(losses.iter().copied());
        log::info!("epoch {epoch}: mean loss {mean_loss:.6} in {wall:.3}s");
        ck.epoch = epoch;
        ck.rng = RngState {
            seed: cfg.seed,
            stream: rng.get_stream(),
            word_pos: u64::try_from(rng.get_word_pos()).unwrap_or(u64::MAX),
        };
        log.push(EpochLog {
            epoch,
            mean_loss,
            wall_seconds: wall,
        });
        timing.epochs.push(EpochTiming {
            epoch,
            wall_seconds: wall,
            total_worker_seconds: wall * cfg.workers as f64,
        });
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        timing,
    })
}

/// Splits the batch into up to `workers` contiguous shards, computes each
/// shard's gradient on its own thread against the same weights and sums the
/// results in worker order.
///
/// Every shard scales its loss by the number of loss positions in the whole
/// batch, so the reduced gradient equals the full-batch gradient.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &SeqBatch,
    plan: &MaskPlan,
    row_seeds: &[u64],
    masked_only: bool,
    workers: usize,
) -> Result<StepGrads<T>> {
    if row_seeds.len() != batch.b {
        return Err(Error::shape("row seeds", &[row_seeds.len()], &[batch.b]));
    }
    let normalizer = loss_positions(batch, plan, masked_only)
        .iter()
        .filter(|&&x| x)
        .count();
    let w = workers.clamp(1, batch.b.max(1));
    let bounds: Vec<(usize, usize)> = (0..w)
        .map(|i| (i * batch.b / w, (i + 1) * batch.b / w))
        .collect();
    let run = |&(lo, hi): &(usize, usize)| {
        shard_gradients(
            model,
            &batch.select(lo..hi),
            &plan.select(lo..hi),
            &row_seeds[lo..hi],
            masked_only,
            normalizer,
        )
    };
    let parts: Vec<Result<StepGrads<T>>> = if w == 1 {
        vec![run(&bounds[0])]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = bounds.iter().map(|b| s.spawn(move || run(b))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::ContractViolation("training worker panicked".into()))
                    })
                })
                .collect()
        })
    };
    let mut parts = parts.into_iter();
    let mut acc = parts.next().expect("at least one shard")?;
    for part in parts {
        let part = part?;
        acc.loss += part.loss;
        for (a, g) in acc.grads.iter_mut().zip(&part.grads) {
            for (x, &y) in a.iter_mut().zip(g) {
                *x = *x + y;
            }
        }
    }
    Ok(acc)
}

fn shard_gradients<T: Real>(
    model: &Model<T>,
    batch: &SeqBatch,
    plan: &MaskPlan,
    row_seeds: &[u64],
    masked_only: bool,
    normalizer: usize,
) -> Result<StepGrads<T>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let mut ctx = ForwardCtx::train(model.config.dropout, row_seeds);
    let x = p.project_inputs(&mut g, batch, Some(plan))?;
    let enc = p.encoder_forward(&mut g, x, batch, &mut ctx)?;
    let xd = p.decoder_inputs(&mut g, batch, x)?;
    let dec = p.decoder_forward(&mut g, xd, enc, batch, &mut ctx)?;
    let preds = p.reconstruction_heads(&mut g, dec)?;
    let loss = reconstruction_loss(&mut g, &preds, batch, plan, masked_only, normalizer)?;
    g.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.weights.tensors())
        .map(|(&v, t)| match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![T::zero(); t.numel()],
        })
        .collect();
    Ok(StepGrads {
        loss: g.value(loss).item().map_or(f64::NAN, |l| l.as_f64()),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use crate::transformer::ModelConfig;

    fn small_model<T: Real>(seed: u64) -> Model<T> {
        let fitted = testutil::fitted(2, &[5], true);
        let cfg = ModelConfig {
            layers: 2,
            hidden: 8,
            ff_dim: 16,
            heads: 2,
            t: 6,
            ..Default::default()
        };
        Model::new(cfg, fitted, seed).unwrap()
    }

    fn data(n: usize, t: usize, seed: u64) -> Vec<EntitySequence> {
        testutil::sequences(&testutil::fitted(2, &[5], true), n, t, 1, seed)
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { workers: 0, ..Default::default() },
            TrainConfig { workers: 4, batch_size: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        let model = small_model::<f64>(0);
        let one = TrainConfig::default();
        assert!(matches!(
            train_data_parallel(&data(4, 6, 0), model, &one),
            Err(TrainError::Failed(Error::Config(_)))
        ));
    }

    #[test]
    fn zero_epochs_return_initial_state() {
        let model = small_model::<f32>(1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&[], model.clone(), &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.model, model);
        assert_eq!(out.checkpoint.epoch, 0);
        assert!(matches!(
            train(&[], model, &TrainConfig { epochs: 1, ..Default::default() }),
            Err(TrainError::Failed(Error::EmptyDataset))
        ));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_wiring() {
        use crate::transformer::{DecoderInput, Memory};
        for (memory, decoder_input) in [
            (Memory::Sequence, DecoderInput::Masked),
            (Memory::Embedding, DecoderInput::Positions),
            (Memory::Both, DecoderInput::Masked),
        ] {
            let cfg = ModelConfig {
                layers: 1,
                hidden: 4,
                ff_dim: 8,
                heads: 2,
                t: 4,
                memory,
                decoder_input,
                ..Default::default()
            };
            let fitted = testutil::fitted(2, &[3], true);
            let mut model = Model::<f64>::new(cfg, fitted.clone(), 3).unwrap();
            let seqs = testutil::sequences(&fitted, 5, 4, 1, 8);
            let refs: Vec<&EntitySequence> = seqs.iter().collect();
            let batch = model.batch(&refs).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let plan = mask_plan(&batch, 0.3, Default::default(), &mut rng);
            let seeds: Vec<u64> = (0..5).map(|_| rng.random()).collect();
            let an = batch_gradients(&model, &batch, &plan, &seeds, false, 1).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for i in 0..model.weights.len() {
                for j in 0..model.weights.tensor(i).numel() {
                    let x0 = model.weights.tensor(i).data()[j];
                    model.weights.tensor_mut(i).data_mut()[j] = x0 + h;
                    let up = batch_gradients(&model, &batch, &plan, &seeds, false, 1).unwrap().loss;
                    model.weights.tensor_mut(i).data_mut()[j] = x0 - h;
                    let dn = batch_gradients(&model, &batch, &plan, &seeds, false, 1).unwrap().loss;
                    model.weights.tensor_mut(i).data_mut()[j] = x0;
                    let fd = (up - dn) / (2.0 * h);
                    let a = an.grads[i][j];
                    worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-6));
                }
            }
            assert!(worst < 1e-4, "{memory:?}/{decoder_input:?}: {worst}");
        }
    }

    #[test]
    fn sharded_gradient_matches_full_batch() {
        let model = small_model::<f64>(2);
        let seqs = data(9, 6, 3);
        let refs: Vec<&EntitySequence> = seqs.iter().collect();
        let batch = model.batch(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = mask_plan(&batch, 0.3, Default::default(), &mut rng);
        let seeds: Vec<u64> = (0..9).map(|_| rng.random()).collect();
        let full = batch_gradients(&model, &batch, &plan, &seeds, false, 1).unwrap();
        for w in [2, 3, 4] {
            let split = batch_gradients(&model, &batch, &plan, &seeds, false, w).unwrap();
            assert!((split.loss - full.loss).abs() < 1e-12);
            let diff = full
                .grads
                .iter()
                .flatten()
                .zip(split.grads.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "workers {w}: max diff {diff}");
        }
        assert!(full.grads.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn same_seed_same_log() {
        let seqs = data(20, 6, 4);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 7, ..Default::default() };
        let a = train(&seqs, small_model::<f32>(3), &cfg).unwrap();
        let b = train(&seqs, small_model::<f32>(3), &cfg).unwrap();
        let losses = |o: &TrainOutcome<f32>| o.log.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.timing.epochs.len(), 3);
    }

    #[test]
    fn resumed_run_continues_the_single_run() {
        let seqs = data(20, 6, 5);
        let full_cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 1, ..Default::default() };
        let full = train(&seqs, small_model::<f64>(4), &full_cfg).unwrap();

        let half_cfg = TrainConfig { epochs: 2, ..full_cfg.clone() };
        let half = train(&seqs, small_model::<f64>(4), &half_cfg).unwrap();
        let bytes = half.checkpoint.to_bytes().unwrap();
        let reloaded = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        let rest = resume(reloaded, &seqs, &full_cfg).unwrap();

        let tail: Vec<f64> = full.log[2..].iter().map(|e| e.mean_loss).collect();
        let resumed: Vec<f64> = rest.log.iter().map(|e| e.mean_loss).collect();
        assert_eq!(tail, resumed);
        assert_eq!(rest.checkpoint.model, full.checkpoint.model);
        assert_eq!(rest.checkpoint.adam, full.checkpoint.adam);
    }

    #[test]
    fn workers_do_not_change_training_at_f64() {
        let seqs = data(16, 6, 6);
        let one = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let two = TrainConfig { workers: 2, ..one.clone() };
        let a = train(&seqs, small_model::<f64>(5), &one).unwrap();
        let b = train_data_parallel(&seqs, small_model::<f64>(5), &two).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert!((x.mean_loss - y.mean_loss).abs() < 1e-9);
        }
        let diff = a
            .checkpoint
            .model
            .weights
            .tensors()
            .iter()
            .zip(b.checkpoint.model.weights.tensors())
            .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
        assert_eq!(b.timing.workers, 2);
        let e = b.timing.epochs[0];
        assert!((e.total_worker_seconds - 2.0 * e.wall_seconds).abs() < 1e-12);
    }

    #[test]
    fn nan_weights_abort_with_last_good_state() {
        let seqs = data(8, 6, 7);
        let mut model = small_model::<f64>(6);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let good = train(&seqs, model.clone(), &TrainConfig { epochs: 1, ..cfg.clone() })
            .unwrap()
            .checkpoint;
        let i = model.weights.index_of("input.w").unwrap();
        model.weights.tensor_mut(i).data_mut()[0] = f64::NAN;
        match train(&seqs, model.clone(), &cfg) {
            Err(TrainError::Diverged { epoch, last_good, .. }) => {
                assert_eq!(epoch, 1);
                assert_eq!(last_good.epoch, 0);
                let bits = |m: &Model<f64>| {
                    m.weights.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>()
                };
                assert_eq!(bits(&last_good.model), bits(&model));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
        assert_eq!(good.epoch, 1);
        let err: Error = TrainError::<f64>::Diverged {
            epoch: 2,
            reason: "x".into(),
            last_good: Box::new(good),
        }
        .into();
        assert_eq!(err.kind(), "NumericError");
    }

    #[test]
    fn overfits_one_repeated_batch() {
        let fitted = testutil::fitted(2, &[5], true);
        let model = Model::<f32>::new(ModelConfig::default(), fitted.clone(), 0).unwrap();
        let seqs = testutil::sequences(&fitted, 16, 15, 10, 8);
        let cfg = TrainConfig { epochs: 200, batch_size: 16, seed: 3, ..Default::default() };
        let out = train(&seqs, model, &cfg).unwrap();
        let first = out.log[0].mean_loss;
        let tail = mean(out.log[190..].iter().map(|e| e.mean_loss));
        assert!(tail < 0.5 * first, "initial {first}, final {tail}");
    }
}
