//! Training: stratified train/validation split, single-sample graphs with
//! gradient accumulation into mini-batches, plain SGD, per-epoch validation,
//! and best-epoch selection.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::data_io::checkpoint::{Checkpoint, Provenance};
use crate::data_io::manifest::Dataset;
use crate::error::{Error, Result};
use crate::grounding::FeatureBundle;
use crate::metrics::{bucket_report, rank_of_truth, BucketReport, BucketScheme, MetricsReport, RankRecord};
use crate::model::{Model, ModelConfig};
use crate::optim::sgd_step;
use crate::step_network::{CarryMode, StepVariant};
use crate::tensor::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub d_h: usize,
    pub heads: usize,
    /// Defaults to `d_h`.
    pub d_o: Option<usize>,
    /// Defaults to `d_o`.
    pub d_s: Option<usize>,
    pub step_variant: StepVariant,
    pub cascade_residual: bool,
    pub seed: u64,
    pub precision: Precision,
    /// Fraction of each button bucket held out for validation.
    pub val_fraction: f64,
    pub bucket_bounds: Vec<usize>,
    /// Evaluation threads; results are merged in sample order.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.002,
            d_h: 768,
            heads: 3,
            d_o: None,
            d_s: None,
            step_variant: StepVariant::Gru,
            cascade_residual: true,
            seed: 0,
            precision: Precision::F32,
            val_fraction: 0.25,
            bucket_bounds: vec![10, 20],
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}; validation drives best-epoch selection",
                self.val_fraction
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.scheme().validate()?;
        self.model_config(1, 1).validate()
    }

    pub fn scheme(&self) -> BucketScheme {
        BucketScheme {
            bounds: self.bucket_bounds.clone(),
        }
    }

    pub fn model_config(&self, d_v: usize, d_t: usize) -> ModelConfig {
        let d_o = self.d_o.unwrap_or(self.d_h);
        ModelConfig {
            d_v,
            d_t,
            d_h: self.d_h,
            heads: self.heads,
            d_o,
            d_s: self.d_s.unwrap_or(d_o),
            step_variant: self.step_variant,
            cascade_residual: self.cascade_residual,
        }
    }
}

/// Splits by button-count bucket: from each bucket `round(fraction * size)`
/// samples, chosen by a seeded shuffle, go to validation. Both halves keep
/// the input order.
pub fn stratified_split(
    samples: &[FeatureBundle],
    val_fraction: f64,
    seed: u64,
    scheme: &BucketScheme,
) -> Result<(Vec<FeatureBundle>, Vec<FeatureBundle>)> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut is_val = vec![false; samples.len()];
    for bucket in 0..scheme.len() {
        let mut members: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| scheme.bucket_of(s.button_count) == bucket)
            .map(|(i, _)| i)
            .collect();
        let take = (val_fraction * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in members.iter().take(take) {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        val.into_iter().map(|(s, _)| s).collect(),
    ))
}

/// Per-epoch visiting order of `n` training samples.
pub fn epoch_orders(seed: u64, n: usize, epochs: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation: MetricsReport,
    #[serde(skip)]
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Config {
        config: &'a TrainConfig,
        model: &'a ModelConfig,
        seed: u64,
        train_ids: &'a [String],
        val_ids: &'a [String],
    },
    Epoch(&'a EpochRecord),
    Best {
        epoch: usize,
    },
}

impl TrainLog {
    /// One JSON object per line: the configuration, each epoch, the selected
    /// epoch. Wall times are excluded so reruns are byte-identical.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![LogLine::Config {
            config: &self.config,
            model: &self.model,
            seed: self.config.seed,
            train_ids: &self.train_ids,
            val_ids: &self.val_ids,
        }];
        lines.extend(self.epochs.iter().map(LogLine::Epoch));
        lines.push(LogLine::Best {
            epoch: self.best_epoch,
        });
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("log records serialize") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// `true` if `a` beats `b`: higher R@1, then higher MRR, then lower MR.
fn better(a: &MetricsReport, b: &MetricsReport) -> bool {
    a.r_at_1
        .total_cmp(&b.r_at_1)
        .then(a.mrr.total_cmp(&b.mrr))
        .then(b.mr.total_cmp(&a.mr))
        .is_gt()
}

/// 1-based epoch with the best validation metrics; earliest wins full ties.
pub fn select_best(epochs: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for e in epochs {
        if best.is_none_or(|b| better(&e.validation, &b.validation)) {
            best = Some(e);
        }
    }
    best.map(|e| e.epoch)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<RankRecord>,
    pub report: BucketReport,
    pub mean_loss: f64,
    /// Steps evaluated with the ground-truth state carried forward. Always
    /// zero for [`evaluate`].
    pub teacher_forced_steps: usize,
}

struct SampleEval {
    records: Vec<RankRecord>,
    loss: f64,
    teacher_forced_steps: usize,
}

fn evaluate_one<T: Scalar>(model: &Model<T>, bundle: &FeatureBundle, scheme: &BucketScheme) -> Result<SampleEval> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, bundle, CarryMode::Greedy)?;
    let bucket = scheme.bucket_of(bundle.button_count);
    let records = fwd
        .scores
        .iter()
        .zip(&bundle.steps)
        .enumerate()
        .map(|(i, (scores, step))| {
            Ok(RankRecord {
                sample_id: bundle.id.clone(),
                step: i,
                candidates: step.candidates(),
                rank: rank_of_truth(scores, step.truth)?,
                bucket,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleEval {
        records,
        loss: g.value(fwd.loss).item().as_f64(),
        teacher_forced_steps: fwd.teacher_forced_steps,
    })
}

/// Greedy-carry evaluation. With `workers > 1` samples are spread over
/// threads; results are merged in input order, so output is identical for
/// any worker count.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[FeatureBundle],
    scheme: &BucketScheme,
    workers: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let per_sample: Vec<Result<SampleEval>> = if workers <= 1 {
        samples.iter().map(|s| evaluate_one(model, s, scheme)).collect()
    } else {
        let chunk = samples.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| evaluate_one(model, s, scheme))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut records = Vec::new();
    let mut loss = 0.0;
    let mut teacher_forced_steps = 0;
    for r in per_sample {
        let r = r?;
        records.extend(r.records);
        loss += r.loss;
        teacher_forced_steps += r.teacher_forced_steps;
    }
    Ok(Evaluation {
        report: bucket_report(&records, scheme)?,
        records,
        mean_loss: loss / samples.len() as f64,
        teacher_forced_steps,
    })
}

/// Teacher-forced loss and gradients of one sample.
pub fn sample_gradients<T: Scalar>(model: &Model<T>, bundle: &FeatureBundle) -> Result<(f64, Gradients<T>)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, bundle, CarryMode::TeacherForcing)?;
    let loss = g.value(fwd.loss).item().as_f64();
    let grads = g.backward(fwd.loss, &model.store)?;
    Ok((loss, grads))
}

pub struct TrainOutcome<T> {
    /// Parameters from the selected epoch.
    pub model: Model<T>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

/// Trains on an explicit split.
pub fn train_on_split<T: Scalar>(
    config: &TrainConfig,
    dims: (usize, usize),
    train: &[FeatureBundle],
    val: &[FeatureBundle],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(format!(
            "need nonempty train and validation sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let scheme = config.scheme();
    let model_config = config.model_config(dims.0, dims.1);
    let mut model = Model::<T>::new(model_config, config.seed)?;
    let lr = T::lit(config.learning_rate);
    let orders = epoch_orders(config.seed, train.len(), config.epochs);

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, MetricsReport, crate::params::ParamStore<T>)> = None;
    for (e, order) in orders.iter().enumerate() {
        let epoch = e + 1;
        let started = Instant::now();
        let mut acc = Gradients::zeros_like(&model.store);
        let mut in_batch = 0usize;
        let mut loss_sum = 0.0;

        let apply = |model: &mut Model<T>, acc: &mut Gradients<T>, n: usize| -> Result<()> {
            acc.scale(T::one() / T::lit(n as f64));
            sgd_step(&mut model.store, acc, lr)?;
            *acc = Gradients::zeros_like(&model.store);
            Ok(())
        };
        for &i in order {
            let sample = &train[i];
            let (loss, grads) = sample_gradients(&model, sample).map_err(|err| match err {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    sample: sample.id.clone(),
                    reason: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    sample: sample.id.clone(),
                    reason: format!("loss {loss}"),
                });
            }
            loss_sum += loss;
            acc.accumulate(&grads)?;
            in_batch += 1;
            if in_batch == config.batch_size {
                apply(&mut model, &mut acc, in_batch)?;
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            apply(&mut model, &mut acc, in_batch)?;
        }

        let eval = evaluate(&model, val, &scheme, config.workers)?;
        if eval.teacher_forced_steps != 0 {
            return Err(Error::Contract("validation used teacher forcing".into()));
        }
        let record = EpochRecord {
            epoch,
            mean_train_loss: loss_sum / train.len() as f64,
            validation: eval.report.overall.clone(),
            wall_ms: started.elapsed().as_millis(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val R@1 {:.4} MRR {:.4} ({} ms)",
            record.mean_train_loss,
            record.validation.r_at_1,
            record.validation.mrr,
            record.wall_ms
        );
        if best
            .as_ref()
            .is_none_or(|(_, b, _)| better(&record.validation, b))
        {
            best = Some((epoch, record.validation.clone(), model.store.clone()));
        }
        records.push(record);
    }

    let (best_epoch, _, best_store) = best.expect("at least one epoch ran");
    debug_assert_eq!(select_best(&records), Some(best_epoch));
    model.store = best_store;
    let log = TrainLog {
        config: config.clone(),
        model: model_config,
        train_ids: train.iter().map(|s| s.id.clone()).collect(),
        val_ids: val.iter().map(|s| s.id.clone()).collect(),
        epochs: records,
        best_epoch,
    };
    let checkpoint = Checkpoint::from_model(
        &model,
        Some(config.clone()),
        Provenance {
            seed: config.seed,
            best_epoch: Some(best_epoch),
            epochs_run: config.epochs,
        },
    );
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

/// Splits `dataset` and trains at the configured precision. The returned
/// model is in 32-bit regardless of the training precision.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome<f32>> {
    config.validate()?;
    let (train_set, val_set) =
        stratified_split(&dataset.samples, config.val_fraction, config.seed, &config.scheme())?;
    if val_set.is_empty() {
        return Err(Error::Contract(format!(
            "validation split of {} samples at fraction {} is empty",
            dataset.len(),
            config.val_fraction
        )));
    }
    let dims = (dataset.d_v, dataset.d_t);
    match config.precision {
        Precision::F32 => train_on_split::<f32>(config, dims, &train_set, &val_set),
        Precision::F64 => {
            let out = train_on_split::<f64>(config, dims, &train_set, &val_set)?;
            Ok(TrainOutcome {
                model: out.model.cast(),
                log: out.log,
                checkpoint: out.checkpoint,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bundle(id: &str, buttons: usize) -> FeatureBundle {
        FeatureBundle {
            id: id.into(),
            button_count: buttons,
            video: Tensor::zeros(1, 1),
            script: Tensor::zeros(1, 1),
            question: Tensor::zeros(1, 1),
            steps: vec![],
        }
    }

    fn report(r1: f64, mrr: f64, mr: f64) -> MetricsReport {
        MetricsReport {
            count: 1,
            r_at_1: r1,
            r_at_3: 1.0,
            mr,
            mrr,
            rank_histogram: Default::default(),
        }
    }

    fn epochs(rows: &[(f64, f64, f64)]) -> Vec<EpochRecord> {
        rows.iter()
            .enumerate()
            .map(|(i, &(r1, mrr, mr))| EpochRecord {
                epoch: i + 1,
                mean_train_loss: 0.0,
                validation: report(r1, mrr, mr),
                wall_ms: 0,
            })
            .collect()
    }

    #[test]
    fn split_takes_rounded_share_of_each_bucket() {
        let scheme = BucketScheme::default();
        let mut samples: Vec<_> = (0..4).map(|i| bundle(&format!("a{i}"), 5)).collect();
        samples.extend((0..4).map(|i| bundle(&format!("b{i}"), 15)));
        let (train, val) = stratified_split(&samples, 0.5, 3, &scheme).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(val.iter().filter(|s| s.button_count == 5).count(), 2);
        assert_eq!(val.iter().filter(|s| s.button_count == 15).count(), 2);

        let mut sizes = Vec::new();
        for (n, buttons) in [(39, 5), (29, 15), (12, 25)] {
            sizes.extend((0..n).map(|i| bundle(&format!("{buttons}-{i}"), buttons)));
        }
        let (train, val) = stratified_split(&sizes, 0.25, 0, &scheme).unwrap();
        let count = |b| val.iter().filter(|s| s.button_count == b).count();
        assert_eq!((count(5), count(15), count(25)), (10, 7, 3));
        assert_eq!(val.len(), 20);
        assert_eq!(train.len(), 60);
        let mut ids: Vec<_> = train.iter().chain(&val).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 80);
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let scheme = BucketScheme::default();
        assert!(matches!(
            stratified_split(&[], 0.25, 0, &scheme),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            stratified_split(&[bundle("a", 3)], 0.0, 0, &scheme),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn best_epoch_tie_rules() {
        assert_eq!(
            select_best(&epochs(&[(0.2, 0.5, 2.0), (0.5, 0.6, 2.0), (0.5, 0.7, 2.0)])),
            Some(3)
        );
        assert_eq!(select_best(&epochs(&[(0.1, 0.1, 9.0)])), Some(1));
        assert_eq!(
            select_best(&epochs(&[(0.4, 0.6, 2.0), (0.4, 0.6, 2.0), (0.4, 0.6, 2.0)])),
            Some(1)
        );
        assert_eq!(
            select_best(&epochs(&[(0.4, 0.6, 2.5), (0.4, 0.6, 2.0)])),
            Some(2)
        );
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.val_fraction = 0.0));
        assert!(bad(|c| c.heads = 5));
        assert!(bad(|c| c.learning_rate = f64::NAN));
    }
}
