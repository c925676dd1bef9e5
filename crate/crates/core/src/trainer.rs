//! Deterministic training: seeded init, full-corpus reshuffle per epoch,
//! mini-batch ADAM, dev-loss model selection, and multi-trial runs.
//!
//! Fixed (seed, config, corpus) triples produce bit-identical checkpoints:
//! per-utterance forward/backward passes may fan out to worker threads, but
//! gradients are reduced in index order, so the result equals sequential
//! execution exactly.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{compute_lfbe, DspConfig, FeatureMatrix};
use crate::error::{Error, Result};
use crate::nn::{bce_loss, AdamState, GradientMap, Hyper};
use crate::seqmodel::{Model, ModelConfig};
use crate::synth::{AssetPools, CorpusManifest};
use crate::trainer::private::SHUFFLE_SALT;

mod private {
    /// Decouples the shuffle stream from the init stream derived from the
    /// same trial seed.
    pub const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
}

/// Everything one training run needs beyond the corpora.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub hyper: Hyper,
    pub n_epochs: usize,
    pub seed: u64,
    pub n_trials: usize,
    pub dev_eval_every: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, hyper: Hyper, seed: u64) -> Self {
        let n_epochs = hyper.max_epochs;
        Self { model, hyper, n_epochs, seed, n_trials: 5, dev_eval_every: 1 }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        if self.n_epochs == 0 {
            return Err(Error::Config("n_epochs must be at least 1".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if self.dev_eval_every == 0 {
            return Err(Error::Config("dev_eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

/// Per-epoch record plus the dev-loss-selected epoch (1-based; earliest on
/// ties).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub selected_epoch: usize,
}

impl TrainHistory {
    /// CSV export: `epoch,train_loss,dev_loss,dev_acc`, empty cells for
    /// epochs without a dev evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_loss,dev_acc\n");
        for e in &self.epochs {
            let dev_loss = e.dev_loss.map(|v| v.to_string()).unwrap_or_default();
            let dev_acc = e.dev_accuracy.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, dev_loss, dev_acc));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Supplies (features, label) pairs by index. Implementations must be safe
/// to read from many threads.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn item(&self, idx: usize) -> Result<(Cow<'_, FeatureMatrix>, u8)>;
}

/// Features rendered and cached up front; the right choice at desk scale.
pub struct CachedCorpus {
    items: Vec<(FeatureMatrix, u8)>,
}

impl CachedCorpus {
    pub fn new(items: Vec<(FeatureMatrix, u8)>) -> Self {
        Self { items }
    }

    /// Render every spec and extract features, in parallel.
    pub fn from_manifest(
        manifest: &CorpusManifest,
        pools: &AssetPools,
        dsp: &DspConfig,
    ) -> Result<Self> {
        let items = manifest
            .specs
            .par_iter()
            .map(|spec| {
                let wave = pools.render(spec)?;
                let features = compute_lfbe(&wave, dsp)
                    .map_err(|e| Error::Training(format!("mixture {}: {e}", spec.id)))?;
                Ok((features, spec.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }
}

impl FeatureSource for CachedCorpus {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn item(&self, idx: usize) -> Result<(Cow<'_, FeatureMatrix>, u8)> {
        let (features, label) = &self.items[idx];
        Ok((Cow::Borrowed(features), *label))
    }
}

/// No-cache mode for corpora too large to hold in memory: renders the
/// mixture and recomputes features on every access.
pub struct StreamingCorpus {
    manifest: CorpusManifest,
    pools: AssetPools,
    dsp: DspConfig,
}

impl StreamingCorpus {
    pub fn new(manifest: CorpusManifest, pools: AssetPools, dsp: DspConfig) -> Self {
        Self { manifest, pools, dsp }
    }
}

impl FeatureSource for StreamingCorpus {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn item(&self, idx: usize) -> Result<(Cow<'_, FeatureMatrix>, u8)> {
        let spec = &self.manifest.specs[idx];
        let wave = self.pools.render(spec)?;
        let features = compute_lfbe(&wave, &self.dsp)?;
        Ok((Cow::Owned(features), spec.label))
    }
}

/// Mean dev loss and accuracy at threshold 0.5 (score >= threshold counts
/// as positive).
fn evaluate<C: FeatureSource>(model: &Model, corpus: &C) -> Result<(f64, f64)> {
    let results: Vec<(f64, bool)> = (0..corpus.len())
        .into_par_iter()
        .map(|idx| {
            let (features, label) = corpus.item(idx)?;
            let score = model.score(&features)?;
            let loss = bce_loss(score, label)?;
            let correct = (score >= 0.5) == (label == 1);
            Ok((loss, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    let accuracy = results.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((loss, accuracy))
}

/// Train one model. Deterministic for a fixed seed: the same shuffle order,
/// the same init, the same floating-point reduction order.
pub fn train<A: FeatureSource, B: FeatureSource>(
    config: &TrainConfig,
    train_corpus: &A,
    dev_corpus: &B,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let model = Model::init(config.model.clone(), config.seed)?;
    train_from(config, model, train_corpus, dev_corpus)
}

pub(crate) fn train_from<A: FeatureSource, B: FeatureSource>(
    config: &TrainConfig,
    mut model: Model,
    train_corpus: &A,
    dev_corpus: &B,
) -> Result<(Model, TrainHistory)> {
    if train_corpus.is_empty() || dev_corpus.is_empty() {
        return Err(Error::InvalidInput("corpora must not be empty".into()));
    }
    let mut adam = AdamState::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_corpus.len()).collect();

    let mut history = Vec::with_capacity(config.n_epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.n_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.hyper.batch_size).enumerate() {
            let batch_loss = run_batch(config, &mut model, &mut adam, train_corpus, batch)
                .map_err(|e| {
                    Error::Training(format!("epoch {epoch}, batch {batch_idx}: {e}"))
                })?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_corpus.len() as f64;

        let eval_now = epoch % config.dev_eval_every == 0 || epoch == config.n_epochs;
        let (dev_loss, dev_accuracy) = if eval_now {
            let (loss, acc) = evaluate(&model, dev_corpus)
                .map_err(|e| Error::Training(format!("epoch {epoch}, dev evaluation: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}: non-finite dev loss {loss}")));
            }
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, epoch, model.clone()));
            }
            (Some(loss), Some(acc))
        } else {
            (None, None)
        };
        history.push(EpochStats { epoch, train_loss, dev_loss, dev_accuracy });
        log::debug!(
            "epoch {epoch}: train_loss {train_loss:.6} dev_loss {dev_loss:?} dev_acc {dev_accuracy:?}"
        );
    }

    let (_, selected_epoch, best_model) = best.expect("final epoch always evaluates dev");
    Ok((best_model, TrainHistory { epochs: history, selected_epoch }))
}

/// One mini-batch step: mean loss and mean gradient over the batch, then a
/// single ADAM update. Per-utterance work runs in parallel; the reduction
/// happens in batch order.
fn run_batch<C: FeatureSource>(
    config: &TrainConfig,
    model: &mut Model,
    adam: &mut AdamState,
    corpus: &C,
    batch: &[usize],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let per_utterance: Vec<(f64, GradientMap)> = batch
        .par_iter()
        .map(|&idx| {
            let (features, label) = corpus.item(idx)?;
            model.loss_and_grad(&features, label)
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = GradientMap::zeros_like(model.params());
    for (loss, g) in &per_utterance {
        total_loss += loss;
        grads.accumulate(g)?;
    }
    grads.scale(scale);
    let batch_loss = total_loss * scale;
    if !batch_loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {batch_loss}")));
    }
    crate::nn::adam_step(model.params_mut(), &grads, adam, &config.hyper)?;
    Ok(batch_loss)
}

/// Run `n_trials` independent trainings; trial k uses seed `base_seed + k`.
/// Trials run in parallel and the output order follows the trial index.
pub fn run_trials<A: FeatureSource, B: FeatureSource>(
    config: &TrainConfig,
    train_corpus: &A,
    dev_corpus: &B,
) -> Result<Vec<(Model, TrainHistory)>> {
    config.validate()?;
    (0..config.n_trials)
        .into_par_iter()
        .map(|trial| {
            let trial_config = TrainConfig {
                seed: config.seed + trial as u64,
                ..config.clone()
            };
            train(&trial_config, train_corpus, dev_corpus)
                .map_err(|e| Error::Training(format!("trial {trial}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::PoolingKind;
    use crate::seqmodel::Direction;
    use crate::synth::{gen_toy_assets, gen_training_corpus, Split, ToyAssetConfig};

    fn toy_setup(
        n_train: usize,
        n_dev: usize,
        clip_s: f64,
    ) -> (CachedCorpus, CachedCorpus, DspConfig) {
        let asset_config = ToyAssetConfig {
            n_events_per_class: 4,
            n_backgrounds: 6,
            background_duration_s: clip_s,
            ..ToyAssetConfig::default()
        };
        let (events, backgrounds) = gen_toy_assets(303, &asset_config).unwrap();
        let tones: Vec<_> = events
            .into_iter()
            .filter(|a| crate::synth::event_type_of(&a.id) == "tone")
            .collect();
        let pools = AssetPools::from_assets(&tones, &backgrounds);
        let dsp = DspConfig { n_mels: 24, ..DspConfig::default() };
        let train_manifest = gen_training_corpus(
            &tones,
            &backgrounds,
            n_train,
            &[-6.0, 0.0, 6.0],
            0.5,
            Split::Train,
            21,
        )
        .unwrap();
        let dev_manifest = gen_training_corpus(
            &tones,
            &backgrounds,
            n_dev,
            &[-6.0, 0.0, 6.0],
            0.5,
            Split::Dev,
            22,
        )
        .unwrap();
        (
            CachedCorpus::from_manifest(&train_manifest, &pools, &dsp).unwrap(),
            CachedCorpus::from_manifest(&dev_manifest, &pools, &dsp).unwrap(),
            dsp,
        )
    }

    fn small_config(pooling: PoolingKind, units: usize, n_mels: usize) -> TrainConfig {
        let model = ModelConfig::new(1, units, Direction::Uni, pooling, n_mels).unwrap();
        let hyper = Hyper { batch_size: 8, ..Hyper::default() };
        TrainConfig {
            n_epochs: 2,
            n_trials: 1,
            dev_eval_every: 1,
            ..TrainConfig::new(model, hyper, 5)
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(8, 4, 1.0);
        let mut config = small_config(PoolingKind::PredMax, 4, dsp.n_mels);
        config.n_epochs = 1;
        config.hyper.batch_size = 8;
        config.hyper.learning_rate = 1e-300; // effectively zero, still valid
        let initial = Model::init(config.model.clone(), config.seed).unwrap();
        let (model, history) = train(&config, &train_corpus, &dev_corpus).unwrap();
        assert_eq!(history.epochs.len(), 1);
        for tensor in initial.params().iter() {
            let trained = model.params().get(tensor.name()).unwrap();
            for (a, b) in tensor.values().iter().zip(trained.values()) {
                assert!((a - b).abs() < 1e-280, "{}", tensor.name());
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(12, 6, 1.0);
        let config = small_config(PoolingKind::PredAvg, 4, dsp.n_mels);
        let (model_a, history_a) = train(&config, &train_corpus, &dev_corpus).unwrap();
        let (model_b, history_b) = train(&config, &train_corpus, &dev_corpus).unwrap();
        assert_eq!(history_a, history_b);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        model_a.write_to(&mut bytes_a).unwrap();
        model_b.write_to(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn learns_separable_toy_corpus() {
        // 200 utterances total, Y.MaxPooling, 16 units: dev loss must
        // strictly decrease over the first three epochs and reach >= 0.9
        // accuracy.
        let (train_corpus, dev_corpus, dsp) = toy_setup(160, 40, 1.5);
        let model =
            ModelConfig::new(1, 16, Direction::Uni, PoolingKind::PredMax, dsp.n_mels).unwrap();
        let hyper = Hyper { batch_size: 16, ..Hyper::default() };
        let config = TrainConfig {
            n_epochs: 12,
            n_trials: 1,
            dev_eval_every: 1,
            ..TrainConfig::new(model, hyper, 7)
        };
        let (_, history) = train(&config, &train_corpus, &dev_corpus).unwrap();
        let dev: Vec<f64> = history.epochs.iter().map(|e| e.dev_loss.unwrap()).collect();
        assert!(dev[1] < dev[0] && dev[2] < dev[1], "dev losses {dev:?}");
        let final_acc = history.epochs.last().unwrap().dev_accuracy.unwrap();
        assert!(final_acc >= 0.9, "final dev accuracy {final_acc}");
    }

    #[test]
    fn initial_dev_loss_is_near_ln2() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(8, 10, 1.0);
        let mut config = small_config(PoolingKind::PredAvg, 8, dsp.n_mels);
        config.n_epochs = 1;
        config.hyper.learning_rate = 1e-300;
        let (_, history) = train(&config, &train_corpus, &dev_corpus).unwrap();
        let dev_loss = history.epochs[0].dev_loss.unwrap();
        assert!(
            (dev_loss - std::f64::consts::LN_2).abs() <= 0.15,
            "initial dev loss {dev_loss}"
        );
        let _ = train_corpus; // silence unused in this configuration
    }

    #[test]
    fn selection_picks_minimum_dev_loss() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(24, 12, 1.0);
        let mut config = small_config(PoolingKind::PredMax, 6, dsp.n_mels);
        config.n_epochs = 5;
        let (_, history) = train(&config, &train_corpus, &dev_corpus).unwrap();
        let selected = history
            .epochs
            .iter()
            .find(|e| e.epoch == history.selected_epoch)
            .unwrap()
            .dev_loss
            .unwrap();
        for e in &history.epochs {
            if let Some(loss) = e.dev_loss {
                assert!(selected <= loss);
            }
        }
    }

    #[test]
    fn trials_use_distinct_seeds() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(8, 4, 1.0);
        let mut config = small_config(PoolingKind::PredAvg, 4, dsp.n_mels);
        config.n_trials = 2;
        config.n_epochs = 1;
        let trials = run_trials(&config, &train_corpus, &dev_corpus).unwrap();
        assert_eq!(trials.len(), 2);
        // Some parameter must differ between differently seeded trials.
        let a = &trials[0].0;
        let b = &trials[1].0;
        assert_ne!(a, b);

        // n_trials = 1 reproduces a single train call exactly.
        config.n_trials = 1;
        let single = run_trials(&config, &train_corpus, &dev_corpus).unwrap();
        let (direct_model, direct_history) = train(&config, &train_corpus, &dev_corpus).unwrap();
        assert_eq!(single[0].0, direct_model);
        assert_eq!(single[0].1, direct_history);
    }

    #[test]
    fn poisoned_model_aborts_with_context() {
        let (train_corpus, dev_corpus, dsp) = toy_setup(8, 4, 1.0);
        let config = small_config(PoolingKind::PredAvg, 4, dsp.n_mels);
        let mut model = Model::init(config.model.clone(), 1).unwrap();
        model.params_mut().get_mut("head.w").unwrap().values_mut()[0] = f64::NAN;
        match train_from(&config, model, &train_corpus, &dev_corpus) {
            Err(Error::Training(msg)) => {
                assert!(msg.contains("epoch 1"), "{msg}");
                assert!(msg.contains("batch 0"), "{msg}");
            }
            other => panic!("expected Training error, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_round_trip_schema() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats { epoch: 1, train_loss: 0.7, dev_loss: Some(0.69), dev_accuracy: Some(0.5) },
                EpochStats { epoch: 2, train_loss: 0.6, dev_loss: None, dev_accuracy: None },
            ],
            selected_epoch: 1,
        };
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,dev_loss,dev_acc");
        assert_eq!(lines.next().unwrap(), "1,0.7,0.69,0.5");
        assert_eq!(lines.next().unwrap(), "2,0.6,,");
    }
}
