//! The training loop: batched contrastive training of the adapter mixture
//! over a frozen dual encoder, with step-granular checkpoint/resume.
//!
//! Determinism contract: everything a run does is pinned by the run seed.
//! Batch order comes from a per-epoch stateless shuffle stream, parameter
//! init from name-keyed streams, and the loop itself keeps no hidden RNG
//! state — so a run interrupted at any optimizer step and resumed from its
//! checkpoint produces bit-identical parameters and metrics to one that was
//! never interrupted. A run capped by `max_steps` therefore ends without a
//! trailing partial-epoch metrics row; the resumed run emits that epoch's
//! row when the epoch actually completes, and the two metrics files
//! concatenate to exactly the uninterrupted run's.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::adapter::BranchRouting;
use crate::backbone::DualEncoder;
use crate::data::{generate_dataset, Dataset, SyntheticPair};
use crate::error::{Error, Result};
use crate::metrics::RetrievalReport;
use crate::objectives::{match_distribution, sdm_bidirectional, total_loss};
use crate::params::{stream_rng, ParamStore};
use crate::tensor::{Tape, TensorId};

use super::checkpoint::{save_checkpoint, Checkpoint, Progress, TensorBlock};
use super::config::RunConfig;
use super::optim::{round_trainable_to_f32, Adam};

/// One evaluation-time metrics record. Loss and entropy columns are means
/// over the just-completed epoch's batches; rank columns come from a full
/// pass over the held-out split. Balance columns hold the raw per-branch
/// penalties, so `loss_total = loss_sdm + alpha*(loss_lb_image +
/// loss_lb_text)` up to floating-point reassociation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_total: f64,
    pub loss_sdm: f64,
    pub loss_lb_image: f64,
    pub loss_lb_text: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub expert_usage_entropy_image: f64,
    pub expert_usage_entropy_text: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,step,loss_total,loss_sdm,loss_lb_image,\
loss_lb_text,rank1,rank5,rank10,map,expert_usage_entropy_image,expert_usage_entropy_text";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_sdm,
            self.loss_lb_image,
            self.loss_lb_text,
            self.rank1,
            self.rank5,
            self.rank10,
            self.map,
            self.expert_usage_entropy_image,
            self.expert_usage_entropy_text
        )
    }
}

/// What a completed (or step-capped) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Report from the last evaluation pass, if any epoch completed (or the
    /// run trained for zero epochs, which still evaluates once).
    pub last_eval: Option<RetrievalReport>,
    pub progress: Progress,
    /// True when `max_steps` stopped the run before all epochs finished.
    pub stopped_early: bool,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Per-batch scalars folded into the epoch accumulator.
struct BatchStats {
    total: f64,
    sdm: f64,
    lb_image: f64,
    lb_text: f64,
    entropy_image: f64,
    entropy_text: f64,
}

/// Partial-epoch sums. Lives in the checkpoint payload so a mid-epoch
/// resume reproduces the epoch's metrics row exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct EpochAccum {
    batches: f64,
    total: f64,
    sdm: f64,
    lb_image: f64,
    lb_text: f64,
    entropy_image: f64,
    entropy_text: f64,
}

impl EpochAccum {
    fn fold(&mut self, s: &BatchStats) {
        self.batches += 1.0;
        self.total += s.total;
        self.sdm += s.sdm;
        self.lb_image += s.lb_image;
        self.lb_text += s.lb_text;
        self.entropy_image += s.entropy_image;
        self.entropy_text += s.entropy_text;
    }

    fn mean(&self, sum: f64) -> f64 {
        if self.batches == 0.0 {
            0.0
        } else {
            sum / self.batches
        }
    }

    fn to_vec(self) -> Vec<f64> {
        vec![
            self.batches,
            self.total,
            self.sdm,
            self.lb_image,
            self.lb_text,
            self.entropy_image,
            self.entropy_text,
        ]
    }

    fn from_vec(v: &[f64]) -> Result<EpochAccum> {
        if v.len() != 7 {
            return Err(Error::Checkpoint(format!(
                "epoch accumulator has {} entries, expected 7",
                v.len()
            )));
        }
        Ok(EpochAccum {
            batches: v[0],
            total: v[1],
            sdm: v[2],
            lb_image: v[3],
            lb_text: v[4],
            entropy_image: v[5],
            entropy_text: v[6],
        })
    }
}

/// Owns the model, optimizer, data, and loop position for one run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: DualEncoder,
    pub dataset: Dataset,
    adam: Adam,
    progress: Progress,
    accum: EpochAccum,
}

impl Trainer {
    /// Fresh run: derive sub-seeds, generate data, build the model (frozen
    /// backbone + zero-initialized mixtures), zeroed optimizer state.
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let cfg = cfg.derived();
        let dataset = generate_dataset(&cfg.data)?;
        let mut model = DualEncoder::build(cfg.backbone.clone(), Some(cfg.moa.clone()))?;
        if cfg.precision == 32 {
            round_trainable_to_f32(&mut model.store);
        }
        let adam = Adam::new(&model.store, &cfg.optim);
        Ok(Trainer {
            cfg,
            model,
            dataset,
            adam,
            progress: Progress::default(),
            accum: EpochAccum::default(),
        })
    }

    /// Rebuild a run mid-flight from a checkpoint: same config, restored
    /// trainable parameters, optimizer moments, loop position, and
    /// partial-epoch sums.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Trainer> {
        let mut t = Trainer::new(&ckpt.config)?;
        restore_trainable(&mut t.model.store, &ckpt.params)?;
        if ckpt.adam_m.len() != t.adam.trainable().len()
            || ckpt.adam_v.len() != t.adam.trainable().len()
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint carries {}/{} moment blocks for {} trainable parameters",
                ckpt.adam_m.len(),
                ckpt.adam_v.len(),
                t.adam.trainable().len()
            )));
        }
        for (m, v) in ckpt.adam_m.iter().zip(&ckpt.adam_v) {
            if m.name != v.name {
                return Err(Error::Checkpoint(format!(
                    "moment blocks out of pairing: `{}` vs `{}`",
                    m.name, v.name
                )));
            }
            let idx = t
                .adam
                .trainable()
                .iter()
                .position(|&pid| t.model.store.get(pid).name == m.name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("moment block `{}` matches no parameter", m.name))
                })?;
            t.adam.restore(idx, m.data.clone(), v.data.clone())?;
        }
        t.adam.step = ckpt.adam_step;
        t.progress = ckpt.progress;
        t.accum = EpochAccum::from_vec(&ckpt.epoch_accum)?;
        Ok(t)
    }

    fn steps_per_epoch(&self) -> u64 {
        let n = self.dataset.train.len() as u64;
        let b = self.cfg.optim.batch_size as u64;
        n.div_ceil(b)
    }

    fn snapshot(&self) -> Checkpoint {
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for (idx, &pid) in self.adam.trainable().iter().enumerate() {
            let p = self.model.store.get(pid);
            params.push(TensorBlock {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            });
            let (m, v) = self.adam.moments(idx);
            adam_m.push(TensorBlock {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: m.to_vec(),
            });
            adam_v.push(TensorBlock {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: v.to_vec(),
            });
        }
        Checkpoint {
            config: self.cfg.clone(),
            progress: self.progress,
            adam_step: self.adam.step,
            rng_seed: self.cfg.seed,
            params,
            adam_m,
            adam_v,
            epoch_accum: self.accum.to_vec(),
        }
    }

    /// Run (or keep running) until every epoch finishes or `max_steps`
    /// hits. Writes `metrics.csv`, `config.toml`, and `checkpoint.bin`
    /// under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir)?;
        self.cfg.save(&out_dir.join("config.toml"))?;
        let metrics_path = out_dir.join("metrics.csv");
        let checkpoint_path = out_dir.join("checkpoint.bin");
        let mut metrics_file = std::fs::File::create(&metrics_path)?;
        writeln!(metrics_file, "{}", MetricsRow::CSV_HEADER)?;
        metrics_file.flush()?;

        let epochs = self.cfg.optim.epochs as u64;
        let spe = self.steps_per_epoch();
        let batch_size = self.cfg.optim.batch_size;
        let n_train = self.dataset.train.len();
        let mut rows = Vec::new();
        let mut last_eval = None;
        let mut stopped_early = false;

        'epochs: while self.progress.epoch < epochs {
            let e = self.progress.epoch;
            // Stateless shuffle: the order is a pure function of (seed,
            // epoch), so resuming mid-epoch replays the identical order.
            let mut order: Vec<usize> = (0..n_train).collect();
            let mut rng = stream_rng(self.cfg.seed, &format!("shuffle/epoch{e}"));
            order.shuffle(&mut rng);

            let start_batch = (self.progress.step - e * spe) as usize;
            for b in start_batch..spe as usize {
                if let Some(cap) = self.cfg.optim.max_steps {
                    if self.progress.step >= cap {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
                let lo = b * batch_size;
                let hi = (lo + batch_size).min(n_train);
                let stats = self.run_batch(&order[lo..hi])?;
                self.accum.fold(&stats);
                self.progress.step += 1;
            }

            self.progress.epoch += 1;
            let done = self.progress.epoch;
            if done % self.cfg.optim.eval_every as u64 == 0 || done == epochs {
                let report = self.evaluate()?;
                let row = self.metrics_row(&report);
                writeln!(metrics_file, "{}", row.to_csv())?;
                metrics_file.flush()?;
                rows.push(row);
                last_eval = Some(report);
            }
            self.accum = EpochAccum::default();
        }

        // A zero-epoch run still reports where the untrained model stands.
        if rows.is_empty() && !stopped_early {
            let report = self.evaluate()?;
            let row = self.metrics_row(&report);
            writeln!(metrics_file, "{}", row.to_csv())?;
            metrics_file.flush()?;
            rows.push(row);
            last_eval = Some(report);
        }

        save_checkpoint(&checkpoint_path, &self.snapshot())?;
        Ok(TrainOutcome {
            rows,
            last_eval,
            progress: self.progress,
            stopped_early,
            metrics_path,
            checkpoint_path,
        })
    }

    /// One optimizer step over the given training-pair indices: encode both
    /// branches of every pair on a single tape, form the matching loss plus
    /// weighted balance penalties, backpropagate, and apply Adam.
    fn run_batch(&mut self, pair_indices: &[usize]) -> Result<BatchStats> {
        let d = self.cfg.backbone.d_model;
        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape, true)?;
        let mut image_routing = BranchRouting::new();
        let mut text_routing = BranchRouting::new();
        let mut ids = Vec::with_capacity(pair_indices.len());
        let mut image_rows: Option<TensorId> = None;
        let mut text_rows: Option<TensorId> = None;
        for &i in pair_indices {
            let pair = &self.dataset.train[i];
            ids.push(pair.identity);
            let img = self.model.encode_image(&mut tape, &binding, &pair.image)?;
            for (l, o) in img.routing.iter().enumerate() {
                image_routing.record(&mut tape, l, o)?;
            }
            let img_row = tape.reshape(img.feature, &[1, d])?;
            image_rows = Some(match image_rows {
                None => img_row,
                Some(acc) => tape.concat_rows(acc, img_row)?,
            });
            let txt = self.model.encode_text(&mut tape, &binding, &pair.token_ids)?;
            for (l, o) in txt.routing.iter().enumerate() {
                text_routing.record(&mut tape, l, o)?;
            }
            let txt_row = tape.reshape(txt.feature, &[1, d])?;
            text_rows = Some(match text_rows {
                None => txt_row,
                Some(acc) => tape.concat_rows(acc, txt_row)?,
            });
        }
        let v = image_rows.ok_or(Error::InvalidArgument {
            op: "run_batch",
            msg: "empty batch".into(),
        })?;
        let t = text_rows.expect("image and text rows fill together");

        let q = match_distribution(&ids)?;
        let sdm = sdm_bidirectional(&mut tape, v, t, &q, &self.cfg.loss.sdm())?;
        let lb_image = image_routing.balance_loss(&mut tape)?;
        let lb_text = text_routing.balance_loss(&mut tape)?;
        let loss = total_loss(&mut tape, sdm, lb_image, lb_text, self.cfg.loss.alpha)?;
        let total = tape.value(loss);
        if !total.is_finite() {
            if let Some((node, op)) = tape.first_non_finite() {
                return Err(Error::NonFinite { op, node });
            }
            return Err(Error::NonFinite {
                op: "total_loss",
                node: loss,
            });
        }

        let stats = BatchStats {
            total,
            sdm: tape.value(sdm),
            lb_image: lb_image.map_or(0.0, |n| tape.value(n)),
            lb_text: lb_text.map_or(0.0, |n| tape.value(n)),
            entropy_image: image_routing.usage_entropy(&tape),
            entropy_text: text_routing.usage_entropy(&tape),
        };

        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = self
            .adam
            .trainable()
            .iter()
            .map(|&pid| tape.grad(binding.id(pid)).map(|g| g.to_vec()))
            .collect();
        self.adam.apply(&mut self.model.store, &grads)?;
        if self.cfg.precision == 32 {
            round_trainable_to_f32(&mut self.model.store);
        }
        Ok(stats)
    }

    /// Retrieval over the held-out split: captions query a gallery of
    /// images.
    pub fn evaluate(&self) -> Result<RetrievalReport> {
        evaluate_model(&self.model, &self.dataset.test, self.cfg.seed)
    }

    fn metrics_row(&self, report: &RetrievalReport) -> MetricsRow {
        let a = &self.accum;
        MetricsRow {
            epoch: self.progress.epoch,
            step: self.progress.step,
            loss_total: a.mean(a.total),
            loss_sdm: a.mean(a.sdm),
            loss_lb_image: a.mean(a.lb_image),
            loss_lb_text: a.mean(a.lb_text),
            rank1: report.rank1,
            rank5: report.rank5,
            rank10: report.rank10,
            map: report.map,
            expert_usage_entropy_image: a.mean(a.entropy_image),
            expert_usage_entropy_text: a.mean(a.entropy_text),
        }
    }
}

/// Overwrite the store's trainable parameters from checkpoint blocks,
/// matching by name and validating shapes. Every trainable parameter must
/// be covered exactly once.
pub fn restore_trainable(store: &mut ParamStore, blocks: &[TensorBlock]) -> Result<()> {
    let trainable = store.trainable_ids();
    if blocks.len() != trainable.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter blocks, model has {} trainable parameters",
            blocks.len(),
            trainable.len()
        )));
    }
    for block in blocks {
        let pid = store.id_of(&block.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter `{}` not in model", block.name))
        })?;
        let p = store.get_mut(pid);
        if !p.trainable {
            return Err(Error::Checkpoint(format!(
                "checkpoint parameter `{}` is frozen in the model",
                block.name
            )));
        }
        if p.shape != block.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                block.name, block.shape, p.shape
            )));
        }
        p.data = block.data.clone();
    }
    Ok(())
}

/// Train from scratch per the config, writing artifacts under `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::new(cfg)?.run(out_dir)
}

/// Continue a checkpointed run. `max_steps` replaces the checkpointed cap
/// (`None` lifts it), so a run stopped by a cap can be driven to
/// completion.
pub fn resume(ckpt: Checkpoint, out_dir: &Path, max_steps: Option<u64>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    trainer.cfg.optim.max_steps = max_steps;
    trainer.run(out_dir)
}

/// Encode a pair list with the current weights (no gradients) and score
/// caption-queries against the image gallery by inner product; features are
/// unit-norm so this is cosine similarity.
pub fn evaluate_model(
    model: &DualEncoder,
    pairs: &[SyntheticPair],
    seed: u64,
) -> Result<RetrievalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate_model",
            msg: "no pairs to evaluate".into(),
        });
    }
    let d = model.cfg.d_model;
    let n = pairs.len();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false)?;
    let mut gallery = Vec::with_capacity(n * d);
    let mut queries = Vec::with_capacity(n * d);
    let mut ids = Vec::with_capacity(n);
    for pair in pairs {
        let img = model.encode_image(&mut tape, &binding, &pair.image)?;
        gallery.extend_from_slice(tape.data(img.feature));
        let txt = model.encode_text(&mut tape, &binding, &pair.token_ids)?;
        queries.extend_from_slice(tape.data(txt.feature));
        ids.push(pair.identity);
    }
    let mut sim = vec![0.0; n * n];
    for qi in 0..n {
        for gi in 0..n {
            let mut dot = 0.0;
            for k in 0..d {
                dot += queries[qi * d + k] * gallery[gi * d + k];
            }
            sim[qi * n + gi] = dot;
        }
    }
    RetrievalReport::from_similarity(&sim, &ids, &ids, seed)
}
