//! The paired-domain optimization loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::adaptation::{
    consistency_loss, instance_loss, multi_level_loss, AdaptationBranches,
};
use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{self, Record};
use crate::data::{
    horizontal_flip, horizontal_flip_unlabeled, Dataset, Domain, Scene, Split, UnlabeledScene,
};
use crate::detector::{
    anchor_grid, detection_loss, propose, Detector, Proposal, POST_NMS_TOP, PRE_NMS_TOP,
    PROPOSAL_NMS_IOU, ROI_POOL_SIZE, ROI_STRIDE,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, BoundParams, ParamStore};
use crate::rng::{self, stream};

/// Global-norm gradient clip; reversal gradients can spike early in training.
pub const GRAD_CLIP_NORM: f64 = 10.0;

const ROLE_FLIP_SOURCE: u64 = 0;
const ROLE_FLIP_TARGET: u64 = 1;
const ROLE_SAMPLING: u64 = 2;

/// Per-iteration loss components. `total` is combined in f64 from the
/// components, so the accounting identity holds to f64 precision.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub multi: f64,
    pub ins: f64,
    pub cst: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, lambda: f64) -> f64 {
        self.det + lambda * (self.multi + self.ins + self.cst)
    }

    pub fn is_finite(&self) -> bool {
        [self.det, self.multi, self.ins, self.cst, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IterationLog {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Trainer state: model, optimizer buffers, and the next (epoch, iteration)
/// to execute. All randomness derives from (config.seed, epoch, iteration,
/// role), so a trainer restored from disk continues bit-identically.
pub struct Trainer {
    config: TrainConfig,
    store: ParamStore<f32>,
    detector: Detector,
    adaptation: AdaptationBranches,
    epoch: usize,
    iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut store = ParamStore::new();
        let detector = Detector::register(&mut store, rng::derive(config.seed, &[stream::DETECTOR_INIT]));
        let adaptation = AdaptationBranches::register(
            &mut store,
            config.n_classifiers,
            rng::derive(config.seed, &[stream::ADAPTATION_INIT]),
        )?;
        Ok(Trainer {
            config,
            store,
            detector,
            adaptation,
            epoch: 0,
            iter: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn adaptation(&self) -> &AdaptationBranches {
        &self.adaptation
    }

    pub fn position(&self) -> (usize, usize) {
        (self.epoch, self.iter)
    }

    fn aug_seed(&self) -> u64 {
        rng::derive(self.config.seed, &[stream::AUGMENT])
    }

    /// One optimization step on a (source, target) pair. The target scene is
    /// unlabeled by type; with lambda = 0 it is not needed at all and no
    /// adaptation computation runs.
    pub fn train_step(
        &mut self,
        source: &Scene,
        target: Option<&UnlabeledScene>,
        epoch: usize,
        iter: usize,
    ) -> Result<LossBreakdown> {
        if source.domain.is_target() {
            return Err(Error::AnnotationLeak(
                "train_step received a target-domain scene as the labeled source".into(),
            ));
        }
        let lambda = self.config.lambda;
        let aug = self.aug_seed();

        let flip_source = rng::rng(rng::derive(aug, &[epoch as u64, iter as u64, ROLE_FLIP_SOURCE]))
            .gen::<f64>()
            < self.config.flip_prob;
        let source = if flip_source {
            horizontal_flip(source)
        } else {
            source.clone()
        };

        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let mut sample_rng =
            rng::rng(rng::derive(aug, &[epoch as u64, iter as u64, ROLE_SAMPLING]));

        // ── source image: detection + adaptation ──
        let src_image = source.image.to_tensor();
        let pyramid = self.detector.backbone.forward(&mut tape, &params, &src_image)?;
        let rpn_out = self.detector.rpn.forward(&mut tape, &params, pyramid.final_level())?;
        let proposals = proposals_from(&rpn_out.logits, &rpn_out.deltas);
        let det = detection_loss(
            &mut tape,
            &params,
            &self.detector.head,
            &rpn_out,
            pyramid.final_level(),
            &proposals,
            source.domain,
            &source.annotations,
            &mut sample_rng,
        )?;

        let mut seeds: Vec<(&Tensor<f32>, f32)> = Vec::with_capacity(4);
        let mut breakdown = LossBreakdown {
            det: f64::from(det.total.item()),
            ..Default::default()
        };

        let adaptation_scalars = if lambda > 0.0 {
            let target = target.ok_or_else(|| {
                Error::invalid("train_step: lambda > 0 requires a target scene")
            })?;
            let flip_target = rng::rng(rng::derive(
                aug,
                &[epoch as u64, iter as u64, ROLE_FLIP_TARGET],
            ))
            .gen::<f64>()
                < self.config.flip_prob;
            let target = if flip_target {
                horizontal_flip_unlabeled(target)
            } else {
                target.clone()
            };

            // source-side adaptation terms
            let maps_src = self.adaptation.patch_maps(&mut tape, &params, &pyramid)?;
            let multi_src = multi_level_loss(&mut tape, &maps_src, Domain::Source)?;
            let probs_src =
                self.instance_probs(&mut tape, &params, pyramid.final_level(), &proposals)?;
            let ins_src = instance_loss(&mut tape, &probs_src, Domain::Source)?;
            let final_map_src = maps_src.last().expect("final level always placed");
            let cst_src = consistency_loss(&mut tape, final_map_src, &probs_src)?;

            // target image: adaptation only; its annotations were never loaded
            let tgt_image = target.image.to_tensor();
            let tgt_pyramid = self.detector.backbone.forward(&mut tape, &params, &tgt_image)?;
            let tgt_rpn = self.detector.rpn.forward(&mut tape, &params, tgt_pyramid.final_level())?;
            let tgt_proposals = proposals_from(&tgt_rpn.logits, &tgt_rpn.deltas);
            let maps_tgt = self.adaptation.patch_maps(&mut tape, &params, &tgt_pyramid)?;
            let multi_tgt = multi_level_loss(&mut tape, &maps_tgt, Domain::Target)?;
            let probs_tgt =
                self.instance_probs(&mut tape, &params, tgt_pyramid.final_level(), &tgt_proposals)?;
            let ins_tgt = instance_loss(&mut tape, &probs_tgt, Domain::Target)?;
            let final_map_tgt = maps_tgt.last().expect("final level always placed");
            let cst_tgt = consistency_loss(&mut tape, final_map_tgt, &probs_tgt)?;

            // average the two images' terms so lambda stays pair-size free
            let half = 0.5f32;
            let multi = {
                let s = tape.add(&multi_src, &multi_tgt)?;
                tape.scale(&s, half)
            };
            let ins = {
                let s = tape.add(&ins_src, &ins_tgt)?;
                tape.scale(&s, half)
            };
            let cst = {
                let s = tape.add(&cst_src, &cst_tgt)?;
                tape.scale(&s, half)
            };
            breakdown.multi = f64::from(multi.item());
            breakdown.ins = f64::from(ins.item());
            breakdown.cst = f64::from(cst.item());
            Some((multi, ins, cst))
        } else {
            None
        };

        breakdown.total = breakdown.recompose(lambda);

        seeds.push((&det.total, 1.0));
        if let Some((multi, ins, cst)) = &adaptation_scalars {
            let l = lambda as f32;
            seeds.push((multi, l));
            seeds.push((ins, l));
            seeds.push((cst, l));
        }
        let node_ids = params.node_ids();
        let mut grads = tape.backward_seeded(&seeds)?;
        drop(tape);
        clip_global_norm(&mut grads, &node_ids, GRAD_CLIP_NORM);
        let lr = self.config.lr_for_epoch(epoch);
        self.store.sgd_step(
            &node_ids,
            &grads,
            lr as f32,
            self.config.momentum as f32,
            self.config.weight_decay as f32,
        )?;
        Ok(breakdown)
    }

    fn instance_probs(
        &self,
        tape: &mut Tape<f32>,
        params: &BoundParams<'_, f32>,
        final_level: &Tensor<f32>,
        proposals: &[Proposal],
    ) -> Result<Vec<Tensor<f32>>> {
        proposals
            .iter()
            .map(|p| {
                let pooled = tape.roi_pool(final_level, p.rect.as_roi(), ROI_STRIDE, ROI_POOL_SIZE)?;
                self.adaptation.instance.forward(tape, params, &pooled)
            })
            .collect()
    }

    /// Run (or continue) the full schedule, invoking `sink` after every
    /// iteration. An epoch is one pass over the smaller of the two train
    /// splits, pairing scenes by independent per-epoch shuffles.
    pub fn run(&mut self, dataset: &Dataset, mut sink: impl FnMut(&IterationLog)) -> Result<()> {
        let n_src = dataset.len(Split::SourceTrain);
        let n_tgt = dataset.len(Split::TargetTrain);
        if n_src == 0 || n_tgt == 0 {
            return Err(Error::Dataset("train splits must be non-empty".into()));
        }
        dataset
            .load_train_source(0)
            .map_err(|e| Error::Dataset(format!("dataset unreadable before first step: {e}")))?;
        let iters = n_src.min(n_tgt);
        let data_seed = rng::derive(self.config.seed, &[stream::DATA_ORDER]);
        let total_epochs = self.config.total_epochs();
        while self.epoch < total_epochs {
            let epoch = self.epoch;
            let src_order = shuffled(n_src, rng::derive(data_seed, &[epoch as u64, 0]));
            let tgt_order = shuffled(n_tgt, rng::derive(data_seed, &[epoch as u64, 1]));
            while self.iter < iters {
                let iter = self.iter;
                let source = dataset.load_train_source(src_order[iter])?;
                let target = if self.config.lambda > 0.0 {
                    Some(dataset.load_train_target(tgt_order[iter])?)
                } else {
                    None
                };
                let losses = self.train_step(&source, target.as_ref(), epoch, iter)?;
                sink(&IterationLog {
                    epoch,
                    iter,
                    lr: self.config.lr_for_epoch(epoch),
                    losses,
                });
                self.iter += 1;
            }
            self.iter = 0;
            self.epoch += 1;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(&self.store, path)
    }

    /// Serialize the full training state (parameters, momentum buffers, and
    /// position) so a resumed run reproduces the uninterrupted one.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save_store(&self.store, &dir.join("params.mlda"))?;
        let velocity_records: Vec<Record> = self
            .store
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.velocity.clone(),
            })
            .collect();
        checkpoint::save_records(&velocity_records, &dir.join("velocity.mlda"))?;
        let state = StateFile {
            epoch: self.epoch,
            iter: self.iter,
            config: self.config.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    pub fn load_state(dir: &Path) -> Result<Trainer> {
        let text = fs::read_to_string(dir.join("state.json"))?;
        let state: StateFile = serde_json::from_str(&text)?;
        let mut trainer = Trainer::new(state.config)?;
        checkpoint::load_into_store_requiring_all(&mut trainer.store, &dir.join("params.mlda"))?;
        let velocities = checkpoint::load_records(&dir.join("velocity.mlda"))?;
        for rec in velocities {
            let id = trainer.store.id_of(&rec.name).ok_or_else(|| {
                Error::Checkpoint(format!("velocity for unknown parameter {:?}", rec.name))
            })?;
            let p = trainer.store.get_mut(id);
            if p.velocity.len() != rec.values.len() {
                return Err(Error::Checkpoint(format!(
                    "velocity of {:?} has {} values, expected {}",
                    rec.name,
                    rec.values.len(),
                    p.velocity.len()
                )));
            }
            p.velocity = rec.values;
        }
        trainer.epoch = state.epoch;
        trainer.iter = state.iter;
        Ok(trainer)
    }

    /// Mean final-level patch-classifier BCE over probe scenes: how well the
    /// classifier still separates domains at the current parameters.
    pub fn probe_final_level_bce(&self, probes: &[(crate::data::Image, Domain)]) -> Result<f64> {
        let final_classifier = self
            .adaptation
            .patch
            .last()
            .expect("final level always placed");
        let mut total = 0.0;
        for (image, domain) in probes {
            let mut tape = Tape::inference();
            let params = self.store.bind_frozen();
            let pyramid = self
                .detector
                .backbone
                .forward(&mut tape, &params, &image.to_tensor())?;
            let map = final_classifier.forward(&mut tape, &params, pyramid.level(final_classifier.level))?;
            let bce = crate::nn::bce_with_constant_label(&mut tape, &map, domain.is_target())?;
            total += f64::from(tape.mean(&bce).item());
        }
        Ok(total / probes.len().max(1) as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    iter: usize,
    config: TrainConfig,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    order
}

fn proposals_from(logits: &Tensor<f32>, deltas: &Tensor<f32>) -> Vec<Proposal> {
    let l: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
    let d: Vec<f64> = deltas.data().iter().map(|&v| f64::from(v)).collect();
    propose(&l, &d, &anchor_grid(), PRE_NMS_TOP, PROPOSAL_NMS_IOU, POST_NMS_TOP)
}

// ── Whole-run driver ─────────────────────────────────────────────────

/// Artifacts of a completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epoch_means: Vec<LossBreakdown>,
    pub iterations: usize,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,iter,L_det,L_multi,L_ins,L_cst,L,lr";

/// Train to completion, writing `metrics.csv` (one row per iteration) and
/// the final-epoch `checkpoint.mlda` into `out_dir`.
pub fn run_training(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    let started = std::time::Instant::now();
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(config.clone())?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(csv, "{METRICS_HEADER}")?;

    let total_epochs = config.total_epochs();
    let mut epoch_sums: Vec<(LossBreakdown, usize)> = vec![(LossBreakdown::default(), 0); total_epochs];
    let mut iterations = 0usize;
    let mut io_error: Option<std::io::Error> = None;
    trainer.run(dataset, |log| {
        let l = &log.losses;
        if let Err(e) = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            log.epoch, log.iter, l.det, l.multi, l.ins, l.cst, l.total, log.lr
        ) {
            io_error.get_or_insert(e);
        }
        let slot = &mut epoch_sums[log.epoch];
        slot.0.det += l.det;
        slot.0.multi += l.multi;
        slot.0.ins += l.ins;
        slot.0.cst += l.cst;
        slot.0.total += l.total;
        slot.1 += 1;
        iterations += 1;
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    csv.flush()?;

    let epoch_means: Vec<LossBreakdown> = epoch_sums
        .iter()
        .map(|(sum, count)| {
            let n = (*count).max(1) as f64;
            LossBreakdown {
                det: sum.det / n,
                multi: sum.multi / n,
                ins: sum.ins / n,
                cst: sum.cst / n,
                total: sum.total / n,
            }
        })
        .collect();
    for (epoch, mean) in epoch_means.iter().enumerate() {
        log::info!(
            "epoch {epoch}: L_det {:.4} L_multi {:.4} L_ins {:.4} L_cst {:.4} L {:.4}",
            mean.det,
            mean.multi,
            mean.ins,
            mean.cst,
            mean.total
        );
    }

    let checkpoint_path = out_dir.join("checkpoint.mlda");
    trainer.save_checkpoint(&checkpoint_path)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(RunSummary {
        checkpoint: checkpoint_path,
        metrics_csv: metrics_path,
        epoch_means,
        iterations,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
