use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::model::{LossBreakdown, Model, TrainSample};
use crate::autograd::Tape;
use crate::checkpoint::{save_codebook, write_slot_usage, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{APResult, EvalSample, WeatherDetections};
use crate::nn::Adam;
use crate::scene::FogPair;

/// Index-aligned clear and foggy evaluation sets.
#[derive(Clone, Debug, Default)]
pub struct WeatherSplit {
    pub clear: Vec<EvalSample>,
    pub foggy: Vec<EvalSample>,
}

impl WeatherSplit {
    pub fn from_pairs(pairs: &[FogPair]) -> Self {
        let sample = |p: &FogPair, foggy: bool| EvalSample {
            image: if foggy { p.foggy_image.clone() } else { p.clear_image.clone() },
            annotations: p.annotations.clone(),
            calib: p.calib.clone(),
        };
        Self {
            clear: pairs.iter().map(|p| sample(p, false)).collect(),
            foggy: pairs.iter().map(|p| sample(p, true)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clear.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub od: f64,
    pub classification: f64,
    pub regression: f64,
    pub depth: f64,
    pub ckr: f64,
    pub cke: f64,
    pub wig: f64,
    pub wae: f64,
    /// Distinct slots selected in this batch.
    pub slots_used: usize,
}

impl StepLog {
    fn new(step: usize, epoch: usize, l: &LossBreakdown, slots_used: usize) -> Self {
        Self {
            step,
            epoch,
            total: l.total,
            od: l.od,
            classification: l.classification,
            regression: l.regression,
            depth: l.depth,
            ckr: l.ckr,
            cke: l.cke,
            wig: l.wig,
            wae: l.wae,
            slots_used,
        }
    }
}

/// Held-out AP after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub clear: APResult,
    pub foggy: APResult,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    epoch: usize,
    step: usize,
    weather: &'a str,
    metric: &'a str,
    difficulty: &'a str,
    threshold: f64,
    ap40: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for logs and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stops after this many optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config_hash: String,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalRecord>,
    /// Slot selections summed over the whole run.
    pub slot_usage: Vec<usize>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }
}

/// AP of `model` on both weathers at the configured IoU threshold.
pub fn evaluate_weathers(model: &Model, config: &ExperimentConfig, val: &WeatherSplit) -> Result<(WeatherDetections, APResult, APResult)> {
    let det = WeatherDetections::compute(model, &val.clear, &val.foggy)?;
    let t = &config.data.scene.difficulty;
    let iou = config.eval.iou_threshold;
    let clear = crate::eval::evaluate(&det.clear, iou, t)?;
    let foggy = crate::eval::evaluate(&det.foggy, iou, t)?;
    Ok((det, clear, foggy))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Trains a fresh model with Adam on `data`, in seeded shuffled batches.
/// Every step draws one diffusion timestep per sample uniformly from
/// `1..=T`.
pub fn train(
    config: &ExperimentConfig,
    data: &[TrainSample],
    val: Option<&WeatherSplit>,
    opts: &TrainOptions,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let fog_stages = config.ablation.use_codebook || config.ablation.use_wad;
    if fog_stages && data.iter().any(|s| s.foggy.is_none()) {
        return Err(Error::Config("codebook and diffusion stages need paired foggy images".into()));
    }
    let start = Instant::now();
    let hash = config.hash();
    let mut model = Model::new(config)?;
    let mut adam = Adam::new(&model.params, config.optim.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let schedule_len = config.diffusion.timesteps;

    let mut writers = match &opts.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let cfg_path = dir.join("config.toml");
            fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            Some((
                csv::Writer::from_path(dir.join("metrics.csv"))?,
                csv::Writer::from_path(dir.join("eval.csv"))?,
            ))
        }
        None => None,
    };

    let mut report = TrainReport {
        config_hash: hash.clone(),
        steps: Vec::new(),
        evals: Vec::new(),
        slot_usage: vec![0; if config.ablation.use_codebook { config.model.codebook_slots } else { 0 }],
        wall_seconds: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    'epochs: for epoch in 0..config.optim.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.optim.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let ts: Vec<usize> = chunk.iter().map(|_| rng.gen_range(1..=schedule_len)).collect();
            let (br, usage, grads) = {
                let tape = Tape::new();
                let p = model.params.bind(&tape);
                let (loss, br, usage) = model.batch_loss(&p, &batch, &ts, &config.optim.weights)?;
                if !br.total.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite loss at step {step}")));
                }
                let grads = model.params.collect_grads(&p, &tape.backward(loss));
                (br, usage, grads)
            };
            adam.step(&mut model.params, &grads);
            step += 1;
            for (a, b) in report.slot_usage.iter_mut().zip(&usage) {
                *a += b;
            }
            let row = StepLog::new(step, epoch, &br, usage.iter().filter(|&&u| u > 0).count());
            if let Some((w, _)) = writers.as_mut() {
                w.serialize(row)?;
            }
            report.steps.push(row);
            log::debug!("step {step} loss {:.5}", br.total);
            if let (Some(dir), true) = (&opts.out_dir, config.optim.checkpoint_every > 0) {
                if step % config.optim.checkpoint_every == 0 {
                    Checkpoint::from_store(&model.params, &hash, step as u64, model.schedule())
                        .save(&dir.join(format!("step_{step:06}.ckpt")))?;
                }
            }
        }
        let every = config.optim.eval_every;
        if let (Some(val), true) = (val, every > 0 && (epoch + 1) % every == 0) {
            let (_, clear, foggy) = evaluate_weathers(&model, config, val)?;
            if let Some((_, w)) = writers.as_mut() {
                for (weather, r) in [("clear", &clear), ("foggy", &foggy)] {
                    for (m, d, thr, ap) in r.rows() {
                        w.serialize(EvalRow {
                            epoch: epoch + 1,
                            step,
                            weather,
                            metric: m.name(),
                            difficulty: d.name(),
                            threshold: thr,
                            ap40: ap,
                        })?;
                    }
                }
                w.flush().map_err(|e| Error::io("eval.csv", e))?;
            }
            log::info!(
                "epoch {} foggy {} {} AP40 {:.4}",
                epoch + 1,
                config.eval.metric.name(),
                config.eval.difficulty.name(),
                foggy.get(config.eval.metric, config.eval.difficulty)
            );
            report.evals.push(EvalRecord {
                epoch: epoch + 1,
                step,
                clear,
                foggy,
            });
        }
        if let Some((w, _)) = writers.as_mut() {
            w.flush().map_err(|e| Error::io("metrics.csv", e))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        Checkpoint::from_store(&model.params, &hash, step as u64, model.schedule()).save(&dir.join("final.ckpt"))?;
        if let Some(cb) = model.codebook() {
            save_codebook(&dir.join("codebook.bin"), &cb)?;
            write_slot_usage(&dir.join("slot_usage.csv"), &report.slot_usage)?;
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Rebuilds a model from its config and a checkpoint written by [`train`].
pub fn load_model(config: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<Model> {
    if checkpoint.config_hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for config {}, this config hashes to {}",
            checkpoint.config_hash,
            config.hash()
        )));
    }
    let mut model = Model::new(config)?;
    checkpoint.load_into(&mut model.params)?;
    if let (Some(d), Some(s)) = (&mut model.diffusion, checkpoint.schedule()?) {
        d.schedule = s;
    }
    Ok(model)
}
