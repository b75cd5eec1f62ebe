//! SGD training loop, checkpoint conversion, model evaluation and the
//! four-variant ablation runner.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign_targets, AssignMode, BoxTargets, LevelRanges};
use crate::checkpoint::{Blob, Checkpoint, RngState};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{batch_iterator, DatasetManifest, GroundTruthBox};
use crate::decode::{DetectionSet, PostprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics, MetricsTable};
use crate::head::HeadVars;
use crate::loss::{image_loss, LevelPrediction, LossBreakdown, Normalizers};
use crate::model::{infer_image, Detector, Variant};
use crate::nn::{Gradients, ParamStore, Tape};
use crate::parallel;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.ckpt")
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, velocity: &mut [Tensor], cfg: &TrainConfig) {
    for ((entry, g), v) in store.entries_mut().iter_mut().zip(grads.tensors()).zip(velocity.iter_mut()) {
        for ((p, &gi), vi) in entry.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *p;
            *p -= cfg.lr * *vi;
        }
    }
}

/// A training image resized to the network input with its boxes.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub id: u64,
    pub pixels: Tensor,
    pub boxes: Vec<GroundTruthBox>,
    pub scale: f64,
    pub source_size: (f64, f64),
}

pub fn prepare_images(manifest: &DatasetManifest, input_size: usize) -> Result<Vec<PreparedImage>> {
    let mut out = Vec::with_capacity(manifest.images.len());
    for batch in batch_iterator(manifest, 8, input_size, None)? {
        let b = batch?;
        for i in 0..b.images.len() {
            let rec = manifest.image(b.image_ids[i]).expect("image from manifest");
            let size = input_size as f64;
            let boxes = b.boxes[i]
                .iter()
                .map(|g| GroundTruthBox {
                    bbox: g.bbox.clip(size, size),
                    ..g.clone()
                })
                .filter(|g| g.bbox.is_valid())
                .collect();
            out.push(PreparedImage {
                id: b.image_ids[i],
                pixels: b.images[i].clone(),
                boxes,
                scale: b.scales[i],
                source_size: (rec.width as f64, rec.height as f64),
            });
        }
    }
    Ok(out)
}

/// How positives are chosen and whether the regression loss sees the
/// offset-shifted box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMode {
    pub assign: AssignMode,
    pub revise_regression: bool,
}

impl LossMode {
    pub fn for_iteration(iteration: usize, cfg: &RunConfig) -> Self {
        let start = (cfg.assign.semantic_start_fraction * cfg.train.iterations as f64).floor() as usize;
        if iteration >= start {
            LossMode {
                assign: AssignMode::Semantic,
                revise_regression: true,
            }
        } else {
            LossMode {
                assign: AssignMode::Static,
                revise_regression: false,
            }
        }
    }
}

struct Forward<'p> {
    tape: Tape<'p>,
    vars: Vec<HeadVars>,
    targets: BoxTargets,
}

fn forward_and_assign<'p>(
    model: &'p Detector,
    img: &PreparedImage,
    ranges: &LevelRanges,
    mode: LossMode,
) -> Result<Forward<'p>> {
    let mut tape = Tape::new(&model.store);
    let x = tape.input(img.pixels.clone());
    let vars = model.forward(&mut tape, x)?;
    let (_, h, w) = img.pixels.chw();
    let locs = model.locations(h, w)?;
    let offsets: Vec<Tensor> = vars.iter().map(|v| tape.value(v.offsets).clone()).collect();
    let targets = assign_targets(&locs, &img.boxes, ranges, Some(&offsets), mode.assign)?;
    Ok(Forward { tape, vars, targets })
}

fn backward_one(f: &Forward, cfg: &RunConfig, norms: Normalizers, mode: LossMode) -> Result<(LossBreakdown, Gradients)> {
    let preds: Vec<LevelPrediction> = f
        .vars
        .iter()
        .map(|v| LevelPrediction {
            cls_logits: f.tape.value(v.cls_logits),
            distances: f.tape.value(v.distances),
            centerness_logit: f.tape.value(v.centerness_logit),
            offsets: f.tape.value(v.offsets),
        })
        .collect();
    let (loss, grads) = image_loss(&preds, &f.targets, &cfg.loss, norms, mode.revise_regression)?;
    let mut seeds = Vec::with_capacity(4 * grads.len());
    for (v, g) in f.vars.iter().zip(grads) {
        seeds.push((v.cls_logits, g.cls_logits));
        seeds.push((v.distances, g.distances));
        seeds.push((v.centerness_logit, g.centerness_logit));
        if mode.revise_regression {
            seeds.push((v.offsets, g.offsets));
        }
    }
    Ok((loss, f.tape.backward(seeds)))
}

fn run_maybe_parallel<T: Sync, R: Send>(items: &[T], serial: bool, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if serial {
        items.iter().map(f).collect()
    } else {
        parallel::map(items, f)
    }
}

/// Batch loss and its gradient with respect to every parameter. Positive
/// counts and centerness sums are pooled over the batch; per-image
/// gradients are summed in image order.
pub fn batch_gradients(
    model: &Detector,
    images: &[&PreparedImage],
    cfg: &RunConfig,
    ranges: &LevelRanges,
    mode: LossMode,
) -> Result<(LossBreakdown, Gradients)> {
    let serial = cfg.train.deterministic;
    let forwards: Vec<Forward> = run_maybe_parallel(images, serial, |img| forward_and_assign(model, img, ranges, mode))
        .into_iter()
        .collect::<Result<_>>()?;
    let norms = Normalizers::from_targets(forwards.iter().map(|f| &f.targets));
    let parts = run_maybe_parallel(&forwards, serial, |f| backward_one(f, cfg, norms, mode));
    let mut total = LossBreakdown::default();
    let mut grads = model.store.zeros_like();
    for p in parts {
        let (l, g) = p?;
        total.accumulate(&l);
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

/// Batch loss only (used by gradient checks).
pub fn batch_loss(
    model: &Detector,
    images: &[&PreparedImage],
    cfg: &RunConfig,
    ranges: &LevelRanges,
    mode: LossMode,
) -> Result<LossBreakdown> {
    Ok(batch_gradients(model, images, cfg, ranges, mode)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub mode: AssignMode,
    pub cls: f64,
    pub reg: f64,
    pub center: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Detector,
    pub velocity: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
    data: Vec<PreparedImage>,
    ranges: LevelRanges,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        let model = Detector::new(&cfg.model, cfg.train.seed)?;
        let velocity = model.store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Self::assemble(cfg, manifest, model, velocity, ChaCha8Rng::seed_from_u64(cfg.train.seed), 0)
    }

    fn assemble(
        cfg: &RunConfig,
        manifest: &DatasetManifest,
        model: Detector,
        velocity: Vec<Tensor>,
        rng: ChaCha8Rng,
        iteration: usize,
    ) -> Result<Self> {
        if manifest.num_classes() > model.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes but the head predicts {}",
                manifest.num_classes(),
                model.num_classes()
            )));
        }
        let data = prepare_images(manifest, cfg.train.input_size)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            ranges: cfg.assign.level_ranges(cfg.train.input_size)?,
            model,
            velocity,
            rng,
            iteration,
            data,
        })
    }

    /// Resume from a checkpoint; the run configuration comes from the
    /// checkpoint itself.
    pub fn from_checkpoint(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<Self> {
        let cfg = RunConfig::from_toml(&ckpt.config)?;
        let model = detector_from_checkpoint(ckpt)?;
        let velocity = model
            .store
            .entries()
            .iter()
            .map(|e| {
                let name = format!("momentum/{}", e.name);
                let t = ckpt
                    .blob(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.shape() != e.tensor.shape() {
                    return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Self::assemble(&cfg, manifest, model, velocity, rng, ckpt.iteration as usize)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.train.iterations
    }

    /// One SGD iteration on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LogRecord> {
        let n = self.data.len();
        let k = self.cfg.train.batch_size.min(n);
        let idx = sample(&mut self.rng, n, k).into_vec();
        let batch: Vec<&PreparedImage> = idx.iter().map(|&i| &self.data[i]).collect();
        let mode = LossMode::for_iteration(self.iteration, &self.cfg);
        let (loss, grads) = batch_gradients(&self.model, &batch, &self.cfg, &self.ranges, mode)?;
        self.iteration += 1;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
            });
        }
        sgd_step(&mut self.model.store, &grads, &mut self.velocity, &self.cfg.train);
        Ok(LogRecord {
            iteration: self.iteration,
            mode: mode.assign,
            cls: loss.cls,
            reg: loss.reg,
            center: loss.center,
            total: loss.total,
            n_pos: loss.n_pos,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut blobs: Vec<Blob> = self
            .model
            .store
            .entries()
            .iter()
            .map(|e| Blob {
                name: format!("param/{}", e.name),
                tensor: e.tensor.clone(),
            })
            .collect();
        blobs.extend(self.model.store.entries().iter().zip(&self.velocity).map(|(e, v)| Blob {
            name: format!("momentum/{}", e.name),
            tensor: v.clone(),
        }));
        Ok(Checkpoint::new(
            self.cfg.to_toml()?,
            self.iteration as u64,
            RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            blobs,
        ))
    }
}

/// Rebuild a detector from a checkpoint's configuration and parameters.
pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<Detector> {
    let cfg = RunConfig::from_toml(&ckpt.config)?;
    let mut model = Detector::new(&cfg.model, cfg.train.seed)?;
    for e in model.store.entries_mut() {
        let name = format!("param/{}", e.name);
        let t = ckpt
            .blob(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if t.shape() != e.tensor.shape() {
            return Err(Error::Format(format!(
                "{name} has shape {:?}, model expects {:?}",
                t.shape(),
                e.tensor.shape()
            )));
        }
        e.tensor = t.clone();
    }
    Ok(model)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Detector,
    pub log: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Train to `cfg.train.iterations`, optionally resuming. With an output
/// directory, appends JSON lines to the log file and writes periodic and
/// final checkpoints there.
pub fn train(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?, manifest)?,
        None => Trainer::new(cfg, manifest)?,
    };
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(LOG_FILE);
            let mut opts = OpenOptions::new();
            opts.create(true);
            if resume.is_some() {
                opts.append(true);
            } else {
                opts.write(true).truncate(true);
            }
            Some((opts.open(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let every = trainer.cfg.train.checkpoint_every;
    let log_every = trainer.cfg.train.log_every.max(1);
    let mut log = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.step()?;
        if rec.iteration % log_every == 0 || trainer.is_done() {
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        if let (Some(d), true) = (out_dir, every > 0 && rec.iteration % every == 0) {
            trainer.checkpoint()?.save(&d.join(checkpoint_name(rec.iteration)))?;
        }
        log.push(rec);
    }
    let final_checkpoint = match out_dir {
        Some(d) => {
            let p = d.join(FINAL_CHECKPOINT);
            trainer.checkpoint()?.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        final_checkpoint,
    })
}

/// Detect on every manifest image (boxes mapped back to source pixels)
/// and score against its annotations.
pub fn evaluate_model(
    model: &Detector,
    manifest: &DatasetManifest,
    input_size: usize,
    pp: &PostprocessConfig,
) -> Result<(Vec<DetectionSet>, MetricsTable)> {
    let images = prepare_images(manifest, input_size)?;
    let sets = parallel::map(&images, |img| {
        infer_image(model, img.id, &img.pixels, pp).map(|s| s.rescaled(img.scale, img.source_size.0, img.source_size.1))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let table = evaluate(&sets, manifest)?;
    Ok((sets, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub revise: bool,
    pub metrics: Metrics,
    pub train_seconds: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant, revise: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.revise == revise)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Train A, B, C and ours from the same seed and data, then evaluate each
/// with and without semantic revision. Per-variant runs go to
/// `out_dir/<variant>` when a directory is given.
pub fn run_ablation(cfg: &RunConfig, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(8);
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.model = v.apply(&cfg.model);
        let dir = out_dir.map(|d| d.join(v.name()));
        let t0 = Instant::now();
        let outcome = train(&c, manifest, dir.as_deref(), None)?;
        let secs = t0.elapsed().as_secs_f64();
        for revise in [true, false] {
            let pp = PostprocessConfig {
                revise,
                ..c.postprocess.clone()
            };
            let (_, table) = evaluate_model(&outcome.model, manifest, c.train.input_size, &pp)?;
            rows.push(AblationRow {
                variant: v,
                revise,
                metrics: table.aggregate,
                train_seconds: secs,
                param_count: outcome.model.num_params(),
            });
        }
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: wd,
            momentum: 0.9,
            ..Default::default()
        }
    }

    fn one_param(v: f64) -> (ParamStore, Vec<Tensor>) {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        (s, vec![Tensor::zeros(&[1])])
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let (mut s, mut v) = one_param(1.5);
        let g = s.zeros_like();
        sgd_step(&mut s, &g, &mut v, &cfg(0.01, 0.0));
        assert_eq!(s.entries()[0].tensor.data(), &[1.5]);
    }

    #[test]
    fn unit_gradient_step() {
        let (mut s, mut v) = one_param(1.0);
        let mut g = s.zeros_like();
        g.tensors_mut()[0].data_mut()[0] = 1.0;
        sgd_step(&mut s, &g, &mut v, &cfg(0.01, 0.0));
        assert!((s.entries()[0].tensor.data()[0] - 0.99).abs() < 1e-15);
        assert_eq!(v[0].data(), &[1.0]);
    }

    #[test]
    fn weight_decay_shrinks_monotonically() {
        let (mut s, mut v) = one_param(-2.0);
        let g = s.zeros_like();
        let mut prev = 2.0;
        for _ in 0..50 {
            sgd_step(&mut s, &g, &mut v, &cfg(0.1, 0.01));
            let m = s.entries()[0].tensor.data()[0].abs();
            assert!(m < prev);
            prev = m;
        }
    }

    #[test]
    fn semantic_phase_starts_at_fraction() {
        let mut c = RunConfig::default();
        c.train.iterations = 10;
        assert_eq!(LossMode::for_iteration(4, &c).assign, AssignMode::Static);
        assert_eq!(LossMode::for_iteration(5, &c).assign, AssignMode::Semantic);
        c.assign.semantic_start_fraction = 1.0;
        assert_eq!(LossMode::for_iteration(9, &c).assign, AssignMode::Static);
    }
}
