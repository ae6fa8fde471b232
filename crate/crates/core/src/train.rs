//! Optimization loop, learning-rate schedule and augmentation.

use std::f64::consts::FRAC_PI_4;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::boxes::Box7;
use crate::config::TrainConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::kitti::{Point, Scene};
use crate::layers::{apply_bn_records, Mode, BN_MOMENTUM};
use crate::loss::LossBreakdown;
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;

/// Step-decay schedule: `base` until `start`, then times 0.1 every `every`
/// epochs, at most `count` times.
pub fn lr_schedule_with(epoch: usize, base: f64, start: usize, every: usize, count: usize) -> f64 {
    if epoch < start {
        return base;
    }
    let decays = (1 + (epoch - start) / every.max(1)).min(count);
    base * 0.1f64.powi(decays as i32)
}

/// The default schedule: 1e-3, decayed at epochs 140, 160 and 180.
pub fn lr_schedule(epoch: usize) -> f64 {
    lr_schedule_with(epoch, 1e-3, 140, 20, 3)
}

/// A concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub rotation: f64,
    pub scale: f64,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        rotation: 0.0,
        scale: 1.0,
        flip: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            rotation: rng.random_range(-FRAC_PI_4..FRAC_PI_4),
            scale: rng.random_range(0.95..1.05),
            flip: rng.random_bool(0.5),
        }
    }

    fn point(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let y = if self.flip { -y } else { y };
        let (s, c) = self.rotation.sin_cos();
        [self.scale * (c * x - s * y), self.scale * (s * x + c * y), self.scale * z]
    }

    /// Applies flip, then rotation about z, then isotropic scaling.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for p in &mut out.points {
            let [x, y, z] = self.point(p.x, p.y, p.z);
            *p = Point { x, y, z, ..*p };
        }
        for l in &mut out.labels {
            let b = l.bbox;
            if !b.is_valid() {
                continue;
            }
            let [x, y, z] = self.point(b.x, b.y, b.z);
            let theta = if self.flip { -b.theta } else { b.theta } + self.rotation;
            l.bbox = Box7::new(x, y, z, b.l * self.scale, b.w * self.scale, b.h * self.scale, theta);
        }
        out
    }
}

/// Randomly rotated, scaled and flipped copy of `scene`.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    Augmentation::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(scene)
}

/// Optimizer state plus the model being trained.
pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: usize,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:e}",
            self.step, self.loss.cls_loss, self.loss.reg_loss, self.loss.total, self.lr
        )
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, config.detector()?, config.seed)?;
        let adam = AdamState::new(&store, config.learning_rate);
        Ok(Self {
            config,
            detector,
            store,
            adam,
            step: 0,
        })
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let c = &self.config;
        lr_schedule_with(epoch, c.learning_rate, c.decay_start_epoch, c.decay_every, c.decay_count)
    }

    /// One optimizer step on a batch. Scenes are processed on separate
    /// tapes (in parallel when `threads > 1`) and gradients are averaged.
    pub fn train_step(&mut self, batch: &[Scene], lr: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let threads = self.config.threads.max(1).min(batch.len());
        let detector = &self.detector;
        let store = &self.store;
        let run = |scene: &Scene| -> Result<(LossBreakdown, crate::autograd::Gradients, Vec<crate::autograd::BnRecord>)> {
            let mut g = Graph::new();
            let loss = detector.scene_loss(&mut g, store, scene, Mode::Train)?;
            let b = loss.breakdown(&g);
            if !b.total.is_finite() {
                return Err(Error::NanLoss { scene: scene.id.clone() });
            }
            let grads = g.backward(loss.total)?;
            Ok((b, grads, g.bn_records().to_vec()))
        };
        let results: Vec<Result<_>> = if threads > 1 {
            std::thread::scope(|s| {
                let chunks: Vec<_> = batch
                    .chunks(batch.len().div_ceil(threads))
                    .map(|chunk| s.spawn(move || chunk.iter().map(run).collect::<Vec<_>>()))
                    .collect();
                chunks
                    .into_iter()
                    .flat_map(|h| h.join().expect("training worker panicked"))
                    .collect()
            })
        } else {
            batch.iter().map(run).collect()
        };

        self.store.zero_grad();
        let mut sum = LossBreakdown::default();
        let mut records = Vec::new();
        for r in results {
            let (b, grads, bn) = r?;
            self.store.accumulate(&grads);
            records.extend(bn);
            sum.cls_loss += b.cls_loss;
            sum.reg_loss += b.reg_loss;
            sum.total += b.total;
            sum.n_pos += b.n_pos;
            sum.n_neg += b.n_neg;
        }
        let n = batch.len() as f64;
        self.store.scale_grads(1.0 / n);
        self.adam.learning_rate = lr;
        adam_step(&mut self.store, &mut self.adam)?;
        apply_bn_records(&mut self.store, &records, BN_MOMENTUM);
        self.step += 1;
        Ok(LossBreakdown {
            cls_loss: sum.cls_loss / n,
            reg_loss: sum.reg_loss / n,
            total: sum.total / n,
            ..sum
        })
    }

    /// Re-estimates BatchNorm running statistics as the plain average of
    /// per-scene batch statistics under the current weights.
    pub fn recalibrate_bn(&mut self, scenes: &[Scene]) -> Result<()> {
        for (i, scene) in scenes.iter().enumerate() {
            let mut g = Graph::new();
            self.detector.forward(&mut g, &self.store, &scene.points, Mode::Train)?;
            apply_bn_records(&mut self.store, g.bn_records(), 1.0 / (i + 1) as f64);
        }
        Ok(())
    }

    /// Runs the configured schedule over `scenes`, writing one TSV line per
    /// step to `log` when given. Returns the per-step records.
    pub fn fit(&mut self, scenes: &[Scene], mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        if scenes.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let bs = self.config.batch_size.min(scenes.len());
        let steps_per_epoch = scenes.len().div_ceil(bs);
        let max_steps = self.config.max_steps.unwrap_or(usize::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut history = Vec::new();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        'epochs: for epoch in 0.. {
            if epoch >= self.config.epochs && self.config.max_steps.is_none() {
                break;
            }
            let lr = self.learning_rate(epoch);
            shuffle(&mut order, &mut rng);
            for s in 0..steps_per_epoch {
                if history.len() >= max_steps {
                    break 'epochs;
                }
                let batch: Vec<Scene> = order[s * bs..((s + 1) * bs).min(order.len())]
                    .iter()
                    .map(|&i| {
                        if self.config.augment {
                            augment(&scenes[i], rng.random())
                        } else {
                            scenes[i].clone()
                        }
                    })
                    .collect();
                let loss = self.train_step(&batch, lr)?;
                let rec = StepRecord {
                    step: self.step,
                    loss,
                    lr,
                };
                log::info!("{}", rec.tsv());
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", rec.tsv()).map_err(|e| Error::io("metrics log", e))?;
                }
                history.push(rec);
            }
        }
        if self.config.recalibrate_bn {
            self.recalibrate_bn(scenes)?;
        }
        Ok(history)
    }
}

fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
