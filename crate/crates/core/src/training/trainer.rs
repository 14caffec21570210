//! The training loop: per-sample forward/backward with denoising queries,
//! batch gradient averaging, clipping, AdamW and metric records.

use std::path::Path;

use efh_numcore::{seeded_rng, Error as TensorError, Rng, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::model::{Detector, ForwardOutput};
use crate::params::Session;
use crate::training::denoise::make_dn_queries;
use crate::training::eval::{evaluate_ap, ApReport};
use crate::training::loss::{compute_loss, LossBreakdown, LossOutput};
use crate::training::optim::{clip_grad_norm, scheduled_lr, AdamW};
use crate::training::synth::generate_synthetic_scene;
use crate::training::tasks::{convert_task, RawAnnotation, RawObject, TaskSample, OD_TEMPLATES};
use crate::training::GroundTruth;

/// A decoded image with its sample and ground truth.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub image: Image<T>,
    pub sample: TaskSample,
    pub gt: GroundTruth,
}

impl<T: Scalar> Example<T> {
    pub fn new(image: Image<T>, sample: TaskSample) -> Result<Self> {
        sample.validate()?;
        let gt = sample.ground_truth()?;
        Ok(Self { image, sample, gt })
    }

    /// Loads every sample of a JSON-lines file; image paths are resolved
    /// relative to the file's directory.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        crate::training::tasks::read_jsonl(path)?
            .into_iter()
            .map(|s| {
                let image = Image::load(dir.join(&s.image))?;
                Self::new(image, s)
            })
            .collect()
    }
}

/// Synthetic scene `seed` as an OD sample over the full shape vocabulary.
pub fn synthetic_example<T: Scalar>(seed: u64, canvas: usize, max_prompt_len: usize) -> Result<Example<T>> {
    let scene = generate_synthetic_scene::<T>(seed, canvas)?;
    let raw = RawAnnotation {
        image: scene.gt.image.clone(),
        objects: scene
            .gt
            .boxes
            .iter()
            .zip(&scene.gt.labels)
            .map(|(b, &l)| RawObject {
                name: scene.labels[l].clone(),
                bbox: *b,
            })
            .collect(),
        vocabulary: scene.labels.clone(),
        ..Default::default()
    };
    let mut rng = seeded_rng(seed ^ 0x7a5c_0000_0000_0001);
    let sample = convert_task(&raw, "od", OD_TEMPLATES, &mut rng, max_prompt_len)?;
    Example::new(scene.image, sample)
}

/// Worker count for data generation: `EFH_THREADS` if set and positive,
/// else the available parallelism.
pub fn data_threads() -> usize {
    std::env::var("EFH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Generates scenes for `seeds` on up to `threads` workers. The output
/// order and content do not depend on the thread count.
pub fn synthetic_examples<T: Scalar>(
    seeds: &[u64],
    canvas: usize,
    max_prompt_len: usize,
    threads: usize,
) -> Result<Vec<Example<T>>> {
    let threads = threads.clamp(1, seeds.len().max(1));
    let chunk = seeds.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| synthetic_example::<T>(s, canvas, max_prompt_len))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("data worker panicked")?);
        }
        Ok(out)
    })
}

/// Training forward pass of one example with freshly drawn denoising
/// queries; returns the outputs and the number of dn groups.
pub fn example_forward<T: Scalar>(
    model: &Detector<T>,
    s: &mut Session<T>,
    ex: &Example<T>,
    rng: &mut Rng,
) -> Result<(ForwardOutput<T>, usize)> {
    let (labels, prompt) = model.text_vars(s, &ex.sample.labels, &ex.sample.prompt)?;
    let dn = make_dn_queries::<T>(&ex.gt, &model.cfg.dn, ex.sample.labels.len(), rng);
    let out = model.forward(s, &ex.image, labels, prompt, Some(&dn))?;
    Ok((out, dn.groups))
}

/// Training forward pass and loss of one example.
pub fn example_loss<T: Scalar>(
    model: &Detector<T>,
    s: &mut Session<T>,
    ex: &Example<T>,
    rng: &mut Rng,
) -> Result<LossOutput> {
    let (out, groups) = example_forward(model, s, ex, rng)?;
    compute_loss(s, &out, &ex.gt, groups, &model.cfg.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub terms: LossBreakdown,
    pub grad_norm: f64,
}

fn non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite(op)) => Error::NonFiniteLoss {
            step,
            detail: format!("{op} produced a non-finite value"),
        },
        other => other,
    }
}

pub struct Trainer<T: Scalar> {
    pub model: Detector<T>,
    pub opt: AdamW<T>,
    pub total_steps: usize,
    step: usize,
    rng: Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Detector<T>, total_steps: usize) -> Self {
        let opt = AdamW::new(&model.store, model.cfg.train);
        let rng = seeded_rng(model.cfg.seed.wrapping_add(0x5eed));
        Self {
            model,
            opt,
            total_steps,
            step: 0,
            rng,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One optimizer update over `batch`, gradients averaged per sample.
    /// A non-finite loss aborts before any parameter changes.
    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let step = self.step;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.store.len()];
        let mut terms = LossBreakdown::default();
        for ex in batch {
            let mut s = Session::training(&self.model.store);
            let out = example_loss(&self.model, &mut s, ex, &mut self.rng).map_err(|e| non_finite(step, e))?;
            let value = s.value(out.total).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss {value} on {}", ex.sample.image),
                });
            }
            terms.add(&out.breakdown.scaled(scale));
            let g = s.param_grads(out.total).map_err(|e| non_finite(step, e.into()))?;
            for (acc, gi) in grads.iter_mut().zip(g) {
                let Some(mut gi) = gi else { continue };
                if batch.len() > 1 {
                    let c = T::c(scale);
                    gi.data_mut().iter_mut().for_each(|v| *v = *v * c);
                }
                match acc {
                    Some(a) => a.add_assign(&gi),
                    None => *acc = Some(gi),
                }
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.model.cfg.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        let lr = scheduled_lr(self.model.cfg.train.learning_rate, step, self.total_steps);
        self.opt.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss: terms.total(),
            terms,
            grad_norm,
        })
    }

    /// Runs the remaining steps over `data` in shuffled epochs, calling
    /// `log` after each step.
    pub fn run(&mut self, data: &[Example<T>], mut log: impl FnMut(&StepRecord)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::arg("no training data"));
        }
        let bs = self.model.cfg.train.batch_size;
        let mut order: Vec<usize> = Vec::new();
        while self.step < self.total_steps {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut self.rng);
                }
                batch.push(&data[order.pop().expect("refilled")]);
            }
            let rec = self.step(&batch)?;
            log(&rec);
        }
        Ok(())
    }
}

/// AP@`threshold` of `model` over `data`, without a language cache.
pub fn evaluate<T: Scalar>(model: &Detector<T>, data: &[Example<T>], threshold: f64) -> Result<ApReport> {
    let mut dets = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    let num_labels = data.iter().map(|e| e.sample.labels.len()).max().unwrap_or(0);
    for ex in data {
        let set = model.detect(&ex.image, &ex.sample.image, &ex.sample.labels, &ex.sample.prompt, None)?;
        dets.push(set.detections);
        gts.push(ex.gt.clone());
    }
    Ok(evaluate_ap(&dets, &gts, num_labels, threshold))
}
