//! The pretraining loop and its metrics log.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;

use super::config::Config;
use super::corpus::SyntheticCorpus;
use super::model::{forward, Model};
use super::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::objectives::{LossBundle, COMPONENTS};
use crate::rng::{derive_seed, rng_from, stream};

pub const METRICS_HEADER: &str = "step\tmlm\tmvm\tlinkpred\titc\ttotal";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub bundle: LossBundle,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let b = &r.bundle;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.step, b.mlm, b.mvm, b.linkpred, b.itc, b.total);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bundle.total).collect()
    }
}

/// Example indices of step `step`: `batch` distinct examples drawn under
/// `derive_seed(seed, BATCH, step)`.
pub fn batch_indices(config: &Config, step: u64) -> Vec<usize> {
    let mut rng = rng_from(derive_seed(config.seed, stream::BATCH, step));
    sample(&mut rng, config.examples, config.batch).into_vec()
}

/// Seed for every other choice made during step `step`.
pub fn step_seed(config: &Config, step: u64) -> u64 {
    derive_seed(config.seed, stream::STEP, step)
}

/// Model, optimiser moments and the number of completed steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optim: AdamState,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &Config, corpus: &SyntheticCorpus) -> Result<Self> {
        if corpus.examples.len() != config.examples {
            return Err(Error::Config(format!(
                "corpus has {} examples, config expects {}",
                corpus.examples.len(),
                config.examples
            )));
        }
        let model = Model::init(config, &corpus.kg)?;
        let optim = AdamState::new(&model.store);
        Ok(Self { model, optim, step: 0 })
    }

    pub fn adam_config(&self) -> AdamWConfig {
        let c = &self.model.config;
        AdamWConfig {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }

    fn diverged(&self, step: u64, e: Error) -> Error {
        match e {
            Error::NonFinite(what) => Error::Diverged {
                step: step as usize,
                component: what,
                param_norms: self.model.store.norms(),
            },
            other => other,
        }
    }

    /// Runs step `self.step + 1`.
    pub fn train_step(&mut self, corpus: &SyntheticCorpus) -> Result<MetricsRow> {
        let step = self.step + 1;
        let config = &self.model.config;
        let batch = batch_indices(config, step);
        let seed = step_seed(config, step);
        let mut g = Graph::new();
        let bound = self.model.store.bind(&mut g);
        let out = forward(&mut g, &bound, &self.model, corpus, &batch, seed, None).map_err(|e| self.diverged(step, e))?;
        let grads = g.backward(out.total).map_err(|e| self.diverged(step, e))?;
        let grads = bound.grads(&grads);
        drop(g);
        let cfg = self.adam_config();
        optimizer_step(&mut self.model.store, &grads, &mut self.optim, &cfg).map_err(|e| self.diverged(step, e))?;
        self.step = step;
        Ok(MetricsRow {
            step,
            bundle: out.bundle,
        })
    }

    pub fn run(&mut self, corpus: &SyntheticCorpus, steps: usize, log: &mut MetricsLog) -> Result<()> {
        for _ in 0..steps {
            let row = self.train_step(corpus)?;
            log.rows.push(row);
        }
        Ok(())
    }
}

/// Initialises from `config` and trains for `config.steps` steps.
pub fn pretrain(config: &Config, corpus: &SyntheticCorpus) -> Result<(Trainer, MetricsLog)> {
    let mut trainer = Trainer::new(config, corpus)?;
    let mut log = MetricsLog::default();
    trainer.run(corpus, config.steps, &mut log)?;
    Ok((trainer, log))
}

/// Finite-difference check of each loss component and of the weighted total
/// on the batch of step 1, with that step's discrete choices held fixed.
pub fn gradient_check(
    model: &Model,
    corpus: &SyntheticCorpus,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let batch = batch_indices(&model.config, 1);
    let step = step_seed(&model.config, 1);
    let plan = {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        forward(&mut g, &bound, model, corpus, &batch, step, None)?.plan
    };
    let mut out = Vec::new();
    for (i, name) in COMPONENTS.iter().chain(["total"].iter()).enumerate() {
        let report = finite_difference_check(
            |g, bound| {
                let o = forward(g, bound, model, corpus, &batch, step, Some(&plan))?;
                Ok(if i < 4 { o.components[i] } else { o.total })
            },
            &model.store,
            eps,
            samples,
            derive_seed(seed, i as u64, 0),
        )?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}
