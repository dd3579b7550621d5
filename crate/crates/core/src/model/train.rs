//! Alternating adversarial training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::loss::{
    discriminator_loss, fake_term_grad, generator_adv_loss, generator_adv_loss_grad, pixel_loss_grad, real_term_grad,
    AdvSign,
};
use super::{Discriminator, Generator, DEFAULT_BASE_CHANNELS, DEFAULT_IMAGE_SIZE};
use crate::data::dataset::{Batcher, PairDataset};
use crate::error::{FdnnError, Result};
use crate::layers::Mode;
use crate::optim::{OptimState, Schedules, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPS, DEFAULT_LAMBDA};
use crate::optim::{DEFAULT_ALPHA_DECAY, DEFAULT_LAMBDA_DECAY};
use crate::seed::{derive_seed, STREAM_DISCRIMINATOR_INIT, STREAM_GENERATOR_INIT, STREAM_SHUFFLE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub lambda0: f64,
    pub lambda_decay: f64,
    pub alpha0: f64,
    pub alpha_decay: f64,
    pub beta: f64,
    pub eps: f64,
    pub seed: u64,
    pub adv_sign: AdvSign,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u32,
    /// Print a progress line every this many epochs; 0 is silent.
    pub log_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: DEFAULT_IMAGE_SIZE,
            base_channels: DEFAULT_BASE_CHANNELS,
            batch_size: 16,
            epochs: 10,
            lambda0: DEFAULT_LAMBDA,
            lambda_decay: DEFAULT_LAMBDA_DECAY,
            alpha0: DEFAULT_ALPHA,
            alpha_decay: DEFAULT_ALPHA_DECAY,
            beta: DEFAULT_BETA,
            eps: DEFAULT_EPS,
            seed: 0,
            adv_sign: AdvSign::Nonsaturating,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(FdnnError::config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(FdnnError::config("base_channels and batch_size must be positive"));
        }
        let positive = [
            ("lambda0", self.lambda0),
            ("lambda_decay", self.lambda_decay),
            ("alpha0", self.alpha0),
            ("alpha_decay", self.alpha_decay),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FdnnError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(FdnnError::config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    pub fn schedules(&self) -> Schedules {
        Schedules {
            lambda0: self.lambda0,
            lambda_decay: self.lambda_decay,
            alpha0: self.alpha0,
            alpha_decay: self.alpha_decay,
        }
    }
}

/// Losses and discriminator accuracies of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub pixel_loss: f64,
    /// Discriminator objective on (real, fake) before its update.
    pub d_loss: f64,
    /// Generator adversarial term against the updated discriminator.
    pub g_adv_loss: f64,
    pub d_real_acc: f64,
    pub d_fake_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub pixel_loss: f64,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub d_real_acc: f64,
    pub d_fake_acc: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

fn column(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn as_column(v: Vec<f64>) -> Result<Tensor> {
    let n = v.len();
    Tensor::new(vec![n, 1], v)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FdnnError::NonFinite(what.into()))
    }
}

/// One ascent step of the discriminator on real `r` and (detached) fake `r_hat`.
/// Returns the objective before the update and the real/fake accuracies.
pub fn discriminator_step(
    d: &mut Discriminator,
    r: &Tensor,
    r_hat: &Tensor,
    opt_d: &mut OptimState,
) -> Result<(f64, f64, f64)> {
    d.stack.zero_grad();
    let d_real = column(&d.forward(r)?);
    d.stack.backward(&as_column(real_term_grad(&d_real)?)?)?;
    let d_fake = column(&d.forward(r_hat)?);
    d.stack.backward(&as_column(fake_term_grad(&d_fake)?)?)?;
    let f = finite(discriminator_loss(&d_real, &d_fake)?, "discriminator loss")?;
    opt_d.ascend(&mut d.stack)?;
    let acc = |v: &[f64], real: bool| v.iter().filter(|&&p| (p > 0.5) == real).count() as f64 / v.len() as f64;
    Ok((f, acc(&d_real, true), acc(&d_fake, false)))
}

/// Adversarial term for G and its gradient with respect to `r_hat`. Leaves D's
/// parameter gradients zeroed.
pub fn generator_adv_grad(d: &mut Discriminator, r_hat: &Tensor, sign: AdvSign) -> Result<(f64, Tensor)> {
    d.stack.zero_grad();
    let d_fake = column(&d.forward(r_hat)?);
    let adv = finite(generator_adv_loss(&d_fake, sign)?, "generator adversarial loss")?;
    let g = d.stack.backward(&as_column(generator_adv_loss_grad(&d_fake, sign)?)?)?;
    d.stack.zero_grad();
    Ok((adv, g))
}

/// One alternating update: D ascends its objective on (r, G(s)), then G descends
/// pixel loss + λ·adversarial term against the updated D.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    g: &mut Generator,
    d: &mut Discriminator,
    s: &Tensor,
    r: &Tensor,
    lambda: f64,
    sign: AdvSign,
    opt_g: &mut OptimState,
    opt_d: &mut OptimState,
) -> Result<StepMetrics> {
    if g.mode() != Mode::Train || d.stack.mode() != Mode::Train {
        return Err(FdnnError::State("train_step needs both networks in train mode".into()));
    }
    g.stack.zero_grad();
    let r_hat = g.forward(s)?;
    let (d_loss, d_real_acc, d_fake_acc) = discriminator_step(d, r, &r_hat, opt_d)?;

    let (q, mut grad) = pixel_loss_grad(&r_hat, r)?;
    finite(q, "pixel loss")?;
    let g_adv_loss = if lambda != 0.0 {
        let (adv, adv_grad) = generator_adv_grad(d, &r_hat, sign)?;
        grad = grad.zip_map(&adv_grad, |a, b| a + lambda * b)?;
        adv
    } else {
        let d_fake = column(&d.infer(&r_hat)?);
        generator_adv_loss(&d_fake, sign)?
    };
    g.stack.backward(&grad)?;
    opt_g.descend(&mut g.stack)?;
    Ok(StepMetrics {
        pixel_loss: q,
        d_loss,
        g_adv_loss,
        d_real_acc,
        d_fake_acc,
    })
}

/// Networks, optimizer state, and progress: everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: OptimState,
    pub opt_d: OptimState,
    pub epochs_completed: u32,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (s, c) = (config.image_size, config.base_channels);
        let generator = Generator::new(s, c, derive_seed(config.seed, STREAM_GENERATOR_INIT))?;
        let discriminator = Discriminator::new(s, c, derive_seed(config.seed, STREAM_DISCRIMINATOR_INIT))?;
        let opt_g = OptimState::for_stack(&generator.stack, config.alpha0, config.beta, config.eps)?;
        let opt_d = OptimState::for_stack(&discriminator.stack, config.alpha0, config.beta, config.eps)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            epochs_completed: 0,
        })
    }

    /// Runs epoch `epochs_completed` over `data` and advances the counter.
    pub fn run_epoch(&mut self, data: &PairDataset) -> Result<EpochStats> {
        let s = data.image_size()?;
        if s != self.config.image_size {
            return Err(FdnnError::shape(format!(
                "dataset images are {s}x{s} but the model expects {0}x{0}",
                self.config.image_size
            )));
        }
        let n = self.epochs_completed;
        let sched = self.config.schedules();
        let (lambda, alpha) = (sched.lambda_at(n), sched.alpha_at(n));
        self.opt_g.alpha = alpha;
        self.opt_d.alpha = alpha;
        self.generator.set_mode(Mode::Train);
        self.discriminator.set_mode(Mode::Train);

        let shuffle_seed = derive_seed(self.config.seed, STREAM_SHUFFLE);
        let mut sums = [0.0; 5];
        let (mut count, mut steps) = (0usize, 0usize);
        for batch in Batcher::new(data, self.config.batch_size, shuffle_seed, n)? {
            let batch = batch?;
            let m = train_step(
                &mut self.generator,
                &mut self.discriminator,
                &batch.stylized,
                &batch.real,
                lambda,
                self.config.adv_sign,
                &mut self.opt_g,
                &mut self.opt_d,
            )?;
            let w = batch.indices.len() as f64;
            for (acc, v) in sums
                .iter_mut()
                .zip([m.pixel_loss, m.d_loss, m.g_adv_loss, m.d_real_acc, m.d_fake_acc])
            {
                *acc += w * v;
            }
            count += batch.indices.len();
            steps += 1;
        }
        self.generator.stack.clear_cache();
        self.discriminator.stack.clear_cache();
        self.epochs_completed += 1;
        let mean = |i: usize| sums[i] / count as f64;
        Ok(EpochStats {
            epoch: n,
            pixel_loss: mean(0),
            d_loss: mean(1),
            g_adv_loss: mean(2),
            d_real_acc: mean(3),
            d_fake_acc: mean(4),
            lambda,
            alpha,
            steps,
        })
    }

    /// Trains until `config.epochs` epochs are complete. Checkpoints go to
    /// `checkpoint` per `config.checkpoint_every` and after the last epoch.
    pub fn train(
        &mut self,
        data: &PairDataset,
        checkpoint: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats) -> Result<()>,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(FdnnError::domain("training set is empty"));
        }
        let mut report = TrainReport::default();
        while self.epochs_completed < self.config.epochs {
            let stats = self.run_epoch(data)?;
            on_epoch(&stats)?;
            report.epochs.push(stats);
            let every = self.config.checkpoint_every;
            if let Some(path) = checkpoint {
                if every > 0
                    && self.epochs_completed.is_multiple_of(every)
                    && self.epochs_completed < self.config.epochs
                {
                    save_checkpoint(self, path)?;
                }
            }
        }
        self.generator.set_mode(Mode::Eval);
        self.discriminator.set_mode(Mode::Eval);
        if let Some(path) = checkpoint {
            save_checkpoint(self, path)?;
        }
        Ok(report)
    }
}

/// Fresh networks from `config`, trained on `data`.
pub fn train(config: TrainConfig, data: &PairDataset) -> Result<(Trainer, TrainReport)> {
    let mut trainer = Trainer::new(config)?;
    let report = trainer.train(data, None, |_| Ok(()))?;
    Ok((trainer, report))
}
