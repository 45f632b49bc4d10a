//! Adversarial training of the reverse-step generator.

mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split, DataError, Dataset, GuidedSample};
use crate::diffusion::{forward_marginal, forward_span, DiffusionError, NoiseSchedule, ScheduleParams};
use crate::models::{build_discriminator, build_generator, Checkpoint, DiscriminatorNet, GeneratorNet, ModelConfig, ModelError};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use optim::{adam_step, AdamHyper, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("epoch callback failed: {0}")]
    Observer(String),
}

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialLoss {
    #[default]
    LeastSquares,
    /// Non-saturating logistic loss.
    Logistic,
}

impl fmt::Display for AdversarialLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversarialLoss::LeastSquares => "least-squares",
            AdversarialLoss::Logistic => "logistic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_rec: f64,
    pub loss: AdversarialLoss,
    pub validation_fraction: f64,
    /// Seeds the split, batch order, and every noise draw.
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            lr_gen: 1.6e-4,
            lr_disc: 1.6e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            lambda_rec: 50.0,
            loss: AdversarialLoss::LeastSquares,
            validation_fraction: 0.10,
            seed: 7,
            model: ModelConfig::default(),
            schedule: ScheduleParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("lr_gen", self.lr_gen), ("lr_disc", self.lr_disc)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be a finite non-negative rate"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps = {} must be positive", self.adam_eps));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return bad(format!("lambda_rec = {} must be non-negative", self.lambda_rec));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction = {} must lie in (0, 1)", self.validation_fraction));
        }
        if self.model.total_steps != self.schedule.total_steps {
            return bad(format!(
                "model step normalizer {} differs from schedule total_steps {}",
                self.model.total_steps, self.schedule.total_steps
            ));
        }
        Ok(())
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    /// Unweighted mean absolute error of the `x0` estimate.
    pub g_rec_loss: f64,
    pub finite: bool,
}

impl StepReport {
    /// `step <n> <d_loss> <g_adv> <g_rec>`
    pub fn log_line(&self) -> String {
        format!("step {} {} {} {}", self.step, self.d_loss, self.g_adv_loss, self.g_rec_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// One-based.
    pub epoch: usize,
    pub steps: u64,
    pub val_g_rec_loss: f64,
}

impl EpochSummary {
    /// `epoch <e> <steps> <val_g_rec>`
    pub fn log_line(&self) -> String {
        format!("epoch {} {} {}", self.epoch, self.steps, self.val_g_rec_loss)
    }
}

/// Progress hooks. The epoch hook receives the current checkpoint.
pub trait TrainObserver {
    fn on_step(&mut self, _report: &StepReport) {}

    fn on_epoch(&mut self, _summary: &EpochSummary, _ckpt: &Checkpoint) -> Result<(), String> {
        Ok(())
    }
}

/// Ignores all progress.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Collects every log line in memory.
#[derive(Debug, Default)]
pub struct LogCollector {
    pub lines: Vec<String>,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainObserver for LogCollector {
    fn on_step(&mut self, r: &StepReport) {
        self.lines.push(r.log_line());
        self.steps.push(*r);
    }

    fn on_epoch(&mut self, s: &EpochSummary, _ckpt: &Checkpoint) -> Result<(), String> {
        self.lines.push(s.log_line());
        self.epochs.push(*s);
        Ok(())
    }
}

/// Least-squares discriminator loss for scalar scores.
pub fn discriminator_loss(real_score: f64, fake_score: f64) -> f64 {
    0.5 * (real_score - 1.0).powi(2) + 0.5 * fake_score.powi(2)
}

/// Least-squares generator loss plus the weighted L1 reconstruction term.
pub fn generator_loss(fake_score: f64, x0_hat: &[f64], x0: &[f64], lambda_rec: f64) -> f64 {
    assert_eq!(x0_hat.len(), x0.len(), "reconstruction operands differ in length");
    let l1 = x0_hat.iter().zip(x0).map(|(a, b)| (a - b).abs()).sum::<f64>() / x0.len().max(1) as f64;
    0.5 * (fake_score - 1.0).powi(2) + lambda_rec * l1
}

/// Draws `t` uniformly from `{k, 2k, ..., T}` and a joint sample
/// `(x_{t-k}, x_t)` from the forward process.
pub fn sample_training_triple<F: Scalar, R: Rng + ?Sized>(
    x0: &Tensor<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(usize, Tensor<F>, Tensor<F>), DiffusionError> {
    let k = sched.span();
    let t = rng.random_range(1..=sched.reverse_steps()) * k;
    let eps1 = Tensor::randn(x0.shape(), 1.0, rng);
    let eps2 = Tensor::randn(x0.shape(), 1.0, rng);
    let x_tmk = if t == k { x0.clone() } else { forward_marginal(x0, t - k, &eps1, sched)? };
    let x_t = forward_span(&x_tmk, t, &eps2, sched)?;
    Ok((t, x_tmk, x_t))
}

/// Generator, discriminator, and optimizer state being trained.
pub struct Nets<'a> {
    pub generator: &'a mut GeneratorNet<f32>,
    pub discriminator: &'a mut DiscriminatorNet<f32>,
    pub gen_opt: &'a mut AdamState,
    pub disc_opt: &'a mut AdamState,
}

impl<'a> From<&'a mut Checkpoint> for Nets<'a> {
    fn from(c: &'a mut Checkpoint) -> Self {
        Nets {
            generator: &mut c.generator,
            discriminator: &mut c.discriminator,
            gen_opt: &mut c.gen_opt,
            disc_opt: &mut c.disc_opt,
        }
    }
}

fn stack<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data).expect("parts share trailing shape")
}

/// `[n, 1, h, w]` constant whose sample `i` holds `vals[i]`.
fn per_sample<F: Scalar>(g: &mut Graph<F>, vals: &[f64], plane: usize, shape: &[usize]) -> Result<Var, TensorError> {
    let data = vals.iter().flat_map(|&v| std::iter::repeat_n(F::from_f64_lossy(v), plane)).collect();
    g.constant(shape, data)
}

/// Mean of each sample's logit map, as `[n, 1]`.
fn sample_scores<F: Scalar>(g: &mut Graph<F>, logits: Var) -> Result<Var, TensorError> {
    let s = g.shape(logits)?.to_vec();
    let (n, m) = (s[0], s[1..].iter().product::<usize>());
    let flat = g.reshape(logits, &[n, m])?;
    let ones = g.constant(&[m, 1], vec![F::from_f64_lossy(1.0 / m as f64); m])?;
    g.matmul(flat, ones)
}

fn squared_distance_to<F: Scalar>(g: &mut Graph<F>, x: Var, target: f64) -> Result<Var, TensorError> {
    let d = g.add_scalar(x, F::from_f64_lossy(-target))?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq)?;
    g.scale(m, F::from_f64_lossy(0.5))
}

fn d_objective<F: Scalar>(g: &mut Graph<F>, loss: AdversarialLoss, real: Var, fake: Var) -> Result<Var, TensorError> {
    match loss {
        AdversarialLoss::LeastSquares => {
            let r = squared_distance_to(g, real, 1.0)?;
            let f = squared_distance_to(g, fake, 0.0)?;
            g.add(r, f)
        }
        AdversarialLoss::Logistic => {
            let neg = g.scale(real, -F::one())?;
            let r = g.softplus(neg)?;
            let r = g.mean(r)?;
            let f = g.softplus(fake)?;
            let f = g.mean(f)?;
            g.add(r, f)
        }
    }
}

fn g_objective<F: Scalar>(g: &mut Graph<F>, loss: AdversarialLoss, fake: Var) -> Result<Var, TensorError> {
    match loss {
        AdversarialLoss::LeastSquares => squared_distance_to(g, fake, 1.0),
        AdversarialLoss::Logistic => {
            let neg = g.scale(fake, -F::one())?;
            let s = g.softplus(neg)?;
            g.mean(s)
        }
    }
}

/// Everything drawn at random for one update: per-sample step indices,
/// clean images, guides, the real and conditioning states, latents and the
/// posterior noise used to build the fake previous state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs<F: Scalar> {
    pub ts: Vec<usize>,
    pub x0: Tensor<F>,
    pub guide: Tensor<F>,
    pub x_tmk: Tensor<F>,
    pub x_t: Tensor<F>,
    pub z: Tensor<F>,
    pub eps: Tensor<F>,
}

impl<F: Scalar> StepInputs<F> {
    pub fn cast<G: Scalar>(&self) -> StepInputs<G> {
        StepInputs {
            ts: self.ts.clone(),
            x0: self.x0.cast(),
            guide: self.guide.cast(),
            x_tmk: self.x_tmk.cast(),
            x_t: self.x_t.cast(),
            z: self.z.cast(),
            eps: self.eps.cast(),
        }
    }
}

/// Draws the inputs of one update for `samples` from `rng`.
pub fn draw_step_inputs(samples: &[&GuidedSample], model: &ModelConfig, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<StepInputs<f32>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mode = model.guide_mode;
    let (mut ts, mut x0s, mut guides, mut tmks, mut xts) = (vec![], vec![], vec![], vec![], vec![]);
    for s in samples {
        let x0 = s.image_tensor::<f32>();
        let (t, x_tmk, x_t) = sample_training_triple(&x0, sched, rng)?;
        ts.push(t);
        guides.push(s.guide_tensor::<f32>(mode));
        x0s.push(x0);
        tmks.push(x_tmk);
        xts.push(x_t);
    }
    let n = samples.len();
    let x0 = stack(&x0s);
    let z = Tensor::randn(&[n, model.latent_dim], 1.0, rng);
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    Ok(StepInputs {
        ts,
        x0,
        guide: stack(&guides),
        x_tmk: stack(&tmks),
        x_t: stack(&xts),
        z,
        eps,
    })
}

fn constant_of<F: Scalar>(g: &mut Graph<F>, t: &Tensor<F>) -> Result<Var, TensorError> {
    g.constant(t.shape(), t.data().to_vec())
}

/// Posterior draw `x'_{t-k}` built on `x0_hat`, recorded on `g`.
fn fake_previous<F: Scalar>(g: &mut Graph<F>, inp: &StepInputs<F>, sched: &NoiseSchedule, x0_hat: Var, x_t: Var) -> Result<Var, TrainError> {
    let shape = inp.x_t.shape().to_vec();
    let plane = shape[2] * shape[3];
    let coeffs = inp.ts.iter().map(|&t| sched.span_coefficients(t)).collect::<Result<Vec<_>, _>>()?;
    let c0: Vec<f64> = coeffs.iter().map(|c| c.posterior_mean_coeff_x0).collect();
    let ct: Vec<f64> = coeffs.iter().map(|c| c.posterior_mean_coeff_xt).collect();
    let sd: Vec<f64> = coeffs.iter().map(|c| c.posterior_variance.sqrt()).collect();
    let c0 = per_sample(g, &c0, plane, &shape)?;
    let ct = per_sample(g, &ct, plane, &shape)?;
    let sd = per_sample(g, &sd, plane, &shape)?;
    let eps = constant_of(g, &inp.eps)?;
    let a = g.mul(c0, x0_hat)?;
    let c = g.mul(ct, x_t)?;
    let noise = g.mul(sd, eps)?;
    let m = g.add(a, c)?;
    Ok(g.add(m, noise)?)
}

/// Generator-side nodes recorded by [`record_generator`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorNodes {
    pub x_t: Var,
    pub x0_hat: Var,
    pub fake: Var,
}

/// Records the generator estimate and the fake previous state built on it.
pub fn record_generator<F: Scalar>(
    g: &mut Graph<F>,
    gen: &GeneratorNet<F>,
    gp: &[Var],
    inp: &StepInputs<F>,
    sched: &NoiseSchedule,
) -> Result<GeneratorNodes, TrainError> {
    let x_t = constant_of(g, &inp.x_t)?;
    let guide = constant_of(g, &inp.guide)?;
    let z = constant_of(g, &inp.z)?;
    let x0_hat = gen.forward_steps(g, gp, x_t, guide, &inp.ts, z)?;
    let fake = fake_previous(g, inp, sched, x0_hat, x_t)?;
    Ok(GeneratorNodes { x_t, x0_hat, fake })
}

/// Loss nodes of the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub adv: Var,
    pub rec: Var,
    pub total: Var,
}

/// Records `adv(D(fake, x_t, t)) + lambda * mean|x0_hat - x0|` with the
/// discriminator parameters bound as constants.
pub fn record_generator_loss<F: Scalar>(
    g: &mut Graph<F>,
    disc: &DiscriminatorNet<F>,
    nodes: &GeneratorNodes,
    inp: &StepInputs<F>,
    loss: AdversarialLoss,
    lambda_rec: f64,
) -> Result<GeneratorLoss, TrainError> {
    let dp = disc.bind(g, false)?;
    let logits = disc.forward_steps(g, &dp, nodes.fake, nodes.x_t, &inp.ts)?;
    let fs = sample_scores(g, logits)?;
    let adv = g_objective(g, loss, fs)?;
    let x0 = constant_of(g, &inp.x0)?;
    let diff = g.sub(nodes.x0_hat, x0)?;
    let diff = g.abs(diff)?;
    let rec = g.mean(diff)?;
    let weighted = g.scale(rec, F::from_f64_lossy(lambda_rec))?;
    let total = g.add(adv, weighted)?;
    Ok(GeneratorLoss { adv, rec, total })
}

/// Records the discriminator objective on `g` for a fixed fake batch.
/// `dp` are the discriminator parameters bound on `g`.
pub fn record_discriminator_loss<F: Scalar>(
    g: &mut Graph<F>,
    disc: &DiscriminatorNet<F>,
    dp: &[Var],
    inp: &StepInputs<F>,
    fake: &Tensor<F>,
    loss: AdversarialLoss,
) -> Result<Var, TrainError> {
    let real = constant_of(g, &inp.x_tmk)?;
    let fake = constant_of(g, fake)?;
    let x_t = constant_of(g, &inp.x_t)?;
    let real_logits = disc.forward_steps(g, dp, real, x_t, &inp.ts)?;
    let fake_logits = disc.forward_steps(g, dp, fake, x_t, &inp.ts)?;
    let rs = sample_scores(g, real_logits)?;
    let fs = sample_scores(g, fake_logits)?;
    Ok(d_objective(g, loss, rs, fs)?)
}

fn at_step(step: u64) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Tensor(TensorError::NonFinite { op }) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => TrainError::NonFinite {
            step,
            detail: format!("operator {op}"),
        },
        other => other,
    }
}

/// One discriminator update followed by one generator update.
///
/// The generator forward pass is recorded once; its estimate enters the
/// discriminator update as a constant, and the generator update scores the
/// same fake pair with the already updated discriminator held constant.
pub fn train_step(
    batch: &[&GuidedSample],
    nets: &mut Nets<'_>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport, TrainError> {
    let inp = draw_step_inputs(batch, nets.generator.config(), sched, rng)?;
    let err = at_step(step);

    let mut gg = Graph::new();
    let gp = nets.generator.bind(&mut gg, true).map_err(TrainError::from).map_err(&err)?;
    let nodes = record_generator(&mut gg, nets.generator, &gp, &inp, sched).map_err(&err)?;
    let fake = gg.to_tensor(nodes.fake).map_err(TrainError::from).map_err(&err)?;

    // discriminator phase
    let d_loss = {
        let mut dg = Graph::new();
        let dp = nets.discriminator.bind(&mut dg, true).map_err(TrainError::from).map_err(&err)?;
        let d_loss = record_discriminator_loss(&mut dg, nets.discriminator, &dp, &inp, &fake, cfg.loss).map_err(&err)?;
        dg.backward(d_loss).map_err(TrainError::from).map_err(&err)?;
        nets.discriminator
            .params_mut()
            .collect_grads(&dg, &dp)
            .map_err(TrainError::from)
            .map_err(&err)?;
        dg.item(d_loss).map_err(TrainError::from)?.to_f64_lossy()
    };
    adam_step(nets.discriminator.params_mut(), nets.disc_opt, &cfg.hyper(cfg.lr_disc));
    nets.discriminator.params_mut().zero_grads();

    // generator phase
    let gl = record_generator_loss(&mut gg, nets.discriminator, &nodes, &inp, cfg.loss, cfg.lambda_rec).map_err(&err)?;
    gg.backward(gl.total).map_err(TrainError::from).map_err(&err)?;
    let g_adv_loss = gg.item(gl.adv).map_err(TrainError::from)?.to_f64_lossy();
    let g_rec_loss = gg.item(gl.rec).map_err(TrainError::from)?.to_f64_lossy();
    nets.generator.params_mut().collect_grads(&gg, &gp).map_err(TrainError::from).map_err(&err)?;
    adam_step(nets.generator.params_mut(), nets.gen_opt, &cfg.hyper(cfg.lr_gen));
    nets.generator.params_mut().zero_grads();

    let report = StepReport {
        step,
        d_loss,
        g_adv_loss,
        g_rec_loss,
        finite: d_loss.is_finite() && g_adv_loss.is_finite() && g_rec_loss.is_finite(),
    };
    if !report.finite {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("losses d={d_loss} g_adv={g_adv_loss} g_rec={g_rec_loss}"),
        });
    }
    Ok(report)
}

const VALIDATION_STREAM: u64 = 0x5641_4C49_4441_5445;
const TRAIN_STREAM: u64 = 1;

/// Mean L1 error of single-step `x0` estimates on `samples`, using a noise
/// stream fixed by `seed` so successive calls are comparable.
pub fn validation_rec_loss(gen: &GeneratorNet<f32>, samples: &[&GuidedSample], sched: &NoiseSchedule, seed: u64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VALIDATION_STREAM);
    let mode = gen.config().guide_mode;
    let mut total = 0.0;
    for s in samples {
        let x0 = s.image_tensor::<f32>();
        let (t, _, x_t) = sample_training_triple(&x0, sched, &mut rng)?;
        let z = Tensor::randn(&[1, gen.config().latent_dim], 1.0, &mut rng);
        let x0_hat = gen.predict(&x_t, &s.guide_tensor(mode), t, &z)?;
        let l1 = x0_hat.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        total += l1 / x0.numel() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Freshly initialized networks and optimizer state for `cfg`.
pub fn init_checkpoint(cfg: &TrainConfig, fingerprint: impl Into<String>, config_text: impl Into<String>) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    Ok(Checkpoint::new(
        build_generator(&cfg.model)?,
        build_discriminator(&cfg.model)?,
        sched,
        fingerprint.into(),
        config_text.into(),
    ))
}

/// Splits `dataset`, then runs `cfg.epochs` epochs of shuffled mini-batch
/// steps on the training part starting from `ckpt`. After each epoch the
/// validation reconstruction loss is computed and `observer` sees the
/// current checkpoint.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut ckpt: Checkpoint, observer: &mut dyn TrainObserver) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let side = cfg.model.image_side;
    if dataset.size() != Some((side, side)) {
        return Err(TrainError::Config(format!(
            "dataset images are {:?}, configuration expects {side}x{side}",
            dataset.size().unwrap_or_default()
        )));
    }
    if ckpt.generator.config() != &cfg.model || ckpt.schedule.params() != cfg.schedule {
        return Err(TrainError::Config("checkpoint networks or schedule differ from the configuration".into()));
    }
    let (train_set, val_set) = split(dataset, 1.0 - cfg.validation_fraction, cfg.seed)?;
    let train_refs: Vec<&GuidedSample> = train_set.samples.iter().collect();
    let val_refs: Vec<&GuidedSample> = val_set.samples.iter().collect();
    let sched = ckpt.schedule.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GuidedSample> = chunk.iter().map(|&i| train_refs[i]).collect();
            let step = ckpt.step + 1;
            let report = train_step(&batch, &mut Nets::from(&mut ckpt), &sched, cfg, step, &mut rng)?;
            ckpt.step = step;
            observer.on_step(&report);
        }
        let val = validation_rec_loss(&ckpt.generator, &val_refs, &sched, cfg.seed)?;
        let summary = EpochSummary {
            epoch,
            steps: ckpt.step,
            val_g_rec_loss: val,
        };
        observer.on_epoch(&summary, &ckpt).map_err(TrainError::Observer)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, PhantomStyle};
    use crate::diffusion::make_schedule;

    pub(crate) fn tiny_cfg(side: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            model: ModelConfig {
                image_side: side,
                gen_widths: [4, 8, 8],
                disc_widths: [4, 4, 8, 8],
                latent_dim: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scalar_losses() {
        assert_eq!(discriminator_loss(1.0, 0.0), 0.0);
        assert_eq!(discriminator_loss(0.0, 1.0), 1.0);
        assert_eq!(discriminator_loss(0.5, 0.5), 0.25);
        assert_eq!(generator_loss(1.0, &[0.3, 0.1], &[0.3, 0.1], 50.0), 0.0);
        assert_eq!(generator_loss(0.0, &[0.3], &[0.9], 0.0), 0.5);
        let x0 = vec![0.2; 16];
        let hat: Vec<f64> = x0.iter().map(|v| v + 0.01).collect();
        assert!((generator_loss(1.0, &hat, &x0, 100.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_scalar_forms() {
        let mut g = Graph::<f32>::new();
        let r = g.constant(&[2, 1], vec![0.5, 0.5]).unwrap();
        let f = g.constant(&[2, 1], vec![0.5, 0.5]).unwrap();
        let d = d_objective(&mut g, AdversarialLoss::LeastSquares, r, f).unwrap();
        assert_eq!(g.item(d).unwrap(), 0.25);
        let gl = g_objective(&mut g, AdversarialLoss::LeastSquares, f).unwrap();
        assert_eq!(g.item(gl).unwrap(), 0.125);
        let zero = g.constant(&[1, 1], vec![0.0]).unwrap();
        let d = d_objective(&mut g, AdversarialLoss::Logistic, zero, zero).unwrap();
        assert!((g.item(d).unwrap() - 2.0 * 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn triple_at_first_span_keeps_x0() {
        let sched = make_schedule(1000, 250, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0: Tensor<f64> = Tensor::randn(&[1, 1, 4, 4], 0.5, &mut rng);
        let mut seen = [false; 4];
        for _ in 0..200 {
            let (t, x_tmk, x_t) = sample_training_triple(&x0, &sched, &mut rng).unwrap();
            assert_eq!(t % 250, 0);
            seen[t / 250 - 1] = true;
            if t == 250 {
                assert_eq!(x_tmk, x0);
            }
            assert_eq!(x_t.shape(), x0.shape());
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn run_step(cfg: &TrainConfig, ckpt: &mut Checkpoint, samples: &[&GuidedSample], seed: u64) -> StepReport {
        let sched = ckpt.schedule.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_step(samples, &mut Nets::from(ckpt), &sched, cfg, 1, &mut rng).unwrap()
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let cfg = TrainConfig {
            lr_gen: 0.0,
            lr_disc: 0.0,
            ..tiny_cfg(16)
        };
        let ds = generate_phantoms(2, 16, PhantomStyle::A, 1).unwrap();
        let refs: Vec<&GuidedSample> = ds.samples.iter().collect();
        let mut ckpt = init_checkpoint(&cfg, "fp", "").unwrap();
        let before = ckpt.clone();
        let r = run_step(&cfg, &mut ckpt, &refs, 3);
        assert!(r.finite);
        assert_eq!(ckpt.generator.params(), before.generator.params());
        assert_eq!(ckpt.discriminator.params(), before.discriminator.params());
    }

    #[test]
    fn updates_stay_on_their_own_network() {
        let ds = generate_phantoms(2, 16, PhantomStyle::A, 1).unwrap();
        let refs: Vec<&GuidedSample> = ds.samples.iter().collect();
        for (lr_gen, lr_disc) in [(0.0, 1e-3), (1e-3, 0.0)] {
            let cfg = TrainConfig {
                lr_gen,
                lr_disc,
                ..tiny_cfg(16)
            };
            let mut ckpt = init_checkpoint(&cfg, "fp", "").unwrap();
            let before = ckpt.clone();
            run_step(&cfg, &mut ckpt, &refs, 4);
            assert_eq!(ckpt.generator.params() == before.generator.params(), lr_gen == 0.0);
            assert_eq!(ckpt.discriminator.params() == before.discriminator.params(), lr_disc == 0.0);
        }
    }

    #[test]
    fn epochs_zero_returns_initial_checkpoint() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg(16) };
        let ds = generate_phantoms(10, 16, PhantomStyle::A, 1).unwrap();
        let init = init_checkpoint(&cfg, "fp", "").unwrap();
        let mut log = LogCollector::default();
        let out = train(&ds, &cfg, init.clone(), &mut log).unwrap();
        assert!(log.lines.is_empty());
        assert_eq!(out.generator.params(), init.generator.params());
        assert_eq!(out.step, 0);
    }

    #[test]
    fn reproducible_trajectory() {
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg(16) };
        let ds = generate_phantoms(10, 16, PhantomStyle::A, 1).unwrap();
        let run = || {
            let mut log = LogCollector::default();
            let c = train(&ds, &cfg, init_checkpoint(&cfg, "fp", "").unwrap(), &mut log).unwrap();
            (log.lines, c.generator.params().clone())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        // 9 training samples in batches of 2, two epochs
        assert_eq!(a.iter().filter(|l| l.starts_with("step ")).count(), 10);
        assert_eq!(a.iter().filter(|l| l.starts_with("epoch ")).count(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let mut c = TrainConfig::default();
        c.schedule.total_steps = 500;
        assert!(c.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
