//! Adversarial training: Noam-scheduled Adam on alternating discriminator and
//! generator updates.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, DISCRIMINATOR_MAGIC, GENERATOR_MAGIC};
use crate::dataio::CorpusItem;
use crate::discriminator::{ClipPlan, DiscriminatorConfig, MultiBandDiscriminator};
use crate::frontend::{g2p_expand, G2PTable, PhonemeSequence};
use crate::generator::{DurationMode, Generator, GeneratorConfig, GeneratorVars};
use crate::layers::ForwardCtx;
use crate::losses::{
    acoustic_loss, adv_loss_discriminator, adv_loss_generator, feature_loss, generator_objective, total_losses,
    LossComponents, LossReport, LossWeights, TargetVars,
};
use crate::numerics::{GradBuffer, ParamStore, Params, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const OPTIMIZER_MAGIC: [u8; 4] = *b"XOPT";

/// `base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: u64, warmup_steps: u64, d_model: usize, base_lr: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate schedule is defined from step 1".into()));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(Error::Config("warmup_steps and d_model must be positive".into()));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup_steps as f64).powf(-1.5);
    Ok(base_lr * (d_model as f64).powf(-0.5) * decay.min(ramp))
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<R: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(store: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn moments(&self) -> (&[Tensor<R>], &[Tensor<R>]) {
        (&self.m, &self.v)
    }

    /// One update at learning rate `lr`. Missing gradients count as zero.
    /// Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<R>, grads: &GradBuffer<R>, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("optimizer, gradients and parameters disagree in length".into()));
        }
        for (id, g) in grads.iter() {
            if g.is_some_and(|g| !g.all_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::of_f64(self.beta1), R::of_f64(self.beta2));
        let (one, eps) = (R::one(), R::of_f64(self.eps));
        let c1 = R::of_f64(1.0 - self.beta1.powi(t));
        let c2 = R::of_f64(1.0 - self.beta2.powi(t));
        let lr = R::of_f64(lr);
        for (id, g) in grads.iter().collect::<Vec<_>>() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(id).data_mut();
            match g {
                Some(g) => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn to_store(&self, store: &ParamStore<R>) -> Result<ParamStore<R>> {
        let mut out = ParamStore::new();
        for id in store.ids() {
            out.add(format!("m.{}", store.name(id)), self.m[id.index()].clone())?;
            out.add(format!("v.{}", store.name(id)), self.v[id.index()].clone())?;
        }
        Ok(out)
    }

    fn restore(&mut self, store: &ParamStore<R>, saved: &checkpoint::Entries, step: u64) -> Result<()> {
        let mut moments = self.to_store(store)?;
        checkpoint::restore(&mut moments, saved)?;
        for id in store.ids() {
            let name = store.name(id);
            let get = |prefix: &str| moments.get(moments.id(&format!("{prefix}.{name}")).expect("present")).clone();
            self.m[id.index()] = get("m");
            self.v[id.index()] = get("v");
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps in total; 0 runs every epoch.
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound per network; 0 disables clipping.
    pub grad_clip: f64,
    pub use_convfft: bool,
    pub use_sd: bool,
    pub use_dd: bool,
    pub include_dd_stem: bool,
    /// Continue from the checkpoint in the output directory when present.
    pub resume: bool,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            max_steps: 0,
            warmup_steps: 200,
            seed: 0,
            checkpoint_every: 100,
            base_lr: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 1.0,
            use_convfft: true,
            use_sd: true,
            use_dd: true,
            include_dd_stem: true,
            resume: false,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("epochs, batch_size and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.base_lr <= 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    /// Generator configuration with the ablation flags applied.
    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if !self.use_convfft {
            g.block = "fft".into();
        }
        g
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            use_sd: self.use_sd,
            use_dd: self.use_dd,
            ..self.discriminator.clone()
        }
    }

    pub fn adversarial(&self) -> bool {
        self.use_sd || self.use_dd
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ItemPass {
    tape: Tape<f32>,
    out: GeneratorVars,
    targets: TargetVars,
    plan: Option<ClipPlan>,
    components: LossComponents,
}

pub struct Trainer {
    cfg: TrainConfig,
    table: G2PTable,
    generator: Generator<f32>,
    g_params: ParamStore<f32>,
    g_opt: Adam<f32>,
    discriminator: Option<MultiBandDiscriminator<f32>>,
    d_params: ParamStore<f32>,
    d_opt: Adam<f32>,
    timing: StepTiming,
}

/// Wall-clock accounting of training steps. Per-item work inside a step
/// runs on the thread pool; everything else is serial.
#[derive(Clone, Debug, Default)]
pub struct StepTiming {
    pub steps: u64,
    pub serial: Duration,
    /// Per-item durations of each parallel phase, in item order.
    pub phases: Vec<Vec<Duration>>,
}

impl StepTiming {
    /// Time spent in per-item work when run sequentially.
    pub fn item_total(&self) -> Duration {
        self.phases.iter().flatten().sum()
    }

    /// Wall time the same work would take with `cores` workers, each phase
    /// split into consecutive chunks of `cores` items that wait for their
    /// slowest member.
    pub fn projected(&self, cores: usize) -> Duration {
        let cores = cores.max(1);
        let parallel: Duration = self
            .phases
            .iter()
            .flat_map(|p| p.chunks(cores).map(|c| c.iter().copied().max().unwrap_or_default()))
            .sum();
        self.serial + parallel
    }
}

/// Outcome of [`Trainer::train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub reports: Vec<LossReport>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";

impl Trainer {
    pub fn new(cfg: TrainConfig, table: G2PTable) -> Result<Self> {
        cfg.validate()?;
        if cfg.generator.vocab < table.vocab() {
            return Err(Error::Config(format!(
                "generator vocab {} is smaller than the G2P inventory {}",
                cfg.generator.vocab,
                table.vocab()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut g_params = ParamStore::new();
        let generator = Generator::init(&cfg.generator_config(), &mut g_params, &mut rng)?;
        let mut d_params = ParamStore::new();
        let discriminator = if cfg.adversarial() {
            Some(MultiBandDiscriminator::init(&cfg.discriminator_config(), &mut d_params, &mut rng)?)
        } else {
            None
        };
        Ok(Trainer {
            g_opt: Adam::new(&g_params, cfg.beta1, cfg.beta2, cfg.eps),
            d_opt: Adam::new(&d_params, cfg.beta1, cfg.beta2, cfg.eps),
            cfg,
            table,
            generator,
            g_params,
            discriminator,
            d_params,
            timing: StepTiming::default(),
        })
    }

    pub fn timing(&self) -> &StepTiming {
        &self.timing
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn table(&self) -> &G2PTable {
        &self.table
    }

    pub fn generator(&self) -> (&Generator<f32>, &ParamStore<f32>) {
        (&self.generator, &self.g_params)
    }

    pub fn discriminator(&self) -> Option<(&MultiBandDiscriminator<f32>, &ParamStore<f32>)> {
        self.discriminator.as_ref().map(|d| (d, &self.d_params))
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.g_opt.step
    }

    fn item_seed(&self, step: u64, item: usize) -> u64 {
        mix(self.cfg.seed, step, item as u64 + 1)
    }

    /// Training-mode generator pass for one item; dropout masks and
    /// discriminator clips are drawn from `(seed, step, index)`.
    fn forward_item(&self, item: &CorpusItem, seq: &PhonemeSequence, step: u64, index: usize) -> Result<ItemPass> {
        let seed = self.item_seed(step, index);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::training(self.cfg.generator.dropout, seed);
        let out = self.generator.forward(
            &mut tape,
            Params::tracked(&self.g_params),
            seq,
            DurationMode::TeacherForced(&item.phoneme_durations),
            &mut ctx,
        )?;
        let t = &item.target;
        let targets = TargetVars::record(&mut tape, &t.mel, &t.vuv, &t.logf0, &item.phoneme_durations)?;
        let plan = self
            .discriminator
            .as_ref()
            .map(|d| d.plan(t.frames(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0xD15C)));
        Ok(ItemPass {
            tape,
            out,
            targets,
            plan,
            components: LossComponents::default(),
        })
    }

    /// Discriminator loss and gradients for one item against a fixed
    /// generator output.
    fn discriminator_item(&self, item: &CorpusItem, pass: &ItemPass) -> Result<(f64, GradBuffer<f32>)> {
        let disc = self.discriminator.as_ref().expect("adversarial");
        let plan = pass.plan.as_ref().expect("plan drawn");
        let mut tape = Tape::new();
        let p = Params::tracked(&self.d_params);
        let real = tape.constant(item.target.mel.clone());
        let fake = tape.constant(pass.tape.value(pass.out.frames.mel).clone());
        let real_v = disc.forward(&mut tape, p, real, plan)?;
        let fake_v = disc.forward(&mut tape, p, fake, plan)?;
        let loss = adv_loss_discriminator(&mut tape, &real_v, &fake_v)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("discriminator loss is {value}")));
        }
        tape.backward(loss)?;
        Ok((value, tape.param_grads(&self.d_params)))
    }

    /// Generator objective and gradients for one item, consuming its pass.
    fn generator_item(&self, mut pass: ItemPass) -> Result<(LossComponents, GradBuffer<f32>)> {
        let tape = &mut pass.tape;
        let w = &self.cfg.weights;
        let ac = acoustic_loss(tape, &pass.out.frames, pass.out.log_durations, &pass.targets, w)?;
        let (adv, feat) = match &self.discriminator {
            Some(disc) => {
                let plan = pass.plan.as_ref().expect("plan drawn");
                let p = Params::frozen(&self.d_params);
                let fake_v = disc.forward(tape, p, pass.out.frames.mel, plan)?;
                let real_v = disc.forward(tape, p, pass.targets.mel, plan)?;
                let adv = adv_loss_generator(tape, &fake_v)?;
                let feat = feature_loss(tape, &real_v, &fake_v, self.cfg.include_dd_stem)?;
                (Some(adv), Some(feat))
            }
            None => (None, None),
        };
        let objective = generator_objective(tape, adv, ac.total, feat, w)?;
        let val = |t: &Tape<f32>, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item() as f64);
        let c = &mut pass.components;
        c.mel = val(tape, Some(ac.mel));
        c.pitch = val(tape, Some(ac.pitch));
        c.vuv = val(tape, Some(ac.vuv));
        c.dur = val(tape, Some(ac.dur));
        c.adv_g = val(tape, adv);
        c.feature = val(tape, feat);
        let total = val(tape, Some(objective));
        if !total.is_finite() {
            total_losses(c, w)?;
            return Err(Error::Divergence(format!("generator objective is {total}")));
        }
        tape.backward(objective)?;
        Ok((pass.components, tape.param_grads(&self.g_params)))
    }

    /// Map `f` over `inputs` one thread-pool-width chunk at a time and hand
    /// the results to `sink` in input order. Only one chunk of results is
    /// alive at once, and accumulation order does not depend on the pool.
    /// Returns the duration of each call.
    fn chunked<I: Send, T: Send>(
        inputs: Vec<I>,
        f: impl Fn(I) -> Result<T> + Sync + Send,
        mut sink: impl FnMut(T) -> Result<()>,
    ) -> Result<Vec<Duration>> {
        let width = rayon::current_num_threads().max(1);
        let mut times = Vec::with_capacity(inputs.len());
        let mut rest = inputs;
        while !rest.is_empty() {
            let tail = rest.split_off(width.min(rest.len()));
            let chunk = std::mem::replace(&mut rest, tail);
            let outs = chunk
                .into_par_iter()
                .map(|x| {
                    let t = Instant::now();
                    f(x).map(|y| (y, t.elapsed()))
                })
                .collect::<Result<Vec<_>>>()?;
            for (o, t) in outs {
                times.push(t);
                sink(o)?;
            }
        }
        Ok(times)
    }

    fn finish(total: Option<GradBuffer<f32>>, n: usize, clip: f64) -> GradBuffer<f32> {
        let mut total = total.expect("nonempty batch");
        total.scale(1.0 / n as f32);
        if clip > 0.0 {
            total.clip_global_norm(clip);
        }
        total
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn train_step(&mut self, batch: &[&CorpusItem]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let started = Instant::now();
        let mut phases = Vec::with_capacity(3);
        let n = batch.len();
        let step = self.g_opt.step + 1;
        let lr = lr_schedule(step, self.cfg.warmup_steps, self.cfg.generator.d_model, self.cfg.base_lr)?;
        let seqs = batch
            .iter()
            .map(|it| g2p_expand(&it.score, &self.table))
            .collect::<Result<Vec<_>>>()?;
        let merge = |acc: &mut Option<GradBuffer<f32>>, g: GradBuffer<f32>| match acc {
            Some(a) => a.merge(&g),
            None => *acc = Some(g),
        };

        // One tracked generator pass per item serves both half-steps: the
        // generator parameters do not move during the discriminator update.
        let mut passes = Vec::with_capacity(n);
        phases.push(Self::chunked(
            (0..n).collect(),
            |i| self.forward_item(batch[i], &seqs[i], step, i),
            |p| {
                passes.push(p);
                Ok(())
            },
        )?);

        let mut adv_d = Vec::with_capacity(n);
        if self.discriminator.is_some() {
            let mut acc = None;
            phases.push(Self::chunked(
                passes.iter().enumerate().collect(),
                |(i, p)| self.discriminator_item(batch[i], p),
                |(loss, g)| {
                    adv_d.push(loss);
                    merge(&mut acc, g);
                    Ok(())
                },
            )?);
            let grads = Self::finish(acc, n, self.cfg.grad_clip);
            let before = self.g_params.fingerprint();
            self.d_opt.update(&mut self.d_params, &grads, lr)?;
            assert_eq!(before, self.g_params.fingerprint(), "discriminator update touched generator parameters");
        } else {
            adv_d.resize(n, 0.0);
        }

        let mut acc = None;
        let mut components = Vec::with_capacity(n);
        phases.push(Self::chunked(
            passes,
            |p| self.generator_item(p),
            |(c, g)| {
                components.push(LossComponents { adv_d: adv_d[components.len()], ..c });
                merge(&mut acc, g);
                Ok(())
            },
        )?);
        let grads = Self::finish(acc, n, self.cfg.grad_clip);
        let mut report = total_losses(&LossComponents::mean(&components), &self.cfg.weights)?;
        let before = self.d_params.fingerprint();
        self.g_opt.update(&mut self.g_params, &grads, lr)?;
        assert_eq!(before, self.d_params.fingerprint(), "generator update touched discriminator parameters");
        if self.discriminator.is_none() {
            self.d_opt.step = self.g_opt.step;
        }
        report.step = step;
        report.lr = lr;
        let item_time: Duration = phases.iter().flatten().sum();
        self.timing.steps += 1;
        self.timing.serial += started.elapsed().saturating_sub(item_time);
        self.timing.phases.extend(phases);
        Ok(report)
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    fn total_steps(&self, n: usize) -> u64 {
        let all = self.steps_per_epoch(n) * self.cfg.epochs as u64;
        if self.cfg.max_steps > 0 {
            all.min(self.cfg.max_steps)
        } else {
            all
        }
    }

    /// Items of optimizer step `step` (1-based); order is reshuffled per epoch.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per = self.steps_per_epoch(n);
        let (epoch, k) = ((step - 1) / per, ((step - 1) % per) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch, 0)));
        let b = self.cfg.batch_size;
        order[k * b..((k + 1) * b).min(n)].to_vec()
    }

    /// Train over `corpus`, appending one JSON line per step to the log in
    /// `out` and checkpointing periodically and at the end. `on_step` sees
    /// every report as it is produced.
    pub fn train(
        &mut self,
        corpus: &[CorpusItem],
        out: &Path,
        mut on_step: impl FnMut(&Trainer, &LossReport) -> Result<()>,
    ) -> Result<TrainSummary> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        for item in corpus {
            item.validate(&self.table)?;
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let ckpt = out.join(CHECKPOINT_DIR);
        let log_path = out.join(LOG_FILE);
        // lines logged after the checkpoint belong to steps that will be redone
        let mut kept = String::new();
        if self.cfg.resume && ckpt.join(STATE_FILE).exists() {
            self.load_state(&ckpt)?;
            if log_path.exists() {
                let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
                for line in text.lines() {
                    let r: LossReport = serde_json::from_str(line)?;
                    if r.step <= self.step() {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        let config_path = out.join(CONFIG_FILE);
        std::fs::write(&config_path, self.cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
        std::fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
        let mut log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let total = self.total_steps(corpus.len());
        let mut reports = Vec::new();
        while self.step() < total {
            let idx = self.batch_indices(corpus.len(), self.step() + 1);
            let batch: Vec<&CorpusItem> = idx.iter().map(|&i| &corpus[i]).collect();
            let report = self.train_step(&batch)?;
            writeln!(log, "{}", report.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
            on_step(self, &report)?;
            reports.push(report);
            if self.cfg.checkpoint_every > 0 && self.step() % self.cfg.checkpoint_every == 0 && self.step() < total {
                self.save_state(&ckpt)?;
            }
        }
        self.save_state(&ckpt)?;
        Ok(TrainSummary {
            steps: self.step(),
            reports,
        })
    }

    /// Write parameters, optimizer moments and the step counter to `dir`,
    /// replacing any previous contents only once everything is written.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        checkpoint::save(tmp.join(GENERATOR_FILE), GENERATOR_MAGIC, &self.g_params)?;
        checkpoint::save(tmp.join(G_OPT_FILE), OPTIMIZER_MAGIC, &self.g_opt.to_store(&self.g_params)?)?;
        if self.discriminator.is_some() {
            checkpoint::save(tmp.join(DISCRIMINATOR_FILE), DISCRIMINATOR_MAGIC, &self.d_params)?;
            checkpoint::save(tmp.join(D_OPT_FILE), OPTIMIZER_MAGIC, &self.d_opt.to_store(&self.d_params)?)?;
        }
        let state = TrainState {
            step: self.g_opt.step,
            d_step: self.d_opt.step,
        };
        let path = tmp.join(STATE_FILE);
        std::fs::write(&path, serde_json::to_string(&state).expect("state serializes")).map_err(|e| Error::io(&path, e))?;
        std::fs::write(tmp.join(CONFIG_FILE), self.cfg.to_toml()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::write(tmp.join(G2P_FILE), self.table.to_json()).map_err(|e| Error::io(&tmp, e))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        checkpoint::load(dir.join(GENERATOR_FILE), GENERATOR_MAGIC, &mut self.g_params)?;
        let saved = checkpoint::load_entries(dir.join(G_OPT_FILE), OPTIMIZER_MAGIC)?;
        self.g_opt.restore(&self.g_params, &saved, state.step)?;
        if self.discriminator.is_some() {
            checkpoint::load(dir.join(DISCRIMINATOR_FILE), DISCRIMINATOR_MAGIC, &mut self.d_params)?;
            let saved = checkpoint::load_entries(dir.join(D_OPT_FILE), OPTIMIZER_MAGIC)?;
            self.d_opt.restore(&self.d_params, &saved, state.d_step)?;
        } else {
            self.d_opt.step = state.d_step;
        }
        Ok(())
    }
}

pub const STATE_FILE: &str = "state.json";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const G2P_FILE: &str = "g2p.json";
const G_OPT_FILE: &str = "generator.adam";
const D_OPT_FILE: &str = "discriminator.adam";

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: u64,
    d_step: u64,
}

/// A generator restored from disk for inference.
pub struct TrainedModel {
    pub config: TrainConfig,
    pub table: G2PTable,
    pub generator: Generator<f32>,
    pub params: ParamStore<f32>,
}

impl TrainedModel {
    /// `path` is a checkpoint directory, a training output directory holding
    /// one, or a generator checkpoint file. The configuration is read from
    /// `config.toml` next to the checkpoint; the G2P table from `g2p.json`
    /// when present, otherwise the built-in one.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            if path.join(CHECKPOINT_DIR).join(GENERATOR_FILE).exists() {
                path.join(CHECKPOINT_DIR)
            } else {
                path.to_path_buf()
            }
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let ckpt = if path.is_dir() { dir.join(GENERATOR_FILE) } else { path.to_path_buf() };
        let config_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config = TrainConfig::from_toml(&text)?;
        config.validate()?;
        let g2p_path = dir.join(G2P_FILE);
        let table = if g2p_path.exists() { G2PTable::load(&g2p_path)? } else { G2PTable::builtin() };
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::init(&config.generator_config(), &mut params, &mut rng)?;
        checkpoint::load(&ckpt, GENERATOR_MAGIC, &mut params)?;
        Ok(TrainedModel {
            config,
            table,
            generator,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let peak = lr_schedule(200, 200, 384, 0.01).unwrap();
        assert!((peak - 0.01 / (384f64 * 200.0).sqrt()).abs() < 1e-18);
        assert!((lr_schedule(100, 200, 384, 0.01).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!((lr_schedule(50, 200, 384, 0.01).unwrap() - peak / 4.0).abs() < 1e-15);
        assert!((lr_schedule(400, 200, 384, 0.01).unwrap() / peak - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(lr_schedule(0, 200, 384, 0.01).is_err());
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(0.5)).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        let mut g = GradBuffer::new(1);
        g.accumulate(id, &Tensor::scalar(1.0));
        adam.update(&mut store, &g, 1e-3).unwrap();
        assert!((store.get(id).item() - (0.5 - 1e-3)).abs() < 1e-12);

        let mut nan = GradBuffer::new(1);
        nan.accumulate(id, &Tensor::scalar(f64::NAN));
        let before = store.get(id).item();
        let err = adam.update(&mut store, &nan, 1e-3).unwrap_err();
        assert!(err.to_string().contains('x'));
        assert_eq!(store.get(id).item(), before);
    }

    #[test]
    fn zero_gradient_keeps_fresh_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full([3], 0.25)).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        let mut g = GradBuffer::new(1);
        g.accumulate(id, &Tensor::zeros([3]));
        adam.update(&mut store, &g, 1.0).unwrap();
        assert_eq!(store.get(id).data(), &[0.25; 3]);
    }
}
