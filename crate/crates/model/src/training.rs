//! WGAN-GP training with a grouped reconstruction loss and fabricated
//! speaking/listening mismatch pairs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use ndarray::{s, Array2, ArrayView2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use talkface_core::domain::{AU_GROUP, BEHAVIOR_DIM, GAZE_GROUP, HEAD_GROUP};
use talkface_core::preprocess::ClipPair;
use talkface_core::domain::{Behavior, Speech};
use talkface_core::NormStats;
use thiserror::Error;

use crate::arch::{ArchConfig, ModelError};
use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::discriminator::Discriminator;
use crate::generator::{noise_tensor, Generator};
use crate::nn::{apply_buffer_updates, to_channels_first, Forward, Mode, ParamSet};
use crate::noise::{make_noise, NoiseVector};

const TRAIN_STREAM: u64 = 3;
const GP_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("insufficient turn diversity")]
    InsufficientTurnDiversity,
    #[error("penalty diverged")]
    PenaltyDiverged,
    #[error("non-finite {what} at step {step}; last good checkpoint: {last_checkpoint}")]
    NonFinite {
        step: u64,
        what: String,
        last_checkpoint: String,
    },
    #[error("no training clips")]
    NoClips,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub lambda_gp: f64,
    pub adv_weight: f64,
    pub n_critic: usize,
    pub epochs: usize,
    /// Iterations (generator updates) between checkpoints.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub mismatch_fraction: f64,
    /// Share of frames with one flag value for a clip to count as speaking or listening.
    pub turn_threshold: f64,
    /// Interpolate the penalty between real and the fake set including mismatch pairs.
    pub penalty_on_mismatch: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_generator: 1e-4,
            lr_discriminator: 1e-5,
            batch_size: 32,
            lambda_gp: 10.0,
            adv_weight: 0.1,
            n_critic: 5,
            epochs: 100,
            checkpoint_interval: 100,
            seed: 0,
            mismatch_fraction: 1.0 / 3.0,
            turn_threshold: 0.8,
            penalty_on_mismatch: false,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let positive = [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lambda_gp", self.lambda_gp),
            ("adv_weight", self.adv_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
            ("epochs", self.epochs),
            ("checkpoint_interval", self.checkpoint_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.mismatch_fraction) {
            return bad(format!(
                "mismatch_fraction {} outside [0, 1]",
                self.mismatch_fraction
            ));
        }
        if !(self.turn_threshold >= 0.5 && self.turn_threshold < 1.0) {
            return bad(format!(
                "turn_threshold {} outside [0.5, 1)",
                self.turn_threshold
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Mismatch pairs in a discriminator batch of `batch` fakes.
    pub fn mismatch_count(&self, batch: usize) -> usize {
        (self.mismatch_fraction * batch as f64).round() as usize
    }
}

/// Per-group RMSEs and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLoss {
    pub gaze: f64,
    pub head: f64,
    pub au: f64,
    pub total: f64,
}

/// RMSE per behavior group over frames and group features; time-major `[T, 28]`.
pub fn reconstruction_loss(
    generated: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
) -> Result<ReconLoss, TrainError> {
    if generated.dim() != real.dim() || generated.ncols() != BEHAVIOR_DIM {
        return Err(TrainError::Shape(format!(
            "reconstruction loss on {:?} and {:?}",
            generated.dim(),
            real.dim()
        )));
    }
    let rmse = |cols: std::ops::Range<usize>| {
        let g = generated.slice(s![.., cols.clone()]);
        let r = real.slice(s![.., cols]);
        let n = g.len() as f64;
        (g.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
    };
    let (gaze, head, au) = (rmse(GAZE_GROUP), rmse(HEAD_GROUP), rmse(AU_GROUP));
    Ok(ReconLoss {
        gaze,
        head,
        au,
        total: gaze + head + au,
    })
}

/// Graph form of [`reconstruction_loss`] on channels-first `[N, 28, L]`,
/// pooling the batch. Returns `[gaze, head, au, total]`.
pub fn reconstruction_loss_graph<'g>(generated: Var<'g>, real: Var<'g>) -> [Var<'g>; 4] {
    let diff = generated - real;
    let group = |r: std::ops::Range<usize>| diff.slice(1, r.start, r.end).square().mean_all().sqrt();
    let (gaze, head, au) = (group(GAZE_GROUP), group(HEAD_GROUP), group(AU_GROUP));
    [gaze, head, au, gaze + head + au]
}

/// Anything that scores speech/behavior pairs, so the penalty can be checked
/// against critics with known gradients.
pub trait Critic {
    fn score<'g>(
        &self,
        f: &mut Forward<'g>,
        speech: Var<'g>,
        behavior: Var<'g>,
    ) -> Result<Var<'g>, ModelError>;
}

impl Critic for Discriminator {
    fn score<'g>(
        &self,
        f: &mut Forward<'g>,
        speech: Var<'g>,
        behavior: Var<'g>,
    ) -> Result<Var<'g>, ModelError> {
        self.forward(f, speech, behavior)
    }
}

/// One interpolation weight per sample, from U[0, 1].
pub fn interpolation_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `λ · mean_i (‖∇_x̂ D(s_i, x̂_i)‖₂ − 1)²` with `x̂_i = t_i·real_i + (1 − t_i)·fake_i`.
/// The result stays on the graph so it can be differentiated again.
pub fn gradient_penalty<'g, C: Critic>(
    critic: &C,
    f: &mut Forward<'g>,
    speech: Var<'g>,
    real: &Tensor,
    fake: &Tensor,
    t: &[f64],
    lambda: f64,
) -> Result<Var<'g>, TrainError> {
    if real.shape() != fake.shape() || real.ndim() != 3 || t.len() != real.shape()[0] {
        return Err(TrainError::Shape(format!(
            "penalty on real {:?}, fake {:?}, {} weights",
            real.shape(),
            fake.shape(),
            t.len()
        )));
    }
    let tt = Array3::from_shape_fn((t.len(), 1, 1), |(i, _, _)| t[i]).into_dyn();
    let xhat = real * &tt + fake * &(1.0 - &tt);
    let g = f.graph;
    let x = g.leaf(xhat);
    let d = critic.score(f, speech, x)?;
    let grad = g.grad(d.sum_all(), &[x])[0];
    if !grad.value().iter().all(|v| v.is_finite()) {
        return Err(TrainError::PenaltyDiverged);
    }
    let n = t.len();
    let norms = grad.square().sum_to(&[n, 1, 1]).add_scalar(GP_EPS).sqrt();
    let penalty = norms.add_scalar(-1.0).square().mean_all().scale(lambda);
    if !penalty.item().is_finite() {
        return Err(TrainError::PenaltyDiverged);
    }
    Ok(penalty)
}

/// `(L_D, L_adv)`: the critic's loss `mean D(fake) − mean D(real) + penalty`
/// and the generator's adversarial term `−mean D(fake)`.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64], penalty: f64) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let fake = mean(d_fake);
    (fake - mean(d_real) + penalty, -fake)
}

/// `L_G + w · L_adv`.
pub fn generator_objective(l_g: f64, l_adv: f64, adv_weight: f64) -> f64 {
    l_g + adv_weight * l_adv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnKind {
    Speaking,
    Listening,
    Mixed,
}

/// Speaking if more than `threshold` of frames carry flag 1, listening if
/// more than `threshold` carry flag 0.
pub fn classify_clip(clip: &ClipPair, threshold: f64) -> TurnKind {
    let f = clip.speaking_fraction();
    if f > threshold {
        TurnKind::Speaking
    } else if 1.0 - f > threshold {
        TurnKind::Listening
    } else {
        TurnKind::Mixed
    }
}

/// Speech from one turn kind paired with behavior from the opposite kind.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchPair {
    pub speech: Array2<f64>,
    pub behavior: Array2<f64>,
    pub speech_clip: String,
    pub behavior_clip: String,
    pub speech_kind: TurnKind,
}

fn source_key(c: &ClipPair) -> (&str, talkface_core::SpeakerRole) {
    (c.source_id.as_str(), c.role)
}

/// Draws `n` mismatch pairs, alternating speaking-speech/listening-behavior
/// and the reverse from a random starting direction. Partners always come
/// from a different (source, role) track.
pub fn fabricate_mismatch<R: Rng + ?Sized>(
    speaking: &[&ClipPair],
    listening: &[&ClipPair],
    n: usize,
    rng: &mut R,
) -> Result<Vec<MismatchPair>, TrainError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if speaking.is_empty() || listening.is_empty() {
        return Err(TrainError::InsufficientTurnDiversity);
    }
    let first_speaking = rng.random_bool(0.5);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let speech_speaking = (i % 2 == 0) == first_speaking;
        let directions = if speech_speaking {
            [(speaking, listening, TurnKind::Speaking), (listening, speaking, TurnKind::Listening)]
        } else {
            [(listening, speaking, TurnKind::Listening), (speaking, listening, TurnKind::Speaking)]
        };
        let mut made = None;
        for (from, to, kind) in directions {
            let mut order: Vec<usize> = (0..from.len()).collect();
            order.shuffle(rng);
            for si in order {
                let s = from[si];
                let partners: Vec<&ClipPair> = to
                    .iter()
                    .copied()
                    .filter(|b| source_key(b) != source_key(s))
                    .collect();
                if let Some(b) = partners.get(rng.random_range(0..partners.len().max(1))) {
                    made = Some(MismatchPair {
                        speech: s.speech.clone(),
                        behavior: b.behavior.clone(),
                        speech_clip: s.id(),
                        behavior_clip: b.id(),
                        speech_kind: kind,
                    });
                    break;
                }
            }
            if made.is_some() {
                break;
            }
        }
        out.push(made.ok_or(TrainError::InsufficientTurnDiversity)?);
    }
    Ok(out)
}

/// Adam over the trainable tensors of one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, v, _)| Tensor::zeros(v.raw_dim()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(usize, Tensor)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads {
            let (m, v) = (&mut self.m[*i], &mut self.v[*i]);
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut p = params.value(*i).clone();
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
            params.set_value(*i, p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Critic,
    Generator,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Critic => "critic",
            Phase::Generator => "generator",
        }
    }
}

/// Losses of one optimizer step. Generator steps leave the critic columns empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub l_d: Option<f64>,
    pub penalty: Option<f64>,
    pub recon: ReconLoss,
    pub l_adv: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tphase\tL_D\tpenalty\tL_G\tL_gaze\tL_head\tL_AU\tL_adv";

impl LossRecord {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.phase.as_str(),
            opt(self.l_d),
            opt(self.penalty),
            self.recon.total,
            self.recon.gaze,
            self.recon.head,
            self.recon.au,
            self.l_adv
        )
    }

    fn values(&self) -> impl Iterator<Item = f64> {
        [
            self.l_d.unwrap_or(0.0),
            self.penalty.unwrap_or(0.0),
            self.recon.total,
            self.l_adv,
        ]
        .into_iter()
    }
}

/// Where training writes its artifacts; both optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<LossRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub iterations: u64,
}

/// Writes checkpoints on a background thread so the step loop never waits on disk.
struct CheckpointWriter {
    tx: Option<mpsc::Sender<(PathBuf, Checkpoint)>>,
    handle: Option<JoinHandle<Result<Vec<PathBuf>, ModelError>>>,
    last_sent: Option<PathBuf>,
}

impl CheckpointWriter {
    fn spawn() -> Self {
        let (tx, rx) = mpsc::channel::<(PathBuf, Checkpoint)>();
        let handle = std::thread::spawn(move || {
            let mut written = Vec::new();
            for (path, ckpt) in rx {
                ckpt.save(&path)?;
                log::info!("checkpoint written to {}", path.display());
                written.push(path);
            }
            Ok(written)
        });
        Self {
            tx: Some(tx),
            handle: Some(handle),
            last_sent: None,
        }
    }

    fn send(&mut self, path: PathBuf, ckpt: Checkpoint) {
        self.last_sent = Some(path.clone());
        if let Some(tx) = &self.tx {
            // A send only fails once the writer has stopped on an error,
            // which finish() reports.
            let _ = tx.send((path, ckpt));
        }
    }

    fn finish(mut self) -> Result<Vec<PathBuf>, ModelError> {
        drop(self.tx.take());
        match self.handle.take().map(|h| h.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(ModelError::Checkpoint("checkpoint writer panicked".into())),
            None => Ok(Vec::new()),
        }
    }
}

struct Batch {
    speech: Tensor,
    behavior: Tensor,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    speaking: Vec<&'a ClipPair>,
    listening: Vec<&'a ClipPair>,
    step: u64,
}

fn non_finite(t: &Tensor) -> bool {
    t.iter().any(|v| !v.is_finite())
}

impl Trainer<'_> {
    fn noise(&mut self, n: usize) -> Tensor {
        let z: Vec<NoiseVector> = (0..n).map(|_| make_noise(&mut self.rng)).collect();
        noise_tensor(&z, self.generator.arch().seq_len)
    }

    fn fail(&self, what: &str, writer: &CheckpointWriter) -> TrainError {
        TrainError::NonFinite {
            step: self.step,
            what: what.to_string(),
            last_checkpoint: writer
                .last_sent
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        }
    }

    fn critic_step(&mut self, batch: &Batch, writer: &CheckpointWriter) -> Result<LossRecord, TrainError> {
        let n = batch.speech.shape()[0];
        let noise = self.noise(n);
        let g = Graph::new();

        let mut gf = Forward::new(&g, self.generator.params(), Mode::Train, self.rng.random());
        let generated = self
            .generator
            .forward(&mut gf, g.leaf(batch.speech.clone()), g.leaf(noise))?
            .value();
        let recon_parts = reconstruction_loss_graph(g.leaf((*generated).clone()), g.leaf(batch.behavior.clone()));

        let m = self.cfg.mismatch_count(n);
        let mismatch = fabricate_mismatch(&self.speaking, &self.listening, m, &mut self.rng)?;
        let mut fake_speech = batch.speech.clone();
        let mut fake_behavior = (*generated).clone();
        for (i, pair) in mismatch.iter().enumerate() {
            fake_speech
                .slice_mut(s![i, .., ..])
                .assign(&pair.speech.t());
            fake_behavior
                .slice_mut(s![i, .., ..])
                .assign(&pair.behavior.t());
        }

        let t = interpolation_weights(&mut self.rng, n);
        let mut df = Forward::new(&g, self.discriminator.params(), Mode::Train, self.rng.random());
        let speech = g.leaf(batch.speech.clone());
        let d_real = self
            .discriminator
            .forward(&mut df, speech, g.leaf(batch.behavior.clone()))?;
        let d_fake = self
            .discriminator
            .forward(&mut df, g.leaf(fake_speech), g.leaf(fake_behavior.clone()))?;
        let other = if self.cfg.penalty_on_mismatch {
            &fake_behavior
        } else {
            &*generated
        };
        let penalty = match gradient_penalty(
            &self.discriminator,
            &mut df,
            speech,
            &batch.behavior,
            other,
            &t,
            self.cfg.lambda_gp,
        ) {
            Err(TrainError::PenaltyDiverged) => return Err(self.fail("gradient penalty", writer)),
            r => r?,
        };
        let loss = d_fake.mean_all() - d_real.mean_all() + penalty;

        let (l_d, l_adv) = adversarial_losses(
            &d_real.value().iter().copied().collect::<Vec<_>>(),
            &d_fake.value().iter().copied().collect::<Vec<_>>(),
            penalty.item(),
        );
        let record = LossRecord {
            step: self.step,
            phase: Phase::Critic,
            l_d: Some(l_d),
            penalty: Some(penalty.item()),
            recon: recon_values(&recon_parts),
            l_adv,
        };
        if record.values().any(|v| !v.is_finite()) {
            return Err(self.fail("critic loss", writer));
        }

        let vars = df.trainable_vars();
        let grads = g.grad(loss, &vars.iter().map(|(_, v)| *v).collect::<Vec<_>>());
        let grads: Vec<(usize, Tensor)> = vars
            .iter()
            .zip(grads)
            .map(|((i, _), gv)| (*i, (*gv.value()).clone()))
            .collect();
        if grads.iter().any(|(_, t)| non_finite(t)) {
            return Err(self.fail("critic gradient", writer));
        }
        self.opt_d.step(self.discriminator.params_mut(), &grads);
        apply_buffer_updates(self.discriminator.params_mut(), df.take_buffer_updates());
        Ok(record)
    }

    fn generator_step(&mut self, batch: &Batch, writer: &CheckpointWriter) -> Result<LossRecord, TrainError> {
        let n = batch.speech.shape()[0];
        let noise = self.noise(n);
        let g = Graph::new();
        let speech = g.leaf(batch.speech.clone());
        let mut gf = Forward::new(&g, self.generator.params(), Mode::Train, self.rng.random());
        let generated = self.generator.forward(&mut gf, speech, g.leaf(noise))?;
        let parts = reconstruction_loss_graph(generated, g.leaf(batch.behavior.clone()));
        let mut df = Forward::new(&g, self.discriminator.params(), Mode::Train, self.rng.random());
        let d_fake = self.discriminator.forward(&mut df, speech, generated)?;
        let l_adv = -d_fake.mean_all();
        let loss = parts[3] + l_adv.scale(self.cfg.adv_weight);

        let record = LossRecord {
            step: self.step,
            phase: Phase::Generator,
            l_d: None,
            penalty: None,
            recon: recon_values(&parts),
            l_adv: l_adv.item(),
        };
        if record.values().any(|v| !v.is_finite()) {
            return Err(self.fail("generator loss", writer));
        }

        let vars = gf.trainable_vars();
        let grads = g.grad(loss, &vars.iter().map(|(_, v)| *v).collect::<Vec<_>>());
        let grads: Vec<(usize, Tensor)> = vars
            .iter()
            .zip(grads)
            .map(|((i, _), gv)| (*i, (*gv.value()).clone()))
            .collect();
        if grads.iter().any(|(_, t)| non_finite(t)) {
            return Err(self.fail("generator gradient", writer));
        }
        self.opt_g.step(self.generator.params_mut(), &grads);
        apply_buffer_updates(self.generator.params_mut(), gf.take_buffer_updates());
        Ok(record)
    }
}

fn recon_values(parts: &[Var<'_>; 4]) -> ReconLoss {
    ReconLoss {
        gaze: parts[0].item(),
        head: parts[1].item(),
        au: parts[2].item(),
        total: parts[3].item(),
    }
}

/// Normalizes clips into time-major `(speech, behavior)` matrices.
pub fn normalize_clips(clips: &[ClipPair], norm: &NormStats) -> Vec<(Array2<f64>, Array2<f64>)> {
    clips
        .iter()
        .map(|c| {
            (
                norm.normalize_rows::<Speech>(c.speech.view()),
                norm.normalize_rows::<Behavior>(c.behavior.view()),
            )
        })
        .collect()
}

fn open_log(path: &Path) -> Result<BufWriter<File>, TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{LOSS_LOG_HEADER}")?;
    }
    Ok(w)
}

/// Trains a fresh generator and critic on `clips` (raw units; normalized
/// here with `norm`). Each iteration runs `n_critic` critic steps and one
/// generator step on the same real batch, with fresh noise, mismatch pairs
/// and interpolation weights per step.
pub fn train(
    clips: &[ClipPair],
    norm: &NormStats,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    arch.validate()?;
    if clips.is_empty() {
        return Err(TrainError::NoClips);
    }
    if let Some(c) = clips.iter().find(|c| c.len() != arch.seq_len) {
        return Err(TrainError::Shape(format!(
            "clip {} has {} frames, architecture expects {}",
            c.id(),
            c.len(),
            arch.seq_len
        )));
    }
    let data = normalize_clips(clips, norm);
    let mut speaking = Vec::new();
    let mut listening = Vec::new();
    for c in clips {
        match classify_clip(c, cfg.turn_threshold) {
            TurnKind::Speaking => speaking.push(c),
            TurnKind::Listening => listening.push(c),
            TurnKind::Mixed => {}
        }
    }
    // Mismatch pools hold normalized copies so they mix with generated batches.
    let normalized: Vec<ClipPair> = clips
        .iter()
        .zip(&data)
        .map(|(c, (s, b))| ClipPair {
            speech: s.clone(),
            behavior: b.clone(),
            source_id: c.source_id.clone(),
            role: c.role,
            start_frame: c.start_frame,
        })
        .collect();
    let lookup = |pool: Vec<&ClipPair>| -> Vec<&ClipPair> {
        pool.into_iter()
            .map(|c| {
                let i = clips.iter().position(|x| std::ptr::eq(x, c)).unwrap();
                &normalized[i]
            })
            .collect()
    };
    let speaking = lookup(speaking);
    let listening = lookup(listening);
    log::info!(
        "{} clips: {} speaking, {} listening",
        clips.len(),
        speaking.len(),
        listening.len()
    );

    let generator = Generator::new(arch.clone(), cfg.seed)?;
    let discriminator = Discriminator::new(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut trainer = Trainer {
        cfg,
        opt_g: Adam::new(generator.params(), cfg.lr_generator, cfg.adam_beta1, cfg.adam_beta2),
        opt_d: Adam::new(
            discriminator.params(),
            cfg.lr_discriminator,
            cfg.adam_beta1,
            cfg.adam_beta2,
        ),
        generator,
        discriminator,
        rng,
        speaking,
        listening,
        step: 0,
    };

    let mut log = outputs.loss_log.as_deref().map(open_log).transpose()?;
    let mut writer = CheckpointWriter::spawn();
    let mut records = Vec::new();
    let mut iteration: u64 = 0;
    let snapshot = |t: &Trainer<'_>| Checkpoint {
        generator: t.generator.clone(),
        discriminator: t.discriminator.clone(),
        norm_stats: Some(norm.clone()),
        step: t.step,
    };

    let result: Result<(), TrainError> = (|| {
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut trainer.rng);
            for chunk in order.chunks(cfg.batch_size) {
                let s: Vec<_> = chunk.iter().map(|&i| data[i].0.view()).collect();
                let b: Vec<_> = chunk.iter().map(|&i| data[i].1.view()).collect();
                let batch = Batch {
                    speech: to_channels_first(&s),
                    behavior: to_channels_first(&b),
                };
                for _ in 0..cfg.n_critic {
                    let r = trainer.critic_step(&batch, &writer)?;
                    if let Some(w) = log.as_mut() {
                        writeln!(w, "{}", r.to_line())?;
                    }
                    records.push(r);
                    trainer.step += 1;
                }
                let r = trainer.generator_step(&batch, &writer)?;
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", r.to_line())?;
                    w.flush()?;
                }
                records.push(r);
                trainer.step += 1;
                iteration += 1;
                log::debug!(
                    "epoch {epoch} iteration {iteration}: L_G {:.5} L_adv {:.5}",
                    r.recon.total,
                    r.l_adv
                );
                if let Some(dir) = &outputs.checkpoint_dir {
                    if iteration % cfg.checkpoint_interval as u64 == 0 {
                        writer.send(dir.join(format!("step_{iteration:08}.ckpt")), snapshot(&trainer));
                    }
                }
            }
            log::info!(
                "epoch {} done, L_G {:.5}",
                epoch + 1,
                records.last().map_or(f64::NAN, |r| r.recon.total)
            );
        }
        Ok(())
    })();

    if let Err(e) = result {
        // Keep whatever was already queued; nothing from the failed step is saved.
        let _ = writer.finish();
        return Err(e);
    }
    let checkpoint = snapshot(&trainer);
    if let Some(dir) = &outputs.checkpoint_dir {
        writer.send(dir.join("final.ckpt"), checkpoint.clone());
    }
    let checkpoint_paths = writer.finish()?;
    Ok(TrainOutcome {
        checkpoint,
        records,
        checkpoint_paths,
        iterations: iteration,
    })
}

/// Inference-mode reconstruction loss over normalized clips, pooled over
/// all frames, with noise drawn from `seed`.
pub fn evaluate_reconstruction(
    generator: &Generator,
    data: &[(Array2<f64>, Array2<f64>)],
    seed: u64,
) -> Result<ReconLoss, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speech: Vec<_> = data.iter().map(|(s, _)| s.view()).collect();
    let noise: Vec<_> = data.iter().map(|_| make_noise(&mut rng)).collect();
    let generated = generator.generate_batch(&speech, &noise)?;
    let stack = |ms: Vec<ArrayView2<'_, f64>>| ndarray::concatenate(ndarray::Axis(0), &ms);
    let g = stack(generated.iter().map(|m| m.view()).collect()).map_err(|e| TrainError::Shape(e.to_string()))?;
    let r = stack(data.iter().map(|(_, b)| b.view()).collect()).map_err(|e| TrainError::Shape(e.to_string()))?;
    reconstruction_loss(g.view(), r.view())
}
