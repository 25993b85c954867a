//! Speech-conditioned critic.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talkface_core::domain::SPEECH_DIM;

use crate::arch::{check_shape, ArchConfig, ModelError, ENCODER_BLOCKS};
use crate::autograd::{Graph, Var};
use crate::generator::same_layout;
use crate::nn::{to_channels_first, DoubleConv, Forward, Linear, Mode, ParamSet};

const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct Discriminator {
    arch: ArchConfig,
    params: ParamSet,
    speech_encoder: DoubleConv,
    behavior_encoder: DoubleConv,
    blocks: Vec<DoubleConv>,
    linear: Linear,
}

impl Discriminator {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut ps = ParamSet::new();
        let (k, p) = (arch.kernel_size, arch.dropout_rate);
        let enc = &arch.encoder_channels;

        let speech_encoder = DoubleConv::new(&mut ps, &mut rng, "speech", SPEECH_DIM, enc[0], k, p);
        let behavior_encoder = DoubleConv::new(
            &mut ps,
            &mut rng,
            "behavior",
            arch.behavior_channels(),
            enc[0],
            k,
            p,
        );
        let mut blocks = Vec::with_capacity(ENCODER_BLOCKS - 1);
        let mut cin = 2 * enc[0];
        for (b, &w) in enc.iter().enumerate().skip(1) {
            blocks.push(DoubleConv::new(&mut ps, &mut rng, &format!("block{b}"), cin, w, k, p));
            cin = w;
        }
        let flat = cin * arch.bottleneck_len();
        let linear = Linear::new(&mut ps, &mut rng, "linear", flat, 1);

        Ok(Self {
            arch,
            params: ps,
            speech_encoder,
            behavior_encoder,
            blocks,
            linear,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn load_params(&mut self, params: ParamSet) -> Result<(), ModelError> {
        same_layout("discriminator", &self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// Scores `speech: [N, 22, L]` against `behavior: [N, 28, L]`, returning `[N, 1]`.
    pub fn forward<'g>(
        &self,
        f: &mut Forward<'g>,
        speech: Var<'g>,
        behavior: Var<'g>,
    ) -> Result<Var<'g>, ModelError> {
        let n = speech.shape()[0];
        let l = self.arch.seq_len;
        check_shape("critic speech input", &[n, SPEECH_DIM, l], &speech.shape())?;
        check_shape(
            "critic behavior input",
            &[n, self.arch.behavior_channels(), l],
            &behavior.shape(),
        )?;
        let s = self.speech_encoder.forward(f, speech);
        let b = self.behavior_encoder.forward(f, behavior);
        let mut h = Var::concat(&[s, b]);
        for block in &self.blocks {
            h = block.forward(f, h).max_pool2();
        }
        let shape = h.shape();
        let y = self.linear.forward(f, h.reshape(&[n, shape[1] * shape[2]]));
        Ok(if self.arch.critic_sigmoid { y.sigmoid() } else { y })
    }

    /// Inference scores for time-major `[L, 22]` / `[L, 28]` pairs.
    pub fn score_batch(
        &self,
        speech: &[ArrayView2<'_, f64>],
        behavior: &[ArrayView2<'_, f64>],
    ) -> Result<Vec<f64>, ModelError> {
        let l = self.arch.seq_len;
        if speech.len() != behavior.len() {
            return Err(ModelError::Shape {
                layer: "critic batch".into(),
                expected: vec![speech.len()],
                got: vec![behavior.len()],
            });
        }
        for (s, b) in speech.iter().zip(behavior) {
            check_shape("critic speech input", &[l, SPEECH_DIM], s.shape())?;
            check_shape("critic behavior input", &[l, self.arch.behavior_channels()], b.shape())?;
        }
        let g = Graph::new();
        let mut f = Forward::new(&g, &self.params, Mode::Eval, 0);
        let sv = g.leaf(to_channels_first(speech));
        let bv = g.leaf(to_channels_first(behavior));
        let y = self.forward(&mut f, sv, bv)?;
        Ok(y.value().iter().copied().collect())
    }
}
