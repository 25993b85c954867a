//! 1-D U-Net generator: a shared speech encoder and one decoder per
//! behavior group (gaze, head, AUs).

use ndarray::{Array2, ArrayView2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talkface_core::domain::SPEECH_DIM;

use crate::arch::{check_shape, ArchConfig, ModelError, DECODER_STAGES, ENCODER_BLOCKS};
use crate::autograd::{Graph, Tensor, Var};
use crate::nn::{to_channels_first, to_time_major, Conv, DoubleConv, Forward, Mode, ParamSet};
use crate::noise::NoiseVector;

const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone)]
struct Decoder {
    stages: Vec<DoubleConv>,
    out: Conv,
}

#[derive(Debug, Clone)]
pub struct Generator {
    arch: ArchConfig,
    params: ParamSet,
    encoder: Vec<DoubleConv>,
    decoders: Vec<Decoder>,
    pads: [usize; DECODER_STAGES],
}

impl Generator {
    /// Builds and initializes a generator; `seed` fixes the initial weights.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let pads = arch.decoder_padding()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut ps = ParamSet::new();
        let (k, p) = (arch.kernel_size, arch.dropout_rate);
        let enc = &arch.encoder_channels;

        let mut encoder = Vec::with_capacity(ENCODER_BLOCKS);
        let mut cin = arch.input_channels();
        for (b, &w) in enc.iter().enumerate() {
            encoder.push(DoubleConv::new(&mut ps, &mut rng, &format!("encoder{b}"), cin, w, k, p));
            cin = w;
        }

        let heads = [
            ("gaze", arch.gaze_channels),
            ("head", arch.head_channels),
            ("au", arch.au_channels),
        ];
        let mut decoders = Vec::with_capacity(heads.len());
        for (name, out_channels) in heads {
            let mut stages = Vec::with_capacity(DECODER_STAGES);
            let mut width = enc[ENCODER_BLOCKS - 1];
            for (s, &level) in arch.skip_levels.iter().enumerate() {
                let out = arch.decoder_width(s);
                stages.push(DoubleConv::new(
                    &mut ps,
                    &mut rng,
                    &format!("{name}.stage{s}"),
                    width + enc[level],
                    out,
                    k,
                    p,
                ));
                width = out;
            }
            let out = Conv::new(&mut ps, &mut rng, &format!("{name}.out"), width, out_channels, 1, true);
            decoders.push(Decoder { stages, out });
        }

        Ok(Self {
            arch,
            params: ps,
            encoder,
            decoders,
            pads,
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

    /// Replaces all tensors; names, shapes and trainable flags must match.
    pub fn load_params(&mut self, params: ParamSet) -> Result<(), ModelError> {
        same_layout("generator", &self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// Forward pass on `speech: [N, 22, L]` and folded `noise: [N, 200/L, L]`,
    /// returning `[N, 28, L]` in (0, 1).
    pub fn forward<'g>(
        &self,
        f: &mut Forward<'g>,
        speech: Var<'g>,
        noise: Var<'g>,
    ) -> Result<Var<'g>, ModelError> {
        let n = speech.shape()[0];
        let l = self.arch.seq_len;
        check_shape("generator speech input", &[n, SPEECH_DIM, l], &speech.shape())?;
        check_shape(
            "generator noise input",
            &[n, self.arch.noise_channels(), l],
            &noise.shape(),
        )?;

        let mut h = Var::concat(&[speech, noise]);
        let mut skips = Vec::with_capacity(ENCODER_BLOCKS);
        for (b, block) in self.encoder.iter().enumerate() {
            h = block.forward(f, h);
            skips.push(h);
            if b > 0 {
                h = h.max_pool2();
            }
        }

        let mut outputs = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let mut d = h;
            for (s, stage) in dec.stages.iter().enumerate() {
                d = d.upsample2();
                if self.pads[s] > 0 {
                    d = d.pad(2, 0, self.pads[s]);
                }
                d = stage.forward(f, Var::concat(&[d, skips[self.arch.skip_levels[s]]]));
            }
            outputs.push(dec.out.forward(f, d).sigmoid());
        }
        Ok(Var::concat(&outputs))
    }

    /// Inference on a batch of time-major `[L, 22]` speech windows.
    pub fn generate_batch(
        &self,
        speech: &[ArrayView2<'_, f64>],
        noise: &[NoiseVector],
    ) -> Result<Vec<Array2<f64>>, ModelError> {
        if speech.len() != noise.len() {
            return Err(ModelError::Shape {
                layer: "generator batch".into(),
                expected: vec![speech.len()],
                got: vec![noise.len()],
            });
        }
        for s in speech {
            check_shape(
                "generator speech input",
                &[self.arch.seq_len, SPEECH_DIM],
                s.shape(),
            )?;
        }
        let g = Graph::new();
        let mut f = Forward::new(&g, &self.params, Mode::Eval, 0);
        let sv = g.leaf(to_channels_first(speech));
        let nv = g.leaf(noise_tensor(noise, self.arch.seq_len));
        let y = self.forward(&mut f, sv, nv)?;
        Ok(to_time_major(&y.value()))
    }

    /// Inference on one `[L, 22]` window, returning `[L, 28]`.
    pub fn generate(
        &self,
        speech: ArrayView2<'_, f64>,
        noise: &NoiseVector,
    ) -> Result<Array2<f64>, ModelError> {
        Ok(self
            .generate_batch(&[speech], std::slice::from_ref(noise))?
            .remove(0))
    }
}

/// Stacks folded noise vectors into `[N, 200/L, L]`.
pub fn noise_tensor(noise: &[NoiseVector], seq_len: usize) -> Tensor {
    let folded: Vec<Array2<f64>> = noise.iter().map(|z| z.to_channels(seq_len)).collect();
    let c = folded.first().map_or(0, |m| m.nrows());
    Array3::from_shape_fn((noise.len(), c, seq_len), |(i, ch, t)| folded[i][[ch, t]]).into_dyn()
}

pub(crate) fn same_layout(net: &str, have: &ParamSet, new: &ParamSet) -> Result<(), ModelError> {
    if have.len() != new.len() {
        return Err(ModelError::Incompatible(format!(
            "{net} has {} tensors, got {}",
            have.len(),
            new.len()
        )));
    }
    for ((n1, v1, t1), (n2, v2, t2)) in have.iter().zip(new.iter()) {
        if n1 != n2 || v1.shape() != v2.shape() || t1 != t2 {
            return Err(ModelError::Incompatible(format!(
                "{net} tensor {n1} {:?} does not match {n2} {:?}",
                v1.shape(),
                v2.shape()
            )));
        }
    }
    Ok(())
}
