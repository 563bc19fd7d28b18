//! Frozen-encoder / trainable-decoder volumetric segmenter.
//!
//! The encoder embeds the input into a feature map at 1/patch resolution:
//! a patch convolution (kernel = stride = patch) followed by two padded
//! 3x3x3 convolutions with ReLU. Its parameters are initialized from a
//! dedicated encoder seed and never change; nothing in the public API can
//! mutate them, and the encoder runs as plain array code outside any
//! differentiation graph.
//!
//! The decoder maps features back to a full-resolution logit volume: one
//! padded 3x3x3 convolution with ReLU, nearest-neighbor upsampling by the
//! patch factor, and a 1x1x1 projection to a single logit channel. Decoder
//! parameters are the only trainable state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv, Graph, Tensor};
use crate::error::{Error, Result};
use crate::formats::{Checkpoint, Mask, NamedTensor, Volume};
use crate::rng::GaussStream;
use crate::synthdata::{encode_prompt_map, PromptPoints};

/// Architecture parameters. Defaults give a ~3.5k-parameter decoder over a
/// 16-channel feature map, sized for 32-cubed volumes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// When true the input carries two extra Gaussian click channels
    /// (foreground and background prompts) alongside the intensity volume.
    pub guided: bool,
    /// Encoder feature channels.
    pub enc_channels: usize,
    /// Decoder hidden channels.
    pub dec_channels: usize,
    /// Patch embedding kernel/stride; also the upsampling factor. Every
    /// spatial extent must be divisible by it.
    pub patch: usize,
    /// Seed for the frozen encoder's initialization. Deliberately separate
    /// from run seeds: all runs share one encoder.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { guided: true, enc_channels: 16, dec_channels: 8, patch: 4, encoder_seed: 7177 }
    }
}

impl ModelConfig {
    /// Input channels: intensity plus optional prompt maps.
    pub fn in_channels(&self) -> usize {
        if self.guided {
            3
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels == 0 || self.dec_channels == 0 || self.patch == 0 {
            return Err(Error::InvalidArgument("model channel counts and patch must be positive".to_string()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Model state split into the frozen encoder section and the trainable
/// decoder section. The encoder is only exposed read-only; the type system
/// is the freeze mechanism.
#[derive(Debug, Clone)]
pub struct ParamStore {
    encoder: Vec<Param>,
    decoder: Vec<Param>,
}

/// Order of decoder parameters in [`ParamStore::decoder`], relied on by
/// [`decode`].
const DEC_CONV_W: usize = 0;
const DEC_CONV_B: usize = 1;
const DEC_OUT_W: usize = 2;
const DEC_OUT_B: usize = 3;

impl ParamStore {
    /// Initialize both sections: the encoder from `cfg.encoder_seed`, the
    /// decoder from `decoder_seed`. Weights are He-normal
    /// (std = sqrt(2 / fan_in)), biases zero.
    pub fn init(cfg: &ModelConfig, decoder_seed: u64) -> Result<ParamStore> {
        cfg.validate()?;
        let (c_in, e, d, p) = (cfg.in_channels(), cfg.enc_channels, cfg.dec_channels, cfg.patch);
        let mut enc_rng = GaussStream::new(cfg.encoder_seed);
        let encoder = vec![
            he_conv(&mut enc_rng, "enc.patch.w", vec![e, c_in, p, p, p]),
            zero_param("enc.patch.b", vec![e]),
            he_conv(&mut enc_rng, "enc.conv1.w", vec![e, e, 3, 3, 3]),
            zero_param("enc.conv1.b", vec![e]),
            he_conv(&mut enc_rng, "enc.conv2.w", vec![e, e, 3, 3, 3]),
            zero_param("enc.conv2.b", vec![e]),
        ];
        let mut dec_rng = GaussStream::new(decoder_seed);
        let decoder = vec![
            he_conv(&mut dec_rng, "dec.conv.w", vec![d, e, 3, 3, 3]),
            zero_param("dec.conv.b", vec![d]),
            he_conv(&mut dec_rng, "dec.out.w", vec![1, d, 1, 1, 1]),
            zero_param("dec.out.b", vec![1]),
        ];
        Ok(ParamStore { encoder, decoder })
    }

    pub fn encoder(&self) -> &[Param] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Param] {
        &self.decoder
    }

    /// Mutable access to the trainable section only.
    pub fn decoder_mut(&mut self) -> &mut [Param] {
        &mut self.decoder
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.iter().map(Param::numel).sum()
    }

    /// Little-endian byte serialization of the encoder section, for
    /// freeze-invariance comparisons.
    pub fn encoder_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.encoder {
            out.extend_from_slice(p.name.as_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let section = |params: &[Param]| {
            params
                .iter()
                .map(|p| NamedTensor { name: p.name.clone(), shape: p.shape.clone(), data: p.data.clone() })
                .collect()
        };
        Checkpoint {
            config_hash: config_hash.to_string(),
            encoder: section(&self.encoder),
            decoder: section(&self.decoder),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ParamStore> {
        let section = |tensors: &[NamedTensor]| -> Result<Vec<Param>> {
            tensors
                .iter()
                .map(|t| {
                    let numel: usize = t.shape.iter().product();
                    if t.data.len() != numel {
                        return Err(Error::Data(format!(
                            "checkpoint tensor {} has {} values for shape {:?}",
                            t.name,
                            t.data.len(),
                            t.shape
                        )));
                    }
                    Ok(Param { name: t.name.clone(), shape: t.shape.clone(), data: t.data.clone() })
                })
                .collect()
        };
        let store = ParamStore { encoder: section(&ckpt.encoder)?, decoder: section(&ckpt.decoder)? };
        if store.decoder.len() != 4 {
            return Err(Error::Data(format!("checkpoint decoder has {} tensors, expected 4", store.decoder.len())));
        }
        Ok(store)
    }
}

fn he_conv(rng: &mut GaussStream, name: &str, shape: Vec<usize>) -> Param {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| std * rng.next()).collect();
    Param { name: name.to_string(), shape, data }
}

fn zero_param(name: &str, shape: Vec<usize>) -> Param {
    let numel: usize = shape.iter().product();
    Param { name: name.to_string(), shape, data: vec![0.0; numel] }
}

/// Assemble the model input for one sample: the intensity volume plus, in
/// guided mode, Gaussian click maps for the foreground and background
/// prompts. Returns the channel-major buffer and its shape.
pub fn build_input(cfg: &ModelConfig, volume: &Volume, prompts: Option<&PromptPoints>, sigma_mm: f64) -> Result<(Vec<f64>, [usize; 4])> {
    let [nx, ny, nz] = volume.dims;
    // Tensor axes are [c, z, y, x] so the x-fastest volume buffer maps
    // straight into one channel.
    let shape = [cfg.in_channels(), nz, ny, nx];
    let mut data = Vec::with_capacity(shape.iter().product());
    data.extend_from_slice(&volume.data);
    if cfg.guided {
        let p = prompts.ok_or_else(|| Error::InvalidArgument("guided model input requires prompts".to_string()))?;
        data.extend(encode_prompt_map(volume.dims, volume.spacing, p.fg, sigma_mm)?);
        data.extend(encode_prompt_map(volume.dims, volume.spacing, p.bg, sigma_mm)?);
    }
    Ok((data, shape))
}

/// Run the frozen encoder on an input buffer. Pure array code: no graph is
/// recorded and no gradient can flow back through this call.
pub fn encode(cfg: &ModelConfig, store: &ParamStore, input: &[f64], in_shape: [usize; 4]) -> Result<(Vec<f64>, [usize; 4])> {
    cfg.validate()?;
    if in_shape[0] != cfg.in_channels() {
        return Err(Error::shape(
            "encode",
            format!("input has {} channels, model expects {}", in_shape[0], cfg.in_channels()),
        ));
    }
    if in_shape[1..].iter().any(|&d| d % cfg.patch != 0) {
        return Err(Error::shape(
            "encode",
            format!("spatial dims {:?} not divisible by patch {}", &in_shape[1..], cfg.patch),
        ));
    }
    let enc = &store.encoder;
    let (w, b) = (&enc[0], &enc[1]);
    let ws: [usize; 5] = w.shape.as_slice().try_into().expect("patch weight rank");
    let mut shape = conv::out_shape(&in_shape, &ws, cfg.patch, 0)
        .ok_or_else(|| Error::shape("encode", format!("patch kernel does not fit input {in_shape:?}")))?;
    let mut data = conv::forward(input, &in_shape, &w.data, &ws, cfg.patch, 0);
    add_channel_bias(&mut data, &shape, &b.data);

    for layer in [2usize, 4] {
        let (w, b) = (&enc[layer], &enc[layer + 1]);
        let ws: [usize; 5] = w.shape.as_slice().try_into().expect("conv weight rank");
        let next_shape = conv::out_shape(&shape, &ws, 1, 1).expect("padded conv preserves extent");
        let mut next = conv::forward(&data, &shape, &w.data, &ws, 1, 1);
        add_channel_bias(&mut next, &next_shape, &b.data);
        for v in &mut next {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        data = next;
        shape = next_shape;
    }
    Ok((data, shape))
}

fn add_channel_bias(data: &mut [f64], shape: &[usize; 4], bias: &[f64]) {
    let per_channel = shape[1] * shape[2] * shape[3];
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut data[c * per_channel..(c + 1) * per_channel] {
            *v += b;
        }
    }
}

/// Decoder parameters as graph tensors, in [`ParamStore::decoder`] order.
pub struct DecoderTensors {
    pub tensors: Vec<Tensor>,
}

/// Register the decoder parameters as leaves of `g` so they can be trained.
pub fn decoder_leaves(g: &mut Graph, store: &ParamStore) -> Result<DecoderTensors> {
    let tensors = store
        .decoder
        .iter()
        .map(|p| g.leaf(p.data.clone(), p.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderTensors { tensors })
}

/// Decoder parameters as plain constants, for inference.
pub fn decoder_constants(store: &ParamStore) -> Result<DecoderTensors> {
    let tensors = store
        .decoder
        .iter()
        .map(|p| Tensor::new(p.data.clone(), p.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderTensors { tensors })
}

/// Run the decoder on a feature map, producing a full-resolution logit
/// volume of shape `[nz, ny, nx]`.
pub fn decode(g: &mut Graph, cfg: &ModelConfig, z: &Tensor, params: &DecoderTensors) -> Result<Tensor> {
    if z.shape().len() != 4 || z.shape()[0] != cfg.enc_channels {
        return Err(Error::shape(
            "decode",
            format!("feature map shape {:?} does not match {} encoder channels", z.shape(), cfg.enc_channels),
        ));
    }
    let hidden = conv_bias_block(g, z, &params.tensors[DEC_CONV_W], &params.tensors[DEC_CONV_B], 1, 1)?;
    let hidden = g.relu(&hidden)?;
    let up = upsample_nearest(g, &hidden, cfg.patch)?;
    let logits = conv_bias_block(g, &up, &params.tensors[DEC_OUT_W], &params.tensors[DEC_OUT_B], 1, 0)?;
    let s = logits.shape().to_vec();
    // Drop the single channel axis.
    g.reshape(&logits, s[1..].to_vec())
}

fn conv_bias_block(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let y = g.conv3d(x, w, stride, pad)?;
    let c = y.shape()[0];
    let b4 = g.reshape(b, vec![c, 1, 1, 1])?;
    let bb = g.broadcast(&b4, y.shape().to_vec())?;
    g.add(&y, &bb)
}

/// Nearest-neighbor upsampling by an integer factor, expressed through
/// reshape and broadcast so its adjoint needs no dedicated kernel.
fn upsample_nearest(g: &mut Graph, t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("upsample", format!("expected rank 4, got {s:?}")));
    }
    let (c, d0, d1, d2) = (s[0], s[1], s[2], s[3]);
    let narrow = g.reshape(t, vec![c, d0, 1, d1, 1, d2, 1])?;
    let wide = g.broadcast(&narrow, vec![c, d0, factor, d1, factor, d2, factor])?;
    g.reshape(&wide, vec![c, d0 * factor, d1 * factor, d2 * factor])
}

/// Threshold probabilities at 0.5 into a mask (0.5 itself maps to
/// foreground, matching the calibration metrics' tie rule).
pub fn probs_to_mask(probs: &[f64], dims: [usize; 3], spacing: [f64; 3]) -> Result<Mask> {
    let data = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    Mask::new(dims, spacing, data)
}
