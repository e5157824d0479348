//! Encoder and decoder networks plus checkpoint persistence.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ftns;
use crate::image::Image;
use crate::layers::{Layer, LayerKind, RunningStats, Sequential};
use crate::seeds;
use crate::tensor::{FeatureMap, Tensor};

/// Images encoded per eval-mode forward call.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Three conv-BN-ReLU blocks, output stride 2.
    Tiny,
    /// Passes precomputed feature maps through unchanged.
    Identity,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub kind: EncoderKind,
    pub net: Sequential,
    pub channels: usize,
    pub stride: usize,
}

fn conv_bn_relu(cin: usize, cout: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> [Layer; 3] {
    [
        Layer::conv2d(cin, cout, 3, stride, rng),
        Layer::batch_norm2d(cout),
        Layer::relu(),
    ]
}

impl EncoderModel {
    /// conv3x3(3->16), stride-2 conv3x3(16->32), conv3x3(32->32), each
    /// followed by batch norm and ReLU.
    pub fn tiny(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "encoder-init", &[]);
        let mut layers = Vec::new();
        layers.extend(conv_bn_relu(3, 16, 1, &mut rng));
        layers.extend(conv_bn_relu(16, 32, 2, &mut rng));
        layers.extend(conv_bn_relu(32, 32, 1, &mut rng));
        EncoderModel {
            kind: EncoderKind::Tiny,
            net: Sequential::new(layers),
            channels: 32,
            stride: 2,
        }
    }

    pub fn identity(channels: usize) -> Self {
        EncoderModel {
            kind: EncoderKind::Identity,
            net: Sequential::default(),
            channels,
            stride: 1,
        }
    }

    /// Eval-mode forward of a `[N, C_in, H, W]` batch.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.net.infer(batch)?;
        if out.ndim() != 4 || out.dim(1) != self.channels {
            return Err(Error::dim(format!(
                "encoder produced {:?}, expected {} channels",
                out.shape(),
                self.channels
            )));
        }
        Ok(out)
    }

    pub fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        let t = image.to_tensor();
        let shape = t.shape().to_vec();
        let out = self.infer(&t.reshape(&[1, shape[0], shape[1], shape[2]])?)?;
        Ok(out.select(0))
    }

    /// Encodes many images in eval mode; output order matches input.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<FeatureMap>> {
        let chunks: Vec<Result<Vec<FeatureMap>>> = images
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let ts: Vec<Tensor> = chunk.iter().map(|i| i.to_tensor()).collect();
                let refs: Vec<&Tensor> = ts.iter().collect();
                let out = self.infer(&Tensor::stack(&refs)?)?;
                Ok((0..chunk.len()).map(|i| out.select(i)).collect())
            })
            .collect();
        let mut all = Vec::with_capacity(images.len());
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    /// Feature-map size for an `h x w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Per-level training heads: conv3x3-BN-ReLU twice, a 1x1 conv to the
/// level's label count, then bilinear upsampling to image size.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub heads: Vec<Sequential>,
    pub label_counts: Vec<usize>,
}

impl DecoderModel {
    pub fn new(channels: usize, label_counts: &[usize], image_size: (usize, usize), seed: u64) -> Self {
        let heads = label_counts
            .iter()
            .enumerate()
            .map(|(l, &k)| {
                let mut rng = seeds::rng(seed, "decoder-init", &[l as u64]);
                let mut layers = Vec::new();
                layers.extend(conv_bn_relu(channels, channels, 1, &mut rng));
                layers.extend(conv_bn_relu(channels, channels, 1, &mut rng));
                layers.push(Layer::conv2d(channels, k, 1, 1, &mut rng));
                layers.push(Layer::bilinear_upsample(image_size.0, image_size.1));
                Sequential::new(layers)
            })
            .collect();
        DecoderModel {
            heads,
            label_counts: label_counts.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `baseline`, `spfl_single_level`, `spfl_hierarchy`, ...
    pub role: String,
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct NetworkManifest {
    layers: Vec<LayerKind>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    meta: CheckpointMeta,
    encoder_kind: EncoderKind,
    channels: usize,
    stride: usize,
    encoder: NetworkManifest,
    decoders: Vec<NetworkManifest>,
    label_counts: Vec<usize>,
    fingerprint: String,
}

/// An encoder (and optionally its training decoders) with metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub encoder: EncoderModel,
    pub decoders: Option<DecoderModel>,
}

fn layer_tensors(layer: &Layer) -> Vec<(&'static str, Tensor)> {
    let mut out = Vec::new();
    if layer.has_params() {
        out.push(("weights", layer.params.weights.clone()));
        out.push(("bias", layer.params.bias.clone()));
    }
    if let Some(rs) = layer.running_stats() {
        out.push(("running_mean", Tensor::from_vec(rs.mean.clone())));
        out.push(("running_var", Tensor::from_vec(rs.var.clone())));
    }
    out
}

fn hash_network(hasher: &mut Sha256, net: &Sequential) -> Result<()> {
    for layer in &net.layers {
        hasher.update(serde_json::to_vec(layer.kind())?);
        for (name, t) in layer_tensors(layer) {
            hasher.update(name.as_bytes());
            hasher.update(ftns::encode_f32(&t)?);
        }
    }
    Ok(())
}

fn save_network(dir: &Path, prefix: &str, net: &Sequential) -> Result<NetworkManifest> {
    for (i, layer) in net.layers.iter().enumerate() {
        for (name, t) in layer_tensors(layer) {
            ftns::write_tensor(dir.join(format!("{prefix}_{i:02}_{name}.ftns")), &t)?;
        }
    }
    Ok(NetworkManifest {
        layers: net.layers.iter().map(|l| l.kind().clone()).collect(),
    })
}

fn load_network(dir: &Path, prefix: &str, manifest: &NetworkManifest) -> Result<Sequential> {
    let mut layers = Vec::new();
    for (i, kind) in manifest.layers.iter().enumerate() {
        let file = |name: &str| dir.join(format!("{prefix}_{i:02}_{name}.ftns"));
        let layer = match kind {
            LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => Layer::from_parts(
                kind.clone(),
                ftns::read_tensor(file("weights"))?,
                ftns::read_tensor(file("bias"))?,
                None,
            )?,
            LayerKind::BatchNorm2d { .. } => {
                let mean_path = file("running_mean");
                let running = if mean_path.exists() {
                    Some(RunningStats {
                        mean: ftns::read_tensor(mean_path)?.into_data(),
                        var: ftns::read_tensor(file("running_var"))?.into_data(),
                    })
                } else {
                    None
                };
                Layer::from_parts(
                    kind.clone(),
                    ftns::read_tensor(file("weights"))?,
                    ftns::read_tensor(file("bias"))?,
                    running,
                )?
            }
            LayerKind::Relu => Layer::relu(),
            LayerKind::Dropout { rate } => Layer::dropout(*rate, 0),
            LayerKind::BilinearUpsample { height, width } => Layer::bilinear_upsample(*height, *width),
        };
        layers.push(layer);
    }
    Ok(Sequential::new(layers))
}

impl Checkpoint {
    /// SHA-256 over topology and every stored tensor, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hash_network(&mut hasher, &self.encoder.net)?;
        if let Some(d) = &self.decoders {
            for head in &d.heads {
                hash_network(&mut hasher, head)?;
            }
        }
        Ok(hex(&hasher.finalize()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let encoder = save_network(dir, "encoder", &self.encoder.net)?;
        let mut decoders = Vec::new();
        let mut label_counts = Vec::new();
        if let Some(d) = &self.decoders {
            for (l, head) in d.heads.iter().enumerate() {
                decoders.push(save_network(dir, &format!("decoder{}", l + 1), head)?);
            }
            label_counts = d.label_counts.clone();
        }
        let manifest = CheckpointManifest {
            meta: self.meta.clone(),
            encoder_kind: self.encoder.kind,
            channels: self.encoder.channels,
            stride: self.encoder.stride,
            encoder,
            decoders,
            label_counts,
            fingerprint: self.fingerprint()?,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        let encoder = EncoderModel {
            kind: m.encoder_kind,
            net: load_network(dir, "encoder", &m.encoder)?,
            channels: m.channels,
            stride: m.stride,
        };
        let decoders = if m.decoders.is_empty() {
            None
        } else {
            let heads = m
                .decoders
                .iter()
                .enumerate()
                .map(|(l, d)| load_network(dir, &format!("decoder{}", l + 1), d))
                .collect::<Result<Vec<_>>>()?;
            Some(DecoderModel {
                heads,
                label_counts: m.label_counts.clone(),
            })
        };
        let ck = Checkpoint {
            meta: m.meta,
            encoder,
            decoders,
        };
        if ck.fingerprint()? != m.fingerprint {
            return Err(Error::Data(format!("checkpoint {} fails its fingerprint check", dir.display())));
        }
        Ok(ck)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a serializable value's JSON form, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}
