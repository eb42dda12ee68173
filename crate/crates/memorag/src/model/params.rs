use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;

use super::config::ModelConfig;
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Noise added to base projections when initializing memory projections.
const MEM_INIT_NOISE: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
    pub w_qm: Option<Tensor>,
    pub w_km: Option<Tensor>,
    pub w_vm: Option<Tensor>,
}

/// All model weights. Base transformer weights are frozen during memory
/// training; memory projections and memory-token embeddings are trainable.
/// The output head is tied to `token_embeddings`.
#[derive(Clone, Debug)]
pub struct Parameters {
    pub config: ModelConfig,
    pub token_embeddings: Tensor,
    pub mem_token_embeddings: Option<Tensor>,
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let token_embeddings = Tensor::randn(vec![config.vocab_size, d], std, &mut rng);
        let mem_token_embeddings = if config.mem_enabled {
            Some(Tensor::randn(vec![config.mem_k, d], std, &mut rng))
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let w_q = Tensor::randn(vec![d, d], std, &mut rng);
            let w_k = Tensor::randn(vec![d, d], std, &mut rng);
            let w_v = Tensor::randn(vec![d, d], std, &mut rng);
            let w_o = Tensor::randn(vec![d, d], std, &mut rng);
            let w_ff1 = Tensor::randn(vec![d, d * config.ffn_mult], std, &mut rng);
            let w_ff2 = Tensor::randn(vec![d * config.ffn_mult, d], std, &mut rng);
            let (w_qm, w_km, w_vm) = if config.mem_enabled {
                // Memory projections start as noisy copies of the base projections.
                let noisy = |w: &Tensor, rng: &mut ChaCha8Rng| {
                    let noise = Tensor::randn(w.shape.clone(), MEM_INIT_NOISE, rng);
                    let values = w.values.iter().zip(&noise.values).map(|(a, b)| a + b).collect();
                    Some(Tensor::new(w.shape.clone(), values))
                };
                (noisy(&w_q, &mut rng), noisy(&w_k, &mut rng), noisy(&w_v, &mut rng))
            } else {
                (None, None, None)
            };
            layers.push(LayerParams { w_q, w_k, w_v, w_o, w_ff1, w_ff2, w_qm, w_km, w_vm });
        }
        Ok(Parameters { config, token_embeddings, mem_token_embeddings, layers })
    }

    /// All weight tensors in checkpoint declaration order, with the field
    /// name and whether the tensor is trainable during memory training.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out: Vec<(String, &Tensor, bool)> = Vec::new();
        out.push(("token_embeddings".into(), &self.token_embeddings, false));
        if let Some(m) = &self.mem_token_embeddings {
            out.push(("mem_token_embeddings".into(), m, true));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), &l.w_q, false));
            out.push((format!("layer{i}.w_k"), &l.w_k, false));
            out.push((format!("layer{i}.w_v"), &l.w_v, false));
            out.push((format!("layer{i}.w_o"), &l.w_o, false));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1, false));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2, false));
            if let Some(t) = &l.w_qm {
                out.push((format!("layer{i}.w_qm"), t, true));
            }
            if let Some(t) = &l.w_km {
                out.push((format!("layer{i}.w_km"), t, true));
            }
            if let Some(t) = &l.w_vm {
                out.push((format!("layer{i}.w_vm"), t, true));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out: Vec<(String, &mut Tensor, bool)> = Vec::new();
        out.push(("token_embeddings".into(), &mut self.token_embeddings, false));
        if let Some(m) = &mut self.mem_token_embeddings {
            out.push(("mem_token_embeddings".into(), m, true));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), &mut l.w_q, false));
            out.push((format!("layer{i}.w_k"), &mut l.w_k, false));
            out.push((format!("layer{i}.w_v"), &mut l.w_v, false));
            out.push((format!("layer{i}.w_o"), &mut l.w_o, false));
            out.push((format!("layer{i}.w_ff1"), &mut l.w_ff1, false));
            out.push((format!("layer{i}.w_ff2"), &mut l.w_ff2, false));
            if let Some(t) = &mut l.w_qm {
                out.push((format!("layer{i}.w_qm"), t, true));
            }
            if let Some(t) = &mut l.w_km {
                out.push((format!("layer{i}.w_km"), t, true));
            }
            if let Some(t) = &mut l.w_vm {
                out.push((format!("layer{i}.w_vm"), t, true));
            }
        }
        out
    }

    /// FNV-1a over the config and every weight value, used for the
    /// memory-compatibility check.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv1a_init();
        for x in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
            self.config.ffn_mult,
            self.config.window_l,
            self.config.mem_k,
            self.config.max_seq,
            self.config.mem_enabled as usize,
        ] {
            h = fnv1a_u64(h, x as u64);
        }
        for (_, t, _) in self.tensors() {
            for &v in &t.values {
                h = fnv1a_u64(h, v.to_bits());
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for x in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
            self.config.ffn_mult,
            self.config.window_l,
            self.config.mem_k,
            self.config.max_seq,
            self.config.mem_enabled as usize,
        ] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for (_, t, _) in self.tensors() {
            for &v in &t.values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            vocab_size: read_u32(&mut r)? as usize,
            d_model: read_u32(&mut r)? as usize,
            n_layers: read_u32(&mut r)? as usize,
            n_heads: read_u32(&mut r)? as usize,
            ffn_mult: read_u32(&mut r)? as usize,
            window_l: read_u32(&mut r)? as usize,
            mem_k: read_u32(&mut r)? as usize,
            max_seq: read_u32(&mut r)? as usize,
            mem_enabled: read_u32(&mut r)? != 0,
        };
        config.validate()?;
        // Build a skeleton with the right shapes, then fill values from disk.
        let mut params = Parameters::init(config, 0)?;
        for (_, t, _) in params.tensors_mut() {
            for v in t.values.iter_mut() {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf) as f64;
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ModelError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(params)
    }
}

pub fn fnv1a_init() -> u64 {
    0xcbf29ce484222325
}

pub fn fnv1a_u64(mut h: u64, x: u64) -> u64 {
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
