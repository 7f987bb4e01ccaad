//! Plain vision-transformer image encoder with the parameter layout of the
//! Segment Anything ViT image encoder, so externally supplied SAM weights can
//! be loaded. Only the transformer trunk is used; the SAM neck is not.
//!
//! Checkpoint name mapping (`<enc>` is the encoder's parameter prefix):
//!
//! | checkpoint key                                     | parameter                          |
//! |----------------------------------------------------|------------------------------------|
//! | `image_encoder.patch_embed.proj.{weight,bias}`     | `<enc>.patch_embed.proj.*`         |
//! | `image_encoder.pos_embed`                          | `<enc>.pos_embed` (grid-resampled) |
//! | `image_encoder.blocks.{i}.norm{1,2}.*`             | `<enc>.blocks.{i}.norm{1,2}.*`     |
//! | `image_encoder.blocks.{i}.attn.{qkv,proj}.*`       | `<enc>.blocks.{i}.attn.*`          |
//! | `image_encoder.blocks.{i}.attn.rel_pos_{h,w}`      | same, length-resampled             |
//! | `image_encoder.blocks.{i}.mlp.{lin1,lin2}.*`       | `<enc>.blocks.{i}.mlp.*`           |
//! | `image_encoder.neck.*`, prompt/mask decoder keys   | ignored                            |
//!
//! Keys without the `image_encoder.` prefix are accepted as well. Blocks beyond
//! the configured depth are ignored.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear};
use crate::ops;
use crate::params::{Init, Params};
use crate::{Error, Result};

const PIXEL_MEAN: [f64; 3] = [123.675 / 255.0, 116.28 / 255.0, 103.53 / 255.0];
const PIXEL_STD: [f64; 3] = [58.395 / 255.0, 57.12 / 255.0, 57.375 / 255.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub frozen: bool,
    /// Local attention window in tokens; 0 means every block attends globally.
    pub window_size: usize,
    /// Blocks that use global attention when `window_size > 0`.
    pub global_attn_indexes: Vec<usize>,
    pub use_rel_pos: bool,
    pub mlp_ratio: usize,
}

impl AttentionConfig {
    pub fn toy() -> Self {
        Self {
            blocks: 4,
            embed_dim: 192,
            heads: 3,
            patch: 16,
            frozen: true,
            window_size: 0,
            global_attn_indexes: Vec::new(),
            use_rel_pos: false,
            mlp_ratio: 4,
        }
    }

    /// SAM ViT-B layout.
    pub fn paper() -> Self {
        Self {
            blocks: 12,
            embed_dim: 768,
            heads: 12,
            patch: 16,
            frozen: true,
            window_size: 14,
            global_attn_indexes: vec![2, 5, 8, 11],
            use_rel_pos: true,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention encoder: embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch == 0 {
            return Err(Error::Config("attention encoder: patch must be positive".into()));
        }
        Ok(())
    }

    fn block_window(&self, i: usize) -> usize {
        if self.global_attn_indexes.contains(&i) {
            0
        } else {
            self.window_size
        }
    }
}

/// Linear resampling of a `[L, C]` table to `[len, C]`.
fn resample_rows(t: &Tensor, len: usize) -> candle_core::Result<Tensor> {
    let (l, c) = t.dims2()?;
    if l == len {
        return Ok(t.clone());
    }
    let x = t.t()?.reshape((1, c, 1, l))?;
    ops::resize_bilinear(&x, 1, len)?.reshape((c, len))?.t()?.contiguous()
}

fn rel_pos_table(size: usize, rel_pos: &Tensor) -> candle_core::Result<Tensor> {
    let max_dist = 2 * size - 1;
    let table = resample_rows(rel_pos, max_dist)?;
    let idx: Vec<u32> = (0..size)
        .flat_map(|q| (0..size).map(move |k| (q + size - 1 - k) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, size * size, rel_pos.device())?;
    let (_, c) = table.dims2()?;
    table.index_select(&idx, 0)?.reshape((size, size, c))
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    rel_pos: Option<(Tensor, Tensor)>,
}

impl Attention {
    fn new(dim: usize, heads: usize, rel_size: Option<usize>, p: Params) -> Result<Self> {
        let rel_pos = match rel_size {
            Some(size) => {
                let hd = dim / heads;
                Some((
                    p.get(&[2 * size - 1, hd], "rel_pos_h", Init::Zeros)?,
                    p.get(&[2 * size - 1, hd], "rel_pos_w", Init::Zeros)?,
                ))
            }
            None => None,
        };
        Ok(Self {
            qkv: Linear::new(dim, 3 * dim, p.pp("qkv"))?,
            proj: Linear::new(dim, dim, p.pp("proj"))?,
            heads,
            rel_pos,
        })
    }

    fn add_rel_pos(&self, attn: &Tensor, q: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
        let Some((rel_h, rel_w)) = &self.rel_pos else {
            return Ok(attn.clone());
        };
        let (bh, _, hd) = q.dims3()?;
        let rh = rel_pos_table(h, rel_h)?;
        let rw = rel_pos_table(w, rel_w)?;
        let r_q = q.reshape((bh, h, w, hd))?;
        let along_h = r_q
            .permute((1, 0, 2, 3))?
            .reshape((h, bh * w, hd))?
            .matmul(&rh.transpose(1, 2)?.contiguous()?)?
            .reshape((h, bh, w, h))?
            .permute((1, 0, 2, 3))?;
        let along_w = r_q
            .permute((2, 0, 1, 3))?
            .reshape((w, bh * h, hd))?
            .matmul(&rw.transpose(1, 2)?.contiguous()?)?
            .reshape((w, bh, h, w))?
            .permute((1, 2, 0, 3))?;
        attn.reshape((bh, h, w, h, w))?
            .broadcast_add(&along_h.unsqueeze(4)?)?
            .broadcast_add(&along_w.unsqueeze(3)?)?
            .reshape((bh, h * w, h * w))
    }

    /// `x: [B, H, W, C]`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, h * w, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .reshape((3, b * self.heads, h * w, hd))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let attn = (&q * scale)?.matmul(&k.t()?)?;
        let attn = self.add_rel_pos(&attn, &q, h, w)?;
        let attn = candle_nn::ops::softmax_last_dim(&attn)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, h, w, hd))?
            .permute((0, 2, 3, 1, 4))?
            .reshape((b, h, w, c))?;
        self.proj.forward(&out)
    }
}

fn window_partition(x: &Tensor, ws: usize) -> candle_core::Result<(Tensor, usize, usize)> {
    let (b, h, w, c) = x.dims4()?;
    let (ph, pw) = ((ws - h % ws) % ws, (ws - w % ws) % ws);
    let x = x.pad_with_zeros(1, 0, ph)?.pad_with_zeros(2, 0, pw)?;
    let (hp, wp) = (h + ph, w + pw);
    let win = x
        .reshape(vec![b, hp / ws, ws, wp / ws, ws, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((win, hp, wp))
}

fn window_unpartition(win: &Tensor, ws: usize, hp: usize, wp: usize, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (n, _, _, c) = win.dims4()?;
    let b = n / ((hp / ws) * (wp / ws));
    win.reshape(vec![b, hp / ws, wp / ws, ws, ws, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b, hp, wp, c))?
        .narrow(1, 0, h)?
        .narrow(2, 0, w)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    window: usize,
}

impl Block {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let y = self.norm1.forward(x)?;
        let y = if self.window > 0 {
            let (win, hp, wp) = window_partition(&y, self.window)?;
            window_unpartition(&self.attn.forward(&win)?, self.window, hp, wp, h, w)?
        } else {
            self.attn.forward(&y)?
        };
        let x = (x + y)?;
        let m = self.lin2.forward(&self.lin1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        x + m
    }
}

#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    cfg: AttentionConfig,
    grid: usize,
}

impl AttentionEncoder {
    /// `p` should already carry the freeze flag from the encoder config.
    pub fn new(cfg: &AttentionConfig, resolution: usize, p: Params) -> Result<Self> {
        cfg.validate()?;
        if !resolution.is_multiple_of(cfg.patch) {
            return Err(Error::Config(format!(
                "patch size {} does not divide input resolution {resolution}",
                cfg.patch
            )));
        }
        let grid = resolution / cfg.patch;
        let d = cfg.embed_dim;
        let spec = ConvSpec { kernel: cfg.patch, stride: cfg.patch, padding: 0, bias: true, init: Init::FanInUniform };
        let patch_embed = Conv2d::new(3, d, spec, p.pp("patch_embed.proj"))?;
        let pos_embed = p.get(&[1, grid, grid, d], "pos_embed", Init::Normal(0.02))?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let bp = p.pp(format!("blocks.{i}"));
            let window = cfg.block_window(i);
            let rel_size = cfg.use_rel_pos.then_some(if window > 0 { window } else { grid });
            blocks.push(Block {
                norm1: LayerNorm::new(d, 1e-6, bp.pp("norm1"))?,
                attn: Attention::new(d, cfg.heads, rel_size, bp.pp("attn"))?,
                norm2: LayerNorm::new(d, 1e-6, bp.pp("norm2"))?,
                lin1: Linear::new(d, d * cfg.mlp_ratio, bp.pp("mlp.lin1"))?,
                lin2: Linear::new(d * cfg.mlp_ratio, d, bp.pp("mlp.lin2"))?,
                window,
            });
        }
        Ok(Self { patch_embed, pos_embed, blocks, cfg: cfg.clone(), grid })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// `x: [B, 3, H, W]` in `[0, 1]` → token grid `[B, D, H/patch, W/patch]`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dtype = x.dtype();
        let mean = Tensor::new(&PIXEL_MEAN, x.device())?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, x.device())?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut x = self.patch_embed.forward(&x)?.permute((0, 2, 3, 1))?.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        x.permute((0, 3, 1, 2))?.contiguous()
    }
}

/// Reads a SAM-style checkpoint (`.safetensors`, or a PyTorch `.pth`/`.pt`
/// zip archive) and maps its image-encoder tensors onto parameter names under
/// `prefix`, resampling position tables to the configured grid.
pub fn load_sam_weights(
    path: &Path,
    prefix: &str,
    cfg: &AttentionConfig,
    resolution: usize,
) -> Result<Vec<(String, Tensor)>> {
    let raw: HashMap<String, Tensor> = match path.extension().and_then(|e| e.to_str()) {
        Some("pth") | Some("pt") | Some("bin") => candle_core::pickle::read_all(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
            .into_iter()
            .collect(),
        _ => candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?,
    };
    let grid = resolution / cfg.patch;
    let mut out = Vec::new();
    for (key, t) in raw {
        let key = key.strip_prefix("image_encoder.").unwrap_or(&key).to_string();
        let keep = key.starts_with("patch_embed.")
            || key == "pos_embed"
            || key
                .strip_prefix("blocks.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < cfg.blocks);
        if !keep {
            continue;
        }
        let t = t.to_dtype(DType::F32)?;
        let t = if key == "pos_embed" {
            match t.dims() {
                &[1, gh, gw, d] if (gh, gw) != (grid, grid) => ops::resize_bilinear(&t.permute((0, 3, 1, 2))?, grid, grid)?
                    .permute((0, 2, 3, 1))?
                    .contiguous()?
                    .reshape((1, grid, grid, d))?,
                _ => t,
            }
        } else if key.ends_with("rel_pos_h") || key.ends_with("rel_pos_w") {
            let i: usize = key.split('.').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            let size = match cfg.block_window(i) {
                0 => grid,
                w => w,
            };
            if t.rank() == 2 {
                resample_rows(&t, 2 * size - 1)?
            } else {
                t
            }
        } else {
            t
        };
        out.push((format!("{prefix}.{key}"), t));
    }
    if out.is_empty() {
        return Err(Error::Load(format!("{}: no image-encoder tensors found", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn token_grid_shape() -> Result<()> {
        let store = ParamStore::new(DType::F32, 3);
        let cfg = AttentionConfig { blocks: 1, embed_dim: 32, heads: 2, ..AttentionConfig::toy() };
        let enc = AttentionEncoder::new(&cfg, 64, store.root().pp("enc"))?;
        let y = enc.forward(&Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu)?)?;
        assert_eq!(y.dims4()?, (2, 32, 4, 4));
        Ok(())
    }

    #[test]
    fn window_partition_round_trip() -> Result<()> {
        let x = Tensor::randn(0f32, 1.0, (2, 5, 7, 3), &Device::Cpu)?;
        let (win, hp, wp) = window_partition(&x, 3)?;
        assert_eq!((hp, wp), (6, 9));
        assert_eq!(win.dims4()?, (2 * 2 * 3, 3, 3, 3));
        let back = window_unpartition(&win, 3, hp, wp, 5, 7)?;
        let diff = (back - &x)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn zero_rel_pos_is_a_no_op() -> Result<()> {
        let dev = Device::Cpu;
        let with = ParamStore::new(DType::F64, 9);
        let without = ParamStore::new(DType::F64, 9);
        let cfg = AttentionConfig { blocks: 2, embed_dim: 16, heads: 2, window_size: 2, global_attn_indexes: vec![1], ..AttentionConfig::toy() };
        let a = AttentionEncoder::new(&AttentionConfig { use_rel_pos: true, ..cfg.clone() }, 64, with.root())?;
        let b = AttentionEncoder::new(&cfg, 64, without.root())?;
        let x = Tensor::rand(0f64, 1.0, (1, 3, 64, 64), &dev)?;
        let diff = (a.forward(&x)? - b.forward(&x)?)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12);
        Ok(())
    }

    #[test]
    fn rel_pos_index_layout() -> Result<()> {
        let table = Tensor::arange(0f32, 5.0, &Device::Cpu)?.reshape((5, 1))?;
        let t = rel_pos_table(3, &table)?;
        let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
        // entry (q, k) holds q - k + 2
        assert_eq!(v, vec![2.0, 1.0, 0.0, 3.0, 2.0, 1.0, 4.0, 3.0, 2.0]);
        Ok(())
    }
}
