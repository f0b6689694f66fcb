//! Deterministic weight initialization and bit-exact model serialization.
//!
//! Weight files (`.rpwt`): magic "RPWT", u32 LE version, u32 LE config JSON
//! length + UTF-8 config, u32 LE tensor count, then per tensor: u16 LE name
//! length + UTF-8 name, 1-byte dtype tag (0 = f32, 1 = f64), 1-byte rank,
//! u64 LE dims, raw little-endian payload. All multi-byte values little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    AttentionBlock, Block, FfnForm, FfnLayer, IdleFfnInfer, IdleFfnTrain, LayerNormParams, Mixer,
    Model, ModelConfig, PatchEmbed, VanillaFfn,
};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{BatchNormParams, Matrix2D};

pub const MAGIC: &[u8; 4] = b"RPWT";
pub const VERSION: u32 = 1;

const INIT_STD: f64 = 0.02;
const INIT_CLIP_SIGMA: f64 = 2.0;

fn tensor_seed(global_seed: u64, name: &str) -> u64 {
    // FNV-1a over the seed bytes then the tensor name
    let mut h: u64 = 0xcbf29ce484222325;
    for b in global_seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Truncated-normal init (std 0.02, clipped at +/- 2 sigma), seeded by
/// (global seed, tensor name) so construction order never affects values.
pub fn init_weights<S: Scalar>(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix2D<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
    let data = (0..rows * cols)
        .map(|_| {
            let z = loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= INIT_CLIP_SIGMA {
                    break z;
                }
            };
            S::of_f64(INIT_STD * z)
        })
        .collect();
    Matrix2D::from_vec(rows, cols, data).expect("sized by construction")
}

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

/// Deterministically build a model from its config: truncated-normal weights,
/// zero biases, identity-initialized norms.
pub fn build_model<S: Scalar>(cfg: &ModelConfig) -> Result<Model<S>> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let hidden = cfg.hidden_channels();
    let active = cfg.active_channels();
    let tokens = cfg.token_count();
    let patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels;
    let seed = cfg.seed;

    let patch = PatchEmbed {
        weight: init_weights(patch_dim, c, seed, "patch_embed.weight"),
        bias: vec![S::zero(); c],
        pos: init_weights(tokens, c, seed, "pos_embed"),
        cls: init_weights::<S>(1, c, seed, "cls_token").row(0).to_vec(),
    };

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let mixer = match cfg.mixer {
            crate::model::MixerKind::SelfAttention => Mixer::Attention(AttentionBlock {
                ln: LayerNormParams::identity_init(c, S::of_f64(LN_EPS)),
                w_qkv: init_weights(c, 3 * c, seed, &format!("blocks.{i}.attn.w_qkv")),
                b_qkv: vec![S::zero(); 3 * c],
                w_proj: init_weights(c, c, seed, &format!("blocks.{i}.attn.w_proj")),
                b_proj: vec![S::zero(); c],
                heads: cfg.heads,
            }),
            crate::model::MixerKind::AveragePool => Mixer::Pool,
        };
        let ffn = match cfg.ffn_form {
            FfnForm::VanillaLn => FfnLayer::Vanilla(VanillaFfn {
                ln: LayerNormParams::identity_init(c, S::of_f64(LN_EPS)),
                w_in: init_weights(c, hidden, seed, &format!("blocks.{i}.ffn.w_in")),
                b_in: vec![S::zero(); hidden],
                w_out: init_weights(hidden, c, seed, &format!("blocks.{i}.ffn.w_out")),
                b_out: vec![S::zero(); c],
            }),
            FfnForm::IdleTrain => FfnLayer::IdleTrain(IdleFfnTrain {
                bn1: BatchNormParams::identity_init(c, S::of_f64(BN_EPS)),
                w_in: init_weights(c, hidden, seed, &format!("blocks.{i}.ffn.w_in")),
                b_in: vec![S::zero(); hidden],
                bn2: BatchNormParams::identity_init(hidden, S::of_f64(BN_EPS)),
                w_out: init_weights(hidden, c, seed, &format!("blocks.{i}.ffn.w_out")),
                b_out: vec![S::zero(); c],
                active,
            }),
            FfnForm::IdleInfer => {
                // residual-style init: merged matrix starts near the identity
                let mut w_merged: Matrix2D<S> =
                    init_weights(c, c, seed, &format!("blocks.{i}.ffn.w_merged"));
                for j in 0..c {
                    let v = w_merged.get(j, j) + S::one();
                    w_merged.set(j, j, v);
                }
                FfnLayer::IdleInfer(IdleFfnInfer {
                    w_act_in: init_weights(c, active, seed, &format!("blocks.{i}.ffn.w_act_in")),
                    b_act_in: vec![S::zero(); active],
                    w_act_out: init_weights(active, c, seed, &format!("blocks.{i}.ffn.w_act_out")),
                    w_merged,
                    b_merged: vec![S::zero(); c],
                })
            }
        };
        blocks.push(Block { mixer, ffn });
    }

    Ok(Model {
        cfg: cfg.clone(),
        patch,
        blocks,
        final_norm: LayerNormParams::identity_init(c, S::of_f64(LN_EPS)),
        head_w: init_weights(c, cfg.num_classes, seed, "head.weight"),
        head_b: vec![S::zero(); cfg.num_classes],
    })
}

// ---------------------------------------------------------------------------
// tensor enumeration

enum TensorRef<'a, S> {
    Mat(&'a Matrix2D<S>),
    Vec(&'a [S]),
    Scalar(S),
    Flag(bool),
}

enum TensorMut<'a, S> {
    Mat(&'a mut Matrix2D<S>),
    Vec(&'a mut Vec<S>),
    Scalar(&'a mut S),
    Flag(&'a mut bool),
}

macro_rules! visit_ln {
    ($f:expr, $prefix:expr, $ln:expr, $wrap:ident) => {
        $f(format!("{}.gamma", $prefix), $wrap::Vec(&mut $ln.gamma));
        $f(format!("{}.beta", $prefix), $wrap::Vec(&mut $ln.beta));
        $f(format!("{}.eps", $prefix), $wrap::Scalar(&mut $ln.eps));
    };
}

macro_rules! visit_bn {
    ($f:expr, $prefix:expr, $bn:expr, $wrap:ident) => {
        $f(format!("{}.gamma", $prefix), $wrap::Vec(&mut $bn.gamma));
        $f(format!("{}.beta", $prefix), $wrap::Vec(&mut $bn.beta));
        $f(
            format!("{}.running_mean", $prefix),
            $wrap::Vec(&mut $bn.running_mean),
        );
        $f(
            format!("{}.running_var", $prefix),
            $wrap::Vec(&mut $bn.running_var),
        );
        $f(format!("{}.eps", $prefix), $wrap::Scalar(&mut $bn.eps));
        $f(format!("{}.frozen", $prefix), $wrap::Flag(&mut $bn.frozen));
    };
}

fn for_each_tensor_mut<S: Scalar>(
    model: &mut Model<S>,
    f: &mut impl FnMut(String, TensorMut<'_, S>),
) {
    f("patch_embed.weight".into(), TensorMut::Mat(&mut model.patch.weight));
    f("patch_embed.bias".into(), TensorMut::Vec(&mut model.patch.bias));
    f("pos_embed".into(), TensorMut::Mat(&mut model.patch.pos));
    f("cls_token".into(), TensorMut::Vec(&mut model.patch.cls));
    for (i, block) in model.blocks.iter_mut().enumerate() {
        if let Mixer::Attention(attn) = &mut block.mixer {
            let p = format!("blocks.{i}.attn");
            visit_ln!(f, format!("{p}.ln"), attn.ln, TensorMut);
            f(format!("{p}.w_qkv"), TensorMut::Mat(&mut attn.w_qkv));
            f(format!("{p}.b_qkv"), TensorMut::Vec(&mut attn.b_qkv));
            f(format!("{p}.w_proj"), TensorMut::Mat(&mut attn.w_proj));
            f(format!("{p}.b_proj"), TensorMut::Vec(&mut attn.b_proj));
        }
        let p = format!("blocks.{i}.ffn");
        match &mut block.ffn {
            FfnLayer::Vanilla(ffn) => {
                visit_ln!(f, format!("{p}.ln"), ffn.ln, TensorMut);
                f(format!("{p}.w_in"), TensorMut::Mat(&mut ffn.w_in));
                f(format!("{p}.b_in"), TensorMut::Vec(&mut ffn.b_in));
                f(format!("{p}.w_out"), TensorMut::Mat(&mut ffn.w_out));
                f(format!("{p}.b_out"), TensorMut::Vec(&mut ffn.b_out));
            }
            FfnLayer::IdleTrain(ffn) => {
                visit_bn!(f, format!("{p}.bn1"), ffn.bn1, TensorMut);
                f(format!("{p}.w_in"), TensorMut::Mat(&mut ffn.w_in));
                f(format!("{p}.b_in"), TensorMut::Vec(&mut ffn.b_in));
                visit_bn!(f, format!("{p}.bn2"), ffn.bn2, TensorMut);
                f(format!("{p}.w_out"), TensorMut::Mat(&mut ffn.w_out));
                f(format!("{p}.b_out"), TensorMut::Vec(&mut ffn.b_out));
            }
            FfnLayer::IdleInfer(ffn) => {
                f(format!("{p}.w_act_in"), TensorMut::Mat(&mut ffn.w_act_in));
                f(format!("{p}.b_act_in"), TensorMut::Vec(&mut ffn.b_act_in));
                f(format!("{p}.w_act_out"), TensorMut::Mat(&mut ffn.w_act_out));
                f(format!("{p}.w_merged"), TensorMut::Mat(&mut ffn.w_merged));
                f(format!("{p}.b_merged"), TensorMut::Vec(&mut ffn.b_merged));
            }
        }
    }
    visit_ln!(f, "final_norm", model.final_norm, TensorMut);
    f("head.weight".into(), TensorMut::Mat(&mut model.head_w));
    f("head.bias".into(), TensorMut::Vec(&mut model.head_b));
}

fn for_each_tensor<S: Scalar>(model: &Model<S>, f: &mut impl FnMut(String, TensorRef<'_, S>)) {
    // read-only walk implemented over a clone-free reborrow: the mutable
    // walker is the single source of truth for names and order
    let mut m = model.clone();
    for_each_tensor_mut(&mut m, &mut |name, t| {
        // values live in the clone; copy out what the writer needs
        match t {
            TensorMut::Mat(v) => f(name, TensorRef::Mat(v)),
            TensorMut::Vec(v) => f(name, TensorRef::Vec(v)),
            TensorMut::Scalar(v) => f(name, TensorRef::Scalar(*v)),
            TensorMut::Flag(v) => f(name, TensorRef::Flag(*v)),
        }
    });
}

// ---------------------------------------------------------------------------
// wire format

fn write_payload<S: Scalar, W: Write>(w: &mut W, data: &[S]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * S::DTYPE.size());
    for &v in data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn write_tensor<S: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    dims: &[u64],
    data: &[S],
) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[S::DTYPE.tag(), dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    write_payload(w, data)
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.cfg)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;

    let mut count: u32 = 0;
    for_each_tensor(model, &mut |_, _| count += 1);
    w.write_all(&count.to_le_bytes())?;

    let mut result = Ok(());
    for_each_tensor(model, &mut |name, t| {
        if result.is_err() {
            return;
        }
        result = match t {
            TensorRef::Mat(m) => {
                write_tensor(&mut w, &name, &[m.rows() as u64, m.cols() as u64], m.data())
            }
            TensorRef::Vec(v) => write_tensor(&mut w, &name, &[v.len() as u64], v),
            TensorRef::Scalar(s) => write_tensor(&mut w, &name, &[1], &[s]),
            TensorRef::Flag(b) => write_tensor(
                &mut w,
                &name,
                &[1],
                &[if b { S::one() } else { S::zero() }],
            ),
        };
    });
    result?;
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Corrupt {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

struct RawTensor<S> {
    dims: Vec<u64>,
    data: Vec<S>,
}

fn read_header<R: Read>(r: &mut CountingReader<R>) -> Result<(ModelConfig, u32)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let json_len = r.u32("config length")? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json, "config JSON")?;
    let cfg: ModelConfig = serde_json::from_slice(&json)?;
    let count = r.u32("tensor count")?;
    Ok((cfg, count))
}

fn read_tensor<S: Scalar, R: Read>(r: &mut CountingReader<R>) -> Result<(String, RawTensor<S>)> {
    let name_len = r.u16("tensor name length")? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name, "tensor name")?;
    let name = String::from_utf8(name)
        .map_err(|e| Error::Format(format!("non-UTF-8 tensor name: {e}")))?;
    let mut tag_rank = [0u8; 2];
    r.read_exact(&mut tag_rank, "dtype tag and rank")?;
    let dtype = Dtype::from_tag(tag_rank[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag_rank[0])))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "tensor '{name}' has dtype {dtype}, expected {}",
            S::DTYPE
        )));
    }
    let rank = tag_rank[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64("tensor dims")?);
    }
    let elems: u64 = dims.iter().product();
    let size = S::DTYPE.size();
    let mut payload = vec![0u8; elems as usize * size];
    r.read_exact(&mut payload, &format!("payload of '{name}'"))?;
    let data = payload.chunks_exact(size).map(S::read_le).collect();
    Ok((name, RawTensor { dims, data }))
}

/// Peek the dtype of the first tensor in a weight file.
pub fn probe_dtype(path: &Path) -> Result<Dtype> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let (_, count) = read_header(&mut r)?;
    if count == 0 {
        return Err(Error::Format("weight file contains no tensors".into()));
    }
    let name_len = r.u16("tensor name length")? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name, "tensor name")?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag, "dtype tag")?;
    Dtype::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag[0])))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let (cfg, count) = read_header(&mut r)?;
    let mut tensors: HashMap<String, RawTensor<S>> = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let (name, raw) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), raw).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }

    let mut model = build_model::<S>(&cfg)?;
    let mut err: Option<Error> = None;
    for_each_tensor_mut(&mut model, &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(raw) = tensors.remove(&name) else {
            err = Some(Error::Format(format!("missing tensor '{name}'")));
            return;
        };
        match t {
            TensorMut::Mat(m) => {
                if raw.dims != [m.rows() as u64, m.cols() as u64] {
                    err = Some(Error::Format(format!(
                        "tensor '{name}' has dims {:?}, expected [{}, {}]",
                        raw.dims,
                        m.rows(),
                        m.cols()
                    )));
                    return;
                }
                *m = Matrix2D::from_vec(m.rows(), m.cols(), raw.data).expect("dims checked");
            }
            TensorMut::Vec(v) => {
                if raw.dims != [v.len() as u64] {
                    err = Some(Error::Format(format!(
                        "tensor '{name}' has dims {:?}, expected [{}]",
                        raw.dims,
                        v.len()
                    )));
                    return;
                }
                *v = raw.data;
            }
            TensorMut::Scalar(s) => *s = raw.data[0],
            TensorMut::Flag(b) => *b = raw.data[0] != S::zero(),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor '{name}'")));
    }
    Ok(model)
}

/// Parse a model config from JSON, expanding an optional `preset` key into
/// explicit fields before validation.
pub fn config_from_json(json: &str) -> Result<ModelConfig> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawConfig {
        preset: Option<String>,
        depth: Option<usize>,
        embed_dim: Option<usize>,
        heads: Option<usize>,
        expand_ratio: Option<f64>,
        idle_ratio: Option<f64>,
        patch_size: Option<usize>,
        image_size: Option<usize>,
        in_channels: Option<usize>,
        num_classes: Option<usize>,
        mixer: Option<crate::model::MixerKind>,
        ffn_form: Option<FfnForm>,
        seed: Option<u64>,
    }
    let raw: RawConfig = serde_json::from_str(json)?;
    let mut cfg = match &raw.preset {
        Some(p) => ModelConfig::preset(p)?,
        None => ModelConfig {
            depth: 0,
            embed_dim: 0,
            heads: 1,
            expand_ratio: 4.0,
            idle_ratio: 0.75,
            patch_size: 16,
            image_size: 224,
            in_channels: 3,
            num_classes: 1000,
            mixer: crate::model::MixerKind::SelfAttention,
            ffn_form: FfnForm::VanillaLn,
            seed: 0,
        },
    };
    if let Some(v) = raw.depth {
        cfg.depth = v;
    }
    if let Some(v) = raw.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = raw.heads {
        cfg.heads = v;
    }
    if let Some(v) = raw.expand_ratio {
        cfg.expand_ratio = v;
    }
    if let Some(v) = raw.idle_ratio {
        cfg.idle_ratio = v;
    }
    if let Some(v) = raw.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = raw.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = raw.in_channels {
        cfg.in_channels = v;
    }
    if let Some(v) = raw.num_classes {
        cfg.num_classes = v;
    }
    if let Some(v) = raw.mixer {
        cfg.mixer = v;
    }
    if let Some(v) = raw.ffn_form {
        cfg.ffn_form = v;
    }
    if let Some(v) = raw.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
