//! `MVQC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MVQC" | version u32 | component (u32 len + utf8) | config digest (u32 len + utf8)
//! step u64 | config text (u32 len + utf8) | tensor count u32
//! per tensor: name (u32 len + utf8) | dtype u8 (0 = f32) | rank u32 | dims u64 * rank | byte offset u64
//! payload length u64 | payload (f32 LE)
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mvq_core::cascade::{Cascade, CascadeConfig};
use mvq_core::eval::Evaluator;
use mvq_core::rvq::{Codebook, Normalizer, Tokenizer};
use mvq_core::transformer::{MaskedTransformer, ResidualTransformer};
use mvq_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MVQC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Rvq,
    Masked,
    Residual,
    Evaluator,
    Recognizer,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Rvq,
        Component::Masked,
        Component::Residual,
        Component::Evaluator,
        Component::Recognizer,
    ];

    pub fn file_name(self) -> String {
        format!("{self}.mvqc")
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Rvq => "rvq",
            Component::Masked => "masked",
            Component::Residual => "residual",
            Component::Evaluator => "evaluator",
            Component::Recognizer => "recognizer",
        })
    }
}

impl FromStr for Component {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| CliError::Config(format!("unknown component `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub component: Component,
    pub digest: String,
    pub step: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "string is not utf-8".to_string())
    }
}

impl Bundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.component.to_string());
        put_str(&mut out, &self.digest);
        out.extend(self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(DTYPE_F32);
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend(offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        out.extend(offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let component: Component = r.string()?.parse().map_err(|e: CliError| e.to_string())?;
        let digest = r.string()?;
        let step = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(format!("tensor `{name}` has unknown dtype {dtype}"));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| format!("tensor `{name}` runs past the payload"))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            component,
            digest,
            step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(path.display().to_string(), e))
    }

    /// Reads a bundle and checks that it holds `expected`.
    pub fn load(path: &Path, expected: Component) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        let bad = |msg: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let b = Self::from_bytes(&bytes).map_err(bad)?;
        if b.component != expected {
            return Err(bad(format!("holds `{}`, expected `{expected}`", b.component)));
        }
        Ok(b)
    }

    /// The config the component was trained under.
    pub fn config(&self) -> Result<Config> {
        Config::from_toml(&self.config)
    }

    fn take(&self, name: &str) -> std::result::Result<&NamedTensor, String> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format!("missing tensor `{name}`"))
    }
}

fn push(out: &mut Vec<NamedTensor>, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
    out.push(NamedTensor {
        name: name.into(),
        shape,
        data: data.iter().map(|&v| v as f32).collect(),
    });
}

fn params_tensors(ps: &ParamStore) -> Vec<NamedTensor> {
    let mut out = Vec::with_capacity(ps.len());
    for (_, name, t) in ps.iter() {
        push(&mut out, name, t.shape().to_vec(), t.data());
    }
    out
}

fn restore_params(ps: &mut ParamStore, b: &Bundle) -> std::result::Result<(), String> {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id).to_string();
        let t = b.take(&name)?;
        let dst = ps.get_mut(id);
        if t.shape != dst.shape() {
            return Err(format!("tensor `{name}` has shape {:?}, model expects {:?}", t.shape, dst.shape()));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(&t.data) {
            *d = f64::from(s);
        }
    }
    Ok(())
}

fn normalizer_tensors(out: &mut Vec<NamedTensor>, prefix: &str, n: &Normalizer) {
    push(out, format!("{prefix}.mean"), vec![n.mean.len()], &n.mean);
    push(out, format!("{prefix}.std"), vec![n.std.len()], &n.std);
}

fn restore_normalizer(b: &Bundle, prefix: &str) -> std::result::Result<Normalizer, String> {
    let mut n = Normalizer::default();
    for (slot, key) in [(&mut n.mean, "mean"), (&mut n.std, "std")] {
        let t = b.take(&format!("{prefix}.{key}"))?;
        if t.data.len() != slot.len() {
            return Err(format!("normalizer {key} has {} channels", t.data.len()));
        }
        for (d, &s) in slot.iter_mut().zip(&t.data) {
            *d = f64::from(s);
        }
    }
    Ok(n)
}

/// Fixed rng for building a skeleton whose parameters are then overwritten.
fn skeleton_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn header(component: Component, cfg: &Config, step: u64, tensors: Vec<NamedTensor>) -> Bundle {
    Bundle {
        component,
        digest: cfg.digest(),
        step,
        config: cfg.canonical(),
        tensors,
    }
}

fn restored<T>(path: &Path, r: std::result::Result<T, String>) -> Result<T> {
    r.map_err(|msg| CliError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn tokenizer_bundle(tok: &Tokenizer, cfg: &Config, step: u64) -> Bundle {
    let mut tensors = params_tensors(&tok.params);
    for (j, book) in tok.books.iter().enumerate() {
        push(&mut tensors, format!("codebook{j}"), vec![book.len(), book.dim()], book.entries());
    }
    normalizer_tensors(&mut tensors, "normalizer", &tok.normalizer);
    header(Component::Rvq, cfg, step, tensors)
}

pub fn load_tokenizer(path: &Path) -> Result<(Tokenizer, Bundle)> {
    let b = Bundle::load(path, Component::Rvq)?;
    let cfg = b.config()?.rvq_config();
    let mut tok = Tokenizer::new(cfg.clone(), &mut skeleton_rng())?;
    restored(path, restore_params(&mut tok.params, &b))?;
    for j in 0..tok.books.len() {
        let t = restored(path, b.take(&format!("codebook{j}")))?;
        if t.shape != [cfg.codebook_size, cfg.latent_dim] {
            return restored(path, Err(format!("codebook{j} has shape {:?}", t.shape)));
        }
        let entries = t.data.iter().map(|&v| f64::from(v)).collect();
        tok.books[j] = Codebook::from_entries(entries, cfg.latent_dim, cfg.ema_decay, true);
    }
    tok.normalizer = restored(path, restore_normalizer(&b, "normalizer"))?;
    tok.set_seeded(true);
    Ok((tok, b))
}

pub fn masked_bundle(m: &MaskedTransformer, cfg: &Config, step: u64) -> Bundle {
    header(Component::Masked, cfg, step, params_tensors(&m.params))
}

pub fn load_masked(path: &Path) -> Result<(MaskedTransformer, Bundle)> {
    let b = Bundle::load(path, Component::Masked)?;
    let cfg = b.config()?;
    let mut m = MaskedTransformer::new(
        cfg.transformer_config(&cfg.masked),
        cfg.conditioner_config()?,
        cfg.rvq.codebook_size,
        &mut skeleton_rng(),
    )?;
    restored(path, restore_params(&mut m.params, &b))?;
    Ok((m, b))
}

pub fn residual_bundle(m: &ResidualTransformer, cfg: &Config, step: u64) -> Bundle {
    header(Component::Residual, cfg, step, params_tensors(&m.params))
}

pub fn load_residual(path: &Path) -> Result<(ResidualTransformer, Bundle)> {
    let b = Bundle::load(path, Component::Residual)?;
    let cfg = b.config()?;
    let mut m = ResidualTransformer::new(
        cfg.transformer_config(&cfg.residual),
        cfg.conditioner_config()?,
        cfg.rvq.codebook_size,
        cfg.rvq.layers,
        &mut skeleton_rng(),
    )?;
    restored(path, restore_params(&mut m.params, &b))?;
    Ok((m, b))
}

pub fn evaluator_bundle(e: &Evaluator, cfg: &Config, step: u64) -> Bundle {
    let mut tensors = params_tensors(&e.params);
    normalizer_tensors(&mut tensors, "normalizer", &e.normalizer);
    header(Component::Evaluator, cfg, step, tensors)
}

pub fn load_evaluator(path: &Path) -> Result<(Evaluator, Bundle)> {
    let b = Bundle::load(path, Component::Evaluator)?;
    let cfg = b.config()?;
    let mut e = Evaluator::new(cfg.evaluator_config(), &mut skeleton_rng());
    restored(path, restore_params(&mut e.params, &b))?;
    e.normalizer = restored(path, restore_normalizer(&b, "normalizer"))?;
    Ok((e, b))
}

pub fn cascade_bundle(c: &Cascade, cfg: &Config, step: u64) -> Bundle {
    header(Component::Recognizer, cfg, step, params_tensors(&c.params))
}

pub fn load_cascade(path: &Path) -> Result<(Cascade, Bundle)> {
    let b = Bundle::load(path, Component::Recognizer)?;
    let cfg = b.config()?;
    let d = cfg.conditioner.cond_dim;
    let mut c = Cascade::new(CascadeConfig::default(), d, d, &mut skeleton_rng())?;
    restored(path, restore_params(&mut c.params, &b))?;
    Ok((c, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let b = Bundle {
            component: Component::Masked,
            digest: "abc".into(),
            step: 42,
            config: "[data]\nseed = 1\n".into(),
            tensors: vec![
                NamedTensor {
                    name: "w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0],
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![7.0],
                },
            ],
        };
        let bytes = b.to_bytes();
        let back = Bundle::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors[0].data[5].to_bits(), (-0.0f32).to_bits());
        assert!(Bundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
