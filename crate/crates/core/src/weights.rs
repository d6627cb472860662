//! Named parameter store, deterministic initialization and the `EFRW`
//! binary container.
//!
//! Container layout (all integers and reals little-endian):
//!
//! ```text
//! "EFRW" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 ndim | ndim x u32 extents | f32 values (row-major)
//! footer: 8-byte architecture hash
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EFRW";
pub const VERSION: u32 = 1;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    FeatureEncoder,
    ContextEncoder,
    Afl,
    AloHead,
    Motion,
    Gru,
    FlowHead,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub group: ParamGroup,
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn conv(&mut self, group: ParamGroup, name: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = c_in * k * k;
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![c_out, c_in, k, k],
            fan_in,
            group,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![c_out],
            fan_in,
            group,
        });
    }

    fn linear(&mut self, group: ParamGroup, name: &str, c_in: usize, c_out: usize) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![c_out, c_in],
            fan_in: c_in,
            group,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![c_out],
            fan_in: c_in,
            group,
        });
    }

    fn encoder(&mut self, group: ParamGroup, prefix: &str, widths: [usize; 3], out: usize) {
        let mut c_in = 3;
        for (s, &w) in widths.iter().enumerate() {
            let k = if s == 0 { 7 } else { 3 };
            self.conv(group, &format!("{prefix}.s{s}.down"), c_in, w, k);
            for r in 0..2 {
                self.conv(group, &format!("{prefix}.s{s}.res{r}.conv1"), w, w, 3);
                self.conv(group, &format!("{prefix}.s{s}.res{r}.conv2"), w, w, 3);
            }
            c_in = w;
        }
        self.conv(group, &format!("{prefix}.proj"), c_in, out, 1);
    }
}

/// Every parameter of the model described by `cfg`, in serialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamGroup::*;
    let mut b = SpecBuilder(Vec::new());
    let (dh, dc) = (cfg.hidden_dim, cfg.context_dim);
    b.encoder(FeatureEncoder, "fnet", cfg.encoder_widths, cfg.feature_dim);
    b.encoder(ContextEncoder, "cnet", cfg.encoder_widths, dh + dc);
    b.0.push(ParamSpec {
        name: "afl.proj.w".into(),
        shape: vec![cfg.heads * cfg.head_dim, cfg.feature_dim],
        fan_in: cfg.feature_dim,
        group: Afl,
    });
    if cfg.afl_scale {
        for axis in ["x", "y"] {
            b.0.push(ParamSpec {
                name: format!("afl.scale_{axis}.w"),
                shape: vec![1],
                fan_in: 1,
                group: Afl,
            });
        }
    }
    b.conv(AloHead, "alo.mix", dh + dc, cfg.alo_mid, 1);
    b.linear(AloHead, "alo.fc_s", 2 * cfg.alo_mid, 2 * cfg.levels);
    b.linear(AloHead, "alo.fc_d", 2 * cfg.alo_mid, 2 * cfg.levels);
    b.conv(Motion, "motion.corr1", cfg.lookup_channels(), cfg.corr_hidden, 1);
    b.conv(Motion, "motion.corr2", cfg.corr_hidden, cfg.corr_out, 3);
    b.conv(Motion, "motion.flow", 2, cfg.flow_out, 3);
    let dx = cfg.motion_channels();
    for gate in ["z", "r", "q"] {
        b.conv(Gru, &format!("gru.{gate}"), dh + dx, dh, 3);
    }
    b.conv(FlowHead, "head.conv1", dh, cfg.head_hidden, 3);
    b.conv(FlowHead, "head.conv2", cfg.head_hidden, 2, 3);
    b.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    params: IndexMap<String, Tensor>,
    config_hash: [u8; 8],
    seed: Option<u64>,
}

impl ModelWeights {
    /// Draws every parameter uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    ///
    /// Values are rounded to `f32` so that the container round-trips exactly.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let params = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let bound = 1.0 / (s.fan_in as f64).sqrt();
                let t = Tensor::uniform(&s.shape, -bound, bound, &mut rng).map(|v| v as f32 as f64);
                (s.name, t)
            })
            .collect();
        Ok(Self {
            params,
            config_hash: cfg.arch_hash(),
            seed: Some(seed),
        })
    }

    /// All-zero parameters.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = param_specs(cfg)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Ok(Self {
            params,
            config_hash: cfg.arch_hash(),
            seed: None,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set parameter",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn config_hash(&self) -> [u8; 8] {
        self.config_hash
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Checks names, shapes and architecture hash against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        if self.config_hash != cfg.arch_hash() {
            return Err(Error::Config(format!(
                "weights were built for architecture hash {}, config hashes to {}",
                hex(&self.config_hash),
                hex(&cfg.arch_hash())
            )));
        }
        let specs = param_specs(cfg);
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameter tensors, weights hold {}",
                specs.len(),
                self.params.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_scalars() * 4 + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing EFRW magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported EFRW version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = IndexMap::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
        }
        let config_hash: [u8; 8] = r.take(8)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after footer",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            config_hash,
            seed: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length {
                expected: self.pos + n,
                found: self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_count_matches_closed_form() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                afl_scale: true,
                levels: 2,
                radius: 3,
                grid: crate::config::GridShape::Diamond,
                ..ModelConfig::default()
            },
        ] {
            let w = ModelWeights::init(&cfg, 3).unwrap();
            assert_eq!(w.len(), param_specs(&cfg).len());
            assert_eq!(w.num_scalars(), cfg.analytic_param_count());
        }
    }

    #[test]
    fn init_is_bounded_and_reproducible() {
        let cfg = ModelConfig::default();
        let a = ModelWeights::init(&cfg, 42).unwrap();
        let b = ModelWeights::init(&cfg, 42).unwrap();
        let c = ModelWeights::init(&cfg, 43).unwrap();
        assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.bit_eq(y)));
        assert_ne!(a, c);
        for s in param_specs(&cfg) {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            let t = a.get(&s.name).unwrap();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{}", s.name);
        }
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            encoder_widths: [4, 4, 4],
            feature_dim: 8,
            hidden_dim: 8,
            context_dim: 8,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg, 9).unwrap();
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(w.iter().zip(back.iter()).all(|((_, a), (_, b))| a.bit_eq(b)));
        back.check_against(&cfg).unwrap();
    }

    #[test]
    fn container_rejects_corruption() {
        let cfg = ModelConfig {
            encoder_widths: [2, 2, 2],
            feature_dim: 4,
            hidden_dim: 4,
            context_dim: 4,
            ..ModelConfig::default()
        };
        let bytes = ModelWeights::zeros(&cfg).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            ModelWeights::from_bytes(&bytes[..bytes.len() - 20]),
            Err(Error::Length { .. })
        ));
        let other = ModelConfig {
            radius: 2,
            ..cfg.clone()
        };
        assert!(ModelWeights::from_bytes(&bytes).unwrap().check_against(&other).is_err());
    }
}
