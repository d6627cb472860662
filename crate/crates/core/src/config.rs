//! Model hyperparameters and their `key=value` text form.
//!
//! Keys split into architecture keys, which fix the parameter set and are
//! covered by [`ModelConfig::arch_hash`], and runtime keys (`iters`, `gamma`,
//! `alo`, `afl`) that may change freely for a given weights file.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of the integer lookup neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridShape {
    /// Full `(2r+1)^2` square, `max(|i|,|j|) <= r`.
    Square,
    /// `|i| + |j| <= r`.
    Diamond,
}

impl GridShape {
    fn as_str(self) -> &'static str {
        match self {
            GridShape::Square => "square",
            GridShape::Diamond => "diamond",
        }
    }
}

impl FromStr for GridShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(GridShape::Square),
            "diamond" => Ok(GridShape::Diamond),
            _ => Err(Error::Config(format!("grid must be `square` or `diamond`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature encoder output channels `D`.
    pub feature_dim: usize,
    /// GRU hidden channels `D_h`.
    pub hidden_dim: usize,
    /// Context channels `D_c`.
    pub context_dim: usize,
    /// Channel widths of the three stride-2 encoder stages.
    pub encoder_widths: [usize; 3],
    /// Positional encoding size per axis.
    pub pe_dim: usize,
    pub pe_base: f64,
    pub heads: usize,
    pub head_dim: usize,
    /// Learned positive scale on the axis encodings.
    pub afl_scale: bool,
    pub radius: usize,
    pub levels: usize,
    pub grid: GridShape,
    /// Divide correlations by `sqrt(D)`.
    pub corr_scale: bool,
    pub alo_mid: usize,
    pub corr_hidden: usize,
    pub corr_out: usize,
    pub flow_out: usize,
    pub head_hidden: usize,
    /// Refinement iterations `N`.
    pub iters: usize,
    /// Sequence-loss decay.
    pub gamma: f64,
    pub alo: bool,
    pub afl: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden_dim: 64,
            context_dim: 64,
            encoder_widths: [16, 24, 32],
            pe_dim: 16,
            pe_base: 1000.0,
            heads: 4,
            head_dim: 16,
            afl_scale: false,
            radius: 4,
            levels: 4,
            grid: GridShape::Square,
            corr_scale: false,
            alo_mid: 64,
            corr_hidden: 64,
            corr_out: 48,
            flow_out: 16,
            head_hidden: 64,
            iters: 12,
            gamma: 0.8,
            alo: true,
            afl: true,
        }
    }
}

const RUNTIME_KEYS: [&str; 4] = ["iters", "gamma", "alo", "afl"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

impl ModelConfig {
    /// Number of offsets in the integer lookup grid.
    pub fn grid_len(&self) -> usize {
        let r = self.radius;
        match self.grid {
            GridShape::Square => (2 * r + 1) * (2 * r + 1),
            GridShape::Diamond => 2 * r * r + 2 * r + 1,
        }
    }

    /// Channels produced by the correlation lookup, `L * grid_len`.
    pub fn lookup_channels(&self) -> usize {
        self.levels * self.grid_len()
    }

    /// Channels of the GRU input `x`.
    pub fn motion_channels(&self) -> usize {
        self.corr_out + self.flow_out + self.context_dim + 4 * self.levels
    }

    /// Channels of the features entering the correlation volume.
    pub fn corr_feature_dim(&self, afl_on: bool) -> usize {
        if afl_on {
            self.feature_dim + 2 * self.pe_dim
        } else {
            self.feature_dim
        }
    }

    /// Input images must be multiples of this in both extents.
    pub fn size_multiple(&self) -> usize {
        8 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("context_dim", self.context_dim),
            ("pe_dim", self.pe_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("alo_mid", self.alo_mid),
            ("corr_hidden", self.corr_hidden),
            ("corr_out", self.corr_out),
            ("flow_out", self.flow_out),
            ("head_hidden", self.head_hidden),
            ("encoder_widths", self.encoder_widths.iter().copied().min().unwrap()),
        ];
        for (k, v) in dims {
            if !(1..=1024).contains(&v) {
                return Err(Error::Config(format!("`{k}` must be in 1..=1024, got {v}")));
            }
        }
        if !self.pe_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("`pe_dim` must be even, got {}", self.pe_dim)));
        }
        if self.radius > 16 {
            return Err(Error::Config(format!("`radius` must be at most 16, got {}", self.radius)));
        }
        if !(1..=6).contains(&self.levels) {
            return Err(Error::Config(format!("`levels` must be in 1..=6, got {}", self.levels)));
        }
        if !(1..=64).contains(&self.iters) {
            return Err(Error::Config(format!("`iters` must be in 1..=64, got {}", self.iters)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("`gamma` must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.pe_base > 1.0 && self.pe_base.is_finite()) {
            return Err(Error::Config(format!("`pe_base` must exceed 1, got {}", self.pe_base)));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "context_dim" => self.context_dim = parse(key, value)?,
            "encoder_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.encoder_widths = parts.try_into().map_err(|_| {
                    Error::Config(format!("`encoder_widths` needs three values, got `{value}`"))
                })?;
            }
            "pe_dim" => self.pe_dim = parse(key, value)?,
            "pe_base" => self.pe_base = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "afl_scale" => self.afl_scale = parse_bool(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "grid" => self.grid = value.parse()?,
            "corr_scale" => self.corr_scale = parse_bool(key, value)?,
            "alo_mid" => self.alo_mid = parse(key, value)?,
            "corr_hidden" => self.corr_hidden = parse(key, value)?,
            "corr_out" => self.corr_out = parse(key, value)?,
            "flow_out" => self.flow_out = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "alo" => self.alo = parse_bool(key, value)?,
            "afl" => self.afl = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; keys the model does not know are returned so the
    /// caller can interpret them.
    pub fn from_kv_text(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut extra = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match cfg.set(k, v) {
                Ok(()) => {}
                Err(Error::Config(msg)) if msg.starts_with("unknown key") => {
                    extra.push((k.to_string(), v.to_string()))
                }
                Err(e) => return Err(e),
            }
        }
        cfg.validate()?;
        Ok((cfg, extra))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let w = self.encoder_widths;
        vec![
            ("feature_dim", self.feature_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("encoder_widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("pe_dim", self.pe_dim.to_string()),
            ("pe_base", self.pe_base.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("afl_scale", self.afl_scale.to_string()),
            ("radius", self.radius.to_string()),
            ("levels", self.levels.to_string()),
            ("grid", self.grid.as_str().to_string()),
            ("corr_scale", self.corr_scale.to_string()),
            ("alo_mid", self.alo_mid.to_string()),
            ("corr_hidden", self.corr_hidden.to_string()),
            ("corr_out", self.corr_out.to_string()),
            ("flow_out", self.flow_out.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("iters", self.iters.to_string()),
            ("gamma", self.gamma.to_string()),
            ("alo", self.alo.to_string()),
            ("afl", self.afl.to_string()),
        ]
    }

    /// Canonical text form, one `key=value` per line in a fixed order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// First 8 bytes of SHA-256 over the canonical architecture keys.
    pub fn arch_hash(&self) -> [u8; 8] {
        let mut text = String::new();
        for (k, v) in self.entries() {
            if !RUNTIME_KEYS.contains(&k) {
                writeln!(text, "{k}={v}").unwrap();
            }
        }
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].try_into().unwrap()
    }

    fn encoder_params(&self, out: usize) -> usize {
        let [w0, w1, w2] = self.encoder_widths;
        conv_params(3, w0, 7)
            + 4 * conv_params(w0, w0, 3)
            + conv_params(w0, w1, 3)
            + 4 * conv_params(w1, w1, 3)
            + conv_params(w1, w2, 3)
            + 4 * conv_params(w2, w2, 3)
            + conv_params(w2, out, 1)
    }

    /// Closed-form count of the parameters introduced by the scalar head.
    pub fn alo_head_params(&self) -> usize {
        let two_l = 2 * self.levels;
        conv_params(self.hidden_dim + self.context_dim, self.alo_mid, 1)
            + 2 * (2 * self.alo_mid * two_l + two_l)
    }

    /// GRU weights that read the broadcast scalar channels.
    pub fn alo_gru_params(&self) -> usize {
        3 * self.hidden_dim * 4 * self.levels * 9
    }

    pub fn afl_params(&self) -> usize {
        self.heads * self.head_dim * self.feature_dim + if self.afl_scale { 2 } else { 0 }
    }

    /// Closed-form count of every parameter of the model.
    pub fn analytic_param_count(&self) -> usize {
        let dh = self.hidden_dim;
        let dx = self.motion_channels();
        let motion = conv_params(self.lookup_channels(), self.corr_hidden, 1)
            + conv_params(self.corr_hidden, self.corr_out, 3)
            + conv_params(2, self.flow_out, 3);
        let gru = 3 * conv_params(dh + dx, dh, 3);
        let head = conv_params(dh, self.head_hidden, 3) + conv_params(self.head_hidden, 2, 3);
        self.encoder_params(self.feature_dim)
            + self.encoder_params(self.hidden_dim + self.context_dim)
            + motion
            + gru
            + head
            + self.alo_head_params()
            + self.afl_params()
    }

    /// Parameters that matter when the given modules are switched on; the
    /// baseline (`false, false`) excludes the scalar head, the GRU weights on
    /// the scalar channels and the attention projections.
    pub fn active_param_count(&self, alo: bool, afl: bool) -> usize {
        let mut n = self.analytic_param_count();
        if !alo {
            n -= self.alo_head_params() + self.alo_gru_params();
        }
        if !afl {
            n -= self.afl_params();
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.gamma, 0.8);
        assert_eq!(c.iters, 12);
        assert_eq!(c.radius, 4);
        assert_eq!(c.levels, 4);
        assert_eq!(c.heads, 4);
        assert_eq!(c.grid_len(), 81);
        assert_eq!(c.lookup_channels(), 324);
        assert_eq!(c.corr_feature_dim(true), 96);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ModelConfig::default();
        c.set("radius", "3").unwrap();
        c.set("grid", "diamond").unwrap();
        c.set("encoder_widths", "8,12,16").unwrap();
        let (back, extra) = ModelConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
        assert!(extra.is_empty());
    }

    #[test]
    fn runtime_keys_do_not_change_hash() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.iters = 3;
        b.alo = false;
        b.gamma = 0.5;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.radius = 3;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig::from_kv_text("pe_dim=7").is_err());
        assert!(ModelConfig::from_kv_text("gamma=0").is_err());
        assert!(ModelConfig::from_kv_text("levels=0").is_err());
        assert!(ModelConfig::from_kv_text("radius").is_err());
        let (_, extra) = ModelConfig::from_kv_text("seed=5\n# comment\n").unwrap();
        assert_eq!(extra, vec![("seed".to_string(), "5".to_string())]);
    }

    #[test]
    fn diamond_grid_size() {
        let mut c = ModelConfig::default();
        c.grid = GridShape::Diamond;
        assert_eq!(c.grid_len(), 41);
    }
}
