//! Flat `key=value` configuration covering the model architecture and the
//! training protocol. Unknown keys are hard errors so typos fail fast.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line}: expected `key=value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config key `{key}`: cannot parse `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Transformer latent width.
    pub c_d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the transformer MLP blocks.
    pub mlp_hidden: usize,
    /// Hidden width of the regression heads.
    pub head_hidden: usize,
    pub dropout_p: f64,
    /// Number of scenes embedded by the model.
    pub n_scenes: usize,
    /// Square input side in pixels.
    pub input_hw: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    /// Backbone stride of the position activation map.
    pub map_x_stride: usize,
    /// Backbone stride of the orientation activation map.
    pub map_q_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_d: 256,
            heads: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            mlp_hidden: 256,
            head_hidden: 1024,
            dropout_p: 0.1,
            n_scenes: 1,
            input_hw: 224,
            backbone_channels: vec![16, 32, 40, 112],
            map_x_stride: 16,
            map_q_stride: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.c_d < 2 || self.c_d % 2 != 0 {
            return fail(format!("c_d must be even and >= 2, got {}", self.c_d));
        }
        if self.heads == 0 || self.c_d % self.heads != 0 {
            return fail(format!("c_d {} must be divisible by heads {}", self.c_d, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder_layers and decoder_layers must be >= 1".into());
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return fail("mlp_hidden and head_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0,1), got {}", self.dropout_p));
        }
        if self.n_scenes == 0 {
            return fail("n_scenes must be >= 1".into());
        }
        for (name, s) in [("map_x_stride", self.map_x_stride), ("map_q_stride", self.map_q_stride)]
        {
            if s < 2 || !s.is_power_of_two() {
                return fail(format!("{name} must be a power of two >= 2, got {s}"));
            }
        }
        if self.map_q_stride > self.map_x_stride {
            return fail(format!(
                "map_q_stride {} must not exceed map_x_stride {}",
                self.map_q_stride, self.map_x_stride
            ));
        }
        if self.input_hw % self.map_x_stride != 0 || self.input_hw % self.map_q_stride != 0 {
            return fail(format!(
                "input_hw {} must be divisible by strides {} and {}",
                self.input_hw, self.map_x_stride, self.map_q_stride
            ));
        }
        let stages = self.map_x_stride.trailing_zeros() as usize;
        if self.backbone_channels.len() != stages {
            return fail(format!(
                "backbone_channels needs one entry per stride-2 stage ({} for stride {}), got {}",
                stages,
                self.map_x_stride,
                self.backbone_channels.len()
            ));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return fail("backbone_channels entries must be >= 1".into());
        }
        Ok(())
    }

    /// Spatial side of the position activation map.
    pub fn map_x_side(&self) -> usize {
        self.input_hw / self.map_x_stride
    }

    /// Spatial side of the orientation activation map.
    pub fn map_q_side(&self) -> usize {
        self.input_hw / self.map_q_stride
    }

    /// Channels of the position activation map.
    pub fn map_x_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap()
    }

    /// Channels of the orientation activation map.
    pub fn map_q_channels(&self) -> usize {
        let tap = self.map_q_stride.trailing_zeros() as usize;
        self.backbone_channels[tap - 1]
    }

    /// Deterministic `key=value` text used for the checkpoint config echo.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "c_d={}", self.c_d);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "decoder_layers={}", self.decoder_layers);
        let _ = writeln!(s, "mlp_hidden={}", self.mlp_hidden);
        let _ = writeln!(s, "head_hidden={}", self.head_hidden);
        let _ = writeln!(s, "dropout_p={}", self.dropout_p);
        let _ = writeln!(s, "n_scenes={}", self.n_scenes);
        let _ = writeln!(s, "input_hw={}", self.input_hw);
        let channels: Vec<String> =
            self.backbone_channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "backbone_channels={}", channels.join(","));
        let _ = writeln!(s, "map_x_stride={}", self.map_x_stride);
        let _ = writeln!(s, "map_q_stride={}", self.map_q_stride);
        s
    }

    /// Parse a `key=value` text containing only model keys.
    pub fn from_kv(text: &str) -> Result<ModelConfig, ConfigError> {
        let run = RunConfig::parse(text)?;
        Ok(run.model)
    }
}

/// Optimization protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub s_x_init: f64,
    pub s_q_init: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
            s_x_init: 0.0,
            s_q_init: -3.0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(ConfigError::Invalid("eval_every must be >= 1".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(ConfigError::Invalid("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Merged model + training configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse `key=value` lines (`#` comments and blank lines skipped),
    /// starting from defaults. `mlp_hidden` follows `c_d` unless given.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: i + 1, text: raw.to_string() })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_entries(&entries)
    }

    /// Apply `key=value` override pairs on top of an existing config.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), ConfigError> {
        let mut cfg = self.clone();
        let mut saw_mlp_hidden = false;
        for (k, v) in overrides {
            apply_key(&mut cfg, k, v, &mut saw_mlp_hidden)?;
        }
        *self = cfg;
        self.model.validate()?;
        self.train.validate()
    }

    fn from_entries(entries: &BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut saw_mlp_hidden = false;
        for (k, v) in entries {
            apply_key(&mut cfg, k, v, &mut saw_mlp_hidden)?;
        }
        if !saw_mlp_hidden {
            cfg.model.mlp_hidden = cfg.model.c_d;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let t = &self.train;
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "lr={}", t.lr);
        let _ = writeln!(s, "beta1={}", t.beta1);
        let _ = writeln!(s, "beta2={}", t.beta2);
        let _ = writeln!(s, "eps={}", t.eps);
        let _ = writeln!(s, "max_steps={}", t.max_steps);
        let _ = writeln!(s, "eval_every={}", t.eval_every);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "s_x_init={}", t.s_x_init);
        let _ = writeln!(s, "s_q_init={}", t.s_q_init);
        let _ = writeln!(s, "grad_clip={}", t.grad_clip);
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn apply_key(
    cfg: &mut RunConfig,
    key: &str,
    value: &str,
    saw_mlp_hidden: &mut bool,
) -> Result<(), ConfigError> {
    match key {
        "c_d" => cfg.model.c_d = parse_num(key, value)?,
        "heads" => cfg.model.heads = parse_num(key, value)?,
        "encoder_layers" => cfg.model.encoder_layers = parse_num(key, value)?,
        "decoder_layers" => cfg.model.decoder_layers = parse_num(key, value)?,
        "mlp_hidden" => {
            cfg.model.mlp_hidden = parse_num(key, value)?;
            *saw_mlp_hidden = true;
        }
        "head_hidden" => cfg.model.head_hidden = parse_num(key, value)?,
        "dropout_p" => cfg.model.dropout_p = parse_num(key, value)?,
        "n_scenes" => cfg.model.n_scenes = parse_num(key, value)?,
        "input_hw" => cfg.model.input_hw = parse_num(key, value)?,
        "backbone_channels" => {
            cfg.model.backbone_channels = value
                .split(',')
                .map(|v| parse_num(key, v.trim()))
                .collect::<Result<Vec<usize>, _>>()?;
        }
        "map_x_stride" => cfg.model.map_x_stride = parse_num(key, value)?,
        "map_q_stride" => cfg.model.map_q_stride = parse_num(key, value)?,
        "batch_size" => cfg.train.batch_size = parse_num(key, value)?,
        "lr" => cfg.train.lr = parse_num(key, value)?,
        "beta1" => cfg.train.beta1 = parse_num(key, value)?,
        "beta2" => cfg.train.beta2 = parse_num(key, value)?,
        "eps" => cfg.train.eps = parse_num(key, value)?,
        "max_steps" => cfg.train.max_steps = parse_num(key, value)?,
        "eval_every" => cfg.train.eval_every = parse_num(key, value)?,
        "seed" => cfg.train.seed = parse_num(key, value)?,
        "s_x_init" => cfg.train.s_x_init = parse_num(key, value)?,
        "s_q_init" => cfg.train.s_q_init = parse_num(key, value)?,
        "grad_clip" => cfg.train.grad_clip = parse_num(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_geometry() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.map_x_side(), 14);
        assert_eq!(cfg.map_q_side(), 28);
        assert_eq!(cfg.map_x_channels(), 112);
        assert_eq!(cfg.map_q_channels(), 40);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("c_d=64\nbogus_key=1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "bogus_key"));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::parse("# architecture\n\nc_d = 64\nheads=2\n").unwrap();
        assert_eq!(cfg.model.c_d, 64);
        assert_eq!(cfg.model.heads, 2);
    }

    #[test]
    fn mlp_hidden_follows_c_d_unless_given() {
        let cfg = RunConfig::parse("c_d=64\nheads=2\n").unwrap();
        assert_eq!(cfg.model.mlp_hidden, 64);
        let cfg = RunConfig::parse("c_d=64\nheads=2\nmlp_hidden=128\n").unwrap();
        assert_eq!(cfg.model.mlp_hidden, 128);
    }

    #[test]
    fn kv_round_trip_is_stable() {
        let mut cfg = RunConfig::default();
        cfg.model.c_d = 32;
        cfg.model.heads = 2;
        cfg.model.mlp_hidden = 32;
        cfg.model.n_scenes = 4;
        cfg.model.input_hw = 64;
        cfg.train.max_steps = 123;
        let text = cfg.to_kv();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_kv(), text);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut cfg = ModelConfig::default();
        cfg.c_d = 255;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.input_hw = 100; // not divisible by 16
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.backbone_channels = vec![8, 8];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::parse("c_d=64\nheads=2\nn_scenes=4\ninput_hw=64\n").unwrap();
        cfg.apply_overrides(&[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.train.seed, 9);
        let err = cfg.apply_overrides(&[("nope".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = RunConfig::parse("c_d=64\njunk line\n").unwrap_err();
        match err {
            ConfigError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
