use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flow::{HeadKind, ScheduleKind};

/// Architecture hyperparameters. Parameter shapes are a pure function of this.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub look_back: usize,
    pub horizon: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_denoise_layers: usize,
    /// Context tokens prepended to the encoder input; 0 disables them.
    pub n_context_tokens: usize,
    pub context_vocab: usize,
    pub ff_mult: usize,
    pub head: HeadKind,
    pub scheduler: ScheduleKind,
    /// When false the decoder reads learned queries instead of shifted targets.
    pub autoregressive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            look_back: 96,
            horizon: 48,
            patch_size: 4,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_denoise_layers: 2,
            n_context_tokens: 6,
            context_vocab: crate::data::DEFAULT_CONTEXT_VOCAB,
            ff_mult: 4,
            head: HeadKind::MeanVelocity,
            scheduler: ScheduleKind::Linear,
            autoregressive: true,
        }
    }
}

impl ModelConfig {
    pub fn n_hist_patches(&self) -> usize {
        self.look_back / self.patch_size
    }

    /// Target patches, rounding up.
    pub fn n_pred_patches(&self) -> usize {
        self.horizon.div_ceil(self.patch_size)
    }

    /// Zeros appended to the final target patch.
    pub fn pad(&self) -> usize {
        self.n_pred_patches() * self.patch_size - self.horizon
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn flow_head(&self) -> bool {
        self.head.is_generative()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("look_back", self.look_back),
            ("horizon", self.horizon),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_denoise_layers", self.n_denoise_layers),
            ("context_vocab", self.context_vocab),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.look_back % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "look_back {} is not a multiple of patch_size {}",
                self.look_back, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Stable `key=value` form, one pair per line, keys sorted.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("look_back", self.look_back.to_string());
        put("horizon", self.horizon.to_string());
        put("patch_size", self.patch_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("n_enc_layers", self.n_enc_layers.to_string());
        put("n_dec_layers", self.n_dec_layers.to_string());
        put("n_denoise_layers", self.n_denoise_layers.to_string());
        put("n_context_tokens", self.n_context_tokens.to_string());
        put("context_vocab", self.context_vocab.to_string());
        put("ff_mult", self.ff_mult.to_string());
        put("head", self.head.to_string());
        put("scheduler", self.scheduler.to_string());
        put("autoregressive", self.autoregressive.to_string());
        put("flow_head", self.flow_head().to_string());
        m
    }

    pub const KEYS: &'static [&'static str] = &[
        "look_back",
        "horizon",
        "patch_size",
        "d_model",
        "n_heads",
        "n_enc_layers",
        "n_dec_layers",
        "n_denoise_layers",
        "n_context_tokens",
        "context_vocab",
        "ff_mult",
        "head",
        "scheduler",
        "autoregressive",
        "flow_head",
    ];

    /// Applies one `key=value` setting. `flow_head=false` selects the
    /// regression head.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("model.{key}: expected an integer, got '{v}'")))
        };
        let boolean = |v: &str| -> Result<bool> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("model.{key}: expected true|false, got '{v}'")))
        };
        match key {
            "look_back" => self.look_back = int(value)?,
            "horizon" => self.horizon = int(value)?,
            "patch_size" => self.patch_size = int(value)?,
            "d_model" => self.d_model = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "n_enc_layers" => self.n_enc_layers = int(value)?,
            "n_dec_layers" => self.n_dec_layers = int(value)?,
            "n_denoise_layers" => self.n_denoise_layers = int(value)?,
            "n_context_tokens" => self.n_context_tokens = int(value)?,
            "context_vocab" => self.context_vocab = int(value)?,
            "ff_mult" => self.ff_mult = int(value)?,
            "head" => self.head = value.trim().parse()?,
            "scheduler" => self.scheduler = value.trim().parse()?,
            "autoregressive" => self.autoregressive = boolean(value)?,
            "flow_head" => {
                let on = boolean(value)?;
                if !on {
                    self.head = HeadKind::Regression;
                } else if self.head == HeadKind::Regression {
                    self.head = HeadKind::MeanVelocity;
                }
            }
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
