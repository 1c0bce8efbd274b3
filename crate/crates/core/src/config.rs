//! Flat `key = value` configuration.
//!
//! The first line of a config file is the version header `# sbir-config v1`.
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! rejected. [`Config::to_text`] writes every key with its current value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CONFIG_HEADER: &str = "# sbir-config v1";

/// How the sketch/photo token similarity matrix is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Cosine similarity of every token pair.
    Cosine,
    /// Concatenated token pair scored by a learned one-hidden-layer metric.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    Cosine,
}

/// What counts as a match when building labels and relevance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Category,
    Instance,
}

/// What "remove one token pair" means for influence analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfluenceMode {
    /// Zero the single kernel entry `(i, j)`.
    Entry,
    /// Zero sketch row `i` and photo column `j`.
    RowColumn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub conv_kernels: Vec<usize>,
    pub learnable_tokenizer: bool,
    pub pos_embed: bool,
    /// Shift and scale each image to zero mean, unit deviation before tokenizing.
    pub standardize_input: bool,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices after which token selection runs.
    pub selection_layers: Vec<usize>,
    pub keep_rate_sketch: f64,
    pub keep_rate_photo: f64,
    pub share_branches: bool,
    pub cross_attention: bool,
    pub ca_heads: usize,
    pub ca_mlp: bool,
    pub keep_rate_ca: f64,
    /// Triplet loss reads the retrieval token after cross-attention instead
    /// of straight from the encoder.
    pub triplet_after_ca: bool,
    pub kernel: KernelKind,
    /// Relation network hidden width; 0 means four times the token count.
    pub rn_hidden: usize,
    pub rn_dropout: f64,
    pub use_ret: bool,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_size: 16,
            embed_dim: 64,
            conv_kernels: vec![7, 3, 3, 3],
            learnable_tokenizer: true,
            pos_embed: true,
            standardize_input: true,
            enc_layers: 4,
            enc_heads: 4,
            mlp_ratio: 4,
            selection_layers: vec![2],
            keep_rate_sketch: 1.0,
            keep_rate_photo: 1.0,
            share_branches: true,
            cross_attention: true,
            ca_heads: 8,
            ca_mlp: true,
            keep_rate_ca: 1.0,
            triplet_after_ca: false,
            kernel: KernelKind::Cosine,
            rn_hidden: 0,
            rn_dropout: 0.0,
            use_ret: true,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// The full-size architecture: 224² inputs, 768-wide tokens, 12 blocks,
    /// selection after blocks 4, 7 and 10, relation dropout 0.5.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            embed_dim: 768,
            enc_layers: 12,
            enc_heads: 12,
            selection_layers: vec![4, 7, 10],
            rn_dropout: 0.5,
            ..Self::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn rn_hidden_width(&self) -> usize {
        if self.rn_hidden == 0 {
            4 * self.num_tokens()
        } else {
            self.rn_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.image_size == 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.learnable_tokenizer {
            let stride: usize = 1 << self.conv_kernels.len();
            if stride != self.patch_size {
                return bad(format!(
                    "{} stride-2 conv layers give total stride {stride}, patch_size is {}",
                    self.conv_kernels.len(),
                    self.patch_size
                ));
            }
            if !self.embed_dim.is_multiple_of(1 << (self.conv_kernels.len() - 1)) {
                return bad(format!("embed_dim {} not divisible by the conv channel ramp", self.embed_dim));
            }
        }
        for (name, heads) in [("enc_heads", self.enc_heads), ("ca_heads", self.ca_heads)] {
            if heads == 0 || !self.embed_dim.is_multiple_of(heads) {
                return bad(format!("{name} {heads} must divide embed_dim {}", self.embed_dim));
            }
        }
        for (name, r) in [
            ("keep_rate_sketch", self.keep_rate_sketch),
            ("keep_rate_photo", self.keep_rate_photo),
            ("keep_rate_ca", self.keep_rate_ca),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} {r} outside (0, 1]"));
            }
        }
        if let Some(&l) = self.selection_layers.iter().find(|&&l| l == 0 || l > self.enc_layers) {
            return bad(format!("selection layer {l} outside [1, {}]", self.enc_layers));
        }
        if !self.use_ret && (self.keep_rate_sketch < 1.0 || self.keep_rate_photo < 1.0 || self.keep_rate_ca < 1.0) {
            return bad("token selection needs the retrieval token (use_ret = false)".into());
        }
        if !(0.0..1.0).contains(&self.rn_dropout) {
            return bad(format!("rn_dropout {} outside [0, 1)", self.rn_dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub granularity: Granularity,
    pub relation_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            batch_size: 4,
            epochs: 20,
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            granularity: Granularity::Category,
            relation_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ret_distance: Distance,
    pub ks: Vec<usize>,
    /// Truncate AP at this many ranks; 0 uses the whole gallery.
    pub map_cutoff: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ret_distance: Distance::Euclidean,
            ks: vec![1, 10, 100, 200],
            map_cutoff: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainConfig {
    pub influence: InfluenceMode,
    pub top_k: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            influence: InfluenceMode::Entry,
            top_k: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::parse("config", format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::parse("config", format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_val(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, e, x) = (&mut self.model, &mut self.train, &mut self.eval, &mut self.explain);
        match key {
            "image_size" => m.image_size = parse_val(key, v)?,
            "channels" => m.channels = parse_val(key, v)?,
            "patch_size" => m.patch_size = parse_val(key, v)?,
            "embed_dim" => m.embed_dim = parse_val(key, v)?,
            "conv_kernels" => m.conv_kernels = parse_list(key, v)?,
            "learnable_tokenizer" => m.learnable_tokenizer = parse_bool(key, v)?,
            "pos_embed" => m.pos_embed = parse_bool(key, v)?,
            "standardize_input" => m.standardize_input = parse_bool(key, v)?,
            "enc_layers" => m.enc_layers = parse_val(key, v)?,
            "enc_heads" => m.enc_heads = parse_val(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_val(key, v)?,
            "selection_layers" => m.selection_layers = parse_list(key, v)?,
            "keep_rate_sketch" => m.keep_rate_sketch = parse_val(key, v)?,
            "keep_rate_photo" => m.keep_rate_photo = parse_val(key, v)?,
            "share_branches" => m.share_branches = parse_bool(key, v)?,
            "cross_attention" => m.cross_attention = parse_bool(key, v)?,
            "ca_heads" => m.ca_heads = parse_val(key, v)?,
            "ca_mlp" => m.ca_mlp = parse_bool(key, v)?,
            "keep_rate_ca" => m.keep_rate_ca = parse_val(key, v)?,
            "triplet_after_ca" => m.triplet_after_ca = parse_bool(key, v)?,
            "kernel" => {
                m.kernel = match v {
                    "cosine" => KernelKind::Cosine,
                    "concat" => KernelKind::Concat,
                    _ => return Err(Error::parse("config", format!("bad kernel `{v}`"))),
                }
            }
            "rn_hidden" => m.rn_hidden = parse_val(key, v)?,
            "rn_dropout" => m.rn_dropout = parse_val(key, v)?,
            "use_ret" => m.use_ret = parse_bool(key, v)?,
            "ln_eps" => m.ln_eps = parse_val(key, v)?,
            "init_std" => m.init_std = parse_val(key, v)?,
            "margin" => t.margin = parse_val(key, v)?,
            "batch_size" => t.batch_size = parse_val(key, v)?,
            "epochs" => t.epochs = parse_val(key, v)?,
            "lr" => t.lr = parse_val(key, v)?,
            "weight_decay" => t.weight_decay = parse_val(key, v)?,
            "beta1" => t.beta1 = parse_val(key, v)?,
            "beta2" => t.beta2 = parse_val(key, v)?,
            "adam_eps" => t.adam_eps = parse_val(key, v)?,
            "seed" => t.seed = parse_val(key, v)?,
            "granularity" => {
                t.granularity = match v {
                    "category" => Granularity::Category,
                    "instance" => Granularity::Instance,
                    _ => return Err(Error::parse("config", format!("bad granularity `{v}`"))),
                }
            }
            "relation_loss" => t.relation_loss = parse_bool(key, v)?,
            "ret_distance" => {
                e.ret_distance = match v {
                    "euclidean" => Distance::Euclidean,
                    "cosine" => Distance::Cosine,
                    _ => return Err(Error::parse("config", format!("bad ret_distance `{v}`"))),
                }
            }
            "eval_ks" => e.ks = parse_list(key, v)?,
            "map_cutoff" => e.map_cutoff = parse_val(key, v)?,
            "influence" => {
                x.influence = match v {
                    "entry" => InfluenceMode::Entry,
                    "row_column" => InfluenceMode::RowColumn,
                    _ => return Err(Error::parse("config", format!("bad influence mode `{v}`"))),
                }
            }
            "correspond_top_k" => x.top_k = parse_val(key, v)?,
            _ => return Err(Error::parse("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CONFIG_HEADER => {}
            other => {
                return Err(Error::parse(
                    "config",
                    format!("expected header `{CONFIG_HEADER}`, found {:?}", other.unwrap_or("")),
                ))
            }
        }
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected `key = value`", no + 2)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let (m, t, e, x) = (&self.model, &self.train, &self.eval, &self.explain);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("conv_kernels", list(&m.conv_kernels));
        kv("learnable_tokenizer", m.learnable_tokenizer.to_string());
        kv("pos_embed", m.pos_embed.to_string());
        kv("standardize_input", m.standardize_input.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("enc_heads", m.enc_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("selection_layers", list(&m.selection_layers));
        kv("keep_rate_sketch", m.keep_rate_sketch.to_string());
        kv("keep_rate_photo", m.keep_rate_photo.to_string());
        kv("share_branches", m.share_branches.to_string());
        kv("cross_attention", m.cross_attention.to_string());
        kv("ca_heads", m.ca_heads.to_string());
        kv("ca_mlp", m.ca_mlp.to_string());
        kv("keep_rate_ca", m.keep_rate_ca.to_string());
        kv("triplet_after_ca", m.triplet_after_ca.to_string());
        kv(
            "kernel",
            match m.kernel {
                KernelKind::Cosine => "cosine",
                KernelKind::Concat => "concat",
            }
            .into(),
        );
        kv("rn_hidden", m.rn_hidden.to_string());
        kv("rn_dropout", m.rn_dropout.to_string());
        kv("use_ret", m.use_ret.to_string());
        kv("ln_eps", format!("{:e}", m.ln_eps));
        kv("init_std", m.init_std.to_string());
        kv("margin", t.margin.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", format!("{:e}", t.adam_eps));
        kv("seed", t.seed.to_string());
        kv(
            "granularity",
            match t.granularity {
                Granularity::Category => "category",
                Granularity::Instance => "instance",
            }
            .into(),
        );
        kv("relation_loss", t.relation_loss.to_string());
        kv(
            "ret_distance",
            match e.ret_distance {
                Distance::Euclidean => "euclidean",
                Distance::Cosine => "cosine",
            }
            .into(),
        );
        kv("eval_ks", list(&e.ks));
        kv("map_cutoff", e.map_cutoff.to_string());
        kv(
            "influence",
            match x.influence {
                InfluenceMode::Entry => "entry",
                InfluenceMode::RowColumn => "row_column",
            }
            .into(),
        );
        kv("correspond_top_k", x.top_k.to_string());
        format!("{CONFIG_HEADER}\n{s}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_covers_every_key() {
        let mut cfg = Config::default();
        cfg.model.kernel = KernelKind::Concat;
        cfg.model.selection_layers = vec![4, 7, 10];
        cfg.train.lr = 3e-4;
        cfg.explain.influence = InfluenceMode::RowColumn;
        let back = Config::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_missing_header_are_rejected() {
        assert!(Config::from_text("image_size = 64\n").is_err());
        let text = format!("{CONFIG_HEADER}\nbogus = 1\n");
        assert!(Config::from_text(&text).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn defaults_validate_and_full_scale_constants() {
        ModelConfig::default().validate().unwrap();
        let p = ModelConfig::full_scale();
        p.validate().unwrap();
        assert_eq!(p.num_tokens(), 196);
        assert_eq!(ModelConfig::default().num_tokens(), 16);
    }

    #[test]
    fn keep_rates_must_be_in_unit_interval() {
        let mut m = ModelConfig {
            keep_rate_ca: 0.0,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        m.keep_rate_ca = 1.0;
        m.selection_layers = vec![5];
        assert!(m.validate().is_err());
    }
}
