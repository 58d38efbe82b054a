//! Hyperparameters and their `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    // model widths and depths
    pub width: usize,
    pub memory_width: usize,
    pub attn_width: usize,
    pub heads: usize,
    pub vision_depth: usize,
    pub text_depth: usize,
    pub gnn_depth: usize,
    pub fusion_depth: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_caption: usize,
    // masking
    pub mlm_rate: f64,
    pub mvm_rate: f64,
    pub mean_span: f64,
    pub max_span: usize,
    // retrieval and graph
    pub k_per_patch: usize,
    pub k_final: usize,
    pub per_node_cap: usize,
    pub relevance_temperature: f64,
    pub edge_drop: f64,
    pub negatives: usize,
    pub margin: f64,
    pub tau_init: f64,
    pub weights: LossWeights,
    // optimisation
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch: usize,
    // synthetic corpus
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
    pub examples: usize,
    pub clusters: usize,
    pub noise: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 17,
            width: 16,
            memory_width: 16,
            attn_width: 16,
            heads: 2,
            vision_depth: 2,
            text_depth: 2,
            gnn_depth: 2,
            fusion_depth: 2,
            patch: 4,
            image_size: 16,
            channels: 1,
            vocab: 1000,
            max_caption: 16,
            mlm_rate: 0.25,
            mvm_rate: 0.25,
            mean_span: 3.0,
            max_span: 5,
            k_per_patch: 4,
            k_final: 8,
            per_node_cap: 16,
            relevance_temperature: 1.0,
            edge_drop: 0.15,
            negatives: 128,
            margin: 0.0,
            tau_init: 0.07,
            weights: LossWeights::default(),
            lr: 5e-5,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 300,
            batch: 8,
            entities: 200,
            relations: 10,
            triplets: 800,
            examples: 200,
            clusters: 10,
            noise: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            seed,
            width,
            memory_width,
            attn_width,
            heads,
            vision_depth,
            text_depth,
            gnn_depth,
            fusion_depth,
            patch,
            image_size,
            channels,
            vocab,
            max_caption,
            mlm_rate,
            mvm_rate,
            mean_span,
            max_span,
            k_per_patch,
            k_final,
            per_node_cap,
            relevance_temperature,
            edge_drop,
            negatives,
            margin,
            tau_init,
            lr,
            weight_decay,
            beta1,
            beta2,
            adam_eps,
            steps,
            batch,
            entities,
            relations,
            triplets,
            examples,
            clusters,
            noise
        )
    };
}

impl Config {
    /// Number of patches per image.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = parse(key, value)?,)*
                    "weight_mlm" => self.weights.mlm = parse(key, value)?,
                    "weight_mvm" => self.weights.mvm = parse(key, value)?,
                    "weight_linkpred" => self.weights.linkpred = parse(key, value)?,
                    "weight_itc" => self.weights.itc = parse(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            };
        }
        fields!(assign);
        Ok(())
    }

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every field, one `key = value` line each; `parse` reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($f:ident),*) => {
                $(let _ = writeln!(s, "{} = {:?}", stringify!($f), self.$f);)*
            };
        }
        fields!(emit);
        let _ = writeln!(s, "weight_mlm = {:?}", self.weights.mlm);
        let _ = writeln!(s, "weight_mvm = {:?}", self.weights.mvm);
        let _ = writeln!(s, "weight_linkpred = {:?}", self.weights.linkpred);
        let _ = writeln!(s, "weight_itc = {:?}", self.weights.itc);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("width", self.width),
            ("memory_width", self.memory_width),
            ("attn_width", self.attn_width),
            ("heads", self.heads),
            ("vision_depth", self.vision_depth),
            ("text_depth", self.text_depth),
            ("gnn_depth", self.gnn_depth),
            ("fusion_depth", self.fusion_depth),
            ("patch", self.patch),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("max_caption", self.max_caption),
            ("max_span", self.max_span),
            ("k_per_patch", self.k_per_patch),
            ("k_final", self.k_final),
            ("per_node_cap", self.per_node_cap),
            ("negatives", self.negatives),
            ("batch", self.batch),
            ("entities", self.entities),
            ("relations", self.relations),
            ("examples", self.examples),
            ("clusters", self.clusters),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be >= 1"));
            }
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.image_size % self.patch != 0 {
            return bad(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.memory_width < 2 {
            return bad("memory_width must be >= 2".into());
        }
        for (k, v) in [("mlm_rate", self.mlm_rate), ("mvm_rate", self.mvm_rate), ("edge_drop", self.edge_drop)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{k} = {v} outside (0, 1)"));
            }
        }
        if !(self.mean_span >= 1.0) {
            return bad("mean_span must be >= 1".into());
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0".into());
        }
        for (k, v) in [
            ("tau_init", self.tau_init),
            ("relevance_temperature", self.relevance_temperature),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} = {v} must be > 0"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.noise >= 0.0) {
            return bad("weight_decay and noise must be >= 0".into());
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} = {v} outside [0, 1)"));
            }
        }
        if self.weights.as_array().iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be >= 0".into());
        }
        if self.batch < 2 {
            return bad("batch must be >= 2 for the contrastive loss".into());
        }
        if self.batch > self.examples {
            return bad(format!("batch {} exceeds {} examples", self.batch, self.examples));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.lr = 1.25e-3;
        c.weights.itc = 0.5;
        c.seed = u64::MAX;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = Config::parse("lr = 0.1\nlearning_rate = 3\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::parse("mlm_rate = 1.5").is_err());
        assert!(Config::parse("width = 15").is_err());
        assert!(Config::parse("steps = many").is_err());
    }
}
