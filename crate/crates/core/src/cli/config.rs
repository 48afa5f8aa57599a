use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{arch, train, CaptureBackend, EmbeddingPoint, LayerFilter, Network, TrainConfig};
use crate::data::{synthetic_digits, Preprocessing};
use crate::error::{GamError, Result};

/// Model section of a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Option<String>,
    /// `random`, `builtin`, `train` (sanity only) or a path to a JSON weights file.
    pub weights: Option<String>,
    /// `pooled`, `penultimate` or `hidden:<k>`.
    pub embedding_point: Option<String>,
    pub blocks: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanityConfig {
    pub test: Option<String>,
    pub dataset: Option<String>,
    pub images: Option<usize>,
    pub train_size: Option<usize>,
    pub permutation: Option<String>,
    pub max_epochs: Option<usize>,
}

/// Declarative run configuration read from TOML. Command-line flags take
/// precedence over every field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub n: Option<usize>,
    pub ns: Option<Vec<usize>>,
    pub score: Option<String>,
    pub class: Option<String>,
    pub image: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub threshold: Option<f64>,
    pub auto_threshold: Option<f64>,
    pub pairs_per_class: Option<usize>,
    pub alpha: Option<f64>,
    pub colormap: Option<String>,
    #[serde(default)]
    pub sanity: SanityConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GamError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| GamError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.image, &mut cfg.reference, &mut cfg.manifest, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(w) = cfg.model.weights.as_mut() {
            if !matches!(w.as_str(), "random" | "builtin" | "train") && Path::new(w.as_str()).is_relative() {
                *w = base.join(w.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(GamError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Directory for cached built-in weights: `GAMKIT_CACHE`, else the user
/// cache directory.
pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("GAMKIT_CACHE").filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(dir).join("gamkit");
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("gamkit"),
        None => std::env::temp_dir().join("gamkit"),
    }
}

pub fn parse_embedding_point(s: &str) -> Result<EmbeddingPoint> {
    match s {
        "pooled" => Ok(EmbeddingPoint::Pooled),
        "penultimate" => Ok(EmbeddingPoint::Penultimate),
        other => other
            .strip_prefix("hidden:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(EmbeddingPoint::Hidden)
            .ok_or_else(|| GamError::Config(format!("unknown embedding point `{other}`"))),
    }
}

/// Training recipe of the built-in weights: procedurally drawn digits.
pub fn builtin_recipe(backbone: &str) -> Result<(usize, usize, TrainConfig)> {
    let cfg = |max_epochs| TrainConfig {
        max_epochs,
        batch_size: 32,
        learning_rate: 2e-3,
        target_accuracy: Some(99.0),
        require_target: false,
        seed: 7,
    };
    match backbone {
        "lenet" => Ok((1000, 28, cfg(30))),
        "toy" => Ok((300, 8, cfg(60))),
        other => Err(GamError::Config(format!(
            "no built-in weights for `{other}`; use `random` or a weights file"
        ))),
    }
}

fn train_builtin(backbone: &str) -> Result<Network> {
    let (count, size, cfg) = builtin_recipe(backbone)?;
    let mut net = arch::build(backbone, 1)?;
    let classes = net.class_count().unwrap_or(10);
    let digits: Vec<_> = synthetic_digits(count, size, 2024)
        .into_iter()
        .filter(|d| d.label < classes)
        .collect();
    let images: Vec<_> = digits.iter().map(|d| d.image.clone()).collect();
    let labels: Vec<_> = digits.iter().map(|d| d.label).collect();
    let report = train(&mut net, &images, &labels, &cfg)?;
    log::info!(
        "trained built-in {backbone}: {:.1}% train accuracy after {} epochs",
        report.train_accuracy,
        report.epochs
    );
    Ok(net)
}

/// Built-in weights, trained once and cached under [`cache_dir`].
pub fn builtin_weights(backbone: &str) -> Result<Network> {
    builtin_recipe(backbone)?;
    let path = cache_dir().join(format!("{backbone}-digits-v1.json"));
    if let Ok(text) = std::fs::read_to_string(&path) {
        match serde_json::from_str::<Network>(&text) {
            Ok(net) if net.arch == backbone => return Ok(net),
            _ => log::warn!("ignoring unreadable cached weights {}", path.display()),
        }
    }
    let net = train_builtin(backbone)?;
    let write = || -> std::io::Result<()> {
        std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_string(&net).map_err(std::io::Error::other)?)?;
        std::fs::rename(&tmp, &path)
    };
    if let Err(e) = write() {
        log::warn!("could not cache weights at {}: {e}", path.display());
    }
    Ok(net)
}

pub fn load_weights_file(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| GamError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GamError::Format {
        format: "weights",
        reason: format!("{}: {e}", path.display()),
    })
}

pub fn save_weights_file(path: &Path, net: &Network) -> Result<()> {
    std::fs::write(path, serde_json::to_string(net)?).map_err(|e| GamError::io(path, e))
}

/// A resolved model plus the backend that restricts it to the configured
/// blocks.
pub struct LoadedModel {
    pub network: Network,
    pub weights: String,
    pub blocks: Option<Vec<String>>,
}

impl LoadedModel {
    pub fn backend(&self) -> Result<Box<dyn CaptureBackend + Sync + Send + '_>> {
        Ok(match &self.blocks {
            Some(names) => Box::new(LayerFilter::new(&self.network, names.clone())?),
            None => Box::new(&self.network),
        })
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing::unit_range(self.network.input_shape)
    }

    /// Class index of a label name or index string.
    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.network.class_index(label)
    }

    pub fn class_name(&self, index: usize) -> String {
        self.network.labels.get(index).cloned().unwrap_or_else(|| index.to_string())
    }
}

pub fn load_model(cfg: &ModelConfig, default_weights: &str, seed: u64) -> Result<LoadedModel> {
    let backbone = cfg.backbone.clone().unwrap_or_else(|| "lenet".into());
    let weights = cfg.weights.clone().unwrap_or_else(|| default_weights.into());
    let mut network = match weights.as_str() {
        "random" => arch::build(&backbone, seed)?,
        "builtin" => builtin_weights(&backbone)?,
        "train" => return Err(GamError::Config("`train` weights are only available to the sanity command".into())),
        path => {
            let p = Path::new(path);
            require_file(p, "weights file")?;
            let net = load_weights_file(p)?;
            if cfg.backbone.as_deref().is_some_and(|b| b != net.arch) {
                return Err(GamError::Config(format!(
                    "weights file holds a `{}` model, not `{backbone}`",
                    net.arch
                )));
            }
            net
        }
    };
    if let Some(point) = &cfg.embedding_point {
        network.embedding_point = parse_embedding_point(point)?;
    }
    Ok(LoadedModel {
        network,
        weights,
        blocks: cfg.blocks.clone(),
    })
}
