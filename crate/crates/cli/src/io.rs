use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use xdet_core::ingest::{parse_coco, parse_voc_set, parse_wider, RawDataset, VocOptions, WiderOptions};
use xdet_core::label_space::{DatasetId, MergeConfig};
use xdet_core::synth::ExperimentConfig;

/// Error carrying the process exit code: 2 for usage/config, 1 for runtime.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub trait UsageExt<T> {
    /// Marks an error as a usage/config error (exit code 2).
    fn usage(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for std::result::Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }
}

pub fn usage_error(msg: impl Into<String>) -> Failure {
    Failure { code: 2, error: anyhow!(msg.into()) }
}

pub fn read_input(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).usage()
}

/// Fails unless every output is writable without clobbering.
pub fn check_outputs<'a>(paths: impl IntoIterator<Item = &'a Path>, force: bool) -> CliResult<()> {
    for p in paths {
        if p.exists() && !force {
            return Err(usage_error(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    Ok(())
}

pub fn write_output(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Loads a JSON or TOML experiment config (by extension) and applies `seed`.
pub fn load_experiment(path: Option<&Path>, seed: u64) -> CliResult<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = read_input(p)?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display())).usage()?
            } else {
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display())).usage()?
            }
        }
    };
    let cfg = cfg.with_seed(seed);
    cfg.validate().with_context(|| "invalid experiment config").usage()?;
    Ok(cfg)
}

pub fn load_merge_config(path: Option<&Path>) -> CliResult<MergeConfig> {
    match path {
        None => Ok(MergeConfig::default()),
        Some(p) => {
            let text = read_input(p)?;
            MergeConfig::from_json(&text).with_context(|| format!("invalid merge config {}", p.display())).usage()
        }
    }
}

/// A `--dataset <id>:<format>:<path>` argument.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub format: String,
    pub path: PathBuf,
}

impl std::str::FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.splitn(3, ':');
        let (Some(id), Some(format), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("expected <id>:<format>:<path>, got {s:?}"));
        };
        if !["coco", "voc", "wider", "classes"].contains(&format) {
            return Err(format!("unknown format {format:?} (coco, voc, wider or classes)"));
        }
        let id = DatasetId::new(id).map_err(|e| e.to_string())?;
        Ok(Self { id, format: format.to_string(), path: PathBuf::from(path) })
    }
}

/// Reads one dataset; `classes` files list one class name per line and carry no images.
pub fn load_dataset(spec: &DatasetSpec) -> CliResult<RawDataset> {
    let ctx = || format!("dataset {} ({})", spec.id, spec.path.display());
    let raw = match spec.format.as_str() {
        "coco" => parse_coco(&read_input(&spec.path)?, spec.id.clone()).with_context(ctx).usage()?,
        "wider" => parse_wider(&read_input(&spec.path)?, spec.id.clone(), &WiderOptions::default()).with_context(ctx).usage()?,
        "voc" => {
            let mut files: Vec<PathBuf> = fs::read_dir(&spec.path)
                .with_context(ctx)
                .usage()?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "xml"))
                .collect();
            files.sort();
            let docs = files
                .iter()
                .enumerate()
                .map(|(i, p)| Ok((i as u64 + 1, read_input(p)?)))
                .collect::<CliResult<Vec<_>>>()?;
            parse_voc_set(&docs, spec.id.clone(), VocOptions::default()).with_context(ctx).usage()?
        }
        _ => {
            let classes = read_input(&spec.path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            RawDataset { dataset: spec.id.clone(), classes, images: Vec::new() }
        }
    };
    Ok(raw)
}
