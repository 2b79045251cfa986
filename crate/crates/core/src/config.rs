//! Flat `key=value` run configuration. Values come from built-in defaults,
//! then the chosen preset, then a config file, then `--set` overrides.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::AlignMode;
use crate::data::SyntheticGenConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::vit::ModelConfig;

/// Every accepted key, in the order they are printed.
pub const KEYS: &[&str] = &[
    "preset",
    "image_size",
    "patch_size",
    "embed_dim",
    "heads",
    "layers",
    "mlp_hidden",
    "half_width",
    "align_levels",
    "sam_dim",
    "mode",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "max_epochs",
    "lambda",
    "augment",
    "seed",
    "folds",
    "synth_image_size",
    "synth_hyperplastic",
    "synth_adenomatous",
    "synth_subjects",
    "synth_nbi_contrast",
    "synth_wl_attenuation",
    "synth_wl_noise",
    "synth_wl_clutter",
    "data",
    "out",
    "strict",
];

/// Which ablation rows a run trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModeSelection {
    One(AlignMode),
    All,
}

impl ModeSelection {
    pub fn modes(&self) -> Vec<AlignMode> {
        match self {
            ModeSelection::One(m) => vec![*m],
            ModeSelection::All => AlignMode::ALL.to_vec(),
        }
    }
}

impl std::fmt::Display for ModeSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeSelection::One(m) => m.fmt(f),
            ModeSelection::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub preset: String,
    pub train: TrainConfig,
    pub modes: ModeSelection,
    pub folds: usize,
    pub synth: SyntheticGenConfig,
    /// Manifest to train or evaluate on; `None` means generate synthetic
    /// data in memory.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Abort on the first bad manifest row instead of skipping it.
    pub strict: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            train: TrainConfig::default(),
            modes: ModeSelection::One(AlignMode::CgaSam),
            folds: 5,
            synth: SyntheticGenConfig::default(),
            data: None,
            out: PathBuf::from("out"),
            strict: true,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got '{line}'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value '{v}' for {key} (true|false)"))),
    }
}

impl CliConfig {
    /// Resolves defaults, preset, then `pairs` in order (later wins).
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            map.insert(k.as_str(), v.as_str());
        }
        let mut cfg = CliConfig::default();
        if let Some(p) = map.get("preset") {
            cfg.preset = p.to_string();
        }
        cfg.train.model = ModelConfig::preset(&cfg.preset)?;
        for (&k, &v) in &map {
            cfg.set(k, v)?;
        }
        cfg.synth.seed = cfg.train.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {}
            "image_size" => t.model.image_size = parse(key, v)?,
            "patch_size" => t.model.patch_size = parse(key, v)?,
            "embed_dim" => t.model.embed_dim = parse(key, v)?,
            "heads" => t.model.heads = parse(key, v)?,
            "layers" => t.model.layers = parse(key, v)?,
            "mlp_hidden" => t.model.mlp_hidden = parse(key, v)?,
            "half_width" => t.model.half_width = parse_bool(key, v)?,
            "align_levels" => {
                t.align.levels = if v.is_empty() || v == "last" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "sam_dim" => {
                t.align.sam_dim = if v.is_empty() || v == "d" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "mode" => {
                self.modes = if v == "all" {
                    ModeSelection::All
                } else {
                    ModeSelection::One(v.parse()?)
                };
                if let ModeSelection::One(mode) = self.modes {
                    t.mode = mode;
                }
            }
            "lr" => t.lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "augment" => t.augment = parse_bool(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "synth_image_size" => self.synth.image_size = parse(key, v)?,
            "synth_hyperplastic" => self.synth.hyperplastic = parse(key, v)?,
            "synth_adenomatous" => self.synth.adenomatous = parse(key, v)?,
            "synth_subjects" => self.synth.subjects = parse(key, v)?,
            "synth_nbi_contrast" => self.synth.nbi_contrast = parse(key, v)?,
            "synth_wl_attenuation" => self.synth.wl_attenuation = parse(key, v)?,
            "synth_wl_noise" => self.synth.wl_noise = parse(key, v)?,
            "synth_wl_clutter" => self.synth.wl_clutter = parse(key, v)?,
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "out" => self.out = PathBuf::from(v),
            "strict" => self.strict = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        Ok(())
    }

    /// Reads a config file and applies `overrides` and an optional seed
    /// on top of it.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                parse_kv(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        for o in overrides {
            pairs.extend(parse_kv(o, "--set")?);
        }
        if let Some(s) = seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        Self::resolve(&pairs)
    }

    /// Every key with its resolved value, one `key=value` per line, in a
    /// form [`CliConfig::resolve`] accepts back.
    pub fn to_kv(&self) -> String {
        let m = &self.train.model;
        let t = &self.train;
        let s = &self.synth;
        let levels: Vec<String> = t.align.levels.iter().map(|l| l.to_string()).collect();
        let values: Vec<String> = vec![
            self.preset.clone(),
            m.image_size.to_string(),
            m.patch_size.to_string(),
            m.embed_dim.to_string(),
            m.heads.to_string(),
            m.layers.to_string(),
            m.mlp_hidden.to_string(),
            m.half_width.to_string(),
            if levels.is_empty() {
                "last".into()
            } else {
                levels.join(",")
            },
            t.align.sam_dim.map_or("d".into(), |d| d.to_string()),
            self.modes.to_string(),
            t.lr.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.lambda.to_string(),
            t.augment.to_string(),
            t.seed.to_string(),
            self.folds.to_string(),
            s.image_size.to_string(),
            s.hyperplastic.to_string(),
            s.adenomatous.to_string(),
            s.subjects.to_string(),
            s.nbi_contrast.to_string(),
            s.wl_attenuation.to_string(),
            s.wl_noise.to_string(),
            s.wl_clutter.to_string(),
            self.data.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.out.display().to_string(),
            self.strict.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let e = CliConfig::resolve(&[("learning_rate".into(), "1".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn later_values_win_and_preset_applies_first() {
        let pairs = parse_kv("layers=3\npreset=vit-small # comment\n\nlr=0.5\n", "t").unwrap();
        let mut pairs = pairs;
        pairs.push(("lr".into(), "0.25".into()));
        let c = CliConfig::resolve(&pairs).unwrap();
        assert_eq!(c.train.model.embed_dim, 384);
        assert_eq!(c.train.model.layers, 3);
        assert_eq!(c.train.lr, 0.25);
    }

    #[test]
    fn resolved_dump_round_trips() {
        let c = CliConfig::load(
            None,
            &[
                "mode=all".into(),
                "layers=2".into(),
                "align_levels=0,1".into(),
                "data=x.csv".into(),
            ],
            Some(7),
        )
        .unwrap();
        let back = CliConfig::resolve(&parse_kv(&c.to_kv(), "dump").unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.synth.seed, 7);
        assert_eq!(c.modes.modes().len(), 3);
        assert_eq!(c.to_kv().lines().count(), KEYS.len());
    }

    #[test]
    fn bad_values() {
        assert!(CliConfig::resolve(&[("lr".into(), "fast".into())]).is_err());
        assert!(CliConfig::resolve(&[("mode".into(), "both".into())]).is_err());
        assert!(CliConfig::resolve(&[("augment".into(), "maybe".into())]).is_err());
        assert!(parse_kv("novalue\n", "t").is_err());
    }
}
