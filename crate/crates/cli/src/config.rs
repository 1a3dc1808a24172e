//! Run configuration: a `key = value` file with `[section]` headers.
//!
//! Keys before the first header belong to the top-level section. `#` starts
//! a comment. Unknown sections or keys, duplicates and malformed values are
//! errors that carry the file name and line number. Relative paths resolve
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dwt_core::extract::{scaled_min_area, CutPolicy};
use dwt_core::synth::{SceneConfig, ShapeKind, Split};
use dwt_core::targets::DEFAULT_BINS;
use dwt_nn::models::{DnConfig, WtnConfig};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Allowed keys per section. `level.<class>` in `[cut]` is matched by prefix.
const SCHEMA: &[(&str, &[&str])] = &[
    ("", &["seed", "out"]),
    (
        "data",
        &[
            "count",
            "width",
            "height",
            "min_instances",
            "max_instances",
            "min_size",
            "max_size",
            "shapes",
            "small_area",
            "occlusion",
            "noise_sigma",
        ],
    ),
    ("bins", &["k", "edges"]),
    ("dn", &["widths", "head_width", "fuse_width", "balance_branches"]),
    ("wtn", &["widths", "fc_width"]),
    ("train_dn", &["epochs", "batch_size", "lr", "l2"]),
    ("train_wtn", &["epochs", "batch_size", "lr", "l2"]),
    ("finetune", &["epochs", "batch_size", "lr", "l2"]),
    ("cut", &["default_level", "radius", "min_area", "level.*"]),
    ("infer", &["split", "models"]),
    ("eval", &["ordering_seeds"]),
    ("watershed", &["scenes"]),
    ("grad_check", &["seeds"]),
];

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeMode {
    /// Quantiles of training-split distances.
    Quantile,
    /// The built-in 16-bin table.
    Fallback,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Finetuned,
    Pretrained,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub path: PathBuf,
    /// SHA-256 of the config file bytes, hex.
    pub hash: String,
    pub text: String,
    pub seed: u64,
    pub out: PathBuf,
    pub count: usize,
    pub scene: SceneConfig,
    pub k: usize,
    pub edges: EdgeMode,
    pub dn: DnConfig,
    pub balance_branches: bool,
    pub wtn: WtnConfig,
    pub train_dn: PhaseConfig,
    pub train_wtn: PhaseConfig,
    pub finetune: PhaseConfig,
    pub cut: CutPolicy,
    pub infer_split: Split,
    pub infer_models: ModelChoice,
    pub ordering_seeds: usize,
    pub watershed_scenes: usize,
    pub grad_check_seeds: u64,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Parsed {
    path: PathBuf,
    entries: BTreeMap<(String, String), Entry>,
}

impl Parsed {
    fn err(&self, line: usize, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}:{line}: {msg}", self.path.display()))
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.entries.get_mut(&(section.to_string(), key.to_string()))?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| self.err(line, format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: &[T]) -> Result<Vec<T>, CliError>
    where
        T: Clone,
    {
        match self.raw(section, key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| self.err(line, format!("`{key}`: cannot parse `{}`", s.trim())))
                })
                .collect(),
        }
    }

    fn fixed<const N: usize>(&mut self, section: &str, key: &str, default: [usize; N]) -> Result<[usize; N], CliError> {
        let line = self.entries.get(&(section.to_string(), key.to_string())).map(|e| e.line);
        let v = self.list(section, key, &default)?;
        v.try_into()
            .map_err(|_| self.err(line.unwrap_or(0), format!("`{key}` needs exactly {N} values")))
    }

    fn phase(&mut self, section: &str, default: PhaseConfig) -> Result<PhaseConfig, CliError> {
        Ok(PhaseConfig {
            epochs: self.get(section, "epochs", default.epochs)?,
            batch_size: self.get(section, "batch_size", default.batch_size)?,
            lr: self.get(section, "lr", default.lr)?,
            l2: self.get(section, "l2", default.l2)?,
        })
    }
}

fn allowed(section: &str, key: &str) -> Option<bool> {
    let keys = SCHEMA.iter().find(|(s, _)| *s == section)?.1;
    Some(keys.iter().any(|k| match k.strip_suffix('*') {
        Some(prefix) => key.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty()),
        None => *k == key,
    }))
}

fn parse_text(path: &Path, text: &str) -> Result<Parsed, CliError> {
    let mut parsed = Parsed {
        path: path.to_path_buf(),
        entries: BTreeMap::new(),
    };
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parsed.err(line, format!("malformed section header `{content}`")))?
                .trim();
            if allowed(name, "").is_none() || name.is_empty() {
                return Err(parsed.err(line, format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parsed.err(line, format!("expected `key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if allowed(&section, key) != Some(true) {
            let place = if section.is_empty() {
                "at top level".to_string()
            } else {
                format!("in [{section}]")
            };
            return Err(parsed.err(line, format!("unknown key `{key}` {place}")));
        }
        if value.is_empty() {
            return Err(parsed.err(line, format!("`{key}` has no value")));
        }
        let slot = (section.clone(), key.to_string());
        if let Some(prev) = parsed.entries.get(&slot) {
            return Err(parsed.err(line, format!("`{key}` already set on line {}", prev.line)));
        }
        parsed.entries.insert(
            slot,
            Entry {
                value: value.to_string(),
                line,
                used: false,
            },
        );
    }
    Ok(parsed)
}

fn shape_kind(p: &Parsed, line: usize, s: &str) -> Result<ShapeKind, CliError> {
    match s {
        "rect" | "rectangle" => Ok(ShapeKind::Rectangle),
        "ellipse" => Ok(ShapeKind::Ellipse),
        other => Err(p.err(line, format!("unknown shape `{other}` (rect, ellipse)"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| CliError::Config(format!("{}: not valid UTF-8", path.display())))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let mut p = parse_text(path, text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let hash = Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();

        let seed = p.get("", "seed", 0u64)?;
        let out = base.join(p.get("", "out", String::from("run"))?);

        let d = SceneConfig::default();
        let count = p.get("data", "count", 250usize)?;
        let shapes = match p.raw("data", "shapes") {
            None => d.shapes.clone(),
            Some((v, line)) => v
                .split(',')
                .map(|s| shape_kind(&p, line, s.trim()))
                .collect::<Result<_, _>>()?,
        };
        let scene = SceneConfig {
            width: p.get("data", "width", d.width)?,
            height: p.get("data", "height", d.height)?,
            min_instances: p.get("data", "min_instances", d.min_instances)?,
            max_instances: p.get("data", "max_instances", d.max_instances)?,
            min_size: p.get("data", "min_size", d.min_size)?,
            max_size: p.get("data", "max_size", d.max_size)?,
            shapes,
            small_area: p.get("data", "small_area", d.small_area)?,
            occlusion: p.get("data", "occlusion", d.occlusion)?,
            noise_sigma: p.get("data", "noise_sigma", d.noise_sigma)?,
        };
        let line_of = |p: &Parsed, s: &str, k: &str| p.entries.get(&(s.into(), k.into())).map_or(0, |e| e.line);
        scene
            .validate()
            .map_err(|e| p.err(line_of(&p, "data", "count"), format!("[data]: {e}")))?;
        if count < 2 {
            return Err(p.err(line_of(&p, "data", "count"), "`count` must be at least 2"));
        }

        let k = p.get("bins", "k", DEFAULT_BINS)?;
        let edges = match p.raw("bins", "edges") {
            None => EdgeMode::Quantile,
            Some((v, _)) if v == "quantile" => EdgeMode::Quantile,
            Some((v, _)) if v == "fallback" => EdgeMode::Fallback,
            Some((v, line)) => EdgeMode::Fixed(
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| p.err(line, format!("`edges`: cannot parse `{}`", s.trim()))))
                    .collect::<Result<_, _>>()?,
            ),
        };
        if k < 3 {
            return Err(p.err(line_of(&p, "bins", "k"), "`k` must be at least 3"));
        }

        let dd = DnConfig::default();
        let dn = DnConfig {
            widths: p.fixed("dn", "widths", dd.widths)?,
            head_width: p.get("dn", "head_width", dd.head_width)?,
            fuse_width: p.get("dn", "fuse_width", dd.fuse_width)?,
        };
        let balance_branches = p.get("dn", "balance_branches", true)?;
        let wd = WtnConfig::default();
        let wtn = WtnConfig {
            widths: p.fixed("wtn", "widths", wd.widths)?,
            fc_width: p.get("wtn", "fc_width", wd.fc_width)?,
            k,
        };

        let train_dn = p.phase(
            "train_dn",
            PhaseConfig {
                epochs: 10,
                batch_size: 4,
                lr: 1e-3,
                l2: 1e-5,
            },
        )?;
        let train_wtn = p.phase(
            "train_wtn",
            PhaseConfig {
                epochs: 10,
                batch_size: 6,
                lr: 1e-3,
                l2: 1e-6,
            },
        )?;
        let finetune = p.phase(
            "finetune",
            PhaseConfig {
                epochs: 2,
                batch_size: 3,
                lr: 1e-4,
                l2: 1e-6,
            },
        )?;

        let mut cut = CutPolicy::for_image(scene.width, scene.height);
        cut.default_level = p.get("cut", "default_level", cut.default_level)?;
        cut.radius_by_level = p.list("cut", "radius", &cut.radius_by_level)?;
        cut.min_area = match p.raw("cut", "min_area") {
            None => scaled_min_area(scene.width, scene.height),
            Some((v, _)) if v == "auto" => scaled_min_area(scene.width, scene.height),
            Some((v, line)) => v.parse().map_err(|_| p.err(line, format!("`min_area`: cannot parse `{v}`")))?,
        };
        let level_keys: Vec<(String, String, usize)> = p
            .entries
            .iter()
            .filter(|((s, k), _)| s == "cut" && k.starts_with("level."))
            .map(|((_, k), e)| (k.clone(), e.value.clone(), e.line))
            .collect();
        for (key, value, line) in level_keys {
            p.raw("cut", &key);
            let class: u32 = key["level.".len()..]
                .parse()
                .map_err(|_| p.err(line, format!("`{key}`: class id must be a number")))?;
            let level: u32 = value
                .parse()
                .map_err(|_| p.err(line, format!("`{key}`: cannot parse `{value}`")))?;
            cut.levels.insert(class, level);
        }
        for level in cut.levels.values().chain([&cut.default_level]) {
            if *level == 0 || *level as usize >= k || *level as usize >= cut.radius_by_level.len() {
                return Err(p.err(
                    line_of(&p, "cut", "radius"),
                    format!("cut level {level} needs 1 <= level < k and a radius entry"),
                ));
            }
        }

        let infer_split = match p.get("infer", "split", String::from("val"))?.as_str() {
            "val" => Split::Val,
            "train" => Split::Train,
            other => return Err(p.err(line_of(&p, "infer", "split"), format!("unknown split `{other}`"))),
        };
        let infer_models = match p.get("infer", "models", String::from("finetuned"))?.as_str() {
            "finetuned" => ModelChoice::Finetuned,
            "pretrained" => ModelChoice::Pretrained,
            other => {
                return Err(p.err(
                    line_of(&p, "infer", "models"),
                    format!("unknown model choice `{other}` (finetuned, pretrained)"),
                ))
            }
        };
        let ordering_seeds = p.get("eval", "ordering_seeds", 10usize)?;
        let watershed_scenes = p.get("watershed", "scenes", 20usize)?;
        let grad_check_seeds = p.get("grad_check", "seeds", 20u64)?;

        debug_assert!(p.entries.values().all(|e| e.used));
        Ok(Self {
            path: path.to_path_buf(),
            hash,
            text: text.to_string(),
            seed,
            out,
            count,
            scene,
            k,
            edges,
            dn,
            balance_branches,
            wtn,
            train_dn,
            train_wtn,
            finetune,
            cut,
            infer_split,
            infer_models,
            ordering_seeds,
            watershed_scenes,
            grad_check_seeds,
        })
    }

    /// Seed of a named random substream, derived from the run seed.
    pub fn substream(&self, name: &str) -> u64 {
        let digest = Sha256::digest(format!("{}/{name}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(Path::new("/cfg/run.cfg"), text)
    }

    #[test]
    fn defaults_and_relative_out() {
        let c = parse("seed = 3\nout = runs/a\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.out, Path::new("/cfg/runs/a"));
        assert_eq!(c.count, 250);
        assert_eq!(c.cut.level_for(2), 2);
    }

    #[test]
    fn unknown_key_names_line() {
        let e = parse("seed = 1\n[data]\ncount = 10\ncolour = red\n").unwrap_err();
        assert!(e.to_string().contains("run.cfg:4:"), "{e}");
        assert!(e.to_string().contains("colour"), "{e}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse("[data\n").unwrap_err().to_string().contains(":1:"));
        assert!(parse("[nope]\n").unwrap_err().to_string().contains("unknown section"));
        assert!(parse("seed 4\n").unwrap_err().to_string().contains(":1:"));
        assert!(parse("seed = x\n").unwrap_err().to_string().contains("cannot parse"));
        let dup = parse("seed = 1\n\nseed = 2\n").unwrap_err().to_string();
        assert!(dup.contains(":3:") && dup.contains("line 1"), "{dup}");
        assert!(parse("[dn]\nwidths = 1,2\n").unwrap_err().to_string().contains("exactly 3"));
    }

    #[test]
    fn cut_levels_by_class() {
        let c = parse("[cut]\nlevel.1 = 2\nlevel.7 = 1\nradius = 0,1,3\n").unwrap();
        assert_eq!(c.cut.level_for(1), 2);
        assert_eq!(c.cut.level_for(7), 1);
        assert_eq!(c.cut.radius_for(2).unwrap(), 3);
        assert!(parse("[cut]\nlevel.1 = 5\nradius = 0,1\n").is_err());
        assert!(parse("[cut]\nlevel.x = 1\n").is_err());
    }

    #[test]
    fn substreams_differ_and_repeat() {
        let c = parse("seed = 9\n").unwrap();
        assert_ne!(c.substream("data"), c.substream("init"));
        assert_eq!(c.substream("data"), parse("seed = 9\n").unwrap().substream("data"));
        assert_ne!(c.substream("data"), parse("seed = 10\n").unwrap().substream("data"));
    }
}
