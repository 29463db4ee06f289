//! Run configuration.
//!
//! The file is plain `key = value` lines. Blank lines and lines starting
//! with `#` are ignored, values run to the end of the line and are trimmed,
//! and every key may appear at most once. Unknown keys are an error.
//! Relative paths resolve against the directory holding the file.
//!
//! Secrets never live in the file: the API key comes only from
//! `LENCTL_API_KEY`. `LENCTL_ENDPOINT` and `LENCTL_MODEL` override their
//! keys.
//!
//! | key | default |
//! |-----|---------|
//! | `backend` | `compliant` (`http_sse`, `noisy`, `scripted`) |
//! | `endpoint`, `model`, `prefill`, `timeout_secs` | http backend |
//! | `tool_calls` | `false` (compliant mock) |
//! | `compliance`, `bias`, `skew` | `0.8`, `0.4`, `0` (noisy mock) |
//! | `script.mode`, `script.offset`, `script.replay_file` | scripted mock |
//! | `tokenizer`, `tokenizer.vocab`, `tokenizer.special_tokens` | `whitespace` |
//! | `epsilon.<unit>` | 10, or 0 for sentences |
//! | `grid.<unit>` | `100..400:50`, `5..30:5`, `500..2000:250` |
//! | `mode`, `insertion_mode` | `feedback`, `hybrid` |
//! | `min_interval`, `hard_cap_factor`, `max_resumes` | `0`, `2.0`, `128` |
//! | `temperature`, `top_p`, `max_new_tokens` | `0.8`, `0.95`, `4096` |
//! | `dataset`, `demo_pool`, `abbreviations`, `templates` | unset |
//! | `out_dir` | `out` |
//! | `seed`, `parallelism` | `0`, `4` |
//!
//! Grids are either a comma list (`5,10,20`) or an inclusive range with a
//! step (`100..400:50`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use lenctl_core::backend::{BackendKind, HttpConfig, MockConfig, NoisyConfig, PrefillMode, ScriptConfig};
use lenctl_core::controller::ControllerConfig;
use lenctl_core::feedback::TemplateSet;
use lenctl_core::metrics::default_grid;
use lenctl_core::segmenter::AbbreviationSet;
use lenctl_core::units::{Tokenizer, TokenizerMode, TokenizerSpec};
use lenctl_core::{Counter, InsertionMode, LengthConstraint, LengthUnit, PromptMode};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "LENCTL_ENDPOINT";
pub const ENV_API_KEY: &str = "LENCTL_API_KEY";
pub const ENV_MODEL: &str = "LENCTL_MODEL";

const KNOWN_KEYS: &[&str] = &[
    "backend",
    "endpoint",
    "model",
    "prefill",
    "timeout_secs",
    "tool_calls",
    "compliance",
    "bias",
    "skew",
    "script.mode",
    "script.offset",
    "script.replay_file",
    "tokenizer",
    "tokenizer.vocab",
    "tokenizer.special_tokens",
    "epsilon.token",
    "epsilon.word",
    "epsilon.sentence",
    "epsilon.character",
    "grid.token",
    "grid.word",
    "grid.sentence",
    "grid.character",
    "mode",
    "insertion_mode",
    "min_interval",
    "hard_cap_factor",
    "max_resumes",
    "temperature",
    "top_p",
    "max_new_tokens",
    "dataset",
    "demo_pool",
    "abbreviations",
    "templates",
    "out_dir",
    "seed",
    "parallelism",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("`{0}` is required for this backend")]
    Missing(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// One value per length unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerUnit<T> {
    values: BTreeMap<LengthUnit, T>,
}

impl<T> PerUnit<T> {
    fn from_fn(f: impl Fn(LengthUnit) -> T) -> PerUnit<T> {
        PerUnit {
            values: LengthUnit::ALL.into_iter().map(|u| (u, f(u))).collect(),
        }
    }

    pub fn get(&self, unit: LengthUnit) -> &T {
        &self.values[&unit]
    }

    fn set(&mut self, unit: LengthUnit, value: T) {
        self.values.insert(unit, value);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub backend: BackendKind,
    pub tokenizer: TokenizerSpec,
    pub epsilon: PerUnit<usize>,
    pub grids: PerUnit<Vec<usize>>,
    pub mode: PromptMode,
    pub controller: ControllerConfig,
    pub dataset: Option<PathBuf>,
    pub demo_pool: Option<PathBuf>,
    pub abbreviations: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            backend: BackendKind::Compliant(MockConfig::default()),
            tokenizer: TokenizerSpec::default(),
            epsilon: PerUnit::from_fn(LengthConstraint::default_tolerance),
            grids: PerUnit::from_fn(default_grid),
            mode: PromptMode::Feedback,
            controller: ControllerConfig::default(),
            dataset: None,
            demo_pool: None,
            abbreviations: None,
            templates: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            parallelism: 4,
        }
    }
}

/// Parses `100..400:50` or `5,10,15` into a strictly positive grid without
/// repeats.
pub fn parse_grid(text: &str) -> Result<Vec<usize>, String> {
    let text = text.trim();
    let grid: Vec<usize> = if let Some((range, step)) = text.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| format!("expected `start..end:step`, got `{text}`"))?;
        let lo = parse_num::<usize>(lo)?;
        let hi = parse_num::<usize>(hi)?;
        let step = parse_num::<usize>(step)?;
        if step == 0 {
            return Err("step must be positive".into());
        }
        if lo > hi {
            return Err(format!("empty range {lo}..{hi}"));
        }
        (lo..=hi).step_by(step).collect()
    } else {
        text.split(',').map(parse_num::<usize>).collect::<Result<_, _>>()?
    };
    if grid.contains(&0) {
        return Err("grid targets must be positive".into());
    }
    let mut seen = grid.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != grid.len() {
        return Err("grid repeats a target".into());
    }
    Ok(grid)
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String> {
    let s = s.trim();
    s.parse().map_err(|_| format!("`{s}` is not a valid number"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn parse_prefill(s: &str) -> Result<PrefillMode, String> {
    match s.trim() {
        "continue_final_message" => Ok(PrefillMode::ContinueFinalMessage),
        "assistant_message" => Ok(PrefillMode::AssistantMessage),
        "raw_completion" => Ok(PrefillMode::RawCompletion),
        other => Err(format!("unknown prefill mode `{other}`")),
    }
}

/// Splits a config body into key/value pairs, rejecting malformed lines,
/// unknown keys and repeats.
pub fn parse_pairs(body: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut pairs = BTreeMap::new();
    for (idx, raw) in body.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { key: key.into(), line });
        }
        if pairs.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(ConfigError::DuplicateKey { key: key.into(), line });
        }
    }
    Ok(pairs)
}

struct Pairs {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Pairs {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T>(&self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| {
                f(v).map_err(|message| ConfigError::Invalid {
                    key: key.into(),
                    message,
                })
            })
            .transpose()
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.parse(key, parse_num::<T>)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }
}

impl AppConfig {
    /// Reads the file at `path` (or starts from defaults when `None`) and
    /// applies environment overrides.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<AppConfig, ConfigError> {
        let (body, base) = match path {
            Some(p) => {
                let body = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (body, base)
            }
            None => (String::new(), PathBuf::new()),
        };
        AppConfig::parse(&body, &base, env)
    }

    pub fn parse(body: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<AppConfig, ConfigError> {
        let mut map = parse_pairs(body)?;
        for (var, key) in [(ENV_ENDPOINT, "endpoint"), (ENV_MODEL, "model")] {
            if let Some(v) = env(var).filter(|v| !v.trim().is_empty()) {
                map.insert(key.into(), v.trim().to_string());
            }
        }
        let pairs = Pairs {
            map,
            base: base.to_path_buf(),
        };
        let mut cfg = AppConfig::default();

        cfg.seed = pairs.num("seed")?.unwrap_or(cfg.seed);
        cfg.backend = backend_from(&pairs, cfg.seed, env(ENV_API_KEY))?;

        if let Some(mode) = pairs.parse("tokenizer", |s| TokenizerMode::from_str(s).map_err(|e| e.to_string()))? {
            cfg.tokenizer.mode = mode;
        }
        cfg.tokenizer.vocab_path = pairs.path("tokenizer.vocab");
        if let Some(specials) = pairs.get("tokenizer.special_tokens") {
            cfg.tokenizer.special_tokens = specials.split(',').map(|s| s.trim().to_string()).collect();
        }
        if cfg.tokenizer.mode == TokenizerMode::BpeVocabFile && cfg.tokenizer.vocab_path.is_none() {
            return Err(ConfigError::Missing("tokenizer.vocab".into()));
        }

        for unit in LengthUnit::ALL {
            if let Some(eps) = pairs.num(&format!("epsilon.{unit}"))? {
                cfg.epsilon.set(unit, eps);
            }
            if let Some(grid) = pairs.parse(&format!("grid.{unit}"), parse_grid)? {
                cfg.grids.set(unit, grid);
            }
        }

        cfg.mode = pairs.parse("mode", PromptMode::from_str)?.unwrap_or(cfg.mode);
        let ctl = &mut cfg.controller;
        ctl.insertion_mode = pairs
            .parse("insertion_mode", InsertionMode::from_str)?
            .unwrap_or(ctl.insertion_mode);
        ctl.min_interval = pairs.num("min_interval")?.unwrap_or(ctl.min_interval);
        ctl.hard_cap_factor = pairs.num("hard_cap_factor")?.unwrap_or(ctl.hard_cap_factor);
        ctl.max_resumes = pairs.num("max_resumes")?.unwrap_or(ctl.max_resumes);
        ctl.sampling.temperature = pairs.num("temperature")?.unwrap_or(ctl.sampling.temperature);
        ctl.sampling.top_p = pairs.num("top_p")?.unwrap_or(ctl.sampling.top_p);
        ctl.sampling.max_new_tokens = pairs.num("max_new_tokens")?.unwrap_or(ctl.sampling.max_new_tokens);
        ctl.validate().map_err(|e| ConfigError::Invalid {
            key: "controller".into(),
            message: e.to_string(),
        })?;
        let s = ctl.sampling;
        if !(s.temperature >= 0.0 && s.top_p > 0.0 && s.top_p <= 1.0 && s.max_new_tokens > 0) {
            return Err(ConfigError::Invalid {
                key: "sampling".into(),
                message: "need temperature >= 0, top_p in (0, 1] and max_new_tokens > 0".into(),
            });
        }

        cfg.dataset = pairs.path("dataset");
        cfg.demo_pool = pairs.path("demo_pool");
        cfg.abbreviations = pairs.path("abbreviations");
        cfg.templates = pairs.path("templates");
        if let Some(out) = pairs.path("out_dir") {
            cfg.out_dir = out;
        }
        cfg.parallelism = pairs.num("parallelism")?.unwrap_or(cfg.parallelism);
        if cfg.parallelism == 0 {
            return Err(ConfigError::Invalid {
                key: "parallelism".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(cfg)
    }

    /// Counter built from the tokenizer and abbreviation settings.
    pub fn counter(&self) -> Result<Counter, ConfigError> {
        let tokenizer = Tokenizer::load(&self.tokenizer).map_err(|e| ConfigError::Invalid {
            key: "tokenizer".into(),
            message: e.to_string(),
        })?;
        let abbreviations = match &self.abbreviations {
            Some(path) => Arc::new(AbbreviationSet::load(path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?),
            None => AbbreviationSet::shared_default(),
        };
        Ok(Counter::new(Arc::new(tokenizer), abbreviations))
    }

    pub fn template_set(&self) -> Result<Arc<TemplateSet>, ConfigError> {
        match &self.templates {
            Some(dir) => TemplateSet::load_dir(dir).map(Arc::new).map_err(|e| ConfigError::Invalid {
                key: "templates".into(),
                message: e.to_string(),
            }),
            None => Ok(TemplateSet::shared_default()),
        }
    }

    /// Replaces the global seed, including the one handed to mock backends.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        match &mut self.backend {
            BackendKind::Compliant(m) => m.seed = seed,
            BackendKind::Noisy(n) => n.seed = seed,
            BackendKind::HttpSse(_) | BackendKind::Scripted(_) => {}
        }
    }

    pub fn constraint(&self, unit: LengthUnit, target: usize) -> LengthConstraint {
        LengthConstraint::new(unit, target).with_tolerance(*self.epsilon.get(unit))
    }
}

fn backend_from(pairs: &Pairs, seed: u64, api_key: Option<String>) -> Result<BackendKind, ConfigError> {
    let kind = pairs.get("backend").unwrap_or("compliant");
    Ok(match kind {
        "http_sse" | "http" => {
            let endpoint = pairs.get("endpoint").ok_or_else(|| ConfigError::Missing("endpoint".into()))?;
            let mut http = HttpConfig::new(endpoint);
            http.model = pairs.get("model").unwrap_or_default().to_string();
            http.api_key = api_key.filter(|k| !k.is_empty());
            if let Some(p) = pairs.parse("prefill", parse_prefill)? {
                http.prefill = p;
            }
            http.timeout_secs = pairs.num("timeout_secs")?.unwrap_or(http.timeout_secs);
            BackendKind::HttpSse(http)
        }
        "compliant" => BackendKind::Compliant(MockConfig {
            seed,
            tool_calls: pairs.parse("tool_calls", parse_bool)?.unwrap_or(false),
        }),
        "noisy" => {
            let d = NoisyConfig::default();
            let noisy = NoisyConfig {
                seed,
                compliance: pairs.num("compliance")?.unwrap_or(d.compliance),
                bias: pairs.num("bias")?.unwrap_or(d.bias),
                skew: pairs.num("skew")?.unwrap_or(d.skew),
            };
            if !(0.0..=1.0).contains(&noisy.compliance) || noisy.bias.is_nan() || noisy.bias < 0.0 || !noisy.skew.is_finite() {
                return Err(ConfigError::Invalid {
                    key: "noisy".into(),
                    message: "need compliance in [0, 1], bias >= 0 and a finite skew".into(),
                });
            }
            BackendKind::Noisy(noisy)
        }
        "scripted" => match pairs.get("script.mode").unwrap_or("replay") {
            "estimator" => BackendKind::Scripted(ScriptConfig::Estimator {
                offset: pairs.num("script.offset")?.unwrap_or(0),
            }),
            "replay" => {
                let path = pairs
                    .path("script.replay_file")
                    .ok_or_else(|| ConfigError::Missing("script.replay_file".into()))?;
                let body = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                BackendKind::Scripted(ScriptConfig::Replay {
                    chunks: body.split_inclusive('\n').map(str::to_string).collect(),
                })
            }
            other => {
                return Err(ConfigError::Invalid {
                    key: "script.mode".into(),
                    message: format!("unknown script mode `{other}`"),
                })
            }
        },
        other => {
            return Err(ConfigError::Invalid {
                key: "backend".into(),
                message: format!("unknown backend `{other}`"),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = AppConfig::parse("", Path::new(""), no_env).unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.grids.get(LengthUnit::Sentence), &vec![5, 10, 15, 20, 25, 30]);
        assert_eq!(*cfg.epsilon.get(LengthUnit::Sentence), 0);
        assert_eq!(*cfg.epsilon.get(LengthUnit::Token), 10);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let body = "# run\n\nbackend = noisy\ncompliance=0.5\nseed = 9\ngrid.word = 10, 20\nmode = icl+feedback\n";
        let cfg = AppConfig::parse(body, Path::new("/etc"), no_env).unwrap();
        assert_eq!(
            cfg.backend,
            BackendKind::Noisy(NoisyConfig {
                seed: 9,
                compliance: 0.5,
                ..NoisyConfig::default()
            })
        );
        assert_eq!(cfg.grids.get(LengthUnit::Word), &vec![10, 20]);
        assert_eq!(cfg.mode, PromptMode::IclFeedback);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert_eq!(
            parse_pairs("seed = 1\nsede = 2\n").unwrap_err(),
            ConfigError::UnknownKey { key: "sede".into(), line: 2 }
        );
        assert_eq!(
            parse_pairs("seed = 1\nseed = 2\n").unwrap_err(),
            ConfigError::DuplicateKey { key: "seed".into(), line: 2 }
        );
        assert_eq!(parse_pairs("just words\n").unwrap_err(), ConfigError::Syntax { line: 1 });
        assert!(parse_pairs("api_key = sk-1\n").is_err());
    }

    #[test]
    fn env_supplies_endpoint_and_secret() {
        let env = |k: &str| match k {
            ENV_ENDPOINT => Some("http://h:1/v1".to_string()),
            ENV_API_KEY => Some("sk-x".to_string()),
            _ => None,
        };
        let cfg = AppConfig::parse("backend = http_sse\nendpoint = http://file/v1\n", Path::new(""), env).unwrap();
        let BackendKind::HttpSse(http) = cfg.backend else { panic!() };
        assert_eq!(http.endpoint, "http://h:1/v1");
        assert_eq!(http.api_key.as_deref(), Some("sk-x"));
        assert_eq!(
            AppConfig::parse("backend = http_sse\n", Path::new(""), no_env).unwrap_err(),
            ConfigError::Missing("endpoint".into())
        );
    }

    #[test]
    fn invalid_values_name_their_key() {
        for (body, key) in [
            ("hard_cap_factor = 0.5", "controller"),
            ("top_p = 0", "sampling"),
            ("parallelism = 0", "parallelism"),
            ("seed = -1", "seed"),
            ("grid.token = 0,5", "grid.token"),
            ("insertion_mode = sometimes", "insertion_mode"),
        ] {
            match AppConfig::parse(body, Path::new(""), no_env).unwrap_err() {
                ConfigError::Invalid { key: k, .. } => assert_eq!(k, key, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let cfg = AppConfig::parse("out_dir = res\ndataset = /abs/d.jsonl\n", Path::new("/runs"), no_env).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/runs/res"));
        assert_eq!(cfg.dataset, Some(PathBuf::from("/abs/d.jsonl")));
    }

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("100..400:50").unwrap(), vec![100, 150, 200, 250, 300, 350, 400]);
        assert_eq!(parse_grid("5..7:5").unwrap(), vec![5]);
        assert_eq!(parse_grid(" 3 , 1 ").unwrap(), vec![3, 1]);
        for bad in ["", "1..2", "5..1:1", "1..5:0", "a,b", "2,2"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn range_grid_matches_enumeration(lo in 1usize..500, span in 0usize..500, step in 1usize..60) {
            let hi = lo + span;
            let grid = parse_grid(&format!("{lo}..{hi}:{step}")).unwrap();
            let mut expected = Vec::new();
            let mut v = lo;
            while v <= hi {
                expected.push(v);
                v += step;
            }
            prop_assert_eq!(grid, expected);
        }

        #[test]
        fn pair_parser_never_panics(body in "[ -~\n]{0,200}") {
            let _ = parse_pairs(&body);
        }
    }
}
