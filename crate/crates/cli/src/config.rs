//! Plain-text `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Keys are the long flag names with `-` spelled `_`. Command-line flags
//! override values from a file.

use std::fmt::Write as _;
use std::path::PathBuf;

use camscope::cam::{PixelSetSpec, ReluOrder, TargetKind};
use camscope::render::NormalizeMode;
use camscope::trainer::SyntheticSpec;
use camscope::{Error, Result};

/// One `key = value` line; offsets are byte positions in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub key_offset: usize,
    pub value: String,
    pub value_offset: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Splits config text into entries. Duplicate keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    let mut line_start = 0;
    for raw in text.split_inclusive('\n') {
        let line = raw.split('#').next().unwrap_or("");
        let line = line.trim_end_matches(['\n', '\r']);
        if !line.trim().is_empty() {
            let eq = line
                .find('=')
                .ok_or_else(|| parse_err(line_start, "expected `key = value`"))?;
            let key_part = &line[..eq];
            let key = key_part.trim();
            let key_offset = line_start + (key_part.len() - key_part.trim_start().len());
            if key.is_empty() {
                return Err(parse_err(line_start, "missing key before `=`"));
            }
            if let Some(bad) = key.find(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')) {
                return Err(parse_err(
                    key_offset + bad,
                    format!("invalid character in key `{key}`"),
                ));
            }
            let value_part = &line[eq + 1..];
            let value = value_part.trim();
            let value_offset =
                line_start + eq + 1 + (value_part.len() - value_part.trim_start().len());
            if value.is_empty() {
                return Err(parse_err(value_offset, format!("missing value for `{key}`")));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(parse_err(key_offset, format!("duplicate key `{key}`")));
            }
            entries.push(Entry {
                key: key.to_string(),
                key_offset,
                value: value.to_string(),
                value_offset,
            });
        }
        line_start += raw.len();
    }
    Ok(entries)
}

/// Every setting any command accepts. `None` means "not given".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub command: Option<String>,
    pub synthetic: Option<SyntheticSpec>,
    pub data_dir: Option<PathBuf>,
    pub classes: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub method: Option<String>,
    pub layer: Option<String>,
    pub pixel_set: Option<PixelSetSpec>,
    pub class: Option<usize>,
    pub relu_order: Option<ReluOrder>,
    pub xres_window: Option<usize>,
    pub target: Option<TargetKind>,
    pub normalize: Option<NormalizeMode>,
    pub alpha: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub skip_train: Option<bool>,
    pub samples: Option<usize>,
    pub test_samples: Option<usize>,
}

pub const KEYS: [&str; 25] = [
    "command",
    "synthetic",
    "data_dir",
    "classes",
    "channels",
    "epochs",
    "lr",
    "seed",
    "out",
    "metrics",
    "model",
    "image",
    "method",
    "layer",
    "pixel_set",
    "class",
    "relu_order",
    "xres_window",
    "target",
    "normalize",
    "alpha",
    "out_dir",
    "skip_train",
    "samples",
    "test_samples",
];

fn typed<T: std::str::FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value
        .parse()
        .map_err(|err| parse_err(e.value_offset, format!("`{}`: {err}", e.key)))
}

fn list(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| parse_err(e.value_offset, format!("`{}`: `{v}` is not an integer", e.key)))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in parse_entries(text)? {
            let path = || PathBuf::from(&e.value);
            match e.key.as_str() {
                "command" => cfg.command = Some(e.value.clone()),
                "synthetic" => cfg.synthetic = Some(typed(&e)?),
                "data_dir" => cfg.data_dir = Some(path()),
                "classes" => cfg.classes = Some(typed(&e)?),
                "channels" => cfg.channels = Some(list(&e)?),
                "epochs" => cfg.epochs = Some(typed(&e)?),
                "lr" => cfg.lr = Some(typed(&e)?),
                "seed" => cfg.seed = Some(typed(&e)?),
                "out" => cfg.out = Some(path()),
                "metrics" => cfg.metrics = Some(path()),
                "model" => cfg.model = Some(path()),
                "image" => cfg.image = Some(path()),
                "method" => cfg.method = Some(e.value.clone()),
                "layer" => cfg.layer = Some(e.value.clone()),
                "pixel_set" => cfg.pixel_set = Some(typed(&e)?),
                "class" => cfg.class = Some(typed(&e)?),
                "relu_order" => cfg.relu_order = Some(typed(&e)?),
                "xres_window" => cfg.xres_window = Some(typed(&e)?),
                "target" => cfg.target = Some(typed(&e)?),
                "normalize" => cfg.normalize = Some(typed(&e)?),
                "alpha" => cfg.alpha = Some(typed(&e)?),
                "out_dir" => cfg.out_dir = Some(path()),
                "skip_train" => cfg.skip_train = Some(typed(&e)?),
                "samples" => cfg.samples = Some(typed(&e)?),
                "test_samples" => cfg.test_samples = Some(typed(&e)?),
                other => {
                    return Err(parse_err(
                        e.key_offset,
                        format!("unknown key `{other}` (valid: {})", KEYS.join(", ")),
                    ))
                }
            }
        }
        Ok(cfg)
    }

    /// `(key, value)` for every setting that is present, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(T::to_string)
        }
        fn p(v: &Option<PathBuf>) -> Option<String> {
            v.as_ref().map(|p| p.display().to_string())
        }
        let channels = self.channels.as_ref().map(|c| {
            c.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        });
        let values = [
            s(&self.command),
            s(&self.synthetic),
            p(&self.data_dir),
            s(&self.classes),
            channels,
            s(&self.epochs),
            s(&self.lr),
            s(&self.seed),
            p(&self.out),
            p(&self.metrics),
            p(&self.model),
            p(&self.image),
            s(&self.method),
            s(&self.layer),
            s(&self.pixel_set),
            s(&self.class),
            s(&self.relu_order),
            s(&self.xres_window),
            s(&self.target),
            s(&self.normalize),
            s(&self.alpha),
            p(&self.out_dir),
            s(&self.skip_train),
            s(&self.samples),
            s(&self.test_samples),
        ];
        KEYS.into_iter()
            .zip(values)
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// Values from `flags` win over values in `self`.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => {
                RunConfig { $($f: flags.$f.or(self.$f)),* }
            };
        }
        pick!(
            command, synthetic, data_dir, classes, channels, epochs, lr, seed, out, metrics,
            model, image, method, layer, pixel_set, class, relu_order, xres_window, target,
            normalize, alpha, out_dir, skip_train, samples, test_samples
        )
    }

    /// Rejects settings that `command` does not use.
    pub fn check_keys(&self, command: &str, allowed: &[&str]) -> Result<()> {
        if let Some(c) = &self.command {
            if c != command {
                return Err(Error::config(
                    "command",
                    format!("config is for `{c}`, running `{command}`"),
                ));
            }
        }
        for (key, _) in self.entries() {
            if key != "command" && !allowed.contains(&key) {
                return Err(Error::InvalidArgument(format!(
                    "`{key}` is not a setting of `{command}` (valid: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}
