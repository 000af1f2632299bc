//! Run configuration: a TOML file with `[corpus]`, `[encoder]`, `[train]` and
//! `[probe]` sections plus top-level `profile`, `seed` and `base_epochs`.
//! Precedence, lowest first: profile defaults, file, `--set`, dedicated flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fmtembed::synth::SuiteConfig;
use fmtembed::trainer::TrainConfig;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub profile: String,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub suite: SuiteConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    /// `section.key=value` assignments; values parse as TOML, else as strings.
    pub sets: Vec<String>,
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn assign(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("--set `{spec}`: expected key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("--set `{spec}`: empty key segment");
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut t = table;
    for p in path {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| anyhow!("--set `{spec}`: `{p}` is not a section"))?;
    }
    t.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => Table::new(),
    };
    for s in &ov.sets {
        assign(&mut user, s)?;
    }
    let file_profile = match user.remove("profile") {
        Some(Value::String(s)) => Some(s),
        Some(v) => bail!("config: `profile` must be a string, got {v}"),
        None => None,
    };
    let file_seed = match user.remove("seed") {
        Some(Value::Integer(s)) if s >= 0 => Some(s as u64),
        Some(v) => bail!("config: `seed` must be a non-negative integer, got {v}"),
        None => None,
    };
    let profile = ov.profile.clone().or(file_profile).unwrap_or_else(|| "desk".into());
    let seed = ov.seed.or(file_seed);

    // Type and unknown-key errors are reported against the user's keys alone.
    let user_text = toml::to_string(&user)?;
    toml::from_str::<SuiteConfig>(&user_text)
        .map_err(|e| anyhow!("config: {}", e.message()).context(field_hint(&e, &user_text)))?;

    let train =
        TrainConfig::profile(&profile).ok_or_else(|| anyhow!("config: unknown profile `{profile}` (expected desk or paper)"))?;
    let mut merged = Table::try_from(SuiteConfig { train, ..SuiteConfig::default() })?;
    merge(&mut merged, user);
    let mut suite: SuiteConfig = toml::from_str(&toml::to_string(&merged)?).context("config")?;
    if let Some(s) = seed {
        suite = suite.with_seed(s);
    }
    validate(&suite)?;
    Ok(RunConfig { profile, seed, suite })
}

/// The offending line of the serialized user table, e.g. `[train] peak_lr = "x"`.
fn field_hint(e: &toml::de::Error, text: &str) -> String {
    let Some(span) = e.span() else { return "invalid config".into() };
    let mut section = String::new();
    let mut offset = 0;
    for line in text.lines() {
        if line.starts_with('[') {
            section = line.to_string();
        }
        if span.start < offset + line.len() + 1 {
            return format!("invalid config value {section} {}", line.trim()).replace("  ", " ");
        }
        offset += line.len() + 1;
    }
    "invalid config".into()
}

pub fn validate(s: &SuiteConfig) -> Result<()> {
    s.corpus.validate().map_err(|e| anyhow!("config [corpus]: {e}"))?;
    s.encoder.validate().map_err(|e| anyhow!("config [encoder]: {e}"))?;
    s.train.validate().map_err(|e| anyhow!("config [train]: {e}"))?;
    s.probe.validate().map_err(|e| anyhow!("config [probe]: {e}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults_without_a_file() {
        let c = load(None, &Overrides::default()).unwrap();
        assert_eq!(c.profile, "desk");
        assert_eq!(c.suite, SuiteConfig::default());
    }

    #[test]
    fn file_then_set_then_flags() {
        let f =
            write("profile = \"paper\"\nseed = 4\nbase_epochs = 1\n[train]\npeak_lr = 0.01\nepochs = 5\n[corpus]\ntopics = 6\n");
        let ov = Overrides {
            seed: Some(9),
            sets: vec!["train.epochs=2".into(), "encoder.variant=ADAPTER".into()],
            ..Default::default()
        };
        let c = load(Some(f.path()), &ov).unwrap();
        let t = &c.suite.train;
        assert_eq!((t.peak_lr, t.epochs, t.batch_size), (0.01, 2, TrainConfig::paper().batch_size));
        assert_eq!((c.suite.corpus.topics, c.suite.base_epochs), (6, 1));
        assert_eq!((c.seed, c.suite.corpus.seed, c.suite.train.seed), (Some(9), 9, 9));
        assert_eq!(c.suite.encoder.variant, fmtembed::encoder::Variant::Adapter);
    }

    #[test]
    fn errors_name_the_field() {
        let e = format!("{:#}", load(Some(write("[train]\npeak_lr = \"fast\"\n").path()), &Overrides::default()).unwrap_err());
        assert!(e.contains("peak_lr"), "{e}");
        let e = format!("{:#}", load(Some(write("[train]\nlearning_rate = 1.0\n").path()), &Overrides::default()).unwrap_err());
        assert!(e.contains("learning_rate"), "{e}");
        let e = format!("{:#}", load(Some(write("[train]\nbatch_size = 0\n").path()), &Overrides::default()).unwrap_err());
        assert!(e.contains("[train]") && e.contains("batch_size"), "{e}");
        let e = format!("{:#}", load(None, &Overrides { profile: Some("huge".into()), ..Default::default() }).unwrap_err());
        assert!(e.contains("huge"), "{e}");
        assert!(load(None, &Overrides { sets: vec!["novalue".into()], ..Default::default() }).is_err());
    }
}
