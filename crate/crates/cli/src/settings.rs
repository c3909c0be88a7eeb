//! Config layering: preset, then config file, then `--set` overrides, then
//! path defaults under the output directory.

use std::path::{Path, PathBuf};

use demoselect_core::{Error, Result, RunConfig};
use toml::{Table, Value};

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        cur = match cur.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override key segment {seg:?} is not a table"))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

const PATH_KEYS: [&str; 5] = ["corpus", "train_queries", "test_queries", "checkpoint", "out_dir"];

/// Rejects keys that deserialization would silently drop, by comparing the
/// input against the re-serialized config.
fn check_known(input: &Table, canonical: &Table, prefix: &str) -> Result<()> {
    for (key, value) in input {
        let name = format!("{prefix}{key}");
        if prefix == "paths." && PATH_KEYS.contains(&key.as_str()) {
            continue;
        }
        match (canonical.get(key), value) {
            (Some(Value::Table(c)), Value::Table(t)) => check_known(t, c, &format!("{name}."))?,
            (Some(_), _) => {}
            (None, _) if name == "paths" => {
                if let Value::Table(t) = value {
                    check_known(t, &Table::new(), "paths.")?;
                }
            }
            (None, _) => return Err(Error::Config(format!("unknown config key {name:?}"))),
        }
    }
    Ok(())
}

fn to_table(cfg: &RunConfig) -> Table {
    cfg.to_toml_string().parse().expect("config round-trips through TOML")
}

pub fn build(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = to_table(&RunConfig::preset(preset)?);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let top: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, top);
    }
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        set_path(&mut table, &path, value)?;
    }
    let cfg: RunConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    check_known(&table, &to_table(&cfg), "")?;
    Ok(cfg)
}

/// Fills unset paths from the output directory. An explicit `out_dir`
/// argument (flag or environment) wins over the config file.
pub fn resolve_paths(cfg: &mut RunConfig, out_dir: Option<PathBuf>) -> PathBuf {
    let dir = out_dir
        .or_else(|| cfg.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let p = &mut cfg.paths;
    p.out_dir = Some(dir.clone());
    let fill = |slot: &mut Option<PathBuf>, name: &str| {
        slot.get_or_insert_with(|| dir.join(name));
    };
    fill(&mut p.corpus, "corpus.jsonl");
    fill(&mut p.train_queries, "train.jsonl");
    fill(&mut p.test_queries, "test.jsonl");
    fill(&mut p.checkpoint, "checkpoint.json");
    dir
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = build(
            "toy",
            None,
            &[
                "k=2".into(),
                "widths=[3,2]".into(),
                "ppo.beta=0.5".into(),
                "ppo.reward_source=raw_logprob".into(),
                "task.seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.widths, vec![3, 2]);
        assert_eq!(cfg.ppo.ppo.beta, 0.5);
        assert_eq!(cfg.task.seed, 9);
        assert_eq!(cfg.reward.hidden, 64);
    }

    #[test]
    fn file_layers_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "k = 2\nwidths = [2, 2]\n[reward]\nepochs = 5\n").unwrap();
        let cfg = build("toy", Some(&path), &[]).unwrap();
        assert_eq!((cfg.k, cfg.reward.train.epochs), (2, 5));
        // Untouched keys keep the preset value, not the full-scale default.
        assert_eq!(cfg.reward.hidden, 64);
        assert_eq!(cfg.ppo.ppo.total_steps, 2000);
    }

    #[test]
    fn unknown_keys_and_bad_syntax_are_rejected() {
        assert!(build("toy", None, &["nonsense".into()]).is_err());
        assert!(build("toy", None, &["k.x=1".into()]).is_err());
        assert!(build("huge", None, &[]).is_err());
        assert!(build("toy", None, &["ppo.betta=1".into()]).is_err());
        assert!(build("toy", None, &["paths.checkpoint=\"a.json\"".into()]).is_ok());
        assert!(build("toy", None, &["paths.chekpoint=\"a.json\"".into()]).is_err());
    }

    #[test]
    fn paths_default_under_out_dir() {
        let mut cfg = RunConfig::toy();
        let dir = resolve_paths(&mut cfg, Some(PathBuf::from("/tmp/x")));
        assert_eq!(dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.paths.checkpoint, Some(PathBuf::from("/tmp/x/checkpoint.json")));
    }
}
