//! Run configuration: a flat `key = value` file with dotted key paths,
//! validated up front with errors that name the offending key. The whole
//! run, including every random stream, derives from the canonicalized
//! config plus the master seed, summarized in the fingerprint.

use crate::qcode::QConfig;
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetCfg {
    Synthetic { rows: usize, features: usize, class_sep: f64 },
    Csv { path: PathBuf, schema: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedGroupCfg {
    pub features: Vec<String>,
    pub clients: u32,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionCfg {
    Named { active: Vec<String>, groups: Vec<NamedGroupCfg> },
    Random { parts: usize, group_width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Pad,
    Discard,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetCfg,
    pub partition: PartitionCfg,
    pub shard_random: bool,
    pub test_fraction: f64,
    pub active_hidden: Vec<usize>,
    pub group_hidden: Vec<usize>,
    pub top_hidden: Vec<usize>,
    pub batch: usize,
    pub lr: f64,
    pub rounds: u64,
    pub rotate_every: u64,
    pub eval_every: u64,
    pub q_embed: QConfig,
    pub q_update: QConfig,
    pub p_round: f64,
    pub f_clients: f64,
    pub mode: RunMode,
    pub seed: u64,
    pub out: PathBuf,
    pub secure: bool,
    pub baseline_compare: bool,
    canonical: String,
}

/// Keys the parser accepts; anything else is reported as unknown.
const KNOWN_PREFIXES: [&str; 7] =
    ["dataset.", "partition.", "model.", "train.", "qcode.", "dropout.", "run."];

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), "expected `key = value`")
        })?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, "duplicate key"));
        }
    }
    Ok(map)
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

impl<'a> Reader<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> Self {
        Reader { map, used: std::cell::RefCell::new(Vec::new()) }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().push(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| Error::config(key, "missing required key"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::config(key, format!("cannot parse `{}`", v)))
    }

    fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => self.parse(key, v),
            None => Ok(default),
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for item in self.list(key) {
            out.push(self.parse(key, &item)?);
        }
        Ok(out)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path, overrides: &BTreeMap<String, String>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("unreadable: {}", e)))?;
        let mut map = parse_lines(&text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        RunConfig::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<RunConfig> {
        for key in map.keys() {
            if !KNOWN_PREFIXES.iter().any(|p| key.starts_with(p)) {
                return Err(Error::config(key, "unknown key"));
            }
        }
        let r = Reader::new(&map);

        let dataset = match r.require("dataset.kind")? {
            "synthetic" => DatasetCfg::Synthetic {
                rows: r.get_or("dataset.rows", 4000usize)?,
                features: r.get_or("dataset.features", 20usize)?,
                class_sep: r.get_or("dataset.class_sep", 1.0f64)?,
            },
            "csv" => DatasetCfg::Csv {
                path: PathBuf::from(r.require("dataset.path")?),
                schema: PathBuf::from(r.require("dataset.schema")?),
            },
            other => {
                return Err(Error::config(
                    "dataset.kind",
                    format!("expected `synthetic` or `csv`, got `{}`", other),
                ))
            }
        };
        if let DatasetCfg::Synthetic { rows, features, .. } = &dataset {
            if *rows < 2 || *features < 2 {
                return Err(Error::config("dataset.rows", "synthetic data needs >= 2 rows and features"));
            }
        }

        let partition = match r.require("partition.mode")? {
            "named" => {
                let active = r.list("partition.active");
                if active.is_empty() {
                    return Err(Error::config("partition.active", "active party needs features"));
                }
                let mut groups = Vec::new();
                for g in 1.. {
                    let fkey = format!("partition.group.{}.features", g);
                    if !map.contains_key(&fkey) {
                        break;
                    }
                    let features = r.list(&fkey);
                    if features.is_empty() {
                        return Err(Error::config(fkey, "group needs at least one feature"));
                    }
                    let ckey = format!("partition.group.{}.clients", g);
                    let clients: u32 = r.get_or(&ckey, 1u32)?;
                    if clients == 0 {
                        return Err(Error::config(ckey, "group needs at least one client"));
                    }
                    let wkey = format!("partition.group.{}.width", g);
                    let width: usize = r.get_or(&wkey, 8usize)?;
                    if width == 0 {
                        return Err(Error::config(wkey, "segment width must be positive"));
                    }
                    groups.push(NamedGroupCfg { features, clients, width });
                }
                if groups.is_empty() {
                    return Err(Error::config(
                        "partition.group.1.features",
                        "named partitioning needs at least one group",
                    ));
                }
                PartitionCfg::Named { active, groups }
            }
            "random" => {
                let parts: usize = r.get_or("partition.random_parts", 5usize)?;
                if parts < 2 {
                    return Err(Error::config("partition.random_parts", "need at least 2 partitions"));
                }
                let group_width: usize = r.get_or("partition.group_width", 8usize)?;
                if group_width == 0 {
                    return Err(Error::config("partition.group_width", "segment width must be positive"));
                }
                PartitionCfg::Random { parts, group_width }
            }
            other => {
                return Err(Error::config(
                    "partition.mode",
                    format!("expected `named` or `random`, got `{}`", other),
                ))
            }
        };

        let shard_random = match r.get_or("partition.shard_rule", "round_robin".to_string())?.as_str() {
            "round_robin" => false,
            "random" => true,
            other => {
                return Err(Error::config(
                    "partition.shard_rule",
                    format!("expected `round_robin` or `random`, got `{}`", other),
                ))
            }
        };
        let test_fraction: f64 = r.get_or("partition.test_fraction", 0.2f64)?;
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("partition.test_fraction", "must be in [0, 1)"));
        }

        let batch: usize = r.get_or("train.batch", 256usize)?;
        if batch == 0 {
            return Err(Error::config("train.batch", "batch size must be positive"));
        }
        let lr: f64 = r.get_or("train.lr", 0.01f64)?;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("train.lr", "learning rate must be positive"));
        }
        let rounds: u64 = r.get_or("train.rounds", 50u64)?;
        let rotate_every: u64 = r.get_or("train.rotate_every", 5u64)?;
        if rotate_every == 0 {
            return Err(Error::config("train.rotate_every", "rotation interval must be positive"));
        }
        let eval_every: u64 = r.get_or("train.eval_every", 1u64)?;

        let t: f64 = r.get_or("qcode.t", 4.0f64)?;
        let r_bits: u32 = r.get_or("qcode.r_bits", 27u32)?;
        if r_bits == 0 || r_bits > 31 {
            return Err(Error::config("qcode.r_bits", "range bits must be in [1, 31]"));
        }
        let t_update: f64 = r.get_or("qcode.t_update", t)?;
        let q_embed = QConfig::new(t, 1 << r_bits)?;
        let q_update = QConfig::new(t_update, 1 << r_bits)?;

        let p_round: f64 = r.get_or("dropout.p_round", 0.0f64)?;
        if !(0.0..=1.0).contains(&p_round) {
            return Err(Error::config("dropout.p_round", "must be in [0, 1]"));
        }
        let f_clients: f64 = r.get_or("dropout.f_clients", 0.1f64)?;
        if !(0.0..=1.0).contains(&f_clients) || (p_round > 0.0 && f_clients == 0.0) {
            return Err(Error::config("dropout.f_clients", "must be in (0, 1] when dropout is on"));
        }

        let mode = match r.get_or("run.mode", "pad".to_string())?.as_str() {
            "pad" => RunMode::Pad,
            "discard" => RunMode::Discard,
            "both" => RunMode::Both,
            other => {
                return Err(Error::config(
                    "run.mode",
                    format!("expected `pad`, `discard`, or `both`, got `{}`", other),
                ))
            }
        };
        let seed: u64 = r.get_or("run.seed", 42u64)?;
        let out = PathBuf::from(r.get_or("run.out", "out".to_string())?);
        let secure: bool = r.get_or("run.secure", true)?;
        let baseline_compare: bool = r.get_or("run.baseline_compare", false)?;

        let active_hidden = r.usize_list("model.active_hidden")?;
        let group_hidden = r.usize_list("model.group_hidden")?;
        let top_hidden = r.usize_list("model.top_hidden")?;

        // Reject keys that belong to no recognized setting (e.g. typos in a
        // known prefix).
        let used = r.used.into_inner();
        for key in map.keys() {
            let known = used.iter().any(|u| u == key);
            if !known {
                return Err(Error::config(key, "unknown key"));
            }
        }

        let canonical: String =
            map.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect();

        Ok(RunConfig {
            dataset,
            partition,
            shard_random,
            test_fraction,
            active_hidden,
            group_hidden,
            top_hidden,
            batch,
            lr,
            rounds,
            rotate_every,
            eval_every,
            q_embed,
            q_update,
            p_round,
            f_clients,
            mode,
            seed,
            out,
            secure,
            baseline_compare,
            canonical,
        })
    }

    /// Stable hash of the canonicalized config and master seed; equal
    /// fingerprints mean bitwise-equal deterministic runs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"vfedsec-config");
        h.update(self.canonical.as_bytes());
        h.update(self.seed.to_le_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// A ready-to-run synthetic configuration for `--synthetic` invocations.
    pub fn synthetic_defaults() -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("dataset.kind".into(), "synthetic".into());
        m.insert("partition.mode".into(), "random".into());
        m.insert("partition.random_parts".into(), "5".into());
        m.insert("train.rounds".into(), "50".into());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_map() -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("dataset.kind".into(), "synthetic".into());
        m.insert("partition.mode".into(), "random".into());
        m
    }

    #[test]
    fn minimal_synthetic_config_parses_with_defaults() {
        let cfg = RunConfig::from_map(base_map()).unwrap();
        assert_eq!(cfg.batch, 256);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.rotate_every, 5);
        assert_eq!(cfg.q_embed.t, 4.0);
        assert_eq!(cfg.q_embed.r, 1 << 27);
        assert!(cfg.secure);
    }

    #[test]
    fn errors_name_the_offending_key_path() {
        let mut m = base_map();
        m.insert("train.batch".into(), "zero".into());
        let err = RunConfig::from_map(m).unwrap_err();
        assert!(err.to_string().contains("train.batch"), "got: {}", err);

        let mut m = base_map();
        m.insert("dropout.p_round".into(), "1.5".into());
        let err = RunConfig::from_map(m).unwrap_err();
        assert!(err.to_string().contains("dropout.p_round"));

        let mut m = base_map();
        m.insert("train.typo_key".into(), "1".into());
        let err = RunConfig::from_map(m).unwrap_err();
        assert!(err.to_string().contains("train.typo_key"));
    }

    #[test]
    fn named_groups_parse_in_order() {
        let mut m = BTreeMap::new();
        m.insert("dataset.kind".into(), "synthetic".into());
        m.insert("dataset.features".into(), "6".into());
        m.insert("partition.mode".into(), "named".into());
        m.insert("partition.active".into(), "f0, f1".into());
        m.insert("partition.group.1.features".into(), "f2,f3".into());
        m.insert("partition.group.1.clients".into(), "2".into());
        m.insert("partition.group.1.width".into(), "4".into());
        m.insert("partition.group.2.features".into(), "f4,f5".into());
        let cfg = RunConfig::from_map(m).unwrap();
        match cfg.partition {
            PartitionCfg::Named { active, groups } => {
                assert_eq!(active, vec!["f0", "f1"]);
                assert_eq!(groups.len(), 2);
                assert_eq!(groups[0].clients, 2);
                assert_eq!(groups[0].width, 4);
                assert_eq!(groups[1].clients, 1);
            }
            _ => panic!("expected named partitioning"),
        }
    }

    #[test]
    fn fingerprint_is_stable_and_seed_sensitive() {
        let a = RunConfig::from_map(base_map()).unwrap();
        let b = RunConfig::from_map(base_map()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut m = base_map();
        m.insert("run.seed".into(), "43".into());
        let c = RunConfig::from_map(m).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = parse_lines("a = 1\na = 2\n").unwrap_err();
        assert!(err.to_string().contains("a"));
    }
}
