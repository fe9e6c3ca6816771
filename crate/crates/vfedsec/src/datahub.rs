//! Dataset ingestion and vertical partitioning: CSV loading with one-hot
//! expansion and train-split standardization, per-group feature views,
//! within-group sample sharding, and a synthetic two-class generator with a
//! known Bayes-optimal AUC.

use crate::qcode::RealMatrix;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
}

/// Column typing for a CSV source: one `name: kind` line per column.
#[derive(Debug, Clone)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Schema> {
        let mut columns = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line.split_once(':').ok_or_else(|| {
                Error::Data(format!("schema line {}: expected `name: kind`", lineno + 1))
            })?;
            let kind = match kind.trim() {
                "numeric" => ColumnKind::Numeric,
                "categorical" => ColumnKind::Categorical,
                "label" => ColumnKind::Label,
                other => {
                    return Err(Error::Data(format!(
                        "schema line {}: unknown kind `{}`",
                        lineno + 1,
                        other
                    )))
                }
            };
            columns.push((name.trim().to_string(), kind));
        }
        let labels = columns.iter().filter(|(_, k)| *k == ColumnKind::Label).count();
        if labels != 1 {
            return Err(Error::Data(format!("schema must name exactly one label column, found {}", labels)));
        }
        Ok(Schema { columns })
    }

    pub fn from_file(path: &Path) -> Result<Schema> {
        Schema::parse(&std::fs::read_to_string(path)?)
    }

    pub fn label_name(&self) -> &str {
        self.columns
            .iter()
            .find(|(_, k)| *k == ColumnKind::Label)
            .map(|(n, _)| n.as_str())
            .expect("validated at parse time")
    }
}

/// A preprocessed dataset: expanded feature matrix, integer labels, stable
/// per-row sample ids, and the seeded train/test row split.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: RealMatrix,
    /// Expanded column names (`job=admin` style for one-hot levels).
    pub col_names: Vec<String>,
    /// Raw source feature of each expanded column.
    pub col_source: Vec<String>,
    pub raw_feature_names: Vec<String>,
    pub labels: Vec<u32>,
    pub n_classes: usize,
    /// Hidden provenance ids; every vertical view of a row shares its id.
    pub sample_ids: Vec<u64>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.features.rows
    }

    pub fn n_cols(&self) -> usize {
        self.features.cols
    }

    /// Expanded column indices whose source feature is in `names`.
    pub fn cols_for_features(&self, names: &[String]) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&c| names.iter().any(|n| *n == self.col_source[c]))
            .collect()
    }
}

fn split_rows(n_rows: usize, test_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(rng);
    let n_test = (n_rows as f64 * test_fraction).round() as usize;
    let test: Vec<usize> = order[..n_test].to_vec();
    let train: Vec<usize> = order[n_test..].to_vec();
    (train, test)
}

/// Loads a comma-separated file with a header row, one-hot expands
/// categoricals, and standardizes numerics. Category vocabularies and
/// standardization statistics come from the train split only.
pub fn load_csv(
    path: &Path,
    schema: &Schema,
    test_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Table> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Data("test fraction must be in [0, 1)".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col_idx = Vec::with_capacity(schema.columns.len());
    for (name, _) in &schema.columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column `{}` in {}", name, path.display())))?;
        col_idx.push(idx);
    }

    // Raw cells, column-major per schema order.
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); schema.columns.len()];
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        for (c, &idx) in col_idx.iter().enumerate() {
            let cell = record.get(idx).ok_or_else(|| {
                Error::Data(format!("row {}: missing cell for `{}`", row_no + 2, schema.columns[c].0))
            })?;
            raw[c].push(cell.trim().to_string());
        }
    }
    let n_rows = raw[0].len();
    if n_rows < 2 {
        return Err(Error::Data("dataset needs at least two rows".into()));
    }

    let (train_rows, test_rows) = split_rows(n_rows, test_fraction, rng);

    // Labels: integers directly, otherwise sorted category codes.
    let label_c = schema
        .columns
        .iter()
        .position(|(_, k)| *k == ColumnKind::Label)
        .expect("schema validated");
    let label_cells = &raw[label_c];
    let all_int = label_cells.iter().all(|v| v.parse::<u32>().is_ok());
    let labels: Vec<u32> = if all_int {
        label_cells.iter().map(|v| v.parse::<u32>().unwrap()).collect()
    } else {
        let mut cats: Vec<&String> = label_cells.iter().collect();
        cats.sort();
        cats.dedup();
        let code: BTreeMap<&String, u32> =
            cats.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        label_cells.iter().map(|v| code[v]).collect()
    };
    let n_classes = (*labels.iter().max().unwrap() + 1) as usize;

    let mut col_names = Vec::new();
    let mut col_source = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut raw_feature_names = Vec::new();

    for (c, (name, kind)) in schema.columns.iter().enumerate() {
        match kind {
            ColumnKind::Label => {}
            ColumnKind::Numeric => {
                raw_feature_names.push(name.clone());
                let mut vals = Vec::with_capacity(n_rows);
                for (r, cell) in raw[c].iter().enumerate() {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Data(format!(
                            "unparseable numeric cell at row {}, column `{}`: `{}`",
                            r + 2,
                            name,
                            cell
                        ))
                    })?;
                    vals.push(v);
                }
                // Standardize with train-split statistics only.
                let n = train_rows.len() as f64;
                let mean = train_rows.iter().map(|&r| vals[r]).sum::<f64>() / n;
                let var = train_rows.iter().map(|&r| (vals[r] - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                columns.push(vals.iter().map(|v| (v - mean) / sd).collect());
                col_names.push(name.clone());
                col_source.push(name.clone());
            }
            ColumnKind::Categorical => {
                raw_feature_names.push(name.clone());
                // Levels seen in the train split; unseen test levels encode
                // to an all-zero group.
                let mut levels: Vec<&String> = train_rows.iter().map(|&r| &raw[c][r]).collect();
                levels.sort();
                levels.dedup();
                for level in &levels {
                    let vals: Vec<f64> =
                        raw[c].iter().map(|v| if v == *level { 1.0 } else { 0.0 }).collect();
                    columns.push(vals);
                    col_names.push(format!("{}={}", name, level));
                    col_source.push(name.clone());
                }
            }
        }
    }

    let n_cols = columns.len();
    let mut features = RealMatrix::zeros(n_rows, n_cols);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            features.set(i, j, v);
        }
    }

    Ok(Table {
        features,
        col_names,
        col_source,
        raw_feature_names,
        labels,
        n_classes,
        sample_ids: (0..n_rows as u64).collect(),
        train_rows,
        test_rows,
    })
}

/// Two-class Gaussian mixture: class y puts every feature at
/// `N(+-class_sep/2, 1)`. The Bayes-optimal score is the plain feature sum,
/// whose AUC is `Phi(class_sep * sqrt(d / 2))` for `d` features.
pub fn synthesize(
    n_rows: usize,
    n_features: usize,
    class_sep: f64,
    test_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Table> {
    if n_rows < 2 || n_features < 2 {
        return Err(Error::Data("synthetic data needs at least 2 rows and 2 features".into()));
    }
    let mut features = RealMatrix::zeros(n_rows, n_features);
    let mut labels = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let y = rng.gen_range(0..2u32);
        let shift = if y == 1 { class_sep / 2.0 } else { -class_sep / 2.0 };
        for j in 0..n_features {
            let z: f64 = StandardNormal.sample(rng);
            features.set(i, j, z + shift);
        }
        labels.push(y);
    }
    let (train_rows, test_rows) = split_rows(n_rows, test_fraction, rng);
    let names: Vec<String> = (0..n_features).map(|j| format!("f{}", j)).collect();
    Ok(Table {
        features,
        col_names: names.clone(),
        col_source: names.clone(),
        raw_feature_names: names,
        labels,
        n_classes: 2,
        sample_ids: (0..n_rows as u64).collect(),
        train_rows,
        test_rows,
    })
}

/// How a group's samples are sharded among its clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardRule {
    RoundRobin,
    Random,
}

#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub features: Vec<String>,
    pub clients: u32,
}

/// Vertical feature assignment plus the within-group sharding rule.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub active_features: Vec<String>,
    pub groups: Vec<GroupSpec>,
    pub shard_rule: ShardRule,
    pub test_fraction: f64,
}

/// Expanded-column views and per-client row shards, aligned on the same
/// underlying row order everywhere.
#[derive(Debug, Clone)]
pub struct PartGroup {
    pub cols: Vec<usize>,
    /// Row indices owned by each client; disjoint and covering all rows.
    pub shards: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Partitioned {
    pub active_cols: Vec<usize>,
    pub groups: Vec<PartGroup>,
}

/// Splits the table into the active view and per-group views with per-client
/// sample shards.
pub fn partition(table: &Table, spec: &PartitionSpec, rng: &mut impl Rng) -> Result<Partitioned> {
    // Feature lists must be disjoint and cover the raw features.
    let mut seen: Vec<String> = Vec::new();
    fn claim(
        table: &Table,
        seen: &mut Vec<String>,
        names: &[String],
        what: &str,
    ) -> Result<()> {
        for n in names {
            if !table.raw_feature_names.contains(n) {
                return Err(Error::Data(format!("{} names unknown feature `{}`", what, n)));
            }
            if seen.contains(n) {
                return Err(Error::Data(format!("feature `{}` assigned to more than one party", n)));
            }
            seen.push(n.clone());
        }
        Ok(())
    }
    claim(table, &mut seen, &spec.active_features, "active party")?;
    for (g, gs) in spec.groups.iter().enumerate() {
        if gs.features.is_empty() {
            return Err(Error::Data(format!("group {} has no features", g + 1)));
        }
        if gs.clients == 0 {
            return Err(Error::Data(format!("group {} has no clients", g + 1)));
        }
        claim(table, &mut seen, &gs.features, &format!("group {}", g + 1))?;
    }
    if seen.len() != table.raw_feature_names.len() {
        let missing: Vec<&String> = table
            .raw_feature_names
            .iter()
            .filter(|n| !seen.contains(n))
            .collect();
        return Err(Error::Data(format!("features not assigned to any party: {:?}", missing)));
    }

    let n_rows = table.n_rows();
    let mut groups = Vec::with_capacity(spec.groups.len());
    for gs in &spec.groups {
        let cols = table.cols_for_features(&gs.features);
        let k = gs.clients as usize;
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        match spec.shard_rule {
            ShardRule::RoundRobin => {
                for r in 0..n_rows {
                    shards[r % k].push(r);
                }
            }
            ShardRule::Random => {
                let mut order: Vec<usize> = (0..n_rows).collect();
                order.shuffle(rng);
                for (pos, r) in order.into_iter().enumerate() {
                    shards[pos % k].push(r);
                }
                for s in &mut shards {
                    s.sort_unstable();
                }
            }
        }
        groups.push(PartGroup { cols, shards });
    }

    Ok(Partitioned { active_cols: table.cols_for_features(&spec.active_features), groups })
}

/// Shuffles the raw features into `n_parts` near-equal partitions: the first
/// becomes the active party's share, the rest become singleton-client
/// groups, mirroring the dropout experiments' one-client-per-group setup.
pub fn random_feature_partition(
    table: &Table,
    n_parts: usize,
    rng: &mut impl Rng,
) -> Result<PartitionSpec> {
    let n_features = table.raw_feature_names.len();
    if n_parts < 2 {
        return Err(Error::Data("need at least two partitions (active plus one group)".into()));
    }
    if n_parts > n_features {
        return Err(Error::Data(format!(
            "{} partitions exceed the {} available features",
            n_parts, n_features
        )));
    }
    let mut names = table.raw_feature_names.clone();
    names.shuffle(rng);
    // Near-equal sizes: the first `rem` partitions take one extra feature.
    let base = n_features / n_parts;
    let rem = n_features % n_parts;
    let mut parts: Vec<Vec<String>> = Vec::with_capacity(n_parts);
    let mut off = 0;
    for p in 0..n_parts {
        let take = base + usize::from(p < rem);
        parts.push(names[off..off + take].to_vec());
        off += take;
    }
    let active_features = parts.remove(0);
    let groups = parts
        .into_iter()
        .map(|features| GroupSpec { features, clients: 1 })
        .collect();
    Ok(PartitionSpec { active_features, groups, shard_rule: ShardRule::RoundRobin, test_fraction: 0.2 })
}

/// Deterministic text manifest of feature and shard assignments.
pub fn partition_manifest(table: &Table, spec: &PartitionSpec, parted: &Partitioned) -> String {
    let mut out = String::new();
    out.push_str(&format!("rows: {}\n", table.n_rows()));
    out.push_str(&format!("active features: {}\n", spec.active_features.join(",")));
    for (g, (gs, pg)) in spec.groups.iter().zip(&parted.groups).enumerate() {
        out.push_str(&format!(
            "group {}: features={} clients={} cols={}\n",
            g + 1,
            gs.features.join(","),
            gs.clients,
            pg.cols.len()
        ));
        for (k, shard) in pg.shards.iter().enumerate() {
            out.push_str(&format!("  client {}: {} rows\n", k, shard.len()));
        }
    }
    out
}
