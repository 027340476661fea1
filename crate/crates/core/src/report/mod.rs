//! Relative, absolute and goodput tables, written as plot-ready CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{roles_for_hops, RoleProfile, ScenarioResult};
use crate::nodes::Role;
use crate::profiler::{write_stats_csv, Category, Taxonomy};

/// Share of tunnel time below which a function is folded into
/// [`OTHER_SMALL`] in relative tables.
pub const RELATIVE_FLOOR: f64 = 0.01;
pub const OTHER_SMALL: &str = "other-small";
pub const ABSOLUTE_TOP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Relative,
    Absolute,
    Goodput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub category: Option<Category>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub caption: String,
    pub kind: TableKind,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("result has no {role} profile for {hops} hops")]
    MissingCell { hops: usize, role: Role },
    #[error("{role} profile for {hops} hops recorded no time")]
    EmptyCell { hops: usize, role: Role },
    #[error("malformed table csv: {0}")]
    Csv(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        ReportError::Csv(e.to_string())
    }
}

fn cell(result: &ScenarioResult, hops: usize, role: Role) -> Result<&RoleProfile, ReportError> {
    result.role(hops, role).ok_or(ReportError::MissingCell { hops, role })
}

/// Each function's share of the role's recorded time, one column per hop
/// count. Functions under [`RELATIVE_FLOOR`] in every column are summed
/// into one [`OTHER_SMALL`] row.
pub fn emit_relative_table(
    result: &ScenarioResult,
    role: Role,
    hop_columns: &[usize],
) -> Result<ReportTable, ReportError> {
    let taxonomy = result.config.taxonomy();
    let mut fractions: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (col, &hops) in hop_columns.iter().enumerate() {
        let profile = cell(result, hops, role)?;
        let total: u64 = profile.stats.iter().map(|s| s.exclusive_ns).sum();
        if total == 0 {
            return Err(ReportError::EmptyCell { hops, role });
        }
        for s in &profile.stats {
            fractions.entry(&s.label).or_insert_with(|| vec![0.0; hop_columns.len()])[col] =
                s.exclusive_ns as f64 / total as f64;
        }
    }
    let mut rows = Vec::new();
    let mut small = vec![0.0; hop_columns.len()];
    let mut folded = false;
    for (label, values) in fractions {
        if values.iter().all(|&v| v < RELATIVE_FLOOR) {
            folded = true;
            for (acc, v) in small.iter_mut().zip(&values) {
                *acc += v;
            }
        } else {
            rows.push(ReportRow {
                label: label.to_string(),
                category: Some(taxonomy.category_of(label)),
                values,
            });
        }
    }
    rows.sort_by(|a, b| a.category.cmp(&b.category).then_with(|| a.label.cmp(&b.label)));
    if folded {
        rows.push(ReportRow {
            label: OTHER_SMALL.to_string(),
            category: Some(Category::Other),
            values: small,
        });
    }
    Ok(ReportTable {
        caption: format!("Relative {} time per function ({} clock)", role, result.config.clock),
        kind: TableKind::Relative,
        columns: hop_columns.iter().map(|h| format!("{h}_hops")).collect(),
        rows,
    })
}

/// The role's functions at one hop count, longest exclusive time first,
/// cut at [`ABSOLUTE_TOP`] rows. Ties go to the lexicographically smaller label.
pub fn emit_absolute_table(result: &ScenarioResult, role: Role, hops: usize) -> Result<ReportTable, ReportError> {
    let profile = cell(result, hops, role)?;
    Ok(absolute_table(
        format!("Top functions of the {role} at {hops} hops ({} clock)", result.config.clock),
        profile,
        &result.config.taxonomy(),
    ))
}

pub fn absolute_table(caption: String, profile: &RoleProfile, taxonomy: &Taxonomy) -> ReportTable {
    let mut stats: Vec<_> = profile.stats.iter().collect();
    stats.sort_by(|a, b| b.exclusive_ns.cmp(&a.exclusive_ns).then_with(|| a.label.cmp(&b.label)));
    stats.truncate(ABSOLUTE_TOP);
    ReportTable {
        caption,
        kind: TableKind::Absolute,
        columns: vec!["total_seconds".into(), "ncalls".into()],
        rows: stats
            .into_iter()
            .map(|s| ReportRow {
                label: s.label.clone(),
                category: Some(taxonomy.category_of(&s.label)),
                values: vec![s.exclusive_seconds(), s.ncalls as f64],
            })
            .collect(),
    }
}

pub fn emit_goodput_table(result: &ScenarioResult) -> ReportTable {
    ReportTable {
        caption: "Goodput per hop count".into(),
        kind: TableKind::Goodput,
        columns: vec!["bytes_per_second".into()],
        rows: result
            .goodput()
            .into_iter()
            .map(|(hops, g)| ReportRow {
                label: hops.to_string(),
                category: None,
                values: vec![g],
            })
            .collect(),
    }
}

impl ReportTable {
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.columns.len())
            .map(|c| self.rows.iter().map(|r| r.values[c]).sum())
            .collect()
    }

    fn has_category(&self) -> bool {
        self.kind != TableKind::Goodput
    }

    fn key_header(&self) -> &'static str {
        match self.kind {
            TableKind::Goodput => "hops",
            _ => "function",
        }
    }

    /// CSV with a header row and `\n` line endings. Numbers use the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec![self.key_header().to_string()];
        if self.has_category() {
            header.push("category".into());
        }
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("write to memory");
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            if self.has_category() {
                rec.push(row.category.map_or(String::new(), |c| c.as_str().to_string()));
            }
            rec.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
    }

    /// Parses a table written by [`to_csv`](Self::to_csv). The caption and
    /// kind are not part of the file and are supplied by the caller.
    pub fn from_csv(caption: impl Into<String>, kind: TableKind, text: &str) -> Result<Self, ReportError> {
        let with_category = kind != TableKind::Goodput;
        let fixed = 1 + usize::from(with_category);
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.len() < fixed {
            return Err(ReportError::Csv("header is too short".into()));
        }
        let columns: Vec<String> = header.iter().skip(fixed).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let category = if with_category {
                match &rec[1] {
                    "" => None,
                    "crypto" => Some(Category::Crypto),
                    "networking" => Some(Category::Networking),
                    "other" => Some(Category::Other),
                    c => return Err(ReportError::Csv(format!("unknown category `{c}`"))),
                }
            } else {
                None
            };
            let values = rec
                .iter()
                .skip(fixed)
                .map(|v| v.parse::<f64>().map_err(|_| ReportError::Csv(format!("bad number `{v}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(ReportRow {
                label: rec[0].to_string(),
                category,
                values,
            });
        }
        Ok(ReportTable {
            caption: caption.into(),
            kind,
            columns,
            rows,
        })
    }
}

impl fmt::Display for ReportTable {
    /// Fixed-width text rendering for terminals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.caption)?;
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        write!(f, "  {:width$}", self.key_header())?;
        for c in &self.columns {
            write!(f, " {c:>14}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "  {:width$}", row.label)?;
            for v in &row.values {
                match self.kind {
                    TableKind::Relative => write!(f, " {v:>14.4}")?,
                    TableKind::Absolute => write!(f, " {v:>14.6}")?,
                    TableKind::Goodput => write!(f, " {v:>14.0}")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Every table for a result, keyed by file name.
pub fn report_files(result: &ScenarioResult) -> Result<BTreeMap<String, String>, ReportError> {
    let mut files = BTreeMap::new();
    files.insert("result.json".to_string(), serde_json::to_string_pretty(result)? + "\n");
    files.insert("goodput.csv".to_string(), emit_goodput_table(result).to_csv());
    let taxonomy = result.config.taxonomy();
    for hop in &result.hops {
        for (role, profile) in &hop.roles {
            let mut stats = Vec::new();
            write_stats_csv(&mut stats, &profile.stats, &taxonomy)?;
            files.insert(
                format!("stats_{}_{}.csv", hop.hops, role),
                String::from_utf8(stats).expect("csv is utf-8"),
            );
            files.insert(
                format!("absolute_{}_{}.csv", role, hop.hops),
                emit_absolute_table(result, *role, hop.hops)?.to_csv(),
            );
        }
    }
    for role in Role::ALL {
        let columns: Vec<usize> = result
            .hops
            .iter()
            .filter(|h| roles_for_hops(h.hops).contains(&role) && h.roles.contains_key(&role))
            .filter(|h| h.roles[&role].stats.iter().any(|s| s.exclusive_ns > 0))
            .map(|h| h.hops)
            .collect();
        if columns.is_empty() {
            continue;
        }
        let name = columns.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        files.insert(
            format!("relative_{role}_{name}.csv"),
            emit_relative_table(result, role, &columns)?.to_csv(),
        );
    }
    Ok(files)
}

/// Writes [`report_files`] into `dir`, creating it if needed.
pub fn write_report(result: &ScenarioResult, dir: impl AsRef<Path>) -> Result<Vec<String>, ReportError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = report_files(result)?;
    for (name, content) in &files {
        std::fs::write(dir.join(name), content)?;
    }
    Ok(files.into_keys().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{DropCounters, HopResult, ScenarioConfig};
    use crate::profiler::{categorize, ClockKind, FunctionStats};
    use proptest::prelude::*;

    fn profile(rows: &[(&str, u64)]) -> RoleProfile {
        let stats: Vec<FunctionStats> = rows
            .iter()
            .map(|&(label, ns)| FunctionStats {
                label: label.into(),
                ncalls: 1,
                exclusive_ns: ns,
                inclusive_ns: ns,
                clock: ClockKind::Cpu,
            })
            .collect();
        let breakdown = categorize(&stats, &Taxonomy::default());
        RoleProfile { nodes: 1, stats, breakdown }
    }

    fn result(cells: Vec<(usize, Role, RoleProfile)>) -> ScenarioResult {
        let mut hops: BTreeMap<usize, HopResult> = BTreeMap::new();
        for (h, role, p) in cells {
            hops.entry(h)
                .or_insert_with(|| HopResult {
                    hops: h,
                    roles: BTreeMap::new(),
                    circuits_built: 4,
                    packets_sent: 10,
                    bytes_sent: 10_240,
                    packets_delivered: 10,
                    bytes_delivered: 10_240,
                    digest: String::new(),
                    transfer_seconds: 0.5,
                    goodput_bytes_per_second: Some(20_480.0 / (h + 1) as f64),
                    drops: DropCounters::default(),
                    leftover_table_entries: 0,
                    expected_calls: BTreeMap::new(),
                    wall_seconds: 1.0,
                    error: None,
                })
                .roles
                .insert(role, p);
        }
        ScenarioResult {
            config: ScenarioConfig::default(),
            hops: hops.into_values().collect(),
            wall_seconds: 2.0,
        }
    }

    fn seeder_zero_hop() -> RoleProfile {
        // Exclusive times in ms from a 0-hop seeder breakdown.
        profile(&[
            ("encrypt_str", 180),
            ("encode_address", 60),
            ("decode_address", 80),
            ("crypto_out", 120),
            ("send_packet", 130),
            ("dispatch_datagram", 430),
            ("key_agreement", 3),
        ])
    }

    #[test]
    fn relative_table_matches_breakdown() {
        let r = result(vec![(0, Role::Seed, seeder_zero_hop())]);
        let t = emit_relative_table(&r, Role::Seed, &[0]).unwrap();
        let sums = t.column_sums();
        assert!((sums[0] - 1.0).abs() < 1e-9);
        let crypto: f64 = t
            .rows
            .iter()
            .filter(|row| row.category == Some(Category::Crypto))
            .map(|row| row.values[0])
            .sum();
        assert!((crypto - 0.44 / 1.003).abs() < 1e-9);
        // 3 of 1003 is under the floor.
        let last = t.rows.last().unwrap();
        assert_eq!(last.label, OTHER_SMALL);
        assert!((last.values[0] - 3.0 / 1003.0).abs() < 1e-12);
    }

    #[test]
    fn single_function_is_one() {
        let r = result(vec![(1, Role::Exit, profile(&[("relay_packet", 7)]))]);
        let t = emit_relative_table(&r, Role::Exit, &[1]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].values, [1.0]);
    }

    #[test]
    fn missing_role_is_an_error() {
        let r = result(vec![(0, Role::Seed, seeder_zero_hop())]);
        assert!(matches!(
            emit_relative_table(&r, Role::Relay, &[0]),
            Err(ReportError::MissingCell { hops: 0, role: Role::Relay })
        ));
        assert!(matches!(
            emit_absolute_table(&r, Role::Seed, 3),
            Err(ReportError::MissingCell { hops: 3, role: Role::Seed })
        ));
    }

    #[test]
    fn absolute_truncates_and_breaks_ties_by_label() {
        let labels: Vec<String> = (0..25).map(|i| format!("f{i:02}")).collect();
        let rows: Vec<(&str, u64)> = labels.iter().map(|l| (l.as_str(), 100 - (l[1..].parse::<u64>().unwrap() / 2))).collect();
        let r = result(vec![(2, Role::Relay, profile(&rows))]);
        let t = emit_absolute_table(&r, Role::Relay, 2).unwrap();
        assert_eq!(t.rows.len(), 20);
        let got: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        let mut oracle: Vec<(u64, &str)> = rows.iter().map(|&(l, ns)| (ns, l)).collect();
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        let oracle: Vec<&str> = oracle.iter().take(20).map(|x| x.1).collect();
        assert_eq!(got, oracle);
        assert!(t.rows.iter().all(|r| r.values.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn files_are_deterministic() {
        let r = result(vec![
            (0, Role::Seed, seeder_zero_hop()),
            (3, Role::Seed, seeder_zero_hop()),
            (3, Role::Exit, profile(&[("decrypt_str", 15), ("relay_packet", 11)])),
        ]);
        let a = report_files(&r).unwrap();
        let b = report_files(&r.clone()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains_key("relative_seed_0-3.csv"));
        assert!(a.contains_key("relative_exit_3.csv"));
        assert!(a.contains_key("absolute_exit_3.csv"));
        assert!(a.contains_key("stats_3_exit.csv"));
        assert!(a["goodput.csv"].starts_with("hops,bytes_per_second\n0,20480\n"));
    }

    #[test]
    fn display_renders_every_row() {
        let r = result(vec![(0, Role::Seed, seeder_zero_hop())]);
        let text = emit_relative_table(&r, Role::Seed, &[0]).unwrap().to_string();
        assert!(text.contains("encrypt_str"));
        assert!(text.contains(OTHER_SMALL));
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(("[a-z_,\" ]{1,12}", prop::option::of(0u8..3), prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3)), 0..12),
        ) {
            let t = ReportTable {
                caption: "t".into(),
                kind: TableKind::Absolute,
                columns: vec!["a".into(), "b b".into(), "c,".into()],
                rows: rows.into_iter().map(|(label, c, values)| ReportRow {
                    label,
                    category: c.map(|c| [Category::Crypto, Category::Networking, Category::Other][c as usize]),
                    values,
                }).collect(),
            };
            let back = ReportTable::from_csv("t", TableKind::Absolute, &t.to_csv()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn relative_columns_sum_to_one(times in prop::collection::vec((1u64..1_000_000, 0u64..1_000_000), 1..30)) {
            let labels: Vec<String> = (0..times.len()).map(|i| format!("fn{i}")).collect();
            let a: Vec<(&str, u64)> = labels.iter().zip(&times).map(|(l, t)| (l.as_str(), t.0)).collect();
            let b: Vec<(&str, u64)> = labels.iter().zip(&times).map(|(l, t)| (l.as_str(), t.1)).filter(|x| x.1 > 0).collect();
            let mut cells = vec![(1, Role::Seed, profile(&a))];
            if !b.is_empty() {
                cells.push((2, Role::Seed, profile(&b)));
            }
            let cols: Vec<usize> = if b.is_empty() { vec![1] } else { vec![1, 2] };
            let t = emit_relative_table(&result(cells), Role::Seed, &cols).unwrap();
            for s in t.column_sums() {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
