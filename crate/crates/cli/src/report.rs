//! Summary tables from bench CSV: per-shape speedup vs the dense baseline
//! and modeled byte-traffic ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sparamx::error::{Error, Result};

use crate::bench::CSV_HEADER;

#[derive(Debug, Clone)]
struct Row {
    kernel: String,
    group_key: String,
    label: String,
    sparsity: String,
    v_sparsity: String,
    median_ns: u128,
    throughput: String,
    modeled_bytes: u64,
    checksum: String,
    validated: String,
}

fn parse_rows(csv: &str) -> Result<Vec<Row>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedInput("empty CSV".into()))?;
    if header != CSV_HEADER {
        return Err(Error::MalformedInput("unexpected CSV header".into()));
    }
    let n_cols = CSV_HEADER.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != n_cols {
            return Err(Error::MalformedInput(format!(
                "line {}: {} columns, expected {n_cols}",
                i + 2,
                cols.len()
            )));
        }
        // kernel,shape,m,k,n,heads,kv_heads,head_dim,context,sparsity,
        // v_sparsity,dtype,workers,groups,...
        let shape_cols = [
            cols[1], cols[2], cols[3], cols[4], cols[5], cols[6], cols[7], cols[8], cols[11],
            cols[12],
        ];
        let median_ns: u128 = cols[17]
            .parse()
            .map_err(|_| Error::MalformedInput(format!("line {}: bad median_ns", i + 2)))?;
        let modeled_bytes: u64 = cols[20]
            .parse()
            .map_err(|_| Error::MalformedInput(format!("line {}: bad modeled_bytes", i + 2)))?;
        rows.push(Row {
            kernel: cols[0].to_string(),
            group_key: shape_cols.join(","),
            label: format!("{} {}x{}", cols[1], cols[3], cols[4]),
            sparsity: cols[9].to_string(),
            v_sparsity: cols[10].to_string(),
            median_ns,
            throughput: cols[19].to_string(),
            modeled_bytes,
            checksum: cols[21].to_string(),
            validated: cols[22].to_string(),
        });
    }
    Ok(rows)
}

fn baseline_kernel(kernel: &str) -> &'static str {
    match kernel {
        "int8_dense" | "int8_sparse" => "int8_dense",
        "attention" => "attention",
        _ => "dense",
    }
}

/// Pick the baseline row for `row` within its group: a dense-family row at
/// the same sparsity if present, otherwise the one at the lowest sparsity.
/// Attention baselines against the least-pruned attention row.
fn find_baseline<'a>(row: &Row, group: &'a [Row]) -> Option<&'a Row> {
    let base = baseline_kernel(&row.kernel);
    let candidates: Vec<&Row> = group.iter().filter(|r| r.kernel == base).collect();
    if candidates.is_empty() {
        return None;
    }
    if row.kernel == "attention" {
        // Prefer the unpruned row; otherwise baseline at the lowest total
        // pruning in the group.
        let total = |r: &Row| {
            r.sparsity.parse::<f64>().unwrap_or(f64::MAX)
                + r.v_sparsity.parse::<f64>().unwrap_or(0.0)
        };
        return candidates
            .iter()
            .find(|r| total(r) == 0.0)
            .or_else(|| candidates.iter().min_by(|a, b| total(a).total_cmp(&total(b))))
            .copied();
    }
    candidates
        .iter()
        .find(|r| r.sparsity == row.sparsity)
        .copied()
        .or_else(|| {
            candidates
                .iter()
                .min_by(|a, b| {
                    a.sparsity
                        .parse::<f64>()
                        .unwrap_or(f64::MAX)
                        .total_cmp(&b.sparsity.parse::<f64>().unwrap_or(f64::MAX))
                })
                .copied()
        })
}

/// Render grouped markdown tables with speedups over the dense baseline.
pub fn report(csv: &str) -> Result<String> {
    let rows = parse_rows(csv)?;
    if rows.is_empty() {
        return Err(Error::MalformedInput("CSV has no data rows".into()));
    }
    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.group_key.clone()).or_default().push(row);
    }

    let mut out = String::new();
    out.push_str("# Bench report\n");
    for (key, group) in &groups {
        let label = &group[0].label;
        let _ = writeln!(out, "\n## {label}\n");
        let _ = writeln!(out, "group: `{key}`\n");
        out.push_str(
            "| kernel | sparsity | median_ms | speedup | throughput | modeled_MB | bytes_ratio | validated | checksum |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for row in group {
            let baseline = find_baseline(row, group).ok_or_else(|| {
                Error::MalformedInput(format!(
                    "missing baseline: no {} row for group {key}",
                    baseline_kernel(&row.kernel)
                ))
            })?;
            let speedup = baseline.median_ns as f64 / row.median_ns.max(1) as f64;
            let bytes_ratio = row.modeled_bytes as f64 / baseline.modeled_bytes.max(1) as f64;
            let sparsity = if row.v_sparsity.is_empty() {
                row.sparsity.clone()
            } else {
                format!("{}/{}", row.sparsity, row.v_sparsity)
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:.3} | {:.2}x | {} | {:.2} | {:.3} | {} | {} |",
                row.kernel,
                sparsity,
                row.median_ns as f64 / 1e6,
                speedup,
                row.throughput,
                row.modeled_bytes as f64 / 1e6,
                bytes_ratio,
                row.validated,
                row.checksum,
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{write_csv, BenchRow};

    fn row(kernel: &str, sparsity: f32, median_ns: u128, bytes: u64) -> BenchRow {
        BenchRow {
            kernel: kernel.into(),
            shape: "tiny".into(),
            m: 1,
            k: 64,
            n: 64,
            heads: None,
            kv_heads: None,
            head_dim: None,
            context: None,
            sparsity,
            v_sparsity: None,
            dtype: "bf16".into(),
            workers: 1,
            groups: None,
            reps: 3,
            warmup: 1,
            seed: 7,
            median_ns,
            min_ns: median_ns,
            throughput: 1.0,
            modeled_bytes: bytes,
            checksum: "00".into(),
            validated: true,
        }
    }

    fn to_csv(rows: &[BenchRow]) -> String {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn single_dense_row_reports_unity_speedup() {
        let csv = to_csv(&[row("dense", 0.5, 1000, 100)]);
        let md = report(&csv).unwrap();
        assert!(md.contains("| dense | 0.5000 | 0.001 | 1.00x"), "{md}");
    }

    #[test]
    fn faster_sparse_row_shows_speedup_above_one() {
        let csv = to_csv(&[row("dense", 0.5, 3000, 100), row("sparse", 0.5, 1000, 60)]);
        let md = report(&csv).unwrap();
        assert!(md.contains("| sparse | 0.5000 | 0.001 | 3.00x"), "{md}");
        assert!(md.contains("| 0.600 |"), "{md}");
    }

    #[test]
    fn hand_computed_three_row_ratio() {
        let csv = to_csv(&[
            row("dense", 0.0, 2400, 100),
            row("sparse", 0.0, 1600, 106),
            row("sparse", 0.5, 800, 60),
        ]);
        let md = report(&csv).unwrap();
        // 2400/1600 = 1.50; sparse@0.5 falls back to the dense row: 3.00.
        assert!(md.contains("| 1.50x"), "{md}");
        assert!(md.contains("| 3.00x"), "{md}");
    }

    #[test]
    fn attention_baselines_against_least_pruned_row() {
        let mut base = row("attention", 0.0, 2000, 90);
        base.v_sparsity = Some(0.0);
        base.heads = Some(8);
        let mut pruned = row("attention", 0.3, 1000, 60);
        pruned.v_sparsity = Some(0.5);
        pruned.heads = Some(8);
        let csv = to_csv(&[base, pruned]);
        let md = report(&csv).unwrap();
        assert!(md.contains("| attention | 0.3000/0.5000 | 0.001 | 2.00x"), "{md}");
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let csv = to_csv(&[row("sparse", 0.5, 1000, 60)]);
        match report(&csv) {
            Err(Error::MalformedInput(msg)) => assert!(msg.contains("missing baseline")),
            other => panic!("expected missing baseline, got {other:?}"),
        }
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(report("not,a,header\n").is_err());
        assert!(report("").is_err());
    }
}
