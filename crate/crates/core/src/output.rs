//! Serialization of experiment records into the three result files.
//! Everything here is pure string building; the CLI does the writing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diagnostics::{assemble_curves, CURVE_METRICS};
use crate::error::Result;
use crate::harness::ExperimentRecord;
use crate::stats;

pub const RECORDS_FILE: &str = "records.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const CURVES_HEADER: &str = "protocol,series,seed,x,metric,value";
pub const SUMMARY_HEADER: &str = "protocol,series,x,metric,n,mean,std";

/// Leading comment line carrying the config hash.
pub fn hash_line(config_hash: &str) -> String {
    format!("# config_hash: {config_hash}\n")
}

/// Quote a CSV field only when it needs it.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn records_json(records: &[ExperimentRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(records)
        .map_err(|e| crate::error::Error::input(format!("cannot serialize records: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn curves_csv(records: &[ExperimentRecord], config_hash: &str) -> Result<String> {
    let mut out = hash_line(config_hash);
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for p in assemble_curves(records)? {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            field(&p.protocol),
            field(&p.series),
            p.seed,
            num(p.x),
            p.metric,
            num(p.value)
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

/// One row per (series, metric) at each series' final x, aggregated over
/// seeds; per-record summary values are appended under their own names.
pub fn summary_rows(records: &[ExperimentRecord]) -> Vec<(String, String, f64, String, Vec<f64>)> {
    let mut groups: BTreeMap<(String, String, u64, usize, String), (f64, Vec<f64>)> = BTreeMap::new();
    for record in records {
        let Some(last) = record.rounds.last() else {
            continue;
        };
        let series = record.series_for(last);
        let values = [
            last.val_accuracy,
            last.train_accuracy,
            last.val_loss,
            last.train_loss,
            last.epochs_used as f64,
            last.steps as f64,
            last.cumulative_steps as f64,
        ];
        for (m, v) in values.into_iter().enumerate() {
            groups
                .entry((record.protocol.clone(), series.clone(), last.x.to_bits(), m, CURVE_METRICS[m].into()))
                .or_insert_with(|| (last.x, Vec::new()))
                .1
                .push(v);
        }
        for (name, &v) in &record.summary {
            groups
                .entry((record.protocol.clone(), series.clone(), last.x.to_bits(), CURVE_METRICS.len(), name.clone()))
                .or_insert_with(|| (last.x, Vec::new()))
                .1
                .push(v);
        }
    }
    groups
        .into_iter()
        .map(|((protocol, series, _, _, metric), (x, values))| (protocol, series, x, metric, values))
        .collect()
}

pub fn summary_csv(records: &[ExperimentRecord], config_hash: &str) -> String {
    let mut out = hash_line(config_hash);
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for (protocol, series, x, metric, values) in summary_rows(records) {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            field(&protocol),
            field(&series),
            num(x),
            metric,
            values.len(),
            num(stats::mean(&values)),
            num(stats::std_dev(&values))
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Sort key that makes output order independent of worker scheduling.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        (&a.protocol, &a.series, a.seed).cmp(&(&b.protocol, &b.series, b.seed))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_outputs_are_headers_only() {
        assert_eq!(records_json(&[]).unwrap(), "[]\n");
        assert_eq!(
            curves_csv(&[], "abc").unwrap(),
            "# config_hash: abc\nprotocol,series,seed,x,metric,value\n"
        );
        assert_eq!(summary_csv(&[], "abc"), "# config_hash: abc\nprotocol,series,x,metric,n,mean,std\n");
    }

    #[test]
    fn fields_with_commas_are_quoted() {
        assert_eq!(field("lambda=0.3,noise_scale=0"), "\"lambda=0.3,noise_scale=0\"");
        assert_eq!(field("warm"), "warm");
        assert_eq!(field("a\"b"), "\"a\"\"b\"");
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::NAN), "NaN");
    }
}
