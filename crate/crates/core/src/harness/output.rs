//! CSV artifacts. Every file is written to a temporary sibling and renamed
//! into place, so readers never observe a partial file.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::diagnostics::DisparityRecord;
use crate::error::Result;
use crate::federation::{Algorithm, OptimizationTrace};

pub const TRACE_HEADER: [&str; 7] = [
    "round",
    "cum_queries",
    "cum_scalars_tx",
    "F_value",
    "conv_error",
    "mean_disparity",
    "gamma",
];

pub const DIAGNOSTICS_HEADER: [&str; 7] = ["r", "t", "i", "xi", "cosine", "gamma_used", "gamma_star"];

pub const SUMMARY_HEADER: [&str; 7] = [
    "algorithm",
    "seed",
    "final_F_value",
    "final_conv_error",
    "rounds_to_threshold",
    "cum_queries",
    "cum_scalars_tx",
];

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn trace_file_name(algorithm: Algorithm, seed: u64) -> String {
    format!("trace_{}_{seed}.csv", algorithm.name())
}

pub fn diagnostics_file_name(algorithm: Algorithm, seed: u64) -> String {
    format!("diagnostics_{}_{seed}.csv", algorithm.name())
}

/// Builds the file in memory with `fill`, then writes it atomically.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut bytes = Vec::new();
    fill(&mut bytes)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn csv_into(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf)
}

pub fn write_trace_csv(buf: &mut Vec<u8>, trace: &OptimizationTrace) -> Result<()> {
    let mut w = csv_into(buf);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.rounds {
        w.write_record([
            r.round.to_string(),
            r.cum_queries.to_string(),
            r.cum_scalars_tx.to_string(),
            format_float(r.f_value),
            opt_float(r.conv_error),
            opt_float(r.mean_disparity),
            opt_float(r.gamma),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv<'a, I>(buf: &mut Vec<u8>, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a DisparityRecord>,
{
    let mut w = csv_into(buf);
    w.write_record(DIAGNOSTICS_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.iteration.to_string(),
            r.client.to_string(),
            format_float(r.xi),
            opt_float(r.cosine),
            format_float(r.gamma_used),
            opt_float(r.gamma_star),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median of rounds-to-threshold where a missed threshold counts as infinite.
pub fn median_rounds(values: &[Option<usize>]) -> Option<f64> {
    let as_f: Vec<f64> = values
        .iter()
        .map(|v| v.map_or(f64::INFINITY, |r| r as f64))
        .collect();
    median(&as_f).filter(|m| m.is_finite())
}

/// One row per (algorithm, seed) in input order, then one `median` row per algorithm.
pub fn write_summary_csv(buf: &mut Vec<u8>, traces: &[OptimizationTrace], threshold: f64) -> Result<()> {
    let mut w = csv_into(buf);
    w.write_record(SUMMARY_HEADER)?;
    let mut order: Vec<Algorithm> = Vec::new();
    for t in traces {
        if !order.contains(&t.algorithm) {
            order.push(t.algorithm);
        }
        let last = t.final_record();
        w.write_record([
            t.algorithm.name().to_string(),
            t.seed.to_string(),
            format_float(last.f_value),
            opt_float(last.conv_error),
            t.rounds_to_threshold(threshold).map(|r| r.to_string()).unwrap_or_default(),
            last.cum_queries.to_string(),
            last.cum_scalars_tx.to_string(),
        ])?;
    }
    for a in order {
        let group: Vec<&OptimizationTrace> = traces.iter().filter(|t| t.algorithm == a).collect();
        let f: Vec<f64> = group.iter().map(|t| t.final_record().f_value).collect();
        let e: Vec<f64> = group.iter().filter_map(|t| t.final_record().conv_error).collect();
        let rtt: Vec<Option<usize>> = group.iter().map(|t| t.rounds_to_threshold(threshold)).collect();
        let q: Vec<f64> = group.iter().map(|t| t.final_record().cum_queries as f64).collect();
        let tx: Vec<f64> = group.iter().map(|t| t.final_record().cum_scalars_tx as f64).collect();
        w.write_record([
            a.name().to_string(),
            "median".to_string(),
            opt_float(median(&f)),
            opt_float(median(&e)),
            opt_float(median_rounds(&rtt)),
            opt_float(median(&q)),
            opt_float(median(&tx)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wide table keyed by round: one `<algorithm>_<seed>` convergence-error
/// column per trace, in input order.
pub fn write_comparison_csv(buf: &mut Vec<u8>, traces: &[OptimizationTrace]) -> Result<()> {
    let mut w = csv_into(buf);
    let mut header = vec!["round".to_string()];
    header.extend(traces.iter().map(|t| format!("{}_{}", t.algorithm.name(), t.seed)));
    w.write_record(&header)?;
    let rows = traces.iter().map(|t| t.rounds.len()).max().unwrap_or(0);
    for i in 0..rows {
        let mut row = vec![i.to_string()];
        row.extend(traces.iter().map(|t| opt_float(t.rounds.get(i).and_then(|r| r.conv_error))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::RoundRecord;
    use nalgebra::DVector;

    fn trace(algorithm: Algorithm, seed: u64, errors: &[f64]) -> OptimizationTrace {
        OptimizationTrace {
            algorithm,
            seed,
            rounds: errors
                .iter()
                .enumerate()
                .map(|(i, &e)| RoundRecord {
                    round: i,
                    x: DVector::zeros(1),
                    f_value: e - 1.0,
                    conv_error: Some(e),
                    cum_queries: 10 * i as u64,
                    cum_scalars_tx: 4 * i as u64,
                    mean_disparity: (i > 0).then_some(0.5),
                    mean_cosine: None,
                    gamma: (i > 0).then_some(1.0),
                })
                .collect(),
            iterations: Vec::new(),
            client_queries: vec![],
        }
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median_rounds(&[Some(2), None, None]), None);
        assert_eq!(median_rounds(&[Some(2), Some(4), None]), Some(4.0));
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace(Algorithm::FedZo, 3, &[2.0, 0.5])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "round,cum_queries,cum_scalars_tx,F_value,conv_error,mean_disparity,gamma\n\
             0,0,0,1.0,2.0,,\n1,10,4,-0.5,0.5,0.5,1.0\n"
        );
    }

    #[test]
    fn summary_has_median_rows() {
        let traces = vec![
            trace(Algorithm::FedZo, 1, &[1.0, 0.04]),
            trace(Algorithm::FedZo, 2, &[1.0, 0.2]),
            trace(Algorithm::FedZo, 3, &[1.0, 0.01]),
        ];
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &traces, 0.05).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last, "fedzo,median,-0.96,0.04,1.0,10.0,4.0");
        assert!(text.contains("fedzo,2,-0.8,0.2,,10,4"));
    }

    #[test]
    fn comparison_is_wide() {
        let traces = vec![trace(Algorithm::FedZo, 1, &[1.0, 0.5]), trace(Algorithm::Fzoos, 1, &[1.0, 0.25])];
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &traces).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "round,fedzo_1,fzoos_1\n0,1.0,1.0\n1,0.5,0.25\n");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.csv");
        write_atomic(&path, |b| {
            b.extend_from_slice(b"one");
            Ok(())
        })
        .unwrap();
        write_atomic(&path, |b| {
            b.extend_from_slice(b"two");
            Ok(())
        })
        .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("sub")).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
