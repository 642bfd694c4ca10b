//! CSV artefacts. Each file may open with `#` comment lines carrying
//! provenance (config hash, preprocessing, annealing rule); a reader with
//! `#` as comment character sees a plain rectangular table.

use crate::pipeline::{HistogramRow, TrainTrace};
use crate::pruning::PruneCurve;

use super::config::RunConfig;

/// One Table-1 style line: a block size aggregated over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub block_size: usize,
    pub ratio: f64,
    pub error_mean: f64,
    pub error_stderr: f64,
    pub iters: f64,
}

/// Provenance lines shared by every artefact of a run.
pub fn provenance(cfg: &RunConfig) -> Vec<String> {
    vec![
        format!("config_hash={}", cfg.hash()),
        "features scaled to [0,1] (pixel/255 or min-max)".to_string(),
        format!(
            "annealing: beta_0={}; beta <- beta*(1+{eps}) if KL_block > budget else max(beta/(1+{eps}), beta_0)",
            cfg.eps_beta0,
            eps = cfg.eps_beta
        ),
    ]
}

fn render(comments: &[String], header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = Vec::new();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn trace_csv(trace: &TrainTrace, comments: &[String]) -> Vec<u8> {
    render(
        comments,
        &["iter", "cross_entropy", "kl_nats", "beta_or_kappa"],
        trace.records.iter().map(|r| {
            vec![r.iter.to_string(), r.cross_entropy.to_string(), r.kl_nats.to_string(), r.beta_or_kappa.to_string()]
        }),
    )
}

pub fn histogram_csv(rows: &[HistogramRow], comments: &[String]) -> Vec<u8> {
    render(
        comments,
        &["layer", "mean", "log_std"],
        rows.iter().map(|r| vec![r.layer.to_string(), r.mean.to_string(), r.log_std.to_string()]),
    )
}

pub fn sweep_csv(curves: &[(u64, PruneCurve)], comments: &[String]) -> Vec<u8> {
    render(
        comments,
        &["strategy", "fraction", "accuracy", "seed"],
        curves.iter().flat_map(|(seed, c)| {
            c.rows.iter().map(move |&(f, a)| vec![c.strategy.to_string(), f.to_string(), a.to_string(), seed.to_string()])
        }),
    )
}

pub fn summary_csv(rows: &[SummaryRow], comments: &[String]) -> Vec<u8> {
    render(
        comments,
        &["block_size", "ratio", "error_mean", "error_stderr", "iters"],
        rows.iter().map(|r| {
            vec![
                r.block_size.to_string(),
                r.ratio.to_string(),
                r.error_mean.to_string(),
                r.error_stderr.to_string(),
                r.iters.to_string(),
            ]
        }),
    )
}

/// Mean and standard error of the mean (`s / sqrt(n)`, sample deviation).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TraceRecord;
    use crate::pruning::PruneStrategy;

    fn strict_rows(bytes: &[u8], width: usize) -> Vec<csv::StringRecord> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_reader(bytes);
        assert_eq!(r.headers().unwrap().len(), width);
        r.records().map(|rec| rec.unwrap()).collect()
    }

    #[test]
    fn trace_is_rectangular_with_comments() {
        let rec = TraceRecord {
            iter: 1,
            cross_entropy: 2.5,
            kl_nats: 13.0,
            beta_or_kappa: 1e-8,
            blocks_over: 0,
            max_block_excess: 0.0,
        };
        let trace = TrainTrace { records: vec![rec, TraceRecord { iter: 2, ..rec }] };
        let bytes = trace_csv(&trace, &["config_hash=abc".into()]);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# config_hash=abc\niter,cross_entropy,kl_nats,beta_or_kappa\n1,2.5,13,0.00000001\n"));
        assert!(!text.contains('\r'));
        assert_eq!(strict_rows(&bytes, 4).len(), 2);
    }

    #[test]
    fn sweep_and_summary_parse() {
        let curve = PruneCurve { strategy: PruneStrategy::kl(), rows: vec![(0.0, 0.9), (0.5, 0.8)] };
        let rows = strict_rows(&sweep_csv(&[(7, curve)], &[]), 4);
        assert_eq!(&rows[1][0], "kl-divergence");
        assert_eq!(&rows[1][3], "7");
        let s = SummaryRow { block_size: 20, ratio: 32.0, error_mean: 0.1, error_stderr: 0.01, iters: 100.0 };
        assert_eq!(strict_rows(&summary_csv(&[s], &[]), 5).len(), 1);
        let h = HistogramRow { layer: 1, mean: -0.5, log_std: -3.0 };
        assert_eq!(strict_rows(&histogram_csv(&[h], &[]), 3).len(), 1);
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample sd = sqrt(5/3), se = sd / 2
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_stderr(&[3.0]), (3.0, 0.0));
    }
}
