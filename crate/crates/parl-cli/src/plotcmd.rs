//! The `plotdata` subcommand: aligns per-seed trace CSVs into mean and
//! standard-error series per method, with an optional oracle line, emitted
//! as CSV plus a minimal static SVG.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use parl::driver::trace_from_csv;
use parl::error::Error;

pub fn cmd_plotdata(traces: &[PathBuf], oracle: Option<f64>, out_dir: &Path) -> ExitCode {
    if traces.is_empty() {
        eprintln!("error: no trace CSVs given");
        return ExitCode::from(2);
    }
    match execute(traces, oracle, out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            crate::exit_code_for(&err)
        }
    }
}

struct MethodSeries {
    /// Per-seed align-return series, all equal length.
    runs: Vec<Vec<f64>>,
}

fn method_of(path: &Path) -> Result<String, Error> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let rest = stem.strip_prefix("trace_").ok_or_else(|| {
        Error::InvalidArgument(format!(
            "trace file `{stem}` does not follow trace_<method>_seed<seed>.csv"
        ))
    })?;
    let (method, _) = rest.rsplit_once("_seed").ok_or_else(|| {
        Error::InvalidArgument(format!(
            "trace file `{stem}` does not follow trace_<method>_seed<seed>.csv"
        ))
    })?;
    Ok(method.to_string())
}

fn execute(traces: &[PathBuf], oracle: Option<f64>, out_dir: &Path) -> Result<(), Error> {
    let mut methods: BTreeMap<String, MethodSeries> = BTreeMap::new();
    let mut length: Option<usize> = None;
    for path in traces {
        let method = method_of(path)?;
        let parsed = trace_from_csv(&std::fs::read_to_string(path)?)?;
        if let Some(len) = length {
            if parsed.align_return.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "trace {} has {} records, expected {len}",
                    path.display(),
                    parsed.align_return.len()
                )));
            }
        } else {
            length = Some(parsed.align_return.len());
        }
        methods
            .entry(method)
            .or_insert_with(|| MethodSeries { runs: Vec::new() })
            .runs
            .push(parsed.align_return);
    }
    let length = length.expect("at least one trace");

    // Aligned mean and standard-error band per method.
    let mut csv = String::from("iteration");
    for method in methods.keys() {
        csv.push_str(&format!(",{method}_mean,{method}_stderr"));
    }
    if oracle.is_some() {
        csv.push_str(",oracle");
    }
    csv.push('\n');
    let mut bands: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (method, series) in &methods {
        let n = series.runs.len() as f64;
        let mut means = Vec::with_capacity(length);
        let mut errs = Vec::with_capacity(length);
        for i in 0..length {
            let vals: Vec<f64> = series.runs.iter().map(|r| r[i]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let stderr = if vals.len() < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            };
            means.push(mean);
            errs.push(stderr);
        }
        bands.insert(method.clone(), (means, errs));
    }
    for i in 0..length {
        csv.push_str(&format!("{i}"));
        for method in methods.keys() {
            let (means, errs) = &bands[method];
            csv.push_str(&format!(",{},{}", means[i], errs[i]));
        }
        if let Some(o) = oracle {
            csv.push_str(&format!(",{o}"));
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("plot_align.csv"), csv)?;
    std::fs::write(out_dir.join("plot_align.svg"), render_svg(&bands, oracle, length))?;
    Ok(())
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A minimal static line plot: mean curves with stderr bands, plus the
/// oracle as a dashed horizontal line.
fn render_svg(
    bands: &BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    oracle: Option<f64>,
    length: usize,
) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 20.0, 20.0, 40.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (means, errs) in bands.values() {
        for (m, e) in means.iter().zip(errs) {
            lo = lo.min(m - e);
            hi = hi.max(m + e);
        }
    }
    if let Some(o) = oracle {
        lo = lo.min(o);
        hi = hi.max(o);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |i: usize| ml + (w - ml - mr) * i as f64 / (length.max(2) - 1) as f64;
    let y = |v: f64| h - mb - (h - mt - mb) * (v - lo) / (hi - lo);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">iteration</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">true-reward return</text>\n\
         <text x=\"{ml}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">0</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{lo:.3}</text>\n\
         <text x=\"{}\" y=\"{mt}\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>\n",
        (ml + w - mr) / 2.0,
        h - 8.0,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        h - mb + 14.0,
        w - mr,
        h - mb + 14.0,
        length - 1,
        ml - 6.0,
        h - mb,
        ml - 6.0,
    ));
    for (idx, (method, (means, errs))) in bands.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        // Standard-error band as a closed polygon.
        let mut band = String::from("<polygon fill=\"");
        band.push_str(color);
        band.push_str("\" fill-opacity=\"0.15\" stroke=\"none\" points=\"");
        for (i, (m, e)) in means.iter().zip(errs).enumerate() {
            band.push_str(&format!("{:.2},{:.2} ", x(i), y(m + e)));
        }
        for (i, (m, e)) in means.iter().zip(errs).enumerate().rev() {
            band.push_str(&format!("{:.2},{:.2} ", x(i), y(m - e)));
        }
        band.push_str("\"/>\n");
        svg.push_str(&band);
        let mut line = format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"");
        for (i, m) in means.iter().enumerate() {
            line.push_str(&format!("{:.2},{:.2} ", x(i), y(*m)));
        }
        line.push_str("\"/>\n");
        svg.push_str(&line);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{method}</text>\n",
            ml + 10.0,
            mt + 16.0 + 16.0 * idx as f64
        ));
    }
    if let Some(o) = oracle {
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"#7f7f7f\" stroke-dasharray=\"6 4\"/>\n\
             <text x=\"{2}\" y=\"{3:.2}\" font-size=\"12\" fill=\"#7f7f7f\" text-anchor=\"end\">oracle</text>\n",
            y(o),
            w - mr,
            w - mr - 4.0,
            y(o) - 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
