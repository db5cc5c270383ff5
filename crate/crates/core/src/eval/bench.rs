use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean wall-clock time of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub method: String,
    pub trials: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub input_shape: String,
    pub host: String,
}

/// `os-arch, N threads available`.
pub fn host_descriptor() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}, {threads} threads available", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times each method: one untimed warm-up call, then `trials` timed calls
/// run back to back on the current thread.
pub fn runtime_benchmark(
    methods: &mut [(&str, &mut dyn FnMut() -> Result<()>)],
    input_shape: &[usize],
    trials: usize,
) -> Result<Vec<BenchmarkRecord>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one trial".into()));
    }
    let host = host_descriptor();
    let shape = input_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut records = Vec::with_capacity(methods.len());
    for (name, run) in methods.iter_mut() {
        run()?;
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let start = Instant::now();
            run()?;
            times.push(start.elapsed().as_secs_f64());
        }
        records.push(BenchmarkRecord {
            method: name.to_string(),
            trials,
            mean_seconds: times.iter().sum::<f64>() / trials as f64,
            min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
            input_shape: shape.clone(),
            host: host.clone(),
        });
    }
    Ok(records)
}

/// Fixed-width text table of benchmark records.
pub fn format_benchmark_table(records: &[BenchmarkRecord]) -> String {
    let header = ["method", "trials", "mean_seconds", "min_seconds", "input_shape"];
    let rows: Vec<[String; 5]> = records
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.trials.to_string(),
                format!("{:.6}", r.mean_seconds),
                format!("{:.6}", r.min_seconds),
                r.input_shape.clone(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    if let Some(r) = records.first() {
        out.push_str(&format!("host: {}\n", r.host));
    }
    out
}
