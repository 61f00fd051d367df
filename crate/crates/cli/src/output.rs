//! Report rendering: canonical JSON and aligned text tables carrying the
//! same numbers.

use psm_core::RunReport;

pub fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_else(|| "-".to_owned())
}

/// Two-column table with left-aligned keys.
pub fn kv_table(pairs: &[(String, String)]) -> String {
    let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k:<width$}  {v:>14}\n"));
    }
    out
}

pub fn run_report_table(r: &RunReport) -> String {
    let mut pairs = vec![
        ("n_stop".to_owned(), fmt_num(r.n_stop)),
        ("n_stop_sd".to_owned(), fmt_num(r.n_stop_sd)),
        ("coverage_exact".to_owned(), fmt_opt(r.coverage_exact)),
        ("coverage_approx".to_owned(), fmt_opt(r.coverage_approx)),
        ("coverage_ase".to_owned(), fmt_opt(r.coverage_ase)),
        ("se".to_owned(), fmt_num(r.se)),
        ("ad".to_owned(), fmt_num(r.ad)),
        ("p0_hat".to_owned(), fmt_opt(r.p0_hat)),
        ("p0_hat_sd".to_owned(), fmt_opt(r.p0_hat_sd)),
        ("reps".to_owned(), r.reps.to_string()),
        ("seed".to_owned(), r.seed.to_string()),
        ("exhausted_reps".to_owned(), r.exhausted_reps.to_string()),
    ];
    for (j, n) in r.per_procedure.iter().enumerate() {
        pairs.push((format!("n_stop[{j}]"), fmt_num(*n)));
    }
    kv_table(&pairs)
}

/// Writes to `--out` when given, stdout otherwise.
pub fn emit(text: &str, out: Option<&std::path::Path>) -> std::io::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}
