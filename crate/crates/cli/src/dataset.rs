//! CSV ingestion for real-data fits.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv parse failure: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("no usable rows after dropping incomplete ones")]
    Empty,
    #[error("{rows} usable rows but the fit needs at least {need}")]
    TooFewRows { rows: usize, need: usize },
    #[error("column {0:?} is constant; cannot standardize")]
    ConstantColumn(String),
}

/// Per-column affine transforms applied during loading, kept so fits can be
/// mapped back to the raw scale.
#[derive(Debug, Clone)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Standardization {
    pub fn destandardize_y(&self, z: f64) -> f64 {
        self.y_mean + self.y_sd * z
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Covariate column names, with `"(intercept)"` first when requested.
    pub names: Vec<String>,
    pub response: String,
    pub rows: Vec<(DVector<f64>, f64)>,
    pub standardization: Option<Standardization>,
    /// Rows dropped for missing or non-numeric fields.
    pub dropped: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }
}

/// Loads selected columns from a headered CSV file. Rows with a missing or
/// non-numeric field in any selected column are dropped. An empty
/// `covariates` list selects every column except the response.
pub fn load_csv(
    path: &std::path::Path,
    response: &str,
    covariates: &[String],
    standardize: bool,
    intercept: bool,
) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => DataError::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_owned()))
    };
    let y_idx = col(response)?;
    let cov_names: Vec<String> = if covariates.is_empty() {
        headers
            .iter()
            .filter(|h| h.as_str() != response)
            .cloned()
            .collect()
    } else {
        covariates.to_vec()
    };
    let x_idx: Vec<usize> = cov_names.iter().map(|n| col(n)).collect::<Result<_, _>>()?;

    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let parse = |idx: usize| -> Option<f64> {
            record.get(idx).and_then(|f| {
                if f.is_empty() {
                    None
                } else {
                    f.parse::<f64>().ok().filter(|v| v.is_finite())
                }
            })
        };
        let y = parse(y_idx);
        let row: Option<Vec<f64>> = x_idx.iter().map(|&i| parse(i)).collect();
        match (row, y) {
            (Some(row), Some(y)) => {
                xs.push(row);
                ys.push(y);
            }
            _ => dropped += 1,
        }
    }
    if xs.is_empty() {
        return Err(DataError::Empty);
    }

    let standardization = if standardize {
        let n = xs.len() as f64;
        let mut x_mean = vec![0.0; cov_names.len()];
        let mut x_sd = vec![0.0; cov_names.len()];
        for (k, name) in cov_names.iter().enumerate() {
            let mu = xs.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = xs.iter().map(|r| (r[k] - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            if var <= 0.0 {
                return Err(DataError::ConstantColumn(name.clone()));
            }
            x_mean[k] = mu;
            x_sd[k] = var.sqrt();
            for r in xs.iter_mut() {
                r[k] = (r[k] - mu) / x_sd[k];
            }
        }
        let y_mean = ys.iter().sum::<f64>() / n;
        let y_var = ys.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if y_var <= 0.0 {
            return Err(DataError::ConstantColumn(response.to_owned()));
        }
        let y_sd = y_var.sqrt();
        for v in ys.iter_mut() {
            *v = (*v - y_mean) / y_sd;
        }
        Some(Standardization {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
        })
    } else {
        None
    };

    let mut names = cov_names;
    if intercept {
        names.insert(0, "(intercept)".to_owned());
    }
    let rows: Vec<(DVector<f64>, f64)> = xs
        .into_iter()
        .zip(ys)
        .map(|(r, y)| {
            let x = if intercept {
                DVector::from_iterator(r.len() + 1, std::iter::once(1.0).chain(r))
            } else {
                DVector::from_vec(r)
            };
            (x, y)
        })
        .collect();
    let p = names.len();
    if rows.len() < p + 2 {
        return Err(DataError::TooFewRows {
            rows: rows.len(),
            need: p + 2,
        });
    }
    Ok(Dataset {
        names,
        response: response.to_owned(),
        rows,
        standardization,
        dropped,
    })
}
