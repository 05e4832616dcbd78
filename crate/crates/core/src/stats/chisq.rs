use ndarray::Array2;
use serde::Serialize;
use statrs::function::gamma::gamma_ur;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChiSquareError {
    #[error("contingency table needs at least two rows and two columns, got {rows}×{cols}")]
    TooFewCategories { rows: usize, cols: usize },
    #[error("zero expected count in row {row}, column {col}")]
    DegenerateTable { row: usize, col: usize },
}

/// Correct / incorrect image counts per category of one factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FactorTable {
    pub factor: String,
    pub categories: Vec<String>,
    pub correct: Vec<u64>,
    pub incorrect: Vec<u64>,
}

impl FactorTable {
    /// 2 × C table: row 0 correct, row 1 incorrect.
    pub fn contingency(&self) -> Array2<u64> {
        let c = self.categories.len();
        Array2::from_shape_fn((2, c), |(r, j)| if r == 0 { self.correct[j] } else { self.incorrect[j] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub n: u64,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: usize) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, statistic / 2.0)
}

/// Pearson's test of independence without continuity correction.
pub fn chi_square(table: &Array2<u64>) -> Result<ChiSquare, ChiSquareError> {
    let (rows, cols) = table.dim();
    if rows < 2 || cols < 2 {
        return Err(ChiSquareError::TooFewCategories { rows, cols });
    }
    let n = table.sum();
    let row_sums: Vec<u64> = table.rows().into_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<u64> = table.columns().into_iter().map(|c| c.sum()).collect();
    let mut statistic = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            if row_sums[i] == 0 || col_sums[j] == 0 {
                return Err(ChiSquareError::DegenerateTable { row: i, col: j });
            }
            let expected = row_sums[i] as f64 * col_sums[j] as f64 / n as f64;
            let d = table[[i, j]] as f64 - expected;
            statistic += d * d / expected;
        }
    }
    let df = (rows - 1) * (cols - 1);
    Ok(ChiSquare {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Association {
    Negligible,
    Weak,
    Moderate,
    Strong,
}

impl Association {
    pub fn of(v: f64) -> Self {
        if v < 0.05 {
            Association::Negligible
        } else if v < 0.10 {
            Association::Weak
        } else if v < 0.25 {
            Association::Moderate
        } else {
            Association::Strong
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Association::Negligible => "negligible",
            Association::Weak => "weak",
            Association::Moderate => "moderate",
            Association::Strong => "strong",
        }
    }
}

pub fn cramers_v(table: &Array2<u64>) -> Result<(f64, Association), ChiSquareError> {
    let chi = chi_square(table)?;
    let (rows, cols) = table.dim();
    let k = (rows.min(cols) - 1) as f64;
    let v = (chi.statistic / (chi.n as f64 * k)).sqrt().clamp(0.0, 1.0);
    Ok((v, Association::of(v)))
}
