use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Column-major design matrix with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("design matrix has non-finite entries".into()));
        }
        Ok(DesignMatrix { x, names })
    }

    /// Intercept followed by the given covariate columns.
    pub fn with_intercept(n: usize, covariates: &[(String, Vec<f64>)]) -> Result<Self> {
        let p = covariates.len() + 1;
        let mut x = DMatrix::from_element(n, p, 1.0);
        let mut names = vec!["(intercept)".to_string()];
        for (j, (name, col)) in covariates.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Dimension(format!(
                    "covariate '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
            x.set_column(j + 1, &DVector::from_column_slice(col));
            names.push(name.clone());
        }
        DesignMatrix::new(x, names)
    }

    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix {
            x: DMatrix::from_element(n, 1, 1.0),
            names: vec!["(intercept)".into()],
        }
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.nrows();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    /// Copy with `col` inserted at position `pos`.
    pub fn insert_column(&self, pos: usize, col: &[f64], name: &str) -> Result<Self> {
        if col.len() != self.nrows() {
            return Err(Error::Dimension("inserted column has wrong length".into()));
        }
        let mut x = self.x.clone().insert_column(pos, 0.0);
        x.set_column(pos, &DVector::from_column_slice(col));
        let mut names = self.names.clone();
        names.insert(pos, name.to_string());
        DesignMatrix::new(x, names)
    }

    /// Copy with column `j` replaced by a constant.
    pub fn with_constant_column(&self, j: usize, value: f64) -> Self {
        let mut x = self.x.clone();
        x.column_mut(j).fill(value);
        DesignMatrix { x, names: self.names.clone() }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &DesignMatrix) -> Result<Self> {
        if self.ncols() != other.ncols() {
            return Err(Error::Dimension("stacked designs differ in width".into()));
        }
        let (n1, n2, p) = (self.nrows(), other.nrows(), self.ncols());
        let x = DMatrix::from_fn(n1 + n2, p, |i, j| {
            if i < n1 {
                self.x[(i, j)]
            } else {
                other.x[(i - n1, j)]
            }
        });
        Ok(DesignMatrix { x, names: self.names.clone() })
    }

    /// Rows selected by `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        DesignMatrix {
            x: self.x.select_rows(idx),
            names: self.names.clone(),
        }
    }

    /// `X beta + offset`.
    pub fn linear_predictor(&self, beta: &DVector<f64>, offsets: &[f64]) -> Vec<f64> {
        let mut eta = &self.x * beta;
        for (e, o) in eta.iter_mut().zip(offsets) {
            *e += o;
        }
        eta.data.into()
    }

    /// Names of columns that are linear combinations of earlier columns,
    /// judged on rows with positive weight.
    pub fn collinear_columns(&self, weights: &[f64], floor: f64) -> Vec<String> {
        let rows: Vec<usize> = (0..self.nrows()).filter(|&i| weights[i] >= floor).collect();
        let sw: Vec<f64> = rows.iter().map(|&i| weights[i].sqrt()).collect();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut bad = Vec::new();
        for j in 0..self.ncols() {
            let col = self.column(j);
            let mut v: Vec<f64> = rows.iter().zip(&sw).map(|(&i, s)| col[i] * s).collect();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 {
                bad.push(self.names[j].clone());
            } else {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        bad
    }
}
