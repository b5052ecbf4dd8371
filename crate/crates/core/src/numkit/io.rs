//! Plain-text matrix format.
//!
//! ```text
//! rows cols
//! v00 v01 ...
//! v10 v11 ...
//! ```
//!
//! Values are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GoatError, Result};
use crate::numkit::Matrix;

impl Matrix {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.rows(), self.cols());
        for i in 0..self.rows() {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| GoatError::Parse(format!("missing {what} in matrix header")))?
                .parse::<usize>()
                .map_err(|e| GoatError::Parse(format!("bad {what}: {e}")))
        };
        let rows = dim("rows")?;
        let cols = dim("cols")?;
        let data = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| GoatError::Parse(format!("bad value {t:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if data.len() != rows * cols {
            return Err(GoatError::Parse(format!(
                "expected {} values for a {rows}x{cols} matrix, found {}",
                rows * cols,
                data.len()
            )));
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_and_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 0.1], vec![-2.5, 3.0]]).unwrap();
        let text = m.to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("2 2"));
        assert_eq!(
            lines.next(),
            Some("1.0000000000000000e0 1.0000000000000001e-1")
        );
    }

    #[test]
    fn rejects_truncated_input() {
        assert!(matches!(
            Matrix::from_text("2 2\n1 2 3"),
            Err(GoatError::Parse(_))
        ));
        assert!(matches!(
            Matrix::from_text("2 x\n"),
            Err(GoatError::Parse(_))
        ));
        assert!(Matrix::from_text("1 1\nnan").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, scale in -300i32..300) {
            let m = Rng::new(seed).normal_matrix(rows, cols, 10f64.powi(scale));
            let back = Matrix::from_text(&m.to_text()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
