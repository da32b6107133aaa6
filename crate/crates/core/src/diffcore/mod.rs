//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The op set is closed: exactly what the unimodal models, the uncertainty
//! estimators, fusion and the training objective need. There is no general
//! broadcasting; the two broadcast patterns in use (bias rows and per-sample
//! weight columns) are explicit ops.
//!
//! ```
//! use qmf_core::diffcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap());
//! let b = tape.constant(Matrix::from_rows(&[vec![2.0], vec![5.0]]).unwrap());
//! let prod = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(prod);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap().as_slice(), &[2.0, 5.0]);
//! ```

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{lse_and_softmax, sigmoid, softplus};

use crate::error::{Error, Result};

/// Per-row cross-entropy `-ln softmax(z)[y]`, evaluated off-tape.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != logits.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= logits.cols() {
                return Err(Error::Label {
                    label: y as i64,
                    classes: logits.cols(),
                });
            }
            let (lse, _) = lse_and_softmax(logits.row(r), 1.0);
            Ok(lse - logits.get(r, y))
        })
        .collect()
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
