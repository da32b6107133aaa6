//! Unimodal classifiers mapping one modality's features to `K` logits.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{stream_indexed, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    /// One ReLU hidden layer of the given width.
    Mlp1 { hidden: usize },
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn linear(seed: u64) -> Self {
        Self {
            architecture: Architecture::Linear,
            init_scale: 1.0,
            seed,
        }
    }

    pub fn mlp1(hidden: usize, seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp1 { hidden },
            init_scale: 1.0,
            seed,
        }
    }
}

/// `f^m`: a classifier on modality `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalModel {
    architecture: Architecture,
    modality: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
    /// Linear: `[W, b]`; MLP: `[W1, b1, W2, b2]`.
    params: Vec<Matrix>,
}

impl UnimodalModel {
    pub fn init(
        config: &ModelConfig,
        modality: usize,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::config(format!(
                "invalid model dims: d={input_dim}, K={num_classes}"
            )));
        }
        if !(config.init_scale.is_finite() && config.init_scale >= 0.0) {
            return Err(Error::config("init_scale must be finite and >= 0"));
        }
        let mut rng = stream_indexed(config.seed, Purpose::Init, modality as u32);
        let mut uniform = |rows: usize, cols: usize| {
            let a = config.init_scale / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| if a > 0.0 { rng.random_range(-a..a) } else { 0.0 })
                .collect();
            Matrix::new(rows, cols, data)
        };
        let params = match config.architecture {
            Architecture::Linear => vec![
                uniform(input_dim, num_classes)?,
                Matrix::zeros(1, num_classes),
            ],
            Architecture::Mlp1 { hidden } => {
                if hidden == 0 {
                    return Err(Error::config("mlp1 needs hidden width >= 1"));
                }
                vec![
                    uniform(input_dim, hidden)?,
                    Matrix::zeros(1, hidden),
                    uniform(hidden, num_classes)?,
                    Matrix::zeros(1, num_classes),
                ]
            }
        };
        Ok(Self {
            architecture: config.architecture,
            modality,
            input_dim,
            num_classes,
            seed: config.seed,
            params,
        })
    }

    /// Builds a model from explicit parameters (checked against the shapes).
    pub fn from_params(
        architecture: Architecture,
        modality: usize,
        params: Vec<Matrix>,
    ) -> Result<Self> {
        let (d, k) = match (architecture, params.as_slice()) {
            (Architecture::Linear, [w, b]) => {
                check_shape(b, (1, w.cols()), "bias")?;
                (w.rows(), w.cols())
            }
            (Architecture::Mlp1 { hidden }, [w1, b1, w2, b2]) => {
                check_shape(w1, (w1.rows(), hidden), "W1")?;
                check_shape(b1, (1, hidden), "b1")?;
                check_shape(w2, (hidden, w2.cols()), "W2")?;
                check_shape(b2, (1, w2.cols()), "b2")?;
                (w1.rows(), w2.cols())
            }
            _ => {
                return Err(Error::dim(format!(
                    "{} parameter matrices for {architecture:?}",
                    params.len()
                )))
            }
        };
        if d == 0 || k < 2 {
            return Err(Error::dim(format!("invalid model dims d={d}, K={k}")));
        }
        Ok(Self {
            architecture,
            modality,
            input_dim: d,
            num_classes: k,
            seed: 0,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self.architecture {
            Architecture::Linear => &["w", "b"],
            Architecture::Mlp1 { .. } => &["w1", "b1", "w2", "b2"],
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Logits for `x` (`N x d`) using parameter vars from [`Self::bind`].
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::dim(format!(
                "modality {} model expects {} features, got {cols}",
                self.modality, self.input_dim
            )));
        }
        match params {
            [w, b] => {
                let z = tape.matmul(x, *w)?;
                tape.add_row(z, *b)
            }
            [w1, b1, w2, b2] => {
                let h = tape.matmul(x, *w1)?;
                let h = tape.add_row(h, *b1)?;
                let h = tape.relu(h);
                let z = tape.matmul(h, *w2)?;
                tape.add_row(z, *b2)
            }
            _ => Err(Error::dim("parameter list does not match the architecture")),
        }
    }

    /// Off-tape logits, numerically identical to [`Self::forward`].
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, xv, &params)?;
        Ok(tape.value(z).clone())
    }

    /// Euclidean norm of all weight matrices (biases excluded).
    pub fn l2_param_norm(&self) -> f64 {
        self.params
            .iter()
            .zip(self.param_names())
            .filter(|(_, name)| name.starts_with('w'))
            .map(|(p, _)| p.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Checkpoint {
            architecture: self.architecture,
            modality: self.modality,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            seed: self.seed,
            params: self.param_names().iter().map(|s| s.to_string()).collect(),
        };
        io::write_json(&dir.join("model.json"), &manifest)?;
        for (p, name) in self.params.iter().zip(self.param_names()) {
            io::write_matrix_csv(&dir.join(format!("{name}.csv")), p, None)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let ck: Checkpoint = serde_json::from_str(&io::read_text(&path)?)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let params = ck
            .params
            .iter()
            .map(|name| io::read_matrix_csv(&dir.join(format!("{name}.csv")), false, None))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::from_params(ck.architecture, ck.modality, params)
            .map_err(|e| Error::format(format!("{}: {e}", dir.display())))?;
        if model.input_dim != ck.input_dim || model.num_classes != ck.num_classes {
            return Err(Error::format(format!(
                "{}: parameter shapes disagree with manifest dims",
                dir.display()
            )));
        }
        model.seed = ck.seed;
        Ok(model)
    }
}

fn check_shape(m: &Matrix, want: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != want {
        return Err(Error::dim(format!("{what} is {:?}, expected {want:?}", m.shape())));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    architecture: Architecture,
    modality: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
    params: Vec<String>,
}
