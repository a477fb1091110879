//! Pairwise IsSameObject probes, class probes and the positional probe.
//!
//! | family | parameters | score |
//! |---|---|---|
//! | linear | `w` (1×d), `b` | `σ(w·x + w·y + b)` |
//! | diag | `w` (1×d), `b` | `σ(Σ wᵢ xᵢ yᵢ + b)` |
//! | quad | `W` (k×d), `b` | `σ((Wx)·(Wy) + b)` |
//! | class (pointwise / pairwise) | `W_c` (N_c×d), `c` (N_c) | `softmax(W_c x + c)·softmax(W_c y + c)` |
//! | cross-layer | `W₁`, `W₂` (k×d), `b` | `σ((W₁x)·(W₂y) + b)` |
//! | position | `A` (2×d), `a` (2) | `A h + a` |

mod position;
mod train;

pub use position::{fit_position, patch_coords, train_position_probe, PositionProbe, POSITION_RIDGE};
pub use train::{
    evaluate_probe, pair_loss_and_grad, pointwise_loss_and_grad, train_pair_probe, train_pointwise_class_probe,
    write_curve_csv, CurvePoint, Evaluation, LabelKind, LayerAccuracyCurve, PairActs, PairSet, TrainOutcome,
    TrainRecipe,
};
pub(crate) use train::minibatch_adam;
pub use train::FlatParams;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{read_archive, ArchiveBuilder, TensorArchive};
use crate::tensor::{dot, sigmoid, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFamily {
    Linear,
    Diag,
    Quad,
    ClassPointwise,
    ClassPairwise,
    CrossLayer,
    Position,
}

impl ProbeFamily {
    pub const PAIRWISE: [ProbeFamily; 6] = [
        ProbeFamily::Linear,
        ProbeFamily::Diag,
        ProbeFamily::Quad,
        ProbeFamily::ClassPointwise,
        ProbeFamily::ClassPairwise,
        ProbeFamily::CrossLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeFamily::Linear => "linear",
            ProbeFamily::Diag => "diag",
            ProbeFamily::Quad => "quad",
            ProbeFamily::ClassPointwise => "class_pointwise",
            ProbeFamily::ClassPairwise => "class_pairwise",
            ProbeFamily::CrossLayer => "cross_layer",
            ProbeFamily::Position => "position",
        }
    }

    pub fn is_class(self) -> bool {
        matches!(self, ProbeFamily::ClassPointwise | ProbeFamily::ClassPairwise)
    }
}

impl fmt::Display for ProbeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ProbeFamily::Linear,
            ProbeFamily::Diag,
            ProbeFamily::Quad,
            ProbeFamily::ClassPointwise,
            ProbeFamily::ClassPairwise,
            ProbeFamily::CrossLayer,
            ProbeFamily::Position,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown probe family `{s}`")))
    }
}

/// Parameters of one trained probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub family: ProbeFamily,
    pub layer: usize,
    /// Second source layer (cross-layer probes only).
    pub layer2: Option<usize>,
    pub w: Matrix,
    pub w2: Option<Matrix>,
    /// Scalar intercept for sigmoid families, per-class offsets for class
    /// probes, per-axis offsets for the position probe.
    pub bias: Vec<f64>,
    /// Original class ids behind each class-probe output (class label kind).
    pub labels: Vec<i32>,
}

pub fn score_linear(x: &[f64], y: &[f64], w: &[f64], bias: f64) -> f64 {
    sigmoid(dot(w, x) + dot(w, y) + bias)
}

pub fn score_diag(x: &[f64], y: &[f64], w: &[f64], bias: f64) -> f64 {
    sigmoid(w.iter().zip(x).zip(y).map(|((w, a), b)| w * a * b).sum::<f64>() + bias)
}

pub fn score_quad(x: &[f64], y: &[f64], w: &Matrix, bias: f64) -> f64 {
    sigmoid(dot(&w.matvec(x), &w.matvec(y)) + bias)
}

pub fn score_cross_layer(x: &[f64], y: &[f64], w1: &Matrix, w2: &Matrix, bias: f64) -> f64 {
    sigmoid(dot(&w1.matvec(x), &w2.matvec(y)) + bias)
}

fn class_distribution(w: &Matrix, bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = w.matvec(x);
    a.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
    softmax(&a)
}

pub fn score_class(x: &[f64], y: &[f64], w: &Matrix, bias: &[f64]) -> f64 {
    dot(&class_distribution(w, bias, x), &class_distribution(w, bias, y))
}

impl ProbeWeights {
    pub fn check_shapes(&self) -> Result<()> {
        let (r, _) = (self.w.rows(), self.w.cols());
        let ok = match self.family {
            ProbeFamily::Linear | ProbeFamily::Diag => r == 1 && self.bias.len() == 1 && self.w2.is_none(),
            ProbeFamily::Quad => r >= 1 && self.bias.len() == 1 && self.w2.is_none(),
            ProbeFamily::ClassPointwise | ProbeFamily::ClassPairwise => {
                r >= 1 && self.bias.len() == r && self.w2.is_none()
            }
            ProbeFamily::CrossLayer => {
                self.bias.len() == 1
                    && self.layer2.is_some()
                    && self
                        .w2
                        .as_ref()
                        .is_some_and(|w2| w2.rows() == r && w2.cols() == self.w.cols())
            }
            ProbeFamily::Position => r == 2 && self.bias.len() == 2 && self.w2.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "parameter shapes do not fit the {} family: W {}×{}, bias {}",
                self.family,
                self.w.rows(),
                self.w.cols(),
                self.bias.len()
            )))
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn expect_family(&self, family: ProbeFamily) -> Result<()> {
        if self.family == family {
            Ok(())
        } else {
            Err(Error::WrongFamily {
                expected: family.to_string(),
                found: self.family.to_string(),
            })
        }
    }

    pub fn expect_layer(&self, layer: usize) -> Result<()> {
        if self.layer == layer {
            Ok(())
        } else {
            Err(Error::LayerMismatch {
                probe: self.layer,
                requested: layer,
            })
        }
    }

    /// Score of one pair; `y` comes from the second layer for cross-layer probes.
    pub fn score(&self, x: &[f64], y: &[f64]) -> f64 {
        let b = self.bias.first().copied().unwrap_or(0.0);
        match self.family {
            ProbeFamily::Linear => score_linear(x, y, self.w.row(0), b),
            ProbeFamily::Diag => score_diag(x, y, self.w.row(0), b),
            ProbeFamily::Quad => score_quad(x, y, &self.w, b),
            ProbeFamily::ClassPointwise | ProbeFamily::ClassPairwise => score_class(x, y, &self.w, &self.bias),
            ProbeFamily::CrossLayer => score_cross_layer(x, y, &self.w, self.w2.as_ref().expect("checked"), b),
            ProbeFamily::Position => f64::NAN,
        }
    }

    /// All-pairs score matrix `S[i][j] = score(x_i, y_j)`.
    pub fn score_matrix(&self, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        let d = self.dim();
        if x.cols() != d || y.cols() != d {
            return Err(Error::shape("probe input", &[d], &[x.cols(), y.cols()]));
        }
        let b = self.bias.first().copied().unwrap_or(0.0);
        let sig = |z: Matrix| z.map(|v| sigmoid(v + b));
        Ok(match self.family {
            ProbeFamily::Linear => {
                let u = x.matvec(self.w.row(0));
                let v = y.matvec(self.w.row(0));
                Matrix::from_fn(x.rows(), y.rows(), |i, j| sigmoid(u[i] + v[j] + b))
            }
            ProbeFamily::Diag => {
                let xs = Matrix::from_fn(x.rows(), d, |i, m| x[(i, m)] * self.w[(0, m)]);
                sig(xs.matmul_t(y))
            }
            ProbeFamily::Quad => {
                let px = x.matmul_t(&self.w);
                let py = y.matmul_t(&self.w);
                sig(px.matmul_t(&py))
            }
            ProbeFamily::CrossLayer => {
                let px = x.matmul_t(&self.w);
                let py = y.matmul_t(self.w2.as_ref().expect("checked"));
                sig(px.matmul_t(&py))
            }
            ProbeFamily::ClassPointwise | ProbeFamily::ClassPairwise => {
                let p = self.class_probabilities(x);
                let q = self.class_probabilities(y);
                p.matmul_t(&q)
            }
            ProbeFamily::Position => {
                return Err(Error::WrongFamily {
                    expected: "a pairwise family".into(),
                    found: "position".into(),
                })
            }
        })
    }

    /// Row-wise class distributions `softmax(W_c x + c)`.
    pub fn class_probabilities(&self, x: &Matrix) -> Matrix {
        let logits = x.matmul_t(&self.w);
        let mut out = Matrix::zeros(x.rows(), self.w.rows());
        for i in 0..x.rows() {
            let mut a = logits.row(i).to_vec();
            a.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
            out.row_mut(i).copy_from_slice(&softmax(&a));
        }
        out
    }

    /// Projection into probe space: `Wh` for each row (quad / cross-layer first map).
    pub fn project(&self, h: &Matrix) -> Matrix {
        h.matmul_t(&self.w)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut p = self.w.data().to_vec();
        if let Some(w2) = &self.w2 {
            p.extend_from_slice(w2.data());
        }
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn unflatten(&mut self, p: &[f64]) {
        let n1 = self.w.data().len();
        self.w.data_mut().copy_from_slice(&p[..n1]);
        let mut off = n1;
        if let Some(w2) = &mut self.w2 {
            let n2 = w2.data().len();
            w2.data_mut().copy_from_slice(&p[off..off + n2]);
            off += n2;
        }
        self.bias.copy_from_slice(&p[off..]);
    }

    pub fn num_params(&self) -> usize {
        self.w.data().len() + self.w2.as_ref().map_or(0, |w| w.data().len()) + self.bias.len()
    }

    pub fn to_builder(&self) -> Result<ArchiveBuilder> {
        let mut b = ArchiveBuilder::new();
        b.set_metadata(
            "probe",
            json!({
                "family": self.family,
                "layer": self.layer,
                "layer2": self.layer2,
                "labels": self.labels,
            }),
        );
        b.add("probe/W", self.w.to_tensor())?;
        if let Some(w2) = &self.w2 {
            b.add("probe/W2", w2.to_tensor())?;
        }
        b.add("probe/bias", Matrix::from_vec(1, self.bias.len(), self.bias.clone())?.to_tensor())?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_builder()?.write(path)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            family: ProbeFamily,
            layer: usize,
            layer2: Option<usize>,
            #[serde(default)]
            labels: Vec<i32>,
        }
        let meta: Meta = serde_json::from_value(
            a.metadata()
                .get("probe")
                .cloned()
                .ok_or_else(|| Error::MissingTensor("probe metadata".into()))?,
        )?;
        let w = Matrix::from_tensor(&a.get("probe/W")?)?;
        let w2 = a.get_opt("probe/W2")?.map(|t| Matrix::from_tensor(&t)).transpose()?;
        let bias = Matrix::from_tensor(&a.get("probe/bias")?)?.into_data();
        let p = Self {
            family: meta.family,
            layer: meta.layer,
            layer2: meta.layer2,
            w,
            w2,
            bias,
            labels: meta.labels,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scores() {
        assert!((score_linear(&[2.0, 1.0], &[0.0, 3.0], &[1.0, -1.0], 0.0) - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((score_diag(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 1.0], 0.0) - sigmoid(11.0)).abs() < 1e-15);
        assert!((sigmoid(11.0) - 0.999_983_298_578_152).abs() < 1e-12);
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!((score_quad(&[2.0, 3.0], &[4.0, -1.0], &w, 0.0) - 0.999_664_649_869_533_9).abs() < 1e-12);
        assert_eq!(score_linear(&[5.0], &[-2.0], &[0.0], 0.0), 0.5);
    }

    #[test]
    fn class_scores() {
        let z = Matrix::zeros(4, 3);
        assert!((score_class(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0], &z, &[0.0; 4]) - 0.25).abs() < 1e-15);
        let w = Matrix::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap();
        assert!(score_class(&[1.0, 0.0], &[2.0, 0.0], &w, &[0.0, 0.0]) > 1.0 - 1e-12);
        assert!(score_class(&[1.0, 0.0], &[0.0, 1.0], &w, &[0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn cross_layer_reduces_to_quad() {
        let w = Matrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.1 - 0.3);
        let (x, y) = ([0.5, -1.0, 2.0, 0.1], [1.0, 0.2, -0.3, 0.7]);
        assert_eq!(score_cross_layer(&x, &y, &w, &w, 0.2), score_quad(&x, &y, &w, 0.2));
        assert_eq!(score_cross_layer(&x, &y, &w, &Matrix::zeros(3, 4), 0.0), 0.5);
    }

    #[test]
    fn score_matrix_matches_pointwise() {
        let x = Matrix::from_fn(5, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 * 0.3 - 1.0);
        let y = Matrix::from_fn(3, 4, |i, j| ((i * 2 + j) % 5) as f64 * 0.25 - 0.5);
        for family in ProbeFamily::PAIRWISE {
            let (rows, nb) = match family {
                ProbeFamily::Linear | ProbeFamily::Diag => (1, 1),
                ProbeFamily::ClassPointwise | ProbeFamily::ClassPairwise => (3, 3),
                _ => (2, 1),
            };
            let p = ProbeWeights {
                family,
                layer: 0,
                layer2: (family == ProbeFamily::CrossLayer).then_some(1),
                w: Matrix::from_fn(rows, 4, |i, j| (i as f64 - j as f64) * 0.2),
                w2: (family == ProbeFamily::CrossLayer).then(|| Matrix::from_fn(rows, 4, |i, j| (i * j) as f64 * 0.1)),
                bias: (0..nb).map(|i| 0.1 * i as f64 - 0.05).collect(),
                labels: vec![],
            };
            p.check_shapes().unwrap();
            let s = p.score_matrix(&x, &y).unwrap();
            for i in 0..5 {
                for j in 0..3 {
                    assert!((s[(i, j)] - p.score(x.row(i), y.row(j))).abs() < 1e-12, "{family}");
                }
            }
        }
    }

    #[test]
    fn archive_round_trip() {
        let p = ProbeWeights {
            family: ProbeFamily::CrossLayer,
            layer: 15,
            layer2: Some(18),
            w: Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.5),
            w2: Some(Matrix::from_fn(2, 3, |i, j| (i * j) as f64 * 0.25)),
            bias: vec![-1.5],
            labels: vec![],
        };
        let a = TensorArchive::from_bytes(p.to_builder().unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(ProbeWeights::from_archive(&a).unwrap(), p);
        assert_eq!("cross_layer".parse::<ProbeFamily>().unwrap(), ProbeFamily::CrossLayer);
    }
}
