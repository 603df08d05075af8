use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Layer sizes and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_statutes: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub attn_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub positive_weight: f64,
    pub negative_weight: f64,
    pub max_sentences: usize,
}

impl ModelConfig {
    /// Production sizes: 3 heads over 768-dim sentence vectors, 100-dim
    /// attention space, a 1536-unit shared hidden layer, dropout 0.1 and
    /// class weights 3 (statute applies) / 1 (does not).
    pub fn new(num_statutes: usize) -> Self {
        Self {
            num_statutes,
            heads: 3,
            input_dim: 768,
            attn_dim: 100,
            hidden_dim: 1536,
            dropout: 0.1,
            positive_weight: 3.0,
            negative_weight: 1.0,
            max_sentences: crate::corpus::DEFAULT_MAX_SENTENCES,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_statutes", self.num_statutes),
            ("heads", self.heads),
            ("input_dim", self.input_dim),
            ("attn_dim", self.attn_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_sentences", self.max_sentences),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.positive_weight > 0.0 && self.negative_weight > 0.0) {
            return Err(ModelError::Config("class weights must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated per-statute case representation.
    pub fn concat_dim(&self) -> usize {
        self.heads * self.input_dim
    }
}

/// Query/key projections of one attention head of one statute.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
}

/// Every learned tensor of the classifier. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct AoSParameters {
    /// Indexed `[statute][head]`.
    pub heads: Vec<Vec<HeadParams>>,
    /// Hidden layer shared by all statutes.
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    /// Per-statute two-way output layer.
    pub w_o: Vec<Array2<f64>>,
    pub b_o: Vec<Array1<f64>>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl AoSParameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let head = || HeadParams {
            w_q: Array2::zeros((c.attn_dim, c.input_dim)),
            b_q: Array1::zeros(c.attn_dim),
            w_k: Array2::zeros((c.attn_dim, c.input_dim)),
            b_k: Array1::zeros(c.attn_dim),
        };
        Self {
            heads: (0..c.num_statutes)
                .map(|_| (0..c.heads).map(|_| head()).collect())
                .collect(),
            w_h: Array2::zeros((c.hidden_dim, c.concat_dim())),
            b_h: Array1::zeros(c.hidden_dim),
            w_o: (0..c.num_statutes)
                .map(|_| Array2::zeros((2, c.hidden_dim)))
                .collect(),
            b_o: (0..c.num_statutes).map(|_| Array1::zeros(2)).collect(),
        }
    }

    /// Glorot-uniform weights and zero biases, drawn in tensor-name order
    /// from a ChaCha8 stream seeded with `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(c);
        for statute in &mut p.heads {
            for head in statute {
                head.w_q = glorot(c.attn_dim, c.input_dim, &mut rng);
                head.w_k = glorot(c.attn_dim, c.input_dim, &mut rng);
            }
        }
        p.w_h = glorot(c.hidden_dim, c.concat_dim(), &mut rng);
        for w in &mut p.w_o {
            *w = glorot(2, c.hidden_dim, &mut rng);
        }
        p
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::zeros(config);
        let mine = self.tensors();
        let theirs = expected.tensors();
        if mine.len() != theirs.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                theirs.len(),
                mine.len()
            )));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::Shape(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// All tensors in canonical order: per statute and head `w_q`, `b_q`,
    /// `w_k`, `b_k`; then `w_h`, `b_h`; then per statute `w_o`, `b_o`.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, statute) in self.heads.iter().enumerate() {
            for (h, head) in statute.iter().enumerate() {
                out.push(TensorRef::matrix(format!("w_q.{i}.{h}"), &head.w_q));
                out.push(TensorRef::vector(format!("b_q.{i}.{h}"), &head.b_q));
                out.push(TensorRef::matrix(format!("w_k.{i}.{h}"), &head.w_k));
                out.push(TensorRef::vector(format!("b_k.{i}.{h}"), &head.b_k));
            }
        }
        out.push(TensorRef::matrix("w_h".into(), &self.w_h));
        out.push(TensorRef::vector("b_h".into(), &self.b_h));
        for (i, (w, b)) in self.w_o.iter().zip(&self.b_o).enumerate() {
            out.push(TensorRef::matrix(format!("w_o.{i}"), w));
            out.push(TensorRef::vector(format!("b_o.{i}"), b));
        }
        out
    }

    /// Mutable flat views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for statute in &mut self.heads {
            for head in statute {
                out.push(head.w_q.as_slice_mut().expect("standard layout"));
                out.push(head.b_q.as_slice_mut().expect("standard layout"));
                out.push(head.w_k.as_slice_mut().expect("standard layout"));
                out.push(head.b_k.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.w_h.as_slice_mut().expect("standard layout"));
        out.push(self.b_h.as_slice_mut().expect("standard layout"));
        for (w, b) in self.w_o.iter_mut().zip(&mut self.b_o) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let theirs: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.values.to_vec()).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += scale * b;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A named, flattened, read-only view of one parameter tensor. Vectors have
/// shape `(1, len)`.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

impl<'a> TensorRef<'a> {
    fn matrix(name: String, m: &'a Array2<f64>) -> Self {
        Self {
            name,
            shape: m.dim(),
            values: m.as_slice().expect("standard layout"),
        }
    }

    fn vector(name: String, v: &'a Array1<f64>) -> Self {
        Self {
            name,
            shape: (1, v.len()),
            values: v.as_slice().expect("standard layout"),
        }
    }
}
