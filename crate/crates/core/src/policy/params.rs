use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::rng;

/// Widths of every tensor in the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyDims {
    /// Frame token width.
    pub d_in: usize,
    /// Query vector width.
    pub d_q: usize,
    /// Frame embedding width.
    pub d_e: usize,
    /// Key/query/value width.
    pub d_model: usize,
    /// Selection state width.
    pub d_g: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_q: 16,
            d_e: 32,
            d_model: 32,
            d_g: 32,
        }
    }
}

impl PolicyDims {
    pub fn validate(&self) -> Result<()> {
        if [self.d_in, self.d_q, self.d_e, self.d_model, self.d_g].contains(&0) {
            return Err(invalid_config(format!("all policy dims must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// All learnable tensors of the selection scorer.
///
/// Matrices map column vectors: `w_k` takes a `d_e` embedding to a `d_model`
/// key, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Token input map of the frame aggregator, `d_e x d_in`.
    pub embed_in: DMatrix<f64>,
    /// Recurrent map of the frame aggregator, `d_e x d_e`.
    pub embed_rec: DMatrix<f64>,
    /// Key head, `d_model x d_e`.
    pub w_k: DMatrix<f64>,
    /// Query head, `d_model x d_g`.
    pub w_q: DMatrix<f64>,
    /// Value head, `d_model x d_e`.
    pub w_v: DMatrix<f64>,
    pub b_v: DVector<f64>,
    /// State recurrence, `d_g x d_g`.
    pub w_g: DMatrix<f64>,
    /// Selected-value input map, `d_g x d_model`.
    pub w_u: DMatrix<f64>,
    /// Query conditioning, `d_g x d_q`.
    pub w_c: DMatrix<f64>,
    /// Start-of-selection embedding.
    pub u0: DVector<f64>,
    /// Logit scale.
    pub s: f64,
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 11] = [
    "embed_in", "embed_rec", "w_k", "w_q", "w_v", "b_v", "w_g", "w_u", "w_c", "u0", "s",
];

/// Tensors treated as the pretrained backbone block for learning-rate purposes.
pub fn is_backbone(name: &str) -> bool {
    matches!(name, "embed_in" | "embed_rec")
}

/// Tensors exempt from weight decay.
pub fn skips_weight_decay(name: &str) -> bool {
    matches!(name, "b_v" | "u0" | "s")
}

/// Semi-orthogonal `rows x cols` matrix scaled by `gain`.
///
/// QR of a Gaussian matrix with the sign of `diag(R)` folded into `Q`, so
/// the result is Haar-distributed; rows or columns (whichever are fewer)
/// are orthonormal.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    q * gain
}

/// Gain of the recurrent frame-aggregator matrix.
pub const EMBED_REC_GAIN: f64 = 0.5;
/// Gain of the value head.
pub const VALUE_GAIN: f64 = 0.1;
/// Standard deviation of the start embedding.
pub const START_STD: f64 = 0.02;

/// Start-of-selection embedding drawn from `Normal(0, START_STD²)`.
pub fn start_embedding(d_g: usize, seed: u64) -> DVector<f64> {
    let mut r = rng::stream("init", &[seed.into(), "u0".into()]);
    let start = Normal::new(0.0, START_STD).expect("valid std");
    DVector::from_fn(d_g, |_, _| r.sample(start))
}

impl PolicyParams {
    /// Freshly initialised parameters, deterministic for `(dims, seed)`.
    pub fn init(dims: PolicyDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ortho = |name: &str, rows: usize, cols: usize, gain: f64| {
            let mut r = rng::stream("init", &[seed.into(), name.into()]);
            orthogonal(rows, cols, gain, &mut r)
        };
        let u0 = start_embedding(dims.d_g, seed);
        Ok(Self {
            embed_in: ortho("embed_in", dims.d_e, dims.d_in, 1.0),
            embed_rec: ortho("embed_rec", dims.d_e, dims.d_e, EMBED_REC_GAIN),
            w_k: ortho("w_k", dims.d_model, dims.d_e, 1.0),
            w_q: ortho("w_q", dims.d_model, dims.d_g, 1.0),
            w_v: ortho("w_v", dims.d_model, dims.d_e, VALUE_GAIN),
            b_v: DVector::zeros(dims.d_model),
            w_g: ortho("w_g", dims.d_g, dims.d_g, 1.0),
            w_u: ortho("w_u", dims.d_g, dims.d_model, 1.0),
            w_c: ortho("w_c", dims.d_g, dims.d_q, 1.0),
            u0,
            s: 1.0,
        })
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            d_in: self.embed_in.ncols(),
            d_q: self.w_c.ncols(),
            d_e: self.embed_in.nrows(),
            d_model: self.w_k.nrows(),
            d_g: self.w_g.nrows(),
        }
    }

    /// All-zero tensors of the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Self {
            embed_in: z(&self.embed_in),
            embed_rec: z(&self.embed_rec),
            w_k: z(&self.w_k),
            w_q: z(&self.w_q),
            w_v: z(&self.w_v),
            b_v: DVector::zeros(self.b_v.len()),
            w_g: z(&self.w_g),
            w_u: z(&self.w_u),
            w_c: z(&self.w_c),
            u0: DVector::zeros(self.u0.len()),
            s: 0.0,
        }
    }

    /// Row-major shape of each tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let m = |x: &DMatrix<f64>| vec![x.nrows(), x.ncols()];
        vec![
            ("embed_in", m(&self.embed_in)),
            ("embed_rec", m(&self.embed_rec)),
            ("w_k", m(&self.w_k)),
            ("w_q", m(&self.w_q)),
            ("w_v", m(&self.w_v)),
            ("b_v", vec![self.b_v.len()]),
            ("w_g", m(&self.w_g)),
            ("w_u", m(&self.w_u)),
            ("w_c", m(&self.w_c)),
            ("u0", vec![self.u0.len()]),
            ("s", vec![]),
        ]
    }

    /// Raw storage of each tensor (column-major for matrices).
    pub fn blocks(&self) -> [(&'static str, &[f64]); 11] {
        [
            ("embed_in", self.embed_in.as_slice()),
            ("embed_rec", self.embed_rec.as_slice()),
            ("w_k", self.w_k.as_slice()),
            ("w_q", self.w_q.as_slice()),
            ("w_v", self.w_v.as_slice()),
            ("b_v", self.b_v.as_slice()),
            ("w_g", self.w_g.as_slice()),
            ("w_u", self.w_u.as_slice()),
            ("w_c", self.w_c.as_slice()),
            ("u0", self.u0.as_slice()),
            ("s", std::slice::from_ref(&self.s)),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 11] {
        [
            ("embed_in", self.embed_in.as_mut_slice()),
            ("embed_rec", self.embed_rec.as_mut_slice()),
            ("w_k", self.w_k.as_mut_slice()),
            ("w_q", self.w_q.as_mut_slice()),
            ("w_v", self.w_v.as_mut_slice()),
            ("b_v", self.b_v.as_mut_slice()),
            ("w_g", self.w_g.as_mut_slice()),
            ("w_u", self.w_u.as_mut_slice()),
            ("w_c", self.w_c.as_mut_slice()),
            ("u0", self.u0.as_mut_slice()),
            ("s", std::slice::from_mut(&mut self.s)),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }
}
