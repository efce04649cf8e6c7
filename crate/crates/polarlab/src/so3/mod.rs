//! An SO(3)-equivariant point-cloud regression testbed.
//!
//! The model maps a cloud of `N` 3-D points to one real number, built so
//! that rotating every point leaves the prediction unchanged for *any*
//! parameter values. Features live in two channels families per point:
//! rotation-invariant scalars and rotation-covariant 3-vectors. Each layer
//! applies
//!
//! 1. distance-weighted message passing on the scalars,
//! 2. a scalar mixer `w00` plus a merge of vector dot products through
//!    `cg_proj`,
//! 3. a vector mixer `w11` acting as `B ⊗ I₃` (one scalar weight per
//!    channel pair, shared across the 3 components — `m₁²` parameters,
//!    not `9m₁²`),
//! 4. tanh on scalars and a norm gate `v ← v·σ(γ‖v‖)` on vectors,
//! 5. a residual add when input and output widths agree.
//!
//! The readout mean-pools scalar channels over points and applies an
//! affine map. Targets are `λ_max(XᵀX/N)`, exactly rotation-invariant.
//!
//! Everything is differentiated by hand; `net::backward_batch` returns
//! exact reverse-mode gradients for every trainable array.

mod net;
mod train;

pub use net::{
    backward_batch, finite_difference_max_error, forward_batch, forward_one, ForwardCache,
};
pub use train::{evaluate, train, EpochRecord, OptimizerKind, RunRecord, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{gaussian_matrix, haar_orthogonal, DenseMatrix, Rng};
use crate::optim::ParamSplit;

/// Number of radial-basis features on each pairwise distance.
pub const N_RBF: usize = 8;
/// Radial-basis centers span `[0, RBF_MAX_CENTER]`.
pub const RBF_MAX_CENTER: f64 = 4.0;
/// Gaussian width of each radial-basis bump.
pub const RBF_WIDTH: f64 = 0.5;
/// Offset inside the vector-norm square root, keeping the gate smooth
/// at the origin.
pub const NORM_EPS: f64 = 1e-12;

/// One training example: `N` unit-free 3-D positions and the invariant
/// target `λ_max(XᵀX/N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    /// `N×3` positions, one point per row.
    pub points: DenseMatrix,
    pub target: f64,
}

impl PointCloud {
    /// Builds a cloud from raw positions, computing the target.
    pub fn from_points(points: DenseMatrix) -> Result<Self> {
        let target = compute_target(&points)?;
        Ok(PointCloud { points, target })
    }

    pub fn n_points(&self) -> usize {
        self.points.rows()
    }
}

/// Largest eigenvalue of the 3×3 Gram matrix `XᵀX/N`.
///
/// Solved in closed form (trigonometric solution of the characteristic
/// cubic for a symmetric 3×3) and polished with a few Newton steps on the
/// characteristic polynomial, which brings the root to full double
/// precision.
pub fn compute_target(points: &DenseMatrix) -> Result<f64> {
    if points.cols() != 3 || points.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "point cloud must be N×3 with N ≥ 1, got {}x{}",
            points.rows(),
            points.cols()
        )));
    }
    let n = points.rows() as f64;
    let gram = points.tr_matmul(points)?.scale(1.0 / n);
    Ok(sym3_lambda_max(&gram))
}

/// Largest eigenvalue of a symmetric 3×3 matrix.
fn sym3_lambda_max(a: &DenseMatrix) -> f64 {
    debug_assert_eq!(a.shape(), (3, 3));
    let (a00, a01, a02) = (a.get(0, 0), a.get(0, 1), a.get(0, 2));
    let (a11, a12, a22) = (a.get(1, 1), a.get(1, 2), a.get(2, 2));

    let off = a01 * a01 + a02 * a02 + a12 * a12;
    let q = (a00 + a11 + a22) / 3.0;
    let p2 = (a00 - q).powi(2) + (a11 - q).powi(2) + (a22 - q).powi(2) + 2.0 * off;
    if p2 <= 0.0 {
        return q; // exactly a multiple of the identity
    }
    let p = (p2 / 6.0).sqrt();
    // B = (A − qI)/p has eigenvalues 2cos(φ + 2πk/3); det(B)/2 = cos(3φ)
    let b00 = (a00 - q) / p;
    let b11 = (a11 - q) / p;
    let b22 = (a22 - q) / p;
    let (b01, b02, b12) = (a01 / p, a02 / p, a12 / p);
    let det_b = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let mut lambda = q + 2.0 * p * phi.cos();

    // Newton polish on the characteristic cubic λ³ − c2λ² + c1λ − c0
    let c2 = a00 + a11 + a22;
    let c1 = a00 * a11 + a00 * a22 + a11 * a22 - off;
    let c0 = a00 * (a11 * a22 - a12 * a12) - a01 * (a01 * a22 - a12 * a02)
        + a02 * (a01 * a12 - a11 * a02);
    for _ in 0..3 {
        let f = ((lambda - c2) * lambda + c1) * lambda - c0;
        let df = (3.0 * lambda - 2.0 * c2) * lambda + c1;
        if df.abs() < 1e-300 {
            break; // (near-)repeated root: the trig value is already exact
        }
        lambda -= f / df;
    }
    lambda
}

/// Samples `n_clouds` clouds of `n_points` i.i.d. Gaussian points, each
/// rescaled by a per-cloud radius drawn uniformly from `[0.5, 2]` to
/// spread the targets.
pub fn generate_dataset(n_clouds: usize, n_points: usize, rng: &mut Rng) -> Result<Vec<PointCloud>> {
    if n_points < 3 {
        return Err(Error::BadFlag(format!(
            "clouds need at least 3 points, got {n_points}"
        )));
    }
    let mut out = Vec::with_capacity(n_clouds);
    for _ in 0..n_clouds {
        let mut x = gaussian_matrix(n_points, 3, rng);
        let radius = rng.uniform_range(0.5, 2.0);
        x.scale_in_place(radius);
        out.push(PointCloud::from_points(x)?);
    }
    Ok(out)
}

/// A Haar-random rotation: a Haar orthogonal 3×3 restricted to
/// determinant +1 by flipping one column when needed.
pub fn random_rotation(rng: &mut Rng) -> DenseMatrix {
    let mut r = haar_orthogonal(3, rng);
    let det = r.get(0, 0) * (r.get(1, 1) * r.get(2, 2) - r.get(1, 2) * r.get(2, 1))
        - r.get(0, 1) * (r.get(1, 0) * r.get(2, 2) - r.get(1, 2) * r.get(2, 0))
        + r.get(0, 2) * (r.get(1, 0) * r.get(2, 1) - r.get(1, 1) * r.get(2, 0));
    if det < 0.0 {
        for i in 0..3 {
            let v = r.get(i, 2);
            r.set(i, 2, -v);
        }
    }
    r
}

/// Applies the rotation to every point: row `xᵢᵀ` becomes `xᵢᵀRᵀ`. The
/// target is invariant, so it carries over unchanged.
pub fn rotate_cloud(cloud: &PointCloud, r: &DenseMatrix) -> Result<PointCloud> {
    if r.shape() != (3, 3) {
        return Err(Error::ShapeMismatch(format!(
            "rotation must be 3×3, got {}x{}",
            r.rows(),
            r.cols()
        )));
    }
    Ok(PointCloud {
        points: cloud.points.matmul_tr(r)?,
        target: cloud.target,
    })
}

/// Squared-error loss and its derivative with respect to the prediction.
pub fn mse_loss(pred: f64, target: f64) -> (f64, f64) {
    let e = pred - target;
    (e * e, 2.0 * e)
}

/// Trainable arrays of one equivariant layer mapping `p` input channels
/// (per family) to `m` output channels.
///
/// Biases, gains, and gates are stored as 1-row matrices so that every
/// parameter is a [`DenseMatrix`] and the optimizer plumbing is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct So3LayerParams {
    /// Scalar mixer, `m×p`.
    pub w00: DenseMatrix,
    /// Vector-mixer multiplicity matrix, `m×p`; acts as `w11 ⊗ I₃`.
    pub w11: DenseMatrix,
    /// Merge of `[scalars | vector dot products]`, `m×(m + m(m+1)/2)`.
    pub cg_w: DenseMatrix,
    /// `1×m`.
    pub cg_b: DenseMatrix,
    /// First message-MLP layer on `[s_j | φ(d_ij)]`, `m×(p+8)`.
    pub msg_w1: DenseMatrix,
    /// `1×m`.
    pub msg_b1: DenseMatrix,
    /// Second message-MLP layer, `m×m`.
    pub msg_w2: DenseMatrix,
    /// `1×m`.
    pub msg_b2: DenseMatrix,
    /// Norm-gate gains γ, `1×m`.
    pub gate: DenseMatrix,
}

impl So3LayerParams {
    fn new(p: usize, m: usize, rng: &mut Rng) -> Self {
        let scaled = |rows: usize, cols: usize, rng: &mut Rng| {
            let mut w = gaussian_matrix(rows, cols, rng);
            w.scale_in_place(1.0 / (cols as f64).sqrt());
            w
        };
        let n_dot = m * (m + 1) / 2;
        So3LayerParams {
            w00: scaled(m, p, rng),
            w11: scaled(m, p, rng),
            cg_w: scaled(m, m + n_dot, rng),
            cg_b: DenseMatrix::zeros(1, m),
            msg_w1: scaled(m, p + N_RBF, rng),
            msg_b1: DenseMatrix::zeros(1, m),
            msg_w2: scaled(m, m, rng),
            msg_b2: DenseMatrix::zeros(1, m),
            gate: DenseMatrix::from_fn(1, m, |_, _| 1.0),
        }
    }

    /// Input channels per family.
    pub fn in_channels(&self) -> usize {
        self.w00.cols()
    }

    /// Output channels per family.
    pub fn out_channels(&self) -> usize {
        self.w00.rows()
    }
}

/// The full model: equivariant layers plus an invariant readout head.
/// Layer 0 takes the single initial channel pair (`s = ‖x‖²`, `v = x`);
/// all later multiplicities equal `hidden_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct So3Model {
    pub layers: Vec<So3LayerParams>,
    /// `1×hc`.
    pub readout_w: DenseMatrix,
    /// `1×1`.
    pub readout_b: DenseMatrix,
    pub hidden_channels: usize,
    /// Debug-only negative control: `(layer index, full (3m)×(3p)
    /// matrix)` replacing that layer's `w11 ⊗ I₃` action with an
    /// unconstrained mix of vector components, which destroys
    /// equivariance. Forward-only; [`backward_batch`] rejects it.
    #[serde(skip)]
    pub debug_full_vector_mix: Option<(usize, DenseMatrix)>,
}

impl So3Model {
    /// Gaussian init with variance `1/fan_in` for every weight matrix,
    /// zero biases, unit gate gains.
    pub fn new(hidden_channels: usize, n_layers: usize, rng: &mut Rng) -> Result<Self> {
        if hidden_channels == 0 {
            return Err(Error::BadFlag("hidden_channels must be positive".into()));
        }
        let hc = hidden_channels;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = if l == 0 { 1 } else { hc };
            layers.push(So3LayerParams::new(p, hc, rng));
        }
        // with zero layers the readout pools the single initial scalar
        let pool_width = if n_layers == 0 { 1 } else { hc };
        let mut readout_w = gaussian_matrix(1, pool_width, rng);
        readout_w.scale_in_place(1.0 / (pool_width as f64).sqrt());
        Ok(So3Model {
            layers,
            readout_w,
            readout_b: DenseMatrix::zeros(1, 1),
            hidden_channels: hc,
            debug_full_vector_mix: None,
        })
    }

    /// Installs the equivariance-breaking debug mixer at `layer`: a
    /// Gaussian `(3m)×(3p)` matrix at the usual `1/fan_in` scale.
    pub fn inject_broken_vector_mix(&mut self, layer: usize, rng: &mut Rng) -> Result<()> {
        let lp = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::BadFlag(format!("no layer {layer}")))?;
        let (p, m) = (lp.in_channels(), lp.out_channels());
        let mut w = gaussian_matrix(3 * m, 3 * p, rng);
        w.scale_in_place(1.0 / (3.0 * p as f64).sqrt());
        self.debug_full_vector_mix = Some((layer, w));
        Ok(())
    }

    /// Stable identifiers of all trainable arrays, in forward order.
    pub fn param_ids(&self) -> Vec<String> {
        self.params().into_iter().map(|(id, _, _)| id).collect()
    }

    /// `(id, eligible for the matrix step, array)` for every trainable
    /// array. 2-D weight matrices (mixers, merges, MLP weights, readout
    /// weight) are matrix-eligible; biases and gate gains are auxiliary.
    pub fn params(&self) -> Vec<(String, bool, &DenseMatrix)> {
        let mut out = Vec::new();
        for (l, lp) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w00"), true, &lp.w00));
            out.push((format!("layer{l}.w11"), true, &lp.w11));
            out.push((format!("layer{l}.cg_w"), true, &lp.cg_w));
            out.push((format!("layer{l}.cg_b"), false, &lp.cg_b));
            out.push((format!("layer{l}.msg_w1"), true, &lp.msg_w1));
            out.push((format!("layer{l}.msg_b1"), false, &lp.msg_b1));
            out.push((format!("layer{l}.msg_w2"), true, &lp.msg_w2));
            out.push((format!("layer{l}.msg_b2"), false, &lp.msg_b2));
            out.push((format!("layer{l}.gate"), false, &lp.gate));
        }
        out.push(("readout.w".to_string(), true, &self.readout_w));
        out.push(("readout.b".to_string(), false, &self.readout_b));
        out
    }

    /// Mutable variant of [`So3Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, bool, &mut DenseMatrix)> {
        let mut out: Vec<(String, bool, &mut DenseMatrix)> = Vec::new();
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.w00"), true, &mut lp.w00));
            out.push((format!("layer{l}.w11"), true, &mut lp.w11));
            out.push((format!("layer{l}.cg_w"), true, &mut lp.cg_w));
            out.push((format!("layer{l}.cg_b"), false, &mut lp.cg_b));
            out.push((format!("layer{l}.msg_w1"), true, &mut lp.msg_w1));
            out.push((format!("layer{l}.msg_b1"), false, &mut lp.msg_b1));
            out.push((format!("layer{l}.msg_w2"), true, &mut lp.msg_w2));
            out.push((format!("layer{l}.msg_b2"), false, &mut lp.msg_b2));
            out.push((format!("layer{l}.gate"), false, &mut lp.gate));
        }
        out.push(("readout.w".to_string(), true, &mut self.readout_w));
        out.push(("readout.b".to_string(), false, &mut self.readout_b));
        out
    }

    /// The matrix/auxiliary split over all trainable arrays.
    pub fn split_parameters(&self) -> ParamSplit {
        let mut matrix_group = Vec::new();
        let mut aux_group = Vec::new();
        for (id, is_matrix, _) in self.params() {
            if is_matrix {
                matrix_group.push(id);
            } else {
                aux_group.push(id);
            }
        }
        ParamSplit {
            matrix_group,
            aux_group,
        }
    }
}

/// Maximum relative prediction change under `n_rotations` Haar
/// rotations of the cloud: `|f(RX) − f(X)| / (|f(X)| + 1e-9)`.
pub fn invariance_check(
    model: &So3Model,
    cloud: &PointCloud,
    n_rotations: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let (base, _) = forward_one(model, cloud)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n_rotations {
        let r = random_rotation(rng);
        let rotated = rotate_cloud(cloud, &r)?;
        let (pred, _) = forward_one(model, &rotated)?;
        worst = worst.max((pred - base).abs() / (base.abs() + 1e-9));
    }
    Ok(worst)
}
