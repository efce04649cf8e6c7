//! Batched forward and hand-written reverse-mode backward passes.
//!
//! A batch of `B` clouds with `N` points each is processed as stacked
//! row blocks so the heavy lifting happens in a handful of large matrix
//! products instead of thousands of tiny ones:
//!
//! * scalars `S`: `(B·N)×p`, point `i` of cloud `b` at row `b·N+i`;
//! * vectors `V`: `(3·B·N)×p`, components of that point at rows
//!   `3(b·N+i)..3(b·N+i)+3`;
//! * pair features `Φ`: `(B·N²)×8`, pair `(i,j)` of cloud `b` at row
//!   `b·N² + i·N + j` (diagonal rows stay zero and carry no messages).
//!
//! The cache stores every intermediate backward needs; gradients come
//! back keyed by the same identifiers [`So3Model::params`] uses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;
use crate::so3::{PointCloud, So3Model, NORM_EPS, N_RBF, RBF_MAX_CENTER, RBF_WIDTH};

/// Smooth message-MLP activation `x/√(1+x²)`.
#[inline]
fn act(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

/// Derivative of [`act`] expressed through its output: `(1−y²)^{3/2}`.
#[inline]
fn act_deriv_from_output(y: f64) -> f64 {
    let a = (1.0 - y * y).max(0.0);
    a * a.sqrt()
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Copy of columns `c0..c1`.
fn take_cols(m: &DenseMatrix, c0: usize, c1: usize) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), c1 - c0, |i, j| m.get(i, c0 + j))
}

/// 1×cols row of column sums.
fn col_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        let src = m.row(i);
        let dst = out.row_mut(0);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    out
}

/// Intermediates of one layer, shapes as produced during the forward
/// pass over a `B`-cloud batch.
#[derive(Debug, Clone)]
struct LayerCache {
    /// `(BN)×p` scalar input.
    s_in: DenseMatrix,
    /// `(3BN)×p` vector input.
    v_in: DenseMatrix,
    /// `(BN²)×m` post-activation message features, zero on diagonal pairs.
    h_msg: DenseMatrix,
    /// `(BN)×m` per-point message aggregates.
    a_msg: DenseMatrix,
    /// `(3BN)×m` mixed vectors `Ṽ`.
    v_mixed: DenseMatrix,
    /// `(BN)×(m + m(m+1)/2)` merge input `[S_pre | dots]`.
    c_in: DenseMatrix,
    /// `(BN)×m` tanh output.
    s_act: DenseMatrix,
    /// `(BN)×m` safe vector norms per channel.
    norms: DenseMatrix,
    /// `(BN)×m` gate values `σ(γ·‖ṽ‖)`.
    gates: DenseMatrix,
}

/// Everything [`backward_batch`] needs, plus the readout intermediates.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_clouds: usize,
    n_points: usize,
    hidden_channels: usize,
    /// `(BN²)×8` radial-basis features of the pair distances.
    phi: DenseMatrix,
    layers: Vec<LayerCache>,
    /// Final scalar features entering the readout.
    s_final: DenseMatrix,
    /// Final vector features (exposed for covariance checks).
    v_final: DenseMatrix,
    /// `B×w` mean-pooled scalars.
    pool: DenseMatrix,
    preds: Vec<f64>,
    /// Set when the equivariance-breaking debug mixer was active.
    debug_forward: bool,
}

impl ForwardCache {
    pub fn predictions(&self) -> &[f64] {
        &self.preds
    }

    /// Final-layer vector features, `(3·B·N)×m`.
    pub fn final_vector_features(&self) -> &DenseMatrix {
        &self.v_final
    }

    pub fn n_clouds(&self) -> usize {
        self.n_clouds
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }
}

/// Runs the model over a batch of clouds, returning per-cloud
/// predictions and the cache for [`backward_batch`].
pub fn forward_batch(model: &So3Model, clouds: &[&PointCloud]) -> Result<(Vec<f64>, ForwardCache)> {
    let b = clouds.len();
    if b == 0 {
        return Err(Error::BadFlag("empty batch".into()));
    }
    let n = clouds[0].n_points();
    if n == 0 || clouds.iter().any(|c| c.n_points() != n || c.points.cols() != 3) {
        return Err(Error::ShapeMismatch(
            "all clouds in a batch must share one N×3 shape".into(),
        ));
    }
    let bn = b * n;

    // initial features: s = ‖x‖², v = x
    let mut s = DenseMatrix::zeros(bn, 1);
    let mut v = DenseMatrix::zeros(3 * bn, 1);
    for (cb, cloud) in clouds.iter().enumerate() {
        for i in 0..n {
            let x = cloud.points.row(i);
            let r = cb * n + i;
            s.set(r, 0, x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
            for comp in 0..3 {
                v.set(3 * r + comp, 0, x[comp]);
            }
        }
    }

    // radial-basis features of pairwise distances, diagonal rows zero
    let mut phi = DenseMatrix::zeros(b * n * n, N_RBF);
    let step = RBF_MAX_CENTER / (N_RBF - 1) as f64;
    let inv_two_w2 = 1.0 / (2.0 * RBF_WIDTH * RBF_WIDTH);
    for (cb, cloud) in clouds.iter().enumerate() {
        for i in 0..n {
            let xi = cloud.points.row(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = cloud.points.row(j);
                let d = ((xi[0] - xj[0]).powi(2)
                    + (xi[1] - xj[1]).powi(2)
                    + (xi[2] - xj[2]).powi(2))
                .sqrt();
                let row = phi.row_mut(cb * n * n + i * n + j);
                for (k, slot) in row.iter_mut().enumerate() {
                    let dc = d - step * k as f64;
                    *slot = (-dc * dc * inv_two_w2).exp();
                }
            }
        }
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, lp) in model.layers.iter().enumerate() {
        let p = lp.in_channels();
        let m = lp.out_channels();
        if s.cols() != p {
            return Err(Error::ShapeMismatch(format!(
                "layer {l} expects {p} input channels, features have {}",
                s.cols()
            )));
        }
        let n_dot = m * (m + 1) / 2;

        // (a) messages: H[b,i,j] = act(W1·[s_j | φ(d_ij)] + b1), A = Σ_j H
        let w1s = take_cols(&lp.msg_w1, 0, p);
        let w1f = take_cols(&lp.msg_w1, p, p + N_RBF);
        let t = s.matmul_tr(&w1s)?; // (BN)×m, the s_j part
        let mut h = phi.matmul_tr(&w1f)?; // (BN²)×m, the φ part
        let b1 = lp.msg_b1.row(0).to_vec();
        for cb in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let q = cb * n * n + i * n + j;
                    let hrow = h.row_mut(q);
                    if j == i {
                        hrow.fill(0.0);
                        continue;
                    }
                    let trow = t.row(cb * n + j);
                    for ((hv, &tv), &bv) in hrow.iter_mut().zip(trow).zip(&b1) {
                        *hv = act(*hv + tv + bv);
                    }
                }
            }
        }
        let mut a = DenseMatrix::zeros(bn, m);
        for cb in 0..b {
            for i in 0..n {
                let arow = a.row_mut(cb * n + i);
                for j in 0..n {
                    let hrow = h.row(cb * n * n + i * n + j);
                    for (av, &hv) in arow.iter_mut().zip(hrow) {
                        *av += hv;
                    }
                }
            }
        }

        // (b) scalar premix: S_pre = S·w00ᵀ + A·w2ᵀ + b2
        let mut s_pre = s.matmul_tr(&lp.w00)?;
        let msg = a.matmul_tr(&lp.msg_w2)?;
        s_pre.add_scaled_in_place(1.0, &msg)?;
        let b2 = lp.msg_b2.row(0).to_vec();
        for r in 0..bn {
            let row = s_pre.row_mut(r);
            for (rv, &bv) in row.iter_mut().zip(&b2) {
                *rv += bv;
            }
        }

        // (c) vector mix: Ṽ = V·w11ᵀ (w11 ⊗ I₃), or the debug full mix
        let v_mixed = match &model.debug_full_vector_mix {
            Some((dl, mix)) if *dl == l => {
                let mut out = DenseMatrix::zeros(3 * bn, m);
                for r in 0..bn {
                    for comp_out in 0..3 {
                        for c_out in 0..m {
                            let mut acc = 0.0;
                            for comp_in in 0..3 {
                                for c_in in 0..p {
                                    acc += mix.get(comp_out * m + c_out, comp_in * p + c_in)
                                        * v.get(3 * r + comp_in, c_in);
                                }
                            }
                            out.set(3 * r + comp_out, c_out, acc);
                        }
                    }
                }
                out
            }
            _ => v.matmul_tr(&lp.w11)?,
        };

        // (d) merge input: scalars then dot products over channel pairs a ≤ b
        let mut c_in = DenseMatrix::zeros(bn, m + n_dot);
        for r in 0..bn {
            let v0 = v_mixed.row(3 * r);
            let v1 = v_mixed.row(3 * r + 1);
            let v2 = v_mixed.row(3 * r + 2);
            let row = c_in.row_mut(r);
            row[..m].copy_from_slice(s_pre.row(r));
            let mut k = m;
            for ca in 0..m {
                let (va0, va1, va2) = (v0[ca], v1[ca], v2[ca]);
                for cb2 in ca..m {
                    row[k] = va0 * v0[cb2] + va1 * v1[cb2] + va2 * v2[cb2];
                    k += 1;
                }
            }
        }
        let mut s_act = c_in.matmul_tr(&lp.cg_w)?;
        let cg_b = lp.cg_b.row(0).to_vec();
        for r in 0..bn {
            let row = s_act.row_mut(r);
            for (rv, &bv) in row.iter_mut().zip(&cg_b) {
                *rv = (*rv + bv).tanh();
            }
        }

        // (e) norm gate: v ← v·σ(γ‖v‖) per channel
        let mut norms = DenseMatrix::zeros(bn, m);
        let mut gates = DenseMatrix::zeros(bn, m);
        let gamma = lp.gate.row(0).to_vec();
        let mut v_gated = v_mixed.clone();
        for r in 0..bn {
            {
                let x0 = v_mixed.row(3 * r);
                let x1 = v_mixed.row(3 * r + 1);
                let x2 = v_mixed.row(3 * r + 2);
                let nrow = norms.row_mut(r);
                for (((nv, &a0), &a1), &a2) in nrow.iter_mut().zip(x0).zip(x1).zip(x2) {
                    *nv = (a0 * a0 + a1 * a1 + a2 * a2 + NORM_EPS).sqrt();
                }
            }
            {
                let nrow = norms.row(r);
                let grow = gates.row_mut(r);
                for ((gv, &nv), &gm) in grow.iter_mut().zip(nrow).zip(&gamma) {
                    *gv = logistic(gm * nv);
                }
            }
            for comp in 0..3 {
                let vrow = v_gated.row_mut(3 * r + comp);
                for (vv, &gv) in vrow.iter_mut().zip(gates.row(r)) {
                    *vv *= gv;
                }
            }
        }

        // (f) residual when widths agree
        let (s_out, v_out) = if p == m {
            (s.add(&s_act)?, v.add(&v_gated)?)
        } else {
            (s_act.clone(), v_gated)
        };

        layers.push(LayerCache {
            s_in: s,
            v_in: v,
            h_msg: h,
            a_msg: a,
            v_mixed,
            c_in,
            s_act,
            norms,
            gates,
        });
        s = s_out;
        v = v_out;
    }

    // readout: mean-pool scalars over points, then affine
    let w = model.readout_w.cols();
    if s.cols() != w {
        return Err(Error::ShapeMismatch(format!(
            "readout expects {w} channels, features have {}",
            s.cols()
        )));
    }
    let mut pool = DenseMatrix::zeros(b, w);
    for cb in 0..b {
        for i in 0..n {
            let srow = s.row(cb * n + i);
            let prow = pool.row_mut(cb);
            for c in 0..w {
                prow[c] += srow[c] / n as f64;
            }
        }
    }
    let bias = model.readout_b.get(0, 0);
    let mut preds = Vec::with_capacity(b);
    for cb in 0..b {
        let prow = pool.row(cb);
        let wrow = model.readout_w.row(0);
        let mut y = bias;
        for c in 0..w {
            y += wrow[c] * prow[c];
        }
        preds.push(y);
    }

    let cache = ForwardCache {
        n_clouds: b,
        n_points: n,
        hidden_channels: model.hidden_channels,
        phi,
        layers,
        s_final: s,
        v_final: v,
        pool,
        preds: preds.clone(),
        debug_forward: model.debug_full_vector_mix.is_some(),
    };
    Ok((preds, cache))
}

/// Single-cloud convenience wrapper around [`forward_batch`].
pub fn forward_one(model: &So3Model, cloud: &PointCloud) -> Result<(f64, ForwardCache)> {
    let (preds, cache) = forward_batch(model, &[cloud])?;
    Ok((preds[0], cache))
}

/// Exact reverse-mode gradients of `Σ_b d_preds[b]·pred_b` with respect
/// to every trainable array, keyed like [`So3Model::params`]. For the
/// mean batch MSE, pass `d_preds[b] = 2(pred_b − target_b)/B`.
pub fn backward_batch(
    model: &So3Model,
    cache: &ForwardCache,
    d_preds: &[f64],
) -> Result<BTreeMap<String, DenseMatrix>> {
    if model.debug_full_vector_mix.is_some() || cache.debug_forward {
        return Err(Error::BadFlag(
            "backward is not supported with the debug vector mixer".into(),
        ));
    }
    if d_preds.len() != cache.n_clouds {
        return Err(Error::StaleCache(format!(
            "{} loss derivatives for a {}-cloud cache",
            d_preds.len(),
            cache.n_clouds
        )));
    }
    if cache.layers.len() != model.layers.len()
        || cache.hidden_channels != model.hidden_channels
        || cache.s_final.cols() != model.readout_w.cols()
    {
        return Err(Error::StaleCache(
            "cache was built by a different model architecture".into(),
        ));
    }
    for (l, (lp, lc)) in model.layers.iter().zip(&cache.layers).enumerate() {
        if lc.s_in.cols() != lp.in_channels() || lc.s_act.cols() != lp.out_channels() {
            return Err(Error::StaleCache(format!(
                "cache layer {l} width does not match the model"
            )));
        }
    }

    let b = cache.n_clouds;
    let n = cache.n_points;
    let bn = b * n;
    let mut grads: BTreeMap<String, DenseMatrix> = BTreeMap::new();

    // readout backward
    let w = model.readout_w.cols();
    let mut d_readout_w = DenseMatrix::zeros(1, w);
    let mut d_readout_b = DenseMatrix::zeros(1, 1);
    for cb in 0..b {
        d_readout_b.set(0, 0, d_readout_b.get(0, 0) + d_preds[cb]);
        let prow = cache.pool.row(cb);
        let drow = d_readout_w.row_mut(0);
        for c in 0..w {
            drow[c] += d_preds[cb] * prow[c];
        }
    }
    let mut d_s = DenseMatrix::zeros(bn, w);
    for cb in 0..b {
        let scale = d_preds[cb] / n as f64;
        for i in 0..n {
            let dst = d_s.row_mut(cb * n + i);
            let src = model.readout_w.row(0);
            for c in 0..w {
                dst[c] = scale * src[c];
            }
        }
    }
    let mut d_v = DenseMatrix::zeros(cache.v_final.rows(), cache.v_final.cols());
    grads.insert("readout.w".into(), d_readout_w);
    grads.insert("readout.b".into(), d_readout_b);

    // layers in reverse
    for (l, (lp, lc)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        let p = lp.in_channels();
        let m = lp.out_channels();
        let residual = p == m;

        // tanh backward
        let mut d_zcg = DenseMatrix::zeros(bn, m);
        for r in 0..bn {
            let dz = d_zcg.row_mut(r);
            let ds = d_s.row(r);
            let sa = lc.s_act.row(r);
            for c in 0..m {
                dz[c] = ds[c] * (1.0 - sa[c] * sa[c]);
            }
        }

        // merge backward
        let d_cg_b = col_sums(&d_zcg);
        let d_cg_w = d_zcg.tr_matmul(&lc.c_in)?;
        let d_c_in = d_zcg.matmul(&lp.cg_w)?;
        let d_s_pre = take_cols(&d_c_in, 0, m);

        // dot-product backward into dṼ
        let mut d_vmix = DenseMatrix::zeros(3 * bn, m);
        for r in 0..bn {
            let drow = d_c_in.row(r);
            for comp in 0..3 {
                let vrow = lc.v_mixed.row(3 * r + comp);
                let dvrow = d_vmix.row_mut(3 * r + comp);
                let mut k = m;
                for ca in 0..m {
                    for cb2 in ca..m {
                        let dd = drow[k];
                        k += 1;
                        dvrow[ca] += dd * vrow[cb2];
                        dvrow[cb2] += dd * vrow[ca];
                    }
                }
            }
        }

        // gate backward
        let gamma = lp.gate.row(0).to_vec();
        let mut d_gate = DenseMatrix::zeros(1, m);
        let mut alpha = vec![0.0; m];
        let mut coeff = vec![0.0; m];
        for r in 0..bn {
            for c in 0..m {
                alpha[c] = 0.0;
            }
            for comp in 0..3 {
                let dvo = d_v.row(3 * r + comp);
                let vm = lc.v_mixed.row(3 * r + comp);
                for c in 0..m {
                    alpha[c] += dvo[c] * vm[c];
                }
            }
            let grow = lc.gates.row(r);
            let nrow = lc.norms.row(r);
            {
                let dg = d_gate.row_mut(0);
                for c in 0..m {
                    let slope = grow[c] * (1.0 - grow[c]);
                    coeff[c] = alpha[c] * slope * gamma[c] / nrow[c];
                    dg[c] += alpha[c] * slope * nrow[c];
                }
            }
            for comp in 0..3 {
                let vm = lc.v_mixed.row(3 * r + comp);
                let dvo = d_v.row(3 * r + comp);
                let dvm = d_vmix.row_mut(3 * r + comp);
                for c in 0..m {
                    dvm[c] += dvo[c] * grow[c] + coeff[c] * vm[c];
                }
            }
        }

        // vector-mix backward
        let d_w11 = d_vmix.tr_matmul(&lc.v_in)?;
        let mut d_v_in = if residual {
            d_v.clone()
        } else {
            DenseMatrix::zeros(3 * bn, p)
        };
        d_v_in.add_scaled_in_place(1.0, &d_vmix.matmul(&lp.w11)?)?;

        // scalar premix backward
        let d_w00 = d_s_pre.tr_matmul(&lc.s_in)?;
        let mut d_s_in = if residual {
            d_s.clone()
        } else {
            DenseMatrix::zeros(bn, p)
        };
        d_s_in.add_scaled_in_place(1.0, &d_s_pre.matmul(&lp.w00)?)?;

        // message backward (d_s_pre doubles as dMSG)
        let d_b2 = col_sums(&d_s_pre);
        let d_w2 = d_s_pre.tr_matmul(&lc.a_msg)?;
        let d_a = d_s_pre.matmul(&lp.msg_w2)?;
        let mut d_z = DenseMatrix::zeros(b * n * n, m);
        for cb in 0..b {
            for i in 0..n {
                let darow = d_a.row(cb * n + i);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let q = cb * n * n + i * n + j;
                    let hrow = lc.h_msg.row(q);
                    let dzrow = d_z.row_mut(q);
                    for k in 0..m {
                        dzrow[k] = darow[k] * act_deriv_from_output(hrow[k]);
                    }
                }
            }
        }
        let d_b1 = col_sums(&d_z);
        let d_w1f = d_z.tr_matmul(&cache.phi)?;
        let mut d_t = DenseMatrix::zeros(bn, m);
        for cb in 0..b {
            for i in 0..n {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dzrow = d_z.row(cb * n * n + i * n + j);
                    let dtrow = d_t.row_mut(cb * n + j);
                    for k in 0..m {
                        dtrow[k] += dzrow[k];
                    }
                }
            }
        }
        let d_w1s = d_t.tr_matmul(&lc.s_in)?;
        let w1s = take_cols(&lp.msg_w1, 0, p);
        d_s_in.add_scaled_in_place(1.0, &d_t.matmul(&w1s)?)?;
        let d_w1 = DenseMatrix::from_fn(m, p + N_RBF, |i, j| {
            if j < p {
                d_w1s.get(i, j)
            } else {
                d_w1f.get(i, j - p)
            }
        });

        grads.insert(format!("layer{l}.w00"), d_w00);
        grads.insert(format!("layer{l}.w11"), d_w11);
        grads.insert(format!("layer{l}.cg_w"), d_cg_w);
        grads.insert(format!("layer{l}.cg_b"), d_cg_b);
        grads.insert(format!("layer{l}.msg_w1"), d_w1);
        grads.insert(format!("layer{l}.msg_b1"), d_b1);
        grads.insert(format!("layer{l}.msg_w2"), d_w2);
        grads.insert(format!("layer{l}.msg_b2"), d_b2);
        grads.insert(format!("layer{l}.gate"), d_gate);

        d_s = d_s_in;
        d_v = d_v_in;
    }

    Ok(grads)
}

/// Central finite-difference validation of [`backward_batch`]: perturbs
/// every entry of every parameter by `±step`, measures the mean batch
/// MSE, and returns the worst per-tensor relative Frobenius error
/// against the analytic gradient.
pub fn finite_difference_max_error(
    model: &mut So3Model,
    clouds: &[&PointCloud],
    step: f64,
) -> Result<f64> {
    let k = clouds.len() as f64;
    let batch_loss = |model: &So3Model| -> Result<f64> {
        let (preds, _) = forward_batch(model, clouds)?;
        Ok(preds
            .iter()
            .zip(clouds)
            .map(|(&p, c)| (p - c.target).powi(2))
            .sum::<f64>()
            / k)
    };

    let (preds, cache) = forward_batch(model, clouds)?;
    let d_preds: Vec<f64> = preds
        .iter()
        .zip(clouds)
        .map(|(&p, c)| 2.0 * (p - c.target) / k)
        .collect();
    let grads = backward_batch(model, &cache, &d_preds)?;

    let ids = model.param_ids();
    let mut worst: f64 = 0.0;
    for id in ids {
        let len = grads[&id].len();
        let mut fd = Vec::with_capacity(len);
        for e in 0..len {
            let mut probe = |delta: f64| -> Result<f64> {
                for (pid, _, w) in model.params_mut() {
                    if pid == id {
                        w.data_mut()[e] += delta;
                    }
                }
                batch_loss(model)
            };
            let up = probe(step)?;
            let down = probe(-2.0 * step)?;
            probe(step)?; // restore
            fd.push((up - down) / (2.0 * step));
        }
        let analytic = grads[&id].data();
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, f) in analytic.iter().zip(&fd) {
            num += (a - f) * (a - f);
            den += f * f;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-10);
        worst = worst.max(rel);
    }
    Ok(worst)
}
