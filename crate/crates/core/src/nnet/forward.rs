use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{CfrModel, Dense};
use crate::error::{CfrError, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone)]
struct LayerCache<S> {
    input: Array2<S>,
    pre: Array2<S>,
}

#[derive(Debug, Clone)]
struct HeadCache<S> {
    rows: Vec<usize>,
    layers: Vec<LayerCache<S>>,
}

#[derive(Debug, Clone)]
struct WeightCache<S> {
    layers: Vec<LayerCache<S>>,
    raw: Array1<S>,
}

/// Outputs of one forward pass plus the intermediate values needed for
/// [`CfrModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    pub z: Array2<S>,
    pub yhat: Array1<S>,
    /// Learned weights, normalized to mean 1 within each group present.
    pub weights: Option<Array1<S>>,
    t: Vec<u8>,
    rep: Vec<LayerCache<S>>,
    heads: [HeadCache<S>; 2],
    weight: Option<WeightCache<S>>,
}

impl<S> ForwardPass<S> {
    pub fn treatment(&self) -> &[u8] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn dense_forward<S: Scalar>(d: &Dense, p: &[S], input: Array2<S>) -> (Array2<S>, LayerCache<S>) {
    let pre = input.dot(&d.weights(p)) + &d.bias(p);
    let out = pre.mapv(|v| d.activation.apply(v));
    (out, LayerCache { input, pre })
}

fn stack_forward<S: Scalar>(layers: &[Dense], p: &[S], mut h: Array2<S>) -> (Array2<S>, Vec<LayerCache<S>>) {
    let mut caches = Vec::with_capacity(layers.len());
    for d in layers {
        let (out, cache) = dense_forward(d, p, h);
        caches.push(cache);
        h = out;
    }
    (h, caches)
}

/// Backpropagates `d_out` through a stack, accumulating parameter gradients
/// into `grad`; returns the gradient at the stack input.
fn stack_backward<S: Scalar>(
    layers: &[Dense],
    caches: &[LayerCache<S>],
    p: &[S],
    mut d_out: Array2<S>,
    grad: &mut [S],
) -> Array2<S> {
    for (d, c) in layers.iter().zip(caches).rev() {
        let mut d_pre = d_out;
        d_pre.zip_mut_with(&c.pre, |g, &x| *g *= d.activation.derivative(x));
        let gw = c.input.t().dot(&d_pre);
        for (dst, &src) in grad[d.weight_range()].iter_mut().zip(gw.iter()) {
            *dst += src;
        }
        let gb = d_pre.sum_axis(Axis(0));
        for (dst, &src) in grad[d.bias_range()].iter_mut().zip(gb.iter()) {
            *dst += src;
        }
        d_out = d_pre.dot(&d.weights(p).t());
    }
    d_out
}

fn treatment_groups(t: &[u8]) -> [Vec<usize>; 2] {
    let (c, tr) = crate::data::treatment_groups(t);
    [c, tr]
}

fn check_treatment(t: &[u8], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(CfrError::Shape(format!("{} treatment labels for {n} rows", t.len())));
    }
    if let Some(i) = t.iter().position(|&v| v > 1) {
        return Err(CfrError::Validation(format!("row {}: treatment {} outside {{0,1}}", i + 1, t[i])));
    }
    Ok(())
}

/// `ln softplus(x)`, finite wherever `x` is.
fn log_softplus<S: Scalar>(x: S) -> S {
    if x < S::c(-30.0) {
        x - x.exp() / S::c(2.0)
    } else {
        softplus(x).ln()
    }
}

/// `sigmoid(x) / softplus(x)`, the derivative of [`log_softplus`].
fn log_softplus_slope<S: Scalar>(x: S) -> S {
    let e = x.exp();
    if e == S::zero() {
        S::one()
    } else if x < S::c(-30.0) {
        e / (S::one() + e) / e.ln_1p()
    } else {
        sigmoid(x) / softplus(x)
    }
}

/// Softplus of `raw` then per-group mean-1 normalization, evaluated in the
/// log domain so that very negative outputs do not underflow. A group whose
/// raw outputs are all equal gets weights of exactly 1.
fn normalize_softplus<S: Scalar>(raw: &Array1<S>, groups: &[Vec<usize>; 2]) -> Array1<S> {
    let mut w = Array1::zeros(raw.len());
    for rows in groups.iter().filter(|r| !r.is_empty()) {
        let first = raw[rows[0]];
        if rows.iter().all(|&i| raw[i] == first) {
            rows.iter().for_each(|&i| w[i] = S::one());
            continue;
        }
        let logs: Vec<S> = rows.iter().map(|&i| log_softplus(raw[i])).collect();
        let top = logs.iter().copied().fold(S::neg_infinity(), S::max);
        let scaled: Vec<S> = logs.iter().map(|&l| (l - top).exp()).collect();
        let mean = scaled.iter().copied().sum::<S>() / S::of(rows.len());
        rows.iter().zip(&scaled).for_each(|(&i, &v)| w[i] = v / mean);
    }
    w
}

impl<S: Scalar> CfrModel<S> {
    fn check_input(&self, x: ArrayView2<S>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(CfrError::Shape(format!("input has {} columns, model expects {}", x.ncols(), self.arch.input_dim)));
        }
        Ok(())
    }

    fn p(&self) -> &[S] {
        self.params.as_slice().expect("contiguous parameters")
    }

    /// Φ(x). ELU is applied after every representation layer.
    pub fn forward_representation(&self, x: ArrayView2<S>) -> Result<Array2<S>> {
        self.check_input(x)?;
        Ok(stack_forward(&self.layout.rep, self.p(), x.to_owned()).0)
    }

    fn heads_forward(&self, z: &Array2<S>, t: &[u8]) -> (Array1<S>, [HeadCache<S>; 2]) {
        let groups = treatment_groups(t);
        let mut yhat = Array1::zeros(t.len());
        let caches = [0usize, 1].map(|g| {
            let rows = groups[g].clone();
            if rows.is_empty() {
                return HeadCache { rows, layers: Vec::new() };
            }
            let (out, layers) = stack_forward(&self.layout.heads[g], self.p(), z.select(Axis(0), &rows));
            for (k, &i) in rows.iter().enumerate() {
                yhat[i] = out[[k, 0]];
            }
            HeadCache { rows, layers }
        });
        (yhat, caches)
    }

    /// `h_t(z)` for each row, routed by its treatment label.
    pub fn forward_hypothesis(&self, z: ArrayView2<S>, t: &[u8]) -> Result<Array1<S>> {
        if z.ncols() != self.representation_dim() {
            return Err(CfrError::Shape(format!("representation has {} columns, heads expect {}", z.ncols(), self.representation_dim())));
        }
        check_treatment(t, z.nrows())?;
        Ok(self.heads_forward(&z.to_owned(), t).0)
    }

    fn weights_forward(&self, z: &Array2<S>, t: &[u8]) -> Option<(Array1<S>, WeightCache<S>)> {
        let layers = self.layout.weight.as_ref()?;
        let tcol = Array2::from_shape_fn((t.len(), 1), |(i, _)| S::of(t[i] as usize));
        let input = concatenate![Axis(1), z.view(), tcol.view()];
        let (out, caches) = stack_forward(layers, self.p(), input);
        let raw = out.column(0).to_owned();
        let w = normalize_softplus(&raw, &treatment_groups(t));
        Some((w, WeightCache { layers: caches, raw }))
    }

    /// Learned sample weights from `[z | t]`: softplus of the head output,
    /// normalized to mean 1 within each treatment group in the batch.
    pub fn forward_weights(&self, z: ArrayView2<S>, t: &[u8]) -> Result<Array1<S>> {
        if self.layout.weight.is_none() {
            return Err(CfrError::Config("model has no weight head".into()));
        }
        if z.ncols() != self.representation_dim() {
            return Err(CfrError::Shape(format!("representation has {} columns, weight head expects {}", z.ncols(), self.representation_dim())));
        }
        check_treatment(t, z.nrows())?;
        Ok(self.weights_forward(&z.to_owned(), t).expect("weight head present").0)
    }

    /// Full forward pass with caches for [`CfrModel::backward`].
    pub fn forward(&self, x: ArrayView2<S>, t: &[u8]) -> Result<ForwardPass<S>> {
        self.check_input(x)?;
        check_treatment(t, x.nrows())?;
        let (z, rep) = stack_forward(&self.layout.rep, self.p(), x.to_owned());
        let (yhat, heads) = self.heads_forward(&z, t);
        let (weights, weight) = match self.weights_forward(&z, t) {
            Some((w, c)) => (Some(w), Some(c)),
            None => (None, None),
        };
        Ok(ForwardPass { z, yhat, weights, t: t.to_vec(), rep, heads, weight })
    }

    /// Gradient of a scalar objective with respect to all parameters, given
    /// its partial derivatives at the outputs of `pass`: the predictions,
    /// the representation (e.g. from an IPM penalty) and the learned weights.
    pub fn backward(
        &self,
        pass: &ForwardPass<S>,
        d_yhat: ArrayView1<S>,
        d_z: Option<ArrayView2<S>>,
        d_weights: Option<ArrayView1<S>>,
    ) -> Result<Array1<S>> {
        let n = pass.len();
        if d_yhat.len() != n {
            return Err(CfrError::Shape(format!("{} output gradients for {n} rows", d_yhat.len())));
        }
        let p = self.p();
        let mut grad = Array1::zeros(self.layout.len);
        let g = grad.as_slice_mut().expect("contiguous");
        let mut dz = match d_z {
            Some(d) if d.dim() != pass.z.dim() => {
                return Err(CfrError::Shape(format!("representation gradient {:?} for {:?}", d.dim(), pass.z.dim())))
            }
            Some(d) => d.to_owned(),
            None => Array2::zeros(pass.z.raw_dim()),
        };

        for (h, cache) in pass.heads.iter().enumerate() {
            if cache.rows.is_empty() {
                continue;
            }
            let d_out = Array2::from_shape_fn((cache.rows.len(), 1), |(k, _)| d_yhat[cache.rows[k]]);
            let d_in = stack_backward(&self.layout.heads[h], &cache.layers, p, d_out, g);
            for (k, &i) in cache.rows.iter().enumerate() {
                dz.row_mut(i).scaled_add(S::one(), &d_in.row(k));
            }
        }

        if let Some(dw) = d_weights {
            let (layers, cache) = match (&self.layout.weight, &pass.weight) {
                (Some(l), Some(c)) => (l, c),
                _ => return Err(CfrError::MissingCache("weight gradient supplied but the pass has no weight head".into())),
            };
            if dw.len() != n {
                return Err(CfrError::Shape(format!("{} weight gradients for {n} rows", dw.len())));
            }
            let w = pass.weights.as_ref().expect("weights cached");
            let mut d_raw = Array1::zeros(n);
            for rows in treatment_groups(&pass.t).iter().filter(|r| !r.is_empty()) {
                let m = S::of(rows.len());
                let inner = rows.iter().map(|&i| dw[i] * w[i]).sum::<S>() / m;
                for &i in rows {
                    d_raw[i] = (dw[i] - inner) * w[i] * log_softplus_slope(cache.raw[i]);
                }
            }
            let d_in = stack_backward(layers, &cache.layers, p, d_raw.insert_axis(Axis(1)), g);
            let zd = dz.ncols();
            dz += &d_in.slice(ndarray::s![.., ..zd]);
        }

        stack_backward(&self.layout.rep, &pass.rep, p, dz, g);
        Ok(grad)
    }

    /// Predicted potential outcomes `(h_0(Φ(x)), h_1(Φ(x)))`.
    pub fn predict_potential_outcomes(&self, x: ArrayView2<S>) -> Result<(Array1<S>, Array1<S>)> {
        let z = self.forward_representation(x)?;
        let n = z.nrows();
        let f0 = stack_forward(&self.layout.heads[0], self.p(), z.clone()).0.column(0).to_owned();
        let f1 = stack_forward(&self.layout.heads[1], self.p(), z).0.column(0).to_owned();
        debug_assert_eq!(f0.len(), n);
        Ok((f0, f1))
    }

    /// `τ̂(x) = h_1(Φ(x)) - h_0(Φ(x))`.
    pub fn predict_cate(&self, x: ArrayView2<S>) -> Result<Array1<S>> {
        let (f0, f1) = self.predict_potential_outcomes(x)?;
        Ok(f1 - f0)
    }

    /// Factual predictions `h_t(Φ(x))`.
    pub fn predict_factual(&self, x: ArrayView2<S>, t: &[u8]) -> Result<Array1<S>> {
        let z = self.forward_representation(x)?;
        check_treatment(t, z.nrows())?;
        Ok(self.heads_forward(&z, t).0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, Architecture};
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_representation() {
        let model = init_model::<f64>(&Architecture::new(3, &[], &[4]), 1).unwrap();
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        assert_eq!(model.forward_representation(x.view()).unwrap(), x);
    }

    #[test]
    fn single_layer_identity_weights() {
        let arch = Architecture::new(2, &[2], &[1]);
        let mut model = init_model::<f64>(&arch, 0).unwrap();
        model.params.fill(0.0);
        model.params[0] = 1.0;
        model.params[3] = 1.0;
        let x = array![[0.5, 2.0], [3.0, 0.0]];
        assert_eq!(model.forward_representation(x.view()).unwrap(), x);
    }

    #[test]
    fn closed_form_linear_gradient() {
        // identity Φ, linear heads: ŷ = x·w + b, loss (ŷ - y)²
        let arch = Architecture::new(2, &[], &[]);
        let model = init_model::<f64>(&arch, 4).unwrap();
        let x = array![[0.7, -1.2]];
        let y = 0.3;
        let pass = model.forward(x.view(), &[1]).unwrap();
        let r = pass.yhat[0] - y;
        let grad = model.backward(&pass, array![2.0 * r].view(), None, None).unwrap();
        let head1 = 3..6;
        let expected = [2.0 * r * 0.7, 2.0 * r * -1.2, 2.0 * r];
        for (g, e) in grad.slice(ndarray::s![head1]).iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
        assert!(grad.slice(ndarray::s![0..3]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = Architecture::new(3, &[4], &[2]).with_weight_head(&[2]);
        let model = init_model::<f64>(&arch, 4).unwrap();
        let x = array![[0.7, -1.2, 0.0], [1.0, 1.0, 1.0]];
        let pass = model.forward(x.view(), &[0, 1]).unwrap();
        let zeros = Array1::zeros(2);
        let grad = model.backward(&pass, zeros.view(), None, Some(zeros.view())).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_weight_head_gives_unit_weights() {
        let arch = Architecture::new(3, &[4], &[2]).with_weight_head(&[3]);
        let model = init_model::<f64>(&arch, 2).unwrap();
        let x = array![[0.7, -1.2, 0.0], [1.0, 1.0, 1.0], [0.0, 2.0, -3.0]];
        let pass = model.forward(x.view(), &[0, 1, 1]).unwrap();
        assert_eq!(pass.weights.unwrap(), array![1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalization_survives_softplus_underflow() {
        let groups = [vec![0, 1, 2], vec![3]];
        let raw: Array1<f64> = array![-900.0, -901.0, -2000.0, -1500.0];
        let w = normalize_softplus(&raw, &groups);
        // deep in the negative range softplus(x) ≈ eˣ, so the group is a softmax
        let e = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((w[0] - 3.0 * e).abs() < 1e-12);
        assert!((w[1] - 3.0 * (1.0 - e)).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert_eq!(w[3], 1.0);

        let moderate: Array1<f64> = array![-2.0, 0.5, 3.0, 1.0];
        let sp = moderate.mapv(softplus);
        let mean = (sp[0] + sp[1] + sp[2]) / 3.0;
        let w = normalize_softplus(&moderate, &groups);
        for i in 0..3 {
            assert!((w[i] - sp[i] / mean).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softplus_slope_is_its_derivative() {
        for &x in &[-800.0f64, -45.0, -31.0, -29.0, -3.0, 0.0, 2.5, 40.0] {
            let h = 1e-5 * (1.0f64 + x.abs());
            let fd = (log_softplus(x + h) - log_softplus(x - h)) / (2.0 * h);
            assert!((fd - log_softplus_slope(x)).abs() < 1e-6, "x {x}: {fd} vs {}", log_softplus_slope(x));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = init_model::<f64>(&Architecture::new(2, &[3], &[2]), 0).unwrap();
        let x = array![[1.0, 2.0]];
        assert!(model.forward(x.view(), &[2]).is_err());
        assert!(model.forward(x.view(), &[0, 1]).is_err());
        assert!(model.forward(array![[1.0]].view(), &[0]).is_err());
        assert!(model.forward_weights(x.view().slice(ndarray::s![.., ..1]), &[0]).is_err());
        let pass = model.forward(x.view(), &[0]).unwrap();
        let d = array![1.0];
        assert!(matches!(model.backward(&pass, d.view(), None, Some(d.view())), Err(CfrError::MissingCache(_))));
    }
}
