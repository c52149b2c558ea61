use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

/// Indices of the `k` rows of `pool` nearest to `q` in squared Euclidean
/// distance; ties go to the lower index.
pub(crate) fn k_nearest<S: Scalar>(x: ArrayView2<S>, pool: &[usize], q: ArrayView1<S>, k: usize) -> Vec<usize> {
    let mut scored: Vec<(S, usize)> = pool
        .iter()
        .map(|&i| {
            let d = x.row(i).iter().zip(q.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>();
            (d, i)
        })
        .collect();
    let cmp = |a: &(S, usize), b: &(S, usize)| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// k-nearest-neighbour CATE: mean outcome of the `k` nearest treated units
/// minus that of the `k` nearest controls, for each query row.
///
/// Distances are Euclidean on the covariates as given; standardize first if
/// features live on different scales.
pub fn knn_cate<S: Scalar>(ds: &ObservationalDataset<S>, k: usize, queries: ArrayView2<S>) -> Result<Array1<S>> {
    let (control, treated) = ds.treatment_groups();
    if k == 0 || control.len() < k || treated.len() < k {
        return Err(CfrError::Size(format!(
            "k = {k} needs at least k members per group (controls {}, treated {})",
            control.len(),
            treated.len()
        )));
    }
    if queries.ncols() != ds.d() {
        return Err(CfrError::Shape(format!("queries have {} columns, dataset {}", queries.ncols(), ds.d())));
    }
    let kk = S::of(k);
    let mean_y = |idx: Vec<usize>| idx.iter().map(|&i| ds.y[i]).sum::<S>() / kk;
    Ok(Array1::from_iter(queries.rows().into_iter().map(|q| {
        mean_y(k_nearest(ds.x.view(), &treated, q, k)) - mean_y(k_nearest(ds.x.view(), &control, q, k))
    })))
}
