//! Central finite differences for checking analytic gradients.

use alloc::vec::Vec;

use crate::mat::Mat;
use crate::params::{group_of, ParamGroup, Params};

/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` for every scalar `θ_k` of every array.
pub fn finite_difference_grads(
    params: &Params<f64>,
    h: f64,
    f: impl Fn(&Params<f64>) -> f64,
) -> Vec<Mat<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.mats().len());
    for a in 0..params.mats().len() {
        let (r, c) = params.get(a).shape();
        let mut g = Mat::zeros(r, c);
        for k in 0..r * c {
            let x = params.get(a).as_slice()[k];
            probe.get_mut(a).as_mut_slice()[k] = x + h;
            let plus = f(&probe);
            probe.get_mut(a).as_mut_slice()[k] = x - h;
            let minus = f(&probe);
            probe.get_mut(a).as_mut_slice()[k] = x;
            g.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    pub scalars: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub diff_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both
    /// gradients are below `1e-12`.
    pub relative: f64,
}

/// Aggregates per-array gradients into parameter groups and compares them.
pub fn compare_by_group(
    params: &Params<f64>,
    analytic: &[Option<Mat<f64>>],
    numeric: &[Mat<f64>],
) -> Vec<GroupError> {
    let cfg = params.config();
    ParamGroup::ALL
        .iter()
        .map(|&group| {
            let (mut a2, mut n2, mut d2, mut scalars) = (0.0, 0.0, 0.0, 0);
            for (i, num) in numeric.iter().enumerate() {
                if group_of(cfg, i) != group {
                    continue;
                }
                for (k, &nv) in num.as_slice().iter().enumerate() {
                    let av = analytic[i].as_ref().map_or(0.0, |m| m.as_slice()[k]);
                    a2 += av * av;
                    n2 += nv * nv;
                    d2 += (av - nv) * (av - nv);
                    scalars += 1;
                }
            }
            let (a, n, d) = (libm::sqrt(a2), libm::sqrt(n2), libm::sqrt(d2));
            let scale = a.max(n);
            GroupError {
                group,
                scalars,
                analytic_norm: a,
                numeric_norm: n,
                diff_norm: d,
                relative: if scale < 1e-12 { d } else { d / scale },
            }
        })
        .collect()
}
