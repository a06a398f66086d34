//! Central finite differences — the independent oracle against which every
//! analytic gradient is checked. Deliberately knows nothing about the tape.

use super::{NdArray, ParamSet};
use crate::error::Result;

/// d/dx_i f(x) by central differences, one coordinate at a time.
pub fn finite_diff<F>(f: F, x: &NdArray, h: f64) -> Result<NdArray>
where
    F: Fn(&NdArray) -> Result<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut work = x.clone();
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work)?;
        work.data_mut()[i] = orig - h;
        let fm = f(&work)?;
        work.data_mut()[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(NdArray::from_parts(x.shape().to_vec(), g))
}

/// Finite differences over every value of a parameter set.
pub fn finite_diff_params<F>(f: F, params: &ParamSet, h: f64) -> Result<Vec<(String, NdArray)>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let mut g = vec![0.0; value.len()];
        for i in 0..value.len() {
            let mut probe = params.clone();
            let eval = |delta: f64, probe: &mut ParamSet| -> Result<f64> {
                for (n, v) in probe.iter_mut() {
                    if n == name {
                        v.data_mut()[i] = value.data()[i] + delta;
                    }
                }
                f(probe)
            };
            let fp = eval(h, &mut probe)?;
            let fm = eval(-h, &mut probe)?;
            g[i] = (fp - fm) / (2.0 * h);
        }
        out.push((name.to_string(), NdArray::from_parts(value.shape().to_vec(), g)));
    }
    Ok(out)
}

/// Finite differences at chosen `(parameter, flat index)` coordinates only.
pub fn finite_diff_param_coords<F>(
    f: F,
    params: &ParamSet,
    coords: &[(&str, usize)],
    h: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut out = Vec::with_capacity(coords.len());
    for (name, idx) in coords {
        let base = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .data()[*idx];
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = params.clone();
            for (n, v) in probe.iter_mut() {
                if n == *name {
                    v.data_mut()[*idx] = base + delta;
                }
            }
            f(&probe)
        };
        let fp = eval(h)?;
        let fm = eval(-h)?;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error ‖a − b‖₂ / max(‖b‖₂, floor).
pub fn rel_error(analytic: &NdArray, numeric: &NdArray) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / numeric.norm_l2().max(1e-8)
}
