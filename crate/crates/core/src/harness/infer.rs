//! Sliding-window inference and evaluation.

use diffcore::{Graph, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, MetricReport};
use crate::model::SegModel;
use crate::phantom::{Case, Field, Grid};

pub const OVERLAP: f64 = 0.5;

/// Window origins along one axis: stride `⌊p·(1−overlap)⌋`, with the last
/// window flush against the far edge.
pub fn window_starts(n: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || n < p {
        return Err(Error::Contract(format!("volume extent {n} is smaller than patch {p}; pad the volume to at least the patch size")));
    }
    let stride = ((p as f64 * (1.0 - OVERLAP)) as usize).max(1);
    let count = (n - p).div_ceil(stride) + 1;
    Ok((0..count).map(|i| (i * stride).min(n - p)).collect())
}

/// Averaged logits over every window covering each voxel.
pub fn sliding_window_logits<T: Scalar>(model: &SegModel<T>, volume: &Grid<f32>, text: &str, patch: [usize; 3]) -> Result<Grid<f32>> {
    let dims = volume.dims();
    let (sh, sw, ss) = (window_starts(dims[0], patch[0])?, window_starts(dims[1], patch[1])?, window_starts(dims[2], patch[2])?);
    let ctx = model.context_value(text)?;
    let mut acc = vec![0f64; volume.len()];
    let mut count = vec![0u32; volume.len()];
    for &h in &sh {
        for &w in &sw {
            for &s in &ss {
                let crop = volume.crop([h, w, s], patch);
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(&[1, 1, patch[0], patch[1], patch[2]], crop.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?);
                let c = match &ctx {
                    Some(t) => {
                        let shape = t.shape().to_vec();
                        Some(g.constant(t.clone().reshape(&[1, shape[0], shape[1]])?))
                    }
                    None => None,
                };
                let y = model.forward_with_context(&mut g, x, c)?;
                let vals = g.value(y).data();
                let mut k = 0;
                for i in 0..patch[0] {
                    for j in 0..patch[1] {
                        for l in 0..patch[2] {
                            let idx = volume.index(h + i, w + j, s + l);
                            let v = vals[k].to_f64_lossy();
                            acc[idx] = if count[idx] == 0 { v } else { acc[idx] + v };
                            count[idx] += 1;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let data = acc.iter().zip(&count).map(|(&a, &c)| if c == 1 { a as f32 } else { (a / c as f64) as f32 }).collect();
    Grid::from_vec(dims, volume.spacing(), data)
}

/// Binary mask: sigmoid probability above one half, i.e. logit above zero.
pub fn sliding_window_infer<T: Scalar>(model: &SegModel<T>, volume: &Grid<f32>, text: &str, patch: [usize; 3]) -> Result<Grid<u8>> {
    Ok(sliding_window_logits(model, volume, text, patch)?.map(|v| (v > 0.0) as u8))
}

/// Predicted masks for every case, with `omitted` fields dropped from the record.
pub fn predict_cases<T: Scalar>(model: &SegModel<T>, cases: &[Case], omitted: &[Field], patch: [usize; 3]) -> Result<Vec<Grid<u8>>> {
    cases.iter().map(|c| sliding_window_infer(model, &c.intensity, &model.render(&c.record, omitted), patch)).collect()
}

/// Per-case metrics, sorted by case id, plus bootstrap aggregates.
pub fn evaluate<T: Scalar>(model: &SegModel<T>, cases: &[Case], omitted: &[Field], patch: [usize; 3], seed: u64) -> Result<MetricReport> {
    let preds = predict_cases(model, cases, omitted, patch)?;
    report_for(cases, &preds, seed)
}

pub fn report_for(cases: &[Case], preds: &[Grid<u8>], seed: u64) -> Result<MetricReport> {
    let mut rows = cases.iter().zip(preds).map(|(c, p)| CaseMetrics::compute(c.id.clone(), p, &c.mask)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    MetricReport::new(rows, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout() {
        assert_eq!(window_starts(64, 64).unwrap(), vec![0]);
        assert_eq!(window_starts(96, 64).unwrap(), vec![0, 32]);
        assert_eq!(window_starts(100, 64).unwrap(), vec![0, 32, 36]);
        assert_eq!(window_starts(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(window_starts(30, 32), Err(Error::Contract(_))));
    }
}
