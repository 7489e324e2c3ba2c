//! Reduction of raw activations to `n×p` matrices: adaptive average pooling,
//! flattening and column centering.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::store::ActivationTensor;

/// Default feature budget for pooled convolutional activations.
pub const DEFAULT_TARGET_DIMS: usize = 50_000;

/// An `n×p` activation matrix, row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer_id: String,
    pub values: Array2<f32>,
    pub centered: bool,
}

impl ActivationMatrix {
    pub fn new(layer_id: impl Into<String>, values: Array2<f32>) -> Self {
        ActivationMatrix {
            layer_id: layer_id.into(),
            values,
            centered: false,
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    /// Row subset, keeping the layer id. The result is not centered.
    pub fn select_rows(&self, rows: &[usize]) -> ActivationMatrix {
        ActivationMatrix {
            layer_id: self.layer_id.clone(),
            values: self.values.select(Axis(0), rows),
            centered: false,
        }
    }
}

/// Chooses the adaptive output grid `(s_h, s_w)` for pooling `c×h×w` maps
/// into at most `target_dims` features, keeping `s_h/s_w` close to `h/w`.
pub fn pooled_grid(c: usize, h: usize, w: usize, target_dims: usize) -> Result<(usize, usize)> {
    if c > target_dims {
        return Err(Error::Pool(format!(
            "{c} channels alone exceed the feature budget of {target_dims}"
        )));
    }
    let mut best = (1usize, 1usize);
    let mut consider = |sh: usize, sw: usize| {
        if c * sh * sw <= target_dims {
            let (bh, bw) = best;
            if sh * sw > bh * bw || (sh * sw == bh * bw && sh > bh) {
                best = (sh, sw);
            }
        }
    };
    for sh in 1..=h {
        let sw = ((sh as f64 * w as f64 / h as f64).round() as usize).clamp(1, w);
        consider(sh, sw);
    }
    for sw in 1..=w {
        let sh = ((sw as f64 * h as f64 / w as f64).round() as usize).clamp(1, h);
        consider(sh, sw);
    }
    Ok(best)
}

/// Half-open window `[floor(i·len/s), floor((i+1)·len/s))` of output cell `i`.
fn window(i: usize, len: usize, cells: usize) -> (usize, usize) {
    (i * len / cells, (i + 1) * len / cells)
}

/// Adaptive 2-D average pooling of an `n×c×h×w` tensor, flattened to
/// `n×(c·s_h·s_w)` in channel-major order.
pub fn average_pool(tensor: &ActivationTensor, target_dims: usize) -> Result<ActivationMatrix> {
    if tensor.rank() != 4 {
        return Err(Error::Shape(format!(
            "average_pool expects an n×c×h×w tensor, got shape {:?}",
            tensor.shape
        )));
    }
    let (n, c, h, w) = (tensor.shape[0], tensor.shape[1], tensor.shape[2], tensor.shape[3]);
    let (sh, sw) = pooled_grid(c, h, w, target_dims)?;
    let p = c * sh * sw;
    let mut out = Array2::<f32>::zeros((n, p));
    for e in 0..n {
        for ch in 0..c {
            let map = &tensor.values[(e * c + ch) * h * w..(e * c + ch + 1) * h * w];
            for oi in 0..sh {
                let (r0, r1) = window(oi, h, sh);
                for oj in 0..sw {
                    let (c0, c1) = window(oj, w, sw);
                    let mut sum = 0.0f64;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            sum += map[r * w + col] as f64;
                        }
                    }
                    let count = ((r1 - r0) * (c1 - c0)) as f64;
                    out[[e, (ch * sh + oi) * sw + oj]] = (sum / count) as f32;
                }
            }
        }
    }
    Ok(ActivationMatrix::new(tensor.layer_id.clone(), out))
}

/// Reshapes any tensor to `n×(product of remaining dims)`.
pub fn flatten(tensor: &ActivationTensor) -> ActivationMatrix {
    let values = Array2::from_shape_vec((tensor.n(), tensor.features()), tensor.values.clone())
        .expect("tensor invariants guarantee a consistent shape");
    ActivationMatrix::new(tensor.layer_id.clone(), values)
}

/// Pools 4-D tensors to at most `target_dims` features; passes 2-D tensors through.
pub fn to_matrix(tensor: &ActivationTensor, target_dims: usize) -> Result<ActivationMatrix> {
    match tensor.rank() {
        4 => average_pool(tensor, target_dims),
        _ => Ok(flatten(tensor)),
    }
}

/// Subtracts each column's mean (accumulated in f64).
pub fn center_columns(m: &ActivationMatrix) -> ActivationMatrix {
    let mut values = m.values.clone();
    let n = values.nrows() as f64;
    for mut col in values.columns_mut() {
        let mean = (col.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        col.mapv_inplace(|v| v - mean);
    }
    ActivationMatrix {
        layer_id: m.layer_id.clone(),
        values,
        centered: true,
    }
}
