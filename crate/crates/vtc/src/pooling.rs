//! Block pooling over token grids stored as (grid_h * grid_w) rows of width d
//! in row-major raster order. Shared by the tape ops and the plain-value
//! compressor surface so both paths compute bit-identical results.

/// Arithmetic mean of each non-overlapping stride x stride block.
pub fn avg_pool_forward(
    data: &[f64],
    grid_h: usize,
    grid_w: usize,
    d: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = grid_h / stride;
    let ow = grid_w / stride;
    let inv = 1.0 / (stride * stride) as f64;
    let mut out = vec![0.0; oh * ow * d];
    for bh in 0..oh {
        for bw in 0..ow {
            let orow = (bh * ow + bw) * d;
            for dy in 0..stride {
                for dx in 0..stride {
                    let src = ((bh * stride + dy) * grid_w + (bw * stride + dx)) * d;
                    for c in 0..d {
                        out[orow + c] += data[src + c];
                    }
                }
            }
            for c in 0..d {
                out[orow + c] *= inv;
            }
        }
    }
    out
}

/// Gradient of `avg_pool_forward` with respect to its input.
pub fn avg_pool_backward(
    grad_out: &[f64],
    grid_h: usize,
    grid_w: usize,
    d: usize,
    stride: usize,
) -> Vec<f64> {
    let ow = grid_w / stride;
    let inv = 1.0 / (stride * stride) as f64;
    let mut grad_in = vec![0.0; grid_h * grid_w * d];
    for h in 0..grid_h {
        for w in 0..grid_w {
            let orow = ((h / stride) * ow + w / stride) * d;
            let dst = (h * grid_w + w) * d;
            for c in 0..d {
                grad_in[dst + c] = grad_out[orow + c] * inv;
            }
        }
    }
    grad_in
}

/// Per-channel max of each block; returns the pooled values and, per output
/// element, the source row index that attained the max (first wins on ties).
pub fn max_pool_forward(
    data: &[f64],
    grid_h: usize,
    grid_w: usize,
    d: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = grid_h / stride;
    let ow = grid_w / stride;
    let mut out = vec![f64::NEG_INFINITY; oh * ow * d];
    let mut argmax = vec![0usize; oh * ow * d];
    for bh in 0..oh {
        for bw in 0..ow {
            let orow = (bh * ow + bw) * d;
            for dy in 0..stride {
                for dx in 0..stride {
                    let row = (bh * stride + dy) * grid_w + (bw * stride + dx);
                    let src = row * d;
                    for c in 0..d {
                        if data[src + c] > out[orow + c] {
                            out[orow + c] = data[src + c];
                            argmax[orow + c] = row;
                        }
                    }
                }
            }
        }
    }
    (out, argmax)
}
