//! Relative positional bias lookup.

use crate::error::{Error, Result};
use crate::masking::TokenGridGeometry;
use crate::numerics::{Scalar, Tensor};

/// Row-major `n × n` indices into a per-head table of extent
/// `(2g_h−1)(2g_w−1)`: entry `(i, j)` selects offset
/// `(Δrow + g_h−1, Δcol + g_w−1)` with `Δ = pos_i − pos_j`.
pub fn relative_bias_index(geo: &TokenGridGeometry, positions: &[usize]) -> Result<Vec<usize>> {
    let (gh, gw) = (geo.grid_h() as isize, geo.grid_w() as isize);
    let span = 2 * gw - 1;
    let n = geo.tokens();
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::Range(format!("token position {bad} outside a grid of {n}")));
    }
    let coords: Vec<(isize, isize)> = positions
        .iter()
        .map(|&p| ((p as isize) / gw, (p as isize) % gw))
        .collect();
    let mut out = Vec::with_capacity(positions.len() * positions.len());
    for &(ri, ci) in &coords {
        for &(rj, cj) in &coords {
            let dr = ri - rj + gh - 1;
            let dc = ci - cj + gw - 1;
            out.push((dr * span + dc) as usize);
        }
    }
    Ok(out)
}

/// Materializes `heads × n × n` bias values for the given token positions.
pub fn relative_bias_submatrix<T: Scalar>(
    table: &Tensor<T>,
    geo: &TokenGridGeometry,
    positions: &[usize],
) -> Result<Tensor<T>> {
    let extent = (2 * geo.grid_h() - 1) * (2 * geo.grid_w() - 1);
    if table.shape().len() != 2 || table.shape()[1] != extent {
        return Err(Error::Shape {
            op: "relative_bias_submatrix",
            detail: format!("table {:?} does not have extent {extent}", table.shape()),
        });
    }
    let heads = table.shape()[0];
    let index = relative_bias_index(geo, positions)?;
    let n = positions.len();
    let mut data = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let row = table.row(h);
        data.extend(index.iter().map(|&i| row[i]));
    }
    Tensor::new(vec![heads, n, n], data)
}
