//! Small dense kernels used by the forward and backward passes.
//!
//! Everything is plain f32 with a fixed accumulation order, so results are
//! bitwise reproducible across runs.

/// y[b, o] += sum_k x[b, k] * w[o, k]   (w stored row-major `[out, in]`)
///
/// This is the layer forward product: `x @ w^T`.
pub fn matmul_xwt(x: &[f32], w: &[f32], y: &mut [f32], batch: usize, din: usize, dout: usize) {
    debug_assert_eq!(x.len(), batch * din);
    debug_assert_eq!(w.len(), dout * din);
    debug_assert_eq!(y.len(), batch * dout);
    for b in 0..batch {
        let xr = &x[b * din..(b + 1) * din];
        let yr = &mut y[b * dout..(b + 1) * dout];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * din..(o + 1) * din];
            let mut acc = 0.0f32;
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *yo += acc;
        }
    }
}

/// dx[b, k] += sum_o dy[b, o] * w[o, k]
pub fn matmul_dyw(dy: &[f32], w: &[f32], dx: &mut [f32], batch: usize, din: usize, dout: usize) {
    debug_assert_eq!(dy.len(), batch * dout);
    debug_assert_eq!(w.len(), dout * din);
    debug_assert_eq!(dx.len(), batch * din);
    for b in 0..batch {
        let dyr = &dy[b * dout..(b + 1) * dout];
        let dxr = &mut dx[b * din..(b + 1) * din];
        for (o, g) in dyr.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let wr = &w[o * din..(o + 1) * din];
            for (dxv, wv) in dxr.iter_mut().zip(wr) {
                *dxv += g * wv;
            }
        }
    }
}

/// dw[o, k] += sum_b dy[b, o] * x[b, k]
pub fn matmul_dytx(dy: &[f32], x: &[f32], dw: &mut [f32], batch: usize, din: usize, dout: usize) {
    debug_assert_eq!(dy.len(), batch * dout);
    debug_assert_eq!(x.len(), batch * din);
    debug_assert_eq!(dw.len(), dout * din);
    for b in 0..batch {
        let dyr = &dy[b * dout..(b + 1) * dout];
        let xr = &x[b * din..(b + 1) * din];
        for (o, g) in dyr.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let dwr = &mut dw[o * din..(o + 1) * din];
            for (dwv, xv) in dwr.iter_mut().zip(xr) {
                *dwv += g * xv;
            }
        }
    }
}

/// db[o] += sum_b dy[b, o]
pub fn colsum(dy: &[f32], db: &mut [f32], batch: usize, dout: usize) {
    debug_assert_eq!(dy.len(), batch * dout);
    debug_assert_eq!(db.len(), dout);
    for b in 0..batch {
        let dyr = &dy[b * dout..(b + 1) * dout];
        for (dbv, g) in db.iter_mut().zip(dyr) {
            *dbv += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_product_matches_naive() {
        // x: 2x3, w: 2x3 (out=2, in=3)
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let mut y = [0.0; 4];
        matmul_xwt(&x, &w, &mut y, 2, 3, 2);
        // row 0: [1-3, 0.5*(1+2+3)] = [-2, 3]; row 1: [4-6, 7.5]
        assert_eq!(y, [-2.0, 3.0, -2.0, 7.5]);
    }

    #[test]
    fn grad_products_match_naive() {
        let dy = [1.0, -1.0];
        let w = [2.0, 3.0, 4.0, 5.0];
        let mut dx = [0.0; 2];
        matmul_dyw(&dy, &w, &mut dx, 1, 2, 2);
        assert_eq!(dx, [2.0 - 4.0, 3.0 - 5.0]);

        let x = [7.0, 8.0];
        let mut dw = [0.0; 4];
        matmul_dytx(&dy, &x, &mut dw, 1, 2, 2);
        assert_eq!(dw, [7.0, 8.0, -7.0, -8.0]);

        let mut db = [0.0; 2];
        colsum(&dy, &mut db, 1, 2);
        assert_eq!(db, [1.0, -1.0]);
    }
}
