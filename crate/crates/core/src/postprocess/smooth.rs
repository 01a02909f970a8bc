//! Separable Gaussian smoothing and adaptive soft-thresholding of loadings.

use crate::grid::SpatialGrid;

/// Normalized 1-D Gaussian kernel truncated at `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Smooth active-voxel values with an isotropic Gaussian of standard deviation `sigma`
/// (voxel units). Out-of-mask voxels carry no weight; kernels are renormalized over the
/// voxels that remain.
pub fn gaussian_smooth(grid: &SpatialGrid, values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let dims = grid.dims();
    let full_mask: Vec<bool> = match grid.mask() {
        Some(m) => m.to_vec(),
        None => vec![true; grid.full_len()],
    };
    let masked = grid.is_masked();
    let mut cur = grid.embed(values);
    let mut next = vec![0.0; cur.len()];
    let mut strides = vec![1usize; dims.len()];
    for d in (0..dims.len() - 1).rev() {
        strides[d] = strides[d + 1] * dims[d + 1];
    }
    for (d, &n) in dims.iter().enumerate() {
        let st = strides[d];
        let n_i = n as i64;
        for lin in 0..cur.len() {
            if !full_mask[lin] {
                next[lin] = 0.0;
                continue;
            }
            let pos = ((lin / st) % n) as i64;
            let base = lin - pos as usize * st;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (o, &w) in kernel.iter().enumerate() {
                let q = reflect(pos + o as i64 - r, n_i);
                let idx = base + q * st;
                if full_mask[idx] {
                    acc += w * cur[idx];
                    wsum += w;
                }
            }
            next[lin] = if masked { acc / wsum } else { acc };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    grid.restrict(&cur)
}

/// `sgn(x) max(|x| - kappa / x^2, 0)`, with zeros left at zero.
pub fn adaptive_shrink(values: &[f64], kappa: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&x| {
            if x == 0.0 || kappa == 0.0 {
                return x;
            }
            let t = kappa / (x * x);
            x.signum() * (x.abs() - t).max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_examples() {
        let out = adaptive_shrink(&[0.5, 0.1, -0.5, 0.0], 0.1);
        assert!((out[0] - 0.1).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] + 0.1).abs() < 1e-15);
        assert_eq!(out[3], 0.0);
        assert_eq!(adaptive_shrink(&[0.3, -2.0], 0.0), vec![0.3, -2.0]);
    }

    #[test]
    fn zero_sigma_and_constants() {
        let g = SpatialGrid::new(vec![7, 5]).unwrap();
        let v: Vec<f64> = (0..35).map(|i| (i as f64).sin()).collect();
        assert_eq!(gaussian_smooth(&g, &v, 0.0), v);
        let c = vec![2.5; 35];
        for s in [0.5, 1.0, 3.0, 10.0] {
            for x in gaussian_smooth(&g, &c, s) {
                assert!((x - 2.5).abs() < 1e-12);
            }
        }
        let mask: Vec<bool> = (0..35).map(|i| i % 3 != 0).collect();
        let gm = SpatialGrid::with_mask(vec![7, 5], mask).unwrap();
        let c = vec![1.0; gm.n_active()];
        for x in gaussian_smooth(&gm, &c, 1.5) {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let n = 41;
        let g = SpatialGrid::new(vec![n, n]).unwrap();
        let mut v = vec![0.0; n * n];
        v[20 * n + 20] = 1.0;
        let sigma = 2.0;
        let out = gaussian_smooth(&g, &v, sigma);
        let r = 8i64;
        let mut z = 0.0;
        for dx in -r..=r {
            for dy in -r..=r {
                z += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for x in 0..n as i64 {
            for y in 0..n as i64 {
                let (dx, dy) = (x - 20, y - 20);
                let expect = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / z
                } else {
                    0.0
                };
                assert!((out[(x * n as i64 + y) as usize] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn smoothing_is_linear() {
        let g = SpatialGrid::new(vec![9, 6]).unwrap();
        let x: Vec<f64> = (0..54).map(|i| (i as f64 * 0.3).cos()).collect();
        let y: Vec<f64> = (0..54).map(|i| (i as f64 * 0.7).sin()).collect();
        let comb: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let sx = gaussian_smooth(&g, &x, 1.3);
        let sy = gaussian_smooth(&g, &y, 1.3);
        let sc = gaussian_smooth(&g, &comb, 1.3);
        for i in 0..54 {
            assert!((sc[i] - (2.0 * sx[i] - 3.0 * sy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(9, 4), 1);
    }
}
