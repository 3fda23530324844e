//! Parameter-free RMS normalization over the last axis.

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RmsCache {
    dim: usize,
    y: Vec<f64>,
    inv_rms: Vec<f64>,
}

/// `y = x / sqrt(mean(x²) + ε)` for each row of `dim` values.
pub fn rms_norm(x: &[f64], dim: usize) -> (Vec<f64>, RmsCache) {
    assert!(dim > 0 && x.len() % dim == 0);
    let mut y = Vec::with_capacity(x.len());
    let mut inv_rms = Vec::with_capacity(x.len() / dim);
    for row in x.chunks(dim) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        y.extend(row.iter().map(|v| v * r));
        inv_rms.push(r);
    }
    (y.clone(), RmsCache { dim, y, inv_rms })
}

pub fn rms_norm_backward(cache: &RmsCache, gy: &[f64]) -> Vec<f64> {
    let dim = cache.dim;
    let mut gx = Vec::with_capacity(gy.len());
    for ((g, y), r) in gy.chunks(dim).zip(cache.y.chunks(dim)).zip(&cache.inv_rms) {
        let proj = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        gx.extend(g.iter().zip(y).map(|(g, y)| r * (g - y * proj)));
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_rms_rows() {
        let (y, _) = rms_norm(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0], 2);
        let want = 1.0 / (12.5f64 + RMS_EPS).sqrt();
        assert!((y[0] - 3.0 * want).abs() < 1e-15 && (y[1] - 4.0 * want).abs() < 1e-15);
        assert_eq!(&y[2..], &[0.0; 4]);
    }

    #[test]
    fn backward_matches_differences() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) as f64 * 0.37).sin() * 2.0).collect();
        let gy: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).cos()).collect();
        let f = |x: &[f64]| -> f64 { rms_norm(x, 4).0.iter().zip(&gy).map(|(a, b)| a * b).sum() };
        let (_, cache) = rms_norm(&x, 4);
        let gx = rms_norm_backward(&cache, &gy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            assert!(((f(&up) - f(&dn)) / (2.0 * h) - gx[i]).abs() < 1e-8, "{i}");
        }
    }
}
