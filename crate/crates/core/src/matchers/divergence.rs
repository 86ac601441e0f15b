//! Divergence of a displacement field.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `du/dx + dv/dy` by central differences, one-sided at the borders, and the
/// mean absolute divergence over interior pixels.
pub fn divergence(u: &Grid, v: &Grid) -> Result<(Grid, f64)> {
    u.check_same(v)?;
    let (h, w) = u.dims();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "divergence needs at least 2x2 samples, got {h}x{w}"
        )));
    }
    let dx = |y: usize, x: usize| -> f64 {
        if x == 0 {
            u.get(y, 1) - u.get(y, 0)
        } else if x == w - 1 {
            u.get(y, w - 1) - u.get(y, w - 2)
        } else {
            0.5 * (u.get(y, x + 1) - u.get(y, x - 1))
        }
    };
    let dy = |y: usize, x: usize| -> f64 {
        if y == 0 {
            v.get(1, x) - v.get(0, x)
        } else if y == h - 1 {
            v.get(h - 1, x) - v.get(h - 2, x)
        } else {
            0.5 * (v.get(y + 1, x) - v.get(y - 1, x))
        }
    };
    let map = Grid::from_fn(h, w, |y, x| dx(y, x) + dy(y, x));
    Ok((map.clone(), interior_mean_abs(&map)))
}

/// Mean of `|x|` over pixels at least one step from the border (the whole
/// grid when no such pixel exists).
pub fn interior_mean_abs(map: &Grid) -> f64 {
    let (h, w) = map.dims();
    if h < 3 || w < 3 {
        return map.data().iter().map(|v| v.abs()).sum::<f64>() / map.data().len() as f64;
    }
    let mut sum = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            sum += map.get(y, x).abs();
        }
    }
    sum / ((h - 2) * (w - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_fields_have_zero_divergence() {
        let z = Grid::zeros(8, 9);
        assert_eq!(divergence(&z, &z).unwrap().1, 0.0);
        let u = Grid::filled(8, 9, 2.0);
        let v = Grid::filled(8, 9, -1.0);
        let (map, score) = divergence(&u, &v).unwrap();
        assert_eq!(score, 0.0);
        assert!(map.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn linear_field_has_analytic_divergence() {
        let u = Grid::from_fn(12, 10, |_, x| 0.1 * x as f64);
        let v = Grid::from_fn(12, 10, |y, _| 0.05 * y as f64);
        let (map, score) = divergence(&u, &v).unwrap();
        for y in 1..11 {
            for x in 1..9 {
                assert!((map.get(y, x) - 0.15).abs() < 1e-10);
            }
        }
        assert!((score - 0.15).abs() < 1e-10);
    }

    #[test]
    fn degenerate_field_is_error() {
        let g = Grid::zeros(1, 1);
        assert!(divergence(&g, &g).is_err());
        assert!(divergence(&Grid::zeros(3, 3), &Grid::zeros(3, 4)).is_err());
    }
}
