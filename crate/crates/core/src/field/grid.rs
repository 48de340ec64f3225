use crate::error::{Error, Result};

/// Output-pixel coordinates `(x, y)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
    coords: Vec<(f64, f64)>,
}

impl CoordinateGrid {
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        self.coords[y * self.width + x]
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }
}

pub fn identity_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "grid must be at least 1x1, got {height}x{width}"
        )));
    }
    let coords = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64, y as f64)))
        .collect();
    Ok(CoordinateGrid {
        height,
        width,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel() {
        let g = identity_grid(1, 1).unwrap();
        assert_eq!(g.coords(), &[(0.0, 0.0)]);
    }

    #[test]
    fn two_by_three() {
        let g = identity_grid(2, 3).unwrap();
        assert_eq!(
            g.coords(),
            &[
                (0.0, 0.0),
                (1.0, 0.0),
                (2.0, 0.0),
                (0.0, 1.0),
                (1.0, 1.0),
                (2.0, 1.0)
            ]
        );
    }

    #[test]
    fn x_sum_matches_closed_form() {
        for (h, w) in [(1, 1), (3, 7), (16, 32), (5, 2)] {
            let g = identity_grid(h, w).unwrap();
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sum += g.get(y, x).0;
                }
            }
            assert_eq!(sum, (h * w * (w - 1)) as f64 / 2.0);
        }
    }

    #[test]
    fn zero_dimension_is_an_error() {
        assert!(matches!(identity_grid(0, 4), Err(Error::Dimension(_))));
        assert!(matches!(identity_grid(4, 0), Err(Error::Dimension(_))));
    }
}
