use crate::error::{Error, Result};

/// Square RGB image, row-major with interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(Error::Argument(format!("image of side {side} needs {} values, got {}", side * side * 3, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.side + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Flattened patches, patch-major in raster order; each patch lists its
    /// pixels row by row with channels interleaved.
    pub fn patchify(&self, patch: usize) -> Vec<f64> {
        let grid = self.side / patch;
        let mut out = Vec::with_capacity(self.data.len());
        for pr in 0..grid {
            for pc in 0..grid {
                for y in 0..patch {
                    let row = pr * patch + y;
                    let start = (row * self.side + pc * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 / 100.0).collect();
        let img = Image::new(4, data).unwrap();
        let p = img.patchify(2);
        // second patch starts at pixel (0, 2)
        assert_eq!(p[12], img.pixel(0, 2)[0]);
        // its second row is pixel (1, 2)
        assert_eq!(p[12 + 6], img.pixel(1, 2)[0]);
        assert!(Image::new(2, vec![2.0; 12]).is_err());
    }
}
