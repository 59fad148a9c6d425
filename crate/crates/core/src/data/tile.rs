//! Non-overlapping tiling of large scenes into fixed-size patches.

use super::grid::Planar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    /// Remainders smaller than a tile are discarded.
    Drop,
    /// The scene is zero-padded up to a whole number of tiles.
    Pad,
}

/// Where every tile came from, enough to put them back together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileIndex {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub source_height: usize,
    pub source_width: usize,
    /// Top-left corner of each tile, row-major.
    pub origins: Vec<(usize, usize)>,
}

impl TileIndex {
    /// Region of the source covered by the tiles (may exceed it under `Pad`).
    pub fn covered(&self) -> (usize, usize) {
        (self.rows * self.tile_size, self.cols * self.tile_size)
    }
}

pub fn tile<T: Copy + Default>(
    image: &Planar<T>,
    tile_size: usize,
    policy: EdgePolicy,
) -> Result<(Vec<Planar<T>>, TileIndex)> {
    if tile_size == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    if tile_size > image.height || tile_size > image.width {
        return Err(Error::InvalidArgument(format!(
            "tile size {tile_size} larger than image {}x{}",
            image.height, image.width
        )));
    }
    let (rows, cols, source) = match policy {
        EdgePolicy::Drop => (image.height / tile_size, image.width / tile_size, image.clone()),
        EdgePolicy::Pad => {
            let rows = image.height.div_ceil(tile_size);
            let cols = image.width.div_ceil(tile_size);
            let mut padded = Planar::new(image.channels, rows * tile_size, cols * tile_size);
            for c in 0..image.channels {
                for y in 0..image.height {
                    let src = image.idx(c, y, 0);
                    let dst = padded.idx(c, y, 0);
                    padded.data[dst..dst + image.width].copy_from_slice(&image.data[src..src + image.width]);
                }
            }
            (rows, cols, padded)
        }
    };
    let mut tiles = Vec::with_capacity(rows * cols);
    let mut origins = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * tile_size, c * tile_size);
            tiles.push(source.crop(y0, x0, tile_size, tile_size)?);
            origins.push((y0, x0));
        }
    }
    Ok((
        tiles,
        TileIndex {
            tile_size,
            rows,
            cols,
            source_height: image.height,
            source_width: image.width,
            origins,
        },
    ))
}

/// Inverse of [`tile`]: rebuilds the covered region.
pub fn reassemble<T: Copy + Default>(tiles: &[Planar<T>], index: &TileIndex) -> Result<Planar<T>> {
    if tiles.len() != index.origins.len() {
        return Err(Error::Shape(format!(
            "{} tiles for an index of {}",
            tiles.len(),
            index.origins.len()
        )));
    }
    let channels = tiles.first().map_or(1, |t| t.channels);
    let (h, w) = index.covered();
    let mut out = Planar::new(channels, h, w);
    let s = index.tile_size;
    for (t, &(y0, x0)) in tiles.iter().zip(&index.origins) {
        if t.height != s || t.width != s || t.channels != channels {
            return Err(Error::Shape("tile dimensions do not match the index".into()));
        }
        for c in 0..channels {
            for y in 0..s {
                let src = t.idx(c, y, 0);
                let dst = out.idx(c, y0 + y, x0);
                out.data[dst..dst + s].copy_from_slice(&t.data[src..src + s]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Planar<u16> {
        Planar::from_vec(c, h, w, (0..c * h * w).map(|i| i as u16).collect()).unwrap()
    }

    #[test]
    fn tile_counts() {
        let (t, _) = tile(&ramp(1, 1024, 1024), 256, EdgePolicy::Drop).unwrap();
        assert_eq!(t.len(), 16);
        let img = ramp(3, 256, 256);
        let (t, _) = tile(&img, 256, EdgePolicy::Drop).unwrap();
        assert_eq!(t, vec![img]);
        // 1900 wide x 1000 high.
        let (t, idx) = tile(&Planar::<u8>::new(1, 1000, 1900), 256, EdgePolicy::Drop).unwrap();
        assert_eq!((idx.rows, idx.cols, t.len()), (3, 7, 21));
        let (t, _) = tile(&Planar::<u8>::new(1, 1000, 1900), 256, EdgePolicy::Pad).unwrap();
        assert_eq!(t.len(), 4 * 8);
    }

    #[test]
    fn oversize_tile_rejected() {
        assert!(tile(&ramp(1, 10, 20), 11, EdgePolicy::Drop).is_err());
        assert!(tile(&ramp(1, 10, 20), 0, EdgePolicy::Drop).is_err());
    }

    #[test]
    fn tiles_are_row_major() {
        let img = ramp(1, 4, 6);
        let (t, idx) = tile(&img, 2, EdgePolicy::Drop).unwrap();
        assert_eq!(idx.origins[..4], [(0, 0), (0, 2), (0, 4), (2, 0)]);
        assert_eq!(t[1].data, vec![2, 3, 8, 9]);
    }

    proptest! {
        #[test]
        fn reassembly_reproduces_cropped_region(
            h in 4usize..40, w in 4usize..40, c in 1usize..4, s in 1usize..4, pad in any::<bool>()
        ) {
            let img = ramp(c, h, w);
            let policy = if pad { EdgePolicy::Pad } else { EdgePolicy::Drop };
            let (tiles, idx) = tile(&img, s, policy).unwrap();
            let back = reassemble(&tiles, &idx).unwrap();
            let (ch, cw) = idx.covered();
            let (vh, vw) = (ch.min(h), cw.min(w));
            prop_assert_eq!(back.crop(0, 0, vh, vw).unwrap(), img.crop(0, 0, vh, vw).unwrap());
            if pad {
                prop_assert!(ch >= h && cw >= w);
            } else {
                prop_assert_eq!((ch, cw), (h / s * s, w / s * s));
            }
        }
    }
}
