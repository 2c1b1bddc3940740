use super::types::{DenseMask, Image, LabelMap, MIN_SIDE};
use crate::error::{Error, Result};

/// Source coordinate of output index `o` when mapping `len_in` samples onto
/// `len_out` with half-pixel centres.
fn source_coord(o: usize, len_in: usize, len_out: usize) -> f64 {
    (o as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5
}

fn nearest_index(o: usize, len_in: usize, len_out: usize) -> usize {
    // floor((o + 0.5) * in / out), computed exactly in integers
    (((2 * o + 1) * len_in) / (2 * len_out)).min(len_in - 1)
}

/// Bilinear resampling with half-pixel centres. Returns an exact copy when
/// the size is unchanged.
pub fn resize_image(image: &Image, height: usize, width: usize) -> Result<Image> {
    if image.dims() == (height, width) {
        return Ok(image.clone());
    }
    let (h_in, w_in) = image.dims();
    let taps = |len_out: usize, len_in: usize| -> Vec<(usize, usize, f64)> {
        (0..len_out)
            .map(|o| {
                let s = source_coord(o, len_in, len_out).clamp(0.0, (len_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, h_in), taps(width, w_in));
    let mut pixels = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
            let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Image::new(height, width, pixels)
}

fn resize_nearest(labels: &[u8], h_in: usize, w_in: usize, height: usize, width: usize) -> Vec<u8> {
    let cols: Vec<usize> = (0..width).map(|o| nearest_index(o, w_in, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for oy in 0..height {
        let row = nearest_index(oy, h_in, height) * w_in;
        out.extend(cols.iter().map(|&c| labels[row + c]));
    }
    out
}

/// Nearest-label resampling; output values are a subset of input values.
pub fn resize_labels(labels: &LabelMap, height: usize, width: usize) -> LabelMap {
    let (h, w) = labels.dims();
    LabelMap::new(height, width, resize_nearest(labels.labels(), h, w, height, width))
        .expect("resized label map has the requested size")
}

pub fn resize_mask(mask: &DenseMask, height: usize, width: usize) -> DenseMask {
    let (h, w) = mask.dims();
    DenseMask::new(height, width, resize_nearest(mask.labels(), h, w, height, width))
        .expect("nearest resampling keeps masks binary")
}

/// Resizes an image smoothly and its mask by nearest label to `side × side`.
pub fn resize_pair(image: &Image, mask: &DenseMask, side: usize) -> Result<(Image, DenseMask)> {
    if side < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "resize side must be at least {MIN_SIDE}, got {side}"
        )));
    }
    if image.dims() != mask.dims() {
        let (ih, iw) = image.dims();
        let (mh, mw) = mask.dims();
        return Err(Error::shape("resize_pair", &[ih, iw], &[mh, mw]));
    }
    Ok((resize_image(image, side, side)?, resize_mask(mask, side, side)))
}
