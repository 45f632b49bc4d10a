use super::DataError;

fn check(len: usize, width: usize, height: usize, side: usize) -> Result<(), DataError> {
    if width == 0 || height == 0 || len != width * height {
        return Err(DataError::Invalid(format!("{len} values do not form a {width}x{height} image")));
    }
    if side < 16 {
        return Err(DataError::Invalid(format!("target side {side} is below the minimum of 16")));
    }
    Ok(())
}

/// Bilinear resampling to `side x side` with pixel-center alignment.
pub fn resize_image(image: &[f32], width: usize, height: usize, side: usize) -> Result<Vec<f32>, DataError> {
    check(image.len(), width, height, side)?;
    if width == side && height == side {
        return Ok(image.to_vec());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / side as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(side, width);
    let ys = axis(side, height);
    let mut out = Vec::with_capacity(side * side);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p = |y: usize, x: usize| image[y * width + x];
            let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
            let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resampling, so class codes survive unchanged.
pub fn resize_mask(mask: &[u8], width: usize, height: usize, side: usize) -> Result<Vec<u8>, DataError> {
    check(mask.len(), width, height, side)?;
    let pick = |o: usize, src: usize| (((o as f64 + 0.5) * src as f64 / side as f64) as usize).min(src - 1);
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let y = pick(oy, height);
        for ox in 0..side {
            out.push(mask[y * width + pick(ox, width)]);
        }
    }
    Ok(out)
}
