/// One 8-bit image, `C x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Isotropic bilinear resize so that the shorter side equals `target`.
///
/// Sampling uses half-pixel centers: output pixel `i` reads the source at
/// `(i + 0.5) · in/out − 0.5`, clamped to the border.
pub fn resize_shorter_side(image: &Image, target: usize) -> Image {
    assert!(target >= 1, "resize target must be positive");
    let (h, w) = (image.height, image.width);
    let shorter = h.min(w);
    if shorter == target {
        return image.clone();
    }
    let scale = target as f64 / shorter as f64;
    let (oh, ow) = if h <= w {
        (target, ((w as f64 * scale).round() as usize).max(1))
    } else {
        (((h as f64 * scale).round() as usize).max(1), target)
    };
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (rows, cols) = (taps(oh, h), taps(ow, w));
    let mut pixels = Vec::with_capacity(image.channels * oh * ow);
    for c in 0..image.channels {
        let plane = &image.pixels[c * h * w..(c + 1) * h * w];
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let p = |r: usize, col: usize| plane[r * w + col] as f64;
                let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
                let bottom = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image { channels: image.channels, height: oh, width: ow, pixels }
}
