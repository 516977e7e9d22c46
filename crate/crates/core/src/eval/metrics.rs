use crate::error::{invalid, Result};
use crate::image::Image;
use crate::synthdata::EditMask;

/// Mean squared pixel difference over the off-target (`mask = false`)
/// region, all channels (lpips-proxy).
pub fn source_fidelity(image: &Image, reference: &Image, mask: &EditMask) -> Result<f64> {
    image.ensure_same_dims(reference)?;
    let d = image.dims();
    if mask.height() != d.height || mask.width() != d.width {
        return Err(invalid(format!("mask {}x{} does not match image {d}", mask.height(), mask.width())));
    }
    if mask.off_target_area() == 0 {
        return Err(invalid("mask leaves no off-target pixels"));
    }
    let mut total = 0.0f64;
    for c in 0..d.channels {
        let plane = c * d.pixels()..(c + 1) * d.pixels();
        for ((&a, &b), &m) in image.data()[plane.clone()].iter().zip(&reference.data()[plane]).zip(mask.as_slice()) {
            if !m {
                total += f64::from(a - b).powi(2);
            }
        }
    }
    Ok(total / (mask.off_target_area() * d.channels) as f64)
}

/// Mean squared difference over every pixel.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| f64::from(x - y).powi(2)).sum::<f64>() / a.data().len() as f64)
}

/// `1 − (mean pairwise output variance / mean pairwise input variance)`.
/// The pairwise variance of two images is the mean over pixels of
/// `(a − b)² / 2`. 0 when outputs vary as much as their inputs, 1 when every
/// output is identical.
pub fn mode_collapse_index(inputs: &[Image], outputs: &[Image]) -> Result<f64> {
    if inputs.len() != outputs.len() {
        return Err(invalid("inputs and outputs differ in count"));
    }
    if inputs.len() < 2 {
        return Err(invalid("need at least two outputs"));
    }
    let pairwise = |set: &[Image]| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                total += mse(&set[i], &set[j])? / 2.0;
                count += 1;
            }
        }
        Ok(total / count as f64)
    };
    let vin = pairwise(inputs)?;
    if vin == 0.0 {
        return Err(invalid("inputs are identical; collapse is undefined"));
    }
    Ok(1.0 - pairwise(outputs)? / vin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageDims;
    use crate::rng;
    use rand::Rng as _;

    fn mask() -> EditMask {
        EditMask::new(4, 4, (0..16).map(|i| i % 5 == 0).collect()).unwrap()
    }

    #[test]
    fn off_target_mse_ignores_edits_inside_mask() {
        let d = ImageDims::rgb(4, 4);
        let r = Image::from_vec(d, (0..48).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        assert_eq!(source_fidelity(&r, &r, &mask()).unwrap(), 0.0);
        let mut e = r.clone();
        for c in 0..3 {
            for (p, &m) in mask().as_slice().iter().enumerate() {
                if m {
                    e.data_mut()[c * 16 + p] += 0.7;
                }
            }
        }
        assert_eq!(source_fidelity(&e, &r, &mask()).unwrap(), 0.0);
        assert!(source_fidelity(&e, &Image::zeros(ImageDims::rgb(2, 2)), &mask()).is_err());
    }

    #[test]
    fn noise_calibration() {
        // for u ~ U(−1, 1): E[(r − u)²] = r² + 1/3
        let d = ImageDims::rgb(16, 16);
        let r = Image::from_vec(d, (0..d.len()).map(|i| (i as f32 * 0.37).cos() * 0.9).collect()).unwrap();
        let m = EditMask::new(16, 16, (0..256).map(|i| i < 40).collect()).unwrap();
        let mut expect = 0.0;
        for c in 0..3 {
            for p in 40..256 {
                expect += f64::from(r.data()[c * 256 + p]).powi(2) + 1.0 / 3.0;
            }
        }
        expect /= (216 * 3) as f64;
        let mut g = rng::rng(5);
        let mut measured = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let u = Image::from_vec(d, (0..d.len()).map(|_| g.gen_range(-1.0..1.0)).collect()).unwrap();
            measured += source_fidelity(&u, &r, &m).unwrap();
        }
        measured /= f64::from(trials);
        assert!((measured - expect).abs() < 0.01, "{measured} vs {expect}");
    }

    #[test]
    fn collapse_index_limits() {
        let d = ImageDims::rgb(2, 2);
        let ins: Vec<Image> = (0..4).map(|k| Image::from_vec(d, (0..12).map(|i| ((i * 7 + k * 3) as f32).sin()).collect()).unwrap()).collect();
        assert!(mode_collapse_index(&ins, &ins).unwrap().abs() < 1e-12);
        let same = vec![ins[0].clone(); 4];
        assert_eq!(mode_collapse_index(&ins, &same).unwrap(), 1.0);
        assert!(mode_collapse_index(&same, &ins).is_err());
        assert!(mode_collapse_index(&ins[..1], &ins[..1]).is_err());
    }
}
