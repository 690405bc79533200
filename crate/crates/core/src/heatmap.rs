//! Activation heatmaps: the channel mean of the final feature map,
//! normalized and upsampled back to input resolution. Bright regions mark
//! where the network's deepest features respond most strongly.

use crate::error::{Error, Result};
use crate::model::RmfnModel;
use crate::tensor::Tensor;

/// Mean over channels: [C, H, W] -> [H, W].
pub fn channel_mean(fm: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = fm.shape() else {
        return Err(Error::Shape(format!(
            "channel mean needs a [C, H, W] tensor, got {:?}",
            fm.shape()
        )));
    };
    let mut out = Tensor::zeros(&[h, w]);
    let data = fm.data();
    let plane = h * w;
    for ch in 0..c {
        let src = &data[ch * plane..(ch + 1) * plane];
        for (o, &v) in out.data_mut().iter_mut().zip(src) {
            *o += v;
        }
    }
    out.scale(1.0 / c as f64);
    Ok(out)
}

/// Min-max normalization to [0, 1]. A constant map has no contrast to
/// stretch and becomes 0.5 everywhere.
pub fn normalize(map: &Tensor) -> Result<Tensor> {
    map.ensure_finite("heatmap")?;
    let data = map.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let out = if range == 0.0 {
        vec![0.5; data.len()]
    } else {
        data.iter().map(|&v| (v - lo) / range).collect()
    };
    Tensor::from_vec(map.shape(), out)
}

/// Nearest-neighbor upsampling of [H, W] to [side, side], mapping output
/// pixel i to source pixel floor(i * src / side).
pub fn upsample_nearest(map: &Tensor, side: usize) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape(format!(
            "upsampling needs a [H, W] tensor, got {:?}",
            map.shape()
        )));
    };
    if side < h || side < w {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to smaller side {side}"
        )));
    }
    let src = map.data();
    let mut out = Tensor::zeros(&[side, side]);
    let data = out.data_mut();
    for y in 0..side {
        let sy = y * h / side;
        for x in 0..side {
            data[y * side + x] = src[sy * w + x * w / side];
        }
    }
    Ok(out)
}

/// Blends the heatmap over a grayscale image: each output pixel is
/// (1 - weight) * image + weight * heat, rendered as 8-bit gray.
pub fn overlay(image: &[u8], heat: &Tensor, weight: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Config(format!(
            "overlay weight must be in [0, 1], got {weight}"
        )));
    }
    if heat.numel() != image.len() {
        return Err(Error::Shape(format!(
            "heatmap has {} values but the image has {} pixels",
            heat.numel(),
            image.len()
        )));
    }
    Ok(image
        .iter()
        .zip(heat.data())
        .map(|(&p, &h)| {
            let v = (1.0 - weight) * (p as f64 / 255.0) + weight * h;
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// Runs inference and produces the input-resolution heatmap in [0, 1].
pub fn render(model: &RmfnModel, image: &Tensor) -> Result<Tensor> {
    let (_, fm3) = model.infer(image)?;
    let mean = channel_mean(&fm3)?;
    let norm = normalize(&mean)?;
    upsample_nearest(&norm, model.config.input_side)
}

/// Mean heat inside and outside a 0/255 ground-truth mask. Both regions
/// must be nonempty.
pub fn mask_means(heat: &Tensor, mask: &[u8]) -> Result<(f64, f64)> {
    if heat.numel() != mask.len() {
        return Err(Error::Shape(format!(
            "heatmap has {} values but the mask has {} pixels",
            heat.numel(),
            mask.len()
        )));
    }
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in heat.data().iter().zip(mask) {
        if m > 0 {
            in_sum += v;
            in_n += 1;
        } else {
            out_sum += v;
            out_n += 1;
        }
    }
    if in_n == 0 || out_n == 0 {
        return Err(Error::Data(
            "mask must contain both lesion and background pixels".into(),
        ));
    }
    Ok((in_sum / in_n as f64, out_sum / out_n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::model::testutil::{random_image, tiny_config};
    use crate::model::{build_model, RmfnVariant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_mean_averages_planes() {
        let fm = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mean = channel_mean(&fm).unwrap();
        assert_eq!(mean.shape(), &[2, 2]);
        assert_eq!(mean.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn normalize_stretches_to_unit_range() {
        let map = Tensor::from_vec(&[1, 3], vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize(&map).unwrap().data(), &[0.0, 0.5, 1.0]);
        let flat = Tensor::filled(&[2, 2], 3.25);
        assert_eq!(normalize(&flat).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let map = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&map, 4).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        // non-integer ratio still uses the floor source index
        let up3 = upsample_nearest(&map, 3).unwrap();
        assert_eq!(up3.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
        assert!(upsample_nearest(&map, 1).is_err());
    }

    #[test]
    fn overlay_blends_linearly() {
        let heat = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let out = overlay(&[100], &heat, 0.4).unwrap();
        // 0.6 * 100 + 0.4 * 0.5 * 255 = 111
        assert_eq!(out, vec![111]);
        assert!(overlay(&[100], &heat, 1.5).is_err());
        assert!(overlay(&[100, 100], &heat, 0.5).is_err());
    }

    #[test]
    fn mask_means_separates_regions() {
        let heat = Tensor::from_vec(&[2, 2], vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let (inside, outside) = mask_means(&heat, &[255, 0, 0, 255]).unwrap();
        assert!((inside - 0.8).abs() < 1e-12);
        assert!((outside - 0.2).abs() < 1e-12);
        assert!(mask_means(&heat, &[255; 4]).is_err());
        assert!(mask_means(&heat, &[0; 4]).is_err());
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let model = build_model(&tiny_config(RmfnVariant::C), 11).unwrap();
        let image = random_image(16, 1, 5);
        let h1 = render(&model, &image).unwrap();
        let h2 = render(&model, &image).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.shape(), &[16, 16]);
        assert!(h1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // matches the manual pipeline stage by stage
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&image, Mode::Infer, &mut rng).unwrap();
        let manual =
            upsample_nearest(&normalize(&channel_mean(&pass.fm3).unwrap()).unwrap(), 16).unwrap();
        assert_eq!(h1, manual);
    }
}
