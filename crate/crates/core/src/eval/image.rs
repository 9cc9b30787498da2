use crate::error::{Error, Result};

/// PSNR ceiling used when the images match to numerical precision.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;

/// Borrowed row-major `[H, W, C]` image.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl<'a> ImageView<'a> {
    pub fn new(data: &'a [f32], height: usize, width: usize, channels: usize) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Metric(format!("{} values for a {height}x{width}x{channels} image", data.len())));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
        })
    }

    fn same_shape(&self, other: &ImageView<'_>) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::Metric(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    /// Channel-mean luminance.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }
}

pub fn mse(a: &ImageView<'_>, b: &ImageView<'_>) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a.data.iter().zip(b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &ImageView<'_>, b: &ImageView<'_>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::Metric(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Mean SSIM over 8×8 grayscale windows at stride 4.
pub fn ssim(a: &ImageView<'_>, b: &ImageView<'_>, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Metric(format!("image {}x{} is smaller than the SSIM window", a.height, a.width)));
    }
    let (ga, gb) = (a.gray(), b.gray());
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in (0..=a.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x0 in (0..=a.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (u, v) = (ga[y * a.width + x], gb[y * a.width + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
