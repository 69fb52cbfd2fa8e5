//! Image quality metrics and the evaluation report writer.

use crate::error::{DehazeError, Result};
use crate::vq::CodeSequence;
use ndarray::Array3;
use std::io::Write;
use std::path::Path;

/// Peak signal-to-noise ratio in dB for [0,1] images. Identical images
/// report the 99 dB cap rather than infinity.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Mean SSIM over non-overlapping 8x8 windows, channels averaged.
/// Uses the standard constants for unit dynamic range.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let (h, w, chans) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    const WIN: usize = 8;
    if h < WIN || w < WIN {
        return Err(DehazeError::contract("ssim needs images of at least 8x8"));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..chans {
        for wy in 0..h / WIN {
            for wx in 0..w / WIN {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                for y in 0..WIN {
                    for x in 0..WIN {
                        ma += a[(wy * WIN + y, wx * WIN + x, c)] as f64;
                        mb += b[(wy * WIN + y, wx * WIN + x, c)] as f64;
                    }
                }
                let n = (WIN * WIN) as f64;
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for y in 0..WIN {
                    for x in 0..WIN {
                        let da = a[(wy * WIN + y, wx * WIN + x, c)] as f64 - ma;
                        let db = b[(wy * WIN + y, wx * WIN + x, c)] as f64 - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of positions where the two code grids agree.
pub fn code_accuracy(pred: &CodeSequence, target: &CodeSequence) -> Result<f64> {
    if pred.0.shape() != target.0.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", target.0.shape()),
            got: format!("{:?}", pred.0.shape()),
        });
    }
    let same = pred
        .0
        .iter()
        .zip(target.0.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / pred.0.len() as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (the Mann-Whitney formulation of ROC AUC).
pub fn ranking_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DehazeError::contract("auc inputs must align"));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 0)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DehazeError::contract("auc needs both classes present"));
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub code_accuracy: f64,
}

/// Per-image rows plus mean aggregates, serialized as CSV with a fixed
/// header and a trailing `mean` row.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, psnr: f64, ssim: f64, code_accuracy: f64) {
        self.rows.push(EvalRow {
            name: name.into(),
            psnr,
            ssim,
            code_accuracy,
        });
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_code_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.code_accuracy).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr,ssim,code_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.name, r.psnr, r.ssim, r.code_accuracy
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_code_accuracy()
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn psnr_identical_caps_at_99() {
        let a = Array3::from_elem((8, 8, 3), 0.4f32);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    }

    #[test]
    fn psnr_unit_mse_is_zero() {
        let a = Array3::from_elem((8, 8, 3), 0.0f32);
        let b = Array3::from_elem((8, 8, 3), 1.0f32);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-9);
    }

    #[test]
    fn psnr_half_range_hand_value() {
        // uniform error of 0.5 -> MSE 0.25 -> 10*log10(4) = 6.0206 dB
        let a = Array3::from_elem((8, 8, 3), 0.25f32);
        let b = Array3::from_elem((8, 8, 3), 0.75f32);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Array3::from_elem((8, 8, 3), 0.5f32);
        let b = Array3::from_elem((8, 9, 3), 0.5f32);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 13 + x * 5 + c) % 17) as f32 / 16.0
        });
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_orders_by_degradation() {
        let a = Array3::from_shape_fn((16, 16, 3), |(y, x, _)| ((y + x) % 9) as f32 / 8.0);
        let slight = a.mapv(|v| (v + 0.02).min(1.0));
        let heavy = a.mapv(|v| (v * 0.3 + 0.5).min(1.0));
        let s1 = ssim(&a, &slight).unwrap();
        let s2 = ssim(&a, &heavy).unwrap();
        assert!(s1 > s2);
        assert!(s1 > 0.8 && s1 <= 1.0);
    }

    #[test]
    fn code_accuracy_counts_matches() {
        let a = CodeSequence(Array2::from_shape_vec((2, 2), vec![1, 2, 3, 4]).unwrap());
        let b = CodeSequence(Array2::from_shape_vec((2, 2), vec![1, 2, 9, 4]).unwrap());
        assert!((code_accuracy(&a, &b).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(code_accuracy(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn auc_separable_and_random() {
        let perfect = ranking_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(perfect, 1.0);
        let inverted = ranking_auc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap();
        assert_eq!(inverted, 0.0);
        let ties = ranking_auc(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(ties, 0.5);
        assert!(ranking_auc(&[0.5], &[1]).is_err());
    }

    #[test]
    fn report_mean_matches_rows() {
        let mut r = EvalReport::default();
        r.push("a", 20.0, 0.8, 0.5);
        r.push("b", 30.0, 0.6, 0.7);
        assert!((r.mean_psnr() - 25.0).abs() < 1e-9);
        assert!((r.mean_ssim() - 0.7).abs() < 1e-9);
        assert!((r.mean_code_accuracy() - 0.6).abs() < 1e-9);
        let csv = r.to_csv();
        assert!(csv.starts_with("name,psnr,ssim,code_accuracy\n"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
