//! Image AUROC, pixel AUROC and per-region overlap.

use std::collections::VecDeque;

use crate::error::{HdmError, Result};
use crate::grid::Grid;

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HdmError::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HdmError::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HdmError::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank2_pos += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * n_neg as u128) as f64)
}

fn check_pairs(maps: &[Grid], masks: &[Grid]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(HdmError::ShapeMismatch(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.shape() != g.shape() {
            return Err(HdmError::ShapeMismatch(format!("pair {i}: map {} vs mask {}", m.shape(), g.shape())));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of every image. Masks are binarized at 0.5.
pub fn pixel_auroc(maps: &[Grid], masks: &[Grid]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.data().iter().map(|v| *v > 0.5)).collect();
    auroc(&scores, &labels)
}

/// 8-connected components of the pixels above 0.5, each as `(y, x)` pairs in
/// discovery order. Only the first channel is read.
pub fn connected_components(mask: &Grid) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let on = |y: usize, x: usize| mask.get(0, y, x) > 0.5;
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[y0 * w + x0] || !on(y0, x0) {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(y0, x0)]);
            seen[y0 * w + x0] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if !seen[ny * w + nx] && on(ny, nx) {
                            seen[ny * w + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

/// Per-region overlap integrated up to `fpr_limit` and normalized by it.
///
/// Thresholds are the unique scores; a pixel is predicted anomalous when its
/// score is strictly above the threshold, so the curve starts at `(0, 0)`.
/// Points are joined by trapezoids, interpolated at the limit, and the last
/// point is extended flat when it falls short of the limit.
pub fn pro(maps: &[Grid], masks: &[Grid], fpr_limit: f64) -> Result<f64> {
    check_pairs(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(HdmError::Metric(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    // component id per pixel (usize::MAX for anomaly-free pixels)
    let mut comp_of = Vec::new();
    let mut sizes = Vec::new();
    let mut scores = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let w = mask.width();
        let mut ids = vec![usize::MAX; mask.shape().pixels()];
        for comp in connected_components(mask) {
            for &(y, x) in &comp {
                ids[y * w + x] = sizes.len();
            }
            sizes.push(comp.len());
        }
        comp_of.extend(ids);
        scores.extend_from_slice(&map.data()[..mask.shape().pixels()]);
    }
    if sizes.is_empty() {
        return Err(HdmError::Metric("PRO needs at least one anomalous region".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HdmError::Metric("NaN score".into()));
    }
    let n_neg = comp_of.iter().filter(|c| **c == usize::MAX).count();
    if n_neg == 0 {
        return Err(HdmError::Metric("PRO needs anomaly-free pixels".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_comp = sizes.len() as f64;
    let mut fp = 0usize;
    let mut overlap_sum = 0.0;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        if j + 1 == order.len() {
            break;
        }
        for &k in &order[i..=j] {
            match comp_of[k] {
                usize::MAX => fp += 1,
                c => overlap_sum += 1.0 / sizes[c] as f64,
            }
        }
        curve.push((fp as f64 / n_neg as f64, overlap_sum / n_comp));
        i = j + 1;
    }
    Ok(integrate_to_limit(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area under `(fpr, overlap)` points (fpr nondecreasing) over
/// `[0, limit]`.
fn integrate_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            return area;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            return area + 0.5 * (y0 + y) * (limit - x0);
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
    }
    let &(x, y) = curve.last().expect("curve starts at the origin");
    area + y * (limit - x).max(0.0)
}

/// Values written to an evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
}

/// All three metrics; image scores are the map maxima.
pub fn evaluate(maps: &[Grid], masks: &[Grid], fpr_limit: f64) -> Result<EvalReport> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps.iter().map(|m| m.max()).collect();
    let labels: Vec<bool> = masks.iter().map(|m| m.data().iter().any(|v| *v > 0.5)).collect();
    Ok(EvalReport {
        image_auroc: auroc(&scores, &labels)?,
        pixel_auroc: pixel_auroc(maps, masks)?,
        pro: pro(maps, masks, fpr_limit)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(HdmError::Metric(_))));
    }

    #[test]
    fn diagonal_pixels_join() {
        let m = Grid::from_rows(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let c = connected_components(&m);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 2);
    }

    #[test]
    fn pro_examples() {
        let gt = Grid::from_rows(4, 4, (0..16).map(|i| f64::from(i % 5 == 0)).collect()).unwrap();
        assert!((pro(&[gt.clone()], &[gt.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12);
        let zero = Grid::zeros(gt.shape());
        assert_eq!(pro(&[zero], &[gt.clone()], 0.3).unwrap(), 0.0);
        let empty = Grid::zeros(gt.shape());
        assert!(pro(&[gt], &[empty], 0.3).is_err());
    }
}
