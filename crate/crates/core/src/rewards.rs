//! Geometric and perceptual-proxy rewards.
//!
//! Layout agreement is the optimal one-to-one same-class box assignment,
//! solved exactly in rational arithmetic so that ties and near-ties resolve
//! identically to a permutation brute force. The two image scores are
//! bounded deterministic stand-ins for learned scorers:
//!
//! * `clip_proxy(a, b) = 0.5 * cell agreement + 0.5 * cosine(class histograms)`
//! * `hps_proxy(img) = mean region solidity * min(1, painted / 16)`

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{regions, BoxSpec, GridImage, Layout, CELLS, NUM_CLASSES};

/// Largest layout the exact matcher accepts on either side.
pub const MATCH_CAP: usize = 8;
/// Painted-cell count at which the coverage gate of `hps_proxy` saturates.
pub const COVERAGE_CELLS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda_iou: f64,
    pub lambda_clip: f64,
    pub lambda_hps: f64,
}

impl Default for RewardWeights {
    /// 1 / 1 / 2.
    fn default() -> Self {
        Self {
            lambda_iou: 1.0,
            lambda_clip: 1.0,
            lambda_hps: 2.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_clip", self.lambda_clip),
            ("lambda_hps", self.lambda_hps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-sample reward components; absent components contribute nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub iou: Option<f64>,
    pub clip_proxy: Option<f64>,
    pub hps_proxy: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(iou: Option<f64>, clip: Option<f64>, hps: Option<f64>, w: &RewardWeights) -> Self {
        let total = iou.map_or(0.0, |v| w.lambda_iou * v)
            + clip.map_or(0.0, |v| w.lambda_clip * v)
            + hps.map_or(0.0, |v| w.lambda_hps * v);
        Self {
            iou,
            clip_proxy: clip,
            hps_proxy: hps,
            total,
        }
    }
}

fn intersection(a: &BoxSpec, b: &BoxSpec) -> usize {
    let w = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0)) as usize;
    let h = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0)) as usize;
    w * h
}

/// Exact `(intersection, union)` cell counts.
pub fn box_iou_counts(a: &BoxSpec, b: &BoxSpec) -> (usize, usize) {
    let inter = intersection(a, b);
    (inter, a.area() + b.area() - inter)
}

pub fn box_iou(a: &BoxSpec, b: &BoxSpec) -> f64 {
    let (inter, union) = box_iou_counts(a, b);
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Optimal assignment between predicted and ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(pred index, gt index, IoU)`, ordered by pred index.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Summed matched IoU over `max(|pred|, |gt|)`; 1 for empty vs empty.
    pub mean_iou: f64,
}

fn ratio(num: usize, den: usize) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Pairwise same-class IoU as exact fractions; `None` where not matchable.
fn pair_table(pred: &[BoxSpec], gt: &[BoxSpec]) -> Vec<Vec<Option<BigRational>>> {
    pred.iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let (inter, union) = box_iou_counts(p, g);
                    (p.cls == g.cls && inter > 0).then(|| ratio(inter, union))
                })
                .collect()
        })
        .collect()
}

/// Exact optimum via dynamic programming over (pred index, used-gt mask).
pub fn match_layouts(pred: &Layout, gt: &Layout) -> Result<Matching> {
    let (n, m) = (pred.len(), gt.len());
    if n > MATCH_CAP || m > MATCH_CAP {
        return Err(Error::Contract(format!(
            "matcher supports at most {MATCH_CAP} boxes per side, got {n} vs {m}"
        )));
    }
    if n == 0 && m == 0 {
        return Ok(Matching { pairs: Vec::new(), mean_iou: 1.0 });
    }
    let table = pair_table(&pred.instances, &gt.instances);
    let full = 1usize << m;
    // best[i][mask]: optimal sum over preds i.. with gts in `mask` taken.
    let mut best = vec![vec![BigRational::zero(); full]; n + 1];
    let mut choice = vec![vec![None::<usize>; full]; n];
    for i in (0..n).rev() {
        for mask in 0..full {
            let mut top = best[i + 1][mask].clone();
            let mut pick = None;
            for (j, cell) in table[i].iter().enumerate() {
                if let Some(q) = cell {
                    if mask & (1 << j) == 0 {
                        let cand = q + &best[i + 1][mask | (1 << j)];
                        if cand > top {
                            top = cand;
                            pick = Some(j);
                        }
                    }
                }
            }
            best[i][mask] = top;
            choice[i][mask] = pick;
        }
    }
    let mut pairs = Vec::new();
    let mut mask = 0;
    for i in 0..n {
        if let Some(j) = choice[i][mask] {
            pairs.push((i, j, box_iou(&pred.instances[i], &gt.instances[j])));
            mask |= 1 << j;
        }
    }
    let mean = &best[0][0] / BigRational::from_integer(BigInt::from(n.max(m)));
    Ok(Matching {
        pairs,
        mean_iou: mean.to_f64().unwrap_or(0.0),
    })
}

fn histogram(img: &GridImage) -> [u64; NUM_CLASSES as usize + 1] {
    let mut h = [0; NUM_CLASSES as usize + 1];
    for &c in img.cells.iter() {
        h[c as usize] += 1;
    }
    h
}

/// Bounded stand-in for image-image semantic similarity.
pub fn clip_proxy(pred: &GridImage, reference: &GridImage) -> f64 {
    let agree = pred.cells.iter().zip(reference.cells.iter()).filter(|(a, b)| a == b).count();
    let cell_term = agree as f64 / CELLS as f64;
    let (hp, hr) = (histogram(pred), histogram(reference));
    // Integer moments keep identical histograms at exactly cosine 1.
    let dot: u64 = hp.iter().zip(&hr).map(|(a, b)| a * b).sum();
    let (pp, rr): (u64, u64) = (hp.iter().map(|v| v * v).sum(), hr.iter().map(|v| v * v).sum());
    let hist_term = match (pp == 0, rr == 0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => (dot as f64 / ((pp * rr) as f64).sqrt()).clamp(0.0, 1.0),
    };
    0.5 * cell_term + 0.5 * hist_term
}

/// Bounded stand-in for single-image quality: solid shapes score high,
/// ragged or near-empty images score low.
pub fn hps_proxy(img: &GridImage) -> f64 {
    let regs = regions(img);
    if regs.is_empty() {
        return 0.0;
    }
    let solidity = regs.iter().map(|r| r.solidity()).sum::<f64>() / regs.len() as f64;
    let gate = (img.painted() as f64 / COVERAGE_CELLS as f64).min(1.0);
    solidity * gate
}

/// Understanding-to-generation reward: layout IoU plus image similarity.
pub fn reward_r1(
    pred_layout: &Layout,
    gt_layout: &Layout,
    pred_img: &GridImage,
    gt_img: &GridImage,
    w: &RewardWeights,
) -> Result<RewardBreakdown> {
    let iou = match_layouts(pred_layout, gt_layout)?.mean_iou;
    Ok(RewardBreakdown::new(Some(iou), Some(clip_proxy(pred_img, gt_img)), None, w))
}

/// Generation-to-understanding reward: IoU of the model's own parse of the
/// generated image against the prompt layout, plus image quality.
pub fn reward_r2(
    parsed_layout: &Layout,
    prompt_layout: &Layout,
    pred_img: &GridImage,
    w: &RewardWeights,
) -> Result<RewardBreakdown> {
    let iou = match_layouts(parsed_layout, prompt_layout)?.mean_iou;
    Ok(RewardBreakdown::new(Some(iou), None, Some(hps_proxy(pred_img)), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{rasterize_boxes, GRID};

    fn b(cls: u8, x0: u8, y0: u8, x1: u8, y1: u8) -> BoxSpec {
        BoxSpec::new(cls, x0, y0, x1, y1)
    }

    fn lay(boxes: &[BoxSpec]) -> Layout {
        Layout::new(boxes.to_vec())
    }

    #[test]
    fn box_iou_examples() {
        let a = b(1, 0, 0, 2, 2);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(1, 5, 5, 7, 7)), 0.0);
        assert_eq!(box_iou(&a, &b(1, 1, 1, 3, 3)), 1.0 / 7.0);
        assert_eq!(box_iou(&b(1, 1, 1, 3, 3), &a), box_iou(&a, &b(1, 1, 1, 3, 3)));
    }

    #[test]
    fn matching_basics() {
        let gt = [b(1, 0, 0, 4, 4), b(2, 6, 6, 9, 9), b(3, 10, 0, 12, 5)];
        let shuffled = [gt[2], gt[0], gt[1]];
        let m = match_layouts(&lay(&shuffled), &lay(&gt)).unwrap();
        assert_eq!(m.mean_iou, 1.0);
        assert_eq!(m.pairs.len(), 3);
        assert_eq!(match_layouts(&lay(&[]), &lay(&gt)).unwrap().mean_iou, 0.0);
        assert_eq!(match_layouts(&lay(&gt), &lay(&[])).unwrap().mean_iou, 0.0);
        assert_eq!(match_layouts(&lay(&[]), &lay(&[])).unwrap().mean_iou, 1.0);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let m = match_layouts(&lay(&[b(1, 0, 0, 4, 4)]), &lay(&[b(2, 0, 0, 4, 4)])).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.mean_iou, 0.0);
    }

    #[test]
    fn greedy_is_suboptimal_here() {
        // P0 overlaps G0 strongly and G1 weakly; P1 overlaps only G0.
        // Greedy (P0->G0) scores 0.6 + 0; the optimum crosses the pairs.
        let g0 = b(1, 0, 0, 4, 4);
        let g1 = b(1, 3, 0, 8, 4);
        let p0 = b(1, 0, 0, 4, 3);
        let p1 = b(1, 0, 0, 3, 4);
        let greedy = box_iou(&p0, &g0);
        let crossed = box_iou(&p0, &g1) + box_iou(&p1, &g0);
        assert!(crossed > greedy);
        let m = match_layouts(&lay(&[p0, p1]), &lay(&[g0, g1])).unwrap();
        assert_eq!(m.mean_iou, crossed / 2.0);
        assert_eq!(m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn cap_is_enforced() {
        let many: Vec<BoxSpec> = (0..9).map(|i| b(1, i, 0, i + 1, 1)).collect();
        assert!(matches!(match_layouts(&lay(&many), &lay(&[])), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_proxy_examples() {
        let blank = GridImage::blank();
        assert_eq!(clip_proxy(&blank, &blank), 1.0);
        let full = GridImage { cells: [1; CELLS] };
        assert_eq!(clip_proxy(&blank, &full), 0.0);
        let r = rasterize_boxes(&[b(1, 0, 0, 4, 4)]);
        let shifted = rasterize_boxes(&[b(1, 8, 0, 12, 4)]);
        assert_eq!(clip_proxy(&shifted, &r), 0.5 * 224.0 / 256.0 + 0.5);
        assert_eq!(clip_proxy(&shifted, &r), 0.9375);
    }

    #[test]
    fn hps_proxy_examples() {
        assert_eq!(hps_proxy(&GridImage::blank()), 0.0);
        let solid = rasterize_boxes(&[b(1, 0, 0, 4, 4), b(2, 6, 6, 9, 9)]);
        assert_eq!(hps_proxy(&solid), 1.0);
        let mut l_shape = GridImage::blank();
        for y in 0..4 {
            for x in 0..4 {
                if !(x >= 2 && y < 2) {
                    l_shape.set(x, y, 3);
                }
            }
        }
        assert_eq!(hps_proxy(&l_shape), 0.5625);
        let tiny = rasterize_boxes(&[b(1, 0, 0, 2, 2)]);
        assert_eq!(hps_proxy(&tiny), 0.25);
        assert!(GRID * GRID == CELLS);
    }

    #[test]
    fn composite_rewards() {
        let w = RewardWeights::default();
        let gt = lay(&[b(1, 0, 0, 4, 4), b(2, 8, 8, 12, 12)]);
        let img = rasterize_boxes(&gt.instances);
        assert_eq!(reward_r1(&gt, &gt, &img, &img, &w).unwrap().total, 2.0);
        let blank = GridImage::blank();
        // Background cells agree, so a blank guess keeps part of the image term.
        let partial = reward_r1(&lay(&[]), &gt, &blank, &img, &w).unwrap();
        assert_eq!(partial.iou, Some(0.0));
        assert!(partial.total > 0.0 && partial.total < 1.0);
        let covering = lay(&[b(1, 0, 0, 16, 16)]);
        let covered = rasterize_boxes(&covering.instances);
        assert_eq!(reward_r1(&lay(&[]), &covering, &blank, &covered, &w).unwrap().total, 0.0);
        assert_eq!(reward_r2(&gt, &gt, &img, &w).unwrap().total, 3.0);
        assert_eq!(reward_r2(&lay(&[]), &gt, &blank, &w).unwrap().total, 0.0);

        let r1 = RewardBreakdown::new(Some(1.0 / 7.0), Some(0.9375), None, &w);
        assert!((r1.total - 1.080357).abs() < 1e-6);
        let r2 = RewardBreakdown::new(Some(0.5), None, Some(0.5625), &w);
        assert_eq!(r2.total, 1.625);
    }
}
