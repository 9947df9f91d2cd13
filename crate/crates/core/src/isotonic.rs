//! Isotonic post-map fitted by pool-adjacent-violators.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Monotone piecewise-linear map on `[0, 1]`, clamped outside its first and
/// last breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// `(input, output)` pairs sorted by input, outputs non-decreasing.
    pub breakpoints: Vec<(f64, f64)>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        Self {
            breakpoints: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn from_breakpoints(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        let map = Self { breakpoints };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() {
            return Err(Error::Artifact("isotonic map has no breakpoints".into()));
        }
        for &(x, y) in &self.breakpoints {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Artifact(format!("isotonic breakpoint ({x}, {y}) outside the unit square")));
            }
        }
        for w in self.breakpoints.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::Artifact("isotonic breakpoints are not monotone".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        let (x0, y0) = bp[0];
        if x <= x0 {
            return y0;
        }
        let (xn, yn) = bp[bp.len() - 1];
        if x >= xn {
            return yn;
        }
        // First breakpoint with input > x; exists because x < xn.
        let hi = bp.partition_point(|&(bx, _)| bx <= x);
        let (xa, ya) = bp[hi - 1];
        let (xb, yb) = bp[hi];
        if xb == xa {
            return yb;
        }
        ya + (yb - ya) * (x - xa) / (xb - xa)
    }
}

struct Block {
    lo: f64,
    hi: f64,
    weight: f64,
    mean: f64,
}

/// Least-squares monotone fit of `labels` on `confidences`.
///
/// Tied confidences are pooled before PAV so they always map to one value.
/// The map's breakpoints are the input extremes of every pooled block, which
/// makes the map reproduce the PAV solution exactly at the fit points.
pub fn fit_isotonic(confidences: &[f64], labels: &[f64]) -> Result<IsotonicMap> {
    assert_eq!(confidences.len(), labels.len());
    let n = confidences.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));

    let mut blocks: Vec<Block> = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let x = confidences[order[i]].clamp(0.0, 1.0);
        let mut sum = 0.0;
        let mut j = i;
        while j < n && confidences[order[j]].clamp(0.0, 1.0) == x {
            sum += labels[order[j]];
            j += 1;
        }
        let w = (j - i) as f64;
        let mut block = Block {
            lo: x,
            hi: x,
            weight: w,
            mean: sum / w,
        };
        while let Some(prev) = blocks.last() {
            if prev.mean < block.mean {
                break;
            }
            let prev = blocks.pop().expect("checked above");
            let weight = prev.weight + block.weight;
            block = Block {
                lo: prev.lo,
                hi: block.hi,
                mean: (prev.mean * prev.weight + block.mean * block.weight) / weight,
                weight,
            };
        }
        blocks.push(block);
        i = j;
    }

    let mut breakpoints: Vec<(f64, f64)> = Vec::with_capacity(2 * blocks.len());
    for b in &blocks {
        let y = b.mean.clamp(0.0, 1.0);
        breakpoints.push((b.lo, y));
        if b.hi > b.lo {
            breakpoints.push((b.hi, y));
        }
    }
    // Guard against float drift in pooled means breaking monotonicity.
    for k in 1..breakpoints.len() {
        if breakpoints[k].1 < breakpoints[k - 1].1 {
            breakpoints[k].1 = breakpoints[k - 1].1;
        }
    }
    Ok(IsotonicMap { breakpoints })
}
