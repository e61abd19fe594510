//! Precision rate (CLE below 20 px) and success rate (IoU above 0.5).
//!
//! Both thresholds are strict: a frame whose CLE is exactly `τ` or whose IoU
//! is exactly `τ_iou` does not count.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bbox::{cle, iou, BBox};
use crate::error::{Error, Result};

pub use crate::bbox::{cle as centre_location_error, iou as intersection_over_union};

pub const DEFAULT_PR_THRESHOLD: f64 = 20.0;
pub const DEFAULT_SR_THRESHOLD: f64 = 0.5;

/// Aligned per-frame predictions, ground truth and tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pred: Vec<BBox>,
    gt: Vec<BBox>,
    tags: Vec<Vec<String>>,
}

impl TrackRun {
    pub fn new(pred: Vec<BBox>, gt: Vec<BBox>, tags: Vec<Vec<String>>) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Degenerate("empty track run"));
        }
        if pred.len() != gt.len() || pred.len() != tags.len() {
            return Err(Error::Dimension {
                op: "track run",
                lhs: alloc::vec![pred.len()],
                rhs: alloc::vec![gt.len(), tags.len()],
            });
        }
        Ok(Self { pred, gt, tags })
    }

    /// Untagged run.
    pub fn untagged(pred: Vec<BBox>, gt: Vec<BBox>) -> Result<Self> {
        let n = pred.len();
        Self::new(pred, gt, alloc::vec![Vec::new(); n])
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn pred(&self) -> &[BBox] {
        &self.pred
    }

    pub fn gt(&self) -> &[BBox] {
        &self.gt
    }

    pub fn tags(&self) -> &[Vec<String>] {
        &self.tags
    }

    fn pairs(&self) -> impl Iterator<Item = (&BBox, &BBox)> {
        self.pred.iter().zip(&self.gt)
    }
}

/// Percentage of frames with CLE strictly below `tau` pixels.
pub fn precision_rate(run: &TrackRun, tau: f64) -> f64 {
    rate(run.pairs(), |p, g| cle(p, g) < tau)
}

/// Percentage of frames with IoU strictly above `tau`.
pub fn success_rate(run: &TrackRun, tau: f64) -> f64 {
    rate(run.pairs(), |p, g| iou(p, g) > tau)
}

fn rate<'a>(pairs: impl Iterator<Item = (&'a BBox, &'a BBox)>, hit: impl Fn(&BBox, &BBox) -> bool) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for (p, g) in pairs {
        n += 1;
        if hit(p, g) {
            k += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagRow {
    pub tag: String,
    pub pr: f64,
    pub sr: f64,
    pub n: usize,
}

/// PR/SR restricted to the frames carrying each tag, sorted by tag name.
pub fn tag_breakdown(run: &TrackRun, tau_pr: f64, tau_sr: f64) -> Vec<TagRow> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, tags) in run.tags.iter().enumerate() {
        for t in tags {
            let frames = groups.entry(t.as_str()).or_default();
            if frames.last() != Some(&i) {
                frames.push(i);
            }
        }
    }
    groups
        .into_iter()
        .map(|(tag, frames)| {
            let pairs = || frames.iter().map(|&i| (&run.pred[i], &run.gt[i]));
            TagRow {
                tag: tag.into(),
                pr: rate(pairs(), |p, g| cle(p, g) < tau_pr),
                sr: rate(pairs(), |p, g| iou(p, g) > tau_sr),
                n: frames.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn sq(cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, 10.0, 10.0)
    }

    #[test]
    fn perfect_and_boundary_runs() {
        let gt: Vec<BBox> = (0..5).map(|i| sq(10.0 * i as f64, 5.0)).collect();
        let run = TrackRun::untagged(gt.clone(), gt.clone()).unwrap();
        assert_eq!(precision_rate(&run, 20.0), 100.0);
        assert_eq!(success_rate(&run, 0.5), 100.0);
        let off: Vec<BBox> = gt.iter().map(|b| BBox::new(b.cx + 12.0, b.cy + 16.0, 10.0, 10.0)).collect();
        let run = TrackRun::untagged(off, gt.clone()).unwrap();
        assert_eq!(precision_rate(&run, 20.0), 0.0);
        // 6x2 boxes offset by 2: intersection 8, union 16
        let a = BBox::new(0.0, 0.0, 6.0, 2.0);
        let b = BBox::new(2.0, 0.0, 6.0, 2.0);
        assert_eq!(iou(&a, &b), 0.5);
        let run = TrackRun::untagged(vec![a; 4], vec![b; 4]).unwrap();
        assert_eq!(success_rate(&run, 0.5), 0.0);
    }

    #[test]
    fn crafted_seven_of_ten() {
        let gt = vec![sq(100.0, 100.0); 10];
        let mut pred = vec![sq(105.0, 100.0); 7];
        pred.extend([sq(125.0, 100.0), sq(100.0, 140.0), sq(0.0, 0.0)]);
        let run = TrackRun::untagged(pred, gt).unwrap();
        assert_eq!(precision_rate(&run, 20.0), 70.0);
    }

    #[test]
    fn reorder_invariance_and_monotone() {
        let gt: Vec<BBox> = (0..8).map(|i| sq(i as f64, 0.0)).collect();
        let pred: Vec<BBox> = (0..8).map(|i| sq(i as f64 + 3.0 * i as f64, 1.0)).collect();
        let run = TrackRun::untagged(pred.clone(), gt.clone()).unwrap();
        let mut rp = pred;
        let mut rg = gt;
        rp.reverse();
        rg.reverse();
        let rev = TrackRun::untagged(rp, rg).unwrap();
        assert_eq!(precision_rate(&run, 20.0), precision_rate(&rev, 20.0));
        assert_eq!(success_rate(&run, 0.5), success_rate(&rev, 0.5));
        let mut last = 100.0;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let s = success_rate(&run, t);
            assert!(s <= last);
            last = s;
        }
    }

    #[test]
    fn breakdown_partitions() {
        let gt = vec![sq(0.0, 0.0); 6];
        let pred = vec![sq(0.0, 0.0), sq(30.0, 0.0), sq(0.0, 0.0), sq(30.0, 0.0), sq(0.0, 0.0), sq(0.0, 0.0)];
        let tags = (0..6)
            .map(|i| vec![if i < 2 { "invalid".to_string() } else { "valid".to_string() }])
            .collect();
        let run = TrackRun::new(pred, gt, tags).unwrap();
        let rows = tag_breakdown(&run, 20.0, 0.5);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].tag, "invalid");
        assert_eq!((rows[0].n, rows[0].pr), (2, 50.0));
        assert_eq!((rows[1].n, rows[1].pr), (4, 75.0));
        assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), run.len());
    }

    #[test]
    fn single_tag_equals_global() {
        let gt = vec![sq(0.0, 0.0), sq(5.0, 5.0), sq(9.0, 1.0)];
        let pred = vec![sq(1.0, 0.0), sq(25.0, 5.0), sq(9.0, 4.0)];
        let run = TrackRun::new(pred, gt, vec![vec!["all".to_string()]; 3]).unwrap();
        let rows = tag_breakdown(&run, 20.0, 0.5);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].pr, precision_rate(&run, 20.0));
        assert_eq!(rows[0].sr, success_rate(&run, 0.5));
    }

    #[test]
    fn rejects_bad_runs() {
        assert!(TrackRun::untagged(Vec::new(), Vec::new()).is_err());
        assert!(TrackRun::untagged(vec![sq(0.0, 0.0)], Vec::new()).is_err());
    }
}
