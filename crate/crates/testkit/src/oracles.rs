//! Brute-force reference implementations.

use std::collections::{BTreeMap, HashMap};

use num::{BigInt, BigRational, One, Zero};

use alpr_core::geometry::BBox;

/// IoU from explicit corner coordinates.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ax1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
    let (ay0, ay1) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let (by0, by1) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// O(n^2) greedy suppression: repeatedly take the best remaining box
/// (earliest on equal scores) and discard same-class boxes overlapping it
/// by more than `threshold`. Returns indices into `boxes` in pick order.
pub fn nms_oracle(boxes: &[BBox], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut picked = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        picked.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && boxes[j].class_id == boxes[b].class_id && iou_ref(&boxes[b], &boxes[j]) > threshold {
                alive[j] = false;
            }
        }
    }
    picked
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decoded box before clamping into the unit range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub score: f64,
}

/// Scalar head decoder indexing the tensor as
/// `raw[((row * S + col) * A + anchor) * (5 + CL) + k]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_oracle(
    raw: &[f32],
    grid: usize,
    anchors: &[(f64, f64)],
    classes: usize,
    input_w: f64,
    input_h: f64,
    conf: f64,
) -> Vec<RefBox> {
    let per = 5 + classes;
    let at = |row: usize, col: usize, a: usize, k: usize| f64::from(raw[((row * grid + col) * anchors.len() + a) * per + k]);
    let mut out = Vec::new();
    for row in 0..grid {
        for col in 0..grid {
            for (a, &(aw, ah)) in anchors.iter().enumerate() {
                let mut best_class = 0;
                for c in 1..classes {
                    if at(row, col, a, 5 + c) > at(row, col, a, 5 + best_class) {
                        best_class = c;
                    }
                }
                let score = logistic(at(row, col, a, 4)) * logistic(at(row, col, a, 5 + best_class));
                if score < conf {
                    continue;
                }
                out.push(RefBox {
                    cx: (col as f64 + logistic(at(row, col, a, 0))) / grid as f64,
                    cy: (row as f64 + logistic(at(row, col, a, 1))) / grid as f64,
                    w: aw * at(row, col, a, 2).exp() / input_w,
                    h: ah * at(row, col, a, 3).exp() / input_h,
                    class_id: best_class as u32,
                    score,
                });
            }
        }
    }
    out
}

/// Otsu's threshold by exhaustive search over all 256 splits, evaluating
/// `w0 * w1 * (mu0 - mu1)^2` in exact rational arithmetic. Class 0 holds
/// intensities `<= t`; the smallest maximizing `t` wins. `None` when fewer
/// than two intensities occur.
pub fn otsu_oracle(pixels: &[u8]) -> Option<u8> {
    let mut counts = [0u64; 256];
    for &p in pixels {
        counts[p as usize] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = BigRational::from_integer(BigInt::from(pixels.len()));
    let mut best: Option<(BigRational, u8)> = None;
    for t in 0..256usize {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for (v, &c) in counts.iter().enumerate() {
            if v <= t {
                n0 += c;
                s0 += v as u64 * c;
            } else {
                n1 += c;
                s1 += v as u64 * c;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let r = |a: u64, b: u64| BigRational::new(BigInt::from(a), BigInt::from(b));
        let w0 = r(n0, 1) / &total;
        let w1 = r(n1, 1) / &total;
        let diff = r(s0, n0) - r(s1, n1);
        let variance = w0 * w1 * &diff * &diff;
        if best.as_ref().is_none_or(|(b, _)| variance > *b) {
            best = Some((variance, t as u8));
        }
    }
    best.map(|(_, t)| t)
}

/// Matched flag per ranked prediction, found by the one-to-one greedy rule:
/// predictions in descending score order (equal scores by image id, then
/// position) each claim the unmatched same-class truth of highest IoU,
/// provided it reaches `threshold`.
pub struct RefMatch {
    /// `(class_id, score, matched)` in rank order.
    pub ranked: Vec<(u32, f64, bool)>,
    pub truths_per_class: BTreeMap<u32, usize>,
    pub unmatched_truths: usize,
}

pub fn match_oracle(preds: &BTreeMap<String, Vec<BBox>>, gts: &BTreeMap<String, Vec<BBox>>, threshold: f64) -> RefMatch {
    let mut all: Vec<(usize, &str, usize, &BBox)> = Vec::new();
    for (id, boxes) in preds {
        for (i, b) in boxes.iter().enumerate() {
            all.push((all.len(), id.as_str(), i, b));
        }
    }
    // Selection sort on (score desc, insertion order asc).
    let mut ordered = Vec::new();
    let mut used = vec![false; all.len()];
    for _ in 0..all.len() {
        let mut pick: Option<usize> = None;
        for k in 0..all.len() {
            if !used[k] && pick.is_none_or(|p| all[k].3.score > all[p].3.score) {
                pick = Some(k);
            }
        }
        let p = pick.expect("remaining prediction");
        used[p] = true;
        ordered.push(all[p]);
    }

    let mut taken: HashMap<(&str, usize), bool> = HashMap::new();
    let mut ranked = Vec::new();
    for (_, id, _, pred) in ordered {
        let mut best: Option<(usize, f64)> = None;
        if let Some(truths) = gts.get(id) {
            for (g, t) in truths.iter().enumerate() {
                if t.class_id != pred.class_id || taken.contains_key(&(id, g)) {
                    continue;
                }
                let o = iou_ref(pred, t);
                if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
        }
        if let Some((g, _)) = best {
            taken.insert((id, g), true);
        }
        ranked.push((pred.class_id, pred.score, best.is_some()));
    }
    let mut truths_per_class = BTreeMap::new();
    let mut total = 0;
    for b in gts.values().flatten() {
        *truths_per_class.entry(b.class_id).or_insert(0) += 1;
        total += 1;
    }
    RefMatch { ranked, truths_per_class, unmatched_truths: total - taken.len() }
}

/// 11-point interpolated AP per ground-truth class, with recall compared
/// as exact fractions.
pub fn class_ap_oracle(m: &RefMatch) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for (&class, &npos) in &m.truths_per_class {
        let rows: Vec<bool> = m.ranked.iter().filter(|r| r.0 == class).map(|r| r.2).collect();
        let mut sum = 0.0;
        for level in 0..=10u32 {
            let target = BigRational::new(BigInt::from(level), BigInt::from(10));
            let mut best = 0.0f64;
            for k in 1..=rows.len() {
                let tp = rows[..k].iter().filter(|&&x| x).count();
                let recall = BigRational::new(BigInt::from(tp), BigInt::from(npos));
                if recall >= target {
                    best = best.max(tp as f64 / k as f64);
                }
            }
            sum += best;
        }
        out.insert(class, sum / 11.0);
    }
    out
}

/// `(map_percent, precision, recall, f1, tp, fp, fn)` computed from scratch.
pub fn evaluate_oracle(
    preds: &BTreeMap<String, Vec<BBox>>,
    gts: &BTreeMap<String, Vec<BBox>>,
    threshold: f64,
    cutoff: f64,
) -> (f64, f64, f64, f64, usize, usize, usize) {
    let aps = class_ap_oracle(&match_oracle(preds, gts, threshold));
    let map = if aps.is_empty() { 0.0 } else { aps.values().sum::<f64>() / aps.len() as f64 * 100.0 };
    let kept: BTreeMap<String, Vec<BBox>> =
        preds.iter().map(|(k, v)| (k.clone(), v.iter().filter(|b| b.score >= cutoff).copied().collect())).collect();
    let m = match_oracle(&kept, gts, threshold);
    let tp = m.ranked.iter().filter(|r| r.2).count();
    let fp = m.ranked.len() - tp;
    let fn_ = m.unmatched_truths;
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (map, p, r, f, tp, fp, fn_)
}

/// Best alignment of two token sequences under unit-cost insert, delete and
/// substitute: minimum cost first, then most exact matches. Top-down
/// recursion over every alignment, memoized on the remaining suffixes.
/// Returns `(cost, matches)`.
pub fn alignment_oracle(truth: &[&str], pred: &[&str]) -> (usize, usize) {
    fn go(t: &[&str], p: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), (usize, usize)>) -> (usize, usize) {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let better = |a: (usize, usize), b: (usize, usize)| if a.0 < b.0 || (a.0 == b.0 && a.1 > b.1) { a } else { b };
        let v = if i == t.len() {
            (p.len() - j, 0)
        } else if j == p.len() {
            (t.len() - i, 0)
        } else {
            let (dc, dm) = go(t, p, i + 1, j, memo);
            let (ic, im) = go(t, p, i, j + 1, memo);
            let (sc, sm) = go(t, p, i + 1, j + 1, memo);
            let diag = if t[i] == p[j] { (sc, sm + 1) } else { (sc + 1, sm) };
            better(better(diag, (dc + 1, dm)), (ic + 1, im))
        };
        memo.insert((i, j), v);
        v
    }
    go(truth, pred, 0, 0, &mut HashMap::new())
}

/// Every alignment enumerated without memoization; only for short inputs.
pub fn alignment_exhaustive(truth: &[&str], pred: &[&str]) -> (usize, usize) {
    let mut best = (usize::MAX, 0);
    fn walk(t: &[&str], p: &[&str], cost: usize, matches: usize, best: &mut (usize, usize)) {
        if t.is_empty() && p.is_empty() {
            if cost < best.0 || (cost == best.0 && matches > best.1) {
                *best = (cost, matches);
            }
            return;
        }
        if !t.is_empty() {
            walk(&t[1..], p, cost + 1, matches, best);
        }
        if !p.is_empty() {
            walk(t, &p[1..], cost + 1, matches, best);
        }
        if !t.is_empty() && !p.is_empty() {
            let same = t[0] == p[0];
            walk(&t[1..], &p[1..], cost + usize::from(!same), matches + usize::from(same), best);
        }
    }
    walk(truth, pred, 0, 0, &mut best);
    best
}

/// Accuracy percent `100 * matches / truth_len`, rounded half up, using
/// quotient and remainder.
pub fn accuracy_oracle(truth: &[&str], pred: &[&str]) -> u32 {
    let (_, m) = alignment_oracle(truth, pred);
    let n = truth.len();
    let q = 100 * m / n;
    let rem = 100 * m % n;
    (q + usize::from(2 * rem >= n)) as u32
}

/// F1 as the harmonic mean, in exact rationals, rounded to two decimals
/// half up. Inputs are given in hundredths.
pub fn f1_hundredths_oracle(p_hundredths: u32, r_hundredths: u32) -> u32 {
    let p = BigRational::new(BigInt::from(p_hundredths), BigInt::from(100));
    let r = BigRational::new(BigInt::from(r_hundredths), BigInt::from(100));
    if (&p + &r).is_zero() {
        return 0;
    }
    let two = BigRational::from_integer(BigInt::from(2));
    let f = &two * &p * &r / (&p + &r) * BigRational::from_integer(BigInt::from(100));
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let rounded = (f + half).floor();
    rounded.to_integer().try_into().expect("small")
}
