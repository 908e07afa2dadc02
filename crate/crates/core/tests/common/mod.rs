//! Independent reference implementations and random generators shared by
//! the integration tests. The oracles favour directness over speed.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textcl::eval::GroundTruthSet;
use textcl::geometry::{polygon_to_mask, AxisBox, BitMask, Point, Polygon};
use textcl::io::{DetectionFile, GroundTruthFile};
use textcl::pseudo::{FusionConfig, PseudoLabel, ScoredDetection};
use textcl::suppress::{DetectionSet, SuppressConfig, SuppressMode};
use textcl::tensor::{Conv2d, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

// ---------------------------------------------------------------- tensors

pub fn conv2d_oracle(x: &Tensor, k: &Conv2d) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.weight().shape()[0], k.weight().shape()[2], k.weight().shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let padded = Tensor::from_fn(&[c_in, h + 2 * ph, w + 2 * pw], |i| {
        let (y, x_) = (i[1] as isize - ph as isize, i[2] as isize - pw as isize);
        if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
            0.0
        } else {
            x.at(&[i[0], y as usize, x_ as usize])
        }
    })
    .unwrap();
    Tensor::from_fn(&[c_out, h, w], |i| {
        let (o, y, x_) = (i[0], i[1], i[2]);
        let mut acc = k.bias().at(&[o]);
        for c in 0..c_in {
            for dy in 0..kh {
                for dx in 0..kw {
                    acc += k.weight().at(&[o, c, dy, dx]) * padded.at(&[c, y + dy, x_ + dx]);
                }
            }
        }
        acc
    })
    .unwrap()
}

pub fn max_pool_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[x.shape()[0], oh, ow], |i| {
        let y0 = (i[1] as f64 * h as f64 / oh as f64).floor() as usize;
        let y1 = ((i[1] + 1) as f64 * h as f64 / oh as f64).ceil() as usize;
        let x0 = (i[2] as f64 * w as f64 / ow as f64).floor() as usize;
        let x1 = ((i[2] + 1) as f64 * w as f64 / ow as f64).ceil() as usize;
        let mut best = f64::NEG_INFINITY;
        for y in y0..y1 {
            for xx in x0..x1 {
                best = best.max(x.at(&[i[0], y, xx]));
            }
        }
        best
    })
    .unwrap()
}

/// Direct evaluation of the half-pixel bilinear formula at every output pixel.
pub fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let src = |d: usize, n: usize, out: usize| {
        let s = (d as f64 + 0.5) * n as f64 / out as f64 - 0.5;
        s.max(0.0).min((n - 1) as f64)
    };
    Tensor::from_fn(&[x.shape()[0], oh, ow], |i| {
        let (sy, sx) = (src(i[1], h, oh), src(i[2], w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |y: usize, xx: usize| x.at(&[i[0], y, xx]);
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    })
    .unwrap()
}

/// Kernel of the composition `b ∘ a` of two bias-free same-padded
/// cross-correlations on an unbounded plane.
pub fn compose_kernels(a: &Tensor, b: &Tensor) -> Tensor {
    let (o, m, bh, bw) = (b.shape()[0], b.shape()[1], b.shape()[2], b.shape()[3]);
    let (c, ah, aw) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    assert_eq!(a.shape()[0], m);
    let mut out = Tensor::zeros(&[o, c, ah + bh - 1, aw + bw - 1]).unwrap();
    for oo in 0..o {
        for cc in 0..c {
            for mm in 0..m {
                for by in 0..bh {
                    for bx in 0..bw {
                        let wb = b.at(&[oo, mm, by, bx]);
                        for ay in 0..ah {
                            for ax in 0..aw {
                                let idx = [oo, cc, by + ay, bx + ax];
                                let v = out.at(&idx) + wb * a.at(&[mm, cc, ay, ax]);
                                out.set(&idx, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero border of `r` pixels around every channel.
pub fn embed(x: &Tensor, r: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[c, h + 2 * r, w + 2 * r], |i| {
        let (y, xx) = (i[1] as isize - r as isize, i[2] as isize - r as isize);
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.at(&[i[0], y as usize, xx as usize])
        }
    })
    .unwrap()
}

// ---------------------------------------------------------------- geometry

pub fn iou_mask_oracle(a: &BitMask, b: &BitMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Star-shaped polygon around `(cx, cy)`: sorted angles, random radii.
pub fn random_star(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64) -> Polygon {
    loop {
        let n = rng.gen_range(3..9);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.gen_range(0.4..1.0);
                Point::new(cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        if let Ok(p) = Polygon::new(pts) {
            return p;
        }
    }
}

/// Star polygon with a random centre in `[0, extent)²` and radius in `radii`.
pub fn random_star_in(rng: &mut ChaCha8Rng, extent: f64, radii: std::ops::Range<f64>) -> Polygon {
    let (cx, cy, r) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(radii));
    random_star(rng, cx, cy, r)
}

/// A union of random rectangles with holes filled.
pub fn random_blob(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BitMask {
    let mut m = BitMask::empty(w, h);
    let (cx, cy) = (rng.gen_range(4..w - 4), rng.gen_range(4..h - 4));
    for _ in 0..rng.gen_range(1..6) {
        let x0 = (cx as isize + rng.gen_range(-6..3)).clamp(0, w as isize - 1) as usize;
        let y0 = (cy as isize + rng.gen_range(-6..3)).clamp(0, h as isize - 1) as usize;
        let x1 = (x0 + rng.gen_range(1..8)).min(w);
        let y1 = (y0 + rng.gen_range(1..8)).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
    }
    for _ in 0..rng.gen_range(0..12) {
        m.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
    }
    fill_holes(&m)
}

/// Sets every background pixel not 4-connected to the border.
pub fn fill_holes(m: &BitMask) -> BitMask {
    let (w, h) = (m.width(), m.height());
    let mut outside = vec![false; w * h];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for x in 0..w {
        stack.push((x, 0));
        stack.push((x, h - 1));
    }
    for y in 0..h {
        stack.push((0, y));
        stack.push((w - 1, y));
    }
    while let Some((x, y)) = stack.pop() {
        if m.get(x, y) || outside[y * w + x] {
            continue;
        }
        outside[y * w + x] = true;
        if x > 0 {
            stack.push((x - 1, y));
        }
        if x + 1 < w {
            stack.push((x + 1, y));
        }
        if y > 0 {
            stack.push((x, y - 1));
        }
        if y + 1 < h {
            stack.push((x, y + 1));
        }
    }
    BitMask::from_fn(w, h, |x, y| !outside[y * w + x])
}

// ---------------------------------------------------------------- detections

fn shifted(mask: &BitMask, dx: isize, dy: isize) -> BitMask {
    BitMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (sx, sy) = (x as isize - dx, y as isize - dy);
        sx >= 0 && sy >= 0 && (sx as usize) < mask.width() && (sy as usize) < mask.height() && mask.get(sx as usize, sy as usize)
    })
}

fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BitMask {
    BitMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

/// Teacher outputs on one image: shared objects seen with small shifts,
/// exact duplicates, repeated scores and spurious detections.
pub fn random_trio(rng: &mut ChaCha8Rng, size: usize, max_per_model: usize) -> [Vec<ScoredDetection>; 3] {
    let objects: Vec<BitMask> = (0..rng.gen_range(1..10))
        .map(|_| {
            let x0 = rng.gen_range(0..size - 8);
            let y0 = rng.gen_range(0..size - 6);
            rect_mask(size, size, x0, y0, (x0 + rng.gen_range(6..20)).min(size), (y0 + rng.gen_range(4..12)).min(size))
        })
        .collect();
    let score_pool = [0.9, 0.8, 0.5];
    let mut sets: [Vec<ScoredDetection>; 3] = Default::default();
    for set in sets.iter_mut() {
        let n = rng.gen_range(0..=max_per_model);
        while set.len() < n {
            let mask = match rng.gen_range(0..10) {
                0 => {
                    let x0 = rng.gen_range(0..size - 4);
                    let y0 = rng.gen_range(0..size - 4);
                    rect_mask(size, size, x0, y0, x0 + rng.gen_range(1..5), y0 + rng.gen_range(1..5))
                }
                1..=3 => objects[rng.gen_range(0..objects.len())].clone(),
                _ => shifted(&objects[rng.gen_range(0..objects.len())], rng.gen_range(-1..=1), rng.gen_range(-1..=1)),
            };
            let score = if rng.gen_bool(0.3) {
                score_pool[rng.gen_range(0..score_pool.len())]
            } else {
                rng.gen_range(0.05..1.0)
            };
            if let Ok(det) = ScoredDetection::from_mask(mask, score) {
                set.push(det);
            }
        }
    }
    sets
}

/// Brute-force pseudo-label generation: for each anchor, in an order found
/// by repeated maximum search, every `(j, k)` combination (either may be
/// absent) is enumerated and the best one by the matching policy is taken.
pub fn pseudo_label_oracle(
    a: &[ScoredDetection],
    b: &[ScoredDetection],
    c: &[ScoredDetection],
    cfg: &FusionConfig,
) -> Vec<PseudoLabel> {
    let iou = |p: &ScoredDetection, q: &ScoredDetection| iou_mask_oracle(&p.mask, &q.mask);
    let ab: Vec<Vec<f64>> = a.iter().map(|p| b.iter().map(|q| iou(p, q)).collect()).collect();
    let ac: Vec<Vec<f64>> = a.iter().map(|p| c.iter().map(|q| iou(p, q)).collect()).collect();

    let mut visited = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut used_c = vec![false; c.len()];
    let mut labels = Vec::new();
    for _ in 0..a.len() {
        let mut i = usize::MAX;
        for cand in 0..a.len() {
            if !visited[cand] && (i == usize::MAX || a[cand].score > a[i].score) {
                i = cand;
            }
        }
        visited[i] = true;

        // key of a partner option: absent < present, then IoU, score, lower index
        type Key = (bool, f64, f64, isize);
        let key = |opt: Option<usize>, table: &[f64], pool: &[ScoredDetection]| -> Key {
            match opt {
                None => (false, 0.0, 0.0, 0),
                Some(j) => (true, table[j], pool[j].score, -(j as isize)),
            }
        };
        let better = |x: Key, y: Key| x.partial_cmp(&y).unwrap().is_gt();
        let options_b: Vec<Option<usize>> = std::iter::once(None)
            .chain((0..b.len()).filter(|&j| !used_b[j] && ab[i][j] > cfg.iou_threshold).map(Some))
            .collect();
        let options_c: Vec<Option<usize>> = std::iter::once(None)
            .chain((0..c.len()).filter(|&k| !used_c[k] && ac[i][k] > cfg.iou_threshold).map(Some))
            .collect();
        let mut best = (None, None);
        for &j in &options_b {
            for &k in &options_c {
                let cand = (key(j, &ab[i], b), key(k, &ac[i], c));
                let cur = (key(best.0, &ab[i], b), key(best.1, &ac[i], c));
                if better(cand.0, cur.0) || (cand.0 == cur.0 && better(cand.1, cur.1)) {
                    best = (j, k);
                }
            }
        }

        let mut members = vec![&a[i]];
        let weight = match best {
            (Some(j), Some(k)) => a[i].score * b[j].score * c[k].score,
            (Some(j), None) => a[i].score * b[j].score * cfg.alpha,
            (None, Some(k)) => a[i].score * c[k].score * cfg.alpha,
            (None, None) => continue,
        };
        if let Some(j) = best.0 {
            used_b[j] = true;
            members.push(&b[j]);
        }
        if let Some(k) = best.1 {
            used_c[k] = true;
            members.push(&c[k]);
        }
        let (w, h) = (a[i].mask.width(), a[i].mask.height());
        let mask = BitMask::from_fn(w, h, |x, y| members.iter().all(|d| d.mask.get(x, y)));
        let n = members.len() as f64;
        let mean = |f: fn(&AxisBox) -> f64| members.iter().map(|d| f(&d.bbox)).sum::<f64>() / n;
        let bbox = AxisBox::new(mean(|b| b.xmin), mean(|b| b.ymin), mean(|b| b.xmax), mean(|b| b.ymax)).unwrap();
        labels.push(PseudoLabel { mask, bbox, weight });
    }
    labels
}

/// Canonical order for multiset comparison of labels.
pub fn sort_labels(labels: &mut [PseudoLabel]) {
    labels.sort_by(|p, q| {
        p.weight
            .total_cmp(&q.weight)
            .then_with(|| p.bbox.to_array().map(f64::to_bits).cmp(&q.bbox.to_array().map(f64::to_bits)))
            .then_with(|| p.mask.cmp(&q.mask))
    });
}

/// Soft-NMS by recomputation: before every selection each remaining score
/// is rebuilt from its input score and the decays of all earlier selections.
#[allow(clippy::needless_range_loop)]
pub fn soft_nms_oracle(dets: &[ScoredDetection], cfg: &SuppressConfig) -> Vec<(usize, f64)> {
    let decay = |iou: f64| match cfg.mode {
        SuppressMode::Hard => {
            if iou > cfg.iou_threshold {
                0.0
            } else {
                1.0
            }
        }
        SuppressMode::SoftLinear => {
            if iou > cfg.iou_threshold {
                1.0 - iou
            } else {
                1.0
            }
        }
        SuppressMode::SoftGaussian => (-(iou * iou) / cfg.sigma).exp(),
    };
    let mut selected: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    let mut dropped = vec![false; dets.len()];
    loop {
        let current = |r: usize| {
            selected
                .iter()
                .fold(dets[r].score, |s, &p| s * decay(iou_mask_oracle(&dets[p].mask, &dets[r].mask)))
        };
        let mut best: Option<(usize, f64)> = None;
        for r in 0..dets.len() {
            if dropped[r] || selected.contains(&r) {
                continue;
            }
            let s = current(r);
            if s < cfg.score_floor {
                dropped[r] = true;
                continue;
            }
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((r, s));
            }
        }
        match best {
            Some((r, s)) => {
                selected.push(r);
                out.push((r, s));
            }
            None => return out,
        }
    }
}

/// Hard NMS as the textbook double loop over a score-sorted list.
pub fn nms_oracle(dets: &[ScoredDetection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    let mut keep: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &keep {
            if iou_mask_oracle(&dets[k].mask, &dets[i].mask) > threshold {
                continue 'outer;
            }
        }
        keep.push(i);
    }
    keep
}

pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<ScoredDetection> {
    let centres: Vec<(usize, usize)> = (0..3).map(|_| (rng.gen_range(4..size - 12), rng.gen_range(4..size - 12))).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centres[rng.gen_range(0..centres.len())];
            let x0 = cx + rng.gen_range(0..4);
            let y0 = cy + rng.gen_range(0..4);
            let mask = rect_mask(size, size, x0, y0, x0 + rng.gen_range(3..9), y0 + rng.gen_range(3..9));
            ScoredDetection::from_mask(mask, rng.gen_range(0.01..1.0)).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------- evaluation

/// Maximum total IoU over all one-to-one assignments using pairs at or
/// above the threshold, by exhaustive search over ground-truth choices.
pub fn max_weight_assignment(ious: &[Vec<f64>], threshold: f64) -> (f64, Vec<(usize, usize)>) {
    fn go(g: usize, ious: &[Vec<f64>], t: f64, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (f64, Vec<(usize, usize)>)) {
        if g == ious.len() {
            let total: f64 = cur.iter().map(|&(g, d)| ious[g][d]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        go(g + 1, ious, t, used, cur, best);
        for d in 0..used.len() {
            if !used[d] && ious[g][d] >= t {
                used[d] = true;
                cur.push((g, d));
                go(g + 1, ious, t, used, cur, best);
                cur.pop();
                used[d] = false;
            }
        }
    }
    let dets = ious.first().map_or(0, Vec::len);
    let mut best = (0.0, Vec::new());
    go(0, ious, threshold, &mut vec![false; dets], &mut Vec::new(), &mut best);
    best.1.sort();
    best
}

/// An image with pairwise-disjoint text regions and detections that are
/// jittered copies of some of them plus false positives.
pub fn random_eval_image(rng: &mut ChaCha8Rng, id: &str, max_instances: usize) -> (GroundTruthSet, DetectionSet) {
    let size = 96usize;
    let cells = 4usize;
    let cell = size as f64 / cells as f64;
    let mut slots: Vec<(usize, usize)> = (0..cells).flat_map(|i| (0..cells).map(move |j| (i, j))).collect();
    let n = rng.gen_range(1..=max_instances);
    let mut gts = Vec::new();
    for _ in 0..n {
        let (i, j) = slots.swap_remove(rng.gen_range(0..slots.len()));
        let (cx, cy) = ((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
        gts.push(random_star(rng, cx, cy, cell * 0.45));
    }
    let mut dets = Vec::new();
    for g in &gts {
        for _ in 0..rng.gen_range(0..3) {
            let (dx, dy) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let p = g.translate(dx, dy);
            if let Ok(d) = ScoredDetection::from_polygon(p, size, size, rng.gen_range(0.1..1.0)) {
                dets.push(d);
            }
        }
    }
    for _ in 0..rng.gen_range(0..3) {
        let (cx, cy) = (rng.gen_range(10.0..86.0), rng.gen_range(10.0..86.0));
        let p = random_star(rng, cx, cy, 8.0);
        dets.push(ScoredDetection::from_polygon(p, size, size, rng.gen_range(0.1..1.0)).unwrap());
    }
    let gt = GroundTruthSet::all_cared(id, gts);
    let set = DetectionSet::new(id, "model", size, size).with_detections(dets);
    (gt, set)
}

// ---------------------------------------------------------------- fixtures

pub struct FixtureImage {
    pub id: String,
    pub teachers: [DetectionFile; 3],
    pub ground_truth: GroundTruthFile,
}

/// Deterministic three-image corpus: text polygons, three teachers that see
/// them with jitter and occasional misses, and a false positive per teacher.
pub fn fixture_corpus() -> Vec<FixtureImage> {
    let mut rng = rng(2024);
    let size = 64usize;
    (0..3)
        .map(|img| {
            let id = format!("img_{img:03}");
            let gts: Vec<Polygon> = (0..4)
                .map(|k| {
                    let (cx, cy) = (16.0 + 32.0 * (k % 2) as f64, 16.0 + 32.0 * (k / 2) as f64);
                    random_star(&mut rng, cx, cy, 13.0)
                })
                .collect();
            let teachers = std::array::from_fn(|t| {
                let mut set = DetectionSet::new(id.clone(), format!("teacher_{t}"), size, size);
                for g in &gts {
                    if rng.gen_bool(0.85) {
                        let p = g.translate(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
                        set.detections.push(ScoredDetection::from_polygon(p, size, size, rng.gen_range(0.5..1.0)).unwrap());
                    }
                }
                let fp = Polygon::rect(2.0 + t as f64 * 20.0, 29.0, 8.0 + t as f64 * 20.0, 35.0).unwrap();
                set.detections.push(ScoredDetection::from_polygon(fp, size, size, rng.gen_range(0.2..0.6)).unwrap());
                DetectionFile::from_set(&set)
            });
            let ground_truth = GroundTruthFile::from_set(&GroundTruthSet::all_cared(id.clone(), gts), size, size);
            FixtureImage {
                id,
                teachers,
                ground_truth,
            }
        })
        .collect()
}

pub fn suppress_linear() -> SuppressConfig {
    SuppressConfig {
        mode: SuppressMode::SoftLinear,
        ..SuppressConfig::default()
    }
}

pub fn mask_of(p: &Polygon, w: usize, h: usize) -> BitMask {
    polygon_to_mask(p, w, h).unwrap()
}
