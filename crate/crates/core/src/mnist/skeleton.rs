//! Stroke decomposition: binarize, thin to a one-pixel skeleton, cut at
//! junctions, re-join branches that continue straight through a junction,
//! then give every ink pixel to its nearest skeleton branch.

use std::collections::BTreeMap;

use crate::image::{Image, SIDE};

pub const BINARIZE_THRESHOLD: f32 = 0.5;
/// Two branches leaving a junction are one stroke if their directions are
/// within this many degrees of opposite.
pub const MERGE_ANGLE_TOLERANCE: f64 = 30.0;
/// Dangling branches shorter than this are thinning artefacts.
const SPUR_LENGTH: usize = 3;
/// Radius around a junction used to estimate branch directions.
const DIRECTION_RADIUS: f64 = 6.0;

/// Disjoint pixel groups, one per extracted line; together they cover every
/// nonzero pixel of a non-blank source image.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeSplit {
    pub segments: Vec<Vec<usize>>,
}

impl StrokeSplit {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// `image` with every segment not in `shown` set to background.
    pub fn mask(&self, image: &Image, shown: &[usize]) -> Image {
        let mut out = image.clone();
        for (i, seg) in self.segments.iter().enumerate() {
            if !shown.contains(&i) {
                for &p in seg {
                    out.pixels_mut()[p] = 0.0;
                }
            }
        }
        out
    }
}

const OFFSETS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

fn on(grid: &[bool], r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && r < SIDE as isize && c < SIDE as isize && grid[r as usize * SIDE + c as usize]
}

fn ring(grid: &[bool], p: usize) -> [bool; 8] {
    let (r, c) = ((p / SIDE) as isize, (p % SIDE) as isize);
    std::array::from_fn(|k| on(grid, r + OFFSETS[k].0, c + OFFSETS[k].1))
}

fn neighbours(p: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((p / SIDE) as isize, (p % SIDE) as isize);
    OFFSETS.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        (nr >= 0 && nc >= 0 && nr < SIDE as isize && nc < SIDE as isize)
            .then(|| nr as usize * SIDE + nc as usize)
    })
}

fn transitions(n: &[bool; 8]) -> usize {
    (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count()
}

/// Zhang-Suen thinning.
pub fn thin(binary: &[bool]) -> Vec<bool> {
    let mut g = binary.to_vec();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let remove: Vec<usize> = (0..g.len())
                .filter(|&p| g[p])
                .filter(|&p| {
                    let n = ring(&g, p);
                    let b = n.iter().filter(|&&x| x).count();
                    // n = [P2, P3, P4, P5, P6, P7, P8, P9]
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    (2..=6).contains(&b) && transitions(&n) == 1 && cond
                })
                .collect();
            changed |= !remove.is_empty();
            for p in remove {
                g[p] = false;
            }
        }
        if !changed {
            return g;
        }
    }
}

fn components(pixels: &[usize], member: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; member.len()];
    let mut out = Vec::new();
    for &start in pixels {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            for q in neighbours(p) {
                if member[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn centroid(ps: &[usize]) -> (f64, f64) {
    let n = ps.len() as f64;
    let (sr, sc) = ps.iter().fold((0.0, 0.0), |(a, b), &p| {
        (a + (p / SIDE) as f64, b + (p % SIDE) as f64)
    });
    (sr / n, sc / n)
}

fn dist2(p: usize, q: (f64, f64)) -> f64 {
    let (dr, dc) = ((p / SIDE) as f64 - q.0, (p % SIDE) as f64 - q.1);
    dr * dr + dc * dc
}

/// Splits an image into line segments. A blank image (no pixel above the
/// binarization threshold) yields an empty split.
pub fn split_lines(image: &Image) -> StrokeSplit {
    let binary: Vec<bool> = image.pixels().iter().map(|&v| v > BINARIZE_THRESHOLD).collect();
    let skel = thin(&binary);
    let skel_px: Vec<usize> = (0..skel.len()).filter(|&p| skel[p]).collect();
    if skel_px.is_empty() {
        return StrokeSplit { segments: vec![] };
    }

    let is_junction: Vec<bool> = (0..skel.len())
        .map(|p| {
            skel[p] && {
                let n = ring(&skel, p);
                transitions(&n) >= 3 || n.iter().filter(|&&x| x).count() >= 4
            }
        })
        .collect();
    let junction_px: Vec<usize> = skel_px.iter().copied().filter(|&p| is_junction[p]).collect();
    let branch_member: Vec<bool> = (0..skel.len()).map(|p| skel[p] && !is_junction[p]).collect();
    let branch_px: Vec<usize> = skel_px.iter().copied().filter(|&p| branch_member[p]).collect();

    let junctions = components(&junction_px, &is_junction);
    let mut branches = components(&branch_px, &branch_member);

    let touching = |branch: &[usize], junction: &[usize]| {
        branch
            .iter()
            .any(|&p| neighbours(p).any(|q| junction.binary_search(&q).is_ok()))
    };
    let endpoint_count = |branch: &[usize]| {
        branch
            .iter()
            .filter(|&&p| neighbours(p).filter(|&q| skel[q]).count() <= 1)
            .count()
    };

    // Drop short dangling spurs: they touch one junction and end freely.
    branches.retain(|b| {
        let touches = junctions.iter().filter(|j| touching(b, j)).count();
        !(b.len() < SPUR_LENGTH && touches == 1 && endpoint_count(b) >= 1)
    });
    if branches.is_empty() {
        // Only junction pixels remain: treat all ink as one stroke.
        let all: Vec<usize> = (0..image.pixels().len())
            .filter(|&p| image.pixels()[p] > 0.0)
            .collect();
        return StrokeSplit { segments: vec![all] };
    }

    let mut uf = UnionFind((0..branches.len()).collect());
    for j in &junctions {
        let jc = centroid(j);
        let adjacent: Vec<usize> = (0..branches.len())
            .filter(|&b| touching(&branches[b], j))
            .collect();
        if adjacent.len() == 2 {
            uf.union(adjacent[0], adjacent[1]);
            continue;
        }
        let dirs: BTreeMap<usize, (f64, f64)> = adjacent
            .iter()
            .map(|&b| {
                let near: Vec<usize> = branches[b]
                    .iter()
                    .copied()
                    .filter(|&p| dist2(p, jc) <= DIRECTION_RADIUS * DIRECTION_RADIUS)
                    .collect();
                let m = centroid(if near.is_empty() { &branches[b] } else { &near });
                (b, (m.0 - jc.0, m.1 - jc.1))
            })
            .collect();
        let mut candidates = Vec::new();
        for (i, &a) in adjacent.iter().enumerate() {
            for &b in &adjacent[i + 1..] {
                let (da, db) = (dirs[&a], dirs[&b]);
                let (na, nb) = (da.0.hypot(da.1), db.0.hypot(db.1));
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let cos = ((da.0 * db.0 + da.1 * db.1) / (na * nb)).clamp(-1.0, 1.0);
                let angle = cos.acos().to_degrees();
                if angle >= 180.0 - MERGE_ANGLE_TOLERANCE {
                    candidates.push((angle, a, b));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut used = vec![false; branches.len()];
        for (_, a, b) in candidates {
            if !used[a] && !used[b] {
                used[a] = true;
                used[b] = true;
                uf.union(a, b);
            }
        }
    }

    // Nearest skeleton branch pixel for every ink pixel.
    let owner: Vec<(usize, usize)> = branches
        .iter()
        .enumerate()
        .flat_map(|(b, px)| px.iter().map(move |&p| (p, b)))
        .collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in 0..image.pixels().len() {
        if image.pixels()[p] <= 0.0 {
            continue;
        }
        let pc = ((p / SIDE) as f64, (p % SIDE) as f64);
        let &(_, b) = owner
            .iter()
            .min_by(|x, y| dist2(x.0, pc).total_cmp(&dist2(y.0, pc)).then(x.0.cmp(&y.0)))
            .expect("non-empty");
        groups.entry(uf.find(b)).or_default().push(p);
    }
    let mut segments: Vec<Vec<usize>> = groups.into_values().collect();
    segments.sort_by_key(|s| s[0]);
    StrokeSplit { segments }
}
