//! Reference implementations used only by tests. Each one follows the
//! textbook definition with dense, quadratic (or worse) loops and shares no
//! code with the library paths it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use reid_debias::store::GaussianStream;
use reid_debias::{DistanceMatrix, SampleMeta};

pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        let x = self.0;
        (x ^ (x >> 31)).wrapping_mul(0x94D0_49BB_1331_11EB) ^ (x >> 29)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn square_from_points(points: &[Vec<f32>]) -> DistanceMatrix {
    let n = points.len();
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            values[i * n + j] = s.sqrt() as f32;
        }
    }
    let ids: Vec<u64> = (0..n as u64).collect();
    DistanceMatrix::new(n, n, values, ids.clone(), ids).unwrap()
}

pub fn gaussian_points(seed: u64, n: usize, dim: usize, scale: f64) -> Vec<Vec<f32>> {
    let mut g = GaussianStream::new(seed);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| (g.next_gaussian() * scale) as f32)
                .collect()
        })
        .collect()
}

/// (mAP, CMC, excluded) by direct rank counting: the rank of a gallery item
/// is one plus the number of valid items ordered before it.
pub fn eval_oracle(
    dist: &DistanceMatrix,
    q: &[SampleMeta],
    g: &[SampleMeta],
) -> (f64, Vec<f64>, usize) {
    let ng = g.len();
    let mut ap_sum = 0.0;
    let mut included = 0usize;
    let mut first_ranks = Vec::new();
    for (qi, qm) in q.iter().enumerate() {
        let valid = |j: usize| !(g[j].pid == qm.pid && g[j].camid == qm.camid);
        let before = |h: usize, j: usize| {
            let (dh, dj) = (dist.get(qi, h), dist.get(qi, j));
            dh < dj || (dh == dj && g[h].index < g[j].index)
        };
        let rank_of = |j: usize| 1 + (0..ng).filter(|&h| valid(h) && before(h, j)).count();
        let relevant: Vec<usize> = (0..ng)
            .filter(|&j| valid(j) && g[j].pid == qm.pid)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        included += 1;
        let ranks: Vec<usize> = relevant.iter().map(|&j| rank_of(j)).collect();
        let mut ap = 0.0;
        for &r in &ranks {
            let hits_up_to = ranks.iter().filter(|&&x| x <= r).count();
            ap += hits_up_to as f64 / r as f64;
        }
        ap_sum += ap / relevant.len() as f64;
        first_ranks.push(*ranks.iter().min().unwrap());
    }
    let cmc = (1..=ng)
        .map(|k| {
            if included == 0 {
                0.0
            } else {
                first_ranks.iter().filter(|&&r| r <= k).count() as f64 / included as f64
            }
        })
        .collect();
    let map = if included == 0 {
        0.0
    } else {
        ap_sum / included as f64
    };
    (map, cmc, q.len() - included)
}

/// Dense k-reciprocal re-ranking reference: full argsorts, boolean set
/// vectors and an n x n membership matrix.
pub fn rerank_oracle(
    dist: &DistanceMatrix,
    n_query: usize,
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Vec<f64> {
    let n = dist.rows();
    let ranking: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut js: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            js.sort_by(|&a, &b| {
                dist.get(i, a)
                    .partial_cmp(&dist.get(i, b))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            js
        })
        .collect();
    let in_knn = |i: usize, j: usize, k: usize| ranking[i][..k].contains(&j);
    let recip = |i: usize, k: usize| -> Vec<bool> {
        let mut set = vec![false; n];
        set[i] = true;
        for &j in &ranking[i][..k] {
            if in_knn(j, i, k) {
                set[j] = true;
            }
        }
        set
    };
    let half = (k1 / 2).max(1);

    let mut v = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let base = recip(i, k1);
        let mut expanded = base.clone();
        for c in 0..n {
            if !base[c] {
                continue;
            }
            let cand = recip(c, half);
            let size = cand.iter().filter(|&&b| b).count();
            let inter = (0..n).filter(|&j| cand[j] && base[j]).count();
            if 3 * inter >= 2 * size {
                for j in 0..n {
                    expanded[j] |= cand[j];
                }
            }
        }
        let mut total = 0.0;
        for j in 0..n {
            if expanded[j] {
                v[i][j] = (-(dist.get(i, j) as f64)).exp();
                total += v[i][j];
            }
        }
        for j in 0..n {
            v[i][j] /= total;
        }
    }

    let mut vq = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let mut members = vec![i];
        members.extend_from_slice(&ranking[i][..k2 - 1]);
        for j in 0..n {
            vq[i][j] = members.iter().map(|&m| v[m][j]).sum::<f64>() / k2 as f64;
        }
    }

    let mut out = Vec::new();
    for p in 0..n_query {
        for gi in n_query..n {
            let (mut lo, mut hi) = (0.0, 0.0);
            for j in 0..n {
                lo += vq[p][j].min(vq[gi][j]);
                hi += vq[p][j].max(vq[gi][j]);
            }
            let jac = 1.0 - lo / hi;
            out.push(lambda * dist.get(p, gi) as f64 + (1.0 - lambda) * jac);
        }
    }
    out
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Connected components of core points (union-find). Component ids follow
/// the smallest core index of each component; a non-core point joins the
/// lowest-numbered component that reaches it, or stays `None`.
pub fn dbscan_oracle(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    let n = dist.rows();
    let close = |i: usize, j: usize| dist.get(i, j) as f64 <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_samples)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut root_label = std::collections::HashMap::new();
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = root_label.len();
            root_label.entry(r).or_insert(next);
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                return Some(root_label[&find(&mut parent, i)]);
            }
            (0..n)
                .filter(|&j| core[j] && close(i, j))
                .map(|j| root_label[&find(&mut parent, j)])
                .min()
        })
        .collect()
}

/// ARI from explicit enumeration of all sample pairs.
pub fn ari_oracle(a: &[i64], b: &[i64]) -> f64 {
    let n = a.len();
    let (mut both, mut same_a, mut same_b, mut total) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            same_a += sa as u8 as f64;
            same_b += sb as u8 as f64;
            both += (sa && sb) as u8 as f64;
        }
    }
    let expected = same_a * same_b / total;
    let max = (same_a + same_b) / 2.0;
    if max == expected {
        return if both == expected { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}
