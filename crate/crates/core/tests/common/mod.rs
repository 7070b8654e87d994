//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Offsets (dx, dy) with y growing downward: 0°, 45°, 90°, 135°.
pub const OFFSETS: [(i64, i64); 4] = [(1, 0), (1, -1), (0, -1), (-1, -1)];

/// Symmetric normalized co-occurrence counts by scanning every ordered pixel
/// pair of the grid and keeping those at the requested displacement.
pub fn brute_glcm(
    grid: &[u16],
    width: usize,
    levels: usize,
    offset: (i64, i64),
) -> Option<Vec<f64>> {
    let mut m = vec![0.0; levels * levels];
    let mut n = 0.0;
    for a in 0..grid.len() {
        for b in 0..grid.len() {
            let (ax, ay) = ((a % width) as i64, (a / width) as i64);
            let (bx, by) = ((b % width) as i64, (b / width) as i64);
            if bx - ax == offset.0 && by - ay == offset.1 {
                let (i, j) = (grid[a] as usize, grid[b] as usize);
                m[i * levels + j] += 1.0;
                m[j * levels + i] += 1.0;
                n += 2.0;
            }
        }
    }
    if n == 0.0 {
        return None;
    }
    Some(m.into_iter().map(|c| c / n).collect())
}

fn h(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln() / std::f64::consts::LN_2
    } else {
        0.0
    }
}

/// The 13 texture statistics evaluated term by term from their textbook
/// definitions. Order: ASM, contrast, correlation, sum of squares, IDM,
/// sum average, sum variance, sum entropy, entropy, difference variance,
/// difference entropy, IMC1, IMC2.
pub fn brute_haralick(p: &[f64], levels: usize) -> [f64; 13] {
    let n = levels;
    let at = |i: usize, j: usize| p[i * n + j];
    let cells = || (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)));

    let asm: f64 = cells().map(|(i, j)| at(i, j).powi(2)).sum();
    let contrast: f64 = cells()
        .map(|(i, j)| ((i as f64) - (j as f64)).powi(2) * at(i, j))
        .sum();
    let mu_x: f64 = cells().map(|(i, j)| i as f64 * at(i, j)).sum();
    let mu_y: f64 = cells().map(|(i, j)| j as f64 * at(i, j)).sum();
    let var_x: f64 = cells()
        .map(|(i, j)| (i as f64 - mu_x).powi(2) * at(i, j))
        .sum();
    let var_y: f64 = cells()
        .map(|(i, j)| (j as f64 - mu_y).powi(2) * at(i, j))
        .sum();
    let cov: f64 = cells()
        .map(|(i, j)| (i as f64 - mu_x) * (j as f64 - mu_y) * at(i, j))
        .sum();
    let correlation = if (var_x * var_y).sqrt() > 1e-15 {
        cov / (var_x * var_y).sqrt()
    } else {
        0.0
    };
    let idm: f64 = cells()
        .map(|(i, j)| at(i, j) / (1.0 + ((i as f64) - (j as f64)).powi(2)))
        .sum();

    let mut p_sum: BTreeMap<usize, f64> = BTreeMap::new();
    let mut p_diff: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, j) in cells() {
        *p_sum.entry(i + j).or_default() += at(i, j);
        *p_diff.entry(i.abs_diff(j)).or_default() += at(i, j);
    }
    let sum_avg: f64 = p_sum.iter().map(|(&k, &v)| k as f64 * v).sum();
    let sum_var: f64 = p_sum
        .iter()
        .map(|(&k, &v)| (k as f64 - sum_avg).powi(2) * v)
        .sum();
    let sum_ent: f64 = p_sum.values().map(|&v| h(v)).sum();
    let ent: f64 = cells().map(|(i, j)| h(at(i, j))).sum();
    let diff_mean: f64 = p_diff.iter().map(|(&k, &v)| k as f64 * v).sum();
    let diff_var: f64 = p_diff
        .iter()
        .map(|(&k, &v)| (k as f64 - diff_mean).powi(2) * v)
        .sum();
    let diff_ent: f64 = p_diff.values().map(|&v| h(v)).sum();

    let px: Vec<f64> = (0..n).map(|i| (0..n).map(|j| at(i, j)).sum()).collect();
    let py: Vec<f64> = (0..n).map(|j| (0..n).map(|i| at(i, j)).sum()).collect();
    let hx: f64 = px.iter().map(|&v| h(v)).sum();
    let hy: f64 = py.iter().map(|&v| h(v)).sum();
    let mut hxy1 = 0.0;
    let mut hxy2 = 0.0;
    for (i, j) in cells() {
        let q = px[i] * py[j];
        if q > 0.0 {
            hxy1 -= at(i, j) * q.log2();
            hxy2 -= q * q.log2();
        }
    }
    let imc1 = if hx.max(hy) > 0.0 {
        (ent - hxy1) / hx.max(hy)
    } else {
        0.0
    };
    let imc2 = (1.0 - (-2.0 * (hxy2 - ent)).exp2()).max(0.0).sqrt();
    [
        asm,
        contrast,
        correlation,
        var_x,
        idm,
        sum_avg,
        sum_var,
        sum_ent,
        ent,
        diff_var,
        diff_ent,
        imc1,
        imc2,
    ]
}

/// `|a - b| <= rel * max(|a|, |b|)`, with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-12
}

/// Number of 4-connected components of each label, by flood fill.
pub fn components_per_label(labels: &[u32], width: usize) -> BTreeMap<u32, usize> {
    let height = labels.len() / width;
    let mut seen = vec![false; labels.len()];
    let mut out = BTreeMap::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        *out.entry(labels[start]).or_insert(0) += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < width {
                nb.push(p + 1);
            }
            if y > 0 {
                nb.push(p - width);
            }
            if y + 1 < height {
                nb.push(p + width);
            }
            for q in nb {
                if !seen[q] && labels[q] == labels[start] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    out
}
