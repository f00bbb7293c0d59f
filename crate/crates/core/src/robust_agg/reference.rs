//! Naive, independently written reference implementations of the
//! aggregation rules. These exist purely as oracles: every routine here
//! prefers the most literal transcription of the rule over efficiency,
//! and deliberately avoids sharing code with the production versions.

/// Weighted mean computed as an explicit accumulate-then-divide.
pub fn fedavg(rows: &[Vec<f64>], counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let mut acc = vec![0.0; rows[0].len()];
    for (row, &n) in rows.iter().zip(counts) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += n as f64 * x;
        }
    }
    acc.iter().map(|a| a / total as f64).collect()
}

/// Per-coordinate median via repeated minimum extraction (selection sort)
/// rather than a library sort.
pub fn coordinate_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    (0..dim)
        .map(|c| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let mut sorted = Vec::with_capacity(col.len());
            while !col.is_empty() {
                let mut min_idx = 0;
                for i in 1..col.len() {
                    if col[i] < col[min_idx] {
                        min_idx = i;
                    }
                }
                sorted.push(col.swap_remove(min_idx));
            }
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Trimmed mean by literally deleting the extreme value `m` times per
/// side, then averaging whatever is left.
pub fn trimmed_mean(rows: &[Vec<f64>], m: usize) -> Vec<f64> {
    let dim = rows[0].len();
    (0..dim)
        .map(|c| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            for _ in 0..m {
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let pos = col.iter().position(|&x| x == max).unwrap();
                col.remove(pos);
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let pos = col.iter().position(|&x| x == min).unwrap();
                col.remove(pos);
            }
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s
}

/// Multi-Krum selection, recomputing every distance from scratch at every
/// iteration. Returns selected client ids in order.
pub fn multi_krum_selected(
    ids: &[u64],
    rows: &[Vec<f64>],
    f: usize,
    select_count: Option<usize>,
) -> Vec<u64> {
    let mut remaining: Vec<usize> = (0..ids.len()).collect();
    let mut selected = Vec::new();
    loop {
        let done = match select_count {
            Some(t) => selected.len() >= t || remaining.is_empty(),
            None => remaining.len() <= 2 * f + 2,
        };
        if done {
            break;
        }
        let closest = if remaining.len() > f + 2 { remaining.len() - f - 2 } else { 1 };
        let mut best: Option<(u64, f64, usize)> = None;
        for &i in &remaining {
            let mut ds: Vec<f64> = remaining
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist2(&rows[i], &rows[j]))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // A lone remaining candidate has no distances; score it 0.
            let score: f64 = ds.iter().take(closest).sum();
            let replace = match best {
                None => true,
                Some((bid, bs, _)) => score < bs || (score == bs && ids[i] < bid),
            };
            if replace {
                best = Some((ids[i], score, i));
            }
        }
        let (_, _, pick) = best.unwrap();
        selected.push(ids[pick]);
        remaining.retain(|&x| x != pick);
    }
    selected
}

/// Bulyan as the literal two-stage composition.
pub fn bulyan(ids: &[u64], rows: &[Vec<f64>], f: usize) -> Vec<f64> {
    let chosen = multi_krum_selected(ids, rows, f, Some(2 * f + 3));
    let picked: Vec<Vec<f64>> = chosen
        .iter()
        .map(|id| rows[ids.iter().position(|x| x == id).unwrap()].clone())
        .collect();
    trimmed_mean(&picked, f)
}

/// FLTrust transcribed term by term from its defining formula.
pub fn fltrust(rows: &[Vec<f64>], root: &[f64]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let root_norm = norm(root);
    let trusts: Vec<f64> = rows
        .iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 || root_norm == 0.0 {
                return 0.0;
            }
            let cos = r.iter().zip(root).map(|(a, b)| a * b).sum::<f64>() / (n * root_norm);
            cos.max(0.0)
        })
        .collect();
    let total: f64 = trusts.iter().sum();
    if total == 0.0 {
        return vec![0.0; root.len()];
    }
    let mut out = vec![0.0; root.len()];
    for (r, &t) in rows.iter().zip(&trusts) {
        if t == 0.0 {
            continue;
        }
        let rescale = root_norm / norm(r);
        for (o, &x) in out.iter_mut().zip(r) {
            *o += t * rescale * x / total;
        }
    }
    out
}

/// Sign-cosine similarity computed from agreement counts: the dot product
/// of two sign vectors is (#agreements - #disagreements) over both-nonzero
/// coordinates, and each norm is sqrt(#nonzero).
pub fn sign_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut agree = 0i64;
    let mut disagree = 0i64;
    let mut nz_a = 0usize;
    let mut nz_b = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x != 0.0 {
            nz_a += 1;
        }
        if y != 0.0 {
            nz_b += 1;
        }
        if x != 0.0 && y != 0.0 {
            if (x > 0.0) == (y > 0.0) {
                agree += 1;
            } else {
                disagree += 1;
            }
        }
    }
    if nz_a == 0 || nz_b == 0 {
        return 0.0;
    }
    (agree - disagree) as f64 / ((nz_a as f64).sqrt() * (nz_b as f64).sqrt())
}

/// PBA selection over a similarity matrix, with the top-k sum found by
/// ascending sort and a take-from-the-back loop.
pub fn pba_selected(ids: &[u64], similarity: &[Vec<f64>], m_e: usize) -> Vec<u64> {
    let mut remaining: Vec<usize> = (0..ids.len()).collect();
    let mut selected = Vec::new();
    while remaining.len() > 2 * m_e + 2 {
        let take = remaining.len() - m_e - 1;
        let mut best: Option<(u64, f64, usize)> = None;
        for &i in &remaining {
            let mut sims: Vec<f64> = remaining
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| similarity[i][j])
                .collect();
            // Sum largest-first so the floating-point association matches
            // the score the selection rule under test computes; otherwise
            // 1-ulp differences flip near-tied argmax picks.
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let score: f64 = sims[..take].iter().sum();
            let replace = match best {
                None => true,
                Some((bid, bs, _)) => score > bs || (score == bs && ids[i] < bid),
            };
            if replace {
                best = Some((ids[i], score, i));
            }
        }
        let (_, _, pick) = best.unwrap();
        selected.push(ids[pick]);
        remaining.retain(|&x| x != pick);
    }
    selected
}
