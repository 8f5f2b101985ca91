//! Brute-force metric oracles written independently of the implementation:
//! pair counting for AUC, O(n^2) rank counting plus Pearson for Spearman, and
//! a full edit-distance table for identity. Shared by the core tests and the
//! acceptance run.

use protlm::metrics::{auc_roc, sequence_identity, spearman_rho};
use protlm::rng::Rng;

pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn rank_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let rx = rank_by_counting(x);
    let ry = rank_by_counting(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

pub fn edit_table(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + cost);
        }
    }
    t[a.len()][b.len()]
}

pub fn identity_oracle(a: &str, b: &str) -> f64 {
    1.0 - edit_table(a.as_bytes(), b.as_bytes()) as f64 / a.len().max(b.len()) as f64
}

/// Scores on a coarse grid so ties are common.
pub fn random_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.below(8) as f64 * 0.125).collect()
}

pub fn random_residues(rng: &mut Rng, alphabet: &[u8]) -> String {
    let n = 1 + rng.below(25);
    (0..n).map(|_| alphabet[rng.below(alphabet.len())] as char).collect()
}

pub fn monotone(kind: u8, x: f64) -> f64 {
    match kind % 4 {
        0 => 3.0 * x - 7.0,
        1 => x.exp(),
        2 => x * x * x + x,
        _ => 1.0 / (1.0 + (-x).exp()),
    }
}


/// Worst |auc_roc - pair counting| over `instances` random tied-score cases.
pub fn auc_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 2 + rng.below(40);
        let scores = random_scores(&mut rng, n);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc_roc(&scores, &labels).unwrap();
        worst = worst.max((got - auc_pairs(&scores, &labels)).abs());
    }
    worst
}

/// Worst |spearman_rho - rank Pearson| over `instances` non-constant cases.
/// Constant inputs must be rejected; a panic flags one that is not.
pub fn spearman_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let n = 2 + rng.below(30);
        let x = random_scores(&mut rng, n);
        let y = random_scores(&mut rng, n);
        if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
            assert!(spearman_rho(&x, &y).is_err(), "constant input accepted");
            continue;
        }
        let got = spearman_rho(&x, &y).unwrap();
        worst = worst.max((got - spearman_oracle(&x, &y)).abs());
        done += 1;
    }
    worst
}

/// Worst |sequence_identity - DP table| over `instances` random pairs.
pub fn identity_sweep(seed: u64, instances: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let a = random_residues(&mut rng, b"ACDW");
        let b = random_residues(&mut rng, b"ACDW");
        let got = sequence_identity(&a, &b).unwrap();
        worst = worst.max((got - identity_oracle(&a, &b)).abs());
    }
    worst
}

/// Cases where a strictly increasing map of the scores changed AUC or
/// Spearman by more than 1e-12.
pub fn monotone_violations(seed: u64, instances: usize) -> usize {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for i in 0..instances {
        let n = 4 + rng.below(30);
        let x = random_scores(&mut rng, n);
        let y = random_scores(&mut rng, n);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let mx: Vec<f64> = x.iter().map(|&v| monotone(i as u8, v)).collect();
        let my: Vec<f64> = y.iter().map(|&v| monotone(i as u8 + 1, v)).collect();
        if auc_roc(&x, &labels).unwrap() != auc_roc(&mx, &labels).unwrap() {
            bad += 1;
        }
        if let (Ok(a), Ok(b)) = (spearman_rho(&x, &y), spearman_rho(&mx, &my)) {
            if (a - b).abs() > 1e-12 {
                bad += 1;
            }
        }
    }
    bad
}
