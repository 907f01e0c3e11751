//! Random label maps and a per-pixel double-loop metrics oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revhrnet::ConfusionMatrix;

pub const IGNORE: u32 = 255;
pub const SIDE: usize = 16;

pub fn random_pair(rng: &mut ChaCha8Rng, k: u32, void_rate: f64) -> (Vec<u32>, Vec<u32>) {
    let pred = (0..SIDE * SIDE).map(|_| rng.gen_range(0..k)).collect();
    let truth = (0..SIDE * SIDE)
        .map(|_| if rng.gen_bool(void_rate) { IGNORE } else { rng.gen_range(0..k) })
        .collect();
    (pred, truth)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

pub struct Oracle {
    pub counts: Vec<Vec<u64>>,
    pub ignored: u64,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

/// Row-by-row, column-by-column counting with rational IoU arithmetic.
pub fn oracle(pred: &[u32], truth: &[u32], k: usize) -> Oracle {
    let mut counts = vec![vec![0u64; k]; k];
    let mut ignored = 0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let t = truth[y * SIDE + x];
            let p = pred[y * SIDE + x] as usize;
            if t == IGNORE {
                ignored += 1;
            } else {
                counts[t as usize][p] += 1;
            }
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    let correct: u64 = (0..k).map(|c| counts[c][c]).sum();
    let mut per_class = Vec::new();
    let (mut num, mut den, mut defined) = (0u64, 1u64, 0u64);
    for c in 0..k {
        let tp = counts[c][c];
        let fp: u64 = (0..k).filter(|&r| r != c).map(|r| counts[r][c]).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| counts[c][p]).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(tp as f64 / union as f64));
        num = num * union + tp * den;
        den *= union;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
        defined += 1;
    }
    let miou = (defined > 0).then(|| {
        let d = den * defined;
        let g = gcd(num, d).max(1);
        (num / g) as f64 / (d / g) as f64
    });
    Oracle {
        counts,
        ignored,
        accuracy: correct as f64 / total as f64,
        per_class,
        miou,
    }
}

/// Runs 100 random map pairs (K <= 5, a third without void pixels) through
/// both the confusion matrix and the oracle; returns the first disagreement.
pub fn check_random_cases(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let k = rng.gen_range(2..=5u32);
        let void_rate = [0.0, 0.1, 0.5][case % 3];
        let (pred, truth) = random_pair(&mut rng, k, void_rate);
        let want = oracle(&pred, &truth, k as usize);
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.update(&pred, &truth, SIDE, IGNORE).map_err(|e| e.to_string())?;
        let counts: Vec<Vec<u64>> = (0..k as usize).map(|t| (0..k as usize).map(|p| cm.count(t, p)).collect()).collect();
        let (miou, per) = cm.mean_iou().map_err(|e| e.to_string())?;
        let got = (counts, cm.ignored_pixels(), cm.pixel_accuracy().map_err(|e| e.to_string())?, per, Some(miou));
        let expected = (want.counts, want.ignored, want.accuracy, want.per_class, want.miou);
        if got != expected {
            return Err(format!("case {case}: got {got:?}, oracle {expected:?}"));
        }
    }
    Ok(())
}
