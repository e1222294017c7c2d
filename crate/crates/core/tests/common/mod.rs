//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ctvseg::phantom::{ClinicalRecord, Grid, Laterality, NStage, Surgery, TStage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> Grid<u8> {
    let n = dims.iter().product();
    Grid::from_vec(dims, [1.0, 1.0, 3.0], (0..n).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
}

pub fn brute_boundary(m: &Grid<u8>) -> Vec<[i64; 3]> {
    let d = m.dims().map(|v| v as i64);
    let on = |c: [i64; 3]| (0..3).all(|a| c[a] >= 0 && c[a] < d[a]) && m.get(c[0] as usize, c[1] as usize, c[2] as usize) == 1;
    let mut out = Vec::new();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let c = [i, j, k];
                if on(c) && [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|o| !on([i + o[0], j + o[1], k + o[2]])) {
                    out.push(c);
                }
            }
        }
    }
    out
}

pub fn brute_hd95_cm(a: &Grid<u8>, b: &Grid<u8>, sp: [f64; 3]) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let dist = |p: [i64; 3], q: [i64; 3]| (0..3).map(|x| ((p[x] - q[x]) as f64 * sp[x]).powi(2)).sum::<f64>().sqrt();
    let nearest = |p: [i64; 3], set: &[[i64; 3]]| set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb)).chain(bb.iter().map(|&p| nearest(p, &ba))).collect();
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    (all[lo] + (rank - lo as f64) * (all[hi] - all[lo])) / 10.0
}

/// Ruleset written from scratch against raw label codes.
pub fn oracle_mask(r: &ClinicalRecord, labels: &Grid<u8>) -> Vec<u8> {
    let [_, width, _] = labels.dims();
    let right = r.laterality == Some(Laterality::Right);
    let t = r.t_stage.unwrap();
    let n = r.n_stage.unwrap();
    let nodes = n != NStage::N0 || t == TStage::T3 || t == TStage::T4;
    let mast = r.surgery == Some(Surgery::Mastectomy);
    (0..labels.len())
        .map(|i| {
            let w = (i / labels.dims()[2]) % width;
            let ipsi = (w >= width / 2) == right;
            let v = match labels.data()[i] {
                1 => !right,
                2 => right,
                3 => nodes && !right,
                4 => nodes && right,
                5 | 6 => mast && ipsi,
                _ => false,
            };
            v as u8
        })
        .collect()
}
