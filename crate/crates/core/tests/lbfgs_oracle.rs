mod common;

use common::{random_pair, two_loop, two_loop_dense};
use hamsi::lbfgs::LbfgsMemory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn compact_dense(mem: &LbfgsMemory) -> Vec<f64> {
    let dim = mem.dim();
    let mut h = vec![0.0; dim * dim];
    let mut col = vec![0.0; dim];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        mem.inverse_hessian_product(&e, &mut col).unwrap();
        for i in 0..dim {
            h[i * dim + j] = col[i];
        }
    }
    h
}

#[test]
fn compact_form_matches_two_loop_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let dim = rng.random_range(1..=20);
        let m = rng.random_range(1..=4);
        let offered = rng.random_range(1..=m + 4);
        let mut mem = LbfgsMemory::new(dim, m).unwrap();
        let mut kept = Vec::new();
        for _ in 0..offered {
            let pair = random_pair(&mut rng, dim);
            assert!(mem.update_memory(&pair.0, &pair.1).unwrap());
            kept.push(pair);
        }
        let kept = &kept[kept.len().saturating_sub(m)..];
        let h = compact_dense(&mem);
        let oracle = two_loop_dense(kept, dim);
        for (a, b) in h.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "dim {dim} M {m}: {a} vs {b}");
        }
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let hg = two_loop(kept, &g);
        let mut out = vec![0.0; dim];
        mem.inverse_hessian_product(&g, &mut out).unwrap();
        for (a, b) in out.iter().zip(&hg) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
