mod common;

use vidinsert::harness::grad_check_suite;
use vidinsert::tensor::{Tape, Tensor};

use common::{reference_attention, rng};
use rand_distr::{Distribution, StandardNormal};

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

#[test]
fn every_primitive_and_the_model_pass_at_three_seeds() {
    let results = grad_check_suite(&[0, 1, 2]).unwrap();
    assert!(results.len() > 3 * 30);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn attention_matches_naive_formula() {
    let (m, n, d, heads) = (7, 11, 12, 3);
    let (q, k, v) = (normals(m * d, 1), normals(n * d, 2), normals(n * d, 3));
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(Tensor::new(vec![m, d], q.clone()).unwrap());
    let kv = tape.constant(Tensor::new(vec![n, d], k.clone()).unwrap());
    let vv = tape.constant(Tensor::new(vec![n, d], v.clone()).unwrap());
    let out = tape.attention(qv, kv, vv, heads).unwrap();
    let want = reference_attention(&q, &k, &v, m, n, d, heads);
    for (a, b) in tape.data(out).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    // With all-ones values each output entry is the sum of one row of
    // attention weights. Sizes span several internal row blocks.
    for (m, n, scale) in [(300, 300, 1.0), (70, 1200, 8.0), (1, 5, 30.0)] {
        let d = 16;
        let q: Vec<f32> = normals(m * d, 4).iter().map(|x| (x * scale) as f32).collect();
        let k: Vec<f32> = normals(n * d, 5).iter().map(|x| (x * scale) as f32).collect();
        for tape in [Tape::<f32>::new(), Tape::<f32>::inference()] {
            let mut tape = tape;
            let qv = tape.leaf(Tensor::new(vec![m, d], q.clone()).unwrap().with_grad());
            let kv = tape.constant(Tensor::new(vec![n, d], k.clone()).unwrap());
            let vv = tape.constant(Tensor::filled(&[n, d], 1.0));
            let out = tape.attention(qv, kv, vv, 4).unwrap();
            for &x in tape.data(out) {
                assert!((x - 1.0).abs() <= 1e-6, "row sum {x}");
            }
        }
    }
}
