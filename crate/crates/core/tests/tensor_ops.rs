mod common;

use common::{for_each_index, random_tensor, rel_err, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rstd_core::tensor::invert_modes;
use rstd_core::DenseTensor;

/// Brute-force contraction: loops over every free index tuple and sums the
/// matched ones.
fn nested_loop_contract(
    a: &DenseTensor<f64>,
    b: &DenseTensor<f64>,
    modes_a: &[usize],
    modes_b: &[usize],
) -> (Vec<usize>, Vec<f64>) {
    let free_a: Vec<usize> = (0..a.order()).filter(|m| !modes_a.contains(m)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|m| !modes_b.contains(m)).collect();
    let mut out_shape: Vec<usize> = free_a.iter().map(|&m| a.shape()[m]).collect();
    out_shape.extend(free_b.iter().map(|&m| b.shape()[m]));
    let sum_shape: Vec<usize> = modes_a.iter().map(|&m| a.shape()[m]).collect();
    let mut out = Vec::new();
    let shape_for_loop = if out_shape.is_empty() { vec![1] } else { out_shape.clone() };
    for_each_index(&shape_for_loop, |o| {
        let mut acc = 0.0;
        for_each_index(&sum_shape, |s| {
            let mut ia = vec![0; a.order()];
            let mut ib = vec![0; b.order()];
            for (k, &m) in free_a.iter().enumerate() {
                ia[m] = o[k];
            }
            for (k, &m) in free_b.iter().enumerate() {
                ib[m] = o[free_a.len() + k];
            }
            for (k, (&ma, &mb)) in modes_a.iter().zip(modes_b).enumerate() {
                ia[ma] = s[k];
                ib[mb] = s[k];
            }
            acc += a.get(&ia) * b.get(&ib);
        });
        out.push(acc);
    });
    (if out_shape.is_empty() { vec![1] } else { out_shape }, out)
}

#[test]
fn row_major_indexing() {
    let t = DenseTensor::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(t.get(&[1, 0]), 3.0);
    let s = DenseTensor::from_slice(&[1], &[5.0]).unwrap();
    assert_eq!(s.data(), &[5.0]);
    let err = DenseTensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('5') && msg.contains('6'), "{msg}");
}

#[test]
fn transpose_and_inverse() {
    let t = DenseTensor::from_fn(&[2, 3], |i| i as f64).unwrap();
    let tt = t.permute_modes(&[1, 0]).unwrap();
    assert_eq!(tt.shape(), &[3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(tt.get(&[j, i]), t.get(&[i, j]));
        }
    }
    assert!(t.permute_modes(&[0, 0]).is_err());
    assert_eq!(t.permute_modes(&[0, 1]).unwrap(), t);
}

#[test]
fn matrix_vector_by_hand() {
    let a = DenseTensor::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = DenseTensor::from_slice(&[2], &[1.0, 1.0]).unwrap();
    let c = a.contract(&b, &[1], &[0]).unwrap();
    assert_eq!(c.shape(), &[2]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn identity_contraction_is_noop() {
    let mut r = rng(3);
    let t = random_tensor(&[3, 4, 2], &mut r);
    let eye = DenseTensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).unwrap();
    let c = t.contract(&eye, &[1], &[0]).unwrap();
    // output is (3, 2, 4): move the new mode back to position 1
    let back = c.permute_modes(&[0, 2, 1]).unwrap();
    assert_eq!(back, t);
}

#[test]
fn mismatched_pair_is_named() {
    let a = DenseTensor::<f64>::zeros(&[2, 3]).unwrap();
    let b = DenseTensor::<f64>::zeros(&[4, 2]).unwrap();
    let msg = a.contract(&b, &[1], &[0]).unwrap_err().to_string();
    assert!(msg.contains("mode 1") && msg.contains("mode 0"), "{msg}");
}

#[test]
fn small_fixed_instance_against_nested_loops() {
    let mut r = rng(11);
    let a = random_tensor(&[2, 3, 2], &mut r);
    let b = random_tensor(&[3, 2], &mut r);
    let c = a.contract(&b, &[1, 2], &[0, 1]).unwrap();
    let (shape, want) = nested_loop_contract(&a, &b, &[1, 2], &[0, 1]);
    assert_eq!(c.shape(), shape.as_slice());
    assert!(rel_err(c.data(), &want) < 1e-12);
}

#[test]
fn random_contractions_against_nested_loops() {
    let mut r = rng(12);
    for _ in 0..300 {
        let oa = r.random_range(1..=4usize);
        let ob = r.random_range(1..=4usize);
        let sa: Vec<usize> = (0..oa).map(|_| r.random_range(1..=4)).collect();
        let mut sb: Vec<usize> = (0..ob).map(|_| r.random_range(1..=4)).collect();
        let k = r.random_range(0..=oa.min(ob));
        let mut ma: Vec<usize> = (0..oa).collect();
        let mut mb: Vec<usize> = (0..ob).collect();
        ma.shuffle(&mut r);
        mb.shuffle(&mut r);
        ma.truncate(k);
        mb.truncate(k);
        for (&x, &y) in ma.iter().zip(&mb) {
            sb[y] = sa[x];
        }
        let a = random_tensor(&sa, &mut r);
        let b = random_tensor(&sb, &mut r);
        let c = a.contract(&b, &ma, &mb).unwrap();
        let (shape, want) = nested_loop_contract(&a, &b, &ma, &mb);
        assert_eq!(c.shape(), shape.as_slice());
        assert!(rel_err(c.data(), &want) < 1e-12, "{sa:?} {sb:?} {ma:?} {mb:?}");
    }
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=4)
}

proptest! {
    #[test]
    fn permute_round_trip_is_exact(shape in shape_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = random_tensor(&shape, &mut r);
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.shuffle(&mut r);
        let back = t.permute_modes(&perm).unwrap().permute_modes(&invert_modes(&perm)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn contraction_is_bilinear(shape in shape_strategy(), alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&shape, &mut r);
        let a2 = random_tensor(&shape, &mut r);
        let b = random_tensor(&[shape[0], 3], &mut r);
        let lhs = a.scale(alpha).contract(&b, &[0], &[0]).unwrap();
        let rhs = a.contract(&b, &[0], &[0]).unwrap().scale(alpha);
        prop_assert!(rel_err(lhs.data(), rhs.data()) < 1e-12);
        let sum = a.add_scaled(&a2, 1.0).unwrap().contract(&b, &[0], &[0]).unwrap();
        let parts = a.contract(&b, &[0], &[0]).unwrap()
            .add_scaled(&a2.contract(&b, &[0], &[0]).unwrap(), 1.0).unwrap();
        prop_assert!(rel_err(sum.data(), parts.data()) < 1e-12);
    }
}
