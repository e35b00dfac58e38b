mod common;

use common::{random_tensor, rng};
use rand::Rng;
use rstd_core::nn::{conv2d_forward, ConvGeometry, FactorizedConvLayer};
use rstd_core::tdmodel::{rank1_tr_split_forward, reconstruct, CoreSet, KernelDims, TdTopology};
use rstd_core::{DenseTensor, ExecMode};

const SEQ: ExecMode = ExecMode::Sequential;

fn instance(r: &mut impl Rng) -> (TdTopology, CoreSet<f64>, DenseTensor<f64>, ConvGeometry) {
    let k = [1, 3][r.random_range(0..2)];
    let dims = KernelDims::new(r.random_range(1..=4), k, k, r.random_range(2..=5));
    let top = TdTopology::tensor_ring(dims, &[1; 4]).unwrap();
    let cores = CoreSet::new(&top, (0..4).map(|i| random_tensor(&top.core_shape(i), r)).collect()).unwrap();
    let x = random_tensor(&[r.random_range(1..=2), dims.input, 6, 6], r);
    let geom = ConvGeometry::new(r.random_range(1..=2), r.random_range(0..=1));
    (top, cores, x, geom)
}

/// Channel `o` of `y` across batch and spatial positions.
fn channel(y: &DenseTensor<f64>, o: usize) -> Vec<f64> {
    let (b, c) = (y.shape()[0], y.shape()[1]);
    let p = y.shape()[2] * y.shape()[3];
    (0..b).flat_map(|n| y.data()[(n * c + o) * p..(n * c + o + 1) * p].to_vec()).collect()
}

/// Largest deviation of `s` from its least-squares multiple of `base`.
fn proportionality_residual(base: &[f64], s: &[f64]) -> f64 {
    let bb: f64 = base.iter().map(|v| v * v).sum();
    let c = base.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / bb;
    base.iter().zip(s).map(|(a, b)| (b - c * a).abs()).fold(0.0, f64::max)
}

#[test]
fn split_path_equals_reconstruct_then_convolve() {
    let mut r = rng(600);
    for _ in 0..25 {
        let (top, cores, x, geom) = instance(&mut r);
        let bias = random_tensor(&[top.mode_dims()[3]], &mut r);
        let split = rank1_tr_split_forward(&top, &cores, &bias, &x, geom, SEQ).unwrap();
        let w = reconstruct(&top, &cores).unwrap();
        let direct = conv2d_forward(&x, &w, &bias, geom, SEQ).unwrap();
        assert_eq!(split.shape(), direct.shape());
        let err = split.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }
}

#[test]
fn output_channels_identical_up_to_scale() {
    let mut r = rng(601);
    for _ in 0..25 {
        let (top, cores, x, geom) = instance(&mut r);
        let bias = DenseTensor::zeros(&[top.mode_dims()[3]]).unwrap();
        let y = rank1_tr_split_forward(&top, &cores, &bias, &x, geom, SEQ).unwrap();
        let base = channel(&y, 0);
        for o in 1..y.shape()[1] {
            let res = proportionality_residual(&base, &channel(&y, o));
            assert!(res <= 1e-10, "channel {o}: {res}");
        }
    }
}

#[test]
fn unshuffled_rank1_layer_is_proportional_and_shuffled_is_not() {
    let mut r = rng(602);
    let dims = KernelDims::new(3, 3, 3, 4);
    let top = TdTopology::tensor_ring(dims, &[1; 4]).unwrap();
    let cores = CoreSet::new(&top, (0..4).map(|i| random_tensor(&top.core_shape(i), &mut r)).collect()).unwrap();
    let bias = DenseTensor::zeros(&[4]).unwrap();
    let geom = ConvGeometry::new(1, 1);
    let x = random_tensor(&[1, 3, 5, 5], &mut r);

    let plain = FactorizedConvLayer::new(top.clone(), cores.clone(), None, bias.clone(), geom).unwrap();
    let y = plain.forward(&x, SEQ).unwrap();
    let base = channel(&y, 0);
    for o in 1..4 {
        assert!(proportionality_residual(&base, &channel(&y, o)) <= 1e-10);
    }

    let perm = rstd_core::shuffle::Permutation::from_seed(dims.volume(), 1).unwrap();
    let shuffled = FactorizedConvLayer::new(top, cores, Some(perm), bias, geom).unwrap();
    let y = shuffled.forward(&x, SEQ).unwrap();
    let base = channel(&y, 0);
    let worst = (1..4).map(|o| proportionality_residual(&base, &channel(&y, o))).fold(0.0, f64::max);
    assert!(worst > 1e-3, "shuffling should break the rank-1 channel structure");
}

#[test]
fn zero_output_core_gives_zero_output() {
    let mut r = rng(603);
    let (top, mut cores, x, geom) = instance(&mut r);
    let out_core = top.core_of_mode(3).unwrap();
    *cores.core_mut(out_core) = DenseTensor::zeros(&top.core_shape(out_core)).unwrap();
    let bias = DenseTensor::zeros(&[top.mode_dims()[3]]).unwrap();
    let y = rank1_tr_split_forward(&top, &cores, &bias, &x, geom, SEQ).unwrap();
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn rejects_higher_rank_or_other_kinds() {
    let dims = KernelDims::new(2, 3, 3, 2);
    let x = DenseTensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
    let bias = DenseTensor::zeros(&[2]).unwrap();
    let geom = ConvGeometry::new(1, 1);
    let tr2 = TdTopology::tensor_ring(dims, &[1, 2, 1, 1]).unwrap();
    let err = rank1_tr_split_forward(&tr2, &CoreSet::zeros(&tr2), &bias, &x, geom, SEQ).unwrap_err();
    assert!(err.to_string().contains("rank"));
    let tt = TdTopology::tensor_train(dims, &[1, 1, 1]).unwrap();
    assert!(rank1_tr_split_forward(&tt, &CoreSet::zeros(&tt), &bias, &x, geom, SEQ).is_err());
}
