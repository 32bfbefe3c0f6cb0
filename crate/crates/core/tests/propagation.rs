mod common;

use common::{kalman_filter_error, psd_factor, sample_gaussian, Moments};
use fpgp::adf::{LatentInit, ObservationModel};
use fpgp::belief::GaussianBelief;
use fpgp::fpsgp::FixedPointSet;
use fpgp::TransitionModel;
use fpgp::kernels::KernelHyperparams;
use fpgp::linalg::Mat;
use fpgp::rng::substream;
use fpgp::sgp::InducingSet;
use rand::Rng;

fn random_model(rng: &mut impl Rng, d: usize) -> TransitionModel {
    let m = 4;
    let kernel = KernelHyperparams::exponentiated_quadratic(
        rng.random_range(0.5..2.0),
        &(0..d).map(|_| rng.random_range(0.5..1.5)).collect::<Vec<_>>(),
    );
    let z = Mat::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5));
    let u = Mat::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
    let su: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.5)).collect();
    let s = Mat::from_fn(1, d, |_, _| rng.random_range(-0.5..0.5));
    let j = Mat::from_fn(d, d, |_, _| rng.random_range(-0.8..0.8));
    let fp = FixedPointSet::new(s, vec![rng.random_range(0.05..0.3)], vec![j]).unwrap();
    TransitionModel::new(kernel, InducingSet::new(z, u, su).unwrap(), fp).unwrap()
}

/// Law of total variance: `E[f]` and `E[f fᵀ] = E[m mᵀ] + diag E[v]` over the input belief.
#[test]
fn predicted_moments_match_monte_carlo_over_the_input() {
    let mut rng = substream(21, "propagation");
    let samples = 20_000;
    let (mut ok, mut total) = (0, 0);
    for case in 0..20 {
        let d = 1 + case % 2;
        let model = random_model(&mut rng, d);
        let post = model.posterior().unwrap();
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = Mat::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => rng.random_range(0.1..0.6),
            std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
            std::cmp::Ordering::Less => 0.0,
        });
        let belief = GaussianBelief::new(mean.clone(), l.matmul(&l.transpose()).symmetrize()).unwrap();
        let out = post.predict_moments(&belief).unwrap();
        let chol = psd_factor(&belief.cov);
        let mut first = vec![Moments::default(); d];
        let mut second = vec![Moments::default(); d * d];
        for _ in 0..samples {
            let x = sample_gaussian(&mut rng, &mean, &chol);
            let (m, v) = post.predict(&x).unwrap();
            for a in 0..d {
                first[a].push(m[a]);
                for b in 0..d {
                    second[a * d + b].push(m[a] * m[b] + if a == b { v[a] } else { 0.0 });
                }
            }
        }
        for a in 0..d {
            total += 1;
            ok += first[a].agrees(out.mean[a], 4.0) as usize;
            for b in 0..d {
                total += 1;
                ok += second[a * d + b].agrees(out.cov[(a, b)] + out.mean[a] * out.mean[b], 4.0) as usize;
            }
        }
    }
    assert_eq!(ok, total, "{ok}/{total} statistics within 4 standard errors");
}

#[test]
fn point_belief_reduces_to_point_prediction() {
    let mut rng = substream(22, "propagation-point");
    for d in 1..=2 {
        let post = random_model(&mut rng, d).posterior().unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = post.predict_moments(&GaussianBelief::point(x.clone())).unwrap();
        let (m, v) = post.predict(&x).unwrap();
        for a in 0..d {
            assert!((out.mean[a] - m[a]).abs() < 1e-9);
            assert!((out.cov[(a, a)] - v[a]).abs() < 1e-9);
        }
    }
}

fn check_against_kalman(a: &[f64], q: &[f64], obs: ObservationModel<f64>, init: LatentInit<f64>, ys: &Mat<f64>) {
    let err = kalman_filter_error(a, q, &obs, &init, ys);
    assert!(err < 1e-6, "largest deviation from exact Kalman filtering {err:e}");
}

#[test]
fn linear_gp_filter_is_a_kalman_filter_1d() {
    let mut rng = substream(23, "kalman-1d");
    let ys = Mat::from_fn(25, 1, |_, _| rng.random_range(-2.0..2.0));
    let obs = ObservationModel::new(Mat::from_row_slice(1, 1, &[1.3]), vec![0.4]).unwrap();
    check_against_kalman(&[0.8], &[0.09], obs, LatentInit::new(vec![0.5], vec![0.2]).unwrap(), &ys);
}

#[test]
fn linear_gp_filter_is_a_kalman_filter_diagonal_2d() {
    let mut rng = substream(24, "kalman-2d");
    let ys = Mat::from_fn(30, 2, |_, _| rng.random_range(-2.0..2.0));
    let obs = ObservationModel::new(Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.6]), vec![0.3, 0.5]).unwrap();
    check_against_kalman(&[0.9, -0.5], &[0.04, 0.2], obs, LatentInit::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap(), &ys);
}
