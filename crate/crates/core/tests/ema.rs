use mcnmt::coteach::{ema_update, MeanTeacherState};
use mcnmt::encoder::{EncoderParams, Layer};
use mcnmt::rng::stream;
use proptest::prelude::*;
use rand::Rng as _;

fn assert_close(a: &EncoderParams, b: &EncoderParams) {
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

fn flat(values: &[f64]) -> EncoderParams {
    EncoderParams::from_layers(
        vec![1, values.len()],
        vec![Layer {
            weights: values.to_vec(),
            bias: vec![0.0; values.len()],
        }],
        false,
    )
    .unwrap()
}

#[test]
fn envelope_over_long_random_sequences() {
    for seed in 0..5 {
        let mut rng = stream(seed, "ema-envelope");
        let dims = [3, 4, 2];
        let start = EncoderParams::init(&dims, true, &mut rng).unwrap();
        let alpha = rng.random_range(0.0..0.999);
        let mut state = MeanTeacherState::new(&start, alpha).unwrap();
        let mut lo: Vec<f64> = start.iter().copied().collect();
        let mut hi = lo.clone();
        for _ in 0..1000 {
            let mut cur = start.clone();
            cur.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            for (k, v) in cur.iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
            state = ema_update(&state, &cur).unwrap();
            for (k, a) in state.avg_params.iter().enumerate() {
                assert!(*a >= lo[k] - 1e-12 && *a <= hi[k] + 1e-12);
            }
        }
        assert_eq!(state.iteration, 1000);
    }
}

#[test]
fn fixed_point_collapse_and_midpoint() {
    let p = flat(&[0.3, -1.7, 2.5]);
    let s = MeanTeacherState::new(&p, 0.999).unwrap();
    assert_close(&ema_update(&s, &p).unwrap().avg_params, &p);

    let cur = flat(&[9.0, 8.0, 7.0]);
    let s0 = MeanTeacherState::new(&p, 0.0).unwrap();
    assert_close(&ema_update(&s0, &cur).unwrap().avg_params, &cur);

    let s = MeanTeacherState::new(&flat(&[1.0, 2.0]), 0.5).unwrap();
    assert_close(
        &ema_update(&s, &flat(&[3.0, 4.0])).unwrap().avg_params,
        &flat(&[2.0, 3.0]),
    );
}

proptest! {
    #[test]
    fn update_is_monotone_in_current(
        avg in prop::collection::vec(-5.0f64..5.0, 4),
        cur in prop::collection::vec(-5.0f64..5.0, 4),
        bump in 0.0f64..3.0,
        k in 0usize..4,
        alpha in 0.0f64..0.9999,
    ) {
        let s = MeanTeacherState::new(&flat(&avg), alpha).unwrap();
        let mut higher = cur.clone();
        higher[k] += bump;
        let a = ema_update(&s, &flat(&cur)).unwrap().avg_params;
        let b = ema_update(&s, &flat(&higher)).unwrap().avg_params;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn equal_inputs_are_a_fixed_point(values in prop::collection::vec(-1e6f64..1e6, 1..6), alpha in 0.0f64..0.9999) {
        let p = flat(&values);
        let s = MeanTeacherState::new(&p, alpha).unwrap();
        let got = ema_update(&s, &p).unwrap().avg_params;
        prop_assert!(got.iter().zip(p.iter()).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
    }
}
