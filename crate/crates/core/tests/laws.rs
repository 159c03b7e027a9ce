//! Monte Carlo checks of the simulated laws against closed forms and the
//! deterministic moment oracles.

use bmp_core::fluctuations::estimate_w;
use bmp_core::model::{make_finite_type_channels, make_house_of_cards, make_yule, FiniteChannel, HouseOfCardsParams, Model};
use bmp_core::semigroup::{mean_semigroup_apply, solve_eigentriplet};
use bmp_core::simulator::{alive_traits, simulate_ensemble, simulate_trajectory};
use bmp_core::{stats, EnsembleSpec, Execution, StreamSeed, TestFunction};

fn spec(x0: f64, grid: &[f64], extension: f64, replicas: usize, seed: u64) -> EnsembleSpec {
    EnsembleSpec { x0, grid: grid.to_vec(), extension, replicas, master_seed: seed, cap: 1_000_000, growth_rate: None }
}

fn two_type() -> Model {
    make_finite_type_channels(vec![
        FiniteChannel { name: "fission".into(), rates: vec![0.5, 1.0], offspring: vec![vec![0.0, 0.0, 1.0]], kernel: None },
        FiniteChannel {
            name: "switch".into(),
            rates: vec![0.5, 0.5],
            offspring: vec![vec![0.0, 1.0]],
            kernel: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
        },
    ])
    .unwrap()
}

fn one_column(model: &Model, x0: f64, t: f64, replicas: usize, seed: u64, f: TestFunction) -> Vec<f64> {
    let ens = simulate_ensemble(model, &spec(x0, &[t], 0.0, replicas, seed), &[f], Execution::Parallel).unwrap();
    assert_eq!(ens.truncation_count(), 0);
    ens.column(0, 0)
}

#[test]
fn yule_mean_population_at_five() {
    let n = one_column(&make_yule(1.0).unwrap(), 0.0, 5.0, 10_000, 11, TestFunction::ones());
    let e = stats::batch_estimate(&n, stats::mean);
    assert!(e.within(5f64.exp(), 3.0), "{e:?}");
}

#[test]
fn yule_mean_count_at_three() {
    let n = one_column(&make_yule(1.0).unwrap(), 0.0, 3.0, 4000, 12, TestFunction::ones());
    let e = stats::batch_estimate(&n, stats::mean);
    assert!(e.within(3f64.exp(), 3.0), "{e:?}");
}

#[test]
fn yule_variance_at_six() {
    let n = one_column(&make_yule(1.0).unwrap(), 0.0, 6.0, 2000, 13, TestFunction::ones());
    let e = stats::batch_estimate(&n, stats::variance);
    assert!(e.within(12f64.exp() - 6f64.exp(), 3.0), "{e:?}");
}

#[test]
fn first_event_time_is_exponential() {
    let rate = 2.5;
    let model = make_yule(rate).unwrap();
    // A cap of one stops each trajectory at its first event.
    let times: Vec<f64> = (0..100_000)
        .map(|r| {
            let traj = simulate_trajectory(&model, 0.0, 60.0, StreamSeed::replica(14, r), 1).unwrap();
            traj.events[0].time
        })
        .collect();
    let ks = stats::ks_one_sample(&times, |t| if t < 0.0 { 0.0 } else { 1.0 - (-rate * t).exp() });
    assert!(ks.passes(0.01), "{ks:?}");
}

#[test]
fn hoc_mean_population_matches_oracle() {
    let model = make_house_of_cards(HouseOfCardsParams::new("x").unwrap()).unwrap();
    let oracle = mean_semigroup_apply(&model, 5.0, &TestFunction::ones(), &[0.0]).unwrap().at(0.0).unwrap();
    let n = one_column(&model, 0.0, 5.0, 4000, 15, TestFunction::ones());
    let e = stats::batch_estimate(&n, stats::mean);
    assert!(e.within(oracle, 3.0), "{e:?} vs {oracle}");
}

#[test]
fn hoc_generator_from_short_horizon() {
    // A f(x) = int f - alpha(x) f(x) for alpha(x) = x, f(x) = x at x = 0.5.
    let model = make_house_of_cards(HouseOfCardsParams::new("x").unwrap()).unwrap();
    let (x0, dt) = (0.5, 0.02);
    let generator = 0.5 - 0.5 * 0.5;
    let f = TestFunction::new("x", |x| x);
    let finite = (mean_semigroup_apply(&model, dt, &f, &[x0]).unwrap().at(x0).unwrap() - x0) / dt;
    let z = one_column(&model, x0, dt, 200_000, 16, f);
    let quotient: Vec<f64> = z.iter().map(|v| (v - x0) / dt).collect();
    let e = stats::batch_estimate(&quotient, stats::mean);
    assert!(e.within(finite, 3.0), "{e:?} vs {finite}");
    assert!((finite - generator).abs() < 0.5 * dt, "{finite} vs {generator}");
}

#[test]
fn constant_alpha_hoc_matches_single_type() {
    // Death at rate c plus immigration at rate 1 is, for Z_t(1), a single type
    // branching at rate 1 + c into 0 or 2 children.
    let c = 0.5;
    let hoc = make_house_of_cards(HouseOfCardsParams::new("0.5").unwrap()).unwrap();
    let single = make_finite_type_channels(vec![
        FiniteChannel { name: "death".into(), rates: vec![c], offspring: vec![vec![1.0]], kernel: None },
        FiniteChannel { name: "birth".into(), rates: vec![1.0], offspring: vec![vec![0.0, 0.0, 1.0]], kernel: None },
    ])
    .unwrap();
    let a = one_column(&hoc, 0.3, 3.0, 3000, 17, TestFunction::ones());
    let b = one_column(&single, 0.0, 3.0, 3000, 18, TestFunction::ones());
    let ks = stats::ks_two_sample(&a, &b);
    assert!(ks.passes(0.01), "{ks:?}");
}

#[test]
fn branching_property_two_stage_restart() {
    let model = two_type();
    let (t, s, n) = (1.5, 1.5, 1500);
    let type0 = || TestFunction::new("type0", |x| if x == 0.0 { 1.0 } else { 0.0 });
    let direct = one_column(&model, 0.0, t + s, n, 19, type0());
    let f = type0();
    let restarted: Vec<f64> = (0..n)
        .map(|r| {
            let first = simulate_trajectory(&model, 0.0, t, StreamSeed::replica(20, r), 1_000_000).unwrap();
            alive_traits(&first, t)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let seed = StreamSeed::new(21 + r as u64, j as u64);
                    let child = simulate_trajectory(&model, x, s, seed, 1_000_000).unwrap();
                    alive_traits(&child, s).unwrap().iter().map(|&y| f.eval(y)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    let ks = stats::ks_two_sample(&direct, &restarted);
    assert!(ks.passes(0.01), "{ks:?}");
}

#[test]
fn martingale_limit_has_mean_h() {
    let model = two_type();
    let triplet = solve_eigentriplet(&model).unwrap();
    let ens = simulate_ensemble(&model, &spec(1.0, &[2.0], 8.0, 2000, 22), &[triplet.h_function()], Execution::Parallel).unwrap();
    let w = estimate_w(&ens, &triplet, 2.0, 10.0).unwrap();
    let e = stats::batch_estimate(&w.values, stats::mean);
    assert!(e.within(triplet.h(1.0), 3.0), "{e:?} vs {}", triplet.h(1.0));
}
