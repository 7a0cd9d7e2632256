//! Real-time quench of a 12-site Néel state under the XXZ chain, evolved
//! with a single p=5 cluster-expansion MPO per step, checked against exact
//! dense evolution at every recorded step.
//!
//! The point to notice: dt = 0.5 is a large step for a scheme whose formal
//! error is O(dt⁵) per step, yet the occupations track the dense reference
//! to a few 1e-4 all the way to t = 4.

use num_complex::Complex64 as C64;

use clusterexp::model::xxz_term;
use clusterexp::mpo::build;
use clusterexp::mps::{evolve, FiniteMps, Schedule};
use clusterexp::oracle::{mps_to_dense, DensePropagator};

fn main() {
    let n_sites = 12;
    let dt = 0.5;
    let steps = 8;
    let h = xxz_term(0.5);
    let t = C64::new(0.0, -dt);

    let (mpo, _) = build(&h, t, 5, 1e-12).expect("build succeeds");
    let initial = FiniteMps::neel_state(n_sites).expect("even chain");
    let (_, records) = evolve(initial.clone(), &mpo, steps, 64, 1e-12, &Schedule::default())
        .expect("evolution runs");

    let propagator = DensePropagator::new(&h, n_sites).expect("12 sites is oracle range");
    let mut dense = mps_to_dense(&initial).expect("product state");

    println!("step  time   n_mid(mps)   n_mid(exact)  deviation   entropy  trunc");
    let mid = n_sites / 2;
    let mut worst = 0.0f64;
    for record in &records {
        dense = propagator.step(&dense, t).expect("dense step");
        let exact = dense.occupation(mid).expect("occupation");
        let dev: f64 = (0..n_sites)
            .map(|s| (record.occupations[s] - dense.occupation(s).unwrap()).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        println!(
            "{:>4}  {:>4.1}  {:>10.6}  {:>12.6}  {:>9.2e}  {:>7.4}  {:.2e}",
            record.step, record.time, record.occupations[mid], exact, dev, record.entropy,
            record.trunc_error
        );
    }
    println!("\nlargest occupation deviation over all sites and steps: {worst:.3e}");
}
