//! Measures how the open-chain error of the cluster-expansion MPO scales
//! with the time step: for order p the first missing cluster spans p+1
//! sites, so the error on a longer chain is O(dt^p).
//!
//! Prints the raw error table, the fitted log-log slope per p, and the
//! combinatorial fraction p!/pᵖ of the O(dt^p) Taylor terms that are
//! actually wrong, which is why the prefactor is so small.

use num_complex::Complex64 as C64;

use clusterexp::model::{cluster_hamiltonian, xxz_term};
use clusterexp::mpo::{build, contract_open_chain, slope_above_noise};
use clusterexp::tensor::matrix_exponential;

fn main() {
    let h = xxz_term(0.5);
    let dts = [0.05, 0.1, 0.2, 0.4];

    println!("{:>3} {:>8} {:>14}", "p", "dt", "error");
    for p in 2..=5usize {
        let n = p + 1;
        let hn = cluster_hamiltonian(&h, n).expect("chain Hamiltonian");
        let mut points = Vec::new();
        for &dt in &dts {
            let t = C64::new(0.0, -dt);
            let (mpo, _) = build(&h, t, p, 1e-12).expect("build succeeds");
            let chain = contract_open_chain(&mpo, n).expect("contraction");
            let exact = matrix_exponential(&hn.matrix, t).expect("dense exponential");
            let err = chain.sub(&exact).expect("same shape").frobenius_norm();
            println!("{p:>3} {dt:>8.3} {err:>14.6e}");
            points.push((dt, err));
        }
        let slope = slope_above_noise(&points).expect("errors above noise");
        let fact: u64 = (1..=p as u64).product();
        let pow = (p as u64).pow(p as u32);
        println!(
            "    fitted slope {slope:.2}, wrong-term fraction p!/p^p = {fact}/{pow} = {:.4}\n",
            fact as f64 / pow as f64
        );
    }
}
