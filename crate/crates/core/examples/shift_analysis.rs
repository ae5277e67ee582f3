//! Terminal mean coefficient and variance of the toy under CFG and ReCFG.
//!
//! ```text
//! cargo run --release --example shift_analysis
//! ```

use recfg::shift::{
    cfg_toy_distribution, phi_bounds_check, phi_closed, phi_finite, phi_limit,
    phi_recurrence_residual, recfg_toy_distribution, Parity,
};

fn main() -> recfg::error::Result<()> {
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>10}",
        "gamma", "phi(g, 99)", "phi(g, inf)", "var(g, inf)", "bounds"
    );
    for k in 0..=16 {
        let g = 1.0 + 0.25 * k as f64;
        let limit = cfg_toy_distribution(g, f64::INFINITY)?;
        println!(
            "{g:>6.2} {:>12.8} {:>12.8} {:>12.6e} {:>10}",
            phi_finite(g, 99.0)?,
            limit.mean_coeff,
            limit.variance,
            phi_bounds_check(g)
        );
    }

    println!("\nclosed forms against quadrature");
    for p in [
        Parity::Odd(0),
        Parity::Even(1),
        Parity::Odd(1),
        Parity::Even(2),
        Parity::Odd(2),
        Parity::Even(5),
    ] {
        let g = p.gamma();
        println!(
            "  phi({g}) closed {:.12}  quadrature {:.12}",
            phi_closed(p)?,
            phi_limit(g)?
        );
    }
    println!(
        "recurrence residual at gamma = 1.7: {:.2e}",
        phi_recurrence_residual(1.7)?
    );

    println!("\nReCFG keeps the mean at c; the variance shrinks with gamma1");
    for g in [1.5, 2.0, 2.5] {
        let r = recfg_toy_distribution(g, 0.0, 99.0)?;
        println!(
            "  gamma1 = {g}: mean coeff {:.6}, variance {:.6e}",
            r.mean_coeff, r.variance
        );
    }
    Ok(())
}
