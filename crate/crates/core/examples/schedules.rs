//! Prints signal and noise levels of the noise schedules on a coarse grid.
//!
//! ```text
//! cargo run --example schedules -- tan-3 tan-9
//! ```

use tencdm::schedule::{uniform_grid, NoiseSchedule};

fn main() -> tencdm::Result<()> {
    let mut names: Vec<String> = std::env::args().skip(1).collect();
    if names.is_empty() {
        names = ["cosine", "sqrt", "tan-1", "tan-9"].map(String::from).to_vec();
    }
    let schedules: Vec<NoiseSchedule> = names.iter().map(|n| n.parse()).collect::<tencdm::Result<_>>()?;

    print!("{:>5}", "t");
    for s in &schedules {
        print!("  {:>12}", s.to_string());
    }
    println!("\n{:>5}  (sqrt(alpha_t) / 1 - alpha_t)", "");
    for t in uniform_grid(11) {
        print!("{t:>5.2}");
        for s in &schedules {
            let a = s.alpha(t)?;
            print!("  {:>5.3}/{:<6.3}", a.sqrt(), 1.0 - a);
        }
        println!();
    }
    Ok(())
}
