//! The objective metrics on hand-checkable inputs.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use ndarray::{array, Array2};
use savc::eval::{cosine_sim, dtw_align, mcd, mcd_dtw, pearson, MCD_SCALE};

fn main() -> savc::Result<()> {
    let x = Array2::<f64>::zeros((5, 4));
    let y = &x + 0.1;
    println!("MCD scale 10*sqrt(2)/ln(10) = {MCD_SCALE:.4}");
    println!("MCD, constant offset 0.1 on 4 channels: {:.4} dB", mcd(&x, &y)?);

    // A time-stretched copy: framewise MCD is undefined (lengths differ),
    // the aligned one is zero.
    let a = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
    let b = array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [2.0, 2.0]];
    let path = dtw_align(&a, &b)?;
    println!("DTW path {:?}, cost {}", path.path, path.cost);
    println!("aligned MCD {:.4} dB, framewise MCD error: {}", mcd_dtw(&a, &b, false)?, mcd(&a, &b).unwrap_err());

    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0], None)?;
    println!("pearson([1,2,3,4], [1,3,2,4]) = {r:?}");
    let voiced = [true, true, false, true];
    println!(
        "masked pearson (third frame unvoiced) = {:?}",
        pearson(&[1.0, 2.0, 9.0, 3.0], &[2.0, 4.0, -1.0, 6.0], Some(&voiced))?
    );
    println!("pearson with a constant side = {:?}", pearson(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], None)?);
    println!("cosine([1,0], [1,1]) = {:.5}", cosine_sim(&[1.0, 0.0], &[1.0, 1.0])?);
    Ok(())
}
