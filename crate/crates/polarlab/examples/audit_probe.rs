//! Timing probe for the per-triple cost pieces of the shape audit at the
//! largest shape. Not part of the test suite.

use std::hint::black_box;
use std::time::Instant;

use polarlab::matcore::{gaussian_matrix, haar_orthogonal, svd, Rng};
use polarlab::polar::{exact_polar, newton_schulz, NsConfig};

fn main() {
    let n = 768;
    let mut rng = Rng::from_seed(1);
    let g = gaussian_matrix(n, n, &mut rng);

    let t = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        black_box(svd(black_box(&g)).unwrap());
    }
    println!("svd {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        black_box(haar_orthogonal(n, &mut rng));
    }
    println!("haar {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        black_box(exact_polar(black_box(&g)).unwrap());
    }
    println!("exact_polar {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        black_box(newton_schulz(black_box(&g), &NsConfig::default()).unwrap());
    }
    println!("ns5 full {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        black_box(newton_schulz(black_box(&g), &NsConfig::bf16()).unwrap());
    }
    println!("ns5 bf16 {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);

    let p = haar_orthogonal(n, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        black_box(p.matmul(black_box(&g)).unwrap().matmul_tr(black_box(&p)).unwrap());
    }
    println!("conjugate {n}: {:.3} s", t.elapsed().as_secs_f64() / reps as f64);
}
