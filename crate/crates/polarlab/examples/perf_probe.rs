//! Dev probe: where does a batch-pass spend its time?

use std::time::Instant;

use polarlab::matcore::{derive_seed, gaussian_matrix, DenseMatrix, Rng};
use polarlab::so3::{backward_batch, forward_batch, generate_dataset, So3Model};

fn main() {
    let mut rng = Rng::from_seed(derive_seed(99, "perf"));
    let clouds = generate_dataset(64, 32, &mut rng).unwrap();
    let refs: Vec<_> = clouds.iter().collect();
    let model = So3Model::new(16, 3, &mut rng).unwrap();

    // warm up
    let (preds, cache) = forward_batch(&model, &refs).unwrap();
    let d_preds: Vec<f64> = preds.iter().map(|p| 2.0 * p / 64.0).collect();
    let _ = backward_batch(&model, &cache, &d_preds).unwrap();

    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = forward_batch(&model, &refs).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = backward_batch(&model, &cache, &d_preds).unwrap();
    }
    let bwd = t.elapsed().as_secs_f64() / reps as f64;

    println!("forward  {:.1} ms", fwd * 1e3);
    println!("backward {:.1} ms", bwd * 1e3);
    println!("epoch est: {:.2} s (32 train fwd+bwd + 8 test fwd)", 32.0 * (fwd + bwd) + 8.0 * fwd);

    // raw gemm shapes of the message path
    let phi = gaussian_matrix(64 * 32 * 32, 8, &mut rng);
    let w1f = gaussian_matrix(16, 8, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = phi.matmul_tr(&w1f).unwrap();
    }
    println!("phi gemm (65536x8)(8x16): {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let dz = gaussian_matrix(64 * 32 * 32, 16, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = dz.tr_matmul(&phi).unwrap();
    }
    println!("dzT gemm (16x65536)(65536x8): {:.1} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let cin = gaussian_matrix(2048, 152, &mut rng);
    let cgw = gaussian_matrix(16, 152, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = cin.matmul_tr(&cgw).unwrap();
    }
    println!("cg gemm (2048x152)(152x16): {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // optimizer-cost proxy: Newton-Schulz on the largest layer matrix
    use polarlab::polar::{newton_schulz, NsConfig};
    let g: DenseMatrix = gaussian_matrix(16, 152, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = newton_schulz(&g, &NsConfig::default()).unwrap();
    }
    println!("NS5 16x152: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
