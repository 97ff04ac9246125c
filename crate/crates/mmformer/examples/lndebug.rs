use mmformer::tensor::{finite_difference_check, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let width = 5usize;
    let x = Tensor::new(vec![2, 3, 5], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let gamma = Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(0.5..1.5)).collect());
    let beta = Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(-0.3..0.3)).collect());
    let mix = Tensor::new(vec![2, 3, 5], (0..30).map(|i| {
        let mag = 5.0 + (i % 5) as f32;
        if i % 2 == 0 { mag } else { -mag }
    }).collect());

    // analytic via tape
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true).unwrap();
    let g = tape.leaf(gamma.clone(), false).unwrap();
    let b = tape.leaf(beta.clone(), false).unwrap();
    let m = tape.leaf(mix.clone(), false).unwrap();
    let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
    let y = tape.mul(y, m).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    let ga = tape.grad(xv).unwrap().to_vec();

    // independent f64 oracle for LN backward
    let mut oracle = vec![0.0f64; 30];
    for r in 0..6 {
        let xs: Vec<f64> = x.data[r*width..(r+1)*width].iter().map(|&v| v as f64).collect();
        let ms: Vec<f64> = mix.data[r*width..(r+1)*width].iter().map(|&v| v as f64).collect();
        let gs: Vec<f64> = gamma.data.iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / width as f64;
        let var = xs.iter().map(|v| (v-mean)*(v-mean)).sum::<f64>() / width as f64;
        let inv = 1.0/(var + 1e-5_f64).sqrt();
        let gh: Vec<f64> = (0..width).map(|j| ms[j]*gs[j]).collect();
        let xhat: Vec<f64> = xs.iter().map(|v| (v-mean)*inv).collect();
        let s1 = gh.iter().sum::<f64>();
        let s2 = gh.iter().zip(&xhat).map(|(a,b)| a*b).sum::<f64>();
        for j in 0..width {
            oracle[r*width+j] = inv*(gh[j] - s1/width as f64 - xhat[j]*s2/width as f64);
        }
    }
    let mut worst = (0usize, 0.0f64);
    for i in 0..30 {
        let d = (ga[i] as f64 - oracle[i]).abs()/(oracle[i].abs()+1e-8);
        if d > worst.1 { worst = (i, d); }
    }
    println!("worst analytic-vs-f64oracle: idx {} rel {:.3e} (a={:.6} o={:.6})", worst.0, worst.1, ga[worst.0], oracle[worst.0]);

    let err = finite_difference_check(move |t, v| {
        let g = t.leaf(gamma.clone(), false)?;
        let b = t.leaf(beta.clone(), false)?;
        let m = t.leaf(mix.clone(), false)?;
        let y = t.layer_norm(v, g, b, 1e-5)?;
        let y = t.mul(y, m)?;
        t.sum_all(y)
    }, &x, 1e-3).unwrap();
    println!("fd err {:.3e}", err);
}
