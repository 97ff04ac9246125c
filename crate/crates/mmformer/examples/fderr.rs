fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(0x6d6d_4644);
    let mut worst: f64 = 0.0;
    for r in mmformer::tensor::op_gradchecks_seeded(seed) {
        if r.max_rel_err > worst { worst = r.max_rel_err; }
        println!("{:30} {:.3e} {}", r.name, r.max_rel_err, if r.pass {"PASS"} else {"FAIL"});
    }
    println!("WORST {:.3e}", worst);
}
