mod common;

#[test]
fn full_model_gradient_matches_central_differences() {
    for seed in 0..3 {
        let (worst, checked) = common::gradient_check(seed, 1e-4, 1e-6);
        assert!(checked > 500, "only {checked} parameters");
        assert!(worst < 1e-3, "seed {seed}: max relative error {worst:e}");
        println!("seed {seed}: {checked} parameters, max relative error {worst:e}");
    }
}
