mod common;

#[test]
fn analytic_derivatives_match_central_differences() {
    for (n, seed) in [(4, 11), (8, 12)] {
        for (name, dev) in common::gradient_deviations(n, 20, seed) {
            println!("{n}x{n} {name}: {dev:e}");
            assert!(dev <= 1e-5, "{name} on {n}x{n}: {dev:e}");
        }
    }
}
