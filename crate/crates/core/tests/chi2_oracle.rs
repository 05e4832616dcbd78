use bodyregion::stats::chi_square_sf;

#[test]
fn survival_matches_high_precision_oracle() {
    let data = include_str!("fixtures/chi2_sf_oracle.csv");
    let mut worst = 0.0f64;
    for line in data.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (df, x, p): (usize, f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        let got = chi_square_sf(x, df);
        let rel = ((got - p) / p).abs();
        worst = worst.max(rel);
        assert!(rel < 1e-10, "df {df} x {x}: got {got:e}, want {p:e}, rel {rel:e}");
    }
    println!("worst relative error {worst:e}");
}
