use terrafit::scalespace::CredState;
use terrafit_wasm::Site;

#[test]
fn planted_disc_shows_up_soft_in_the_finest_detail_band() {
    let site = Site::build(3, -20.0, 40).unwrap();
    assert_eq!(site.grid.len(), 121 * 31);
    let centre = site.grid.nearest_node(30.0, 6.25).unwrap();
    let states = site.credibility(3, 8.0, true, 0.95).unwrap();
    assert_eq!(states[centre], CredState::CredNegative);
    let all = site.credibility(1, f64::INFINITY, false, 0.95).unwrap();
    assert!(all.iter().all(|&s| s == CredState::CredPositive));
    let smooth = site.smooth(3, 0.0).unwrap();
    assert_eq!(smooth, site.fields[2]);
    assert!(site.credibility(4, 8.0, false, 0.95).is_err());
}
