//! Boundary-band and interior statistics of the learned variances.

use probfuse::metrics::uncertainty_stats;
use probfuse::pipeline::{synthesize, RunConfig};
use probfuse::trainer::init_table;

fn visible_foreground(config: &RunConfig) -> usize {
    let scene = synthesize(config).unwrap();
    scene
        .views
        .iter()
        .map(|v| (0..v.len()).filter(|&i| v.correspondence[i].is_some() && v.gt_instance[i] != 0).count())
        .sum()
}

#[test]
fn band_zero_puts_every_foreground_pixel_in_the_interior() {
    let config = RunConfig::default();
    let scene = synthesize(&config).unwrap();
    let table = init_table(&scene, &config.train_config()).unwrap();
    let s = uncertainty_stats(&scene, &table, 0).unwrap();
    assert_eq!(s.boundary.total(), 0);
    assert_eq!(s.interior.total(), visible_foreground(&config));
    // untouched initialization has unit variance everywhere
    assert!((s.interior_mean - 1.0).abs() < 1e-12);
}

#[test]
fn band_grows_with_radius_and_background_is_never_counted() {
    let config = RunConfig::default();
    let scene = synthesize(&config).unwrap();
    let mut table = init_table(&scene, &config.train_config()).unwrap();
    // mark background points with a huge variance; it must not show up
    for v in &scene.views {
        for i in 0..v.len() {
            if let (Some(p), 0) = (v.correspondence[i], v.gt_instance[i]) {
                table.entries[p as usize].log_var.iter_mut().for_each(|l| *l = 6.0);
            }
        }
    }
    let total = visible_foreground(&config);
    let mut last = 0;
    for r in 1..5 {
        let s = uncertainty_stats(&scene, &table, r).unwrap();
        assert_eq!(s.boundary.total() + s.interior.total(), total);
        assert!(s.boundary.total() > last);
        last = s.boundary.total();
        assert!((s.boundary_mean - 1.0).abs() < 1e-12 && (s.interior_mean - 1.0).abs() < 1e-12);
    }
    assert!(uncertainty_stats(&scene, &table, 32).is_err());
}
