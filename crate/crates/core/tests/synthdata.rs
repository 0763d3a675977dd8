use taskbn::metrics::srcc;
use taskbn::synthdata::{make_task_dataset, DistortionKind, TaskSpec};

#[test]
fn mos_falls_with_distortion_level() {
    for kind in DistortionKind::ALL {
        let ds = make_task_dataset(&TaskSpec::single(kind), 100, 32, 21).unwrap();
        let all: Vec<_> = ds.train.iter().chain(&ds.val).chain(&ds.test).collect();
        let level: Vec<f64> = all.iter().map(|s| s.level as f64).collect();
        let mos: Vec<f64> = all.iter().map(|s| s.mos as f64).collect();
        let rho = srcc(&level, &mos).unwrap();
        assert!(rho <= -0.95, "{kind}: {rho}");
    }
}

#[test]
fn default_kinds_differ_in_pixel_statistics() {
    let a = make_task_dataset(&TaskSpec::single(DistortionKind::Blur), 40, 32, 3).unwrap();
    let b = make_task_dataset(&TaskSpec::single(DistortionKind::SaltPepper), 40, 32, 3).unwrap();
    let tv = |ds: &taskbn::synthdata::TaskDataset| -> f64 {
        ds.train
            .iter()
            .map(|s| {
                s.image
                    .data()
                    .windows(2)
                    .map(|w| (w[1] - w[0]).abs() as f64)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / ds.train.len() as f64
    };
    assert!(tv(&b) > tv(&a));
}
