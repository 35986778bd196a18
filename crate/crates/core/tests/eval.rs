use patchdiff_core::data::{blob_image, gen_blobs, gen_gradients};
use patchdiff_core::eval::{
    evaluate, features, fit_stats, frechet_distance, has_single_blob, parse_report_csv, report_csv, seam_score,
    GaussianStats,
};
use patchdiff_core::numerics::Tensor;
use patchdiff_core::patching::PatchGrid;

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
    GaussianStats { dim: mean.len(), mean, cov }
}

#[test]
fn one_dimensional_frechet_is_the_scalar_closed_form() {
    for (ma, sa, mb, sb) in [(0.0, 1.0, 0.0, 1.0), (1.5, 0.3, -0.5, 2.0), (0.2, 4.0, 0.1, 0.0)] {
        let d = frechet_distance(&stats(vec![ma], vec![sa * sa]), &stats(vec![mb], vec![sb * sb])).unwrap();
        let want = (sa - sb) * (sa - sb) + (ma - mb) * (ma - mb);
        assert!((d - want).abs() < 1e-9, "{d} vs {want}");
    }
}

#[test]
fn diagonal_covariances_decouple() {
    let (va, vb) = ([1.0, 4.0, 0.25], [9.0, 1.0, 0.25]);
    let diag = |v: &[f64; 3]| {
        let mut m = vec![0.0; 9];
        for i in 0..3 {
            m[i * 4] = v[i];
        }
        m
    };
    let d = frechet_distance(&stats(vec![0.0, 1.0, 2.0], diag(&va)), &stats(vec![1.0, 1.0, 0.0], diag(&vb))).unwrap();
    let want: f64 = 1.0 + 4.0 + va.iter().zip(&vb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
    assert!((d - want).abs() < 1e-9);
}

#[test]
fn zero_covariances_leave_the_mean_term() {
    let a = stats(vec![1.0, 2.0], vec![0.0; 4]);
    let b = stats(vec![-1.0, 0.5], vec![0.0; 4]);
    assert_eq!(frechet_distance(&a, &b).unwrap(), 4.0 + 2.25);
}

#[test]
fn identical_stats_are_at_distance_zero() {
    let imgs = gen_blobs(64, [1, 16, 16], 2).unwrap().images;
    let s = fit_stats(&imgs).unwrap();
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);
}

#[test]
fn stats_match_a_one_pass_estimator() {
    let imgs = gen_gradients(30, [3, 8, 8], 4).unwrap().images;
    let rows: Vec<Vec<f64>> = imgs.iter().map(|i| features(i).unwrap()).collect();
    let (n, d) = (rows.len() as f64, rows[0].len());
    assert_eq!(d, 2 * 2 * 2 * 3);
    let s = fit_stats(&imgs).unwrap();
    let mut sum = vec![0.0; d];
    let mut outer = vec![0.0; d * d];
    for r in &rows {
        for i in 0..d {
            sum[i] += r[i];
            for j in 0..d {
                outer[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        assert!((s.mean[i] - sum[i] / n).abs() < 1e-12);
        for j in 0..d {
            let c = (outer[i * d + j] - sum[i] * sum[j] / n) / (n - 1.0);
            assert!((s.cov[i * d + j] - c).abs() < 1e-9);
        }
    }
}

#[test]
fn constant_images_have_zero_covariance() {
    let imgs = vec![Tensor::<f32>::full(&[1, 8, 8], 0.3); 5];
    let s = fit_stats(&imgs).unwrap();
    assert!(s.cov.iter().all(|&v| v.abs() < 1e-15));
    assert_eq!(s.dim, 8);
}

#[test]
fn jump_on_the_vertical_seam() {
    // Left half 0, right half v. Eight pairs straddle a seam: the four
    // horizontal ones differ by v and the four vertical ones by 0. All
    // interior pairs are flat, so the score is v / 2.
    let v = 0.8f32;
    let img = Tensor::from_fn(&[1, 4, 4], |k| if k % 4 >= 2 { v } else { 0.0 });
    let grid = PatchGrid::new(2, 4, 4).unwrap();
    assert!((seam_score(&img, &grid).unwrap() - f64::from(v) / 2.0).abs() < 1e-7);
    assert_eq!(seam_score(&Tensor::full(&[1, 4, 4], 0.5), &grid).unwrap(), 0.0);
}

#[test]
fn smooth_ramps_have_no_seams() {
    for img in gen_gradients(20, [3, 32, 32], 8).unwrap().images {
        for n in [2, 4, 8] {
            let s = seam_score(&img, &PatchGrid::new(n, 32, 32).unwrap()).unwrap();
            assert!(s.abs() < 0.01 * 2.0, "N = {n}: {s}");
        }
    }
}

#[test]
fn blob_detector_on_clean_data() {
    for img in gen_blobs(100, [1, 32, 32], 6).unwrap().images {
        assert!(has_single_blob(&img, 0.0, 3).unwrap());
    }
    assert!(!has_single_blob(&Tensor::full(&[1, 32, 32], -1.0), 0.0, 3).unwrap());
    let two = blob_image([1, 32, 32], 5, 5, 2.5).zip_map(&blob_image([1, 32, 32], 25, 25, 2.5), f32::max).unwrap();
    assert!(!has_single_blob(&two, 0.0, 3).unwrap());
}

#[test]
fn report_round_trip() {
    let imgs = gen_blobs(20, [1, 16, 16], 1).unwrap().images;
    let reference = gen_blobs(20, [1, 16, 16], 2).unwrap().images;
    let row = evaluate("m", 2, &imgs, &reference).unwrap();
    assert!(row.proxy_fd > 0.0);
    assert_eq!(parse_report_csv(&report_csv(&[row.clone()])).unwrap(), vec![row]);
}
